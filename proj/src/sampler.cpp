#include "cbforge/sampler.hpp"

#include "cbforge/error.hpp"
#include "cbforge/rng.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <limits>
#include <set>

namespace cbforge {

namespace {

constexpr std::array<std::string_view, 9> kAbbreviations = {"dr.", "mr.", "mrs.", "ms.", "st.",
                                                            "vs.", "e.g.", "i.e.", "approx."};

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

bool is_closer(char c) { return c == '"' || c == '\'' || c == ')' || c == ']'; }

std::size_t non_space_count(std::string_view s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return !is_space(c); }));
}

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

// Word ending at `end` (exclusive), lowercased, without leading brackets or quotes.
std::string word_before(std::string_view text, std::size_t end) {
    std::size_t b = end;
    while (b > 0 && !is_space(text[b - 1])) --b;
    while (b < end && (text[b] == '(' || text[b] == '"' || text[b] == '\'')) ++b;
    std::string word(text.substr(b, end - b));
    for (auto& c : word) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return word;
}

bool is_abbreviation(std::string_view word) {
    return std::find(kAbbreviations.begin(), kAbbreviations.end(), word) != kAbbreviations.end();
}

}  // namespace

std::vector<std::string> split_sentences(std::string_view text) {
    if (non_space_count(text) == 0) {
        throw ValidationError("cannot split empty or whitespace-only text");
    }
    std::vector<std::string> raw;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c != '.' && c != '!' && c != '?') {
            continue;
        }
        std::size_t j = i + 1;
        while (j < text.size() && is_closer(text[j])) ++j;
        if (j >= text.size() || !is_space(text[j])) {
            continue;
        }
        std::size_t k = j;
        while (k < text.size() && is_space(text[k])) ++k;
        if (k >= text.size()) {
            continue;
        }
        const auto next = static_cast<unsigned char>(text[k]);
        if (!std::isupper(next) && !std::isdigit(next)) {
            continue;
        }
        if (c == '.' && is_abbreviation(word_before(text, i + 1))) {
            continue;
        }
        raw.push_back(trim(text.substr(start, j - start)));
        start = k;
        i = k - 1;
    }
    raw.push_back(trim(text.substr(start)));

    std::vector<std::string> out;
    std::string carry;
    for (auto& s : raw) {
        if (!carry.empty()) {
            s = carry + " " + s;
            carry.clear();
        }
        if (non_space_count(s) < 2) {
            carry = std::move(s);
            continue;
        }
        out.push_back(std::move(s));
    }
    if (!carry.empty()) {
        if (out.empty()) {
            out.push_back(std::move(carry));
        } else {
            out.back() += " " + carry;
        }
    }
    return out;
}

double cosine(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ValidationError("cosine of vectors with different lengths");
    }
    double dot = 0.0;
    double nu = 0.0;
    double nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) {
        throw ValidationError("cosine of a zero vector");
    }
    const double c = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(c, -1.0, 1.0);
}

const std::vector<Vector>& FixedSentenceSource::sentences(const std::string& narrative_id) {
    auto it = vectors_.find(narrative_id);
    if (it == vectors_.end()) {
        throw NotFound("no sentence vectors for " + narrative_id);
    }
    return it->second;
}

std::vector<std::string> narrative_sentences(const Narrative& narrative) {
    std::vector<std::string> out;
    for (const auto* field : {&narrative.cme_text, &narrative.le_text}) {
        if (non_space_count(*field) == 0) {
            continue;
        }
        auto parts = split_sentences(*field);
        out.insert(out.end(), parts.begin(), parts.end());
    }
    return out;
}

EmbeddingSentenceSource::EmbeddingSentenceSource(const Corpus& corpus, EmbedderConfig cfg,
                                                 std::shared_ptr<EmbeddingCache> cache)
    : corpus_(corpus), cfg_(std::move(cfg)), cache_(std::move(cache)) {
    validate(cfg_);
}

void EmbeddingSentenceSource::prefetch(const std::vector<std::string>& ids) {
    std::vector<std::string> todo;
    {
        std::lock_guard lock(mutex_);
        for (const auto& id : ids) {
            if (!memo_.count(id)) {
                todo.push_back(id);
            }
        }
    }
    if (todo.empty()) {
        return;
    }
    std::vector<std::string> texts;
    std::vector<std::size_t> counts;
    for (const auto& id : todo) {
        auto sentences = narrative_sentences(corpus_.at(id));
        counts.push_back(sentences.size());
        texts.insert(texts.end(), sentences.begin(), sentences.end());
    }
    auto vectors = embed_cached(texts, cfg_, *cache_);
    std::lock_guard lock(mutex_);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < todo.size(); ++i) {
        std::vector<Vector> mine(vectors.begin() + static_cast<std::ptrdiff_t>(offset),
                                 vectors.begin() + static_cast<std::ptrdiff_t>(offset + counts[i]));
        offset += counts[i];
        memo_.emplace(todo[i], std::move(mine));
    }
}

const std::vector<Vector>& EmbeddingSentenceSource::sentences(const std::string& narrative_id) {
    {
        std::lock_guard lock(mutex_);
        if (auto it = memo_.find(narrative_id); it != memo_.end()) {
            return it->second;
        }
    }
    prefetch({narrative_id});
    std::lock_guard lock(mutex_);
    return memo_.at(narrative_id);
}

std::vector<CoverageScore> coverage_scores(const std::vector<std::string>& candidates,
                                           const std::vector<std::string>& chosen, SentenceSource& source) {
    if (candidates.empty()) {
        throw ValidationError("coverage_scores needs at least one candidate");
    }
    std::vector<CoverageScore> out;
    out.reserve(candidates.size());
    if (chosen.empty()) {
        for (const auto& id : candidates) {
            out.push_back({id, 0.0});
        }
        return out;
    }
    std::vector<const Vector*> chosen_vectors;
    for (const auto& id : chosen) {
        for (const auto& v : source.sentences(id)) {
            chosen_vectors.push_back(&v);
        }
    }
    for (const auto& id : candidates) {
        const auto& mine = source.sentences(id);
        double total = 0.0;
        for (const auto& sentence : mine) {
            double best = -std::numeric_limits<double>::infinity();
            for (const auto* other : chosen_vectors) {
                best = std::max(best, cosine(sentence, *other));
            }
            total += best;
        }
        out.push_back({id, mine.empty() ? 0.0 : total / static_cast<double>(mine.size())});
    }
    return out;
}

std::string to_string(SamplingStrategy strategy) {
    return strategy == SamplingStrategy::random ? "random" : "coverage";
}

SamplingStrategy sampling_from_string(const std::string& text) {
    if (text == "random") return SamplingStrategy::random;
    if (text == "coverage") return SamplingStrategy::coverage;
    throw ValidationError("sampling must be random or coverage", "sampling");
}

std::vector<std::string> select_batch(SamplingStrategy strategy, const std::vector<std::string>& pool,
                                      const std::vector<std::string>& chosen_history, std::size_t n,
                                      std::uint64_t seed, SentenceSource& source) {
    const std::set<std::string> history(chosen_history.begin(), chosen_history.end());
    std::vector<std::string> candidates;
    std::set<std::string> seen;
    for (const auto& id : pool) {
        if (!history.count(id) && seen.insert(id).second) {
            candidates.push_back(id);
        }
    }
    if (candidates.size() < n) {
        throw PoolExhausted("pool has " + std::to_string(candidates.size()) + " unseen narratives, batch needs " +
                            std::to_string(n));
    }
    if (n == 0) {
        return {};
    }
    if (strategy == SamplingStrategy::random || chosen_history.empty()) {
        Rng rng(seed);
        rng.shuffle(candidates);
        candidates.resize(n);
        return candidates;
    }
    auto scores = coverage_scores(candidates, chosen_history, source);
    std::sort(scores.begin(), scores.end(), [](const CoverageScore& a, const CoverageScore& b) {
        if (a.score != b.score) return a.score < b.score;
        return a.narrative_id < b.narrative_id;
    });
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(scores[i].narrative_id);
    }
    return out;
}

DatasetSplit keyword_upsample(const Corpus& corpus, const std::vector<std::string>& keywords, std::size_t k,
                              const EmbedderConfig& cfg, EmbeddingCache* cache) {
    if (keywords.empty()) {
        throw ValidationError("keyword list is empty", "keywords");
    }
    if (k > corpus.size()) {
        throw ValidationError("k = " + std::to_string(k) + " exceeds corpus size " + std::to_string(corpus.size()),
                              "k");
    }
    std::string query;
    for (const auto& kw : keywords) {
        if (!query.empty()) query += ", ";
        query += kw;
    }
    std::vector<std::string> texts;
    texts.reserve(corpus.size() + 1);
    texts.push_back(query);
    for (const auto& n : corpus.narratives()) {
        texts.push_back(concat_narrative(n));
    }
    EmbeddingCache scratch;
    auto vectors = embed_cached(texts, cfg, cache ? *cache : scratch);

    std::vector<CoverageScore> ranked;
    ranked.reserve(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        ranked.push_back({corpus.narratives()[i].id, cosine(vectors[0], vectors[i + 1])});
    }
    std::sort(ranked.begin(), ranked.end(), [](const CoverageScore& a, const CoverageScore& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.narrative_id < b.narrative_id;
    });
    DatasetSplit split{SplitRole::full, {}, 0};
    for (std::size_t i = 0; i < k; ++i) {
        split.ids.push_back(ranked[i].narrative_id);
    }
    return split;
}

}  // namespace cbforge
