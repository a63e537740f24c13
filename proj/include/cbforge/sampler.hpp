#pragma once

#include "cbforge/corpus.hpp"
#include "cbforge/embedding.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cbforge {

/// Rule-based splitter: breaks after . ! ? followed by whitespace and an
/// uppercase letter or digit, except after a fixed abbreviation list.
/// Fragments shorter than 2 non-space characters merge into a neighbour.
std::vector<std::string> split_sentences(std::string_view text);

/// Cosine similarity; throws ValidationError on length mismatch or zero norm.
double cosine(std::span<const double> u, std::span<const double> v);

struct CoverageScore {
    std::string narrative_id;
    double score = 0.0;
};

/// Supplies unit-norm sentence vectors per narrative id.
class SentenceSource {
public:
    virtual ~SentenceSource() = default;
    virtual const std::vector<Vector>& sentences(const std::string& narrative_id) = 0;
};

/// Hand-set vectors; used by oracles and tests.
class FixedSentenceSource final : public SentenceSource {
public:
    explicit FixedSentenceSource(std::map<std::string, std::vector<Vector>> vectors)
        : vectors_(std::move(vectors)) {}
    const std::vector<Vector>& sentences(const std::string& narrative_id) override;

private:
    std::map<std::string, std::vector<Vector>> vectors_;
};

/// Splits each narrative field into sentences and embeds them, memoizing per
/// narrative id. Thread-safe.
class EmbeddingSentenceSource final : public SentenceSource {
public:
    EmbeddingSentenceSource(const Corpus& corpus, EmbedderConfig cfg,
                            std::shared_ptr<EmbeddingCache> cache = std::make_shared<EmbeddingCache>());
    const std::vector<Vector>& sentences(const std::string& narrative_id) override;
    /// Embeds every listed narrative not yet memoized in one batched call.
    void prefetch(const std::vector<std::string>& ids);

private:
    const Corpus& corpus_;
    EmbedderConfig cfg_;
    std::shared_ptr<EmbeddingCache> cache_;
    std::mutex mutex_;
    std::map<std::string, std::vector<Vector>> memo_;
};

/// Sentence texts used for coverage: each non-empty field split separately.
std::vector<std::string> narrative_sentences(const Narrative& narrative);

/// Per candidate: mean over its sentences of the max cosine against every
/// sentence of every chosen narrative. An empty chosen set scores 0.
std::vector<CoverageScore> coverage_scores(const std::vector<std::string>& candidates,
                                           const std::vector<std::string>& chosen, SentenceSource& source);

enum class SamplingStrategy { random, coverage };

std::string to_string(SamplingStrategy strategy);
SamplingStrategy sampling_from_string(const std::string& text);

/// `n` distinct ids from pool \ chosen_history. Random: seeded uniform
/// without replacement. Coverage: the n lowest coverage scores against the
/// history, ties by ascending id; an empty history falls back to random.
/// Throws PoolExhausted when fewer than n candidates remain.
std::vector<std::string> select_batch(SamplingStrategy strategy, const std::vector<std::string>& pool,
                                      const std::vector<std::string>& chosen_history, std::size_t n,
                                      std::uint64_t seed, SentenceSource& source);

/// The k narratives most similar to the keyword query (keywords joined by
/// ", "), ranked by descending cosine with ties by ascending id.
DatasetSplit keyword_upsample(const Corpus& corpus, const std::vector<std::string>& keywords, std::size_t k,
                              const EmbedderConfig& cfg, EmbeddingCache* cache = nullptr);

}  // namespace cbforge
