#include "cbforge/synth.hpp"

#include "cbforge/embedding.hpp"
#include "cbforge/error.hpp"
#include "cbforge/rng.hpp"
#include "cbforge/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <regex>
#include <set>
#include <sstream>

namespace cbforge {

namespace {

constexpr const char* kTriggerSentences[] = {
    "Family reported that V had been dealing with a {} matter",
    "Records mention a {} in the weeks before the death",
    "A friend said V talked about the {} often",
    "Notes from the scene refer to a {} involving V",
};

constexpr const char* kNeutralSentences[] = {
    "Family reported that V had been under stress",
    "A friend said V seemed withdrawn lately",
    "Records describe a quiet week before the death",
    "Notes from the scene describe nothing unusual",
};

std::string fill(const char* pattern, const std::string& token) {
    std::string s(pattern);
    const auto at = s.find("{}");
    return s.replace(at, 2, token);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    return lines;
}

bool looks_numeric(const std::string& label) {
    return !label.empty() && std::all_of(label.begin(), label.end(), [](char c) {
        return std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '-';
    });
}

std::vector<std::size_t> largest_remainder(const std::vector<double>& mix, std::size_t total) {
    std::vector<std::size_t> counts(mix.size());
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < mix.size(); ++i) {
        const double exact = mix[i] * static_cast<double>(total);
        counts[i] = static_cast<std::size_t>(std::floor(exact));
        assigned += counts[i];
        remainders.emplace_back(exact - std::floor(exact), i);
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t r = 0; assigned < total; ++r, ++assigned) {
        ++counts[remainders[r % remainders.size()].second];
    }
    return counts;
}

std::vector<std::string> split_alternatives(const std::string& phrase) {
    static const std::regex sep(R"(\s+(?:or|and)\s+|\s*/\s*)");
    std::vector<std::string> out;
    for (std::sregex_token_iterator it(phrase.begin(), phrase.end(), sep, -1), end; it != end; ++it) {
        auto t = trim(it->str());
        std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

}  // namespace

void validate(const SyntheticCorpusSpec& spec) {
    if (spec.size == 0) throw ValidationError("synthetic corpus size must be positive", "size");
    if (spec.classes.size() < 2) throw ValidationError("at least two classes are required", "classes");
    if (spec.class_mix.size() != spec.classes.size()) {
        throw ValidationError("class_mix must have one entry per class", "class_mix");
    }
    const double sum = std::accumulate(spec.class_mix.begin(), spec.class_mix.end(), 0.0);
    if (std::fabs(sum - 1.0) > 1e-9) throw ValidationError("class_mix must sum to 1", "class_mix");
    for (double p : spec.class_mix) {
        if (p < 0.0) throw ValidationError("class_mix entries must be non-negative", "class_mix");
    }
    if (std::find(spec.classes.begin(), spec.classes.end(), spec.default_label) == spec.classes.end()) {
        throw ValidationError("default label " + spec.default_label + " is not a class", "default_label");
    }
    std::set<int> priorities;
    std::set<std::string> triggers;
    for (const auto& rule : spec.rules) {
        if (std::find(spec.classes.begin(), spec.classes.end(), rule.label) == spec.classes.end()) {
            throw ValidationError("rule label " + rule.label + " is not a class", "rules");
        }
        if (rule.label == spec.default_label) {
            throw ValidationError("rules may not target the default label", "rules");
        }
        if (!priorities.insert(rule.priority).second) {
            throw ValidationError("rule priorities must be distinct", "rules");
        }
        if (rule.trigger_tokens.empty()) throw ValidationError("a rule needs at least one token", "rules");
        for (const auto& token : rule.trigger_tokens) {
            const auto parts = tokenize(token);
            if (parts.size() != 1 || parts.front() != token) {
                throw ValidationError("trigger token '" + token + "' must be one lowercase word", "rules");
            }
            if (!triggers.insert(token).second) {
                throw ValidationError("trigger token '" + token + "' is used by two rules", "rules");
            }
        }
    }
    const auto counts = largest_remainder(spec.class_mix, spec.size);
    for (std::size_t i = 0; i < spec.classes.size(); ++i) {
        if (counts[i] == 0 || spec.classes[i] == spec.default_label) continue;
        const bool has_rule = std::any_of(spec.rules.begin(), spec.rules.end(),
                                          [&](const PlantedRule& r) { return r.label == spec.classes[i]; });
        if (!has_rule) {
            throw SynthesisError("class " + spec.classes[i] + " has a positive share but no rule can produce it");
        }
    }
    std::size_t usable = 0;
    for (const auto& w : spec.distractor_vocabulary) {
        const auto parts = tokenize(w);
        if (std::none_of(parts.begin(), parts.end(), [&](const std::string& p) { return triggers.count(p); })) {
            ++usable;
        }
    }
    if (usable == 0) {
        throw SynthesisError("no distractor word remains once trigger tokens are excluded");
    }
}

SyntheticCorpusSpec synth_spec_from_json(const Json& j) {
    SyntheticCorpusSpec s;
    try {
        s.variable = j.value("variable", s.variable);
        s.size = j.at("size").get<std::size_t>();
        s.classes = j.at("classes").get<std::vector<std::string>>();
        for (const auto& r : j.value("rules", Json::array())) {
            s.rules.push_back({r.at("tokens").get<std::vector<std::string>>(), r.at("label").get<std::string>(),
                               r.value("priority", 0)});
        }
        s.default_label = j.at("default_label").get<std::string>();
        s.distractor_vocabulary = j.at("distractors").get<std::vector<std::string>>();
        s.class_mix = j.at("class_mix").get<std::vector<double>>();
        s.seed = j.value("seed", std::uint64_t{0});
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("bad synthetic corpus spec: ") + e.what());
    }
    validate(s);
    return s;
}

SyntheticCorpusSpec load_synth_spec(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw NotFound("cannot open " + path);
    try {
        return synth_spec_from_json(Json::parse(in));
    } catch (const Json::parse_error& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

Json to_json(const SyntheticCorpusSpec& s) {
    Json rules = Json::array();
    for (const auto& r : s.rules) {
        rules.push_back({{"tokens", r.trigger_tokens}, {"label", r.label}, {"priority", r.priority}});
    }
    return {{"variable", s.variable},     {"size", s.size},
            {"classes", s.classes},       {"rules", rules},
            {"default_label", s.default_label},
            {"distractors", s.distractor_vocabulary},
            {"class_mix", s.class_mix},   {"seed", s.seed}};
}

Variable synthetic_variable(const SyntheticCorpusSpec& spec) {
    std::vector<std::string> sorted = spec.classes;
    std::sort(sorted.begin(), sorted.end());
    if (sorted == std::vector<std::string>{"0.0", "1.0"}) {
        return binary_variable(spec.variable);
    }
    Variable v;
    v.name = spec.variable;
    v.kind = VariableKind::multiclass;
    v.response_options = spec.classes;
    for (const auto& rule : spec.rules) {
        auto& def = v.option_definitions[rule.label];
        if (!def.empty()) def += "; ";
        def += "the narrative mentions " + [&] {
            std::string s;
            for (std::size_t i = 0; i < rule.trigger_tokens.size(); ++i) {
                if (i) s += " or ";
                s += rule.trigger_tokens[i];
            }
            return s;
        }();
    }
    v.option_definitions[spec.default_label] = "none of the other labels apply";
    return v;
}

std::string apply_rules(const std::vector<PlantedRule>& rules, const std::string& default_label,
                        const std::string& text) {
    const auto tokens = tokenize(text);
    const std::set<std::string> present(tokens.begin(), tokens.end());
    std::vector<const PlantedRule*> ordered;
    for (const auto& r : rules) ordered.push_back(&r);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const PlantedRule* a, const PlantedRule* b) { return a->priority > b->priority; });
    for (const auto* rule : ordered) {
        for (const auto& t : rule->trigger_tokens) {
            if (present.count(t)) return rule->label;
        }
    }
    return default_label;
}

std::string rule_bullet(const std::vector<std::string>& tokens, const std::string& label) {
    std::string s = "if the narrative mentions ";
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += " or ";
        s += tokens[i];
    }
    return s + ", label " + label;
}

SyntheticWorld generate_corpus(const SyntheticCorpusSpec& spec) {
    validate(spec);
    Rng rng(spec.seed);

    std::set<std::string> triggers;
    for (const auto& r : spec.rules) triggers.insert(r.trigger_tokens.begin(), r.trigger_tokens.end());
    std::vector<std::string> vocabulary;
    for (const auto& w : spec.distractor_vocabulary) {
        const auto parts = tokenize(w);
        if (std::none_of(parts.begin(), parts.end(), [&](const std::string& p) { return triggers.count(p); })) {
            vocabulary.push_back(w);
        }
    }

    struct Plan {
        std::string label;
        std::string token;
    };
    std::vector<Plan> plans;
    const auto counts = largest_remainder(spec.class_mix, spec.size);
    for (std::size_t c = 0; c < spec.classes.size(); ++c) {
        const auto& label = spec.classes[c];
        std::vector<std::string> tokens;
        if (label != spec.default_label) {
            std::vector<const PlantedRule*> rules;
            for (const auto& r : spec.rules) {
                if (r.label == label) rules.push_back(&r);
            }
            std::stable_sort(rules.begin(), rules.end(),
                             [](const PlantedRule* a, const PlantedRule* b) { return a->priority > b->priority; });
            for (const auto* r : rules) tokens.insert(tokens.end(), r->trigger_tokens.begin(), r->trigger_tokens.end());
        }
        for (std::size_t i = 0; i < counts[c]; ++i) {
            plans.push_back({label, tokens.empty() ? std::string() : tokens[i % tokens.size()]});
        }
    }
    rng.shuffle(plans);

    auto distractor = [&] {
        const auto& a = vocabulary[rng.index(vocabulary.size())];
        const auto& b = vocabulary[rng.index(vocabulary.size())];
        return "The report notes the " + a + " and the " + b;
    };

    SyntheticWorld world;
    world.truth.variable = spec.variable;
    world.truth.annotator = "planted";
    std::vector<Narrative> narratives;
    narratives.reserve(plans.size());
    for (std::size_t i = 0; i < plans.size(); ++i) {
        const auto& plan = plans[i];
        char id[32];
        std::snprintf(id, sizeof id, "syn-%05zu", i + 1);
        Narrative n;
        n.id = id;
        const std::string age = std::to_string(18 + rng.index(70));
        const std::size_t pattern = rng.index(std::size(kTriggerSentences));
        const std::string key_sentence = plan.token.empty() ? std::string(kNeutralSentences[pattern])
                                                            : fill(kTriggerSentences[pattern], plan.token);
        const bool in_cme = rng.index(2) == 0;
        const std::string d1 = distractor();
        const std::string d2 = distractor();
        if (in_cme) {
            n.cme_text = "V was " + age + ". " + key_sentence + ". " + d1 + ".";
            n.le_text = "Officers responded to the residence. " + d2 + ".";
        } else {
            n.cme_text = "V was " + age + ". " + d1 + ".";
            n.le_text = "Officers responded to the residence. " + key_sentence + ". " + d2 + ".";
        }
        const auto truth = apply_rules(spec.rules, spec.default_label, concat_narrative(n));
        if (truth != plan.label) {
            throw SynthesisError("generated narrative " + n.id + " resolves to " + truth + ", planned " + plan.label);
        }
        n.labels[spec.variable] = truth;
        world.truth.labels[n.id] = truth;
        if (plan.token.empty()) {
            world.cot_cache[n.id] = "No relevant contact is described, so the label is " + truth + ".";
        } else {
            world.trigger[n.id] = plan.token;
            world.cot_cache[n.id] = "The narrative mentions " + plan.token + ", which indicates " + truth + ".";
        }
        narratives.push_back(std::move(n));
    }
    world.corpus = Corpus(std::move(narratives));
    return world;
}

StubLm::StubLm(std::vector<std::string> options, std::string default_label, std::vector<PlantedRule> fixed_rules)
    : options_(std::move(options)), default_label_(std::move(default_label)), fixed_rules_(std::move(fixed_rules)) {
    if (std::find(options_.begin(), options_.end(), default_label_) == options_.end()) {
        throw ValidationError("stub default label " + default_label_ + " is not an option", "default_label");
    }
    std::stable_sort(fixed_rules_.begin(), fixed_rules_.end(),
                     [](const PlantedRule& a, const PlantedRule& b) { return a.priority > b.priority; });
}

std::string StubLm::complete(const ModelEndpoint&, const std::string& system, const std::string& user) {
    static const std::regex bullet(R"(^\*\s*if the narrative mentions (.+), label (\S+)\s*$)");
    std::vector<PlantedRule> learned;
    for (const auto& line : split_lines(system)) {
        std::smatch m;
        const auto text = trim(line);
        if (!std::regex_match(text, m, bullet)) continue;
        const auto label = m[2].str();
        if (std::find(options_.begin(), options_.end(), label) == options_.end()) continue;
        learned.push_back({split_alternatives(m[1].str()), label, 0});
    }

    const auto tokens = tokenize(user);
    const std::set<std::string> present(tokens.begin(), tokens.end());
    std::string label = default_label_;
    std::string trigger;
    auto try_rules = [&](const std::vector<PlantedRule>& rules) {
        for (const auto& rule : rules) {
            for (const auto& t : rule.trigger_tokens) {
                if (present.count(t)) {
                    label = rule.label;
                    trigger = t;
                    return true;
                }
            }
        }
        return false;
    };
    if (!try_rules(learned)) try_rules(fixed_rules_);

    std::string span;
    std::string reason;
    std::vector<std::string> sentences;
    try {
        sentences = split_sentences(user);
    } catch (const ValidationError&) {
    }
    if (!trigger.empty()) {
        for (const auto& s : sentences) {
            const auto words = tokenize(s);
            if (std::find(words.begin(), words.end(), trigger) != words.end()) {
                span = s;
                break;
            }
        }
        reason = "The narrative mentions " + trigger + ", which indicates " + label + ".";
    } else {
        if (!sentences.empty()) span = sentences.front();
        reason = "Nothing in the report matches a guideline, so the label is " + label + ".";
    }
    return render_prediction(reason, span, label, looks_numeric(label) ? "response" : "label");
}

std::string StubSynthesizer::complete(const ModelEndpoint&, const std::string& system, const std::string& user) {
    std::vector<std::string> bullets;
    std::set<std::string> seen;
    auto add = [&](const std::string& b) {
        if (!b.empty() && seen.insert(b).second) bullets.push_back(b);
    };
    for (const auto& line : split_lines(system)) {
        const auto text = trim(line);
        if (text.rfind("* ", 0) == 0) add(trim(text.substr(2)));
    }

    static const std::regex mentions(R"(mentions\s+(.+?)(?:,|;|\.|\s+which\b|$))", std::regex::icase);
    const std::string marker = "### Error ";
    for (auto pos = user.find(marker); pos != std::string::npos;) {
        const auto next = user.find(marker, pos + marker.size());
        const std::string block = user.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
        pos = next;

        auto field = [&](const std::string& name, const std::string& until) {
            const auto at = block.find("\n" + name);
            if (at == std::string::npos) return std::string();
            const auto start = at + 1 + name.size();
            const auto end = block.find(until, start);
            return trim(block.substr(start, end == std::string::npos ? std::string::npos : end - start));
        };
        const auto label = field("Correct label: ", "\n");
        const auto reasoning = field("Human reasoning: ", "\nSpan: ");
        std::smatch m;
        if (label.empty() || !std::regex_search(reasoning, m, mentions)) continue;
        const auto tokens = split_alternatives(m[1].str());
        if (tokens.empty()) continue;
        add(rule_bullet(tokens, label));
    }

    std::string out = "Guidelines:";
    for (const auto& b : bullets) out += "\n* " + b;
    return out;
}

SyntheticCorpusSpec legal_interaction_spec(std::uint64_t seed) {
    SyntheticCorpusSpec s;
    s.variable = "LegalInteraction";
    s.size = 634;
    s.classes = {"implicit_interaction", "explicit_interaction", "no_interaction"};
    s.class_mix = {74.0 / 634.0, 83.0 / 634.0, 477.0 / 634.0};
    s.default_label = "no_interaction";
    s.rules = {
        {{"attorney"}, "explicit_interaction", 10},
        {{"lawyer"}, "explicit_interaction", 9},
        {{"divorce"}, "implicit_interaction", 8},
        {{"custody"}, "implicit_interaction", 7},
        {{"lawsuit"}, "implicit_interaction", 6},
    };
    s.distractor_vocabulary = {"kitchen",  "garage", "neighbor", "weekend", "medication", "argument", "employer",
                               "vehicle",  "bedroom", "phone",   "sister",  "brother",    "roommate", "rent",
                               "church",   "hospital", "letter", "bottle",  "shift",      "dog"};
    s.seed = seed;
    return s;
}

}  // namespace cbforge
