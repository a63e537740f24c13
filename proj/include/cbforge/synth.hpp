#pragma once

#include "cbforge/corpus.hpp"
#include "cbforge/lm_gateway.hpp"
#include "cbforge/loop_engine.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace cbforge {

/// Any trigger token present in a narrative selects `label`; the highest
/// priority matching rule wins.
struct PlantedRule {
    std::vector<std::string> trigger_tokens;
    std::string label;
    int priority = 0;
};

struct SyntheticCorpusSpec {
    std::string variable = "synthetic";
    std::size_t size = 0;
    std::vector<std::string> classes;
    std::vector<PlantedRule> rules;
    std::string default_label;  // class assigned when no rule matches
    std::vector<std::string> distractor_vocabulary;
    std::vector<double> class_mix;  // aligned with classes
    std::uint64_t seed = 0;
};

/// Throws SynthesisError for infeasible specs and ValidationError for
/// malformed ones.
void validate(const SyntheticCorpusSpec& spec);

SyntheticCorpusSpec synth_spec_from_json(const Json& spec);
SyntheticCorpusSpec load_synth_spec(const std::string& path);
Json to_json(const SyntheticCorpusSpec& spec);

/// Multiclass over spec.classes, or binary when the classes are 0.0/1.0.
Variable synthetic_variable(const SyntheticCorpusSpec& spec);

struct SyntheticWorld {
    Corpus corpus;
    LabelSet truth;
    std::map<std::string, std::string> cot_cache;  // id -> reasoning naming the trigger
    std::map<std::string, std::string> trigger;    // id -> trigger token, absent for default-class items
};

/// Seeded. Every narrative holds at most one trigger token; class counts
/// follow the mix by largest remainder.
SyntheticWorld generate_corpus(const SyntheticCorpusSpec& spec);

/// Label the rules assign to `text`.
std::string apply_rules(const std::vector<PlantedRule>& rules, const std::string& default_label,
                        const std::string& text);

/// Bullet text the stub models read and write.
std::string rule_bullet(const std::vector<std::string>& tokens, const std::string& label);

/// Rule-following model double. It reads bullets of the form
/// "if the narrative mentions X[ or Y], label Z" from the system message,
/// then applies `fixed_rules`, then answers `default_label`.
class StubLm final : public ChatModel {
public:
    StubLm(std::vector<std::string> options, std::string default_label, std::vector<PlantedRule> fixed_rules = {});
    std::string complete(const ModelEndpoint& endpoint, const std::string& system, const std::string& user) override;

private:
    std::vector<std::string> options_;
    std::string default_label_;
    std::vector<PlantedRule> fixed_rules_;
};

/// Guideline-synthesis double: keeps the prior bullets and adds one rule
/// bullet per error whose reasoning names tokens after "mentions".
class StubSynthesizer final : public ChatModel {
public:
    std::string complete(const ModelEndpoint& endpoint, const std::string& system, const std::string& user) override;
};

/// Feedback from a callback; used for scripted experts in tests.
class ScriptedProvider final : public FeedbackProvider {
public:
    using Script = std::function<FeedbackAnswer(const Narrative&, const PendingItem&)>;
    explicit ScriptedProvider(Script script) : script_(std::move(script)) {}
    FeedbackAnswer answer(const Narrative& narrative, const PendingItem& item) override {
        return script_(narrative, item);
    }

private:
    Script script_;
};

/// The three-class legal-interaction world used by the convergence checks:
/// 634 narratives split 74/83/477 across explicit, implicit and none.
SyntheticCorpusSpec legal_interaction_spec(std::uint64_t seed);

}  // namespace cbforge
