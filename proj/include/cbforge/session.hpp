#pragma once

#include "cbforge/loop_engine.hpp"
#include "cbforge/run_store.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>

namespace cbforge {

struct ModelPair {
    std::unique_ptr<ChatModel> annotator;
    std::unique_ptr<ChatModel> synthesizer;
};

using ModelFactory = std::function<ModelPair(const RunConfig&)>;

/// HTTP clients, or the stub pair when the annotator URL starts with
/// "stub://". The stub answers "stub://?default=<label>", else "0.0" when
/// that is an option, else the last option.
ModelPair default_models(const RunConfig& config);

/// One persisted run: a LoopEngine whose every transition is written to a
/// RunStore before the call returns.
class RunSession {
public:
    /// Creates the run directory, builds the initial state and writes
    /// codebook v0 and state.json. `paused` holds the run before its first
    /// iteration until start() is called.
    static std::unique_ptr<RunSession> create(const std::filesystem::path& dir, const std::string& run_id,
                                              const RunConfig& config, const std::string& corpus_path,
                                              std::shared_ptr<const Corpus> corpus, const LabelSet& val_labels,
                                              const ModelFactory& models, bool paused = false);

    /// Rebuilds the state by replaying iterations.jsonl over the initial
    /// state and checks it against state.json. A pending batch is restored.
    /// The corpus is loaded from the manifest path when not supplied.
    static std::unique_ptr<RunSession> resume(const std::filesystem::path& dir, const ModelFactory& models,
                                              std::shared_ptr<const Corpus> corpus = nullptr);

    const LoopState& state() const { return state_; }
    const RunConfig& config() const { return engine_->config(); }
    const Corpus& corpus() const { return *corpus_; }
    RunStore& store() { return store_; }
    const RunStore& store() const { return store_; }

    void start();
    void begin();
    FeedbackAck submit(const FeedbackSubmission& submission);
    IterationRecord complete();
    /// begin + provider answers + complete.
    IterationRecord step(FeedbackProvider& provider);
    /// Steps until a terminal status or `max_steps` iterations.
    void run(FeedbackProvider& provider, std::optional<std::size_t> max_steps = std::nullopt);
    std::vector<AnnotationRecord> finalize();

private:
    RunSession(RunStore store, std::shared_ptr<const Corpus> corpus, ModelPair models, const RunConfig& config);

    RunStore store_;
    std::shared_ptr<const Corpus> corpus_;
    ModelPair models_;
    std::unique_ptr<LoopEngine> engine_;
    LoopState state_;
};

}  // namespace cbforge
