#include "cbforge/session.hpp"

#include "cbforge/error.hpp"
#include "cbforge/synth.hpp"

#include <algorithm>

namespace cbforge {

namespace fs = std::filesystem;

ModelPair default_models(const RunConfig& config) {
    ModelPair pair;
    const auto& url = config.annotator.base_url;
    if (url.rfind("stub://", 0) == 0) {
        const auto& options = config.variable.response_options;
        std::string fallback = options.back();
        if (std::find(options.begin(), options.end(), "0.0") != options.end()) fallback = "0.0";
        if (const auto at = url.find("default="); at != std::string::npos) {
            fallback = url.substr(at + 8);
            fallback = fallback.substr(0, fallback.find('&'));
        }
        pair.annotator = std::make_unique<StubLm>(options, fallback);
    } else {
        pair.annotator = std::make_unique<HttpChatModel>();
    }
    if (config.synthesizer.base_url.rfind("stub://", 0) == 0) {
        pair.synthesizer = std::make_unique<StubSynthesizer>();
    } else {
        pair.synthesizer = std::make_unique<HttpChatModel>();
    }
    return pair;
}

RunSession::RunSession(RunStore store, std::shared_ptr<const Corpus> corpus, ModelPair models,
                       const RunConfig& config)
    : store_(std::move(store)), corpus_(std::move(corpus)), models_(std::move(models)) {
    engine_ = std::make_unique<LoopEngine>(*corpus_, config, *models_.annotator, *models_.synthesizer);
}

std::unique_ptr<RunSession> RunSession::create(const fs::path& dir, const std::string& run_id,
                                               const RunConfig& config, const std::string& corpus_path,
                                               std::shared_ptr<const Corpus> corpus, const LabelSet& val_labels,
                                               const ModelFactory& models, bool paused) {
    validate(config);
    if (!corpus) {
        corpus = std::make_shared<const Corpus>(ingest_corpus_file(corpus_path).corpus);
    }
    // Fail on split or pool problems before anything touches the disk.
    StubSynthesizer unused;
    LoopEngine probe_engine(*corpus, config, unused, unused);
    auto initial = probe_engine.start_run(val_labels, run_id);

    auto store = RunStore::create(dir, run_id, to_json(config), corpus_path);
    std::unique_ptr<RunSession> session(new RunSession(std::move(store), corpus, models(config), config));
    session->state_ = std::move(initial);
    session->state_.status = paused ? RunStatus::paused : RunStatus::running;
    session->store_.write_codebook(session->state_.codebook);
    session->store_.write_state(to_json(session->state_));
    session->store_.set_status(to_string(session->state_.status));
    return session;
}

std::unique_ptr<RunSession> RunSession::resume(const fs::path& dir, const ModelFactory& models,
                                               std::shared_ptr<const Corpus> corpus) {
    auto store = RunStore::open(dir, RunStore::Access::writer);
    const RunConfig config = run_config_from_json(store.config());
    if (!corpus) {
        if (store.manifest().corpus_path.empty()) {
            throw ValidationError("run has no corpus path; supply the corpus", "corpus");
        }
        corpus = std::make_shared<const Corpus>(ingest_corpus_file(store.manifest().corpus_path).corpus);
    }
    const auto saved = store.read_state();
    if (!saved) {
        throw CorruptionError("state.json is missing in " + dir.string());
    }

    // Initial state: the immutable parts of state.json plus codebook v0.
    LoopState state;
    const Codebook v0 = store.read_codebook(0);
    try {
        state.run_id = saved->at("run_id").get<std::string>();
        state.val_split = split_from_json(saved->at("val_split"));
        state.val_labels = saved->value("val_labels", std::map<std::string, std::string>{});
        state.pool = saved->at("pool").get<std::vector<std::string>>();
    } catch (const Json::exception& e) {
        throw CorruptionError("state.json is malformed: " + std::string(e.what()));
    }
    state.codebook = v0;
    state.status = RunStatus::running;

    const auto records = store.iterations();
    for (const auto& r : records) {
        LoopEngine::apply_record(state, iteration_from_json(r), [&](int v) { return store.read_codebook(v); });
    }
    const int saved_t = saved->at("t").get<int>();
    if (records.empty()) {
        state.status = run_status_from_string(saved->at("status").get<std::string>());
    }
    if (saved_t > state.t) {
        throw CorruptionError("state.json is at t=" + std::to_string(saved_t) + " but iterations.jsonl ends at t=" +
                              std::to_string(state.t));
    }

    std::unique_ptr<RunSession> session(new RunSession(std::move(store), corpus, models(config), config));
    if (saved_t == state.t) {
        if (to_json(state) != *saved) {
            throw CorruptionError("state.json disagrees with the replay of iterations.jsonl");
        }
    } else {
        session->store_.write_state(to_json(state));
    }
    if (const auto pending = session->store_.read_pending()) {
        auto batch = pending_from_json(*pending);
        if (batch.t == state.t && !is_terminal(state.status)) {
            state.pending = std::move(batch);
            state.status = RunStatus::awaiting_feedback;
        } else {
            session->store_.clear_pending();
        }
    }
    session->state_ = std::move(state);
    session->store_.set_status(to_string(session->state_.status));
    return session;
}

void RunSession::start() {
    if (state_.status != RunStatus::paused) {
        return;
    }
    state_.status = RunStatus::running;
    store_.write_state(to_json(state_));
    store_.set_status(to_string(state_.status));
}

void RunSession::begin() {
    engine_->begin_iteration(state_);
    if (state_.pending) {
        store_.write_pending(to_json(*state_.pending));
    } else {
        store_.write_state(to_json(state_));
    }
    store_.set_status(to_string(state_.status));
}

FeedbackAck RunSession::submit(const FeedbackSubmission& submission) {
    auto ack = engine_->submit_feedback(state_, submission);
    if (!ack.replayed) {
        store_.write_pending(to_json(*state_.pending));
    }
    return ack;
}

IterationRecord RunSession::complete() {
    auto record = engine_->complete_iteration(state_);
    if (record.codebook_changed) {
        store_.write_codebook(state_.codebook);
    }
    store_.append_iteration(to_json(record));
    store_.write_state(to_json(state_));
    store_.clear_pending();
    return record;
}

IterationRecord RunSession::step(FeedbackProvider& provider) {
    if (!state_.pending) {
        begin();
    }
    if (!state_.pending) {
        throw PoolExhausted(state_.stop_reason);
    }
    for (auto& item : state_.pending->items) {
        if (item.answer) continue;
        auto answer = provider.answer(corpus_->at(item.narrative_id), item);
        if (!config().variable.has_option(answer.correct_label)) {
            throw ValidationError("feedback label " + answer.correct_label + " is not a response option",
                                  "correct_label");
        }
        item.answer = std::move(answer);
    }
    return complete();
}

void RunSession::run(FeedbackProvider& provider, std::optional<std::size_t> max_steps) {
    start();
    for (std::size_t steps = 0; !is_terminal(state_.status); ++steps) {
        if (max_steps && steps >= *max_steps) break;
        if (!state_.pending) {
            begin();
            if (is_terminal(state_.status)) break;
        }
        step(provider);
    }
}

std::vector<AnnotationRecord> RunSession::finalize() {
    auto records = engine_->finalize(state_);
    std::vector<Json> lines;
    lines.reserve(records.size());
    for (const auto& r : records) lines.push_back(to_json(r));
    store_.write_annotations(lines);
    return records;
}

}  // namespace cbforge
