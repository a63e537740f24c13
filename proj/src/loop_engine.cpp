#include "cbforge/loop_engine.hpp"

#include "cbforge/digest.hpp"
#include "cbforge/error.hpp"
#include "cbforge/metrics.hpp"
#include "cbforge/parallel.hpp"

#include <algorithm>
#include <cstdio>
#include <set>

namespace cbforge {

namespace {

// Absorbs rounding in count/total before comparing against the target.
constexpr double kAccuracySlack = 1e-12;

template <typename T>
T field_or(const Json& spec, std::initializer_list<const char*> names, T fallback) {
    for (const char* name : names) {
        if (!spec.contains(name) || spec[name].is_null()) continue;
        try {
            return spec[name].get<T>();
        } catch (const Json::exception& e) {
            throw ValidationError(std::string("bad value for ") + name + ": " + e.what(), name);
        }
    }
    return fallback;
}

std::string trimmed(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

Json metrics_to_json(const MetricsRow& m) {
    return {{"t", m.t},
            {"acc_guide", m.acc_guide},
            {"acc_val", m.acc_val},
            {"val_carried", m.val_carried},
            {"macro_f1_guide", m.macro_f1_guide},
            {"macro_f1_val", m.macro_f1_val},
            {"f1_guide", m.f1_guide},
            {"f1_val", m.f1_val},
            {"guide_size", m.guide_size},
            {"codebook_version", m.codebook_version}};
}

MetricsRow metrics_from_json(const Json& j) {
    MetricsRow m;
    m.t = j.at("t").get<int>();
    m.acc_guide = j.at("acc_guide").get<double>();
    m.acc_val = j.at("acc_val").get<double>();
    m.val_carried = j.value("val_carried", false);
    m.macro_f1_guide = j.value("macro_f1_guide", 0.0);
    m.macro_f1_val = j.value("macro_f1_val", 0.0);
    m.f1_guide = j.value("f1_guide", std::map<std::string, double>{});
    m.f1_val = j.value("f1_val", std::map<std::string, double>{});
    m.guide_size = j.at("guide_size").get<std::size_t>();
    m.codebook_version = j.at("codebook_version").get<int>();
    return m;
}

Json answer_to_json(const FeedbackAnswer& a) {
    Json j = {{"correct_label", a.correct_label},
              {"rationale", a.rationale},
              {"source", to_string(a.source)},
              {"rationale_fallback", a.rationale_fallback}};
    if (a.error_kind) j["error_kind"] = to_string(*a.error_kind);
    if (!a.timestamp.empty()) j["timestamp"] = a.timestamp;
    return j;
}

FeedbackAnswer answer_from_json(const Json& j) {
    FeedbackAnswer a;
    a.correct_label = j.at("correct_label").get<std::string>();
    a.rationale = j.value("rationale", std::string());
    a.source = feedback_source_from_string(j.value("source", std::string("human")));
    a.rationale_fallback = j.value("rationale_fallback", false);
    if (j.contains("error_kind")) a.error_kind = error_kind_from_string(j["error_kind"].get<std::string>());
    a.timestamp = j.value("timestamp", std::string());
    return a;
}

Json item_to_json(const FeedbackItem& f) {
    Json j = {{"feedback_id", f.feedback_id},
              {"narrative_id", f.narrative_id},
              {"model_label", f.model_label},
              {"model_reason", f.model_reason},
              {"model_span", f.model_span},
              {"span_verbatim", f.span_verbatim},
              {"parse_path", f.parse_path},
              {"raw_output", f.raw_output},
              {"unparseable", f.unparseable},
              {"correct_label", f.correct_label},
              {"expert_rationale", f.expert_rationale},
              {"rationale_fallback", f.rationale_fallback},
              {"is_error", f.is_error},
              {"error_kind", to_string(f.error_kind)},
              {"source", to_string(f.source)}};
    if (!f.timestamp.empty()) j["timestamp"] = f.timestamp;
    return j;
}

FeedbackItem item_from_json(const Json& j) {
    FeedbackItem f;
    f.feedback_id = j.at("feedback_id").get<std::string>();
    f.narrative_id = j.at("narrative_id").get<std::string>();
    f.model_label = j.at("model_label").get<std::string>();
    f.model_reason = j.value("model_reason", std::string());
    f.model_span = j.value("model_span", std::string());
    f.span_verbatim = j.value("span_verbatim", false);
    f.parse_path = j.value("parse_path", std::string());
    f.raw_output = j.value("raw_output", std::string());
    f.unparseable = j.value("unparseable", false);
    f.correct_label = j.at("correct_label").get<std::string>();
    f.expert_rationale = j.value("expert_rationale", std::string());
    f.rationale_fallback = j.value("rationale_fallback", false);
    f.is_error = j.at("is_error").get<bool>();
    f.error_kind = error_kind_from_string(j.value("error_kind", std::string("none")));
    f.source = feedback_source_from_string(j.value("source", std::string("human")));
    f.timestamp = j.value("timestamp", std::string());
    return f;
}

struct Scored {
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::map<std::string, double> per_class;
};

Scored score(const std::vector<std::pair<std::string, std::string>>& gold,
             const std::map<std::string, std::string>& predictions, const std::vector<std::string>& classes) {
    Scored s;
    if (gold.empty()) return s;
    std::vector<LabelPair> pairs;
    pairs.reserve(gold.size());
    for (const auto& [id, label] : gold) {
        auto it = predictions.find(id);
        pairs.push_back({id, it == predictions.end() ? std::string(kUnparseableLabel) : it->second, label});
    }
    s.accuracy = agreement(pairs);
    auto f1 = macro_f1(pairs, classes);
    s.macro_f1 = f1.macro;
    s.per_class = std::move(f1.per_class);
    return s;
}

struct Attempt {
    Prediction prediction;
    bool failed = false;
    std::string failure;
};

Attempt attempt_predict(ChatModel& model, const ModelEndpoint& endpoint, const Codebook& codebook,
                        const Narrative& narrative) {
    Attempt a;
    a.prediction.narrative_id = narrative.id;
    const std::string text = concat_narrative(narrative);
    try {
        a.prediction = predict(model, endpoint, narrative.id, text, render_annotation_prompt(codebook, text),
                               codebook.response_options);
    } catch (const UnparseableOutput& e) {
        a.failed = true;
        a.failure = e.what();
        a.prediction.raw_output = e.raw();
    } catch (const InvalidLabel& e) {
        a.failed = true;
        a.failure = e.what();
        a.prediction.raw_output = e.raw();
    } catch (const Error& e) {
        a.failed = true;
        a.failure = e.what();
    }
    if (a.failed) {
        a.prediction.label = kUnparseableLabel;
    }
    return a;
}

}  // namespace

PromptTemplates RunConfig::effective_templates() const {
    return templates ? *templates : PromptTemplates::defaults_for(variable.kind);
}

void validate(const RunConfig& c) {
    validate(c.variable);
    if (c.batch_size < 1) throw ValidationError("batch size n must be at least 1", "n");
    if (c.min_guide < 1) throw ValidationError("minimum guide size k must be at least 1", "k");
    if (c.budget < c.min_guide) throw ValidationError("budget b must be at least k", "b");
    if (!(c.target_accuracy > 0.0 && c.target_accuracy <= 1.0)) {
        throw ValidationError("target accuracy m must lie in (0, 1]", "m");
    }
    if (c.val_per_class < 1) throw ValidationError("validation size per class j must be at least 1", "j");
    if (c.max_iterations < 1) throw ValidationError("max_iterations must be at least 1", "max_iterations");
    if (!c.keywords.empty() && c.upsample_k < 1) {
        throw ValidationError("upsample_k must be positive when keywords are given", "upsample_k");
    }
    validate(c.annotator);
    validate(c.synthesizer);
    validate(c.embedder);
    validate(c.effective_templates());
}

Json to_json(const ModelEndpoint& e) {
    return {{"base_url", e.base_url},
            {"model", e.model_id},
            {"temperature", e.temperature},
            {"max_tokens", e.max_tokens},
            {"timeout_ms", e.timeout.count()},
            {"max_retries", e.max_retries},
            {"parallelism", e.parallelism_cap}};
}

ModelEndpoint endpoint_from_json(const Json& spec) {
    ModelEndpoint e;
    if (!spec.is_object()) throw ValidationError("endpoint must be an object", "endpoint");
    e.base_url = field_or(spec, {"base_url", "url"}, e.base_url);
    e.model_id = field_or(spec, {"model", "model_id"}, e.model_id);
    e.temperature = field_or(spec, {"temperature"}, e.temperature);
    e.max_tokens = field_or(spec, {"max_tokens"}, e.max_tokens);
    e.timeout = std::chrono::milliseconds(field_or<long long>(spec, {"timeout_ms"}, e.timeout.count()));
    e.max_retries = field_or(spec, {"max_retries"}, e.max_retries);
    e.parallelism_cap = field_or(spec, {"parallelism", "parallelism_cap"}, e.parallelism_cap);
    return e;
}

Json to_json(const EmbedderConfig& c) {
    return {{"url", c.endpoint_url},
            {"model", c.model_name},
            {"dimension", c.dimension},
            {"batch_size", c.batch_size},
            {"mode", c.mode == EmbedderMode::remote ? "remote" : "deterministic_test"},
            {"parallelism", c.parallelism},
            {"max_retries", c.max_retries},
            {"timeout_ms", c.timeout.count()}};
}

EmbedderConfig embedder_from_json(const Json& spec) {
    EmbedderConfig c;
    if (!spec.is_object()) throw ValidationError("embedder must be an object", "embedder");
    c.endpoint_url = field_or(spec, {"url", "endpoint_url"}, c.endpoint_url);
    c.model_name = field_or(spec, {"model", "model_name"}, c.model_name);
    c.dimension = field_or(spec, {"dimension"}, c.dimension);
    c.batch_size = field_or(spec, {"batch_size"}, c.batch_size);
    const auto mode = field_or<std::string>(spec, {"mode"}, "deterministic_test");
    if (mode == "remote") c.mode = EmbedderMode::remote;
    else if (mode == "deterministic_test") c.mode = EmbedderMode::deterministic_test;
    else throw ValidationError("unknown embedder mode " + mode, "mode");
    c.parallelism = field_or(spec, {"parallelism"}, c.parallelism);
    c.max_retries = field_or(spec, {"max_retries"}, c.max_retries);
    c.timeout = std::chrono::milliseconds(field_or<long long>(spec, {"timeout_ms"}, c.timeout.count()));
    return c;
}

Json to_json(const RunConfig& c) {
    Json j = {{"variable", to_json(c.variable)},
              {"b", c.budget},
              {"n", c.batch_size},
              {"k", c.min_guide},
              {"m", c.target_accuracy},
              {"j", c.val_per_class},
              {"sampling", to_string(c.sampling)},
              {"seed", c.seed},
              {"max_iterations", c.max_iterations},
              {"keywords", c.keywords},
              {"upsample_k", c.upsample_k},
              {"annotator", to_json(c.annotator)},
              {"synthesizer", to_json(c.synthesizer)},
              {"embedder", to_json(c.embedder)},
              {"update_mode", to_string(c.update_mode)},
              {"rationale_only_errors", c.rationale_only_errors}};
    if (c.templates) {
        j["templates"] = {{"annotation", c.templates->annotation_template}, {"update", c.templates->update_template}};
    }
    return j;
}

RunConfig run_config_from_json(const Json& spec) {
    if (!spec.is_object()) throw ValidationError("run config must be an object");
    RunConfig c;
    if (!spec.contains("variable")) throw ValidationError("variable is required", "variable");
    try {
        c.variable = variable_from_json(spec.at("variable"));
    } catch (const ValidationError& e) {
        throw ValidationError(e.what(), "variable");
    } catch (const Json::exception& e) {
        throw ValidationError(std::string("bad variable: ") + e.what(), "variable");
    }
    auto count = [&](std::initializer_list<const char*> names, std::size_t fallback, const char* field) {
        for (const char* name : names) {
            if (spec.contains(name) && spec[name].is_number() && spec[name].get<double>() < 0) {
                throw ValidationError(std::string(field) + " must be non-negative", field);
            }
        }
        return field_or(spec, names, fallback);
    };
    c.budget = count({"b", "budget"}, c.budget, "b");
    c.batch_size = count({"n", "batch_size"}, c.batch_size, "n");
    c.min_guide = count({"k", "min_guide"}, c.min_guide, "k");
    c.target_accuracy = field_or(spec, {"m", "target_accuracy"}, c.target_accuracy);
    c.val_per_class = count({"j", "val_per_class"}, c.val_per_class, "j");
    c.sampling = sampling_from_string(field_or<std::string>(spec, {"sampling"}, to_string(c.sampling)));
    c.seed = field_or(spec, {"seed"}, c.seed);
    c.max_iterations = count({"max_iterations"}, c.max_iterations, "max_iterations");
    c.keywords = field_or(spec, {"keywords"}, c.keywords);
    c.upsample_k = count({"upsample_k"}, c.upsample_k, "upsample_k");
    if (spec.contains("annotator")) c.annotator = endpoint_from_json(spec["annotator"]);
    if (spec.contains("synthesizer")) c.synthesizer = endpoint_from_json(spec["synthesizer"]);
    else c.synthesizer = c.annotator;
    if (spec.contains("embedder")) c.embedder = embedder_from_json(spec["embedder"]);
    c.update_mode = update_mode_from_string(field_or<std::string>(spec, {"update_mode"}, to_string(c.update_mode)));
    c.rationale_only_errors = field_or(spec, {"rationale_only_errors"}, c.rationale_only_errors);
    if (spec.contains("templates") && !spec["templates"].is_null()) {
        const auto& t = spec["templates"];
        PromptTemplates templates = PromptTemplates::defaults_for(c.variable.kind);
        templates.annotation_template = field_or(t, {"annotation"}, templates.annotation_template);
        templates.update_template = field_or(t, {"update"}, templates.update_template);
        c.templates = templates;
    }
    validate(c);
    return c;
}

std::string to_string(RunStatus status) {
    switch (status) {
        case RunStatus::paused: return "paused";
        case RunStatus::running: return "running";
        case RunStatus::awaiting_feedback: return "awaiting_feedback";
        case RunStatus::converged: return "converged";
        case RunStatus::budget_exhausted: return "budget_exhausted";
        case RunStatus::capped: return "capped";
    }
    return "running";
}

RunStatus run_status_from_string(const std::string& text) {
    for (auto s : {RunStatus::paused, RunStatus::running, RunStatus::awaiting_feedback, RunStatus::converged,
                   RunStatus::budget_exhausted, RunStatus::capped}) {
        if (to_string(s) == text) return s;
    }
    throw ValidationError("unknown run status " + text, "status");
}

bool is_terminal(RunStatus status) {
    return status == RunStatus::converged || status == RunStatus::budget_exhausted || status == RunStatus::capped;
}

std::string to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::none: return "none";
        case ErrorKind::label: return "label";
        case ErrorKind::rationale_only: return "rationale-only";
    }
    return "none";
}

ErrorKind error_kind_from_string(const std::string& text) {
    if (text == "none") return ErrorKind::none;
    if (text == "label") return ErrorKind::label;
    if (text == "rationale-only" || text == "rationale_only") return ErrorKind::rationale_only;
    throw ValidationError("unknown error kind " + text, "error_kind");
}

std::string to_string(FeedbackSource source) { return source == FeedbackSource::human ? "human" : "simulated"; }

FeedbackSource feedback_source_from_string(const std::string& text) {
    if (text == "human") return FeedbackSource::human;
    if (text == "simulated") return FeedbackSource::simulated;
    throw ValidationError("unknown feedback source " + text, "source");
}

Json to_json(const PendingBatch& batch) {
    Json items = Json::array();
    for (const auto& item : batch.items) {
        Json j = {{"feedback_id", item.feedback_id},
                  {"narrative_id", item.narrative_id},
                  {"prediction", to_json(item.prediction)},
                  {"unparseable", item.unparseable},
                  {"failure", item.failure},
                  {"answer", item.answer ? answer_to_json(*item.answer) : Json(nullptr)}};
        items.push_back(std::move(j));
    }
    return {{"t", batch.t}, {"items", std::move(items)}};
}

PendingBatch pending_from_json(const Json& record) {
    PendingBatch batch;
    batch.t = record.at("t").get<int>();
    for (const auto& j : record.at("items")) {
        PendingItem item;
        item.feedback_id = j.at("feedback_id").get<std::string>();
        item.narrative_id = j.at("narrative_id").get<std::string>();
        item.prediction = prediction_from_json(j.at("prediction"));
        item.unparseable = j.value("unparseable", false);
        item.failure = j.value("failure", std::string());
        if (j.contains("answer") && !j["answer"].is_null()) item.answer = answer_from_json(j["answer"]);
        batch.items.push_back(std::move(item));
    }
    return batch;
}

Json to_json(const IterationRecord& r) {
    Json items = Json::array();
    for (const auto& f : r.items) items.push_back(item_to_json(f));
    Json j = {{"t", r.t},
              {"batch", r.batch},
              {"items", std::move(items)},
              {"errors", r.error_ids},
              {"codebook_version", r.codebook_version},
              {"codebook_changed", r.codebook_changed},
              {"synthesis", r.synthesis},
              {"synthesis_note", r.synthesis_note},
              {"metrics", metrics_to_json(r.metrics)},
              {"status", to_string(r.status)},
              {"stop_reason", r.stop_reason}};
    if (r.guide_predictions) j["guide_predictions"] = *r.guide_predictions;
    return j;
}

IterationRecord iteration_from_json(const Json& j) {
    IterationRecord r;
    r.t = j.at("t").get<int>();
    r.batch = j.at("batch").get<std::vector<std::string>>();
    for (const auto& item : j.at("items")) r.items.push_back(item_from_json(item));
    r.error_ids = j.at("errors").get<std::vector<std::string>>();
    r.codebook_version = j.at("codebook_version").get<int>();
    r.codebook_changed = j.value("codebook_changed", false);
    r.synthesis = j.value("synthesis", std::string("skipped"));
    r.synthesis_note = j.value("synthesis_note", std::string());
    if (j.contains("guide_predictions")) {
        r.guide_predictions = j["guide_predictions"].get<std::map<std::string, std::string>>();
    }
    r.metrics = metrics_from_json(j.at("metrics"));
    r.status = run_status_from_string(j.at("status").get<std::string>());
    r.stop_reason = j.value("stop_reason", std::string());
    return r;
}

std::vector<std::string> LoopState::guide_ids() const {
    std::vector<std::string> ids;
    ids.reserve(guide.size());
    for (const auto& g : guide) ids.push_back(g.narrative_id);
    return ids;
}

Json to_json(const LoopState& s) {
    Json guide = Json::array();
    for (const auto& g : s.guide) {
        guide.push_back({{"id", g.narrative_id}, {"label", g.label}, {"rationale", g.rationale}});
    }
    Json history = Json::array();
    for (const auto& m : s.history) history.push_back(metrics_to_json(m));
    return {{"run_id", s.run_id},
            {"t", s.t},
            {"status", to_string(s.status)},
            {"stop_reason", s.stop_reason},
            {"codebook_version", s.codebook.version},
            {"guide", std::move(guide)},
            {"guide_predictions", s.guide_predictions},
            {"val_split", to_json(s.val_split)},
            {"val_labels", s.val_labels},
            {"pool", s.pool},
            {"history", std::move(history)}};
}

LoopState state_from_json(const Json& j, const Codebook& codebook) {
    LoopState s;
    s.run_id = j.at("run_id").get<std::string>();
    s.t = j.at("t").get<int>();
    s.status = run_status_from_string(j.at("status").get<std::string>());
    s.stop_reason = j.value("stop_reason", std::string());
    if (j.at("codebook_version").get<int>() != codebook.version) {
        throw CorruptionError("state refers to codebook version " + std::to_string(j["codebook_version"].get<int>()) +
                              " but version " + std::to_string(codebook.version) + " was supplied");
    }
    s.codebook = codebook;
    for (const auto& g : j.at("guide")) {
        s.guide.push_back({g.at("id").get<std::string>(), g.at("label").get<std::string>(),
                           g.value("rationale", std::string())});
    }
    s.guide_predictions = j.value("guide_predictions", std::map<std::string, std::string>{});
    s.val_split = split_from_json(j.at("val_split"));
    s.val_labels = j.value("val_labels", std::map<std::string, std::string>{});
    s.pool = j.at("pool").get<std::vector<std::string>>();
    for (const auto& m : j.at("history")) s.history.push_back(metrics_from_json(m));
    return s;
}

StopDecision check_stopping(const LoopState& state, const RunConfig& config) {
    StopDecision d;
    if (state.history.empty()) {
        return d;
    }
    const auto& last = state.history.back();
    const std::size_t guide = state.guide.size();
    if (last.acc_val + kAccuracySlack >= config.target_accuracy && guide >= config.min_guide) {
        d.stop = true;
        d.status = RunStatus::converged;
        d.reason = "validation accuracy " + std::to_string(last.acc_val) + " reached the target with " +
                   std::to_string(guide) + " validated items";
        return d;
    }
    if (guide > config.budget) {
        d.stop = true;
        d.status = RunStatus::budget_exhausted;
        d.reason = std::to_string(guide) + " validated items exceed the budget of " + std::to_string(config.budget);
        return d;
    }
    if (static_cast<std::size_t>(state.t) >= config.max_iterations) {
        d.stop = true;
        d.status = RunStatus::capped;
        d.reason = "reached max_iterations " + std::to_string(config.max_iterations);
        return d;
    }
    const auto guide_ids = state.guide_ids();
    const std::set<std::string> used(guide_ids.begin(), guide_ids.end());
    std::size_t remaining = 0;
    for (const auto& id : state.pool) {
        if (!used.count(id)) ++remaining;
    }
    if (remaining < config.batch_size) {
        d.stop = true;
        d.status = RunStatus::capped;
        d.reason = "pool exhausted: " + std::to_string(remaining) + " items left for a batch of " +
                   std::to_string(config.batch_size);
    }
    return d;
}

SimulatedProvider::SimulatedProvider(LabelSet reference, std::map<std::string, std::string> cot_cache,
                                     const std::vector<std::string>& required_ids)
    : reference_(std::move(reference)), cot_cache_(std::move(cot_cache)) {
    std::vector<std::string> missing;
    for (const auto& id : required_ids) {
        if (!reference_.labels.count(id)) missing.push_back(id);
    }
    if (!missing.empty()) {
        throw ValidationError(std::to_string(missing.size()) + " pool ids lack a reference label, first " +
                                  missing.front(),
                              "reference_labels");
    }
}

FeedbackAnswer SimulatedProvider::answer(const Narrative& narrative, const PendingItem&) {
    auto label = reference_.labels.find(narrative.id);
    if (label == reference_.labels.end()) {
        throw ValidationError("no reference label for " + narrative.id, "reference_labels");
    }
    FeedbackAnswer a;
    a.correct_label = label->second;
    a.source = FeedbackSource::simulated;
    if (auto it = cot_cache_.find(narrative.id); it != cot_cache_.end()) {
        a.rationale = it->second;
    } else {
        a.rationale = "reference label is " + label->second;
        a.rationale_fallback = true;
    }
    return a;
}

Json to_json(const AnnotationRecord& r) {
    Json j = {{"id", r.narrative_id}, {"label", r.label}, {"reason", r.reason}, {"span", r.span}};
    if (r.unresolved) {
        j["unresolved"] = true;
        j["note"] = r.note;
    }
    return j;
}

AnnotationRecord annotation_from_json(const Json& j) {
    AnnotationRecord r;
    r.narrative_id = j.at("id").get<std::string>();
    r.label = j.value("label", std::string());
    r.reason = j.value("reason", std::string());
    r.span = j.value("span", std::string());
    r.unresolved = j.value("unresolved", false);
    r.note = j.value("note", std::string());
    return r;
}

LoopEngine::LoopEngine(const Corpus& corpus, RunConfig config, ChatModel& annotator, ChatModel& synthesizer,
                       std::shared_ptr<SentenceSource> sentences)
    : corpus_(corpus),
      config_(std::move(config)),
      annotator_(annotator),
      synthesizer_(synthesizer),
      sentences_(std::move(sentences)) {
    validate(config_);
}

std::string LoopEngine::feedback_id(int t, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "fb-%04d-%02zu", t, index);
    return buf;
}

SentenceSource& LoopEngine::sentence_source() {
    if (!sentences_) {
        sentences_ = std::make_shared<EmbeddingSentenceSource>(corpus_, config_.embedder);
    }
    return *sentences_;
}

LoopState LoopEngine::start_run(const LabelSet& val_labels, std::string run_id) const {
    LoopState s;
    s.run_id = std::move(run_id);
    s.val_split = build_validation_split(val_labels, config_.val_per_class, config_.seed,
                                         config_.variable.response_options);
    for (const auto& id : s.val_split.ids) {
        if (!corpus_.contains(id)) {
            throw ValidationError("validation id " + id + " is not in the corpus", "j");
        }
        s.val_labels[id] = val_labels.labels.at(id);
    }
    const std::set<std::string> val(s.val_split.ids.begin(), s.val_split.ids.end());
    std::vector<std::string> candidates;
    if (!config_.keywords.empty()) {
        candidates = keyword_upsample(corpus_, config_.keywords, config_.upsample_k, config_.embedder).ids;
    } else {
        candidates = corpus_.ids();
    }
    for (auto& id : candidates) {
        if (!val.count(id)) s.pool.push_back(std::move(id));
    }
    if (s.pool.empty()) {
        throw ValidationError("the sampling pool is empty once the validation split is removed", "pool");
    }
    if (s.pool.size() < config_.batch_size) {
        throw ValidationError("the sampling pool holds " + std::to_string(s.pool.size()) +
                                  " items, fewer than one batch",
                              "n");
    }
    s.codebook = init_codebook(config_.variable, config_.effective_templates());
    s.status = RunStatus::running;
    return s;
}

std::vector<PendingItem> LoopEngine::predict_batch(const Codebook& codebook, const std::vector<std::string>& ids) {
    std::vector<PendingItem> items(ids.size());
    parallel_for(ids.size(), config_.annotator.parallelism_cap, [&](std::size_t i) {
        auto attempt = attempt_predict(annotator_, config_.annotator, codebook, corpus_.at(ids[i]));
        items[i].narrative_id = ids[i];
        items[i].prediction = std::move(attempt.prediction);
        items[i].unparseable = attempt.failed;
        items[i].failure = std::move(attempt.failure);
    });
    return items;
}

LoopEngine::Evaluation LoopEngine::evaluate(const Codebook& codebook,
                                            const std::vector<std::pair<std::string, std::string>>& gold) {
    std::vector<std::string> ids;
    ids.reserve(gold.size());
    for (const auto& g : gold) ids.push_back(g.first);
    Evaluation ev;
    for (auto& item : predict_batch(codebook, ids)) {
        ev.predictions[item.narrative_id] = item.prediction.label;
    }
    auto s = score(gold, ev.predictions, config_.variable.response_options);
    ev.accuracy = s.accuracy;
    ev.macro_f1 = s.macro_f1;
    ev.per_class = std::move(s.per_class);
    return ev;
}

void LoopEngine::begin_iteration(LoopState& state) {
    if (is_terminal(state.status)) {
        throw SequencingError("run is " + to_string(state.status) + "; no further iterations are permitted");
    }
    if (state.pending) {
        throw SequencingError("iteration " + std::to_string(state.t) + " is already awaiting feedback");
    }
    if (state.status != RunStatus::running) {
        throw SequencingError("run is " + to_string(state.status) + ", not running");
    }
    std::vector<std::string> ids;
    try {
        FixedSentenceSource none({});
        SentenceSource& source = config_.sampling == SamplingStrategy::coverage ? sentence_source() : none;
        ids = select_batch(config_.sampling, state.pool, state.guide_ids(), config_.batch_size,
                           derive_seed(config_.seed, static_cast<std::uint64_t>(state.t)), source);
    } catch (const PoolExhausted& e) {
        state.status = RunStatus::capped;
        state.stop_reason = std::string("pool exhausted: ") + e.what();
        return;
    }
    PendingBatch batch;
    batch.t = state.t;
    batch.items = predict_batch(state.codebook, ids);
    for (std::size_t i = 0; i < batch.items.size(); ++i) {
        batch.items[i].feedback_id = feedback_id(state.t, i);
    }
    state.pending = std::move(batch);
    state.status = RunStatus::awaiting_feedback;
}

FeedbackAck LoopEngine::submit_feedback(LoopState& state, const FeedbackSubmission& submission) const {
    if (!state.pending) {
        throw SequencingError("no batch is awaiting feedback");
    }
    auto& items = state.pending->items;
    auto it = std::find_if(items.begin(), items.end(),
                           [&](const PendingItem& p) { return p.feedback_id == submission.feedback_id; });
    if (it == items.end()) {
        throw NotFound("unknown feedback id " + submission.feedback_id);
    }
    if (!config_.variable.has_option(submission.correct_label)) {
        throw ValidationError("label " + submission.correct_label + " is not a response option", "correct_label");
    }
    if (submission.error_kind == ErrorKind::rationale_only && !config_.rationale_only_errors) {
        throw ValidationError("rationale-only errors are disabled for this run", "error_kind");
    }
    FeedbackAnswer answer;
    answer.correct_label = submission.correct_label;
    answer.rationale = submission.rationale;
    if (submission.error_kind && *submission.error_kind == ErrorKind::rationale_only) {
        answer.error_kind = ErrorKind::rationale_only;
    }
    answer.source = FeedbackSource::human;
    answer.timestamp = submission.timestamp;

    FeedbackAck ack;
    ack.feedback_id = submission.feedback_id;
    if (it->answer) {
        const bool same = it->answer->correct_label == answer.correct_label &&
                          it->answer->rationale == answer.rationale && it->answer->error_kind == answer.error_kind;
        if (!same) {
            throw Conflict("feedback " + submission.feedback_id + " was already submitted with different content");
        }
        ack.replayed = true;
    } else {
        it->answer = std::move(answer);
    }
    ack.remaining = static_cast<std::size_t>(
        std::count_if(items.begin(), items.end(), [](const PendingItem& p) { return !p.answer; }));
    ack.batch_complete = ack.remaining == 0;
    return ack;
}

IterationRecord LoopEngine::complete_iteration(LoopState& state) {
    if (!state.pending) {
        throw SequencingError("no batch is awaiting feedback");
    }
    for (const auto& item : state.pending->items) {
        if (!item.answer) {
            throw SequencingError("feedback " + item.feedback_id + " is still outstanding");
        }
    }
    const int t = state.t;
    IterationRecord rec;
    rec.t = t;
    std::vector<GuidelineError> errors;
    for (const auto& item : state.pending->items) {
        const auto& a = *item.answer;
        FeedbackItem f;
        f.feedback_id = item.feedback_id;
        f.narrative_id = item.narrative_id;
        f.model_label = item.prediction.label;
        f.model_reason = item.prediction.reason;
        f.model_span = item.prediction.span;
        f.span_verbatim = item.prediction.span_verbatim;
        f.parse_path = item.unparseable ? std::string() : to_string(item.prediction.parse_path);
        f.raw_output = item.prediction.raw_output;
        f.unparseable = item.unparseable;
        f.correct_label = a.correct_label;
        f.expert_rationale = a.rationale;
        f.rationale_fallback = a.rationale_fallback;
        f.source = a.source;
        f.timestamp = a.timestamp;
        if (item.unparseable || f.model_label != f.correct_label) {
            f.error_kind = ErrorKind::label;
        } else if (config_.rationale_only_errors && a.error_kind == ErrorKind::rationale_only) {
            f.error_kind = ErrorKind::rationale_only;
        }
        f.is_error = f.error_kind != ErrorKind::none;

        rec.batch.push_back(item.narrative_id);
        state.guide.push_back({item.narrative_id, a.correct_label, a.rationale});
        state.guide_predictions[item.narrative_id] = f.model_label;
        if (f.is_error) {
            rec.error_ids.push_back(f.feedback_id);
            errors.push_back({f.feedback_id, concat_narrative(corpus_.at(f.narrative_id)), f.model_label,
                              f.correct_label, f.expert_rationale, f.model_span});
        }
        rec.items.push_back(std::move(f));
    }

    Codebook next = state.codebook;
    rec.synthesis = "skipped";
    if (!errors.empty()) {
        const auto templates = config_.effective_templates();
        try {
            auto reply = synthesize_guidelines(synthesizer_, config_.synthesizer, state.codebook, errors,
                                               templates.update_template);
            next = apply_update(state.codebook, parse_guideline_list(reply), t, rec.error_ids, config_.update_mode);
            rec.synthesis = "ok";
        } catch (const Error& e) {
            std::vector<std::string> rationales;
            for (const auto& err : errors) {
                auto r = trimmed(err.rationale);
                if (!r.empty()) rationales.push_back(std::move(r));
            }
            next = apply_update(state.codebook, rationales, t, rec.error_ids, UpdateMode::append);
            rec.synthesis = "fallback";
            rec.synthesis_note = e.what();
        }
        rec.codebook_changed = true;
    }
    state.codebook = std::move(next);
    rec.codebook_version = state.codebook.version;

    std::vector<std::pair<std::string, std::string>> guide_gold;
    guide_gold.reserve(state.guide.size());
    for (const auto& g : state.guide) guide_gold.emplace_back(g.narrative_id, g.label);
    if (rec.codebook_changed) {
        auto ev = evaluate(state.codebook, guide_gold);
        state.guide_predictions = ev.predictions;
        rec.guide_predictions = std::move(ev.predictions);
    }
    const auto guide_score = score(guide_gold, state.guide_predictions, config_.variable.response_options);

    MetricsRow row;
    row.t = t;
    row.acc_guide = guide_score.accuracy;
    row.macro_f1_guide = guide_score.macro_f1;
    row.f1_guide = guide_score.per_class;
    row.guide_size = state.guide.size();
    row.codebook_version = state.codebook.version;
    if (rec.codebook_changed || state.history.empty()) {
        std::vector<std::pair<std::string, std::string>> val_gold;
        for (const auto& id : state.val_split.ids) val_gold.emplace_back(id, state.val_labels.at(id));
        auto ev = evaluate(state.codebook, val_gold);
        row.acc_val = ev.accuracy;
        row.macro_f1_val = ev.macro_f1;
        row.f1_val = std::move(ev.per_class);
    } else {
        const auto& prev = state.history.back();
        row.acc_val = prev.acc_val;
        row.macro_f1_val = prev.macro_f1_val;
        row.f1_val = prev.f1_val;
        row.val_carried = true;
    }
    rec.metrics = row;
    state.history.push_back(std::move(row));
    state.t = t + 1;
    state.pending.reset();

    const auto decision = check_stopping(state, config_);
    state.status = decision.stop ? decision.status : RunStatus::running;
    state.stop_reason = decision.reason;
    rec.status = state.status;
    rec.stop_reason = state.stop_reason;
    return rec;
}

IterationRecord LoopEngine::run_iteration(LoopState& state, FeedbackProvider& provider) {
    begin_iteration(state);
    if (!state.pending) {
        throw PoolExhausted(state.stop_reason);
    }
    for (auto& item : state.pending->items) {
        item.answer = provider.answer(corpus_.at(item.narrative_id), item);
        if (!config_.variable.has_option(item.answer->correct_label)) {
            throw ValidationError("feedback label " + item.answer->correct_label + " is not a response option",
                                  "correct_label");
        }
    }
    return complete_iteration(state);
}

void LoopEngine::apply_record(LoopState& state, const IterationRecord& record,
                              const std::function<Codebook(int)>& load_codebook) {
    if (record.t != state.t) {
        throw SequencingError("log record t=" + std::to_string(record.t) + " does not follow t=" +
                              std::to_string(state.t - 1));
    }
    for (const auto& item : record.items) {
        state.guide.push_back({item.narrative_id, item.correct_label, item.expert_rationale});
        state.guide_predictions[item.narrative_id] = item.model_label;
    }
    if (record.guide_predictions) {
        state.guide_predictions = *record.guide_predictions;
    }
    if (record.codebook_version != state.codebook.version) {
        state.codebook = load_codebook(record.codebook_version);
    }
    state.history.push_back(record.metrics);
    state.t = record.t + 1;
    state.status = record.status;
    state.stop_reason = record.stop_reason;
    state.pending.reset();
}

std::vector<AnnotationRecord> LoopEngine::finalize(const LoopState& state) {
    if (!is_terminal(state.status)) {
        throw SequencingError("finalize needs a terminal run, status is " + to_string(state.status));
    }
    std::set<std::string> excluded(state.val_split.ids.begin(), state.val_split.ids.end());
    for (const auto& g : state.guide) excluded.insert(g.narrative_id);
    std::vector<std::string> ids;
    for (const auto& n : corpus_.narratives()) {
        if (!excluded.count(n.id)) ids.push_back(n.id);
    }
    std::vector<AnnotationRecord> out(ids.size());
    parallel_for(ids.size(), config_.annotator.parallelism_cap, [&](std::size_t i) {
        auto a = attempt_predict(annotator_, config_.annotator, state.codebook, corpus_.at(ids[i]));
        auto& r = out[i];
        r.narrative_id = ids[i];
        if (a.failed) {
            r.unresolved = true;
            r.note = a.failure;
            r.reason = a.prediction.raw_output;
        } else {
            r.label = a.prediction.label;
            r.reason = a.prediction.reason;
            r.span = a.prediction.span;
        }
    });
    return out;
}

}  // namespace cbforge
