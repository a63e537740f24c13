#pragma once

#include "cbforge/codebook.hpp"
#include "cbforge/corpus.hpp"
#include "cbforge/embedding.hpp"
#include "cbforge/lm_gateway.hpp"
#include "cbforge/sampler.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace cbforge {

/// Label recorded for a batch item whose model output could not be parsed.
inline constexpr const char* kUnparseableLabel = "unparseable";

struct RunConfig {
    Variable variable;
    std::size_t budget = 150;        // stop once more than this many items are validated
    std::size_t batch_size = 5;      // items per iteration
    std::size_t min_guide = 30;      // validated items needed before accuracy may stop the run
    double target_accuracy = 0.9;    // on the validation split
    std::size_t val_per_class = 20;  // validation items per response option
    SamplingStrategy sampling = SamplingStrategy::random;
    std::uint64_t seed = 0;
    std::size_t max_iterations = 100;
    std::vector<std::string> keywords;
    std::size_t upsample_k = 1000;  // pool size when keywords are given
    ModelEndpoint annotator;
    ModelEndpoint synthesizer;
    EmbedderConfig embedder;
    std::optional<PromptTemplates> templates;  // defaults follow the variable kind
    UpdateMode update_mode = UpdateMode::replace;
    bool rationale_only_errors = false;

    PromptTemplates effective_templates() const;
};

/// Throws ValidationError whose field() uses the short names b, n, k, m, j.
void validate(const RunConfig& config);

Json to_json(const RunConfig& config);
/// Accepts the short names (b, n, k, m, j) and the long ones.
RunConfig run_config_from_json(const Json& spec);

Json to_json(const ModelEndpoint& endpoint);
ModelEndpoint endpoint_from_json(const Json& spec);
Json to_json(const EmbedderConfig& cfg);
EmbedderConfig embedder_from_json(const Json& spec);

enum class RunStatus { paused, running, awaiting_feedback, converged, budget_exhausted, capped };

std::string to_string(RunStatus status);
RunStatus run_status_from_string(const std::string& text);
bool is_terminal(RunStatus status);

enum class ErrorKind { none, label, rationale_only };
enum class FeedbackSource { human, simulated };

std::string to_string(ErrorKind kind);
ErrorKind error_kind_from_string(const std::string& text);
std::string to_string(FeedbackSource source);
FeedbackSource feedback_source_from_string(const std::string& text);

/// What an expert (or its stand-in) says about one prediction.
struct FeedbackAnswer {
    std::string correct_label;
    std::string rationale;
    std::optional<ErrorKind> error_kind;  // only rationale_only is meaningful
    FeedbackSource source = FeedbackSource::human;
    std::string timestamp;
    bool rationale_fallback = false;  // simulated: no cached reasoning existed

    bool operator==(const FeedbackAnswer&) const = default;
};

/// One model prediction waiting for (or holding) its feedback.
struct PendingItem {
    std::string feedback_id;
    std::string narrative_id;
    Prediction prediction;
    bool unparseable = false;
    std::string failure;  // gateway error text when unparseable
    std::optional<FeedbackAnswer> answer;
};

struct PendingBatch {
    int t = 0;
    std::vector<PendingItem> items;
};

Json to_json(const PendingBatch& batch);
PendingBatch pending_from_json(const Json& record);

/// A resolved batch item as logged.
struct FeedbackItem {
    std::string feedback_id;
    std::string narrative_id;
    std::string model_label;
    std::string model_reason;
    std::string model_span;
    bool span_verbatim = false;
    std::string parse_path;
    std::string raw_output;
    bool unparseable = false;
    std::string correct_label;
    std::string expert_rationale;
    bool rationale_fallback = false;
    bool is_error = false;
    ErrorKind error_kind = ErrorKind::none;
    FeedbackSource source = FeedbackSource::human;
    std::string timestamp;
};

struct GuideEntry {
    std::string narrative_id;
    std::string label;
    std::string rationale;

    bool operator==(const GuideEntry&) const = default;
};

struct MetricsRow {
    int t = 0;
    double acc_guide = 0.0;
    double acc_val = 0.0;
    bool val_carried = false;
    double macro_f1_guide = 0.0;
    double macro_f1_val = 0.0;
    std::map<std::string, double> f1_guide;
    std::map<std::string, double> f1_val;
    std::size_t guide_size = 0;
    int codebook_version = 0;

    bool operator==(const MetricsRow&) const = default;
};

struct IterationRecord {
    int t = 0;
    std::vector<std::string> batch;
    std::vector<FeedbackItem> items;
    std::vector<std::string> error_ids;  // feedback ids of the items that fed the update
    int codebook_version = 0;            // after this iteration's update
    bool codebook_changed = false;
    std::string synthesis;  // "skipped", "ok" or "fallback"
    std::string synthesis_note;
    std::optional<std::map<std::string, std::string>> guide_predictions;  // set when the guide was re-evaluated
    MetricsRow metrics;
    RunStatus status = RunStatus::running;
    std::string stop_reason;
};

Json to_json(const IterationRecord& record);
IterationRecord iteration_from_json(const Json& record);

struct LoopState {
    std::string run_id;
    int t = 0;  // completed iterations
    RunStatus status = RunStatus::running;
    std::string stop_reason;
    Codebook codebook;
    std::vector<GuideEntry> guide;
    std::map<std::string, std::string> guide_predictions;  // id -> model label under the current codebook
    DatasetSplit val_split;
    std::map<std::string, std::string> val_labels;
    std::vector<std::string> pool;
    std::vector<MetricsRow> history;
    std::optional<PendingBatch> pending;

    std::vector<std::string> guide_ids() const;
};

/// Canonical state.json content; the pending batch lives in its own file.
Json to_json(const LoopState& state);
LoopState state_from_json(const Json& record, const Codebook& codebook);

struct StopDecision {
    bool stop = false;
    RunStatus status = RunStatus::running;
    std::string reason;
};

/// Converged when acc_val >= m and |guide| >= k; budget exhausted when
/// |guide| > b; capped at max_iterations or when fewer than n pool items
/// remain. Continue before the first completed iteration.
StopDecision check_stopping(const LoopState& state, const RunConfig& config);

/// Answers a prediction either immediately (simulated) or by script.
class FeedbackProvider {
public:
    virtual ~FeedbackProvider() = default;
    virtual FeedbackAnswer answer(const Narrative& narrative, const PendingItem& item) = 0;
};

/// Reference labels as y, cached chain-of-thought text as e.
class SimulatedProvider final : public FeedbackProvider {
public:
    /// Throws ValidationError if any of `required_ids` lacks a reference label.
    SimulatedProvider(LabelSet reference, std::map<std::string, std::string> cot_cache,
                      const std::vector<std::string>& required_ids);
    FeedbackAnswer answer(const Narrative& narrative, const PendingItem& item) override;

private:
    LabelSet reference_;
    std::map<std::string, std::string> cot_cache_;
};

struct FeedbackSubmission {
    std::string feedback_id;
    std::string correct_label;
    std::string rationale;
    std::optional<ErrorKind> error_kind;
    std::string timestamp;
};

struct FeedbackAck {
    std::string feedback_id;
    std::size_t remaining = 0;
    bool batch_complete = false;
    bool replayed = false;
};

struct AnnotationRecord {
    std::string narrative_id;
    std::string label;
    std::string reason;
    std::string span;
    bool unresolved = false;
    std::string note;
};

Json to_json(const AnnotationRecord& record);
AnnotationRecord annotation_from_json(const Json& record);

/// Drives the iterative guideline-development loop over one corpus.
///
/// An iteration is split in two so human feedback can arrive later:
/// begin_iteration samples and predicts a batch, submit_feedback records
/// answers, complete_iteration updates the codebook, evaluates and decides
/// whether to stop. run_iteration chains them for an immediate provider.
class LoopEngine {
public:
    LoopEngine(const Corpus& corpus, RunConfig config, ChatModel& annotator, ChatModel& synthesizer,
               std::shared_ptr<SentenceSource> sentences = nullptr);

    const RunConfig& config() const { return config_; }
    const Corpus& corpus() const { return corpus_; }

    /// Builds the validation split and pool and the version-0 codebook.
    /// Throws ValidationError on a split deficit or a pool smaller than n.
    LoopState start_run(const LabelSet& val_labels, std::string run_id = {}) const;

    void begin_iteration(LoopState& state);
    FeedbackAck submit_feedback(LoopState& state, const FeedbackSubmission& submission) const;
    IterationRecord complete_iteration(LoopState& state);
    IterationRecord run_iteration(LoopState& state, FeedbackProvider& provider);

    /// Applies a logged iteration to `state` without model calls; the
    /// codebook for the record's version comes from `load_codebook`.
    static void apply_record(LoopState& state, const IterationRecord& record,
                             const std::function<Codebook(int)>& load_codebook);

    /// Labels every corpus narrative outside the guide and validation sets.
    std::vector<AnnotationRecord> finalize(const LoopState& state);

    static std::string feedback_id(int t, std::size_t index);

private:
    struct Evaluation {
        double accuracy = 0.0;
        double macro_f1 = 0.0;
        std::map<std::string, double> per_class;
        std::map<std::string, std::string> predictions;
    };

    Evaluation evaluate(const Codebook& codebook, const std::vector<std::pair<std::string, std::string>>& gold);
    std::vector<PendingItem> predict_batch(const Codebook& codebook, const std::vector<std::string>& ids);
    SentenceSource& sentence_source();

    const Corpus& corpus_;
    RunConfig config_;
    ChatModel& annotator_;
    ChatModel& synthesizer_;
    std::shared_ptr<SentenceSource> sentences_;
};

}  // namespace cbforge
