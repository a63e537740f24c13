#include "cbforge/error.hpp"
#include "cbforge/loop_engine.hpp"
#include "cbforge/synth.hpp"
#include "support.hpp"

#include <doctest.h>

#include <atomic>
#include <set>

using namespace cbforge;

namespace {

struct World {
    SyntheticWorld synthetic = generate_corpus(legal_interaction_spec(7));
    Variable variable = synthetic_variable(legal_interaction_spec(7));
    StubLm annotator{variable.response_options, "no_interaction"};
    StubSynthesizer synthesizer;

    RunConfig config(std::size_t budget = 150) const {
        RunConfig c;
        c.variable = variable;
        c.budget = budget;
        c.batch_size = 5;
        c.min_guide = 30;
        c.target_accuracy = 0.9;
        c.val_per_class = 20;
        c.seed = 3;
        return c;
    }
    SimulatedProvider provider() const {
        return SimulatedProvider(synthetic.truth, synthetic.cot_cache, synthetic.corpus.ids());
    }
};

class CountingModel final : public ChatModel {
public:
    explicit CountingModel(std::string reply) : reply_(std::move(reply)) {}
    std::string complete(const ModelEndpoint&, const std::string&, const std::string&) override {
        ++calls;
        return reply_;
    }
    std::atomic<int> calls{0};

private:
    std::string reply_;
};

FeedbackSubmission agree_with(const PendingItem& item, std::string rationale = "fine") {
    return {item.feedback_id, item.prediction.label, std::move(rationale), std::nullopt, "2026-01-01T00:00:00Z"};
}

}  // namespace

TEST_SUITE("loop_engine") {

TEST_CASE("start builds a balanced validation split disjoint from the pool") {
    World w;
    LoopEngine engine(w.synthetic.corpus, w.config(), w.annotator, w.synthesizer);
    const auto s = engine.start_run(w.synthetic.truth, "r");
    CHECK(s.val_split.ids.size() == 60);
    std::map<std::string, int> hist;
    for (const auto& id : s.val_split.ids) hist[s.val_labels.at(id)]++;
    for (const auto& [label, count] : hist) CHECK(count == 20);
    const std::set<std::string> val(s.val_split.ids.begin(), s.val_split.ids.end());
    for (const auto& id : s.pool) CHECK_FALSE(val.count(id));
    CHECK(s.pool.size() + val.size() == w.synthetic.corpus.size());
    CHECK(s.codebook.version == 0);
    CHECK(s.status == RunStatus::running);
}

TEST_CASE("feedback sequencing") {
    World w;
    LoopEngine engine(w.synthetic.corpus, w.config(), w.annotator, w.synthesizer);
    auto s = engine.start_run(w.synthetic.truth);
    CHECK_THROWS_AS(engine.complete_iteration(s), SequencingError);
    CHECK_THROWS_AS(engine.submit_feedback(s, {"fb-0000-00", "no_interaction", "", {}, ""}), SequencingError);

    engine.begin_iteration(s);
    REQUIRE(s.pending);
    CHECK(s.status == RunStatus::awaiting_feedback);
    CHECK(s.pending->items.size() == 5);
    CHECK(s.pending->items[0].feedback_id == "fb-0000-00");
    CHECK_THROWS_AS(engine.begin_iteration(s), SequencingError);

    CHECK_THROWS_AS(engine.submit_feedback(s, {"nope", "no_interaction", "", {}, ""}), NotFound);
    CHECK_THROWS_AS(engine.submit_feedback(s, {"fb-0000-00", "maybe", "", {}, ""}), ValidationError);
    CHECK_THROWS_AS(engine.submit_feedback(s, {"fb-0000-00", "no_interaction", "", ErrorKind::rationale_only, ""}),
                    ValidationError);

    const auto first = engine.submit_feedback(s, agree_with(s.pending->items[0]));
    CHECK(first.remaining == 4);
    CHECK_FALSE(first.replayed);
    const auto again = engine.submit_feedback(s, agree_with(s.pending->items[0]));
    CHECK(again.replayed);
    CHECK(again.remaining == 4);
    CHECK_THROWS_AS(engine.submit_feedback(s, agree_with(s.pending->items[0], "changed my mind")), Conflict);
    CHECK_THROWS_AS(engine.complete_iteration(s), SequencingError);

    FeedbackAck last;
    for (std::size_t i = 1; i < 5; ++i) last = engine.submit_feedback(s, agree_with(s.pending->items[i]));
    CHECK(last.batch_complete);
    const auto rec = engine.complete_iteration(s);
    CHECK(rec.t == 0);
    CHECK(s.t == 1);
    CHECK_FALSE(s.pending);
    CHECK(s.guide.size() == 5);
}

TEST_CASE("an all-correct batch skips synthesis and carries validation accuracy") {
    World w;
    CountingModel synth("Guidelines: * never used");
    LoopEngine engine(w.synthetic.corpus, w.config(), w.annotator, synth);
    auto s = engine.start_run(w.synthetic.truth);
    for (int round = 0; round < 2; ++round) {
        engine.begin_iteration(s);
        for (const auto& item : s.pending->items) engine.submit_feedback(s, agree_with(item));
        const auto rec = engine.complete_iteration(s);
        CHECK(rec.synthesis == "skipped");
        CHECK_FALSE(rec.codebook_changed);
        CHECK(rec.metrics.val_carried == (round == 1));
        CHECK(rec.metrics.acc_guide == doctest::Approx(1.0));
    }
    CHECK(synth.calls == 0);
    CHECK(s.codebook.version == 0);
    CHECK(s.history[1].acc_val == s.history[0].acc_val);
}

TEST_CASE("an unusable synthesis reply falls back to the rationales") {
    World w;
    CountingModel synth("   ");
    LoopEngine engine(w.synthetic.corpus, w.config(), w.annotator, synth);
    auto s = engine.start_run(w.synthetic.truth);
    engine.begin_iteration(s);
    const auto& first = s.pending->items[0];
    const std::string flipped = first.prediction.label == "explicit_interaction" ? "no_interaction" : "explicit_interaction";
    engine.submit_feedback(s, {first.feedback_id, flipped, "look at the lawyer", {}, ""});
    for (std::size_t i = 1; i < 5; ++i) engine.submit_feedback(s, agree_with(s.pending->items[i], ""));
    const auto rec = engine.complete_iteration(s);
    CHECK(synth.calls == 1);
    CHECK(rec.synthesis == "fallback");
    CHECK(rec.codebook_changed);
    CHECK(rec.error_ids == std::vector<std::string>{"fb-0000-00"});
    CHECK(s.codebook.version == 1);
    CHECK(s.codebook.bullet_texts() == std::vector<std::string>{"look at the lawyer"});
    CHECK(rec.guide_predictions.has_value());
    CHECK_FALSE(rec.metrics.val_carried);
}

TEST_CASE("rationale-only errors count when enabled") {
    World w;
    auto cfg = w.config();
    cfg.rationale_only_errors = true;
    CountingModel synth("Guidelines: * note the custody hearing");
    LoopEngine engine(w.synthetic.corpus, cfg, w.annotator, synth);
    auto s = engine.start_run(w.synthetic.truth);
    engine.begin_iteration(s);
    auto sub = agree_with(s.pending->items[0], "right label, wrong reason");
    sub.error_kind = ErrorKind::rationale_only;
    engine.submit_feedback(s, sub);
    for (std::size_t i = 1; i < 5; ++i) engine.submit_feedback(s, agree_with(s.pending->items[i]));
    const auto rec = engine.complete_iteration(s);
    CHECK(rec.items[0].error_kind == ErrorKind::rationale_only);
    CHECK(rec.items[0].is_error);
    CHECK(rec.synthesis == "ok");
    CHECK(s.codebook.bullet_texts() == std::vector<std::string>{"note the custody hearing"});
}

TEST_CASE("simulated loop converges on the planted rules and is reproducible") {
    World w;
    auto run = [&] {
        LoopEngine engine(w.synthetic.corpus, w.config(), w.annotator, w.synthesizer);
        auto provider = w.provider();
        auto s = engine.start_run(w.synthetic.truth);
        std::vector<Json> log;
        while (!is_terminal(s.status)) log.push_back(to_json(engine.run_iteration(s, provider)));
        return std::make_pair(s, log);
    };
    const auto [a, log_a] = run();
    const auto [b, log_b] = run();
    CHECK(log_a == log_b);
    CHECK(a.status == RunStatus::converged);
    CHECK(a.history.back().acc_val >= 0.9);
    CHECK(a.guide.size() >= 30);
    CHECK(a.guide.size() <= 150);
    CHECK(a.codebook.version >= 1);
}

TEST_CASE("stopping rule boundaries") {
    RunConfig cfg;
    cfg.variable = binary_variable("V");
    cfg.budget = 40;
    cfg.min_guide = 30;
    cfg.batch_size = 5;
    cfg.target_accuracy = 0.9;
    cfg.max_iterations = 100;
    LoopState s;
    for (int i = 0; i < 100; ++i) s.pool.push_back("p" + std::to_string(i));
    auto with = [&](std::size_t guide, double acc, int t = 1) {
        LoopState x = s;
        x.t = t;
        for (std::size_t i = 0; i < guide; ++i) x.guide.push_back({"p" + std::to_string(i), "1.0", ""});
        MetricsRow row;
        row.acc_val = acc;
        x.history.push_back(row);
        return check_stopping(x, cfg);
    };
    CHECK_FALSE(check_stopping(s, cfg).stop);
    CHECK(with(30, 18.0 / 20.0).status == RunStatus::converged);
    CHECK_FALSE(with(29, 1.0).stop);
    CHECK_FALSE(with(40, 0.85).stop);
    CHECK(with(41, 0.85).status == RunStatus::budget_exhausted);
    CHECK(with(41, 0.95).status == RunStatus::converged);
    CHECK(with(10, 0.5, 100).status == RunStatus::capped);
    CHECK(with(96, 0.5).status == RunStatus::budget_exhausted);
    cfg.budget = 200;
    CHECK(with(96, 0.5).status == RunStatus::capped);
    CHECK_FALSE(with(95, 0.5).stop);
}

TEST_CASE("terminal runs refuse new iterations") {
    World w;
    LoopEngine engine(w.synthetic.corpus, w.config(), w.annotator, w.synthesizer);
    auto s = engine.start_run(w.synthetic.truth);
    s.status = RunStatus::converged;
    CHECK_THROWS_AS(engine.begin_iteration(s), SequencingError);
}

TEST_CASE("replaying logged records reproduces the state") {
    World w;
    LoopEngine engine(w.synthetic.corpus, w.config(), w.annotator, w.synthesizer);
    auto provider = w.provider();
    auto live = engine.start_run(w.synthetic.truth);
    std::map<int, Codebook> versions{{0, live.codebook}};
    std::vector<IterationRecord> records;
    for (int i = 0; i < 4 && !is_terminal(live.status); ++i) {
        records.push_back(iteration_from_json(to_json(engine.run_iteration(live, provider))));
        versions[live.codebook.version] = live.codebook;
    }
    auto replayed = engine.start_run(w.synthetic.truth);
    for (const auto& r : records) {
        LoopEngine::apply_record(replayed, r, [&](int v) { return versions.at(v); });
    }
    CHECK(to_json(replayed) == to_json(live));
    CHECK_THROWS_AS(LoopEngine::apply_record(replayed, records.front(), [&](int v) { return versions.at(v); }),
                    SequencingError);
}

TEST_CASE("finalize labels everything outside the guide and validation split") {
    World w;
    auto cfg = w.config();
    cfg.max_iterations = 2;
    LoopEngine engine(w.synthetic.corpus, cfg, w.annotator, w.synthesizer);
    auto provider = w.provider();
    auto s = engine.start_run(w.synthetic.truth);
    CHECK_THROWS_AS(engine.finalize(s), SequencingError);
    while (!is_terminal(s.status)) engine.run_iteration(s, provider);
    CHECK(s.status == RunStatus::capped);
    const auto out = engine.finalize(s);
    CHECK(out.size() == w.synthetic.corpus.size() - 60 - s.guide.size());
    std::set<std::string> excluded(s.val_split.ids.begin(), s.val_split.ids.end());
    for (const auto& g : s.guide) excluded.insert(g.narrative_id);
    for (const auto& r : out) {
        CHECK_FALSE(excluded.count(r.narrative_id));
        CHECK(w.variable.has_option(r.label));
    }
}

TEST_CASE("config JSON accepts short names and reports them on error") {
    auto cfg = run_config_from_json(Json{{"variable", {{"name", "V"}}}, {"b", 50}, {"n", 4}, {"k", 10}, {"m", 0.8}, {"j", 5}});
    CHECK(cfg.budget == 50);
    CHECK(cfg.batch_size == 4);
    CHECK(cfg.min_guide == 10);
    CHECK(cfg.target_accuracy == doctest::Approx(0.8));
    CHECK(cfg.val_per_class == 5);
    CHECK(run_config_from_json(to_json(cfg)).budget == 50);
    try {
        run_config_from_json(Json{{"variable", {{"name", "V"}}}, {"m", 1.5}});
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(e.field() == "m");
    }
    try {
        run_config_from_json(Json{{"variable", {{"name", "V"}}}, {"b", 5}, {"k", 10}});
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(e.field() == "b");
    }
}

}  // TEST_SUITE
