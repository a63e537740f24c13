#include "cbforge/error.hpp"
#include "cbforge/session.hpp"
#include "cbforge/synth.hpp"
#include "support.hpp"

#include <doctest.h>

#include <fstream>

using namespace cbforge;

namespace {

struct Fixture {
    testing::TempDir tmp{"cbforge-session"};
    SyntheticWorld world = generate_corpus(legal_interaction_spec(11));
    std::shared_ptr<const Corpus> corpus = std::make_shared<const Corpus>(world.corpus);
    std::string corpus_path;
    RunConfig config;

    Fixture() {
        corpus_path = (tmp / "corpus.jsonl").string();
        std::ofstream out(corpus_path);
        for (const auto& n : world.corpus.narratives()) out << to_json(n).dump() << '\n';
        config.variable = synthetic_variable(legal_interaction_spec(11));
        config.annotator.base_url = "stub://?default=no_interaction";
        config.synthesizer.base_url = "stub://";
        config.seed = 8;
    }
    std::unique_ptr<RunSession> create(const std::string& name, bool paused = false) {
        return RunSession::create(tmp / name, name, config, corpus_path, corpus, world.truth, default_models,
                                  paused);
    }
    SimulatedProvider provider() const { return SimulatedProvider(world.truth, world.cot_cache, world.corpus.ids()); }
};

}  // namespace

TEST_SUITE("session") {

TEST_CASE("stub model selection") {
    RunConfig c;
    c.variable = binary_variable("V");
    c.annotator.base_url = "stub://";
    c.synthesizer.base_url = "stub://";
    auto pair = default_models(c);
    CHECK(parse_prediction(pair.annotator->complete({}, "s", "Nothing."), {"0.0", "1.0"}).label == "0.0");
    c.annotator.base_url = "stub://?default=1.0&x=y";
    pair = default_models(c);
    CHECK(parse_prediction(pair.annotator->complete({}, "s", "Nothing."), {"0.0", "1.0"}).label == "1.0");
    c.annotator.base_url = "http://127.0.0.1:9";
    CHECK(dynamic_cast<HttpChatModel*>(default_models(c).annotator.get()) != nullptr);
}

TEST_CASE("a simulated run persists every iteration and resumes to the same state") {
    Fixture f;
    auto provider = f.provider();
    Json final_state;
    {
        auto s = f.create("a");
        s->run(provider);
        CHECK(s->state().status == RunStatus::converged);
        final_state = to_json(s->state());
        CHECK(s->store().iterations().size() == static_cast<std::size_t>(s->state().t));
        CHECK(s->store().manifest().status == "converged");
        for (int v : s->store().codebook_versions()) CHECK(v <= s->state().codebook.version);
    }
    auto resumed = RunSession::resume(f.tmp / "a", default_models);
    CHECK(to_json(resumed->state()) == final_state);
    CHECK_THROWS_AS(resumed->begin(), SequencingError);
}

TEST_CASE("two runs with the same seed write identical logs") {
    Fixture f;
    auto p1 = f.provider();
    auto p2 = f.provider();
    f.create("x")->run(p1);
    f.create("y")->run(p2);
    CHECK(testing::slurp(f.tmp / "x" / "iterations.jsonl") == testing::slurp(f.tmp / "y" / "iterations.jsonl"));
}

TEST_CASE("paused runs wait for start") {
    Fixture f;
    auto s = f.create("p", true);
    CHECK(s->state().status == RunStatus::paused);
    CHECK_THROWS_AS(s->begin(), SequencingError);
    s->start();
    CHECK(s->state().status == RunStatus::running);
    s.reset();
    auto again = RunSession::resume(f.tmp / "p", default_models, f.corpus);
    CHECK(again->state().status == RunStatus::running);
}

TEST_CASE("a half-answered batch survives a restart") {
    Fixture f;
    std::vector<PendingItem> items;
    {
        auto s = f.create("h");
        s->begin();
        items = s->state().pending->items;
        for (std::size_t i = 0; i < 2; ++i) {
            s->submit({items[i].feedback_id, f.world.truth.labels.at(items[i].narrative_id), "r", {}, "ts"});
        }
    }
    auto s = RunSession::resume(f.tmp / "h", default_models);
    REQUIRE(s->state().pending);
    CHECK(s->state().status == RunStatus::awaiting_feedback);
    CHECK(s->state().pending->items[0].answer.has_value());
    CHECK_FALSE(s->state().pending->items[2].answer.has_value());
    const auto replay = s->submit({items[0].feedback_id, f.world.truth.labels.at(items[0].narrative_id), "r", {}, "ts"});
    CHECK(replay.replayed);
    FeedbackAck ack;
    for (std::size_t i = 2; i < items.size(); ++i) {
        ack = s->submit({items[i].feedback_id, f.world.truth.labels.at(items[i].narrative_id), "r", {}, "ts"});
    }
    CHECK(ack.batch_complete);
    const auto rec = s->complete();
    CHECK(rec.t == 0);
    CHECK_FALSE(s->store().read_pending());
}

TEST_CASE("a state file that disagrees with the log is rejected") {
    Fixture f;
    {
        auto provider = f.provider();
        auto s = f.create("c");
        s->run(provider, 2);
    }
    auto state = Json::parse(testing::slurp(f.tmp / "c" / "state.json"));
    state["guide"][0]["label"] = "explicit_interaction" == state["guide"][0]["label"] ? "no_interaction"
                                                                                     : "explicit_interaction";
    testing::spit(f.tmp / "c" / "state.json", state.dump());
    CHECK_THROWS_AS(RunSession::resume(f.tmp / "c", default_models), CorruptionError);
}

TEST_CASE("a state file behind the log is rebuilt from the log") {
    Fixture f;
    std::string state_after_one;
    Json expected;
    {
        auto provider = f.provider();
        auto s = f.create("l");
        s->run(provider, 1);
        state_after_one = testing::slurp(f.tmp / "l" / "state.json");
        s->run(provider, 1);
        expected = to_json(s->state());
    }
    testing::spit(f.tmp / "l" / "state.json", state_after_one);
    auto s = RunSession::resume(f.tmp / "l", default_models);
    CHECK(to_json(s->state()) == expected);
}

TEST_CASE("finalize writes the annotations file") {
    Fixture f;
    f.config.max_iterations = 1;
    auto provider = f.provider();
    auto s = f.create("fin");
    s->run(provider);
    CHECK(s->state().status == RunStatus::capped);
    const auto records = s->finalize();
    CHECK(s->store().read_annotations().size() == records.size());
    CHECK(records.size() == f.world.corpus.size() - 60 - s->state().guide.size());
}

TEST_CASE("bad configurations fail before the directory is created") {
    Fixture f;
    f.config.val_per_class = 500;
    CHECK_THROWS_AS(f.create("bad"), ValidationError);
    CHECK_FALSE(std::filesystem::exists(f.tmp / "bad"));
}

}  // TEST_SUITE
