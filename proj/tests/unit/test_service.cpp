#include "cbforge/error.hpp"
#include "cbforge/service.hpp"
#include "cbforge/synth.hpp"
#include "support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <fstream>

using namespace cbforge;

namespace {

struct Harness {
    testing::TempDir tmp{"cbforge-service"};
    SyntheticWorld world = generate_corpus(legal_interaction_spec(4));
    Variable variable = synthetic_variable(legal_interaction_spec(4));
    std::string corpus_path;
    std::unique_ptr<Service> service;
    int port = 0;

    Harness() {
        corpus_path = (tmp / "corpus.jsonl").string();
        std::ofstream out(corpus_path);
        for (const auto& n : world.corpus.narratives()) out << to_json(n).dump() << '\n';
        out.close();
        boot();
    }
    void boot() {
        ServiceOptions o;
        o.run_root = tmp / "runs";
        o.default_corpus_path = corpus_path;
        o.max_wait = std::chrono::milliseconds(3000);
        service = std::make_unique<Service>(o);
        service->load_existing_runs();
        port = service->start("127.0.0.1", 0);
    }
    void restart() {
        service->stop();
        service.reset();
        boot();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(10, 0);
        return c;
    }
    Json run_body(const std::string& id) const {
        return {{"run_id", id},
                {"variable", to_json(variable)},
                {"annotator", {{"base_url", "stub://?default=no_interaction"}}},
                {"synthesizer", {{"base_url", "stub://"}}},
                {"seed", 2}};
    }
    Json get(const std::string& path, int expect = 200) const {
        auto r = client().Get(path);
        REQUIRE(r);
        CHECK(r->status == expect);
        return Json::parse(r->body);
    }
    Json post(const std::string& path, const Json& body, int expect = 200) const {
        auto r = client().Post(path, body.dump(), "application/json");
        REQUIRE(r);
        CHECK(r->status == expect);
        return Json::parse(r->body);
    }
    Json wait_pending(const std::string& id) const {
        for (int i = 0; i < 20; ++i) {
            auto p = get("/runs/" + id + "/pending?wait=2s");
            if (!p["items"].empty() || is_terminal(run_status_from_string(p["status"]))) return p;
        }
        FAIL("no pending batch appeared");
        return {};
    }
    Json answer(const Json& item) const {
        const auto nid = item["narrative_id"].get<std::string>();
        return {{"feedback_id", item["feedback_id"]},
                {"correct_label", world.truth.labels.at(nid)},
                {"rationale", world.cot_cache.at(nid)}};
    }
};

}  // namespace

TEST_SUITE("service") {

TEST_CASE("health and run creation") {
    Harness h;
    CHECK(h.get("/health")["status"] == "ok");
    auto created = h.post("/runs", h.run_body("r1"), 201);
    CHECK(created["run_id"] == "r1");
    CHECK(created["status"] == "paused");
    CHECK(h.post("/runs", h.run_body("r1"), 409)["error"]["code"] == "conflict");

    auto bad = h.run_body("r2");
    bad["m"] = 1.5;
    const auto err = h.post("/runs", bad, 422);
    CHECK(err["error"]["code"] == "validation_error");
    CHECK(err["error"]["field"] == "m");

    auto r = h.client().Post("/runs", "{not json", "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);

    auto auto_id = h.run_body("");
    auto_id.erase("run_id");
    CHECK(h.post("/runs", auto_id, 201)["run_id"].get<std::string>().rfind("run-", 0) == 0);
    CHECK(h.post("/runs", h.run_body("../escape"), 422)["error"]["field"] == "run_id");

    const auto runs = h.get("/runs")["runs"];
    CHECK(runs.size() == 2);
    const auto summary = h.get("/runs/r1");
    CHECK(summary["status"] == "paused");
    CHECK(summary["budget_remaining"] == 150);
    CHECK(summary["response_options"] == Json(h.variable.response_options));
    CHECK(h.get("/runs/nope", 404)["error"]["code"] == "not_found");
}

TEST_CASE("feedback round trip with idempotent replay") {
    Harness h;
    h.post("/runs", h.run_body("r"), 201);
    CHECK(h.get("/runs/r/pending")["items"].empty());
    h.post("/runs/r/start", Json::object());
    const auto pending = h.wait_pending("r");
    REQUIRE(pending["items"].size() == 5);
    const auto& item = pending["items"][0];
    for (const char* key : {"feedback_id", "narrative_id", "narrative_text", "model_label", "model_reason",
                            "model_span", "response_options", "codebook_version"}) {
        CHECK(item.contains(key));
    }

    auto bad_label = h.answer(item);
    bad_label["correct_label"] = "perhaps";
    CHECK(h.post("/runs/r/feedback", bad_label, 422)["error"]["field"] == "correct_label");
    CHECK(h.post("/runs/r/feedback", Json{{"correct_label", "no_interaction"}}, 422)["error"]["field"] ==
          "feedback_id");
    auto unknown = h.answer(item);
    unknown["feedback_id"] = "fb-9999-00";
    h.post("/runs/r/feedback", unknown, 404);

    const auto ack = h.post("/runs/r/feedback", h.answer(item));
    CHECK(ack["accepted"] == true);
    CHECK(ack["remaining"] == 4);
    CHECK(h.post("/runs/r/feedback", h.answer(item)) == ack);
    auto changed = h.answer(item);
    changed["rationale"] = "something else";
    CHECK(h.post("/runs/r/feedback", changed, 409)["error"]["code"] == "conflict");

    const auto nid = item["narrative_id"].get<std::string>();
    const auto narrative = h.get("/runs/r/narratives/" + nid);
    CHECK(narrative["text"] == concat_narrative(h.world.corpus.at(nid)));
    std::string hidden;
    for (const auto& n : h.world.corpus.narratives()) {
        bool shown = false;
        for (const auto& it : pending["items"]) shown = shown || it["narrative_id"] == n.id;
        if (!shown) {
            hidden = n.id;
            break;
        }
    }
    h.get("/runs/r/narratives/" + hidden, 404);
}

TEST_CASE("a run driven over HTTP converges and exposes codebooks and metrics") {
    Harness h;
    h.post("/runs", h.run_body("r"), 201);
    h.post("/runs/r/start", Json::object());
    Json last;
    for (int guard = 0; guard < 40; ++guard) {
        last = h.wait_pending("r");
        if (is_terminal(run_status_from_string(last["status"]))) break;
        Json ack;
        for (const auto& item : last["items"]) ack = h.post("/runs/r/feedback", h.answer(item));
        CHECK(ack["batch_complete"] == true);
    }
    CHECK(last["status"] == "converged");
    CHECK(last["heartbeat"] == false);

    const auto summary = h.get("/runs/r");
    const int version = summary["codebook_version"];
    CHECK(version >= 1);
    CHECK(summary["budget_remaining"] == 150 - summary["guide_size"].get<int>());

    const auto cb = h.get("/runs/r/codebook?version=1");
    CHECK(cb["previous_version"] == 0);
    CHECK_FALSE(cb["diff"]["added"].empty());
    CHECK(h.get("/runs/r/codebook?version=0")["previous_version"].is_null());
    CHECK(h.get("/runs/r/codebook")["version"] == version);
    h.get("/runs/r/codebook?version=" + std::to_string(version + 1), 404);
    CHECK(h.get("/runs/r/codebook?version=x", 422)["error"]["field"] == "version");

    const auto metrics = h.get("/runs/r/metrics");
    CHECK(metrics["target_accuracy"] == 0.9);
    REQUIRE(metrics["rows"].size() == summary["t"].get<std::size_t>());
    for (const auto& row : metrics["rows"]) {
        CHECK(row.contains("acc_val"));
        CHECK(row.contains("val_carried"));
    }
    CHECK(metrics["rows"].back()["acc_val"].get<double>() >= 0.9);
    h.post("/runs/r/feedback", Json{{"feedback_id", "fb-0000-00"}, {"correct_label", "no_interaction"}}, 409);
}

TEST_CASE("long poll returns a heartbeat when nothing arrives") {
    Harness h;
    h.post("/runs", h.run_body("r"), 201);
    const auto start = std::chrono::steady_clock::now();
    const auto p = h.get("/runs/r/pending?wait=300ms");
    const auto elapsed = std::chrono::steady_clock::now() - start;
    CHECK(p["heartbeat"] == true);
    CHECK(p["items"].empty());
    CHECK(elapsed >= std::chrono::milliseconds(250));
    CHECK(h.get("/runs/r/pending?wait=soon", 422)["error"]["field"] == "wait");
}

TEST_CASE("pending work and answers survive a service restart") {
    Harness h;
    h.post("/runs", h.run_body("r"), 201);
    h.post("/runs/r/start", Json::object());
    const auto pending = h.wait_pending("r");
    const auto first = pending["items"][0];
    h.post("/runs/r/feedback", h.answer(first));
    h.restart();

    const auto again = h.wait_pending("r");
    CHECK(again["items"].size() == 4);
    CHECK(again["t"] == pending["t"]);
    const auto replay = h.post("/runs/r/feedback", h.answer(first));
    CHECK(replay["feedback_id"] == first["feedback_id"]);
    auto changed = h.answer(first);
    changed["correct_label"] = changed["correct_label"] == "no_interaction" ? "explicit_interaction" : "no_interaction";
    h.post("/runs/r/feedback", changed, 409);
}

TEST_CASE("a second service cannot take a bound port") {
    Harness h;
    ServiceOptions o;
    o.run_root = h.tmp / "other";
    Service second(o);
    CHECK_THROWS_AS(second.start("127.0.0.1", h.port), TransportError);
}

}  // TEST_SUITE
