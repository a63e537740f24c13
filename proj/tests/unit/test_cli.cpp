#include "support.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <fstream>
#include <thread>

using Json = nlohmann::json;

namespace {

struct Outcome {
    int code = -1;
    std::string out;
};

Outcome cli(const std::string& args, const std::string& env = "") {
    const std::string command = env + " " + CBFORGE_CLI + " " + args + " 2>/dev/null";
    Outcome o;
    FILE* pipe = ::popen(command.c_str(), "r");
    REQUIRE(pipe);
    std::array<char, 4096> buf{};
    while (std::size_t n = std::fread(buf.data(), 1, buf.size(), pipe)) o.out.append(buf.data(), n);
    const int status = ::pclose(pipe);
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return o;
}

std::size_t count_lines(const std::filesystem::path& path) {
    std::ifstream in(path);
    std::size_t n = 0;
    std::string line;
    while (std::getline(in, line)) n += !line.empty();
    return n;
}

struct World {
    testing::TempDir tmp{"cbforge-cli"};
    std::string corpus = (tmp / "corpus.jsonl").string();
    std::string variable = (tmp / "variable.json").string();
    std::string cot = (tmp / "cot.jsonl").string();

    World() {
        const auto o = cli("ingest --synthetic legal --seed 3 --out " + corpus + " --variable-out " + variable +
                           " --cot-out " + cot);
        REQUIRE(o.code == 0);
    }
    std::string common() const {
        return "--corpus " + corpus + " --variable-spec " + variable + " --endpoint-url 'stub://?default=no_interaction'";
    }
};

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("usage errors exit 2") {
    CHECK(cli("").code == 2);
    CHECK(cli("frobnicate").code == 2);
    CHECK(cli("serve").code == 2);
    CHECK(cli("develop --corpus x.jsonl").code == 2);
    CHECK(cli("ingest --format yaml").code == 2);
    CHECK(cli("--help").code == 0);
}

TEST_CASE("ingest writes and validates corpora") {
    World w;
    CHECK(count_lines(w.corpus) == 634);
    CHECK(count_lines(w.cot) == 634);
    CHECK(Json::parse(testing::slurp(w.variable))["name"] == "LegalInteraction");

    const auto check = cli("ingest --corpus " + w.corpus + " --format jsonl");
    CHECK(check.code == 0);
    CHECK(Json::parse(check.out.substr(0, check.out.find('\n')))["accepted"] == 634);

    CHECK(cli("ingest --corpus " + (w.tmp / "missing.jsonl").string()).code == 1);
    testing::spit(w.tmp / "bad.jsonl", "garbage\n");
    CHECK(cli("ingest --corpus " + (w.tmp / "bad.jsonl").string()).code == 1);
}

TEST_CASE("simulated develop, resume, export") {
    World w;
    const auto runs = (w.tmp / "runs").string();
    const auto dev = cli("develop " + w.common() + " --cot-cache " + w.cot + " --run-dir " + runs +
                         " --run-id r --seed 5 --format jsonl");
    REQUIRE(dev.code == 0);
    const auto summary = Json::parse(dev.out);
    CHECK(summary["status"] == "converged");
    CHECK(summary["acc_val"].get<double>() >= 0.9);

    const auto resumed = cli("develop --run-dir " + runs + " --run-id r --resume --format jsonl");
    CHECK(resumed.code == 0);
    CHECK(Json::parse(resumed.out)["t"] == summary["t"]);

    const auto timeline = cli("export --run-dir " + runs + "/r --timeline");
    CHECK(timeline.code == 0);
    CHECK(timeline.out.rfind("t,acc_guide", 0) == 0);
    std::size_t rows = 0;
    for (char c : timeline.out) rows += c == '\n';
    CHECK(rows == summary["t"].get<std::size_t>() + 1);

    CHECK(cli("develop " + w.common() + " --run-dir " + runs + " --run-id r").code == 1);
    CHECK(cli("develop --run-dir " + runs + " --run-id nope --resume").code == 1);
}

TEST_CASE("annotate and evaluate") {
    World w;
    const auto preds = (w.tmp / "preds.jsonl").string();
    const auto ann = cli("annotate " + w.common() + " --out " + preds);
    CHECK(ann.code == 0);
    CHECK(count_lines(preds) == 634);

    const auto ev = cli("evaluate --corpus " + w.corpus + " --variable-spec " + w.variable + " --predictions " +
                        preds + " --format jsonl --bootstrap-iterations 200");
    CHECK(ev.code == 0);
    const auto rep = Json::parse(ev.out.substr(0, ev.out.find('\n')));
    // The stub answers no_interaction everywhere: 477 of 634 are right.
    CHECK(rep["agreement"].get<double>() == doctest::Approx(477.0 / 634.0));
    CHECK(rep["n"] == 634);

    const auto queues = cli("export --corpus " + w.corpus + " --variable-spec " + w.variable + " --predictions " +
                            preds + " --disagreements 5 --agreements 3 --format jsonl");
    CHECK(queues.code == 0);
    std::size_t disagree = 0, agree = 0;
    std::istringstream in(queues.out);
    std::string line;
    while (std::getline(in, line)) {
        const auto j = Json::parse(line);
        (j["queue"] == "disagree" ? disagree : agree)++;
    }
    CHECK(disagree == 5);
    CHECK(agree == 3);
}

TEST_CASE("endpoint comes from the environment when no flag is given") {
    World w;
    const auto preds = (w.tmp / "p.jsonl").string();
    const auto base = "annotate --corpus " + w.corpus + " --variable-spec " + w.variable + " --out " + preds;
    CHECK(cli(base, "env -u CODEBOOK_FORGE_ENDPOINT_URL").code == 2);
    CHECK(cli(base, "CODEBOOK_FORGE_ENDPOINT_URL='stub://?default=no_interaction'").code == 0);
}

TEST_CASE("serve refuses a port that is already taken") {
    httplib::Server blocker;
    blocker.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_content("x", "text/plain"); });
    const int port = blocker.bind_to_any_port("127.0.0.1");
    std::thread t([&] { blocker.listen_after_bind(); });
    blocker.wait_until_ready();
    testing::TempDir tmp;
    const auto o = cli("serve --run-dir " + (tmp / "runs").string() + " --port " + std::to_string(port));
    blocker.stop();
    t.join();
    CHECK(o.code == 1);
}

}  // TEST_SUITE
