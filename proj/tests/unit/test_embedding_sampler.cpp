#include "cbforge/embedding.hpp"
#include "cbforge/error.hpp"
#include "cbforge/sampler.hpp"
#include "support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <cmath>
#include <set>
#include <thread>

using namespace cbforge;
using testing::narrative;

TEST_SUITE("embedding_sampler") {

TEST_CASE("sentence splitting") {
    CHECK(split_sentences("A died. B found him.") == std::vector<std::string>{"A died.", "B found him."});
    CHECK(split_sentences("One sentence") == std::vector<std::string>{"One sentence"});
    CHECK(split_sentences("Dr. Smith arrived. V left.") == std::vector<std::string>{"Dr. Smith arrived.", "V left."});
    CHECK(split_sentences("It was 5 p.m. when V called. Then 2 officers came!") ==
          std::vector<std::string>{"It was 5 p.m. when V called.", "Then 2 officers came!"});
    CHECK_THROWS_AS(split_sentences("   \n "), ValidationError);
}

TEST_CASE("splitting keeps every non-space character in order") {
    const std::string text = "V was 40. Mr. Jones said e.g. nothing!  Was it? 3 calls. A. B.";
    std::string joined;
    for (const auto& s : split_sentences(text)) joined += s + " ";
    auto strip = [](const std::string& s) {
        std::string out;
        for (char c : s) {
            if (!std::isspace(static_cast<unsigned char>(c))) out += c;
        }
        return out;
    };
    CHECK(strip(joined) == strip(text));
}

TEST_CASE("offline embedder is deterministic and unit norm") {
    EmbedderConfig cfg;
    cfg.dimension = 64;
    auto v = embed_batch({"the attorney called", "the attorney called", "x"}, cfg);
    REQUIRE(v.size() == 3);
    CHECK(v[0] == v[1]);
    for (const auto& x : v) {
        CHECK(x.size() == 64);
        double n = 0;
        for (double d : x) n += d * d;
        CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
    }
    CHECK_THROWS_AS(embed_batch({}, cfg), ValidationError);
}

TEST_CASE("cosine examples") {
    const Vector x = {0.6, 0.8};
    CHECK(cosine(x, x) == doctest::Approx(1.0));
    CHECK(cosine(Vector{1, 0}, Vector{0, 1}) == doctest::Approx(0.0));
    CHECK(cosine(Vector{1 / std::sqrt(2.0), 1 / std::sqrt(2.0)}, Vector{1, 0}) == doctest::Approx(0.7071).epsilon(1e-4));
    CHECK(cosine(Vector{1, 2}, Vector{3, -1}) == doctest::Approx(cosine(Vector{3, -1}, Vector{1, 2})));
    CHECK(cosine(Vector{1, 0}, Vector{-1, 0}) == doctest::Approx(-1.0));
    CHECK_THROWS_AS(cosine(Vector{0, 0}, Vector{1, 0}), ValidationError);
    CHECK_THROWS_AS(cosine(Vector{1}, Vector{1, 0}), ValidationError);
}

Vector unit(double angle) { return {std::cos(angle), std::sin(angle)}; }

TEST_CASE("coverage scores against hand-set vectors") {
    // Candidate c1 repeats chosen a's sentences; c2 is orthogonal to everything chosen.
    FixedSentenceSource src({{"a", {unit(0.0), unit(0.5)}},
                             {"b", {unit(1.0)}},
                             {"c1", {unit(0.0), unit(0.5)}},
                             {"c2", {unit(-M_PI / 2)}},
                             {"c3", {unit(0.25), unit(2.0)}}});
    auto scores = coverage_scores({"c1", "c2", "c3"}, {"a", "b"}, src);
    REQUIRE(scores.size() == 3);
    CHECK(scores[0].score == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(scores[1].score == doctest::Approx(0.0).epsilon(1e-12));
    // Brute force: max over {0, 0.5, 1.0} for each sentence of c3.
    const double s1 = std::max({std::cos(0.25), std::cos(0.25 - 0.5), std::cos(0.25 - 1.0)});
    const double s2 = std::max({std::cos(2.0), std::cos(1.5), std::cos(1.0)});
    CHECK(scores[2].score == doctest::Approx((s1 + s2) / 2).epsilon(1e-12));

    for (const auto& s : coverage_scores({"c1", "c3"}, {}, src)) CHECK(s.score == 0.0);
}

TEST_CASE("coverage is permutation invariant and monotone in the chosen set") {
    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> angle(-M_PI, M_PI);
    std::map<std::string, std::vector<Vector>> vectors;
    for (int i = 0; i < 8; ++i) {
        std::vector<Vector> s;
        for (int k = 0; k < 1 + i % 4; ++k) s.push_back(unit(angle(gen)));
        vectors["n" + std::to_string(i)] = s;
    }
    FixedSentenceSource src(vectors);
    const std::vector<std::string> cands = {"n0", "n1", "n2"};
    auto a = coverage_scores(cands, {"n3", "n4", "n5"}, src);
    auto b = coverage_scores(cands, {"n5", "n3", "n4"}, src);
    auto bigger = coverage_scores(cands, {"n3", "n4", "n5", "n6"}, src);
    for (std::size_t i = 0; i < cands.size(); ++i) {
        CHECK(a[i].score == b[i].score);
        CHECK(bigger[i].score >= a[i].score);
    }
}

TEST_CASE("random batches are seeded and disjoint from history") {
    FixedSentenceSource src({});
    std::vector<std::string> pool;
    for (int i = 0; i < 20; ++i) pool.push_back("p" + std::to_string(i));
    auto a = select_batch(SamplingStrategy::random, pool, {"p1", "p2"}, 5, 9, src);
    auto b = select_batch(SamplingStrategy::random, pool, {"p1", "p2"}, 5, 9, src);
    CHECK(a == b);
    CHECK(std::set<std::string>(a.begin(), a.end()).size() == 5);
    for (const auto& id : a) CHECK((id != "p1" && id != "p2"));
    CHECK_THROWS_AS(select_batch(SamplingStrategy::random, pool, pool, 1, 0, src), PoolExhausted);
}

TEST_CASE("coverage with no history is the seeded random batch") {
    FixedSentenceSource src({});
    const std::vector<std::string> pool = {"a", "b", "c", "d", "e", "f"};
    CHECK(select_batch(SamplingStrategy::coverage, pool, {}, 3, 17, src) ==
          select_batch(SamplingStrategy::random, pool, {}, 3, 17, src));
}

TEST_CASE("coverage picks the least covered candidates, ties by id") {
    FixedSentenceSource src({{"h", {unit(0.0)}},
                             {"near", {unit(0.1)}},
                             {"far", {unit(2.5)}},
                             {"mid", {unit(1.2)}},
                             {"twin_b", {unit(2.0)}},
                             {"twin_a", {unit(2.0)}}});
    auto batch = select_batch(SamplingStrategy::coverage, {"h", "near", "far", "mid", "twin_b", "twin_a"}, {"h"}, 3,
                              0, src);
    CHECK(batch == std::vector<std::string>{"far", "twin_a", "twin_b"});
}

TEST_CASE("keyword upsampling ranks every keyword narrative first") {
    std::vector<Narrative> items;
    std::set<std::string> with_keyword;
    for (int i = 0; i < 100; ++i) {
        char id[8];
        std::snprintf(id, sizeof id, "k%02d", i);
        std::string text = "V was found at home. Family members reported stress at work.";
        if (i % 10 == 3) {
            text += " V had called an attorney.";
            with_keyword.insert(id);
        }
        items.push_back(narrative(id, text));
    }
    Corpus corpus(items);
    EmbedderConfig cfg;
    cfg.dimension = 256;
    auto split = keyword_upsample(corpus, {"lawyer", "attorney"}, 10, cfg);
    CHECK(std::set<std::string>(split.ids.begin(), split.ids.end()) == with_keyword);

    // Brute force ranking: identical texts tie, so ids must be ascending within the block.
    auto all = keyword_upsample(corpus, {"lawyer", "attorney"}, 100, cfg);
    CHECK(all.ids.size() == 100);
    CHECK(std::is_sorted(all.ids.begin(), all.ids.begin() + 10));
    CHECK(std::is_sorted(all.ids.begin() + 10, all.ids.end()));
    CHECK_THROWS_AS(keyword_upsample(corpus, {}, 10, cfg), ValidationError);
    CHECK_THROWS_AS(keyword_upsample(corpus, {"x"}, 101, cfg), ValidationError);
}

TEST_CASE("remote embedder replays a recorded transcript") {
    httplib::Server server;
    std::string seen_body;
    server.Post("/v1/embeddings", [&](const httplib::Request& req, httplib::Response& res) {
        seen_body = req.body;
        res.set_content(R"({"data":[{"embedding":[3,4,0]},{"embedding":[0,0,2]},{"embedding":[1,1,1]}]})",
                        "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    EmbedderConfig cfg;
    cfg.mode = EmbedderMode::remote;
    cfg.endpoint_url = "http://127.0.0.1:" + std::to_string(port);
    cfg.model_name = "recorded";
    cfg.dimension = 3;
    auto v = embed_batch({"a", "b", "c"}, cfg);
    server.stop();
    t.join();

    REQUIRE(v.size() == 3);
    CHECK(v[0][0] == doctest::Approx(0.6));
    CHECK(v[0][1] == doctest::Approx(0.8));
    CHECK(v[1][2] == doctest::Approx(1.0));
    auto body = Json::parse(seen_body);
    CHECK(body["model"] == "recorded");
    CHECK(body["input"] == Json::array({"a", "b", "c"}));

    cfg.dimension = 4;
    httplib::Server again;
    again.Post("/v1/embeddings", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"data":[{"embedding":[1,0,0]}]})", "application/json");
    });
    const int port2 = again.bind_to_any_port("127.0.0.1");
    std::thread t2([&] { again.listen_after_bind(); });
    again.wait_until_ready();
    cfg.endpoint_url = "http://127.0.0.1:" + std::to_string(port2);
    CHECK_THROWS(embed_batch({"a"}, cfg));
    again.stop();
    t2.join();
}

TEST_CASE("file-backed cache persists vectors and serves hits") {
    testing::TempDir dir;
    const auto file = dir / "cache.jsonl";
    EmbedderConfig cfg;
    cfg.dimension = 16;
    {
        EmbeddingCache cache(file);
        auto v = embed_cached({"alpha beta", "gamma"}, cfg, cache);
        CHECK(cache.size() == 2);
        embed_cached({"alpha beta"}, cfg, cache);
        CHECK(cache.size() == 2);
    }
    EmbeddingCache reopened(file);
    CHECK(reopened.size() == 2);
    const auto key = EmbeddingCache::key(cache_model_id(cfg), "gamma");
    REQUIRE(reopened.find(key));
    CHECK(*reopened.find(key) == hashing_embedding("gamma", 16));
    auto line = Json::parse(testing::slurp(file).substr(0, testing::slurp(file).find('\n')));
    CHECK(line.contains("key"));
    CHECK(line.contains("vector"));
}

}  // TEST_SUITE
