#include "cbforge/error.hpp"
#include "cbforge/lm_gateway.hpp"
#include "support.hpp"

#include <doctest.h>
#include <httplib.h>

#include <fstream>
#include <thread>

using namespace cbforge;

namespace {

const std::vector<std::string> kBinary = {"0.0", "1.0"};
const std::vector<std::string> kLegal = {"no_interaction", "implicit_interaction", "explicit_interaction"};

std::string chat_reply(const std::string& content) {
    return Json{{"choices", Json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}}.dump();
}

ModelEndpoint endpoint() {
    ModelEndpoint e;
    e.base_url = "http://model.invalid";
    e.model_id = "m";
    e.max_retries = 3;
    return e;
}

}  // namespace

TEST_SUITE("lm_gateway") {

TEST_CASE("well-formed outputs parse strictly") {
    auto p = parse_prediction(R"({"reason": "r", "span": "s", "response": "1.0"})", kBinary);
    CHECK(p.label == "1.0");
    CHECK(p.reason == "r");
    CHECK(p.span == "s");
    CHECK(p.parse_path == ParsePath::strict);

    auto legal = parse_prediction(R"({"reason":"x","span":"","label":"explicit_interaction"})", kLegal);
    CHECK(legal.label == "explicit_interaction");
}

TEST_CASE("label aliases normalise") {
    CHECK(normalize_label("1", kBinary) == "1.0");
    CHECK(normalize_label(" Yes ", kBinary) == "1.0");
    CHECK(normalize_label("true", kBinary) == "1.0");
    CHECK(normalize_label("0", kBinary) == "0.0");
    CHECK(normalize_label("False", kBinary) == "0.0");
    CHECK(normalize_label("Explicit Interaction", kLegal) == "explicit_interaction");
    CHECK(normalize_label("maybe", kBinary) == "maybe");
}

TEST_CASE("malformed output fixture") {
    std::ifstream in(testing::fixture("malformed_outputs.jsonl"));
    std::string line;
    int cases = 0;
    int recovered = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto c = Json::parse(line);
        const auto& options = c["options"] == "legal" ? kLegal : kBinary;
        const auto raw = c["raw"].get<std::string>();
        ++cases;
        CAPTURE(raw);
        if (c["expect"].is_null()) {
            CHECK_THROWS_AS(parse_prediction(raw, options), UnparseableOutput);
        } else {
            const auto got = parse_prediction(raw, options);
            CHECK(got.label == c["expect"].get<std::string>());
            if (got.label == c["expect"].get<std::string>()) ++recovered;
        }
    }
    CHECK(cases == 30);
    CHECK(recovered == 29);
}

TEST_CASE("out-of-set labels raise InvalidLabel carrying the label") {
    try {
        parse_prediction(R"({"reason":"r","span":"s","response":"2.0"})", kBinary);
        FAIL("expected InvalidLabel");
    } catch (const InvalidLabel& e) {
        CHECK(e.label() == "2.0");
    }
    CHECK_THROWS_AS(parse_prediction("I cannot decide between 0.0 and 1.0", kBinary), UnparseableOutput);
    CHECK_THROWS_AS(parse_prediction("", kBinary), UnparseableOutput);
}

TEST_CASE("rendered predictions parse back") {
    const auto text = render_prediction("V's lawyer said \"no\"", "it's", "1.0");
    CHECK(text.front() == '{');
    const auto p = parse_prediction(text, kBinary);
    CHECK(p.label == "1.0");
    CHECK(p.reason == "V's lawyer said \"no\"");
    CHECK(p.span == "it's");
    CHECK(parse_prediction(render_prediction("", "", "implicit_interaction", "label"), kLegal).label ==
          "implicit_interaction");
}

TEST_CASE("request body shape") {
    auto e = endpoint();
    e.temperature = 0.7;
    e.max_tokens = 200;
    const auto body = Json::parse(chat_request_body(e, "sys", "usr"));
    CHECK(body["model"] == "m");
    CHECK(body["temperature"].get<double>() == doctest::Approx(0.7));
    CHECK(body["max_tokens"] == 200);
    REQUIRE(body["messages"].size() == 2);
    CHECK(body["messages"][0] == Json{{"role", "system"}, {"content", "sys"}});
    CHECK(body["messages"][1] == Json{{"role", "user"}, {"content", "usr"}});
}

TEST_CASE("429 and connection failures are retried with doubling backoff") {
    std::vector<std::chrono::milliseconds> sleeps;
    int calls = 0;
    HttpChatModel model(
        [&](const HttpRequest& req) {
            ++calls;
            CHECK(req.path == "/v1/chat/completions");
            if (calls == 1) return HttpReply{0, "", "refused"};
            if (calls <= 3) return HttpReply{429, "", ""};
            return HttpReply{200, chat_reply("ok"), ""};
        },
        [&](std::chrono::milliseconds d) { sleeps.push_back(d); }, std::nullopt, 3);
    CHECK(model.complete(endpoint(), "s", "u") == "ok");
    CHECK(calls == 4);
    REQUIRE(sleeps.size() == 3);
    for (int i = 0; i < 3; ++i) {
        const auto base = HttpChatModel::base_backoff(i);
        CHECK(base.count() == 1000LL << i);
        CHECK(sleeps[i] >= base);
        CHECK(sleeps[i].count() <= base.count() + base.count() / 10);
    }
}

TEST_CASE("retries stop after max_retries") {
    int calls = 0;
    HttpChatModel model([&](const HttpRequest&) { ++calls; return HttpReply{429, "", ""}; },
                        [](std::chrono::milliseconds) {}, std::nullopt);
    CHECK_THROWS_AS(model.complete(endpoint(), "s", "u"), TransportError);
    CHECK(calls == 4);
}

TEST_CASE("other failures are protocol errors without retry") {
    int calls = 0;
    HttpChatModel bad_status([&](const HttpRequest&) { ++calls; return HttpReply{500, "oops", ""}; },
                             [](std::chrono::milliseconds) {}, std::nullopt);
    try {
        bad_status.complete(endpoint(), "s", "u");
        FAIL("expected ProtocolError");
    } catch (const ProtocolError& e) {
        CHECK(e.status() == 500);
    }
    CHECK(calls == 1);

    HttpChatModel no_choices([](const HttpRequest&) { return HttpReply{200, R"({"choices":[]})", ""}; },
                             [](std::chrono::milliseconds) {}, std::nullopt);
    CHECK_THROWS_AS(no_choices.complete(endpoint(), "s", "u"), ProtocolError);
}

TEST_CASE("api key travels only in the authorization header") {
    std::vector<std::pair<std::string, std::string>> headers;
    std::string body;
    HttpChatModel model(
        [&](const HttpRequest& req) {
            headers = req.headers;
            body = req.body;
            return HttpReply{200, chat_reply("x"), ""};
        },
        [](std::chrono::milliseconds) {}, std::string("sekret-123"));
    model.complete(endpoint(), "s", "u");
    REQUIRE(headers.size() == 1);
    CHECK(headers[0].first == "Authorization");
    CHECK(headers[0].second == "Bearer sekret-123");
    CHECK(body.find("sekret") == std::string::npos);
}

TEST_CASE("endpoint validation") {
    auto e = endpoint();
    e.temperature = 2.5;
    HttpChatModel model([](const HttpRequest&) { return HttpReply{200, chat_reply("x"), ""}; },
                        [](std::chrono::milliseconds) {}, std::nullopt);
    CHECK_THROWS_AS(model.complete(e, "s", "u"), ValidationError);
    e = endpoint();
    e.max_tokens = 0;
    CHECK_THROWS_AS(validate(e), ValidationError);
}

TEST_CASE("real HTTP round trip against a recorded reply") {
    httplib::Server server;
    server.Post("/v1/chat/completions", [](const httplib::Request& req, httplib::Response& res) {
        const auto body = Json::parse(req.body);
        const bool ok = body["messages"][1]["content"] == "Narrative: V called a lawyer.";
        res.set_content(chat_reply(ok ? render_prediction("lawyer named", "a lawyer", "1.0") : "?"),
                        "application/json");
    });
    const int port = server.bind_to_any_port("127.0.0.1");
    std::thread t([&] { server.listen_after_bind(); });
    server.wait_until_ready();

    HttpChatModel model;
    auto e = endpoint();
    e.base_url = "http://127.0.0.1:" + std::to_string(port);
    const auto p = predict(model, e, "n1", "V called a lawyer.", PromptPair{"sys", "Narrative: V called a lawyer."},
                           kBinary);
    server.stop();
    t.join();
    CHECK(p.label == "1.0");
    CHECK(p.span_verbatim);
    CHECK(p.narrative_id == "n1");
    CHECK(prediction_from_json(to_json(p)) == p);
}

TEST_CASE("unreachable endpoint is a transport error") {
    HttpChatModel model(http_post_json, [](std::chrono::milliseconds) {}, std::nullopt);
    auto e = endpoint();
    e.base_url = "http://127.0.0.1:1";
    e.max_retries = 1;
    e.timeout = std::chrono::milliseconds(500);
    CHECK_THROWS_AS(model.complete(e, "s", "u"), TransportError);
}

}  // TEST_SUITE
