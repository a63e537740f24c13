#include "cbforge/codebook.hpp"
#include "cbforge/error.hpp"
#include "support.hpp"

#include <doctest.h>

using namespace cbforge;

namespace {

Variable legal_variable() {
    return variable_from_json(Json::parse(testing::slurp(std::string(CBFORGE_TEMPLATES) + "/legal_interaction_variable.json")));
}

Codebook with_bullets(std::vector<std::string> texts) {
    auto cb = init_codebook(binary_variable("DummyVar"));
    for (auto& t : texts) cb.bullets.push_back({t, 1, {"f"}});
    return cb;
}

}  // namespace

TEST_SUITE("codebook") {

TEST_CASE("binary annotation prompt at version 0 matches the reference text") {
    const auto cb = init_codebook(binary_variable("DummyVar"));
    CHECK(cb.version == 0);
    CHECK(cb.bullets.empty());
    const auto prompt = render_annotation_prompt(cb, "CME Report: V was found.");
    auto expected = testing::slurp(testing::fixture("binary_annotation_system.txt"));
    if (!expected.empty() && expected.back() == '\n') expected.pop_back();
    CHECK(prompt.system == expected);
    CHECK(prompt.user == "CME Report: V was found.");
}

TEST_CASE("legal annotation prompt matches after whitespace folding") {
    const auto templates = load_templates(std::string(CBFORGE_TEMPLATES) + "/legal_interaction.txt");
    const auto cb = init_codebook(legal_variable(), templates);
    const auto prompt = render_annotation_prompt(cb, "LE Report: x");
    CHECK(testing::squash(prompt.system) == testing::squash(testing::slurp(testing::fixture("legal_annotation_system.txt"))));
    CHECK(prompt.user == "LE Report: x");
}

TEST_CASE("guidelines render after the options") {
    const auto cb = with_bullets({"a rule", "another rule"});
    CHECK(render_guidelines_section(cb) == "\n\nGuidelines:\n* a rule\n* another rule");
    const auto prompt = render_annotation_prompt(cb, "N");
    CHECK(prompt.system.size() > 40);
    CHECK(prompt.system.substr(prompt.system.size() - 40).find("* another rule") != std::string::npos);
    CHECK(render_guidelines_section(with_bullets({})).empty());
}

TEST_CASE("binary synthesis system prompt matches the reference text") {
    const auto templates = PromptTemplates::defaults_for(VariableKind::binary);
    const auto cb = init_codebook(binary_variable("DummyVar"), templates);
    GuidelineError e{"f1", "CME Report: V called a lawyer.", "0.0", "1.0", "lawyer named", "a lawyer"};
    const auto prompt = render_update_prompt(cb, {e}, templates.update_template);
    const auto expected = testing::slurp(testing::fixture("binary_synthesis_system.txt"));
    CHECK(prompt.system.substr(0, expected.size()) == expected);
    CHECK(prompt.system.find("Original guidelines:\n(none)") != std::string::npos);
    CHECK(prompt.user.find("Correct label: 1.0") != std::string::npos);
    CHECK(prompt.user.find("Human reasoning: lawyer named") != std::string::npos);
    CHECK(prompt.user.find("Span: a lawyer") != std::string::npos);
}

TEST_CASE("update prompt lists every error and the current bullets") {
    const auto cb = with_bullets({"old rule"});
    std::vector<GuidelineError> errors;
    for (int i = 0; i < 3; ++i) errors.push_back({"f" + std::to_string(i), "text", "0.0", "1.0", "why", ""});
    const auto prompt =
        render_update_prompt(cb, errors, PromptTemplates::defaults_for(VariableKind::binary).update_template);
    CHECK(prompt.system.find("* old rule") != std::string::npos);
    CHECK(prompt.user.find("### Error 3") != std::string::npos);
    CHECK(prompt.user.find("### Error 4") == std::string::npos);
}

TEST_CASE("the guideline list from an expert reply parses bullet for bullet") {
    const auto reply = testing::slurp(testing::fixture("hitl_guidelines_reply.txt"));
    const auto expected = Json::parse(testing::slurp(testing::fixture("hitl_guidelines_expected.json")));
    const auto got = parse_guideline_list(reply);
    REQUIRE(got.size() == expected.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == expected[i].get<std::string>());
}

TEST_CASE("guideline list variants") {
    CHECK(parse_guideline_list("'Guidelines: *rule one., *rule two.'") ==
          std::vector<std::string>{"rule one.", "rule two."});
    CHECK(parse_guideline_list("- a\n- b\n  continued") == std::vector<std::string>{"a", "b continued"});
    CHECK(parse_guideline_list("Guidelines:\nplain one\nplain two") ==
          std::vector<std::string>{"plain one", "plain two"});
    CHECK_THROWS_AS(parse_guideline_list("Guidelines:"), ParseError);
    CHECK_THROWS_AS(parse_guideline_list("   "), ParseError);
}

TEST_CASE("render and parse round trip") {
    const std::vector<std::string> bullets = {"If V spoke to counsel, label explicit.", "Divorce alone is not enough."};
    CHECK(parse_guideline_list(render_guideline_list(bullets)) == bullets);
}

TEST_CASE("append keeps old bullets and dedups exactly") {
    auto cb = with_bullets({"a", "b"});
    auto next = apply_update(cb, {"b", "c", "c", ""}, 2, {"f9"}, UpdateMode::append);
    CHECK(next.version == cb.version + 1);
    CHECK(next.bullet_texts() == std::vector<std::string>{"a", "b", "c"});
    CHECK(next.bullets[1].origin_iteration == 1);
    CHECK(next.bullets[2].origin_iteration == 2);
    CHECK(next.bullets[2].origin_feedback_ids == std::vector<std::string>{"f9"});
}

TEST_CASE("replace keeps exactly the new list with carried provenance") {
    auto cb = with_bullets({"a", "b"});
    auto next = apply_update(cb, {"b", "z"}, 4, {"f1", "f2"}, UpdateMode::replace);
    CHECK(next.bullet_texts() == std::vector<std::string>{"b", "z"});
    CHECK(next.bullets[0].origin_iteration == 1);
    CHECK(next.bullets[1].origin_iteration == 4);
    const auto d = diff(cb, next);
    CHECK(d.added == std::vector<std::string>{"z"});
    CHECK(d.removed == std::vector<std::string>{"a"});
}

TEST_CASE("diff of identical codebooks is empty") {
    auto cb = with_bullets({"a"});
    const auto d = diff(cb, cb);
    CHECK(d.added.empty());
    CHECK(d.removed.empty());
}

TEST_CASE("template validation names the offending placeholder") {
    auto t = PromptTemplates::defaults_for(VariableKind::binary);
    t.annotation_template = "no narrative here {options}{guidelines}";
    try {
        validate(t);
        FAIL("expected ValidationError");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("{narrative}") != std::string::npos);
    }
    t = PromptTemplates::defaults_for(VariableKind::binary);
    t.update_template += "{errors}";
    CHECK_THROWS_AS(validate(t), ValidationError);
    CHECK_NOTHROW(validate(PromptTemplates::defaults_for(VariableKind::multiclass)));
}

TEST_CASE("codebook JSON round trip") {
    auto cb = with_bullets({"x", "y"});
    cb.version = 3;
    CHECK(codebook_from_json(to_json(cb)) == cb);
    CHECK(codebook_from_json(Json::parse(to_json(cb).dump())) == cb);
}

TEST_CASE("update modes parse") {
    CHECK(update_mode_from_string("append") == UpdateMode::append);
    CHECK(to_string(UpdateMode::replace) == "replace");
    CHECK_THROWS_AS(update_mode_from_string("merge"), ValidationError);
}

}  // TEST_SUITE
