#include "cbforge/codebook.hpp"

#include "cbforge/error.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

namespace cbforge {

namespace {

// Annotation and synthesis instructions for binary variables.
constexpr const char* kBinaryAnnotation =
    "Instructions: You are an expert suicide caseworker and your job is to annotate reports with the "
    "{variable} variable. Do not read into the text and stick to the definition of variable strictly. If two "
    "reports are provided, use both reports to determine your response but only return one response for both "
    "reports with no additional text!\n"
    "Provide the reasoning for your answer, the span of text that you used to generate your answer and your "
    "response using the response options only and return your answer in the following format: "
    "{'reason': 'reasoning', 'span': 'span of text', 'response': '1.0 or 0.0'}\n\n"
    "{options}{guidelines}\n\n{narrative}";

constexpr const char* kMulticlassAnnotation =
    "Instructions: You are an expert suicide caseworker and your job is to annotate reports with the "
    "{variable} variable. Do not read into the text and stick to the definition of variable strictly. If two "
    "reports are provided, use both reports to determine your response but only return one response for both "
    "reports with no additional text!\n"
    "Provide the reasoning for your answer, the span of text that you used to generate your answer and your "
    "label using the response options only and return your answer in the following format: "
    "{'reason': 'reasoning', 'span': 'span of text', 'label': '{option_list}'}\n\n"
    "{options}{guidelines}\n\n{narrative}";

constexpr const char* kSynthesisHead =
    "You are an expert suicide caseworker and your job is to curate a set of guidelines that will be used by "
    "another model to label suicide reports with the variable:{variable}. You will be shown the original set of "
    "guidelines, the report that was used to label the variable {variable}, the model's label, the correct "
    "human label, the human's reasoning, and the span of text that the human used from reports to decide their "
    "label. ";

constexpr const char* kSynthesisTail =
    " You have to return a set of new guidelines using this information which will be used to annotate "
    "{variable} for future reports. Keep the guidelines concise, and use the human reasoning, span, or other "
    "information from the report to update the guidelines, make sure to not lose out on information in the "
    "original set of guidelines but try not to have too much repetition. You have to return your answer in the "
    "following format with absolutely not additional text!: 'Guidelines: *..., *...'.\n\n"
    "Original guidelines:\n{guidelines}\n\n{errors}";

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

std::string rtrim(std::string s) {
    while (!s.empty() && is_space(s.back())) s.pop_back();
    return s;
}

std::size_t count_of(const std::string& haystack, const std::string& needle) {
    std::size_t n = 0;
    for (auto pos = haystack.find(needle); pos != std::string::npos; pos = haystack.find(needle, pos + 1)) {
        ++n;
    }
    return n;
}

/// Single left-to-right pass; substituted values are never rescanned.
std::string substitute(const std::string& text, const std::map<std::string, std::string>& values) {
    std::string out;
    out.reserve(text.size());
    for (std::size_t i = 0; i < text.size();) {
        bool replaced = false;
        if (text[i] == '{') {
            for (const auto& [name, value] : values) {
                const std::string token = "{" + name + "}";
                if (text.compare(i, token.size(), token) == 0) {
                    out += value;
                    i += token.size();
                    replaced = true;
                    break;
                }
            }
        }
        if (!replaced) {
            out.push_back(text[i++]);
        }
    }
    return out;
}

std::string join(const std::vector<std::string>& items, const std::string& sep) {
    std::string out;
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (i) out += sep;
        out += items[i];
    }
    return out;
}

std::string clean_bullet(std::string s) {
    s = trim(s);
    while (!s.empty() && (s.back() == ',' || is_space(s.back()))) {
        s.pop_back();
    }
    return s;
}

bool starts_with_foreign_glyph(const std::string& line) {
    static const std::array<std::string, 6> glyphs = {"•", "·", "▪", "◦", "‣", "⁃"};
    return std::any_of(glyphs.begin(), glyphs.end(),
                       [&](const std::string& g) { return line.compare(0, g.size(), g) == 0; });
}

bool dash_bullet(const std::string& line) {
    return line.size() >= 2 && line[0] == '-' && is_space(line[1]);
}

}  // namespace

std::vector<std::string> Codebook::bullet_texts() const {
    std::vector<std::string> out;
    out.reserve(bullets.size());
    for (const auto& b : bullets) {
        out.push_back(b.text);
    }
    return out;
}

PromptTemplates PromptTemplates::defaults_for(VariableKind kind) {
    PromptTemplates t;
    if (kind == VariableKind::binary) {
        t.annotation_template = kBinaryAnnotation;
        t.update_template = std::string(kSynthesisHead) + "The label can be 0.0 or 1.0." + kSynthesisTail;
    } else {
        t.annotation_template = kMulticlassAnnotation;
        t.update_template =
            std::string(kSynthesisHead) + "The label can be one of {option_list}." + kSynthesisTail;
    }
    return t;
}

void validate(const PromptTemplates& templates) {
    const auto& a = templates.annotation_template;
    for (const char* name : {"{options}", "{guidelines}", "{narrative}"}) {
        if (count_of(a, name) != 1) {
            throw ValidationError(std::string("annotation template must contain ") + name + " exactly once",
                                  "annotation_template");
        }
    }
    for (const char* name : {"{variable}", "{option_list}"}) {
        if (count_of(a, name) > 1) {
            throw ValidationError(std::string("annotation template repeats ") + name, "annotation_template");
        }
    }
    const auto& u = templates.update_template;
    for (const char* name : {"{guidelines}", "{errors}"}) {
        if (count_of(u, name) != 1) {
            throw ValidationError(std::string("update template must contain ") + name + " exactly once",
                                  "update_template");
        }
    }
}

PromptTemplates load_templates(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error("cannot open template file " + path);
    }
    PromptTemplates t;
    std::string* target = nullptr;
    std::string line;
    while (std::getline(in, line)) {
        const auto marker = trim(line);
        if (marker == "=== annotation ===") {
            target = &t.annotation_template;
            continue;
        }
        if (marker == "=== update ===") {
            target = &t.update_template;
            continue;
        }
        if (target) {
            *target += line;
            *target += '\n';
        }
    }
    t.annotation_template = rtrim(t.annotation_template);
    t.update_template = rtrim(t.update_template);
    validate(t);
    return t;
}

std::string render_options_block(const Variable& variable) {
    std::string out;
    if (variable.reference_codebook_text && !variable.reference_codebook_text->empty()) {
        out += "Definition:\n" + *variable.reference_codebook_text + "\n\n";
    }
    if (variable.option_definitions.empty()) {
        out += "Response options: " + join(variable.response_options, ", ");
        return out;
    }
    out += "Classes:";
    for (const auto& option : variable.response_options) {
        out += "\n\nLabel: " + option;
        if (auto it = variable.option_definitions.find(option); it != variable.option_definitions.end()) {
            out += "\n• Definition: " + it->second;
        }
    }
    return out;
}

Codebook init_codebook(const Variable& variable, const PromptTemplates& templates) {
    validate(variable);
    validate(templates);
    Codebook cb;
    cb.variable = variable.name;
    cb.version = 0;
    cb.preamble = templates.annotation_template;
    cb.response_options_block = render_options_block(variable);
    cb.response_options = variable.response_options;
    return cb;
}

Codebook init_codebook(const Variable& variable) {
    return init_codebook(variable, PromptTemplates::defaults_for(variable.kind));
}

std::string render_guidelines_section(const Codebook& codebook) {
    if (codebook.bullets.empty()) {
        return {};
    }
    std::string out = "\n\nGuidelines:";
    for (const auto& b : codebook.bullets) {
        out += "\n* " + b.text;
    }
    return out;
}

PromptPair render_annotation_prompt(const Codebook& codebook, const std::string& narrative_text) {
    const std::map<std::string, std::string> values = {
        {"variable", codebook.variable},
        {"options", codebook.response_options_block},
        {"option_list", join(codebook.response_options, ", ")},
        {"guidelines", render_guidelines_section(codebook)},
    };
    const auto at = codebook.preamble.find("{narrative}");
    if (at == std::string::npos) {
        throw ValidationError("codebook preamble lacks {narrative}", "preamble");
    }
    PromptPair out;
    out.system = rtrim(substitute(codebook.preamble.substr(0, at), values));
    out.user = narrative_text + rtrim(substitute(codebook.preamble.substr(at + 11), values));
    return out;
}

std::vector<std::string> parse_guideline_list(const std::string& text) {
    static const std::regex prefix(R"(^\s*\**\s*guidelines\s*\**\s*:\s*)", std::regex::icase);
    std::string body = trim(text);
    while (!body.empty() && (body.front() == '\'' || body.front() == '"' || body.front() == '`')) {
        body.erase(body.begin());
    }
    while (!body.empty() && (body.back() == '\'' || body.back() == '"' || body.back() == '`')) {
        body.pop_back();
    }
    body = std::regex_replace(body, prefix, "", std::regex_constants::format_first_only);

    std::vector<std::string> lines;
    {
        std::istringstream in(body);
        std::string line;
        while (std::getline(in, line)) {
            lines.push_back(trim(line));
        }
    }
    const bool has_markers = body.find('*') != std::string::npos ||
                             std::any_of(lines.begin(), lines.end(), dash_bullet);

    std::vector<std::string> items;
    if (!has_markers) {
        for (const auto& line : lines) {
            if (!line.empty() && !starts_with_foreign_glyph(line)) {
                items.push_back(line);
            }
        }
    } else {
        std::optional<std::string> current;
        auto close = [&] {
            if (current) items.push_back(*current);
            current.reset();
        };
        for (const auto& line : lines) {
            if (line.empty()) {
                close();
            } else if (dash_bullet(line)) {
                close();
                current = line.substr(2);
            } else if (line.find('*') != std::string::npos) {
                std::size_t start = 0;
                bool first = true;
                while (true) {
                    const auto star = line.find('*', start);
                    const std::string piece = line.substr(start, star == std::string::npos ? std::string::npos
                                                                                            : star - start);
                    if (first) {
                        if (current && !trim(piece).empty()) *current += " " + trim(piece);
                        first = false;
                    } else {
                        close();
                        current = piece;
                    }
                    if (star == std::string::npos) break;
                    start = star + 1;
                }
            } else if (starts_with_foreign_glyph(line)) {
                close();
            } else if (current) {
                *current += " " + line;
            }
        }
        close();
    }

    std::vector<std::string> out;
    for (auto& item : items) {
        auto cleaned = clean_bullet(item);
        if (!cleaned.empty()) {
            out.push_back(std::move(cleaned));
        }
    }
    if (out.empty()) {
        throw ParseError("no guideline bullets recovered", text);
    }
    return out;
}

std::string render_guideline_list(const std::vector<std::string>& bullets) {
    std::string out = "Guidelines:";
    for (const auto& b : bullets) {
        out += " * " + b;
    }
    return out;
}

std::string to_string(UpdateMode mode) { return mode == UpdateMode::append ? "append" : "replace"; }

UpdateMode update_mode_from_string(const std::string& text) {
    if (text == "append") return UpdateMode::append;
    if (text == "replace") return UpdateMode::replace;
    throw ValidationError("update mode must be append or replace", "update_mode");
}

Codebook apply_update(const Codebook& codebook, const std::vector<std::string>& new_bullets, int iteration,
                      const std::vector<std::string>& feedback_ids, UpdateMode mode) {
    Codebook next = codebook;
    next.version = codebook.version + 1;
    std::map<std::string, const GuidelineBullet*> previous;
    for (const auto& b : codebook.bullets) {
        previous.emplace(b.text, &b);
    }
    std::set<std::string> seen;
    if (mode == UpdateMode::append) {
        for (const auto& b : codebook.bullets) {
            seen.insert(b.text);
        }
    } else {
        next.bullets.clear();
    }
    for (const auto& text : new_bullets) {
        if (text.empty() || !seen.insert(text).second) {
            continue;
        }
        if (auto it = previous.find(text); it != previous.end()) {
            next.bullets.push_back(*it->second);
        } else {
            next.bullets.push_back({text, iteration, feedback_ids});
        }
    }
    return next;
}

CodebookDiff diff(const Codebook& from, const Codebook& to) {
    std::set<std::string> a;
    std::set<std::string> b;
    for (const auto& x : from.bullets) a.insert(x.text);
    for (const auto& x : to.bullets) b.insert(x.text);
    CodebookDiff d;
    for (const auto& x : to.bullets) {
        if (!a.count(x.text)) d.added.push_back(x.text);
    }
    for (const auto& x : from.bullets) {
        if (!b.count(x.text)) d.removed.push_back(x.text);
    }
    return d;
}

PromptPair render_update_prompt(const Codebook& codebook, const std::vector<GuidelineError>& errors,
                                const std::string& update_template) {
    std::string guidelines;
    if (codebook.bullets.empty()) {
        guidelines = "(none)";
    } else {
        for (std::size_t i = 0; i < codebook.bullets.size(); ++i) {
            if (i) guidelines += '\n';
            guidelines += "* " + codebook.bullets[i].text;
        }
    }
    std::string rendered_errors = "Errors:";
    for (std::size_t i = 0; i < errors.size(); ++i) {
        const auto& e = errors[i];
        rendered_errors += "\n\n### Error " + std::to_string(i + 1);
        rendered_errors += "\nReport: " + e.narrative_text;
        rendered_errors += "\nModel label: " + e.model_label;
        rendered_errors += "\nCorrect label: " + e.correct_label;
        rendered_errors += "\nHuman reasoning: " + e.rationale;
        rendered_errors += "\nSpan: " + e.span;
    }
    const std::map<std::string, std::string> values = {
        {"variable", codebook.variable},
        {"options", codebook.response_options_block},
        {"option_list", join(codebook.response_options, ", ")},
        {"guidelines", guidelines},
        {"errors", rendered_errors},
    };
    const auto at = update_template.find("{errors}");
    if (at == std::string::npos) {
        throw ValidationError("update template lacks {errors}", "update_template");
    }
    PromptPair out;
    out.system = rtrim(substitute(update_template.substr(0, at), values));
    out.user = rendered_errors + rtrim(substitute(update_template.substr(at + 8), values));
    return out;
}

Json to_json(const Codebook& codebook) {
    Json bullets = Json::array();
    for (const auto& b : codebook.bullets) {
        bullets.push_back(
            {{"text", b.text}, {"origin_iteration", b.origin_iteration}, {"origin_feedback_ids", b.origin_feedback_ids}});
    }
    return {{"variable", codebook.variable},
            {"version", codebook.version},
            {"preamble", codebook.preamble},
            {"options", codebook.response_options},
            {"options_block", codebook.response_options_block},
            {"bullets", bullets}};
}

Codebook codebook_from_json(const Json& record) {
    Codebook cb;
    cb.variable = record.at("variable").get<std::string>();
    cb.version = record.at("version").get<int>();
    cb.preamble = record.at("preamble").get<std::string>();
    cb.response_options = record.at("options").get<std::vector<std::string>>();
    cb.response_options_block = record.value("options_block", std::string());
    for (const auto& b : record.at("bullets")) {
        GuidelineBullet bullet;
        bullet.text = b.at("text").get<std::string>();
        bullet.origin_iteration = b.value("origin_iteration", 0);
        bullet.origin_feedback_ids = b.value("origin_feedback_ids", std::vector<std::string>{});
        if (bullet.text.empty()) {
            throw ValidationError("codebook bullet with empty text");
        }
        cb.bullets.push_back(std::move(bullet));
    }
    if (cb.version == 0 && !cb.bullets.empty()) {
        throw ValidationError("version-0 codebook must not carry bullets");
    }
    return cb;
}

}  // namespace cbforge
