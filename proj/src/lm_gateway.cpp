#include "cbforge/lm_gateway.hpp"

#include "cbforge/digest.hpp"
#include "cbforge/error.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <regex>
#include <set>
#include <thread>

namespace cbforge {

namespace {

bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

std::string trim(std::string_view s) {
    std::size_t b = 0;
    std::size_t e = s.size();
    while (b < e && is_space(s[b])) ++b;
    while (e > b && is_space(s[e - 1])) --e;
    return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

// Lowercase with spaces and hyphens folded to underscores.
std::string fold(const std::string& s) {
    std::string out = lower(s);
    for (auto& c : out) {
        if (c == ' ' || c == '-') c = '_';
    }
    return out;
}

std::size_t skip_spaces(const std::string& s, std::size_t i) {
    while (i < s.size() && is_space(s[i])) ++i;
    return i;
}

void emit_escaped_control(std::string& out, char c) {
    switch (c) {
        case '\n': out += "\\n"; break;
        case '\r': out += "\\r"; break;
        case '\t': out += "\\t"; break;
        default: out.push_back(c);
    }
}

/// Rewrites Python-dict-ish text into JSON.
std::string repair_json(const std::string& s) {
    enum class State { outside, in_double, in_single };
    State state = State::outside;
    std::string out;
    out.reserve(s.size() + 16);
    for (std::size_t i = 0; i < s.size(); ++i) {
        const char c = s[i];
        switch (state) {
            case State::outside:
                if (c == '"') {
                    out.push_back('"');
                    state = State::in_double;
                } else if (c == '\'') {
                    out.push_back('"');
                    state = State::in_single;
                } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
                    std::size_t j = i;
                    while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_' ||
                                            s[j] == '.')) {
                        ++j;
                    }
                    const std::string ident = s.substr(i, j - i);
                    const std::size_t k = skip_spaces(s, j);
                    const bool is_key = k < s.size() && s[k] == ':';
                    if (!is_key && (ident == "true" || ident == "false" || ident == "null")) {
                        out += ident;
                    } else if (!is_key && (ident == "True" || ident == "False" || ident == "None")) {
                        out += ident == "None" ? "null" : lower(ident);
                    } else {
                        out += "\"" + ident + "\"";
                    }
                    i = j - 1;
                } else if (c == ',') {
                    const std::size_t k = skip_spaces(s, i + 1);
                    if (k < s.size() && (s[k] == '}' || s[k] == ']')) {
                        continue;
                    }
                    out.push_back(c);
                } else {
                    out.push_back(c);
                }
                break;
            case State::in_double:
                if (c == '\\' && i + 1 < s.size()) {
                    if (s[i + 1] == '\'') {
                        out.push_back('\'');
                    } else {
                        out.push_back(c);
                        out.push_back(s[i + 1]);
                    }
                    ++i;
                } else if (c == '"') {
                    out.push_back('"');
                    state = State::outside;
                } else {
                    emit_escaped_control(out, c);
                }
                break;
            case State::in_single:
                if (c == '\\' && i + 1 < s.size()) {
                    if (s[i + 1] == '\'') {
                        out.push_back('\'');
                    } else {
                        out.push_back(c);
                        out.push_back(s[i + 1]);
                    }
                    ++i;
                } else if (c == '"') {
                    out += "\\\"";
                } else if (c == '\'') {
                    const std::size_t k = skip_spaces(s, i + 1);
                    if (k >= s.size() || s[k] == ',' || s[k] == '}' || s[k] == ':' || s[k] == ']') {
                        out.push_back('"');
                        state = State::outside;
                    } else {
                        out.push_back('\'');  // apostrophe inside the value
                    }
                } else {
                    emit_escaped_control(out, c);
                }
                break;
        }
    }
    return out;
}

std::optional<Json> find_key(const Json& object, std::initializer_list<const char*> keys) {
    for (const char* key : keys) {
        for (const auto& [k, v] : object.items()) {
            if (lower(trim(k)) == key) {
                return v;
            }
        }
    }
    return std::nullopt;
}

std::string as_text(const Json& value) {
    if (value.is_string()) return value.get<std::string>();
    if (value.is_null()) return {};
    return value.dump();
}

std::optional<ParsedOutput> from_object(const Json& object, ParsePath path) {
    if (!object.is_object()) {
        return std::nullopt;
    }
    auto label = find_key(object, {"response", "label"});
    if (!label || label->is_null() || label->is_object() || label->is_array()) {
        return std::nullopt;
    }
    ParsedOutput out;
    out.label = as_text(*label);
    if (auto reason = find_key(object, {"reason", "reasoning"})) out.reason = as_text(*reason);
    if (auto span = find_key(object, {"span"})) out.span = as_text(*span);
    out.parse_path = path;
    return out;
}

std::optional<Json> try_parse(const std::string& text) {
    try {
        return Json::parse(text);
    } catch (const Json::parse_error&) {
        return std::nullopt;
    }
}

std::string finish_label(const ParsedOutput& parsed, const std::vector<std::string>& options,
                         const std::string& raw) {
    auto label = normalize_label(parsed.label, options);
    if (std::find(options.begin(), options.end(), label) == options.end()) {
        throw InvalidLabel("label '" + label + "' is not a response option", label, raw);
    }
    return label;
}

}  // namespace

void validate(const ModelEndpoint& endpoint) {
    if (!(endpoint.temperature >= 0.0 && endpoint.temperature <= 2.0)) {
        throw ValidationError("temperature must lie in [0, 2]", "temperature");
    }
    if (endpoint.max_tokens <= 0) {
        throw ValidationError("max_tokens must be positive", "max_tokens");
    }
    if (endpoint.max_retries < 0) {
        throw ValidationError("max_retries must be non-negative", "max_retries");
    }
    if (endpoint.parallelism_cap == 0) {
        throw ValidationError("parallelism_cap must be positive", "parallelism_cap");
    }
}

HttpChatModel::HttpChatModel()
    : HttpChatModel(http_post_json, [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); },
                    [] () -> std::optional<std::string> {
                        const char* key = std::getenv("CODEBOOK_FORGE_API_KEY");
                        if (key && *key) return std::string(key);
                        return std::nullopt;
                    }()) {}

HttpChatModel::HttpChatModel(Transport transport, Sleeper sleeper, std::optional<std::string> api_key,
                             std::uint64_t jitter_seed)
    : transport_(std::move(transport)),
      sleeper_(std::move(sleeper)),
      api_key_(std::move(api_key)),
      jitter_state_(jitter_seed) {}

std::chrono::milliseconds HttpChatModel::base_backoff(int attempt) {
    return std::chrono::milliseconds(1000LL << std::min(attempt, 16));
}

std::string chat_request_body(const ModelEndpoint& endpoint, const std::string& system, const std::string& user) {
    Json body = {{"model", endpoint.model_id},
                 {"temperature", endpoint.temperature},
                 {"max_tokens", endpoint.max_tokens},
                 {"messages",
                  Json::array({{{"role", "system"}, {"content", system}}, {{"role", "user"}, {"content", user}}})}};
    return body.dump();
}

std::string HttpChatModel::complete(const ModelEndpoint& endpoint, const std::string& system,
                                    const std::string& user) {
    validate(endpoint);
    HttpRequest request;
    request.base_url = endpoint.base_url;
    request.path = "/v1/chat/completions";
    request.timeout = endpoint.timeout;
    request.body = chat_request_body(endpoint, system, user);
    if (api_key_) {
        request.headers.emplace_back("Authorization", "Bearer " + *api_key_);
    }

    for (int attempt = 0;; ++attempt) {
        HttpReply reply = transport_(request);
        if (reply.transport_failed() || reply.status == 429) {
            if (attempt >= endpoint.max_retries) {
                throw TransportError(reply.transport_failed()
                                         ? "chat endpoint unreachable after " + std::to_string(attempt + 1) +
                                               " attempts: " + reply.error
                                         : "chat endpoint rate-limited after " + std::to_string(attempt + 1) +
                                               " attempts");
            }
            auto delay = base_backoff(attempt);
            {
                std::lock_guard lock(jitter_mutex_);
                jitter_state_ = derive_seed(jitter_state_, static_cast<std::uint64_t>(attempt));
                delay += std::chrono::milliseconds(static_cast<long long>(jitter_state_ % (delay.count() / 10 + 1)));
            }
            sleeper_(delay);
            continue;
        }
        if (reply.status < 200 || reply.status >= 300) {
            throw ProtocolError(reply.status, "chat endpoint returned HTTP " + std::to_string(reply.status));
        }
        auto body = try_parse(reply.body);
        if (!body || !body->contains("choices") || !(*body)["choices"].is_array() || (*body)["choices"].empty()) {
            throw ProtocolError(reply.status, "chat reply lacks choices[0]");
        }
        const auto& message = (*body)["choices"][0]["message"];
        if (!message.is_object() || !message.contains("content") || !message["content"].is_string()) {
            throw ProtocolError(reply.status, "chat reply lacks choices[0].message.content");
        }
        return message["content"].get<std::string>();
    }
}

std::string to_string(ParsePath path) {
    switch (path) {
        case ParsePath::strict: return "strict";
        case ParsePath::lenient: return "lenient";
        case ParsePath::regex: return "regex";
    }
    return "strict";
}

ParsePath parse_path_from_string(const std::string& text) {
    if (text == "strict") return ParsePath::strict;
    if (text == "lenient") return ParsePath::lenient;
    if (text == "regex") return ParsePath::regex;
    throw ValidationError("unknown parse path " + text);
}

std::string normalize_label(const std::string& raw, const std::vector<std::string>& options) {
    std::string s = trim(raw);
    auto strip = [](char c) { return c == '\'' || c == '"' || c == '`' || c == '*' || c == ',' || c == ';'; };
    while (!s.empty() && strip(s.front())) s.erase(s.begin());
    while (!s.empty() && (strip(s.back()) || s.back() == '.') &&
           !(s.size() >= 2 && s.back() == '.' && std::isdigit(static_cast<unsigned char>(s[s.size() - 2])) &&
             s.find('.') == s.size() - 1)) {
        s.pop_back();
    }
    s = trim(s);
    if (std::find(options.begin(), options.end(), s) != options.end()) {
        return s;
    }
    const std::string folded = fold(s);
    for (const auto& option : options) {
        if (fold(option) == folded) {
            return option;
        }
    }
    const auto has = [&](const char* o) { return std::find(options.begin(), options.end(), o) != options.end(); };
    if (has("1.0") && (folded == "1" || folded == "1.0" || folded == "1.00" || folded == "yes" || folded == "true")) {
        return "1.0";
    }
    if (has("0.0") && (folded == "0" || folded == "0.0" || folded == "0.00" || folded == "no" || folded == "false")) {
        return "0.0";
    }
    return s;
}

ParsedOutput parse_prediction(const std::string& raw, const std::vector<std::string>& options) {
    const std::string text = trim(raw);

    if (auto strict = try_parse(text)) {
        if (auto parsed = from_object(*strict, ParsePath::strict)) {
            parsed->label = finish_label(*parsed, options, raw);
            return *parsed;
        }
    }

    const auto open = text.find('{');
    const auto close = text.rfind('}');
    if (open != std::string::npos && close != std::string::npos && close > open) {
        const std::string candidate = text.substr(open, close - open + 1);
        std::optional<Json> object = try_parse(candidate);
        if (!object || !object->is_object()) {
            object = try_parse(repair_json(candidate));
        }
        if (object) {
            if (auto parsed = from_object(*object, ParsePath::lenient)) {
                parsed->label = finish_label(*parsed, options, raw);
                return *parsed;
            }
        }
    }

    ParsedOutput fallback;
    fallback.reason = raw;
    fallback.span = raw;
    fallback.parse_path = ParsePath::regex;

    static const std::regex field(R"((?:response|label)\s*['"]?\s*[:=]\s*['"]?\s*([A-Za-z0-9_.\-]+))",
                                  std::regex::icase);
    std::smatch match;
    if (std::regex_search(text, match, field)) {
        fallback.label = match[1].str();
        fallback.label = finish_label(fallback, options, raw);
        return fallback;
    }

    const std::string whole = normalize_label(text, options);
    if (std::find(options.begin(), options.end(), whole) != options.end()) {
        fallback.label = whole;
        return fallback;
    }

    static const std::regex token(R"([A-Za-z0-9_.]+)");
    std::set<std::string> found;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), token); it != std::sregex_iterator(); ++it) {
        std::string word = it->str();
        while (!word.empty() && word.back() == '.' && std::count(word.begin(), word.end(), '.') > 0 &&
               std::find(options.begin(), options.end(), word) == options.end()) {
            word.pop_back();
        }
        if (std::find(options.begin(), options.end(), word) != options.end()) {
            found.insert(word);
        }
    }
    if (found.size() == 1) {
        fallback.label = *found.begin();
        return fallback;
    }
    throw UnparseableOutput(found.empty() ? "no label found in model output"
                                          : "model output names several response options",
                            raw);
}

std::string render_prediction(const std::string& reason, const std::string& span, const std::string& label,
                              const std::string& label_key) {
    auto quote = [](const std::string& s) {
        std::string out = "'";
        for (char c : s) {
            if (c == '\\') out += "\\\\";
            else if (c == '\'') out += "\\'";
            else if (c == '\n') out += "\\n";
            else out.push_back(c);
        }
        return out + "'";
    };
    return "{'reason': " + quote(reason) + ", 'span': " + quote(span) + ", '" + label_key + "': " + quote(label) +
           "}";
}

Json to_json(const Prediction& p) {
    return {{"id", p.narrative_id},     {"label", p.label},
            {"reason", p.reason},       {"span", p.span},
            {"span_verbatim", p.span_verbatim},
            {"parse_path", to_string(p.parse_path)},
            {"raw_output", p.raw_output}};
}

Prediction prediction_from_json(const Json& record) {
    Prediction p;
    p.narrative_id = record.at("id").get<std::string>();
    p.label = record.at("label").get<std::string>();
    p.reason = record.value("reason", std::string());
    p.span = record.value("span", std::string());
    p.span_verbatim = record.value("span_verbatim", false);
    p.parse_path = parse_path_from_string(record.value("parse_path", std::string("strict")));
    p.raw_output = record.value("raw_output", std::string());
    return p;
}

Prediction predict(ChatModel& model, const ModelEndpoint& endpoint, const std::string& narrative_id,
                   const std::string& narrative_text, const PromptPair& prompt,
                   const std::vector<std::string>& options) {
    Prediction p;
    p.narrative_id = narrative_id;
    p.raw_output = model.complete(endpoint, prompt.system, prompt.user);
    auto parsed = parse_prediction(p.raw_output, options);
    p.label = std::move(parsed.label);
    p.reason = std::move(parsed.reason);
    p.span = std::move(parsed.span);
    p.parse_path = parsed.parse_path;
    p.span_verbatim = !p.span.empty() && narrative_text.find(p.span) != std::string::npos;
    return p;
}

std::string synthesize_guidelines(ChatModel& model, const ModelEndpoint& endpoint, const Codebook& current,
                                  const std::vector<GuidelineError>& errors, const std::string& update_template) {
    if (errors.empty()) {
        throw ValidationError("guideline synthesis needs at least one error item", "errors");
    }
    const auto prompt = render_update_prompt(current, errors, update_template);
    auto reply = model.complete(endpoint, prompt.system, prompt.user);
    if (trim(reply).empty()) {
        throw SynthesisError("guideline synthesis returned an empty reply");
    }
    return reply;
}

}  // namespace cbforge
