#pragma once

#include "cbforge/codebook.hpp"
#include "cbforge/http.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace cbforge {

struct ModelEndpoint {
    std::string base_url;
    std::string model_id;
    double temperature = 0.2;
    int max_tokens = 1024;
    std::chrono::milliseconds timeout{120000};
    int max_retries = 3;
    std::size_t parallelism_cap = 4;
};

void validate(const ModelEndpoint& endpoint);

/// Anything that turns a (system, user) message pair into assistant text.
class ChatModel {
public:
    virtual ~ChatModel() = default;
    virtual std::string complete(const ModelEndpoint& endpoint, const std::string& system,
                                 const std::string& user) = 0;
};

using Transport = std::function<HttpReply(const HttpRequest&)>;
using Sleeper = std::function<void(std::chrono::milliseconds)>;

/// OpenAI-style chat client: POST {base_url}/v1/chat/completions. Transport
/// failures and 429 are retried with exponential backoff (1s base, doubling,
/// up to 10% jitter); any other non-2xx is a ProtocolError.
class HttpChatModel final : public ChatModel {
public:
    HttpChatModel();
    HttpChatModel(Transport transport, Sleeper sleeper, std::optional<std::string> api_key,
                  std::uint64_t jitter_seed = 0);

    std::string complete(const ModelEndpoint& endpoint, const std::string& system,
                         const std::string& user) override;

    /// Delay before retry number `attempt` (0-based), jitter excluded.
    static std::chrono::milliseconds base_backoff(int attempt);

private:
    Transport transport_;
    Sleeper sleeper_;
    std::optional<std::string> api_key_;
    std::mutex jitter_mutex_;
    std::uint64_t jitter_state_;
};

/// Request body as sent on the wire.
std::string chat_request_body(const ModelEndpoint& endpoint, const std::string& system, const std::string& user);

enum class ParsePath { strict, lenient, regex };

std::string to_string(ParsePath path);
ParsePath parse_path_from_string(const std::string& text);

struct ParsedOutput {
    std::string label;
    std::string reason;
    std::string span;
    ParsePath parse_path = ParsePath::strict;
};

/// Maps common drift ("1", "yes", "true", case, spaces for underscores) onto
/// a response option; anything else comes back trimmed and unchanged.
std::string normalize_label(const std::string& raw, const std::vector<std::string>& options);

/// Ladder: strict JSON, then repaired JSON (single quotes, bare keys, leading
/// prose, raw newlines, trailing commas), then a regex on the label field or a
/// lone option name. Throws UnparseableOutput or InvalidLabel.
ParsedOutput parse_prediction(const std::string& raw, const std::vector<std::string>& options);

/// {'reason': ..., 'span': ..., '<key>': ...} with single quotes escaped.
std::string render_prediction(const std::string& reason, const std::string& span, const std::string& label,
                              const std::string& label_key = "response");

struct Prediction {
    std::string narrative_id;
    std::string label;
    std::string reason;
    std::string span;
    std::string raw_output;
    ParsePath parse_path = ParsePath::strict;
    bool span_verbatim = false;

    bool operator==(const Prediction&) const = default;
};

Json to_json(const Prediction& prediction);
Prediction prediction_from_json(const Json& record);

Prediction predict(ChatModel& model, const ModelEndpoint& endpoint, const std::string& narrative_id,
                   const std::string& narrative_text, const PromptPair& prompt,
                   const std::vector<std::string>& options);

/// Renders the update prompt and returns the reply text. Throws
/// ValidationError on an empty error list, SynthesisError on an empty reply.
std::string synthesize_guidelines(ChatModel& model, const ModelEndpoint& endpoint, const Codebook& current,
                                  const std::vector<GuidelineError>& errors, const std::string& update_template);

}  // namespace cbforge
