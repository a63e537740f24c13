#include "cbforge/http.hpp"

#include "cbforge/error.hpp"

#include <httplib.h>

namespace cbforge {

namespace {

struct ParsedUrl {
    std::string origin;  // scheme://host:port
    std::string prefix;  // path prefix without trailing slash
};

ParsedUrl parse_base_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw ValidationError("endpoint url needs a scheme: " + url, "endpoint_url");
    }
    if (url.compare(0, scheme_end, "http") != 0) {
        throw ValidationError("only http:// endpoints are supported: " + url, "endpoint_url");
    }
    const auto path_start = url.find('/', scheme_end + 3);
    ParsedUrl parsed;
    if (path_start == std::string::npos) {
        parsed.origin = url;
    } else {
        parsed.origin = url.substr(0, path_start);
        parsed.prefix = url.substr(path_start);
        while (!parsed.prefix.empty() && parsed.prefix.back() == '/') {
            parsed.prefix.pop_back();
        }
    }
    return parsed;
}

}  // namespace

HttpReply http_post_json(const HttpRequest& request) {
    const auto url = parse_base_url(request.base_url);
    httplib::Client client(url.origin);
    const auto seconds = std::chrono::duration_cast<std::chrono::seconds>(request.timeout);
    const auto micros = std::chrono::duration_cast<std::chrono::microseconds>(request.timeout - seconds);
    client.set_connection_timeout(seconds.count(), micros.count());
    client.set_read_timeout(seconds.count(), micros.count());
    client.set_write_timeout(seconds.count(), micros.count());

    httplib::Headers headers;
    for (const auto& [name, value] : request.headers) {
        headers.emplace(name, value);
    }
    auto result = client.Post(url.prefix + request.path, headers, request.body, "application/json");
    HttpReply reply;
    if (!result) {
        reply.error = httplib::to_string(result.error());
        return reply;
    }
    reply.status = result->status;
    reply.body = result->body;
    return reply;
}

}  // namespace cbforge
