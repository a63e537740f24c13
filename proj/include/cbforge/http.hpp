#pragma once

#include <chrono>
#include <string>
#include <utility>
#include <vector>

namespace cbforge {

struct HttpRequest {
    std::string base_url;  // scheme://host[:port][/prefix]
    std::string path;      // appended to the prefix
    std::string body;
    std::vector<std::pair<std::string, std::string>> headers;
    std::chrono::milliseconds timeout{60000};
};

struct HttpReply {
    int status = 0;           // 0 when the transport failed
    std::string body;
    std::string error;        // transport error text
    bool transport_failed() const { return status == 0; }
};

/// Blocking JSON POST over plain HTTP.
HttpReply http_post_json(const HttpRequest& request);

}  // namespace cbforge
