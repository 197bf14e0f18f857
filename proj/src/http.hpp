#pragma once

// Thin synchronous JSON-over-HTTP helper shared by the inference and sidecar clients.

#include <optional>
#include <string>

namespace swapprobe::detail {

struct HttpTarget {
    std::string scheme_host_port;  // "http://127.0.0.1:8000"
    std::string path_prefix;       // "/v1" (no trailing slash)
};

HttpTarget parse_base_url(const std::string& base_url);

struct HttpResponse {
    int status = 0;
    std::string body;
};

/// One attempt. Throws TransportError when no HTTP response was obtained.
HttpResponse post_json(const HttpTarget& target, const std::string& path, const std::string& body,
                       double timeout_s, const std::optional<std::string>& bearer = std::nullopt);

HttpResponse get(const HttpTarget& target, const std::string& path, double timeout_s);

}  // namespace swapprobe::detail
