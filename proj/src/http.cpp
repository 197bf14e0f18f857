#include "http.hpp"

#include <cmath>

#include <httplib.h>

#include "swapprobe/errors.hpp"

namespace swapprobe::detail {

HttpTarget parse_base_url(const std::string& base_url) {
    const auto scheme_end = base_url.find("://");
    if (scheme_end == std::string::npos) throw ConfigError("base_url lacks a scheme: " + base_url);
    const auto path_start = base_url.find('/', scheme_end + 3);
    HttpTarget t;
    t.scheme_host_port = base_url.substr(0, path_start);
    if (path_start != std::string::npos) t.path_prefix = base_url.substr(path_start);
    while (!t.path_prefix.empty() && t.path_prefix.back() == '/') t.path_prefix.pop_back();
    return t;
}

namespace {

void configure(httplib::Client& cli, double timeout_s) {
    const auto sec = static_cast<time_t>(std::floor(timeout_s));
    const auto usec = static_cast<time_t>((timeout_s - std::floor(timeout_s)) * 1e6);
    cli.set_connection_timeout(sec, usec);
    cli.set_read_timeout(sec, usec);
    cli.set_write_timeout(sec, usec);
    cli.set_keep_alive(false);
}

}  // namespace

HttpResponse post_json(const HttpTarget& target, const std::string& path, const std::string& body,
                       double timeout_s, const std::optional<std::string>& bearer) {
    httplib::Client cli(target.scheme_host_port);
    configure(cli, timeout_s);
    httplib::Headers headers;
    if (bearer && !bearer->empty()) headers.emplace("Authorization", "Bearer " + *bearer);
    auto res = cli.Post(target.path_prefix + path, headers, body, "application/json");
    if (!res) throw TransportError("POST " + target.scheme_host_port + target.path_prefix + path + ": " +
                                   httplib::to_string(res.error()));
    return {res->status, res->body};
}

HttpResponse get(const HttpTarget& target, const std::string& path, double timeout_s) {
    httplib::Client cli(target.scheme_host_port);
    configure(cli, timeout_s);
    auto res = cli.Get(target.path_prefix + path);
    if (!res) throw TransportError("GET " + target.scheme_host_port + target.path_prefix + path + ": " +
                                   httplib::to_string(res.error()));
    return {res->status, res->body};
}

}  // namespace swapprobe::detail
