#pragma once

#include <chrono>
#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "swapprobe/templates.hpp"

namespace swapprobe::mock {

/// How the scripted model answers.
enum class Behavior {
    /// Reads the pixel-encoded label of the image it is shown; notices a swap
    /// when its prior reasoning disagrees with the current image.
    LabelPixel,
    /// Repeats the answer found in its own prior reasoning; reads the image
    /// only when no prior answer is present.
    Anchored,
    /// Always replies with `sentinel`.
    Echo,
};

Behavior parse_behavior(std::string_view s);

struct RequestRecord {
    std::size_t index = 0;
    std::string path;
    std::string body;
    std::chrono::steady_clock::time_point started;
    std::chrono::steady_clock::time_point finished;
    int status = 200;
};

struct Options {
    Behavior behavior = Behavior::LabelPixel;
    TemplateConfig tmpl;  // to locate the assistant turn inside raw prompts
    std::string sentinel = "SENTINEL";
    bool chat_only = false;  // /completions answers 404
    /// The first N requests fail with HTTP 500.
    int fail_first = 0;
    /// Requests whose body contains this string always fail with HTTP 500.
    std::string fail_when_contains;
    /// Artificial latency per request (index, body) -> milliseconds.
    std::function<int(std::size_t, const std::string&)> latency_ms;
    /// Stage-1 reasoning for a given image label; defaults to reasoning_for().
    std::function<std::string(const std::string&)> stage1_text;
};

/// Text the label-reading models produce for Stage 1; ends with the answer sentence.
std::string reasoning_for(const std::string& label);

/// Reply the scripted model gives, independent of HTTP plumbing.
/// `prior` is its earlier reasoning in the same context (empty if none).
std::string respond(const Options& opts, const std::optional<std::string>& image_label, const std::string& prior);

/// OpenAI-compatible mock server on 127.0.0.1.
class Server {
public:
    explicit Server(Options opts);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Binds (port 0 picks a free port), serves on a background thread, returns the port.
    int start(int port = 0);
    void stop();
    /// Blocks serving on the calling thread.
    void listen_blocking(const std::string& host, int port);

    std::string base_url() const;
    std::vector<RequestRecord> requests() const;
    int max_concurrent() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace swapprobe::mock
