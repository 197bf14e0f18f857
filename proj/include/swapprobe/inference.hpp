#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swapprobe/templates.hpp"

namespace swapprobe {

enum class EndpointMode { CompletionRaw, Chat };

std::string_view to_string(EndpointMode m);
EndpointMode parse_endpoint_mode(std::string_view s);

struct EndpointConfig {
    std::string base_url;  // e.g. http://127.0.0.1:8000/v1
    std::string model_name;
    EndpointMode mode = EndpointMode::Chat;
    double timeout_s = 600.0;
    int max_retries = 3;
    /// "env:NAME" reads the key from the environment; anything else is used verbatim.
    std::optional<std::string> auth;

    // Retry schedule: min(cap, base * factor^k), jittered deterministically.
    double backoff_base_s = 1.0;
    double backoff_factor = 2.0;
    double backoff_cap_s = 30.0;

    void validate() const;
};

EndpointConfig endpoint_from_json(const nlohmann::json& j);
nlohmann::json to_json(const EndpointConfig& e);

struct InferenceParams {
    double temperature = 0.1;
    int max_new_tokens = 8192;
    std::vector<std::string> stop_sequences;
    std::optional<std::int64_t> seed;
};

InferenceParams params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const InferenceParams& p);

enum class FinishReason { Stop, Length, Error };
std::string_view to_string(FinishReason f);

struct Completion {
    std::string text;
    FinishReason finish_reason = FinishReason::Stop;
    int prompt_tokens = 0;
    int completion_tokens = 0;
    double latency_ms = 0.0;
    int attempts = 1;  // retries = attempts - 1
    std::chrono::steady_clock::time_point started;
    std::chrono::steady_clock::time_point finished;

    int retries() const { return attempts - 1; }
};

/// One position of a batch; exactly one of completion / error is set.
struct BatchItem {
    std::optional<Completion> completion;
    std::string error_kind;  // "TransportError", "ModeMismatch", "ServerError", ...
    std::string error;

    bool ok() const { return completion.has_value(); }
};

/// Backoff delay before retry number `retry` (1-based), deterministic in (key, retry).
double backoff_delay_s(const EndpointConfig& e, int retry, std::uint64_t key);

/// Stateless client for OpenAI-compatible /completions and /chat/completions.
/// Every call re-sends the complete sequence; nothing is cached between calls.
class InferenceClient {
public:
    InferenceClient(EndpointConfig endpoint, TemplateConfig tmpl);

    const EndpointConfig& endpoint() const { return endpoint_; }
    const TemplateConfig& template_config() const { return template_; }

    /// Appends request/response pairs to a line-delimited audit file.
    void set_audit_log(std::filesystem::path path);

    /// Exact JSON body sent for (seq, params). Throws ModeMismatch for a
    /// continuation sequence on a chat endpoint.
    std::string request_body(const RenderedSequence& seq, const InferenceParams& params) const;
    std::string request_path(const RenderedSequence& seq) const;

    Completion generate(const RenderedSequence& seq, const InferenceParams& params) const;

    /// Order-preserving fan-out with at most max_in_flight outstanding requests.
    /// Failures are captured in position; the batch never aborts.
    std::vector<BatchItem> run_batch(const std::vector<RenderedSequence>& seqs,
                                     const InferenceParams& params, int max_in_flight) const;

    /// Plain chat call with text-only messages (judge prompts).
    Completion chat_text(const std::vector<std::pair<std::string, std::string>>& messages,
                         const InferenceParams& params) const;

private:
    Completion post_with_retries(const std::string& path, const std::string& body) const;
    void audit(const std::string& path, const std::string& body, int status,
               const std::string& response) const;

    EndpointConfig endpoint_;
    TemplateConfig template_;
    std::optional<std::filesystem::path> audit_path_;
    std::shared_ptr<std::mutex> audit_mutex_ = std::make_shared<std::mutex>();
};

/// "data:<mime>;base64,..." for a local file; http(s) URLs are passed through.
std::string image_url_for(const std::string& ref);

}  // namespace swapprobe
