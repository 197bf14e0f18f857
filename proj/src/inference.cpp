#include "swapprobe/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <random>
#include <thread>

#include "http.hpp"
#include "swapprobe/errors.hpp"
#include "swapprobe/image.hpp"
#include "swapprobe/util.hpp"

namespace swapprobe {

using json = nlohmann::json;

std::string_view to_string(EndpointMode m) {
    return m == EndpointMode::CompletionRaw ? "completion_raw" : "chat";
}

EndpointMode parse_endpoint_mode(std::string_view s) {
    if (s == "completion_raw") return EndpointMode::CompletionRaw;
    if (s == "chat") return EndpointMode::Chat;
    throw ConfigError("unknown endpoint mode '" + std::string(s) + "'");
}

std::string_view to_string(FinishReason f) {
    switch (f) {
        case FinishReason::Stop: return "stop";
        case FinishReason::Length: return "length";
        case FinishReason::Error: return "error";
    }
    return "error";
}

void EndpointConfig::validate() const {
    if (base_url.empty()) throw ConfigError("endpoint base_url is empty");
    if (!(timeout_s > 0)) throw ConfigError("endpoint timeout must be > 0");
    if (max_retries < 0) throw ConfigError("endpoint max_retries must be >= 0");
    if (backoff_base_s < 0 || backoff_factor < 1 || backoff_cap_s < 0)
        throw ConfigError("invalid backoff schedule");
    detail::parse_base_url(base_url);
}

EndpointConfig endpoint_from_json(const json& j) {
    EndpointConfig e;
    try {
        e.base_url = j.at("base_url").get<std::string>();
        e.model_name = j.value("model_name", std::string());
        e.mode = parse_endpoint_mode(j.value("mode", std::string("chat")));
        e.timeout_s = j.value("timeout_s", e.timeout_s);
        e.max_retries = j.value("max_retries", e.max_retries);
        if (j.contains("auth") && !j["auth"].is_null()) e.auth = j["auth"].get<std::string>();
        e.backoff_base_s = j.value("backoff_base_s", e.backoff_base_s);
        e.backoff_factor = j.value("backoff_factor", e.backoff_factor);
        e.backoff_cap_s = j.value("backoff_cap_s", e.backoff_cap_s);
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("endpoint config: ") + ex.what());
    }
    e.validate();
    return e;
}

json to_json(const EndpointConfig& e) {
    json j = {{"base_url", e.base_url},       {"model_name", e.model_name},
              {"mode", to_string(e.mode)},    {"timeout_s", e.timeout_s},
              {"max_retries", e.max_retries}, {"backoff_base_s", e.backoff_base_s},
              {"backoff_factor", e.backoff_factor}, {"backoff_cap_s", e.backoff_cap_s}};
    // Secret references are recorded, never resolved values.
    if (e.auth) j["auth"] = e.auth->rfind("env:", 0) == 0 ? *e.auth : std::string("<redacted>");
    return j;
}

InferenceParams params_from_json(const json& j) {
    InferenceParams p;
    try {
        p.temperature = j.value("temperature", p.temperature);
        p.max_new_tokens = j.value("max_new_tokens", p.max_new_tokens);
        if (j.contains("stop_sequences")) p.stop_sequences = j["stop_sequences"].get<std::vector<std::string>>();
        if (j.contains("seed") && !j["seed"].is_null()) p.seed = j["seed"].get<std::int64_t>();
    } catch (const json::exception& ex) {
        throw ConfigError(std::string("inference params: ") + ex.what());
    }
    if (p.temperature < 0) throw ConfigError("temperature must be >= 0");
    if (p.max_new_tokens <= 0) throw ConfigError("max_new_tokens must be > 0");
    return p;
}

json to_json(const InferenceParams& p) {
    json j = {{"temperature", p.temperature},
              {"max_new_tokens", p.max_new_tokens},
              {"stop_sequences", p.stop_sequences}};
    j["seed"] = p.seed ? json(*p.seed) : json(nullptr);
    return j;
}

double backoff_delay_s(const EndpointConfig& e, int retry, std::uint64_t key) {
    const double raw = e.backoff_base_s * std::pow(e.backoff_factor, std::max(0, retry - 1));
    const double capped = std::min(e.backoff_cap_s, raw);
    std::mt19937_64 rng(key ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(retry)));
    const double jitter = std::uniform_real_distribution<double>(0.5, 1.0)(rng);
    return capped * jitter;
}

std::string image_url_for(const std::string& ref) {
    if (ref.rfind("http://", 0) == 0 || ref.rfind("https://", 0) == 0 || ref.rfind("data:", 0) == 0)
        return ref;
    const Bytes bytes = read_file(ref);
    std::string mime = sniff_mime(bytes);
    if (mime.empty()) throw IoError("not a PNG/JPEG image: " + ref);
    return "data:" + mime + ";base64," + base64_encode(bytes);
}

InferenceClient::InferenceClient(EndpointConfig endpoint, TemplateConfig tmpl)
    : endpoint_(std::move(endpoint)), template_(std::move(tmpl)) {
    endpoint_.validate();
    template_.markers.validate();
}

void InferenceClient::set_audit_log(std::filesystem::path path) { audit_path_ = std::move(path); }

namespace {

json sampling_fields(const InferenceParams& params) {
    json j;
    j["temperature"] = params.temperature;
    j["max_tokens"] = params.max_new_tokens;
    if (!params.stop_sequences.empty()) j["stop"] = params.stop_sequences;
    if (params.seed) j["seed"] = *params.seed;
    return j;
}

std::string joined_text(const std::vector<Segment>& content, const ChatMarkers& markers) {
    RenderedSequence tmp;
    for (const auto& s : content)
        if (s.kind == SegmentKind::Text) tmp.segments.push_back(s);
    return flatten(tmp, markers);
}

std::optional<std::string> resolve_auth(const std::optional<std::string>& auth) {
    std::string ref = auth.value_or("env:SWAPPROBE_API_KEY");
    if (ref.rfind("env:", 0) == 0) {
        const char* v = std::getenv(ref.substr(4).c_str());
        if (!v) return std::nullopt;
        return std::string(v);
    }
    return ref;
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

std::string InferenceClient::request_path(const RenderedSequence& seq) const {
    if (endpoint_.mode == EndpointMode::Chat) {
        if (seq.continuation)
            throw ModeMismatch("probe-style continuation cannot be sent to chat endpoint " + endpoint_.base_url);
        return "/chat/completions";
    }
    return "/completions";
}

std::string InferenceClient::request_body(const RenderedSequence& seq, const InferenceParams& params) const {
    json body = sampling_fields(params);
    body["model"] = endpoint_.model_name;
    if (endpoint_.mode == EndpointMode::Chat) {
        const auto turns = to_chat_turns(seq, template_.markers);  // throws ModeMismatch
        json messages = json::array();
        for (const auto& turn : turns) {
            const bool has_image = std::any_of(turn.content.begin(), turn.content.end(),
                                               [](const Segment& s) { return s.kind == SegmentKind::Image; });
            if (!has_image) {
                messages.push_back({{"role", turn.role}, {"content", joined_text(turn.content, template_.markers)}});
                continue;
            }
            json parts = json::array();
            for (const auto& s : turn.content) {
                if (s.kind == SegmentKind::Image)
                    parts.push_back({{"type", "image_url"}, {"image_url", {{"url", image_url_for(s.payload)}}}});
                else
                    parts.push_back({{"type", "text"}, {"text", s.payload}});
            }
            messages.push_back({{"role", turn.role}, {"content", parts}});
        }
        body["messages"] = std::move(messages);
    } else {
        body["prompt"] = flatten(seq, template_.markers, /*generation_prompt=*/true);
        json images = json::array();
        for (const auto& s : seq.segments)
            if (s.kind == SegmentKind::Image) images.push_back(image_url_for(s.payload));
        body[template_.raw_image_field] = std::move(images);
    }
    return body.dump();
}

void InferenceClient::audit(const std::string& path, const std::string& body, int status,
                            const std::string& response) const {
    if (!audit_path_) return;
    json req;
    try {
        req = json::parse(body);
    } catch (...) {
        req = body;
    }
    // Inline images are replaced by their digest to keep the log readable.
    auto elide = [](json& node, auto&& self) -> void {
        if (node.is_string()) {
            const auto& s = node.get_ref<const std::string&>();
            if (s.rfind("data:", 0) == 0) node = "sha256:" + sha256_hex(std::string_view(s));
        } else if (node.is_structured()) {
            for (auto& child : node) self(child, self);
        }
    };
    elide(req, elide);
    json rec = {{"endpoint", endpoint_.base_url + path}, {"request", req}, {"status", status}};
    try {
        rec["response"] = json::parse(response);
    } catch (...) {
        rec["response"] = response;
    }
    std::lock_guard lock(*audit_mutex_);
    if (audit_path_->has_parent_path()) std::filesystem::create_directories(audit_path_->parent_path());
    std::ofstream out(*audit_path_, std::ios::app);
    out << rec.dump() << '\n';
}

Completion InferenceClient::post_with_retries(const std::string& path, const std::string& body) const {
    const auto target = detail::parse_base_url(endpoint_.base_url);
    const auto bearer = resolve_auth(endpoint_.auth);
    const std::uint64_t key = fnv1a(body);
    Completion c;
    c.started = std::chrono::steady_clock::now();
    std::string last_error;
    for (int attempt = 1; attempt <= endpoint_.max_retries + 1; ++attempt) {
        if (attempt > 1) {
            const double delay = backoff_delay_s(endpoint_, attempt - 1, key);
            std::this_thread::sleep_for(std::chrono::duration<double>(delay));
        }
        c.attempts = attempt;
        detail::HttpResponse res;
        try {
            res = detail::post_json(target, path, body, endpoint_.timeout_s, bearer);
        } catch (const TransportError& e) {
            last_error = e.what();
            continue;
        }
        audit(path, body, res.status, res.body);
        if (res.status == 429 || res.status >= 500) {
            last_error = "HTTP " + std::to_string(res.status) + ": " + res.body.substr(0, 200);
            continue;
        }
        if (res.status < 200 || res.status >= 300) throw ServerError(res.status, res.body.substr(0, 500));
        json j;
        try {
            j = json::parse(res.body);
            const auto& choice = j.at("choices").at(0);
            if (choice.contains("message")) {
                const auto& content = choice["message"].at("content");
                c.text = content.is_null() ? std::string() : content.get<std::string>();
            } else {
                c.text = choice.at("text").is_null() ? std::string() : choice["text"].get<std::string>();
            }
            const std::string reason = choice.value("finish_reason", std::string("stop"));
            c.finish_reason = reason == "length" ? FinishReason::Length : FinishReason::Stop;
            if (j.contains("usage") && j["usage"].is_object()) {
                c.prompt_tokens = j["usage"].value("prompt_tokens", 0);
                c.completion_tokens = j["usage"].value("completion_tokens", 0);
            }
        } catch (const json::exception& e) {
            last_error = std::string("malformed response: ") + e.what();
            continue;
        }
        c.finished = std::chrono::steady_clock::now();
        c.latency_ms = std::chrono::duration<double, std::milli>(c.finished - c.started).count();
        return c;
    }
    throw TransportError("gave up after " + std::to_string(endpoint_.max_retries + 1) +
                         " attempts: " + last_error);
}

Completion InferenceClient::generate(const RenderedSequence& seq, const InferenceParams& params) const {
    const std::string path = request_path(seq);
    return post_with_retries(path, request_body(seq, params));
}

Completion InferenceClient::chat_text(const std::vector<std::pair<std::string, std::string>>& messages,
                                      const InferenceParams& params) const {
    json body = sampling_fields(params);
    body["model"] = endpoint_.model_name;
    json msgs = json::array();
    for (const auto& [role, content] : messages) msgs.push_back({{"role", role}, {"content", content}});
    body["messages"] = std::move(msgs);
    return post_with_retries("/chat/completions", body.dump());
}

std::vector<BatchItem> InferenceClient::run_batch(const std::vector<RenderedSequence>& seqs,
                                                  const InferenceParams& params, int max_in_flight) const {
    if (max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
    std::vector<BatchItem> out(seqs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < seqs.size(); i = next++) {
            try {
                out[i].completion = generate(seqs[i], params);
            } catch (const ModeMismatch& e) {
                out[i].error_kind = "ModeMismatch";
                out[i].error = e.what();
            } catch (const ServerError& e) {
                out[i].error_kind = "ServerError";
                out[i].error = e.what();
            } catch (const TransportError& e) {
                out[i].error_kind = "TransportError";
                out[i].error = e.what();
            } catch (const std::exception& e) {
                out[i].error_kind = "Error";
                out[i].error = e.what();
            }
        }
    };
    const std::size_t n_workers = std::min<std::size_t>(static_cast<std::size_t>(max_in_flight), seqs.size());
    {
        std::vector<std::jthread> pool;
        pool.reserve(n_workers);
        for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    }
    return out;
}

}  // namespace swapprobe
