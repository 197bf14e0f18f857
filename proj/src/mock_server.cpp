#include "swapprobe/mock_server.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <regex>
#include <thread>

#include <nlohmann/json.hpp>

#include "swapprobe/errors.hpp"
#include "swapprobe/image.hpp"
#include "swapprobe/synthetic.hpp"
#include "swapprobe/util.hpp"

// After Eigen: <resolv.h> defines a `_res` macro.
#include <httplib.h>

namespace swapprobe::mock {

using json = nlohmann::json;

Behavior parse_behavior(std::string_view s) {
    if (s == "label_pixel") return Behavior::LabelPixel;
    if (s == "anchored") return Behavior::Anchored;
    if (s == "echo") return Behavior::Echo;
    throw ConfigError("unknown mock behavior '" + std::string(s) + "'");
}

std::string reasoning_for(const std::string& label) {
    return "Let me look at the figure carefully. I locate the marked element and read its value. "
           "The answer is " + label + ".";
}

namespace {

std::optional<std::string> last_answer(const std::string& text) {
    static const std::regex re(R"(answer is (.+?)\.(?:\s|$))");
    std::optional<std::string> found;
    for (auto it = std::sregex_iterator(text.begin(), text.end(), re); it != std::sregex_iterator(); ++it)
        found = (*it)[1].str();
    return found;
}

std::optional<std::string> label_from_url(const std::string& url) {
    const auto comma = url.find(',');
    if (url.rfind("data:", 0) != 0 || comma == std::string::npos) return std::nullopt;
    try {
        return synthetic::read_label(decode_image(base64_decode(std::string_view(url).substr(comma + 1))));
    } catch (const Error&) {
        return std::nullopt;
    }
}

std::string strip_markers(std::string text, const ChatMarkers& m) {
    for (const std::string* mk : {&m.user_start, &m.user_end, &m.response_start, &m.response_end}) {
        for (auto pos = text.find(*mk); pos != std::string::npos; pos = text.find(*mk, pos))
            text.replace(pos, mk->size(), " ");
    }
    return text;
}

}  // namespace

std::string respond(const Options& opts, const std::optional<std::string>& image_label, const std::string& prior) {
    if (opts.behavior == Behavior::Echo) return opts.sentinel;
    const auto prior_answer = last_answer(prior);
    if (opts.behavior == Behavior::Anchored && prior_answer)
        return "Yes, this agrees with what I found before. The answer is " + *prior_answer + ".";
    if (!image_label) {
        if (prior_answer)
            return "The image has changed: it no longer shows the figure I described, so my earlier answer "
                   "does not apply.";
        return "I cannot find the element the question refers to in this image.";
    }
    if (prior.empty()) return opts.stage1_text ? opts.stage1_text(*image_label) : reasoning_for(*image_label);
    std::string out;
    if (prior_answer && *prior_answer != *image_label)
        out = "Looking again, the image has changed and the marked value is different. ";
    return out + "Reading the figure once more, the answer is " + *image_label + ".";
}

struct Server::Impl {
    Options opts;
    httplib::Server http;
    std::thread thread;
    int port = 0;
    mutable std::mutex mu;
    std::vector<RequestRecord> log;
    std::atomic<std::size_t> counter{0};
    std::atomic<int> in_flight{0};
    std::atomic<int> peak{0};

    explicit Impl(Options o) : opts(std::move(o)) { install(); }

    void handle(const httplib::Request& req, httplib::Response& res, bool chat) {
        const int now = ++in_flight;
        for (int prev = peak.load(); now > prev && !peak.compare_exchange_weak(prev, now);) {
        }
        RequestRecord rec;
        rec.index = counter++;
        rec.path = req.path;
        rec.body = req.body;
        rec.started = std::chrono::steady_clock::now();
        if (opts.latency_ms) {
            const int ms = opts.latency_ms(rec.index, req.body);
            if (ms > 0) std::this_thread::sleep_for(std::chrono::milliseconds(ms));
        }
        rec.status = serve(req, res, chat, rec.index);
        rec.finished = std::chrono::steady_clock::now();
        --in_flight;
        std::lock_guard lock(mu);
        log.push_back(std::move(rec));
    }

    int serve(const httplib::Request& req, httplib::Response& res, bool chat, std::size_t index) {
        auto fail = [&](int status, const std::string& msg) {
            res.status = status;
            res.set_content(json{{"error", {{"message", msg}}}}.dump(), "application/json");
            return status;
        };
        if (!chat && opts.chat_only) return fail(404, "completions interface not available");
        if (static_cast<int>(index) < opts.fail_first) return fail(500, "scheduled failure");
        if (!opts.fail_when_contains.empty() && req.body.find(opts.fail_when_contains) != std::string::npos)
            return fail(500, "permanent failure");
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception& e) {
            return fail(400, e.what());
        }
        std::optional<std::string> label;
        std::string prior;
        if (chat) {
            if (!body.contains("messages")) return fail(400, "messages missing");
            for (const auto& msg : body["messages"]) {
                const std::string role = msg.value("role", "");
                const auto& content = msg["content"];
                if (content.is_array()) {
                    for (const auto& part : content)
                        if (part.value("type", "") == "image_url")
                            label = label_from_url(part["image_url"].value("url", ""));
                } else if (role == "assistant" && content.is_string()) {
                    prior += content.get<std::string>() + " ";
                }
            }
        } else {
            if (!body.contains("prompt")) return fail(400, "prompt missing");
            const std::string prompt = body["prompt"].get<std::string>();
            const auto& m = opts.tmpl.markers;
            if (const auto pos = prompt.find(m.response_start); pos != std::string::npos)
                prior = trim(strip_markers(prompt.substr(pos + m.response_start.size()), m));
            const auto field = opts.tmpl.raw_image_field;
            if (body.contains(field) && body[field].is_array() && !body[field].empty())
                label = label_from_url(body[field][0].get<std::string>());
        }
        const std::string text = respond(opts, label, trim(prior));
        json out;
        const json usage = {{"prompt_tokens", static_cast<int>(req.body.size() / 4)},
                            {"completion_tokens", static_cast<int>(split_words(text).size())}};
        if (chat)
            out = {{"object", "chat.completion"},
                   {"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", text}}},
                                 {"finish_reason", "stop"}}}},
                   {"usage", usage}};
        else
            out = {{"object", "text_completion"},
                   {"choices", {{{"index", 0}, {"text", text}, {"finish_reason", "stop"}}}},
                   {"usage", usage}};
        res.set_content(out.dump(), "application/json");
        return 200;
    }

    void install() {
        for (const char* prefix : {"", "/v1"}) {
            http.Post(std::string(prefix) + "/chat/completions",
                      [this](const httplib::Request& q, httplib::Response& r) { handle(q, r, true); });
            http.Post(std::string(prefix) + "/completions",
                      [this](const httplib::Request& q, httplib::Response& r) { handle(q, r, false); });
        }
        http.Get("/healthz", [](const httplib::Request&, httplib::Response& r) {
            r.set_content(R"({"status":"ok"})", "application/json");
        });
    }
};

Server::Server(Options opts) : impl_(std::make_unique<Impl>(std::move(opts))) {}

Server::~Server() { stop(); }

int Server::start(int port) {
    if (port == 0)
        impl_->port = impl_->http.bind_to_any_port("127.0.0.1");
    else if (impl_->http.bind_to_port("127.0.0.1", port))
        impl_->port = port;
    else
        impl_->port = -1;
    if (impl_->port <= 0) throw TransportError("mock server could not bind");
    impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
    impl_->http.wait_until_ready();
    return impl_->port;
}

void Server::listen_blocking(const std::string& host, int port) {
    impl_->port = port;
    if (!impl_->http.listen(host, port)) throw TransportError("mock server could not listen on port " + std::to_string(port));
}

void Server::stop() {
    if (!impl_) return;
    impl_->http.stop();
    if (impl_->thread.joinable()) impl_->thread.join();
}

std::string Server::base_url() const { return "http://127.0.0.1:" + std::to_string(impl_->port) + "/v1"; }

std::vector<RequestRecord> Server::requests() const {
    std::lock_guard lock(impl_->mu);
    auto out = impl_->log;
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.index < b.index; });
    return out;
}

int Server::max_concurrent() const { return impl_->peak.load(); }

}  // namespace swapprobe::mock
