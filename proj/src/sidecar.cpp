#include "swapprobe/sidecar.hpp"

#include "http.hpp"
#include "swapprobe/errors.hpp"
#include "swapprobe/util.hpp"

namespace swapprobe {

using json = nlohmann::json;

void AttentionTrace::validate() const {
    if (image_token_span.second <= image_token_span.first) throw Error("attention trace: empty image token span");
    if (steps.size() != layers.size()) throw Error("attention trace: one step series per layer required");
    for (std::size_t i = 1; i < steps.size(); ++i)
        if (steps[i].size() != steps[0].size()) throw Error("attention trace: layers disagree on step count");
    for (const auto& series : steps)
        for (double v : series)
            if (!(v >= 0.0 && v <= 1.0)) throw Error("attention trace: score outside [0, 1]");
}

AttentionTrace trace_from_json(const json& j) {
    AttentionTrace t;
    try {
        t.layers = j.at("layers").get<std::vector<int>>();
        t.steps = j.at("steps").get<std::vector<std::vector<double>>>();
        const auto span = j.at("image_token_span").get<std::vector<int>>();
        if (span.size() != 2) throw Error("attention trace: image_token_span must be [start, end]");
        t.image_token_span = {span[0], span[1]};
        if (j.contains("intervention_step") && !j["intervention_step"].is_null())
            t.intervention_step = j["intervention_step"].get<int>();
        t.head_count = j.value("head_count", 0);
    } catch (const json::exception& e) {
        throw Error(std::string("attention trace: ") + e.what());
    }
    t.validate();
    return t;
}

json to_json(const AttentionTrace& t) {
    json j = {{"layers", t.layers},
              {"steps", t.steps},
              {"image_token_span", {t.image_token_span.first, t.image_token_span.second}},
              {"head_count", t.head_count}};
    j["intervention_step"] = t.intervention_step ? json(*t.intervention_step) : json(nullptr);
    return j;
}

SidecarClient::SidecarClient(std::string base_url, double timeout_s)
    : base_url_(std::move(base_url)), timeout_s_(timeout_s) {
    detail::parse_base_url(base_url_);
}

bool SidecarClient::healthy() const {
    try {
        return detail::get(detail::parse_base_url(base_url_), "/healthz", std::min(timeout_s_, 5.0)).status == 200;
    } catch (const TransportError&) {
        return false;
    }
}

namespace {

std::string image_b64(const std::string& ref) { return base64_encode(read_file(ref)); }

json post(const std::string& base_url, const std::string& path, const json& body, double timeout_s) {
    detail::HttpResponse res;
    try {
        res = detail::post_json(detail::parse_base_url(base_url), path, body.dump(), timeout_s);
    } catch (const TransportError& e) {
        throw SidecarUnavailable(e.what());
    }
    if (res.status == 503) throw SidecarUnavailable("sidecar backbone unavailable: " + res.body);
    if (res.status != 200) throw ServerError(res.status, res.body.substr(0, 500));
    try {
        return json::parse(res.body);
    } catch (const json::exception& e) {
        throw Error(std::string("sidecar response: ") + e.what());
    }
}

}  // namespace

double SidecarClient::similarity(EmbeddingMetric metric, const std::string& image_a,
                                 const std::string& image_b) const {
    const std::string path = metric == EmbeddingMetric::Clip ? "/similarity/clip" : "/similarity/lpips";
    const json out = post(base_url_, path, {{"image_a", image_b64(image_a)}, {"image_b", image_b64(image_b)}},
                          timeout_s_);
    if (!out.contains("value") || !out["value"].is_number()) throw Error("sidecar similarity: missing value");
    return out["value"].get<double>();
}

std::string SidecarClient::generate_body(const RenderedSequence& seq, const TemplateConfig& tmpl,
                                         const InferenceParams& params, const std::optional<TraceRequest>& trace,
                                         const std::optional<AmplificationConfig>& amplification) const {
    json body = {{"prompt", flatten(seq, tmpl.markers, /*generation_prompt=*/true)},
                 {"image", image_b64(seq.image())},
                 {"image_placeholder", tmpl.markers.image_placeholder},
                 {"continuation", seq.continuation},
                 {"temperature", params.temperature},
                 {"max_new_tokens", params.max_new_tokens}};
    if (params.seed) body["seed"] = *params.seed;
    if (trace) body["trace"] = {{"layers", trace->layers}};
    if (amplification)
        body["amplification"] = {{"factor", amplification->factor}, {"renormalize", amplification->renormalize}};
    return body.dump();
}

SidecarGeneration SidecarClient::generate(const RenderedSequence& seq, const TemplateConfig& tmpl,
                                          const InferenceParams& params, const std::optional<TraceRequest>& trace,
                                          const std::optional<AmplificationConfig>& amplification) const {
    const json out = post(base_url_, "/generate",
                          json::parse(generate_body(seq, tmpl, params, trace, amplification)), timeout_s_);
    SidecarGeneration g;
    g.text = out.value("text", std::string());
    if (out.contains("trace") && !out["trace"].is_null()) g.trace = trace_from_json(out["trace"]);
    return g;
}

}  // namespace swapprobe
