#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "swapprobe/inference.hpp"
#include "swapprobe/templates.hpp"

namespace swapprobe {

/// Per-layer visual attention scores for one generation. steps[i][t] is the
/// head-averaged attention mass on image tokens at decoding step t of layers[i].
struct AttentionTrace {
    std::vector<int> layers;
    std::vector<std::vector<double>> steps;
    std::pair<int, int> image_token_span{0, 0};  // [start, end)
    std::optional<int> intervention_step;
    int head_count = 0;

    /// Throws Error on: empty image span, ragged layers, values outside [0, 1].
    void validate() const;
};

AttentionTrace trace_from_json(const nlohmann::json& j);
nlohmann::json to_json(const AttentionTrace& t);

struct AmplificationConfig {
    double factor = 2.0;
    bool renormalize = false;
};

struct TraceRequest {
    std::vector<int> layers;
};

struct SidecarGeneration {
    std::string text;
    std::optional<AttentionTrace> trace;
};

enum class EmbeddingMetric { Clip, Lpips };

/// Client for the local attention / similarity service.
///
/// Wire format (JSON over HTTP):
///   POST /generate          {prompt, image, image_placeholder, continuation,
///                            temperature, max_new_tokens, seed?,
///                            trace?: {layers}, amplification?: {factor, renormalize}}
///                        -> {text, trace?: {layers, steps, image_token_span,
///                                           intervention_step, head_count}}
///   POST /similarity/clip   {image_a, image_b} -> {value}
///   POST /similarity/lpips  {image_a, image_b} -> {value}
///   GET  /healthz           -> {status: "ok"}
/// Images travel as base64 PNG/JPEG bytes.
class SidecarClient {
public:
    explicit SidecarClient(std::string base_url, double timeout_s = 600.0);

    const std::string& base_url() const { return base_url_; }

    bool healthy() const;

    /// Throws SidecarUnavailable when the service cannot be reached.
    double similarity(EmbeddingMetric metric, const std::string& image_a, const std::string& image_b) const;

    std::string generate_body(const RenderedSequence& seq, const TemplateConfig& tmpl,
                              const InferenceParams& params, const std::optional<TraceRequest>& trace,
                              const std::optional<AmplificationConfig>& amplification) const;

    SidecarGeneration generate(const RenderedSequence& seq, const TemplateConfig& tmpl,
                               const InferenceParams& params, const std::optional<TraceRequest>& trace,
                               const std::optional<AmplificationConfig>& amplification) const;

private:
    std::string base_url_;
    double timeout_s_;
};

}  // namespace swapprobe
