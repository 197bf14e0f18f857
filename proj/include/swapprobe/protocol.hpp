#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swapprobe/bench.hpp"
#include "swapprobe/inference.hpp"
#include "swapprobe/sidecar.hpp"
#include "swapprobe/templates.hpp"

namespace swapprobe {

enum class Setting {
    StandardOnA,
    StandardOnB,
    Probe,
    MultiTurn,
    NaturalProbe,
    DistinctProbe,
    DistinctMultiTurn,
    HighPplMeaningful,
    HighPplMeaningless,
    SystemTokenOnly,
    ProbeTraced,     // probe rendered through the sidecar with attention traces
    ProbeAmplified,  // probe rendered through the sidecar with image-attention scaling
};

std::string_view to_string(Setting s);
/// Accepts the names above plus the decomposition aliases "natural" (probe),
/// "multi_turn_natural" (multi_turn) and "distinct_control" (both distinct flows).
std::vector<Setting> parse_settings(std::string_view s);
Setting parse_setting(std::string_view s);

/// Stage-2 settings that continue inside an open assistant turn.
bool is_probe_family(Setting s);
bool is_two_stage(Setting s);
/// Settings whose scored output is compared against answer_b.
bool scored_against_b(Setting s);

enum class DecompositionCondition {
    Natural,
    HighPplMeaningful,
    HighPplMeaningless,
    SystemTokenOnly,
    MultiTurnNatural,
};

Setting setting_for(DecompositionCondition c);

struct SidecarPlan {
    std::string url;
    std::vector<int> trace_layers;  // non-empty adds probe_traced transcripts
    std::optional<AmplificationConfig> amplification;
};

struct RunPlan {
    std::vector<Setting> settings;
    std::vector<double> retention_fractions{1.0};
    std::vector<int> prompt_variant_ids{0};
    int repeats = 1;
    std::vector<std::string> unrelated_pool;
    std::optional<SidecarPlan> sidecar;

    /// Throws ConfigError / ModeMismatch / PoolExhausted for a plan that cannot run
    /// against `mode`. Called before any request is sent.
    void validate(EndpointMode mode, std::size_t prompt_variants) const;
};

RunPlan plan_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json to_json(const RunPlan& p);

struct Transcript {
    std::string instance_id;
    Setting setting = Setting::StandardOnA;
    int repeat = 0;
    /// Stage-1 output on image_a (absent for standard_on_b).
    std::optional<std::string> r_a;
    /// Output being scored for every setting except standard_on_a: the answer on
    /// image_b for standard_on_b, the Stage-2 continuation otherwise.
    std::optional<std::string> r_b;
    /// Reasoning actually placed in the Stage-2 context after truncation or splitting.
    std::optional<std::string> context;
    /// Text injected after the retained reasoning (P, its variant, the natural trigger, ...).
    std::optional<std::string> injected;
    std::optional<std::size_t> swap_point;
    std::optional<double> retention;
    std::optional<int> prompt_variant_id;
    bool natural_fallback = false;
    std::string image;  // image reference shown in the final rendered sequence
    nlohmann::json params;
    double stage1_latency_ms = 0.0;
    double stage2_latency_ms = 0.0;
    int attempts = 0;
    bool failed = false;
    std::string error_kind;
    std::string error;
    std::optional<AttentionTrace> trace;

    /// Unique within a run: instance, setting, retention, variant, repeat.
    std::string key() const;
    /// Text the judge scores: r_a for standard_on_a, r_b otherwise.
    const std::string& scored_text() const;
};

nlohmann::json to_json(const Transcript& t);
Transcript transcript_from_json(const nlohmann::json& j);
void save_transcripts(const std::vector<Transcript>& ts, const std::filesystem::path& path);
std::vector<Transcript> load_transcripts(const std::filesystem::path& path);

/// Stage-1 outputs keyed by (endpoint, model, template, instance, params, repeat),
/// one file per key, so sweeps over retention and variants never regenerate R_a.
class Stage1Cache {
public:
    explicit Stage1Cache(std::filesystem::path dir) : dir_(std::move(dir)) {}

    static std::string key(const EndpointConfig& e, const TemplateConfig& t, const ProbeInstance& inst,
                           const InferenceParams& p, int repeat);
    std::optional<std::string> get(const std::string& key) const;
    void put(const std::string& key, const std::string& text) const;

private:
    std::filesystem::path dir_;
};

/// One Stage-2 (or standard) request together with the transcript it fills.
struct Job {
    Transcript transcript;
    RenderedSequence sequence;
    bool via_sidecar = false;
};

class Engine {
public:
    Engine(const Manifest& manifest, TemplateConfig tmpl, PromptLibrary prompts, InferenceClient client,
           InferenceParams params, RunPlan plan);

    void set_stage1_cache(std::optional<Stage1Cache> cache) { cache_ = std::move(cache); }
    void set_sidecar(std::optional<SidecarClient> sidecar) { sidecar_ = std::move(sidecar); }
    void set_max_in_flight(int n) { max_in_flight_ = n; }

    const RunPlan& plan() const { return plan_; }

    Transcript run_standard(const ProbeInstance& inst, bool on_b, int repeat = 0) const;
    Transcript run_probe(const ProbeInstance& inst, const Transcript& stage1, double retention,
                         int variant_id) const;
    Transcript run_multi_turn(const ProbeInstance& inst, const Transcript& stage1) const;
    Transcript run_natural_probe(const ProbeInstance& inst, const Transcript& stage1) const;
    /// Probe and multi-turn flows with the unrelated image in place of image_b.
    std::pair<Transcript, Transcript> run_distinct_control(const ProbeInstance& inst, const Transcript& stage1,
                                                           const std::string& unrelated_image) const;
    Transcript run_decomposition(const ProbeInstance& inst, const Transcript& stage1,
                                 DecompositionCondition condition) const;

    // Building blocks shared by the single-instance calls and run().
    Job prepare_standard(const ProbeInstance& inst, bool on_b, int repeat) const;
    Job prepare_probe(const ProbeInstance& inst, const Transcript& stage1, double retention, int variant_id,
                      Setting setting = Setting::Probe) const;
    Job prepare_multi_turn(const ProbeInstance& inst, const Transcript& stage1,
                           Setting setting = Setting::MultiTurn) const;
    Job prepare_natural_probe(const ProbeInstance& inst, const Transcript& stage1) const;
    std::pair<Job, Job> prepare_distinct_control(const ProbeInstance& inst, const Transcript& stage1,
                                                 const std::string& unrelated_image) const;
    Job prepare_decomposition(const ProbeInstance& inst, const Transcript& stage1,
                              DecompositionCondition condition) const;
    Job prepare_sidecar_probe(const ProbeInstance& inst, const Transcript& stage1, Setting setting) const;

    /// Sends one job and returns its filled transcript; failures are recorded, not thrown.
    Transcript execute(Job job) const;
    std::vector<Transcript> execute_all(std::vector<Job> jobs) const;

    /// Full plan: Stage 1 for every instance and repeat, then every Stage-2 setting.
    /// Transcripts come back grouped by instance, in manifest order.
    std::vector<Transcript> run(const std::function<void(const std::string&)>& progress = {}) const;

private:
    InferenceParams params_for(int repeat) const;
    Transcript base_transcript(const ProbeInstance& inst, Setting setting, const Transcript* stage1) const;
    const std::string& unrelated_for(std::size_t index) const;

    const Manifest& manifest_;
    TemplateConfig template_;
    PromptLibrary prompts_;
    InferenceClient client_;
    InferenceParams params_;
    RunPlan plan_;
    std::optional<Stage1Cache> cache_;
    std::optional<SidecarClient> sidecar_;
    int max_in_flight_ = 8;
};

/// Everything `swapprobe run` reads from its config file.
struct RunConfig {
    std::string run_id;
    std::filesystem::path runs_dir = "runs";
    std::filesystem::path manifest;
    std::filesystem::path template_path;
    std::optional<std::filesystem::path> prompts_path;
    EndpointConfig endpoint;
    InferenceParams params;
    RunPlan plan;
    int max_in_flight = 8;
    std::optional<std::filesystem::path> stage1_cache;
    nlohmann::json judge = nlohmann::json::object();
    nlohmann::json raw;  // the file as read
    std::filesystem::path base_dir;  // relative paths in `raw` resolve against this
};

/// Relative paths are resolved against the config file's directory.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace swapprobe
