#include "swapprobe/protocol.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "swapprobe/errors.hpp"
#include "swapprobe/util.hpp"

namespace swapprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct SettingName {
    Setting setting;
    const char* name;
};

constexpr SettingName kSettingNames[] = {
    {Setting::StandardOnA, "standard_on_a"},
    {Setting::StandardOnB, "standard_on_b"},
    {Setting::Probe, "probe"},
    {Setting::MultiTurn, "multi_turn"},
    {Setting::NaturalProbe, "natural_probe"},
    {Setting::DistinctProbe, "distinct_probe"},
    {Setting::DistinctMultiTurn, "distinct_multi_turn"},
    {Setting::HighPplMeaningful, "high_ppl_meaningful"},
    {Setting::HighPplMeaningless, "high_ppl_meaningless"},
    {Setting::SystemTokenOnly, "system_token_only"},
    {Setting::ProbeTraced, "probe_traced"},
    {Setting::ProbeAmplified, "probe_amplified"},
};

bool contains(const std::vector<Setting>& v, Setting s) { return std::find(v.begin(), v.end(), s) != v.end(); }

}  // namespace

std::string_view to_string(Setting s) {
    for (const auto& n : kSettingNames)
        if (n.setting == s) return n.name;
    return "unknown";
}

std::vector<Setting> parse_settings(std::string_view s) {
    if (s == "natural") return {Setting::Probe};
    if (s == "multi_turn_natural") return {Setting::MultiTurn};
    if (s == "distinct_control") return {Setting::DistinctProbe, Setting::DistinctMultiTurn};
    for (const auto& n : kSettingNames)
        if (s == n.name) return {n.setting};
    throw ConfigError("unknown setting '" + std::string(s) + "'");
}

Setting parse_setting(std::string_view s) {
    for (const auto& n : kSettingNames)
        if (s == n.name) return n.setting;
    throw ConfigError("unknown setting '" + std::string(s) + "'");
}

bool is_probe_family(Setting s) {
    switch (s) {
        case Setting::Probe:
        case Setting::NaturalProbe:
        case Setting::DistinctProbe:
        case Setting::HighPplMeaningful:
        case Setting::HighPplMeaningless:
        case Setting::SystemTokenOnly:
        case Setting::ProbeTraced:
        case Setting::ProbeAmplified:
            return true;
        default:
            return false;
    }
}

bool is_two_stage(Setting s) { return s != Setting::StandardOnA && s != Setting::StandardOnB; }

bool scored_against_b(Setting s) {
    return s != Setting::StandardOnA && s != Setting::DistinctProbe && s != Setting::DistinctMultiTurn;
}

Setting setting_for(DecompositionCondition c) {
    switch (c) {
        case DecompositionCondition::Natural: return Setting::Probe;
        case DecompositionCondition::HighPplMeaningful: return Setting::HighPplMeaningful;
        case DecompositionCondition::HighPplMeaningless: return Setting::HighPplMeaningless;
        case DecompositionCondition::SystemTokenOnly: return Setting::SystemTokenOnly;
        case DecompositionCondition::MultiTurnNatural: return Setting::MultiTurn;
    }
    return Setting::Probe;
}

// -- plan -------------------------------------------------------------------

void RunPlan::validate(EndpointMode mode, std::size_t prompt_variants) const {
    if (settings.empty()) throw ConfigError("plan has no settings");
    if (repeats < 1) throw ConfigError("repeats must be >= 1");
    if (retention_fractions.empty()) throw ConfigError("plan needs at least one retention fraction");
    for (double f : retention_fractions)
        if (!(f >= 0.0 && f <= 1.0)) throw ConfigError("retention fraction outside [0, 1]");
    if (prompt_variant_ids.empty()) throw ConfigError("plan needs at least one prompt variant id");
    for (int v : prompt_variant_ids)
        if (v < 0 || static_cast<std::size_t>(v) > prompt_variants)
            throw ConfigError("prompt variant id " + std::to_string(v) + " out of range");
    for (Setting s : settings) {
        const bool through_sidecar = s == Setting::ProbeTraced || s == Setting::ProbeAmplified;
        if (mode == EndpointMode::Chat && is_probe_family(s) && !through_sidecar)
            throw ModeMismatch("setting '" + std::string(to_string(s)) +
                               "' continues an open assistant turn and needs a completion_raw endpoint");
    }
    if (contains(settings, Setting::ProbeTraced) && (!sidecar || sidecar->trace_layers.empty()))
        throw ConfigError("probe_traced needs a sidecar with trace_layers");
    if (contains(settings, Setting::ProbeAmplified) && (!sidecar || !sidecar->amplification))
        throw ConfigError("probe_amplified needs a sidecar with an amplification config");
    if (sidecar && sidecar->amplification && !(sidecar->amplification->factor >= 0))
        throw ConfigError("amplification factor must be >= 0");
    if ((contains(settings, Setting::DistinctProbe) || contains(settings, Setting::DistinctMultiTurn)) &&
        unrelated_pool.empty())
        throw PoolExhausted("distinct-image control needs a non-empty unrelated image pool");
}

RunPlan plan_from_json(const json& j, const fs::path& base_dir) {
    RunPlan p;
    try {
        for (const auto& s : j.at("settings"))
            for (Setting x : parse_settings(s.get<std::string>()))
                if (!contains(p.settings, x)) p.settings.push_back(x);
        if (j.contains("retention_fractions"))
            p.retention_fractions = j["retention_fractions"].get<std::vector<double>>();
        if (j.contains("prompt_variant_ids")) {
            const auto& v = j["prompt_variant_ids"];
            if (v.is_string() && v.get<std::string>() == "all") {
                p.prompt_variant_ids.clear();
                for (int i = 1; i <= 10; ++i) p.prompt_variant_ids.push_back(i);
            } else {
                p.prompt_variant_ids = v.get<std::vector<int>>();
            }
        }
        p.repeats = j.value("repeats", 1);
        if (j.contains("unrelated_pool")) {
            const auto& pool = j["unrelated_pool"];
            if (pool.is_string()) {
                fs::path dir = pool.get<std::string>();
                if (dir.is_relative()) dir = base_dir / dir;
                if (!fs::is_directory(dir)) throw ConfigError("unrelated_pool is not a directory: " + dir.string());
                for (const auto& entry : fs::directory_iterator(dir)) {
                    const auto ext = to_lower(entry.path().extension().string());
                    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") p.unrelated_pool.push_back(entry.path().string());
                }
                std::sort(p.unrelated_pool.begin(), p.unrelated_pool.end());
            } else {
                for (const auto& item : pool) {
                    fs::path f = item.get<std::string>();
                    p.unrelated_pool.push_back((f.is_relative() ? base_dir / f : f).string());
                }
            }
        }
        if (j.contains("sidecar") && !j["sidecar"].is_null()) {
            const auto& s = j["sidecar"];
            SidecarPlan sp;
            sp.url = s.at("url").get<std::string>();
            sp.trace_layers = s.value("trace_layers", std::vector<int>{});
            if (s.contains("amplification") && !s["amplification"].is_null()) {
                AmplificationConfig a;
                a.factor = s["amplification"].value("factor", a.factor);
                a.renormalize = s["amplification"].value("renormalize", a.renormalize);
                sp.amplification = a;
            }
            if (!sp.trace_layers.empty() && !contains(p.settings, Setting::ProbeTraced))
                p.settings.push_back(Setting::ProbeTraced);
            if (sp.amplification && !contains(p.settings, Setting::ProbeAmplified))
                p.settings.push_back(Setting::ProbeAmplified);
            p.sidecar = sp;
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("plan: ") + e.what());
    }
    return p;
}

json to_json(const RunPlan& p) {
    json settings = json::array();
    for (Setting s : p.settings) settings.push_back(to_string(s));
    json j = {{"settings", settings},
              {"retention_fractions", p.retention_fractions},
              {"prompt_variant_ids", p.prompt_variant_ids},
              {"repeats", p.repeats},
              {"unrelated_pool", p.unrelated_pool}};
    if (p.sidecar) {
        json s = {{"url", p.sidecar->url}, {"trace_layers", p.sidecar->trace_layers}};
        if (p.sidecar->amplification)
            s["amplification"] = {{"factor", p.sidecar->amplification->factor},
                                  {"renormalize", p.sidecar->amplification->renormalize}};
        j["sidecar"] = s;
    }
    return j;
}

// -- transcripts ------------------------------------------------------------

std::string Transcript::key() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "|r=%.4g|v=%d|n=%d", retention.value_or(-1.0), prompt_variant_id.value_or(-1),
                  repeat);
    return instance_id + "|" + std::string(to_string(setting)) + buf;
}

const std::string& Transcript::scored_text() const {
    static const std::string empty;
    const auto& out = setting == Setting::StandardOnA ? r_a : r_b;
    return out ? *out : empty;
}

json to_json(const Transcript& t) {
    json j = {{"instance_id", t.instance_id},
              {"setting", to_string(t.setting)},
              {"repeat", t.repeat},
              {"image", t.image},
              {"params", t.params},
              {"stage1_latency_ms", t.stage1_latency_ms},
              {"stage2_latency_ms", t.stage2_latency_ms},
              {"attempts", t.attempts},
              {"failed", t.failed}};
    auto put = [&](const char* k, const auto& v) {
        if (v) j[k] = *v;
    };
    put("r_a", t.r_a);
    put("r_b", t.r_b);
    put("context", t.context);
    put("injected", t.injected);
    put("swap_point", t.swap_point);
    put("retention", t.retention);
    put("prompt_variant_id", t.prompt_variant_id);
    if (t.setting == Setting::NaturalProbe) j["natural_fallback"] = t.natural_fallback;
    if (t.failed) {
        j["error_kind"] = t.error_kind;
        j["error"] = t.error;
    }
    if (t.trace) j["trace"] = to_json(*t.trace);
    return j;
}

Transcript transcript_from_json(const json& j) {
    Transcript t;
    t.instance_id = j.at("instance_id").get<std::string>();
    t.setting = parse_setting(j.at("setting").get<std::string>());
    t.repeat = j.value("repeat", 0);
    t.image = j.value("image", std::string());
    t.params = j.value("params", json::object());
    t.stage1_latency_ms = j.value("stage1_latency_ms", 0.0);
    t.stage2_latency_ms = j.value("stage2_latency_ms", 0.0);
    t.attempts = j.value("attempts", 0);
    t.failed = j.value("failed", false);
    auto get = [&](const char* k, auto& dst) {
        if (j.contains(k) && !j[k].is_null()) dst = j[k].get<typename std::decay_t<decltype(dst)>::value_type>();
    };
    get("r_a", t.r_a);
    get("r_b", t.r_b);
    get("context", t.context);
    get("injected", t.injected);
    get("swap_point", t.swap_point);
    get("retention", t.retention);
    get("prompt_variant_id", t.prompt_variant_id);
    t.natural_fallback = j.value("natural_fallback", false);
    t.error_kind = j.value("error_kind", std::string());
    t.error = j.value("error", std::string());
    if (j.contains("trace")) t.trace = trace_from_json(j["trace"]);
    return t;
}

void save_transcripts(const std::vector<Transcript>& ts, const fs::path& path) {
    std::string out;
    for (const auto& t : ts) out += to_json(t).dump() + "\n";
    write_file(path, out);
}

std::vector<Transcript> load_transcripts(const fs::path& path) {
    std::istringstream in(read_text_file(path));
    std::vector<Transcript> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (trim(line).empty()) continue;
        try {
            out.push_back(transcript_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(n, path.string() + ": " + e.what());
        }
    }
    return out;
}

// -- stage-1 cache ----------------------------------------------------------

std::string Stage1Cache::key(const EndpointConfig& e, const TemplateConfig& t, const ProbeInstance& inst,
                             const InferenceParams& p, int repeat) {
    const json k = {{"base_url", e.base_url},
                    {"model", e.model_name},
                    {"mode", to_string(e.mode)},
                    {"template", t.family},
                    {"instance", inst.id},
                    {"image_a", inst.image_a_sha256 ? *inst.image_a_sha256 : inst.image_a},
                    {"question", inst.question},
                    {"params", to_json(p)},
                    {"repeat", repeat}};
    return sha256_hex(k.dump());
}

std::optional<std::string> Stage1Cache::get(const std::string& key) const {
    const fs::path f = dir_ / (key + ".json");
    if (!fs::exists(f)) return std::nullopt;
    try {
        return json::parse(read_text_file(f)).at("text").get<std::string>();
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

void Stage1Cache::put(const std::string& key, const std::string& text) const {
    const fs::path f = dir_ / (key + ".json");
    const fs::path tmp = dir_ / (key + ".json.tmp");
    write_file(tmp, json{{"text", text}}.dump());
    fs::rename(tmp, f);
}

// -- engine -----------------------------------------------------------------

namespace {

std::string question_text(const ProbeInstance& inst) {
    if (inst.options.empty()) return inst.question;
    std::string q = inst.question;
    for (const auto& o : inst.options) q += "\n" + o;
    return q;
}

}  // namespace

Engine::Engine(const Manifest& manifest, TemplateConfig tmpl, PromptLibrary prompts, InferenceClient client,
               InferenceParams params, RunPlan plan)
    : manifest_(manifest),
      template_(std::move(tmpl)),
      prompts_(std::move(prompts)),
      client_(std::move(client)),
      params_(std::move(params)),
      plan_(std::move(plan)) {}

InferenceParams Engine::params_for(int repeat) const {
    InferenceParams p = params_;
    if (p.seed) *p.seed += repeat;
    return p;
}

Transcript Engine::base_transcript(const ProbeInstance& inst, Setting setting, const Transcript* stage1) const {
    Transcript t;
    t.instance_id = inst.id;
    t.setting = setting;
    if (stage1) {
        t.repeat = stage1->repeat;
        t.r_a = stage1->r_a;
        t.stage1_latency_ms = stage1->stage1_latency_ms;
        if (stage1->failed || !stage1->r_a) {
            t.failed = true;
            t.error_kind = "Stage1Failed";
            t.error = stage1->error.empty() ? "stage 1 produced no output" : stage1->error;
        }
    }
    t.params = to_json(params_for(t.repeat));
    return t;
}

const std::string& Engine::unrelated_for(std::size_t index) const {
    if (plan_.unrelated_pool.empty()) throw PoolExhausted("unrelated image pool is empty");
    return plan_.unrelated_pool[index % plan_.unrelated_pool.size()];
}

Job Engine::prepare_standard(const ProbeInstance& inst, bool on_b, int repeat) const {
    Job job;
    job.transcript = base_transcript(inst, on_b ? Setting::StandardOnB : Setting::StandardOnA, nullptr);
    job.transcript.repeat = repeat;
    job.transcript.params = to_json(params_for(repeat));
    job.transcript.image = manifest_.resolve(on_b ? inst.image_b : inst.image_a);
    job.sequence = render_standard(template_.markers, job.transcript.image, question_text(inst));
    return job;
}

Job Engine::prepare_probe(const ProbeInstance& inst, const Transcript& stage1, double retention, int variant_id,
                          Setting setting) const {
    Job job;
    job.transcript = base_transcript(inst, setting, &stage1);
    auto& t = job.transcript;
    t.retention = retention;
    t.prompt_variant_id = variant_id;
    t.injected = prompts_.reflection(variant_id);
    t.image = manifest_.resolve(inst.image_b);
    t.context = truncate_reasoning(t.r_a.value_or(""), retention);
    job.sequence = render_probe(template_.markers, t.image, question_text(inst), *t.context, *t.injected);
    return job;
}

Job Engine::prepare_multi_turn(const ProbeInstance& inst, const Transcript& stage1, Setting setting) const {
    Job job;
    job.transcript = base_transcript(inst, setting, &stage1);
    auto& t = job.transcript;
    t.image = manifest_.resolve(inst.image_b);
    t.context = t.r_a.value_or("");
    t.injected = prompts_.user_instruction;
    job.sequence = render_multi_turn(template_.markers, t.image, question_text(inst), *t.context, *t.injected);
    return job;
}

Job Engine::prepare_natural_probe(const ProbeInstance& inst, const Transcript& stage1) const {
    const std::string r_a = stage1.r_a.value_or("");
    const auto match = prompts_.natural_triggers.first_match(r_a);
    if (!match) {
        Job job = prepare_probe(inst, stage1, 1.0, 0, Setting::NaturalProbe);
        job.transcript.natural_fallback = true;
        return job;
    }
    Job job;
    job.transcript = base_transcript(inst, Setting::NaturalProbe, &stage1);
    auto& t = job.transcript;
    t.image = manifest_.resolve(inst.image_b);
    t.swap_point = match->offset;
    t.retention = 1.0;
    // the trigger itself opens the continuation
    t.context = r_a.substr(0, match->offset);
    t.injected = r_a.substr(match->offset, match->length);
    job.sequence = render_probe(template_.markers, t.image, question_text(inst), *t.context, *t.injected);
    return job;
}

std::pair<Job, Job> Engine::prepare_distinct_control(const ProbeInstance& inst, const Transcript& stage1,
                                                     const std::string& unrelated_image) const {
    Job probe;
    probe.transcript = base_transcript(inst, Setting::DistinctProbe, &stage1);
    probe.transcript.image = unrelated_image;
    probe.transcript.retention = 1.0;
    probe.transcript.prompt_variant_id = 0;
    probe.transcript.context = probe.transcript.r_a.value_or("");
    probe.transcript.injected = prompts_.reflection_default;
    probe.sequence = render_probe(template_.markers, unrelated_image, question_text(inst),
                                  *probe.transcript.context, *probe.transcript.injected);

    Job multi;
    multi.transcript = base_transcript(inst, Setting::DistinctMultiTurn, &stage1);
    multi.transcript.image = unrelated_image;
    multi.transcript.context = multi.transcript.r_a.value_or("");
    multi.transcript.injected = prompts_.user_instruction;
    multi.sequence = render_multi_turn(template_.markers, unrelated_image, question_text(inst),
                                       *multi.transcript.context, *multi.transcript.injected);
    return {std::move(probe), std::move(multi)};
}

Job Engine::prepare_decomposition(const ProbeInstance& inst, const Transcript& stage1,
                                  DecompositionCondition condition) const {
    switch (condition) {
        case DecompositionCondition::Natural:
            return prepare_probe(inst, stage1, 1.0, 0);
        case DecompositionCondition::MultiTurnNatural:
            return prepare_multi_turn(inst, stage1);
        case DecompositionCondition::SystemTokenOnly: {
            Job job;
            job.transcript = base_transcript(inst, Setting::SystemTokenOnly, &stage1);
            auto& t = job.transcript;
            t.image = manifest_.resolve(inst.image_b);
            t.retention = 1.0;
            t.context = t.r_a.value_or("");
            t.injected = std::string();
            job.sequence = render_system_token_only(template_.markers, t.image, question_text(inst), *t.context);
            return job;
        }
        case DecompositionCondition::HighPplMeaningful:
        case DecompositionCondition::HighPplMeaningless: {
            const bool meaningful = condition == DecompositionCondition::HighPplMeaningful;
            Job job;
            job.transcript = base_transcript(inst, setting_for(condition), &stage1);
            auto& t = job.transcript;
            t.image = manifest_.resolve(inst.image_b);
            t.retention = 1.0;
            t.context = t.r_a.value_or("");
            t.injected = meaningful ? prompts_.high_ppl_meaningful : prompts_.high_ppl_meaningless;
            job.sequence = render_probe(template_.markers, t.image, question_text(inst), *t.context, *t.injected,
                                        meaningful ? SequenceSetting::ProbeHighPplMeaningful
                                                   : SequenceSetting::ProbeHighPplMeaningless);
            return job;
        }
    }
    throw ConfigError("unknown decomposition condition");
}

Job Engine::prepare_sidecar_probe(const ProbeInstance& inst, const Transcript& stage1, Setting setting) const {
    Job job = prepare_probe(inst, stage1, 1.0, 0, setting);
    job.via_sidecar = true;
    return job;
}

Transcript Engine::execute(Job job) const {
    std::vector<Job> one;
    one.push_back(std::move(job));
    return execute_all(std::move(one)).front();
}

namespace {

void record_output(Transcript& t, const Completion& c) {
    if (t.setting == Setting::StandardOnA) {
        t.r_a = c.text;
        t.stage1_latency_ms = c.latency_ms;
    } else {
        t.r_b = c.text;
        t.stage2_latency_ms = c.latency_ms;
    }
    t.attempts = c.attempts;
}

void record_failure(Transcript& t, std::string kind, std::string what) {
    t.failed = true;
    t.error_kind = std::move(kind);
    t.error = std::move(what);
}

}  // namespace

std::vector<Transcript> Engine::execute_all(std::vector<Job> jobs) const {
    std::vector<Transcript> out(jobs.size());
    std::map<int, std::vector<std::size_t>> by_repeat;
    for (std::size_t i = 0; i < jobs.size(); ++i) {
        out[i] = jobs[i].transcript;
        if (out[i].failed) continue;
        if (jobs[i].via_sidecar) {
            if (!sidecar_) {
                record_failure(out[i], "SidecarUnavailable", "no sidecar configured");
                continue;
            }
            std::optional<TraceRequest> trace;
            std::optional<AmplificationConfig> amp;
            if (out[i].setting == Setting::ProbeTraced && plan_.sidecar) trace = TraceRequest{plan_.sidecar->trace_layers};
            if (out[i].setting == Setting::ProbeAmplified && plan_.sidecar) amp = plan_.sidecar->amplification;
            try {
                const auto started = std::chrono::steady_clock::now();
                auto g = sidecar_->generate(jobs[i].sequence, template_, params_for(out[i].repeat), trace, amp);
                out[i].r_b = g.text;
                out[i].trace = g.trace;
                out[i].attempts = 1;
                out[i].stage2_latency_ms =
                    std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
            } catch (const Error& e) {
                record_failure(out[i], "SidecarError", e.what());
            }
            continue;
        }
        by_repeat[out[i].repeat].push_back(i);
    }
    for (const auto& [repeat, idx] : by_repeat) {
        std::vector<RenderedSequence> seqs;
        seqs.reserve(idx.size());
        for (std::size_t i : idx) seqs.push_back(jobs[i].sequence);
        const auto results = client_.run_batch(seqs, params_for(repeat), max_in_flight_);
        for (std::size_t k = 0; k < idx.size(); ++k) {
            auto& t = out[idx[k]];
            if (results[k].ok())
                record_output(t, *results[k].completion);
            else
                record_failure(t, results[k].error_kind, results[k].error);
        }
    }
    return out;
}

Transcript Engine::run_standard(const ProbeInstance& inst, bool on_b, int repeat) const {
    return execute(prepare_standard(inst, on_b, repeat));
}

Transcript Engine::run_probe(const ProbeInstance& inst, const Transcript& stage1, double retention,
                             int variant_id) const {
    return execute(prepare_probe(inst, stage1, retention, variant_id));
}

Transcript Engine::run_multi_turn(const ProbeInstance& inst, const Transcript& stage1) const {
    return execute(prepare_multi_turn(inst, stage1));
}

Transcript Engine::run_natural_probe(const ProbeInstance& inst, const Transcript& stage1) const {
    return execute(prepare_natural_probe(inst, stage1));
}

std::pair<Transcript, Transcript> Engine::run_distinct_control(const ProbeInstance& inst, const Transcript& stage1,
                                                               const std::string& unrelated_image) const {
    auto [p, m] = prepare_distinct_control(inst, stage1, unrelated_image);
    std::vector<Job> jobs;
    jobs.push_back(std::move(p));
    jobs.push_back(std::move(m));
    auto out = execute_all(std::move(jobs));
    return {std::move(out[0]), std::move(out[1])};
}

Transcript Engine::run_decomposition(const ProbeInstance& inst, const Transcript& stage1,
                                     DecompositionCondition condition) const {
    return execute(prepare_decomposition(inst, stage1, condition));
}

std::vector<Transcript> Engine::run(const std::function<void(const std::string&)>& progress) const {
    plan_.validate(client_.endpoint().mode, prompts_.reflection_variants.size());
    auto say = [&](const std::string& msg) {
        if (progress) progress(msg);
    };
    const auto& settings = plan_.settings;
    const bool need_stage1 = std::any_of(settings.begin(), settings.end(),
                                         [](Setting s) { return s == Setting::StandardOnA || is_two_stage(s); });
    const auto& instances = manifest_.instances;

    // Stage 1 (and the standard run on image b), reusing cached R_a.
    std::vector<Job> stage1_jobs;
    std::vector<Transcript> cached;
    for (const auto& inst : instances) {
        for (int r = 0; r < plan_.repeats; ++r) {
            if (need_stage1) {
                Job job = prepare_standard(inst, false, r);
                std::optional<std::string> hit;
                if (cache_) hit = cache_->get(Stage1Cache::key(client_.endpoint(), template_, inst, params_for(r), r));
                if (hit) {
                    job.transcript.r_a = *hit;
                    cached.push_back(job.transcript);
                } else {
                    stage1_jobs.push_back(std::move(job));
                }
            }
            if (contains(settings, Setting::StandardOnB)) stage1_jobs.push_back(prepare_standard(inst, true, r));
        }
    }
    say("stage 1: " + std::to_string(stage1_jobs.size()) + " requests, " + std::to_string(cached.size()) +
        " cached");
    std::vector<Transcript> all = execute_all(std::move(stage1_jobs));
    std::map<std::pair<std::string, int>, Transcript> stage1_of;
    for (auto& t : cached) stage1_of[{t.instance_id, t.repeat}] = t;
    for (const auto& t : all) {
        if (t.setting != Setting::StandardOnA) continue;
        stage1_of[{t.instance_id, t.repeat}] = t;
        if (cache_ && !t.failed && t.r_a) {
            const auto& inst = *std::find_if(instances.begin(), instances.end(),
                                             [&](const auto& i) { return i.id == t.instance_id; });
            cache_->put(Stage1Cache::key(client_.endpoint(), template_, inst, params_for(t.repeat), t.repeat), *t.r_a);
        }
    }
    all.insert(all.end(), cached.begin(), cached.end());

    // Stage 2.
    std::vector<Job> stage2;
    for (std::size_t idx = 0; idx < instances.size(); ++idx) {
        const auto& inst = instances[idx];
        for (int r = 0; r < plan_.repeats; ++r) {
            const auto it = stage1_of.find({inst.id, r});
            if (it == stage1_of.end()) continue;
            const Transcript& s1 = it->second;
            for (Setting s : settings) {
                switch (s) {
                    case Setting::Probe:
                        for (double f : plan_.retention_fractions)
                            for (int v : plan_.prompt_variant_ids) stage2.push_back(prepare_probe(inst, s1, f, v));
                        break;
                    case Setting::MultiTurn: stage2.push_back(prepare_multi_turn(inst, s1)); break;
                    case Setting::NaturalProbe: stage2.push_back(prepare_natural_probe(inst, s1)); break;
                    case Setting::DistinctProbe:
                    case Setting::DistinctMultiTurn: {
                        auto [p, m] = prepare_distinct_control(inst, s1, unrelated_for(idx));
                        stage2.push_back(std::move(s == Setting::DistinctProbe ? p : m));
                        break;
                    }
                    case Setting::HighPplMeaningful:
                        stage2.push_back(prepare_decomposition(inst, s1, DecompositionCondition::HighPplMeaningful));
                        break;
                    case Setting::HighPplMeaningless:
                        stage2.push_back(prepare_decomposition(inst, s1, DecompositionCondition::HighPplMeaningless));
                        break;
                    case Setting::SystemTokenOnly:
                        stage2.push_back(prepare_decomposition(inst, s1, DecompositionCondition::SystemTokenOnly));
                        break;
                    case Setting::ProbeTraced:
                    case Setting::ProbeAmplified: stage2.push_back(prepare_sidecar_probe(inst, s1, s)); break;
                    case Setting::StandardOnA:
                    case Setting::StandardOnB: break;
                }
            }
        }
    }
    say("stage 2: " + std::to_string(stage2.size()) + " requests");
    auto second = execute_all(std::move(stage2));
    all.insert(all.end(), std::make_move_iterator(second.begin()), std::make_move_iterator(second.end()));

    std::map<std::string, std::size_t> order;
    for (std::size_t i = 0; i < instances.size(); ++i) order[instances[i].id] = i;
    std::stable_sort(all.begin(), all.end(), [&](const Transcript& a, const Transcript& b) {
        return std::pair(order[a.instance_id], a.repeat) < std::pair(order[b.instance_id], b.repeat);
    });
    return all;
}

// -- run config -------------------------------------------------------------

RunConfig load_run_config(const fs::path& path) {
    RunConfig c;
    c.base_dir = fs::absolute(path).parent_path();
    const fs::path base = path.parent_path().empty() ? fs::path(".") : path.parent_path();
    auto rel = [&](const std::string& p) {
        fs::path f = p;
        return f.is_relative() ? base / f : f;
    };
    try {
        c.raw = json::parse(read_text_file(path));
        const auto& j = c.raw;
        c.run_id = j.value("run_id", std::string());
        if (j.contains("runs_dir")) c.runs_dir = rel(j["runs_dir"].get<std::string>());
        c.manifest = rel(j.at("manifest").get<std::string>());
        c.template_path = rel(j.at("template").get<std::string>());
        if (j.contains("prompts")) c.prompts_path = rel(j["prompts"].get<std::string>());
        c.endpoint = endpoint_from_json(j.at("endpoint"));
        if (j.contains("params")) c.params = params_from_json(j["params"]);
        c.plan = plan_from_json(j.at("plan"), base);
        c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
        if (j.contains("stage1_cache")) c.stage1_cache = rel(j["stage1_cache"].get<std::string>());
        if (j.contains("judge")) c.judge = j["judge"];
    } catch (const json::exception& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    c.endpoint.validate();
    if (c.max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
    return c;
}

}  // namespace swapprobe
