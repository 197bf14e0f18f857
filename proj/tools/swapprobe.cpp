// swapprobe: run, judge and report image-swap probing experiments.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iostream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "swapprobe/bench.hpp"
#include "swapprobe/errors.hpp"
#include "swapprobe/judge.hpp"
#include "swapprobe/metrics.hpp"
#include "swapprobe/pairverify.hpp"
#include "swapprobe/protocol.hpp"
#include "swapprobe/report.hpp"
#include "swapprobe/sidecar.hpp"
#include "swapprobe/util.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace swapprobe;

namespace {

constexpr int kOk = 0;
constexpr int kEvalErrors = 1;
constexpr int kConfigError = 2;

std::string utc_now() {
    const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

PromptLibrary prompts_from(const json& cfg) {
    if (cfg.contains("prompts") && cfg["prompts"].is_string()) return load_prompt_library(cfg["prompts"].get<std::string>());
    return PromptLibrary::defaults();
}

struct RunArgs {
    std::string config;
    std::string run_id;
};

int cmd_run(const RunArgs& args) {
    RunConfig cfg = load_run_config(args.config);
    if (!args.run_id.empty()) cfg.run_id = args.run_id;
    if (cfg.run_id.empty()) cfg.run_id = new_run_id();

    const Manifest manifest = load_manifest(cfg.manifest);
    const TemplateConfig tmpl = load_template_config(cfg.template_path);
    const PromptLibrary prompts = cfg.prompts_path ? load_prompt_library(*cfg.prompts_path) : PromptLibrary::defaults();
    cfg.plan.validate(cfg.endpoint.mode, prompts.reflection_variants.size());

    const fs::path dir = cfg.runs_dir / cfg.run_id;
    if (fs::exists(dir) && !fs::is_empty(dir)) throw ConfigError("run directory " + dir.string() + " already exists");
    fs::create_directories(dir);

    InferenceClient client(cfg.endpoint, tmpl);
    client.set_audit_log(dir / "requests.jsonl");
    Engine engine(manifest, tmpl, prompts, client, cfg.params, cfg.plan);
    engine.set_max_in_flight(cfg.max_in_flight);
    engine.set_stage1_cache(Stage1Cache(cfg.stage1_cache.value_or(cfg.runs_dir / ".stage1-cache")));
    if (cfg.plan.sidecar) engine.set_sidecar(SidecarClient(cfg.plan.sidecar->url, cfg.endpoint.timeout_s));

    write_file(dir / "config.json", resolved_config_json(cfg).dump(2) + "\n");
    const std::string started = utc_now();
    const auto t0 = std::chrono::steady_clock::now();
    const auto transcripts = engine.run([](const std::string& msg) { std::cerr << msg << '\n'; });
    const double wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    save_transcripts(transcripts, dir / "transcripts.jsonl");

    std::size_t failed = 0;
    for (const auto& t : transcripts) failed += t.failed ? 1 : 0;
    json meta = {{"run_id", cfg.run_id},
                 {"started_utc", started},
                 {"finished_utc", utc_now()},
                 {"wall_s", wall_s},
                 {"instances", manifest.instances.size()},
                 {"transcripts", transcripts.size()},
                 {"failed", failed},
                 {"natural_probe_split", "trigger text opens the continuation; retained prefix ends before it"}};
    if (cfg.plan.sidecar && cfg.plan.sidecar->amplification)
        meta["amplification"] = {{"factor", cfg.plan.sidecar->amplification->factor},
                                 {"renormalize", cfg.plan.sidecar->amplification->renormalize}};
    write_file(dir / "run.json", meta.dump(2) + "\n");

    std::cout << "run " << cfg.run_id << ": " << transcripts.size() << " transcripts, " << failed << " failed\n"
              << "  " << dir.string() << '\n';
    return failed ? kEvalErrors : kOk;
}

struct JudgeArgs {
    std::string run;
    std::string runs_dir = "runs";
    std::string mode;
    std::string adjudication;
    std::string export_adjudication;
};

int cmd_judge(const JudgeArgs& args) {
    const fs::path dir = resolve_run_dir(args.runs_dir, args.run);
    const json cfg = json::parse(read_text_file(dir / "config.json"));
    const json jcfg = cfg.value("judge", json::object());
    const Manifest manifest = load_manifest(cfg.at("manifest").get<std::string>(), {.check_images = false});
    const TemplateConfig tmpl = load_template_config(cfg.at("template").get<std::string>());
    const auto transcripts = load_transcripts(dir / "transcripts.jsonl");

    JudgeOptions opts;
    opts.mode = parse_judge_mode(args.mode.empty() ? jcfg.value("mode", std::string("rule")) : args.mode);
    opts.tmpl = tmpl;
    opts.max_in_flight = jcfg.value("max_in_flight", 4);
    std::optional<LlmJudge> llm;
    if (opts.mode == JudgeMode::Llm) {
        if (!jcfg.contains("endpoint")) throw ConfigError("llm judge mode needs judge.endpoint in the run config");
        EndpointConfig e = endpoint_from_json(jcfg["endpoint"]);
        if (e.auth && *e.auth == "<redacted>")
            throw ConfigError("judge endpoint key was given literally and not stored; use \"auth\": \"env:NAME\"");
        e.mode = EndpointMode::Chat;
        InferenceParams p;
        p.temperature = 0.0;
        p.max_new_tokens = 16;
        if (jcfg.contains("params")) p = params_from_json(jcfg["params"]);
        const JudgePrompts prompts =
            jcfg.contains("prompts_dir") ? JudgePrompts::load(jcfg["prompts_dir"].get<std::string>()) : JudgePrompts::defaults();
        InferenceClient client(e, tmpl);
        client.set_audit_log(dir / "judge_requests.jsonl");
        llm.emplace(std::move(client), p, prompts);
        opts.llm = &*llm;
    }
    const std::string adjudication = args.adjudication.empty() ? jcfg.value("adjudication", std::string()) : args.adjudication;
    if (opts.mode == JudgeMode::Human) {
        if (adjudication.empty()) throw ConfigError("human judge mode needs an adjudication file");
        opts.adjudications = parse_adjudication(read_text_file(adjudication));
    }

    const auto verdicts = judge_transcripts(manifest, transcripts, opts);
    save_verdicts(verdicts, dir / "verdicts.jsonl");
    if (!args.export_adjudication.empty())
        write_file(args.export_adjudication, export_adjudication(manifest, transcripts, verdicts));

    std::size_t abstained = 0;
    for (const auto& v : verdicts) abstained += v.abstained ? 1 : 0;
    std::cout << "judged " << verdicts.size() << " transcripts (" << to_string(opts.mode) << "), " << abstained
              << " abstentions\n";
    return kOk;
}

struct ReportArgs {
    std::string run;
    std::string runs_dir = "runs";
    std::string out;
    bool force = false;
};

int cmd_report(const ReportArgs& args) {
    const fs::path dir = resolve_run_dir(args.runs_dir, args.run);
    const json cfg = json::parse(read_text_file(dir / "config.json"));
    const Manifest manifest = load_manifest(cfg.at("manifest").get<std::string>(), {.check_images = false});
    if (!fs::exists(dir / "verdicts.jsonl")) throw ConfigError("run has no verdicts yet; run `swapprobe judge` first");
    const auto transcripts = load_transcripts(dir / "transcripts.jsonl");
    const auto verdicts = load_verdicts(dir / "verdicts.jsonl");
    const PromptLibrary prompts = prompts_from(cfg);

    const MetricsReport r = aggregate(manifest, transcripts, verdicts, prompts.natural_triggers);
    const fs::path out = args.out.empty() ? dir / "report" : fs::path(args.out);
    const auto files = emit_report(out, r, transcripts, args.force);
    for (const auto& w : r.warnings) std::cerr << "warning: " << w << '\n';
    std::cout << table_markdown(r);
    for (const auto& f : files.written) std::cout << "wrote " << f.string() << '\n';
    return r.failed_transcripts ? kEvalErrors : kOk;
}

struct VerifyArgs {
    std::string manifest;
    std::string sidecar;
    std::string csv;
    Thresholds thresholds;
    int workers = 0;
};

int cmd_verify(const VerifyArgs& args) {
    const Manifest manifest = load_manifest(args.manifest, {.check_images = false});
    std::optional<SidecarClient> sidecar;
    if (!args.sidecar.empty()) sidecar.emplace(args.sidecar, 120.0);
    const auto report = verify_manifest(manifest, args.thresholds, sidecar ? &*sidecar : nullptr, args.workers);
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
    const std::string csv = similarity_csv(report);
    if (args.csv.empty())
        std::cout << csv;
    else
        write_file(args.csv, csv);
    auto opt = [](const std::optional<double>& v) { return v ? format_fixed(*v, 3) : std::string("n/a"); };
    std::cerr << "pairs " << report.pairs.size() << "  ssim " << format_fixed(report.overall.ssim, 3) << "  clip "
              << opt(report.overall.clip) << "  lpips " << opt(report.overall.lpips) << "  gate "
              << (report.gate_pass ? "PASS" : "FAIL") << '\n';
    if (!report.outliers.empty()) {
        std::cerr << "outliers:";
        for (const auto& id : report.outliers) std::cerr << ' ' << id;
        std::cerr << '\n';
    }
    return report.gate_pass ? kOk : kEvalErrors;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Image-swap probing harness for vision-language models"};
    app.require_subcommand(1);

    RunArgs run_args;
    auto* run = app.add_subcommand("run", "Run every setting of a run config");
    run->add_option("config", run_args.config, "Run config file")->required()->check(CLI::ExistingFile);
    run->add_option("--run-id", run_args.run_id, "Run id (default: timestamp)");

    JudgeArgs judge_args;
    auto* judge = app.add_subcommand("judge", "Score the transcripts of a run");
    judge->add_option("run", judge_args.run, "Run id or run directory")->required();
    judge->add_option("--runs-dir", judge_args.runs_dir, "Directory holding runs")->capture_default_str();
    judge->add_option("--mode", judge_args.mode, "rule | llm | human (default: from config)");
    judge->add_option("--adjudication", judge_args.adjudication, "Labelled adjudication file (human mode)");
    judge->add_option("--export-adjudication", judge_args.export_adjudication,
                      "Write the same/different cases needing a label to this file");

    ReportArgs report_args;
    auto* report = app.add_subcommand("report", "Aggregate verdicts into tables and CSVs");
    report->add_option("run", report_args.run, "Run id or run directory")->required();
    report->add_option("--runs-dir", report_args.runs_dir, "Directory holding runs")->capture_default_str();
    report->add_option("--out", report_args.out, "Output directory (default: <run>/report)");
    report->add_flag("--force", report_args.force, "Overwrite an existing report directory");

    VerifyArgs verify_args;
    auto* verify = app.add_subcommand("verify-pairs", "Image-pair similarity check for a manifest");
    verify->add_option("manifest", verify_args.manifest, "Manifest file")->required()->check(CLI::ExistingFile);
    verify->add_option("--sidecar", verify_args.sidecar, "Sidecar base URL for CLIP / LPIPS");
    verify->add_option("--csv", verify_args.csv, "Write the CSV report here instead of stdout");
    verify->add_option("--ssim-min", verify_args.thresholds.ssim_min)->capture_default_str();
    verify->add_option("--clip-min", verify_args.thresholds.clip_min)->capture_default_str();
    verify->add_option("--lpips-max", verify_args.thresholds.lpips_max)->capture_default_str();
    verify->add_option("--workers", verify_args.workers, "Parallel workers (default: all cores)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kConfigError;
    }

    try {
        if (*run) return cmd_run(run_args);
        if (*judge) return cmd_judge(judge_args);
        if (*report) return cmd_report(report_args);
        if (*verify) return cmd_verify(verify_args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const ModeMismatch& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const PoolExhausted& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << '\n';
        return kConfigError;
    } catch (const IntegrityError& e) {
        std::cerr << "manifest error: " << e.what() << '\n';
        return kConfigError;
    } catch (const MarkerError& e) {
        std::cerr << "template error: " << e.what() << '\n';
        return kConfigError;
    } catch (const PatternError& e) {
        std::cerr << "prompt error: " << e.what() << '\n';
        return kConfigError;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << '\n';
        return kConfigError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kEvalErrors;
    }
    return kOk;
}
