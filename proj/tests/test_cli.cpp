#include <doctest.h>

#include <sys/wait.h>

#include <nlohmann/json.hpp>

#include "support.hpp"

using json = nlohmann::json;
using support::TempDir;
namespace fs = std::filesystem;

namespace {

int run(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(SWAPPROBE_CLI) + " " + args + " >" + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

json config(const std::string& base_url, const std::string& mode, const std::vector<std::string>& settings) {
    return {{"runs_dir", "runs"},
            {"manifest", support::source_path("samples/synthetic/manifest.jsonl").string()},
            {"template", support::source_path("config/templates/synthetic.json").string()},
            {"prompts", support::source_path("config/prompts/default.json").string()},
            {"endpoint", {{"base_url", base_url}, {"mode", mode}, {"max_retries", 1}, {"backoff_base_s", 0.01}}},
            {"params", {{"temperature", 0.1}, {"max_new_tokens", 64}, {"seed", 1}}},
            {"plan", {{"settings", settings}, {"retention_fractions", {0.0, 1.0}}}},
            {"judge", {{"mode", "rule"}}}};
}

}  // namespace

TEST_CASE("run, judge and report end to end") {
    support::MockModel model(support::mock_options(swapprobe::mock::Behavior::Anchored));
    TempDir dir;
    const auto cfg = dir / "run.json";
    swapprobe::write_file(
        cfg, config(model.server().base_url(), "completion_raw", {"standard_on_a", "standard_on_b", "probe"}).dump());
    const auto log = dir / "log.txt";
    REQUIRE(run("run " + cfg.string() + " --run-id e2e", log) == 0);
    const fs::path rundir = dir / "runs" / "e2e";
    CHECK(fs::exists(rundir / "transcripts.jsonl"));
    CHECK(fs::exists(rundir / "requests.jsonl"));
    const json meta = json::parse(swapprobe::read_file(rundir / "run.json"));
    CHECK(meta["transcripts"] == 8 * 4);
    CHECK(meta["failed"] == 0);

    // a second run into the same directory is refused
    CHECK(run("run " + cfg.string() + " --run-id e2e", log) == 2);

    CHECK(run("report e2e --runs-dir " + (dir / "runs").string(), log) != 0);
    REQUIRE(run("judge e2e --runs-dir " + (dir / "runs").string(), log) == 0);
    REQUIRE(run("report e2e --runs-dir " + (dir / "runs").string(), log) == 0);
    const std::string table = swapprobe::read_text_file(rundir / "report" / "table.md");
    CHECK(table.find("| probe | 100.0 | 0.0 | 100.0 |") != std::string::npos);
    const std::string curve = swapprobe::read_text_file(rundir / "report" / "retention_curve.csv");
    CHECK(curve.find("Avg,100.0,100.0,0.0") != std::string::npos);
}

TEST_CASE("probe settings on a chat endpoint exit with a config error") {
    support::MockModel model(support::mock_options(swapprobe::mock::Behavior::Anchored));
    TempDir dir;
    const auto cfg = dir / "run.json";
    swapprobe::write_file(cfg, config(model.server().base_url(), "chat", {"standard_on_a", "probe"}).dump());
    CHECK(run("run " + cfg.string() + " --run-id chat", dir / "log.txt") == 2);
    CHECK(model.server().requests().empty());
    CHECK_FALSE(fs::exists(dir / "runs" / "chat"));
}

TEST_CASE("verify-pairs gate sets the exit code") {
    TempDir dir;
    const auto manifest = support::source_path("samples/synthetic/manifest.jsonl").string();
    const auto csv = dir / "sim.csv";
    CHECK(run("verify-pairs " + manifest + " --csv " + csv.string(), dir / "log.txt") == 0);
    CHECK(swapprobe::read_text_file(csv).rfind("scope,id,source,ssim,clip,lpips\n", 0) == 0);
    CHECK(run("verify-pairs " + manifest + " --ssim-min 0.9999", dir / "log.txt") == 1);
    CHECK(run("verify-pairs " + (dir / "missing.jsonl").string(), dir / "log.txt") == 2);
}
