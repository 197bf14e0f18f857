#include <doctest.h>

#include <regex>
#include <sstream>

#include "support.hpp"
#include "swapprobe/errors.hpp"
#include "swapprobe/report.hpp"

using namespace swapprobe;
using support::TempDir;
namespace fs = std::filesystem;

namespace {

Verdict verdict(const std::string& id, Setting s, bool correct, double retention = -1.0) {
    Verdict v;
    v.instance_id = id;
    v.setting = s;
    v.transcript_key = id + "|" + std::string(to_string(s)) + "|" + std::to_string(retention);
    if (s == Setting::Probe) {
        v.retention = retention;
        v.prompt_variant_id = 0;
    }
    if (correct) v.correct_vs = s == Setting::StandardOnA ? CorrectVs::AnswerA : CorrectVs::AnswerB;
    return v;
}

MetricsReport sample_report() {
    Manifest m;
    for (int i = 0; i < 4; ++i) {
        ProbeInstance p;
        p.id = "q" + std::to_string(i);
        p.source = i < 2 ? Source::MathVista : Source::MathVision;
        m.instances.push_back(p);
    }
    std::vector<Verdict> vs;
    for (const auto& p : m.instances) {
        vs.push_back(verdict(p.id, Setting::StandardOnA, true));
        vs.push_back(verdict(p.id, Setting::StandardOnB, true));
        vs.push_back(verdict(p.id, Setting::Probe, false, 1.0));
        vs.push_back(verdict(p.id, Setting::Probe, true, 0.0));
        vs.push_back(verdict(p.id, Setting::MultiTurn, p.id == "q0"));
    }
    return aggregate(m, {}, vs, PromptLibrary::defaults().natural_triggers);
}

std::vector<std::string> lines(const std::string& s) {
    std::vector<std::string> out;
    std::istringstream in(s);
    for (std::string line; std::getline(in, line);) out.push_back(line);
    return out;
}

}  // namespace

TEST_CASE("table rows are the scored stage-2 settings") {
    const auto r = sample_report();
    const auto table = lines(table_markdown(r));
    REQUIRE(table.size() == 4);
    CHECK(table[0].find("MathVista Base") != std::string::npos);
    CHECK(table[0].find("Avg Δ") != std::string::npos);
    CHECK(table[2] == "| probe | 100.0 | 0.0 | 100.0 | 100.0 | 0.0 | 100.0 | 100.0 | 0.0 | 100.0 |");
    CHECK(table[3] == "| multi_turn | 100.0 | 50.0 | 50.0 | 100.0 | 0.0 | 100.0 | 100.0 | 25.0 | 75.0 |");
}

TEST_CASE("retention curve") {
    const auto curve = lines(retention_csv(sample_report()));
    REQUIRE(curve.size() == 4);
    CHECK(curve[0] == "source,base,0.00,1.00");
    CHECK(curve[1] == "MathVista,100.0,100.0,0.0");
    CHECK(curve[3] == "Avg,100.0,100.0,0.0");
}

TEST_CASE("attention rows are relative to the intervention step") {
    Transcript t;
    t.instance_id = "id,with comma";
    t.setting = Setting::ProbeTraced;
    AttentionTrace tr;
    tr.layers = {20};
    tr.steps = {{0.1, 0.2, 0.3}};
    tr.image_token_span = {0, 4};
    tr.intervention_step = 1;
    t.trace = tr;
    const auto rows = lines(attention_csv({Transcript{}, t}));
    REQUIRE(rows.size() == 4);
    CHECK(rows[0] == "instance_id,setting,repeat,layer,step,relative_step,s_vis");
    CHECK(rows[1] == "\"id,with comma\",probe_traced,0,20,0,-1,0.1");
    CHECK(rows[3] == "\"id,with comma\",probe_traced,0,20,2,1,0.3");
    CHECK(attention_csv({Transcript{}}).empty());
}

TEST_CASE("emitting a report") {
    TempDir dir;
    const auto r = sample_report();
    const auto out = dir / "report";
    const auto files = emit_report(out, r, {}, false);
    CHECK(fs::exists(out / "per_source.csv"));
    CHECK(fs::exists(out / "table.md"));
    CHECK(fs::exists(out / "retention_curve.csv"));
    CHECK(fs::exists(out / "summary.json"));
    CHECK_FALSE(fs::exists(out / "attention_trajectory.csv"));
    CHECK_FALSE(fs::exists(out / "detection.csv"));
    CHECK(files.written.size() == 4);
    CHECK(nlohmann::json::parse(read_file(out / "summary.json")).is_object());

    CHECK_THROWS_AS(emit_report(out, r, {}, false), IoError);
    CHECK_NOTHROW(emit_report(out, r, {}, true));
}

TEST_CASE("run directories and ids") {
    TempDir dir;
    fs::create_directories(dir / "runs" / "abc");
    CHECK(resolve_run_dir(dir / "runs", "abc") == dir / "runs" / "abc");
    fs::create_directories(dir / "elsewhere");
    write_file(dir / "elsewhere" / "transcripts.jsonl", "");
    CHECK(resolve_run_dir(dir / "runs", (dir / "elsewhere").string()) == dir / "elsewhere");
    CHECK_THROWS_AS(resolve_run_dir(dir / "runs", "missing"), ConfigError);

    const std::string id = new_run_id();
    CHECK(std::regex_match(id, std::regex(R"(\d{8}T\d{6}Z-[0-9a-f]{4})")));
}
