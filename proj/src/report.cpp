#include "swapprobe/report.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <random>
#include <set>
#include <sstream>

#include "swapprobe/errors.hpp"
#include "swapprobe/util.hpp"

namespace swapprobe {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string fmt(const std::optional<double>& v) { return v ? format_fixed(*v) : std::string(); }

std::string fmt_retention(double r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", r);
    return buf;
}

std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

bool default_cell(const CellKey& k) {
    return k.setting != Setting::Probe || (k.retention == 1.0 && k.variant == 0);
}

/// Stage-2 settings that carry a delta, in first-seen key order.
std::vector<CellKey> table_rows(const MetricsReport& r) {
    std::vector<CellKey> rows;
    for (const auto& [key, cell] : r.average)
        if (cell.delta && default_cell(key)) rows.push_back(key);
    return rows;
}

}  // namespace

std::string per_source_csv(const MetricsReport& r) {
    std::ostringstream out;
    out << "source,setting,retention,prompt_variant_id,n,failed,accuracy,acc_base,delta,repeat_std\n";
    for (Source s : r.sources) {
        const auto it = r.cells.find(s);
        if (it == r.cells.end()) continue;
        for (const auto& [key, c] : it->second) {
            out << to_string(s) << ',' << to_string(key.setting) << ','
                << (key.retention >= 0 ? fmt_retention(key.retention) : "") << ','
                << (key.variant >= 0 ? std::to_string(key.variant) : "") << ',' << c.n << ',' << c.failed << ','
                << (c.n ? format_fixed(c.accuracy) : "") << ',' << fmt(c.acc_base) << ',' << fmt(c.delta) << ','
                << fmt(c.repeat_std) << '\n';
        }
    }
    return out.str();
}

std::string table_markdown(const MetricsReport& r) {
    std::ostringstream out;
    std::vector<std::string> columns;
    for (Source s : r.sources) columns.emplace_back(to_string(s));
    columns.emplace_back("Avg");
    out << "| Setting |";
    for (const auto& c : columns) out << ' ' << c << " Base | " << c << " Acc | " << c << " Δ |";
    out << "\n|---|";
    for (std::size_t i = 0; i < columns.size(); ++i) out << "---:|---:|---:|";
    out << '\n';
    for (const CellKey& key : table_rows(r)) {
        out << "| " << to_string(key.setting) << " |";
        auto row = [&](const Cell* c) {
            if (!c || !c->delta)
                out << " | | |";
            else
                out << ' ' << fmt(c->acc_base) << " | " << format_fixed(c->accuracy) << " | " << fmt(c->delta) << " |";
        };
        for (Source s : r.sources) {
            const Cell* c = nullptr;
            if (const auto it = r.cells.find(s); it != r.cells.end())
                if (const auto jt = it->second.find(key); jt != it->second.end()) c = &jt->second;
            row(c);
        }
        row(&r.average.at(key));
        out << '\n';
    }
    return out.str();
}

std::string retention_csv(const MetricsReport& r) {
    std::set<double> fractions;
    for (const auto& [key, _] : r.average)
        if (key.setting == Setting::Probe && key.variant == 0) fractions.insert(key.retention);
    std::ostringstream out;
    out << "source,base";
    for (double f : fractions) out << ',' << fmt_retention(f);
    out << '\n';
    auto line = [&](std::string_view name, const std::map<CellKey, Cell>& cells) {
        out << name << ',';
        if (const auto b = cells.find({Setting::StandardOnB, -1.0, -1}); b != cells.end() && b->second.n)
            out << format_fixed(b->second.accuracy);
        for (double f : fractions) {
            out << ',';
            if (const auto c = cells.find({Setting::Probe, f, 0}); c != cells.end() && c->second.n)
                out << format_fixed(c->second.accuracy);
        }
        out << '\n';
    };
    for (Source s : r.sources)
        if (const auto it = r.cells.find(s); it != r.cells.end()) line(to_string(s), it->second);
    line("Avg", r.average);
    return out.str();
}

std::string variants_csv(const MetricsReport& r) {
    std::set<int> ids;
    for (const auto& [key, _] : r.average)
        if (key.setting == Setting::Probe && key.retention == 1.0 && key.variant >= 1) ids.insert(key.variant);
    std::ostringstream out;
    out << "source";
    for (int v : ids) out << ",variant_" << v;
    out << ",mean,std\n";
    auto line = [&](std::string_view name, const std::map<CellKey, Cell>& cells, const std::optional<MeanStd>& ms) {
        out << name;
        for (int v : ids) {
            out << ',';
            if (const auto c = cells.find({Setting::Probe, 1.0, v}); c != cells.end() && c->second.n)
                out << format_fixed(c->second.accuracy);
        }
        out << ',' << (ms ? format_fixed(ms->mean) : "") << ',' << (ms ? format_fixed(ms->std, 2) : "") << '\n';
    };
    for (Source s : r.sources) {
        const auto it = r.cells.find(s);
        if (it == r.cells.end()) continue;
        const auto v = r.variants.find(s);
        line(to_string(s), it->second, v == r.variants.end() ? std::nullopt : std::optional<MeanStd>(v->second));
    }
    line("Avg", r.average, r.variants_average);
    return out.str();
}

std::string detection_csv(const MetricsReport& r) {
    std::ostringstream out;
    out << "source,setting,detected,not_detected,abstained,rate\n";
    for (Source s : r.sources) {
        const auto it = r.detection.find(s);
        if (it == r.detection.end()) continue;
        for (const auto& [setting, d] : it->second)
            out << to_string(s) << ',' << to_string(setting) << ',' << d.detected << ',' << d.not_detected << ','
                << d.abstained << ',' << fmt(d.rate) << '\n';
    }
    for (const auto& [setting, d] : r.detection_overall)
        out << "Overall," << to_string(setting) << ',' << d.detected << ',' << d.not_detected << ',' << d.abstained
            << ',' << fmt(d.rate) << '\n';
    return out.str();
}

std::string attention_csv(const std::vector<Transcript>& transcripts) {
    std::ostringstream out;
    bool any = false;
    for (const auto& t : transcripts) {
        if (!t.trace) continue;
        if (!any) out << "instance_id,setting,repeat,layer,step,relative_step,s_vis\n";
        any = true;
        const int origin = t.trace->intervention_step.value_or(0);
        for (std::size_t i = 0; i < t.trace->layers.size(); ++i) {
            const auto& series = t.trace->steps[i];
            for (std::size_t step = 0; step < series.size(); ++step) {
                char value[32];
                std::snprintf(value, sizeof value, "%.6g", series[step]);
                out << csv_field(t.instance_id) << ',' << to_string(t.setting) << ',' << t.repeat << ','
                    << t.trace->layers[i] << ',' << step << ',' << static_cast<long>(step) - origin << ',' << value
                    << '\n';
            }
        }
    }
    return out.str();
}

ReportFiles emit_report(const fs::path& dir, const MetricsReport& r, const std::vector<Transcript>& transcripts,
                        bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir) && !force)
        throw IoError("report directory " + dir.string() + " already exists; pass --force to overwrite");
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    ReportFiles files;
    auto put = [&](const char* name, const std::string& contents) {
        write_file(dir / name, contents);
        files.written.push_back(dir / name);
    };
    put("per_source.csv", per_source_csv(r));
    put("table.md", table_markdown(r));
    put("retention_curve.csv", retention_csv(r));
    if (!r.variants.empty() || r.variants_average) put("prompt_variants.csv", variants_csv(r));
    if (!r.detection_overall.empty()) put("detection.csv", detection_csv(r));
    const std::string attention = attention_csv(transcripts);
    if (!attention.empty()) {
        put("attention_trajectory.csv", attention);
    } else {
        fs::remove(dir / "attention_trajectory.csv", ec);
    }
    put("summary.json", to_json(r).dump(2) + "\n");
    return files;
}

// -- run directory ----------------------------------------------------------

fs::path resolve_run_dir(const fs::path& runs_dir, const std::string& ref) {
    const fs::path direct = ref;
    if (fs::is_directory(direct) && fs::exists(direct / "transcripts.jsonl")) return direct;
    const fs::path under = runs_dir / ref;
    if (fs::is_directory(under)) return under;
    throw ConfigError("no run '" + ref + "' (looked in " + direct.string() + " and " + under.string() + ")");
}

std::string new_run_id() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%SZ", &tm);
    std::random_device rd;
    char suffix[8];
    std::snprintf(suffix, sizeof suffix, "%04x", rd() & 0xffffu);
    return std::string(stamp) + "-" + suffix;
}

json resolved_config_json(const RunConfig& c) {
    json j = c.raw;
    auto abs = [](const fs::path& p) { return fs::absolute(p).lexically_normal().string(); };
    j["run_id"] = c.run_id;
    j["runs_dir"] = abs(c.runs_dir);
    j["manifest"] = abs(c.manifest);
    j["template"] = abs(c.template_path);
    if (c.prompts_path) j["prompts"] = abs(*c.prompts_path);
    if (c.stage1_cache) j["stage1_cache"] = abs(*c.stage1_cache);
    j["plan"] = to_json(c.plan);
    j["endpoint"] = to_json(c.endpoint);
    if (j.contains("judge") && j["judge"].is_object()) {
        for (const char* key : {"prompts_dir", "adjudication"}) {
            if (!j["judge"].contains(key)) continue;
            fs::path p = j["judge"][key].get<std::string>();
            j["judge"][key] = abs(p.is_relative() ? c.base_dir / p : p);
        }
        if (j["judge"].contains("endpoint")) j["judge"]["endpoint"] = to_json(endpoint_from_json(j["judge"]["endpoint"]));
    }
    return j;
}

}  // namespace swapprobe
