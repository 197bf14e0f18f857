#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swapprobe/metrics.hpp"
#include "swapprobe/protocol.hpp"

namespace swapprobe {

/// Rows are source x cell; numbers rendered half-up to one decimal.
std::string per_source_csv(const MetricsReport& r);
/// Base / accuracy / delta per source plus the source-weighted average, one row per Stage-2 setting.
std::string table_markdown(const MetricsReport& r);
/// Probe accuracy per retention fraction (default prompt), one row per source plus Avg.
std::string retention_csv(const MetricsReport& r);
std::string variants_csv(const MetricsReport& r);
std::string detection_csv(const MetricsReport& r);
/// Per-step attention for every traced transcript; empty when there are none.
std::string attention_csv(const std::vector<Transcript>& transcripts);

struct ReportFiles {
    std::vector<std::filesystem::path> written;
};

/// Writes the report files into `dir`. Refuses (IoError) to write into an
/// existing non-empty directory unless `force`.
ReportFiles emit_report(const std::filesystem::path& dir, const MetricsReport& r,
                        const std::vector<Transcript>& transcripts, bool force);

// -- run directory ----------------------------------------------------------
//   config.json       the run config with paths made absolute
//   run.json          run metadata (ids, timings, counts)
//   transcripts.jsonl one Transcript per line
//   requests.jsonl    request / response audit log
//   verdicts.jsonl    written by `judge`
//   report/           written by `report`

/// `ref` may be a run directory or a run id under runs_dir.
std::filesystem::path resolve_run_dir(const std::filesystem::path& runs_dir, const std::string& ref);

/// A fresh run id: UTC timestamp plus a short random suffix.
std::string new_run_id();

/// Config JSON with every path field made absolute, so `judge` and `report`
/// work from any directory.
nlohmann::json resolved_config_json(const RunConfig& c);

}  // namespace swapprobe
