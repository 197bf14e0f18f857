#pragma once

#include <compare>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "swapprobe/judge.hpp"
#include "swapprobe/protocol.hpp"

namespace swapprobe {

/// acc_base - acc_probe at full precision. Both must lie in [0, 100].
double compute_delta(double acc_base, double acc_probe);

/// Rounds halves away from zero at `decimals` places. Values within 1e-9
/// (relative) of a half count as the half, so 27.45 rounds to 27.5.
double round_half_up(double x, int decimals = 1);
std::string format_fixed(double x, int decimals = 1);

/// 100 * num / den. Throws EmptyDenominator when den == 0.
double percent(std::size_t num, std::size_t den);

struct StratifiedCounts {
    std::size_t correct_on_a_total = 0;
    std::size_t correct_after_swap = 0;
    std::size_t incorrect_after_swap = 0;
    std::size_t incorrect_on_a_total = 0;
    std::size_t correct_after_swap_2 = 0;
    std::size_t same_error = 0;
    std::size_t new_error = 0;
    std::size_t abstained = 0;

    /// Throws Error unless both partitions sum to their totals.
    void check() const;

    friend bool operator==(const StratifiedCounts&, const StratifiedCounts&) = default;
};

nlohmann::json to_json(const StratifiedCounts& s);

/// Pairs each instance's standard_on_a verdict with its `setting` verdict
/// (retention 1.0, default prompt) per repeat. Instances missing either half
/// are skipped and named in `warnings`.
StratifiedCounts stratify(const std::vector<Verdict>& verdicts, Setting setting = Setting::Probe,
                          std::vector<std::string>* warnings = nullptr);

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // sample (n - 1) standard deviation
    std::size_t n = 0;
};

MeanStd mean_std(const std::vector<double>& values);

/// Mean and sample standard deviation of per-variant accuracies; needs >= 2.
MeanStd variant_stats(const std::vector<double>& accuracies);

/// Percent of detection verdicts that noticed the change; abstentions excluded.
double detection_rate(const std::vector<Verdict>& verdicts);

/// Percent of texts with at least one trigger match.
double trigger_frequency(const std::vector<std::string>& texts, const TriggerLexicon& lexicon);

struct WindowStats {
    double before = 0.0;
    double after = 0.0;
    double delta = 0.0;  // after - before
    std::size_t before_n = 0;
    std::size_t after_n = 0;
    bool short_before = false;
    bool short_after = false;
};

/// Means over [t - window, t) and [t, t + window) of a per-step series.
/// Sides shorter than `window` are averaged over what exists and flagged; an
/// empty side throws EmptyWindow, as does any short side when `strict`.
WindowStats window_stats(const std::vector<double>& series, std::size_t intervention, std::size_t window = 100,
                         bool strict = false);

// -- run aggregation --------------------------------------------------------

struct CellKey {
    Setting setting = Setting::Probe;
    double retention = -1.0;  // only probe cells carry retention / variant
    int variant = -1;

    auto operator<=>(const CellKey&) const = default;
};

CellKey cell_key(const Verdict& v);
CellKey cell_key(const Transcript& t);

struct Cell {
    std::size_t n = 0;  // judged instances, summed over repeats
    std::size_t correct = 0;
    std::size_t failed = 0;
    std::vector<double> per_repeat;  // accuracy of each repeat
    double accuracy = 0.0;           // mean over repeats
    std::optional<double> repeat_std;
    std::optional<double> acc_base;
    std::optional<double> delta;
};

struct DetectionCell {
    std::size_t detected = 0;
    std::size_t not_detected = 0;
    std::size_t abstained = 0;
    std::optional<double> rate;
};

struct LayerAttention {
    int layer = 0;
    WindowStats stats;  // averaged over traced transcripts
    std::size_t traces = 0;
    std::size_t short_windows = 0;
};

struct MetricsReport {
    std::vector<Source> sources;  // present in the run, table order
    std::map<Source, std::map<CellKey, Cell>> cells;
    /// Source-weighted means of per-source accuracies.
    std::map<CellKey, Cell> average;
    std::map<Source, std::map<Setting, DetectionCell>> detection;
    std::map<Setting, DetectionCell> detection_overall;
    std::map<Source, double> trigger_frequency;
    std::optional<double> trigger_frequency_overall;
    std::map<Source, MeanStd> variants;
    std::optional<MeanStd> variants_average;
    std::map<Source, StratifiedCounts> stratified;
    StratifiedCounts stratified_overall;
    std::vector<LayerAttention> attention;
    std::size_t failed_transcripts = 0;
    std::size_t abstentions = 0;
    std::vector<std::string> warnings;
};

MetricsReport aggregate(const Manifest& manifest, const std::vector<Transcript>& transcripts,
                        const std::vector<Verdict>& verdicts, const TriggerLexicon& lexicon,
                        std::size_t attention_window = 100);

nlohmann::json to_json(const MetricsReport& r);

}  // namespace swapprobe
