#include "swapprobe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>

#include "swapprobe/errors.hpp"

namespace swapprobe {

using json = nlohmann::json;

double compute_delta(double acc_base, double acc_probe) {
    for (double v : {acc_base, acc_probe})
        if (!(v >= 0.0 && v <= 100.0)) throw Error("accuracy outside [0, 100]: " + std::to_string(v));
    return acc_base - acc_probe;
}

double round_half_up(double x, int decimals) {
    const double scale = std::pow(10.0, decimals);
    const double v = std::fabs(x) * scale;
    // 27.45 * 10 is 274.49999999999997 in binary; treat it as the half it denotes.
    const double r = std::floor(v + 0.5 + 1e-9 * std::max(1.0, v)) / scale;
    return std::copysign(r, x) + 0.0;
}

std::string format_fixed(double x, int decimals) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, round_half_up(x, decimals));
    std::string s = buf;
    if (s.rfind("-0", 0) == 0 && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
    return s;
}

double percent(std::size_t num, std::size_t den) {
    if (den == 0) throw EmptyDenominator("rate over an empty set");
    return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

// -- stratified -------------------------------------------------------------

void StratifiedCounts::check() const {
    if (correct_after_swap + incorrect_after_swap != correct_on_a_total)
        throw Error("stratified counts: correct-on-a partition does not sum to its total");
    if (correct_after_swap_2 + same_error + new_error + abstained != incorrect_on_a_total)
        throw Error("stratified counts: incorrect-on-a partition does not sum to its total");
}

json to_json(const StratifiedCounts& s) {
    return {{"correct_on_a_total", s.correct_on_a_total},
            {"correct_after_swap", s.correct_after_swap},
            {"incorrect_after_swap", s.incorrect_after_swap},
            {"incorrect_on_a_total", s.incorrect_on_a_total},
            {"correct_after_swap_2", s.correct_after_swap_2},
            {"same_error", s.same_error},
            {"new_error", s.new_error},
            {"abstained", s.abstained}};
}

StratifiedCounts stratify(const std::vector<Verdict>& verdicts, Setting setting, std::vector<std::string>* warnings) {
    using Key = std::pair<std::string, int>;
    std::map<Key, const Verdict*> stage1, stage2;
    for (const auto& v : verdicts) {
        if (v.setting == Setting::StandardOnA) {
            stage1[{v.instance_id, v.repeat}] = &v;
        } else if (v.setting == setting) {
            if (setting == Setting::Probe && (v.retention.value_or(1.0) != 1.0 || v.prompt_variant_id.value_or(0) != 0))
                continue;
            stage2[{v.instance_id, v.repeat}] = &v;
        }
    }
    auto missing = [&](const Key& k, const char* what) {
        if (warnings)
            warnings->push_back("stratify: instance " + k.first + " (repeat " + std::to_string(k.second) +
                                ") has no " + what + " verdict; skipped");
    };
    StratifiedCounts s;
    for (const auto& [k, first] : stage1) {
        const auto it = stage2.find(k);
        if (it == stage2.end()) {
            missing(k, to_string(setting).data());
            continue;
        }
        const Verdict& second = *it->second;
        if (first->correct()) {
            ++s.correct_on_a_total;
            ++(second.correct() ? s.correct_after_swap : s.incorrect_after_swap);
        } else {
            ++s.incorrect_on_a_total;
            if (second.correct())
                ++s.correct_after_swap_2;
            else if (!second.error_class)
                ++s.abstained;
            else if (*second.error_class == ErrorClass::SameAsStage1)
                ++s.same_error;
            else
                ++s.new_error;
        }
    }
    for (const auto& [k, _] : stage2)
        if (!stage1.count(k)) missing(k, "standard_on_a");
    s.check();
    return s;
}

// -- simple statistics ------------------------------------------------------

MeanStd mean_std(const std::vector<double>& values) {
    MeanStd m;
    m.n = values.size();
    if (values.empty()) return m;
    m.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(m.n);
    if (m.n < 2) return m;
    double ss = 0.0;
    for (double v : values) ss += (v - m.mean) * (v - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(m.n - 1));
    return m;
}

MeanStd variant_stats(const std::vector<double>& accuracies) {
    if (accuracies.size() < 2)
        throw InsufficientVariants("variant statistics need at least 2 variants, got " +
                                   std::to_string(accuracies.size()));
    return mean_std(accuracies);
}

double detection_rate(const std::vector<Verdict>& verdicts) {
    std::size_t detected = 0, judged = 0;
    for (const auto& v : verdicts) {
        if (!v.detected_change) continue;
        ++judged;
        if (*v.detected_change) ++detected;
    }
    return percent(detected, judged);
}

double trigger_frequency(const std::vector<std::string>& texts, const TriggerLexicon& lexicon) {
    if (lexicon.empty()) throw PatternError("trigger pattern list is empty");
    const auto hits = std::count_if(texts.begin(), texts.end(),
                                    [&](const std::string& t) { return lexicon.first_match(t).has_value(); });
    return percent(static_cast<std::size_t>(hits), texts.size());
}

WindowStats window_stats(const std::vector<double>& series, std::size_t intervention, std::size_t window,
                         bool strict) {
    if (window == 0) throw EmptyWindow("window must be > 0");
    if (intervention > series.size()) throw EmptyWindow("intervention step beyond the trace");
    WindowStats w;
    const std::size_t lo = intervention >= window ? intervention - window : 0;
    const std::size_t hi = std::min(series.size(), intervention + window);
    w.before_n = intervention - lo;
    w.after_n = hi - intervention;
    w.short_before = w.before_n < window;
    w.short_after = w.after_n < window;
    if (w.before_n == 0 || w.after_n == 0)
        throw EmptyWindow("no steps on the " + std::string(w.before_n == 0 ? "before" : "after") +
                          " side of the intervention");
    if (strict && (w.short_before || w.short_after))
        throw EmptyWindow("window of " + std::to_string(window) + " steps not available on both sides");
    w.before = std::accumulate(series.begin() + static_cast<std::ptrdiff_t>(lo),
                               series.begin() + static_cast<std::ptrdiff_t>(intervention), 0.0) /
               static_cast<double>(w.before_n);
    w.after = std::accumulate(series.begin() + static_cast<std::ptrdiff_t>(intervention),
                              series.begin() + static_cast<std::ptrdiff_t>(hi), 0.0) /
              static_cast<double>(w.after_n);
    w.delta = w.after - w.before;
    return w;
}

// -- aggregation ------------------------------------------------------------

namespace {

CellKey make_key(Setting s, const std::optional<double>& retention, const std::optional<int>& variant) {
    if (s != Setting::Probe) return {s, -1.0, -1};
    return {s, retention.value_or(1.0), variant.value_or(0)};
}

bool is_distinct(Setting s) { return s == Setting::DistinctProbe || s == Setting::DistinctMultiTurn; }

void finish_detection(DetectionCell& d) {
    if (d.detected + d.not_detected > 0) d.rate = percent(d.detected, d.detected + d.not_detected);
}

}  // namespace

CellKey cell_key(const Verdict& v) { return make_key(v.setting, v.retention, v.prompt_variant_id); }
CellKey cell_key(const Transcript& t) { return make_key(t.setting, t.retention, t.prompt_variant_id); }

MetricsReport aggregate(const Manifest& manifest, const std::vector<Transcript>& transcripts,
                        const std::vector<Verdict>& verdicts, const TriggerLexicon& lexicon,
                        std::size_t attention_window) {
    MetricsReport r;
    std::map<std::string, Source> source_of;
    for (const auto& inst : manifest.instances) source_of[inst.id] = inst.source;
    auto src = [&](const std::string& id) {
        const auto it = source_of.find(id);
        if (it == source_of.end()) throw IntegrityError({id}, "unknown instance '" + id + "'");
        return it->second;
    };

    std::map<Source, std::map<CellKey, std::map<int, std::pair<std::size_t, std::size_t>>>> counts;
    for (const auto& v : verdicts) {
        const Source s = src(v.instance_id);
        if (v.abstained) ++r.abstentions;
        if (is_distinct(v.setting)) {
            auto& d = r.detection[s][v.setting];
            if (!v.detected_change)
                ++d.abstained;
            else
                ++(*v.detected_change ? d.detected : d.not_detected);
            continue;
        }
        auto& c = counts[s][cell_key(v)][v.repeat];
        ++c.second;
        if (v.correct()) ++c.first;
    }
    for (const auto& t : transcripts) {
        if (!t.failed) continue;
        ++r.failed_transcripts;
        if (!is_distinct(t.setting)) ++r.cells[src(t.instance_id)][cell_key(t)].failed;
    }

    std::set<Source> present;
    for (const auto& [_, s] : source_of) present.insert(s);
    for (Source s : kBenchSources)
        if (present.count(s)) r.sources.push_back(s);
    if (present.count(Source::Custom)) r.sources.push_back(Source::Custom);

    for (auto& [s, by_key] : counts) {
        for (auto& [key, by_repeat] : by_key) {
            Cell& cell = r.cells[s][key];
            for (const auto& [rep, c] : by_repeat) {
                cell.correct += c.first;
                cell.n += c.second;
                cell.per_repeat.push_back(percent(c.first, c.second));
            }
            const auto ms = mean_std(cell.per_repeat);
            cell.accuracy = ms.mean;
            if (ms.n >= 2) cell.repeat_std = ms.std;
        }
    }
    const CellKey base_key{Setting::StandardOnB, -1.0, -1};
    for (auto& [s, by_key] : r.cells) {
        const auto base = by_key.find(base_key);
        for (auto& [key, cell] : by_key) {
            if (!scored_against_b(key.setting) || key.setting == Setting::StandardOnB) continue;
            if (base == by_key.end() || base->second.n == 0 || cell.n == 0) continue;
            cell.acc_base = base->second.accuracy;
            cell.delta = compute_delta(*cell.acc_base, cell.accuracy);
        }
    }

    // Source-weighted averages.
    std::map<CellKey, std::vector<const Cell*>> by_key;
    for (const auto& [s, cells] : r.cells)
        for (const auto& [key, cell] : cells)
            if (cell.n > 0) by_key[key].push_back(&cell);
    for (const auto& [key, cells] : by_key) {
        Cell avg;
        std::vector<double> accs, bases;
        for (const Cell* c : cells) {
            accs.push_back(c->accuracy);
            avg.n += c->n;
            avg.correct += c->correct;
            avg.failed += c->failed;
            if (c->acc_base) bases.push_back(*c->acc_base);
        }
        avg.accuracy = mean_std(accs).mean;
        if (!bases.empty() && bases.size() == cells.size()) {
            avg.acc_base = mean_std(bases).mean;
            avg.delta = compute_delta(*avg.acc_base, avg.accuracy);
        }
        r.average[key] = avg;
    }

    for (auto& [s, by_setting] : r.detection) {
        for (auto& [setting, d] : by_setting) {
            finish_detection(d);
            auto& o = r.detection_overall[setting];
            o.detected += d.detected;
            o.not_detected += d.not_detected;
            o.abstained += d.abstained;
        }
    }
    for (auto& [_, d] : r.detection_overall) finish_detection(d);

    // Trigger frequency over Stage-1 reasoning.
    if (!lexicon.empty()) {
        std::map<Source, std::vector<std::string>> texts;
        std::vector<std::string> all;
        for (const auto& t : transcripts) {
            if (t.setting != Setting::StandardOnA || t.failed || !t.r_a) continue;
            texts[src(t.instance_id)].push_back(*t.r_a);
            all.push_back(*t.r_a);
        }
        for (const auto& [s, ts] : texts) r.trigger_frequency[s] = trigger_frequency(ts, lexicon);
        if (!all.empty()) r.trigger_frequency_overall = trigger_frequency(all, lexicon);
    }

    // Paraphrase spread at full retention; the default prompt is not one of the variants.
    auto variant_accs = [](const std::map<CellKey, Cell>& cells) {
        std::vector<double> accs;
        for (const auto& [key, cell] : cells)
            if (key.setting == Setting::Probe && key.retention == 1.0 && key.variant >= 1 && cell.n > 0)
                accs.push_back(cell.accuracy);
        return accs;
    };
    for (const auto& [s, cells] : r.cells)
        if (auto accs = variant_accs(cells); accs.size() >= 2) r.variants[s] = variant_stats(accs);
    if (auto accs = variant_accs(r.average); accs.size() >= 2) r.variants_average = variant_stats(accs);

    // Stratified outcomes.
    const bool has_probe = std::any_of(verdicts.begin(), verdicts.end(),
                                       [](const Verdict& v) { return v.setting == Setting::Probe; });
    if (has_probe) {
        std::map<Source, std::vector<Verdict>> per_source;
        for (const auto& v : verdicts) per_source[src(v.instance_id)].push_back(v);
        for (const auto& [s, vs] : per_source) r.stratified[s] = stratify(vs, Setting::Probe);
        r.stratified_overall = stratify(verdicts, Setting::Probe, &r.warnings);
    }

    // Attention windows around the intervention.
    std::map<int, LayerAttention> layers;
    for (const auto& t : transcripts) {
        if (!t.trace || !t.trace->intervention_step) continue;
        for (std::size_t i = 0; i < t.trace->layers.size(); ++i) {
            auto& la = layers[t.trace->layers[i]];
            la.layer = t.trace->layers[i];
            try {
                const auto w = window_stats(t.trace->steps[i], static_cast<std::size_t>(*t.trace->intervention_step),
                                            attention_window);
                la.stats.before += w.before;
                la.stats.after += w.after;
                ++la.traces;
                if (w.short_before || w.short_after) ++la.short_windows;
            } catch (const EmptyWindow& e) {
                r.warnings.push_back("attention trace of " + t.key() + ": " + e.what());
            }
        }
    }
    for (auto& [_, la] : layers) {
        if (la.traces == 0) continue;
        la.stats.before /= static_cast<double>(la.traces);
        la.stats.after /= static_cast<double>(la.traces);
        la.stats.delta = la.stats.after - la.stats.before;
        r.attention.push_back(la);
    }
    return r;
}

namespace {

json cell_json(const CellKey& key, const Cell& c) {
    json j = {{"setting", to_string(key.setting)},
              {"n", c.n},
              {"correct", c.correct},
              {"failed", c.failed},
              {"accuracy", c.accuracy},
              {"per_repeat", c.per_repeat}};
    if (key.retention >= 0) j["retention"] = key.retention;
    if (key.variant >= 0) j["prompt_variant_id"] = key.variant;
    if (c.repeat_std) j["repeat_std"] = *c.repeat_std;
    if (c.acc_base) j["acc_base"] = *c.acc_base;
    if (c.delta) j["delta"] = *c.delta;
    return j;
}

json detection_json(const DetectionCell& d) {
    json j = {{"detected", d.detected}, {"not_detected", d.not_detected}, {"abstained", d.abstained}};
    j["rate"] = d.rate ? json(*d.rate) : json(nullptr);
    return j;
}

json mean_std_json(const MeanStd& m) { return {{"mean", m.mean}, {"std", m.std}, {"n", m.n}}; }

}  // namespace

json to_json(const MetricsReport& r) {
    json j;
    j["sources"] = json::array();
    for (Source s : r.sources) j["sources"].push_back(to_string(s));
    json cells = json::object();
    for (const auto& [s, by_key] : r.cells) {
        json rows = json::array();
        for (const auto& [key, c] : by_key) rows.push_back(cell_json(key, c));
        cells[std::string(to_string(s))] = rows;
    }
    json avg = json::array();
    for (const auto& [key, c] : r.average) avg.push_back(cell_json(key, c));
    cells["Avg"] = avg;
    j["cells"] = cells;

    json det = json::object();
    for (const auto& [s, by_setting] : r.detection)
        for (const auto& [setting, d] : by_setting) det[std::string(to_string(s))][std::string(to_string(setting))] = detection_json(d);
    for (const auto& [setting, d] : r.detection_overall) det["Overall"][std::string(to_string(setting))] = detection_json(d);
    j["detection"] = det;

    json trig = json::object();
    for (const auto& [s, f] : r.trigger_frequency) trig[std::string(to_string(s))] = f;
    if (r.trigger_frequency_overall) trig["Overall"] = *r.trigger_frequency_overall;
    j["trigger_frequency"] = trig;

    json var = json::object();
    for (const auto& [s, m] : r.variants) var[std::string(to_string(s))] = mean_std_json(m);
    if (r.variants_average) var["Avg"] = mean_std_json(*r.variants_average);
    j["prompt_variants"] = var;

    json strat = json::object();
    for (const auto& [s, c] : r.stratified) strat[std::string(to_string(s))] = to_json(c);
    strat["Overall"] = to_json(r.stratified_overall);
    j["stratified"] = strat;

    json att = json::array();
    for (const auto& la : r.attention)
        att.push_back({{"layer", la.layer},
                       {"before", la.stats.before},
                       {"after", la.stats.after},
                       {"delta", la.stats.delta},
                       {"traces", la.traces},
                       {"short_windows", la.short_windows}});
    j["attention"] = att;
    j["failed_transcripts"] = r.failed_transcripts;
    j["abstentions"] = r.abstentions;
    j["warnings"] = r.warnings;
    return j;
}

}  // namespace swapprobe
