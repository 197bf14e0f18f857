// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "support.hpp"
#include "swapprobe/judge.hpp"
#include "swapprobe/metrics.hpp"
#include "swapprobe/pairverify.hpp"
#include "swapprobe/protocol.hpp"
#include "swapprobe/synthetic.hpp"

using namespace swapprobe;
using support::MockModel;
using support::TempDir;

namespace {

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void expect(bool ok, const std::string& what) {
        if (!ok) {
            pass = false;
            detail << what << "; ";
        }
    }
};

int failures = 0;

void criterion(const std::string& name, double budget_s, const std::function<void(Outcome&)>& body) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(o);
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail << "exception: " << e.what() << "; ";
    }
    const double elapsed = support::seconds_since(t0);
    if (budget_s > 0 && elapsed >= budget_s) {
        o.pass = false;
        o.detail << "took " << elapsed << " s, budget " << budget_s << " s; ";
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << " (" << elapsed << " s)";
    if (!o.pass) std::cout << ": " << o.detail.str();
    std::cout << std::endl;
}

const Cell* find_cell(const std::map<CellKey, Cell>& cells, Setting s, double retention = 1.0, int variant = 0) {
    for (const auto& [k, c] : cells) {
        if (k.setting != s) continue;
        if (s == Setting::Probe && (k.retention != retention || k.variant != variant)) continue;
        return &c;
    }
    return nullptr;
}

struct Pipeline {
    std::vector<Transcript> transcripts;
    std::vector<Verdict> verdicts;
    MetricsReport report;
};

Pipeline run_pipeline(const Manifest& m, mock::Options opts, RunPlan plan) {
    MockModel model(std::move(opts));
    const Engine engine(m, support::synthetic_template(), PromptLibrary::defaults(), model.client(), InferenceParams{},
                        std::move(plan));
    Pipeline p;
    p.transcripts = engine.run();
    p.verdicts = judge_transcripts(m, p.transcripts, {});
    p.report = aggregate(m, p.transcripts, p.verdicts, PromptLibrary::defaults().natural_triggers);
    return p;
}

std::size_t failed_count(const std::vector<Transcript>& ts) {
    return static_cast<std::size_t>(std::count_if(ts.begin(), ts.end(), [](const auto& t) { return t.failed; }));
}

Verdict judged(const std::string& id, Setting s, CorrectVs c) {
    Verdict v;
    v.instance_id = id;
    v.setting = s;
    v.transcript_key = id + "|" + std::string(to_string(s));
    if (s == Setting::Probe) {
        v.retention = 1.0;
        v.prompt_variant_id = 0;
    }
    v.correct_vs = c;
    return v;
}

Image with_noise(const Image& src, double sigma, std::uint64_t seed) {
    Image out = src;
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& v : out.rgb) v = static_cast<std::uint8_t>(std::clamp(v + noise(rng), 0.0, 255.0));
    return out;
}

}  // namespace

int main() {
    std::cout.precision(3);
    TempDir dir;
    const Manifest manifest = synthetic::write_manifest(dir / "bench", {.instances = 40});

    criterion("golden sequences for two marker sets, probe left open", 1.0, [](Outcome& o) {
        const std::string q = "What is the value of the marked bar?";
        const std::string ra = "The bar reaches 42. The answer is 42.";
        const auto lib = PromptLibrary::defaults();
        for (const auto& [family, tmpl] : {std::pair{std::string("synthetic"), support::synthetic_template()},
                                           std::pair{std::string("qwen2vl"), support::qwen_template()}}) {
            const auto& m = tmpl.markers;
            auto golden = [&](const std::string& kind) {
                return read_text_file(support::source_path("tests/golden/" + family + "_" + kind + ".txt"));
            };
            const auto probe = render_probe(m, "b.png", q, ra, lib.reflection_default);
            o.expect(flatten(render_standard(m, "a.png", q), m) == golden("standard"), family + " standard");
            o.expect(flatten(probe, m) == golden("probe"), family + " probe");
            o.expect(flatten(render_multi_turn(m, "b.png", q, ra, lib.user_instruction), m) == golden("multi_turn"),
                     family + " multi_turn");
            const std::string flat = flatten(probe, m, true);
            const auto start = flat.rfind(m.response_start);
            const auto end = flat.rfind(m.response_end);
            o.expect(probe.continuation && start != std::string::npos && (end == std::string::npos || end < start),
                     family + " probe closes the assistant turn");
        }
    });

    criterion("faithful mock: base = probe = multi-turn = 100%, delta 0", 30.0, [&](Outcome& o) {
        RunPlan plan;
        plan.settings = {Setting::StandardOnA, Setting::StandardOnB, Setting::Probe, Setting::MultiTurn};
        const auto p = run_pipeline(manifest, support::mock_options(mock::Behavior::LabelPixel), plan);
        o.expect(p.transcripts.size() == 40 * 4, "transcript count");
        o.expect(failed_count(p.transcripts) == 0, "failed transcripts");
        const auto& avg = p.report.average;
        const Cell* base = find_cell(avg, Setting::StandardOnB);
        const Cell* probe = find_cell(avg, Setting::Probe);
        const Cell* multi = find_cell(avg, Setting::MultiTurn);
        if (!base || !probe || !multi) return o.expect(false, "missing cells");
        o.expect(base->accuracy == 100.0, "base " + format_fixed(base->accuracy));
        o.expect(probe->accuracy == 100.0, "probe " + format_fixed(probe->accuracy));
        o.expect(multi->accuracy == 100.0, "multi " + format_fixed(multi->accuracy));
        o.expect(probe->delta == 0.0 && multi->delta == 0.0, "delta");
    });

    criterion("anchored mock: probe 0% at retention 1.0, equal to base at 0.0", 30.0, [&](Outcome& o) {
        RunPlan plan;
        plan.settings = {Setting::StandardOnA, Setting::StandardOnB, Setting::Probe};
        plan.retention_fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
        const auto p = run_pipeline(manifest, support::mock_options(mock::Behavior::Anchored), plan);
        o.expect(failed_count(p.transcripts) == 0, "failed transcripts");
        const auto& avg = p.report.average;
        const Cell* base = find_cell(avg, Setting::StandardOnB);
        const Cell* full = find_cell(avg, Setting::Probe, 1.0);
        const Cell* none = find_cell(avg, Setting::Probe, 0.0);
        if (!base || !full || !none) return o.expect(false, "missing cells");
        o.expect(full->accuracy == 0.0, "retention 1.0 gives " + format_fixed(full->accuracy));
        o.expect(none->accuracy == base->accuracy, "retention 0.0 gives " + format_fixed(none->accuracy));
        double prev = 101.0;
        for (double r : plan.retention_fractions) {
            const Cell* c = find_cell(avg, Setting::Probe, r);
            o.expect(c && c->accuracy <= prev, "not monotone at " + std::to_string(r));
            if (c) prev = c->accuracy;
        }
    });

    criterion("delta, stratification and detection arithmetic on reference values", 1.0, [](Outcome& o) {
        // base, probe, delta per model on the average column
        const double table2[][3] = {{82.5, 55.0, 27.5}, {88.8, 34.1, 54.6}, {79.9, 19.6, 60.3}};
        for (const auto& row : table2) {
            const double d = compute_delta(row[0], row[1]);
            o.expect(std::abs(d - row[2]) <= 0.1 + 1e-9, "delta " + format_fixed(d) + " vs " + format_fixed(row[2]));
        }

        // correct on A: total, stays correct, flips; wrong on A: total, recovers, same error, new error
        const std::size_t table11[][7] = {{540, 298, 242, 260, 75, 95, 90},
                                          {606, 232, 374, 194, 61, 98, 35},
                                          {662, 444, 218, 138, 46, 48, 44},
                                          {675, 228, 447, 125, 45, 72, 8}};
        for (const auto& row : table11) {
            std::vector<Verdict> vs;
            std::size_t n = 0;
            auto add = [&](bool a_correct, CorrectVs probe, std::optional<ErrorClass> err) {
                const std::string id = "i" + std::to_string(n++);
                vs.push_back(judged(id, Setting::StandardOnA, a_correct ? CorrectVs::AnswerA : CorrectVs::Neither));
                vs.push_back(judged(id, Setting::Probe, probe));
                vs.back().error_class = err;
            };
            for (std::size_t i = 0; i < row[1]; ++i) add(true, CorrectVs::AnswerB, std::nullopt);
            for (std::size_t i = 0; i < row[2]; ++i) add(true, CorrectVs::AnswerA, std::nullopt);
            for (std::size_t i = 0; i < row[4]; ++i) add(false, CorrectVs::AnswerB, std::nullopt);
            for (std::size_t i = 0; i < row[5]; ++i) add(false, CorrectVs::Neither, ErrorClass::SameAsStage1);
            for (std::size_t i = 0; i < row[6]; ++i) add(false, CorrectVs::Neither, ErrorClass::NewError);
            const auto s = stratify(vs);
            s.check();
            const std::string tag = std::to_string(row[0]) + "/" + std::to_string(row[3]);
            o.expect(s.correct_on_a_total == row[0] && s.correct_after_swap == row[1] &&
                         s.incorrect_after_swap == row[2],
                     "correct-on-A partition " + tag);
            o.expect(s.incorrect_on_a_total == row[3] && s.correct_after_swap_2 == row[4] &&
                         s.same_error == row[5] && s.new_error == row[6],
                     "incorrect-on-A partition " + tag);
        }

        // detection rates for the probe and multi-turn flows on an unrelated image
        const double table12[][2] = {{69.4, 89.0}, {53.1, 91.6}, {70.4, 96.8}, {35.6, 98.3}};
        for (const auto& row : table12) {
            for (int col = 0; col < 2; ++col) {
                const int detected = static_cast<int>(std::lround(row[col] * 10));
                std::vector<Verdict> vs;
                for (int i = 0; i < 1000 + 37; ++i) {
                    Verdict v = judged("d" + std::to_string(i), Setting::DistinctProbe, CorrectVs::Neither);
                    if (i < 1000)
                        v.detected_change = i < detected;
                    else
                        v.abstained = true;
                    vs.push_back(v);
                }
                const double rate = detection_rate(vs);
                o.expect(format_fixed(rate) == format_fixed(row[col]), "detection " + format_fixed(rate));
            }
        }
    });

    criterion("ten prompt variants with the anchored mock have zero spread", 30.0, [&](Outcome& o) {
        RunPlan plan;
        plan.settings = {Setting::StandardOnA, Setting::StandardOnB, Setting::Probe};
        plan.prompt_variant_ids = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
        const auto p = run_pipeline(manifest, support::mock_options(mock::Behavior::Anchored), plan);
        o.expect(failed_count(p.transcripts) == 0, "failed transcripts");
        if (!p.report.variants_average) return o.expect(false, "no variant statistics");
        const auto& v = *p.report.variants_average;
        o.expect(v.n == 10, "variant count " + std::to_string(v.n));
        o.expect(v.std == 0.0, "std " + format_fixed(v.std, 4));
        for (const auto& [source, ms] : p.report.variants)
            o.expect(ms.n == 10 && ms.std == 0.0, std::string(to_string(source)) + " spread");
    });

    criterion("ssim identity, symmetry and monotonicity over 20 images", 0, [](Outcome& o) {
        std::vector<Image> corpus;
        for (int i = 0; i < 20; ++i)
            corpus.push_back(synthetic::make_label_image(std::to_string(10 + 7 * i), static_cast<std::uint64_t>(i)));
        const double sigmas[] = {2.0, 6.0, 12.0, 24.0, 48.0};
        double prev_mean = 2.0;
        for (int level = 0; level < 5; ++level) {
            double sum = 0.0;
            for (std::size_t i = 0; i < corpus.size(); ++i) {
                const Image& a = corpus[i];
                const Image b = with_noise(a, sigmas[level], 1000 * level + i);
                if (level == 0) o.expect(std::abs(ssim(a, a) - 1.0) <= 1e-9, "self " + std::to_string(i));
                const double ab = ssim(a, b);
                o.expect(std::abs(ab - ssim(b, a)) <= 1e-12, "symmetry " + std::to_string(i));
                sum += ab;
            }
            const double mean = sum / static_cast<double>(corpus.size());
            o.expect(mean < prev_mean, "mean at level " + std::to_string(level) + " not below previous");
            prev_mean = mean;
        }
    });

    criterion("natural trigger splits at recorded offsets, flagged fallback otherwise", 30.0, [&](Outcome& o) {
        struct Case {
            std::string text;
            std::optional<std::size_t> offset;
        };
        const std::vector<Case> fixture = {
            {"The bar is tall. Wait, the label says 12. The answer is 12.", 17},
            {"Reading the axis gives roughly 30; let me check the gridline. It is 30.", 35},
            {"Two bars are marked. I should double-check which one is red. The answer is 5.", 30},
            {"The total looks like 18. Re-examine: 9 plus 9 is 18.", 25},
            {"At first it reads 7, but I will look at the image again to be sure. The answer is 7.", 32},
            {"The marked value is 44 and nothing else applies. The answer is 44.", std::nullopt},
            {"Summing the stacked segments gives 21. The answer is 21.", std::nullopt},
            {"Waiting room capacity is not the question; the bar shows 3. The answer is 3.", std::nullopt},
        };
        std::map<std::string, std::size_t> by_label;
        for (const auto& inst : manifest.instances)
            if (!by_label.count(inst.answer_a)) by_label[inst.answer_a] = by_label.size() % fixture.size();

        auto opts = support::mock_options(mock::Behavior::LabelPixel);
        opts.stage1_text = [&](const std::string& label) { return fixture.at(by_label.at(label)).text; };
        RunPlan plan;
        plan.settings = {Setting::StandardOnA, Setting::NaturalProbe};
        const auto p = run_pipeline(manifest, opts, plan);

        std::size_t split = 0, fallback = 0;
        for (const auto& t : p.transcripts) {
            if (t.setting != Setting::NaturalProbe) continue;
            const ProbeInstance& inst =
                *std::find_if(manifest.instances.begin(), manifest.instances.end(),
                              [&](const auto& i) { return i.id == t.instance_id; });
            const Case& c = fixture.at(by_label.at(inst.answer_a));
            if (c.offset) {
                const bool ok = !t.natural_fallback && t.swap_point == c.offset &&
                                t.context == c.text.substr(0, *c.offset) && !t.failed;
                o.expect(ok, "split for " + t.instance_id);
                split += ok;
            } else {
                const bool ok = t.natural_fallback && !t.swap_point && !t.failed;
                o.expect(ok, "fallback for " + t.instance_id);
                fallback += ok;
            }
        }
        o.expect(split > 0 && fallback > 0, "fixture did not cover both paths");
    });

    return failures == 0 ? 0 : 1;
}
