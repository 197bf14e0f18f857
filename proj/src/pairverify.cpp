#include "swapprobe/pairverify.hpp"

#include <atomic>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "swapprobe/sidecar.hpp"

namespace swapprobe {

double ssim(const Image& a, const Image& b, const SsimParams<double>& params) {
    if (a.width != b.width || a.height != b.height)
        throw DimensionMismatch("ssim: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                                std::to_string(b.width) + "x" + std::to_string(b.height));
    return ssim(luma<double>(a), luma<double>(b), params);
}

namespace {

PairSimilarity measure(const Manifest& manifest, const ProbeInstance& inst, const SidecarClient* sidecar,
                       std::atomic<bool>& sidecar_ok, std::mutex& warn_mu, std::vector<std::string>& warnings) {
    PairSimilarity p;
    p.id = inst.id;
    p.source = inst.source;
    const std::string path_a = manifest.resolve(inst.image_a);
    const std::string path_b = manifest.resolve(inst.image_b);
    const Image a = load_image(path_a);
    const Image b = load_image(path_b);
    if (a.width != b.width || a.height != b.height)
        throw DimensionMismatch("pair " + inst.id + ": image_a is " + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + ", image_b is " + std::to_string(b.width) + "x" +
                                std::to_string(b.height));
    p.ssim = ssim(a, b);
    if (sidecar && sidecar_ok.load()) {
        try {
            p.clip = sidecar->similarity(EmbeddingMetric::Clip, path_a, path_b);
            p.lpips = sidecar->similarity(EmbeddingMetric::Lpips, path_a, path_b);
        } catch (const SidecarUnavailable& e) {
            if (sidecar_ok.exchange(false)) {
                std::lock_guard lock(warn_mu);
                warnings.push_back(std::string("sidecar unavailable, reporting SSIM only: ") + e.what());
            }
            p.clip.reset();
            p.lpips.reset();
        }
    }
    return p;
}

void accumulate(SimilarityMeans& m, const PairSimilarity& p) {
    m.ssim += p.ssim;
    if (p.clip) m.clip = m.clip.value_or(0.0) + *p.clip;
    if (p.lpips) m.lpips = m.lpips.value_or(0.0) + *p.lpips;
    ++m.n;
}

void finish(SimilarityMeans& m) {
    if (m.n == 0) return;
    const double n = static_cast<double>(m.n);
    m.ssim /= n;
    if (m.clip) *m.clip /= n;
    if (m.lpips) *m.lpips /= n;
}

bool within(const SimilarityMeans& m, const Thresholds& t) {
    if (m.ssim < t.ssim_min) return false;
    if (m.clip && *m.clip < t.clip_min) return false;
    if (m.lpips && *m.lpips > t.lpips_max) return false;
    return true;
}

}  // namespace

SimilarityReport verify_manifest(const Manifest& manifest, const Thresholds& thresholds,
                                 const SidecarClient* sidecar, int workers) {
    SimilarityReport report;
    const std::size_t n = manifest.instances.size();
    report.pairs.resize(n);
    std::atomic<bool> sidecar_ok{sidecar != nullptr};
    if (sidecar && !sidecar->healthy()) {
        sidecar_ok = false;
        report.warnings.push_back("sidecar at " + sidecar->base_url() + " unavailable, reporting SSIM only");
    }

    std::mutex mu;
    std::vector<std::string> mismatched;
    std::exception_ptr failure;
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                report.pairs[i] = measure(manifest, manifest.instances[i], sidecar, sidecar_ok, mu, report.warnings);
            } catch (const DimensionMismatch&) {
                std::lock_guard lock(mu);
                mismatched.push_back(manifest.instances[i].id);
            } catch (...) {
                std::lock_guard lock(mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
    const std::size_t count = std::min<std::size_t>(workers > 0 ? static_cast<std::size_t>(workers) : hw, std::max<std::size_t>(n, 1));
    {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < count; ++i) pool.emplace_back(work);
    }
    if (failure) std::rethrow_exception(failure);
    if (!mismatched.empty()) {
        std::sort(mismatched.begin(), mismatched.end());
        std::string ids;
        for (const auto& id : mismatched) ids += (ids.empty() ? "" : ", ") + id;
        throw DimensionMismatch("pairs with mismatched dimensions: " + ids);
    }

    if (!sidecar_ok) {
        for (auto& p : report.pairs) {
            p.clip.reset();
            p.lpips.reset();
        }
    }
    for (const auto& p : report.pairs) {
        accumulate(report.per_source[p.source], p);
        accumulate(report.overall, p);
        SimilarityMeans single;
        accumulate(single, p);
        if (!within(single, thresholds)) report.outliers.push_back(p.id);
    }
    for (auto& [_, m] : report.per_source) finish(m);
    finish(report.overall);
    report.gate_pass = n > 0 && within(report.overall, thresholds);
    return report;
}

std::string similarity_csv(const SimilarityReport& report) {
    std::ostringstream out;
    out << std::fixed << std::setprecision(4);
    auto opt = [&](const std::optional<double>& v) -> std::ostream& {
        if (v) out << *v;
        return out;
    };
    out << "scope,id,source,ssim,clip,lpips\n";
    for (const auto& p : report.pairs) {
        out << "pair," << p.id << ',' << to_string(p.source) << ',' << p.ssim << ',';
        opt(p.clip) << ',';
        opt(p.lpips) << '\n';
    }
    for (const auto& [src, m] : report.per_source) {
        out << "source,," << to_string(src) << ',' << m.ssim << ',';
        opt(m.clip) << ',';
        opt(m.lpips) << '\n';
    }
    out << "overall,,," << report.overall.ssim << ',';
    opt(report.overall.clip) << ',';
    opt(report.overall.lpips) << '\n';
    return out.str();
}

}  // namespace swapprobe
