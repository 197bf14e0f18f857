#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "swapprobe/bench.hpp"
#include "swapprobe/errors.hpp"
#include "swapprobe/image.hpp"

namespace swapprobe {

class SidecarClient;

template <typename Scalar = double>
struct SsimParams {
    int window = 8;
    Scalar k1 = Scalar(0.01);
    Scalar k2 = Scalar(0.03);
    Scalar dynamic_range = Scalar(255);

    Scalar c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
    Scalar c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
};

namespace detail {

/// Zero-padded summed-area table: S(r, c) = sum of x over [0, r) x [0, c).
template <typename Derived>
Eigen::Array<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic> summed_area(
    const Eigen::ArrayBase<Derived>& x) {
    using Scalar = typename Derived::Scalar;
    Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic> s =
        Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>::Zero(x.rows() + 1, x.cols() + 1);
    for (Eigen::Index c = 0; c < x.cols(); ++c)
        for (Eigen::Index r = 0; r < x.rows(); ++r)
            s(r + 1, c + 1) = x(r, c) + s(r, c + 1) + s(r + 1, c) - s(r, c);
    return s;
}

template <typename Scalar>
Scalar box_sum(const Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>& s, Eigen::Index r, Eigen::Index c,
               Eigen::Index w) {
    return s(r + w, c + w) - s(r, c + w) - s(r + w, c) + s(r, c);
}

}  // namespace detail

/// Mean SSIM over every w x w window (stride 1) of two equally sized luma
/// planes, with uniform window weights and population (1/N) moments.
template <typename DerivedA, typename DerivedB>
typename DerivedA::Scalar ssim(const Eigen::MatrixBase<DerivedA>& a, const Eigen::MatrixBase<DerivedB>& b,
                               const SsimParams<typename DerivedA::Scalar>& params = {}) {
    using Scalar = typename DerivedA::Scalar;
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionMismatch("ssim: " + std::to_string(a.cols()) + "x" + std::to_string(a.rows()) + " vs " +
                                std::to_string(b.cols()) + "x" + std::to_string(b.rows()));
    const Eigen::Index w = params.window;
    if (a.rows() < w || a.cols() < w)
        throw DimensionMismatch("ssim: image smaller than the " + std::to_string(w) + "x" + std::to_string(w) +
                                " window");
    const auto xa = a.array();
    const auto xb = b.template cast<Scalar>().array();
    const auto sa = detail::summed_area(xa);
    const auto sb = detail::summed_area(xb);
    const auto saa = detail::summed_area((xa * xa).eval());
    const auto sbb = detail::summed_area((xb * xb).eval());
    const auto sab = detail::summed_area((xa * xb).eval());
    const Scalar n = Scalar(w * w);
    const Scalar c1 = params.c1();
    const Scalar c2 = params.c2();
    Scalar total = 0;
    for (Eigen::Index r = 0; r + w <= a.rows(); ++r) {
        for (Eigen::Index c = 0; c + w <= a.cols(); ++c) {
            const Scalar mu_a = detail::box_sum(sa, r, c, w) / n;
            const Scalar mu_b = detail::box_sum(sb, r, c, w) / n;
            const Scalar var_a = detail::box_sum(saa, r, c, w) / n - mu_a * mu_a;
            const Scalar var_b = detail::box_sum(sbb, r, c, w) / n - mu_b * mu_b;
            const Scalar cov = detail::box_sum(sab, r, c, w) / n - mu_a * mu_b;
            total += ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) /
                     ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
        }
    }
    const auto windows = static_cast<Scalar>((a.rows() - w + 1) * (a.cols() - w + 1));
    return total / windows;
}

/// SSIM on the BT.601 luma of two RGB images.
double ssim(const Image& a, const Image& b, const SsimParams<double>& params = {});

// -- manifest verification --------------------------------------------------

struct PairSimilarity {
    std::string id;
    Source source = Source::Custom;
    double ssim = 0.0;
    std::optional<double> clip;
    std::optional<double> lpips;
};

struct SimilarityMeans {
    double ssim = 0.0;
    std::optional<double> clip;
    std::optional<double> lpips;
    std::size_t n = 0;
};

struct Thresholds {
    double ssim_min = 0.70;
    double clip_min = 0.90;
    double lpips_max = 0.25;
};

struct SimilarityReport {
    std::vector<PairSimilarity> pairs;
    std::map<Source, SimilarityMeans> per_source;
    SimilarityMeans overall;
    bool gate_pass = false;
    std::vector<std::string> outliers;  // ids of pairs individually outside the thresholds
    std::vector<std::string> warnings;
};

/// Computes SSIM locally for every pair and, when a sidecar is given, CLIP and
/// LPIPS through it. An unreachable sidecar downgrades to SSIM only with a
/// warning. Mismatched pair dimensions throw DimensionMismatch naming the ids.
SimilarityReport verify_manifest(const Manifest& manifest, const Thresholds& thresholds,
                                 const SidecarClient* sidecar = nullptr, int workers = 0);

std::string similarity_csv(const SimilarityReport& report);

}  // namespace swapprobe
