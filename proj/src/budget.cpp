#include "aircache/budget.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aircache/error.hpp"
#include "aircache/matrix.hpp"

namespace aircache {

double strength(std::span<const double> scores) {
    double total = 0.0;
    for (double s : scores) total += s;
    return total;
}

SkewnessResult skewness(std::span<const double> scores) {
    const std::size_t n = scores.size();
    if (n < 3) return {0.0, true};
    if (std::all_of(scores.begin(), scores.end(), [&](double x) { return x == scores[0]; })) return {0.0, false};
    const MeanStd ms = mean_std(scores);
    if (ms.sample_std == 0.0) return {0.0, false};
    double acc = 0.0;
    for (double x : scores) {
        const double z = (x - ms.mean) / ms.sample_std;
        acc += z * z * z;
    }
    const double nd = static_cast<double>(n);
    return {nd / ((nd - 1.0) * (nd - 2.0)) * acc, false};
}

std::string_view to_string(AllocationMode mode) {
    switch (mode) {
        case AllocationMode::AirCache: return "aircache";
        case AllocationMode::StrengthOnly: return "strength_only";
        case AllocationMode::SkewnessOnly: return "skewness_only";
        case AllocationMode::Uniform: return "uniform";
        case AllocationMode::Pyramid: return "pyramid";
    }
    return "unknown";
}

AllocationMode parse_allocation_mode(std::string_view name) {
    for (auto mode : {AllocationMode::AirCache, AllocationMode::StrengthOnly, AllocationMode::SkewnessOnly,
                      AllocationMode::Uniform, AllocationMode::Pyramid}) {
        if (to_string(mode) == name) return mode;
    }
    throw Error(ErrorKind::Config, "unknown allocation mode '" + std::string(name) + "'");
}

std::size_t LayerBudgetPlan::total_keep() const {
    return std::accumulate(per_layer_keep.begin(), per_layer_keep.end(), std::size_t{0});
}

namespace {

// Divide by the cross-layer mean; identical inputs map to exactly 1.
std::vector<double> mean_normalize(const std::vector<double>& values) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    if (*lo == *hi) return std::vector<double>(values.size(), 1.0);
    const double m = mean(values);
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] / m;
    return out;
}

double clamped_total(const std::vector<double>& raw, double scale, double lo, double hi) {
    double total = 0.0;
    for (double r : raw) total += std::clamp(r * scale, lo, hi);
    return total;
}

// Finds the common scale that makes the clamped ratios sum to `target`, so
// residue from saturated layers flows to the others in proportion to `raw`.
std::vector<double> clamp_and_redistribute(const std::vector<double>& raw, double target, double lo, double hi) {
    const std::size_t n = raw.size();
    if (std::all_of(raw.begin(), raw.end(), [&](double r) { return r >= lo && r <= hi; })) return raw;
    if (target >= hi * static_cast<double>(n)) return std::vector<double>(n, hi);
    if (target <= lo * static_cast<double>(n)) return std::vector<double>(n, lo);

    double min_positive = hi;
    for (double r : raw) {
        if (r > 0.0) min_positive = std::min(min_positive, r);
    }
    double scale_lo = 0.0;
    double scale_hi = hi / min_positive;
    for (int iter = 0; iter < 200; ++iter) {
        const double mid = 0.5 * (scale_lo + scale_hi);
        if (clamped_total(raw, mid, lo, hi) < target) {
            scale_lo = mid;
        } else {
            scale_hi = mid;
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = std::clamp(raw[i] * scale_hi, lo, hi);
    return out;
}

}  // namespace

LayerBudgetPlan allocate(std::span<const LayerStats> stats, double ratio, std::size_t n_candidates,
                         AllocationMode mode) {
    if (!(ratio > 0.0 && ratio <= 1.0)) {
        throw Error(ErrorKind::Config, "budget ratio must lie in (0, 1], got " + std::to_string(ratio));
    }
    if (stats.empty()) throw Error(ErrorKind::Config, "allocation needs at least one layer");
    if (n_candidates == 0) throw Error(ErrorKind::Config, "allocation needs at least one candidate token");

    const std::size_t n_layers = stats.size();
    std::vector<double> strengths(n_layers);
    std::vector<double> skews(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        strengths[l] = stats[l].strength;
        skews[l] = stats[l].skewness;
    }
    const std::vector<double> strength_factor = mean_normalize(strengths);
    const double min_skew = *std::min_element(skews.begin(), skews.end());
    for (double& s : skews) s = s - min_skew + kSkewnessShift;
    const std::vector<double> skew_factor = mean_normalize(skews);

    std::vector<double> raw(n_layers, ratio);
    for (std::size_t l = 0; l < n_layers; ++l) {
        switch (mode) {
            case AllocationMode::AirCache:
                raw[l] = 0.5 * (strength_factor[l] + skew_factor[l]) * ratio;
                break;
            case AllocationMode::StrengthOnly: raw[l] = strength_factor[l] * ratio; break;
            case AllocationMode::SkewnessOnly: raw[l] = skew_factor[l] * ratio; break;
            case AllocationMode::Uniform: break;
            case AllocationMode::Pyramid:
                // Linear from 1.5r at the first layer down to 0.5r at the last.
                if (n_layers > 1) {
                    raw[l] = ratio * (1.5 - static_cast<double>(l) / static_cast<double>(n_layers - 1));
                }
                break;
        }
    }

    const double n = static_cast<double>(n_candidates);
    LayerBudgetPlan plan;
    plan.global_ratio = ratio;
    plan.per_layer_ratio = clamp_and_redistribute(raw, ratio * static_cast<double>(n_layers), 1.0 / n, 1.0);
    plan.per_layer_keep.resize(n_layers);
    plan.normalization.resize(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
        const double keep = std::round(n * plan.per_layer_ratio[l]);
        plan.per_layer_keep[l] = static_cast<std::size_t>(std::clamp(keep, 1.0, n));
        plan.normalization[l] = {strength_factor[l], skew_factor[l]};
    }
    return plan;
}

}  // namespace aircache
