#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace aircache {

struct SkewnessResult {
    double value = 0.0;
    // Set when fewer than three scores make the prefactor undefined.
    bool degenerate = false;
};

// Sum of a layer's visual importance scores.
double strength(std::span<const double> scores);

// Adjusted Fisher-Pearson skewness:
//   n / ((n-1)(n-2)) * sum(((x - mean) / s)^3), s the sample standard deviation.
// Zero when every score is equal.
SkewnessResult skewness(std::span<const double> scores);

struct LayerStats {
    std::size_t layer = 0;
    double strength = 0.0;
    double skewness = 0.0;
};

enum class AllocationMode { AirCache, StrengthOnly, SkewnessOnly, Uniform, Pyramid };

std::string_view to_string(AllocationMode mode);
AllocationMode parse_allocation_mode(std::string_view name);

struct LayerNormalization {
    double strength_factor = 1.0;
    double skewness_factor = 1.0;
};

struct LayerBudgetPlan {
    double global_ratio = 1.0;
    std::vector<double> per_layer_ratio;
    std::vector<std::size_t> per_layer_keep;
    std::vector<LayerNormalization> normalization;

    std::size_t total_keep() const;
};

// Shift added after the min-shift so every skewness factor stays positive.
inline constexpr double kSkewnessShift = 1e-6;

// Per-layer retained-token counts. `n_candidates` is N_v in vision-only
// compression. Throws ErrorKind::Config for r outside (0, 1] or empty stats.
LayerBudgetPlan allocate(std::span<const LayerStats> stats, double ratio, std::size_t n_candidates,
                         AllocationMode mode);

}  // namespace aircache
