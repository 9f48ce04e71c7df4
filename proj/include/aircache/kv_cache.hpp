#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "aircache/attention.hpp"
#include "aircache/budget.hpp"
#include "aircache/importance.hpp"
#include "aircache/matrix.hpp"

namespace aircache {

enum class Segment : std::uint8_t { System, Visual, Text, Generated };

std::string_view to_string(Segment segment);

// Retained keys/values of one layer with the original position of each row.
class LayerCache {
public:
    LayerCache() = default;
    LayerCache(Matrix keys, Matrix values, std::vector<std::size_t> token_ids, std::vector<Segment> segments,
               std::size_t next_id);

    const Matrix& keys() const noexcept { return keys_; }
    const Matrix& values() const noexcept { return values_; }
    const std::vector<std::size_t>& token_ids() const noexcept { return token_ids_; }
    const std::vector<Segment>& segments() const noexcept { return segments_; }

    std::size_t rows() const noexcept { return token_ids_.size(); }
    std::size_t width() const noexcept { return keys_.cols(); }
    std::size_t count(Segment segment) const;
    // Position the next appended row receives.
    std::size_t next_id() const noexcept { return next_id_; }

    // Adds one generated row. Throws ErrorKind::Shape on width mismatch.
    void append(std::span<const double> key, std::span<const double> value);

    friend bool operator==(const LayerCache&, const LayerCache&) = default;

private:
    Matrix keys_;
    Matrix values_;
    std::vector<std::size_t> token_ids_;
    std::vector<Segment> segments_;
    std::size_t next_id_ = 0;
};

enum class EvictionMode { Drop, Merge };
enum class Audience { VisionOnly, Unified };

std::string_view to_string(EvictionMode mode);
std::string_view to_string(Audience audience);
EvictionMode parse_eviction_mode(std::string_view name);
Audience parse_audience(std::string_view name);

struct CompressionConfig {
    double ratio = 1.0;
    double alpha = 0.9;
    EvictionMode eviction = EvictionMode::Drop;
    double merge_fraction = 1.0;
    Audience audience = Audience::VisionOnly;
    AllocationMode allocation = AllocationMode::AirCache;
    ScorerPolicy scorer = ScorerPolicy::elite(0.9);

    void validate() const;
};

// Populates one layer's cache with every prompt row, tagged by segment.
LayerCache prefill(const Matrix& keys, const Matrix& values, const TokenLayout& layout);

// Number of rows compress() ranks: visual rows, plus text rows when unified.
std::size_t compressible_rows(const TokenLayout& layout, Audience audience);

// One-shot eviction on a freshly prefilled cache. `ranking` is a
// permutation over the compressible rows in prompt order (visual first,
// then text when unified), most important first. The top `keep` survive;
// everything else keeps its relative order.
LayerCache compress(const LayerCache& cache, std::span<const std::size_t> ranking, std::size_t keep,
                    const CompressionConfig& config);

struct MemoryReport {
    std::vector<std::size_t> retained_rows;    // prompt rows per layer
    std::vector<std::size_t> retained_visual;  // visual prompt rows per layer
    std::vector<std::size_t> retained_text;    // text prompt rows per layer
    std::uint64_t kv_scalars_full = 0;
    std::uint64_t kv_scalars_kept = 0;
    std::uint64_t attended_columns_per_step = 0;
    // 2 * D multiply-adds per attended key row, summed over layers.
    std::uint64_t flops_per_step_full = 0;
    std::uint64_t flops_per_step_kept = 0;
};

// Counts prompt rows only; generated rows are identical across policies.
MemoryReport accounting(std::span<const LayerCache> caches, const TokenLayout& layout);

}  // namespace aircache
