#include "aircache/kv_cache.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <string>

#include "aircache/error.hpp"

namespace aircache {

std::string_view to_string(Segment segment) {
    switch (segment) {
        case Segment::System: return "system";
        case Segment::Visual: return "visual";
        case Segment::Text: return "text";
        case Segment::Generated: return "generated";
    }
    return "unknown";
}

std::string_view to_string(EvictionMode mode) { return mode == EvictionMode::Drop ? "drop" : "merge"; }
std::string_view to_string(Audience audience) {
    return audience == Audience::VisionOnly ? "vision_only" : "unified";
}

EvictionMode parse_eviction_mode(std::string_view name) {
    if (name == "drop") return EvictionMode::Drop;
    if (name == "merge") return EvictionMode::Merge;
    throw Error(ErrorKind::Config, "unknown eviction mode '" + std::string(name) + "'");
}

Audience parse_audience(std::string_view name) {
    if (name == "vision_only") return Audience::VisionOnly;
    if (name == "unified") return Audience::Unified;
    throw Error(ErrorKind::Config, "unknown audience '" + std::string(name) + "'");
}

void CompressionConfig::validate() const {
    if (!(ratio > 0.0 && ratio <= 1.0)) throw Error(ErrorKind::Config, "ratio must lie in (0, 1]");
    if (!(merge_fraction >= 0.0 && merge_fraction <= 1.0)) {
        throw Error(ErrorKind::Config, "merge fraction must lie in [0, 1]");
    }
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::Config, "alpha must lie in [0, 1]");
    scorer.validate();
}

LayerCache::LayerCache(Matrix keys, Matrix values, std::vector<std::size_t> token_ids, std::vector<Segment> segments,
                       std::size_t next_id)
    : keys_(std::move(keys)),
      values_(std::move(values)),
      token_ids_(std::move(token_ids)),
      segments_(std::move(segments)),
      next_id_(next_id) {
    if (keys_.rows() != token_ids_.size() || values_.rows() != token_ids_.size() ||
        segments_.size() != token_ids_.size() || keys_.cols() != values_.cols()) {
        throw Error(ErrorKind::Shape, "cache rows, ids and tags disagree");
    }
}

std::size_t LayerCache::count(Segment segment) const {
    return static_cast<std::size_t>(std::count(segments_.begin(), segments_.end(), segment));
}

void LayerCache::append(std::span<const double> key, std::span<const double> value) {
    if (key.size() != keys_.cols() || value.size() != values_.cols()) {
        throw Error(ErrorKind::Shape, "appended row width " + std::to_string(key.size()) + " != " +
                                          std::to_string(keys_.cols()));
    }
    keys_.append_row(key);
    values_.append_row(value);
    token_ids_.push_back(next_id_++);
    segments_.push_back(Segment::Generated);
}

LayerCache prefill(const Matrix& keys, const Matrix& values, const TokenLayout& layout) {
    const std::size_t n = layout.total();
    if (keys.rows() != n || values.rows() != n) {
        throw Error(ErrorKind::Shape, "prefill expects " + std::to_string(n) + " rows");
    }
    std::vector<std::size_t> ids(n);
    std::vector<Segment> tags(n);
    for (std::size_t i = 0; i < n; ++i) {
        ids[i] = i;
        tags[i] = i < layout.visual_begin() ? Segment::System
                  : i < layout.text_begin() ? Segment::Visual
                                            : Segment::Text;
    }
    return LayerCache(keys, values, std::move(ids), std::move(tags), n);
}

std::size_t compressible_rows(const TokenLayout& layout, Audience audience) {
    return audience == Audience::VisionOnly ? layout.n_visual : layout.n_visual + layout.n_text;
}

namespace {

bool is_candidate(Segment segment, Audience audience) {
    return segment == Segment::Visual || (audience == Audience::Unified && segment == Segment::Text);
}

}  // namespace

LayerCache compress(const LayerCache& cache, std::span<const std::size_t> ranking, std::size_t keep,
                    const CompressionConfig& config) {
    config.validate();
    // Cache row index of each candidate, in prompt order.
    std::vector<std::size_t> candidate_rows;
    for (std::size_t r = 0; r < cache.rows(); ++r) {
        if (is_candidate(cache.segments()[r], config.audience)) candidate_rows.push_back(r);
    }
    const std::size_t n_candidates = candidate_rows.size();
    if (keep < 1 || keep > n_candidates) {
        throw Error(ErrorKind::Config, "keep " + std::to_string(keep) + " outside [1, " +
                                           std::to_string(n_candidates) + "]");
    }
    if (ranking.size() != n_candidates) {
        throw Error(ErrorKind::Config, "ranking covers " + std::to_string(ranking.size()) + " of " +
                                           std::to_string(n_candidates) + " candidate rows");
    }
    std::vector<bool> seen(n_candidates, false);
    for (std::size_t idx : ranking) {
        if (idx >= n_candidates || seen[idx]) throw Error(ErrorKind::Config, "ranking is not a permutation");
        seen[idx] = true;
    }
    if (keep == n_candidates) return cache;

    std::vector<bool> retained(cache.rows(), true);
    for (std::size_t pos = keep; pos < n_candidates; ++pos) retained[candidate_rows[ranking[pos]]] = false;

    Matrix keys = cache.keys();
    Matrix values = cache.values();

    if (config.eviction == EvictionMode::Merge && config.merge_fraction > 0.0) {
        const std::size_t n_evicted = n_candidates - keep;
        const auto n_merged = static_cast<std::size_t>(
            std::llround(config.merge_fraction * static_cast<double>(n_evicted)));
        std::vector<std::size_t> kept_rows;
        for (std::size_t r : candidate_rows) {
            if (retained[r]) kept_rows.push_back(r);
        }
        // Sum of constituents per retained row; starts with the row itself.
        Matrix key_sum = keys;
        Matrix value_sum = values;
        std::vector<std::size_t> constituents(cache.rows(), 1);
        // The most important evicted rows are the ones merged.
        for (std::size_t pos = keep; pos < keep + n_merged; ++pos) {
            const std::size_t evicted = candidate_rows[ranking[pos]];
            const std::size_t id = cache.token_ids()[evicted];
            std::size_t target = kept_rows.front();
            std::size_t best = std::numeric_limits<std::size_t>::max();
            for (std::size_t r : kept_rows) {
                const std::size_t other = cache.token_ids()[r];
                const std::size_t dist = other > id ? other - id : id - other;
                if (dist < best) {  // strict: ties keep the earlier token
                    best = dist;
                    target = r;
                }
            }
            for (std::size_t c = 0; c < keys.cols(); ++c) {
                key_sum(target, c) += keys(evicted, c);
                value_sum(target, c) += values(evicted, c);
            }
            ++constituents[target];
        }
        for (std::size_t r : kept_rows) {
            if (constituents[r] == 1) continue;
            const double inv = 1.0 / static_cast<double>(constituents[r]);
            for (std::size_t c = 0; c < keys.cols(); ++c) {
                keys(r, c) = key_sum(r, c) * inv;
                values(r, c) = value_sum(r, c) * inv;
            }
        }
    }

    std::vector<std::size_t> rows;
    for (std::size_t r = 0; r < cache.rows(); ++r) {
        if (retained[r]) rows.push_back(r);
    }
    std::vector<std::size_t> ids;
    std::vector<Segment> tags;
    ids.reserve(rows.size());
    tags.reserve(rows.size());
    for (std::size_t r : rows) {
        ids.push_back(cache.token_ids()[r]);
        tags.push_back(cache.segments()[r]);
    }
    return LayerCache(keys.select_rows(rows), values.select_rows(rows), std::move(ids), std::move(tags),
                      cache.next_id());
}

MemoryReport accounting(std::span<const LayerCache> caches, const TokenLayout& layout) {
    MemoryReport report;
    const std::uint64_t d = layout.hidden_dim;
    for (const LayerCache& cache : caches) {
        const std::size_t visual = cache.count(Segment::Visual);
        const std::size_t text = cache.count(Segment::Text);
        const std::size_t prompt = cache.count(Segment::System) + visual + text;
        report.retained_rows.push_back(prompt);
        report.retained_visual.push_back(visual);
        report.retained_text.push_back(text);
        report.kv_scalars_full += 2 * d * layout.total();
        report.kv_scalars_kept += 2 * d * prompt;
        report.attended_columns_per_step += prompt;
        report.flops_per_step_full += 2 * d * layout.total();
        report.flops_per_step_kept += 2 * d * prompt;
    }
    return report;
}

}  // namespace aircache
