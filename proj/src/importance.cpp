#include "aircache/importance.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "aircache/budget.hpp"
#include "aircache/error.hpp"
#include "aircache/rng.hpp"

namespace aircache {

std::string_view to_string(ScorerKind kind) {
    switch (kind) {
        case ScorerKind::EliteWindow: return "elite_window";
        case ScorerKind::ContinuousTextWindow: return "continuous_text_window";
        case ScorerKind::AllTextTokens: return "all_text_tokens";
        case ScorerKind::VisualWindow: return "visual_window";
        case ScorerKind::H2OCumulative: return "h2o_cumulative";
        case ScorerKind::Random: return "random";
    }
    return "unknown";
}

ScorerKind parse_scorer_kind(std::string_view name) {
    for (auto kind : {ScorerKind::EliteWindow, ScorerKind::ContinuousTextWindow, ScorerKind::AllTextTokens,
                      ScorerKind::VisualWindow, ScorerKind::H2OCumulative, ScorerKind::Random}) {
        if (to_string(kind) == name) return kind;
    }
    throw Error(ErrorKind::Config, "unknown scorer '" + std::string(name) + "'");
}

ScorerPolicy ScorerPolicy::elite(double alpha) {
    ScorerPolicy p;
    p.kind = ScorerKind::EliteWindow;
    p.alpha = alpha;
    return p;
}

ScorerPolicy ScorerPolicy::continuous_text_window(std::size_t size) {
    ScorerPolicy p;
    p.kind = ScorerKind::ContinuousTextWindow;
    p.window = size;
    return p;
}

ScorerPolicy ScorerPolicy::all_text_tokens(bool renormalized) {
    ScorerPolicy p;
    p.kind = ScorerKind::AllTextTokens;
    p.renormalized = renormalized;
    return p;
}

ScorerPolicy ScorerPolicy::visual_window(std::size_t size) {
    ScorerPolicy p;
    p.kind = ScorerKind::VisualWindow;
    p.window = size;
    return p;
}

ScorerPolicy ScorerPolicy::h2o_cumulative() {
    ScorerPolicy p;
    p.kind = ScorerKind::H2OCumulative;
    return p;
}

ScorerPolicy ScorerPolicy::random(std::uint64_t seed) {
    ScorerPolicy p;
    p.kind = ScorerKind::Random;
    p.seed = seed;
    return p;
}

void ScorerPolicy::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw Error(ErrorKind::Config, "alpha must lie in [0, 1], got " + std::to_string(alpha));
    }
    if ((kind == ScorerKind::ContinuousTextWindow || kind == ScorerKind::VisualWindow) && window < 1) {
        throw Error(ErrorKind::Config, "window size must be >= 1");
    }
}

std::vector<std::size_t> select_key_text_tokens(std::span<const double> a_tt_last_row, double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw Error(ErrorKind::Config, "alpha must lie in [0, 1], got " + std::to_string(alpha));
    }
    if (a_tt_last_row.empty()) throw Error(ErrorKind::EmptyText, "empty attention row");
    const double peak = *std::max_element(a_tt_last_row.begin(), a_tt_last_row.end());
    const double threshold = alpha * peak;
    std::vector<std::size_t> selected;
    for (std::size_t j = 0; j < a_tt_last_row.size(); ++j) {
        if (a_tt_last_row[j] >= threshold) selected.push_back(j);
    }
    return selected;
}

namespace {

void fill_statistics(ImportanceProfile& profile) {
    profile.strength = strength(profile.scores);
    const SkewnessResult sk = skewness(profile.scores);
    profile.skewness = sk.value;
    profile.skewness_degenerate = sk.degenerate;
}

// Mean over `rows` of full_map[row, col_begin:col_end].
std::vector<double> pool_rows(const Matrix& full_map, std::span<const std::size_t> rows, std::size_t col_begin,
                              std::size_t col_end) {
    std::vector<double> pooled(col_end - col_begin, 0.0);
    for (std::size_t r : rows) {
        for (std::size_t c = col_begin; c < col_end; ++c) pooled[c - col_begin] += full_map(r, c);
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    for (double& v : pooled) v *= inv;
    return pooled;
}

std::vector<std::size_t> index_range(std::size_t begin, std::size_t end) {
    std::vector<std::size_t> out(end - begin);
    std::iota(out.begin(), out.end(), begin);
    return out;
}

std::vector<double> random_scores(std::uint64_t seed, std::size_t layer, std::size_t n) {
    std::vector<std::size_t> perm = index_range(0, n);
    Rng rng(mix_seed(seed, layer));
    rng.shuffle(perm);
    // Ranks normalized to sum to one.
    const double denom = static_cast<double>(n) * static_cast<double>(n + 1) / 2.0;
    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) scores[i] = static_cast<double>(perm[i] + 1) / denom;
    return scores;
}

struct QueryRows {
    std::vector<std::size_t> rows;
    bool clamped = false;
};

// Observation-window rows of the full map for the map-reading baselines.
QueryRows baseline_query_rows(const ScorerPolicy& policy, const TokenLayout& layout) {
    QueryRows q;
    const std::size_t text_end = layout.total();
    switch (policy.kind) {
        case ScorerKind::ContinuousTextWindow: {
            const std::size_t w = std::min(policy.window, layout.n_text);
            q.clamped = w < policy.window;
            q.rows = index_range(text_end - w, text_end);
            break;
        }
        case ScorerKind::AllTextTokens: q.rows = index_range(layout.text_begin(), text_end); break;
        case ScorerKind::VisualWindow: {
            const std::size_t w = std::min(policy.window, layout.n_visual);
            q.clamped = w < policy.window;
            q.rows = index_range(layout.text_begin() - w, layout.text_begin());
            break;
        }
        case ScorerKind::H2OCumulative: q.rows = index_range(0, text_end); break;
        case ScorerKind::EliteWindow:
        case ScorerKind::Random:
            throw Error(ErrorKind::Config, std::string(to_string(policy.kind)) + " does not read the full map");
    }
    return q;
}

void check_full_map(const Matrix& full_map, const TokenLayout& layout) {
    if (full_map.rows() != layout.total() || full_map.cols() != layout.total()) {
        throw Error(ErrorKind::Shape, "full attention map must be " + std::to_string(layout.total()) + " square");
    }
}

}  // namespace

AttentionSnapshot build_elite_snapshot(std::size_t layer, const Matrix& q, const Matrix& k, const TokenLayout& layout,
                                       double alpha, const AttentionOptions& options) {
    if (q.rows() != layout.total() || k.rows() != layout.total()) {
        throw Error(ErrorKind::Shape, "snapshot needs full-prompt Q and K");
    }
    const Matrix q_text = q.slice_rows(layout.text_begin(), layout.total());
    const Matrix k_text = k.slice_rows(layout.text_begin(), layout.total());
    const Matrix k_visual = k.slice_rows(layout.visual_begin(), layout.text_begin());

    AttentionSnapshot snap;
    snap.layer = layer;
    snap.a_tt_last_row = text_self_attention_last_row(q_text, k_text, layout, options);
    snap.key_text_indices = select_key_text_tokens(snap.a_tt_last_row, alpha);
    snap.a_vtk = elite_window_attention(q_text, k_visual, k_text, snap.key_text_indices, layout, options);
    return snap;
}

ImportanceProfile score_elite(const Matrix& a_vtk, const TokenLayout& layout, std::size_t layer) {
    if (a_vtk.rows() == 0) throw Error(ErrorKind::EmptyWindow, "elite window has no rows");
    if (a_vtk.cols() < layout.n_visual) throw Error(ErrorKind::Shape, "a_vtk narrower than N_v");
    ImportanceProfile profile;
    profile.layer = layer;
    profile.scores.assign(layout.n_visual, 0.0);
    for (std::size_t j = 0; j < a_vtk.rows(); ++j) {
        for (std::size_t i = 0; i < layout.n_visual; ++i) profile.scores[i] += a_vtk(j, i);
    }
    const double inv = 1.0 / static_cast<double>(a_vtk.rows());
    for (double& s : profile.scores) s *= inv;
    fill_statistics(profile);
    return profile;
}

ImportanceProfile score_baseline(const ScorerPolicy& policy, const Matrix& full_map, const TokenLayout& layout,
                                 std::size_t layer) {
    policy.validate();
    ImportanceProfile profile;
    profile.layer = layer;
    if (policy.kind == ScorerKind::Random) {
        profile.scores = random_scores(policy.seed, layer, layout.n_visual);
        fill_statistics(profile);
        return profile;
    }
    check_full_map(full_map, layout);
    const QueryRows q = baseline_query_rows(policy, layout);
    profile.window_clamped = q.clamped;
    // H2O's column sums are divided by the query count, which leaves the
    // ranking unchanged and keeps scores in [0, 1].
    profile.scores = pool_rows(full_map, q.rows, layout.visual_begin(), layout.text_begin());
    fill_statistics(profile);
    return profile;
}

ImportanceProfile score_layer(const ScorerPolicy& policy, const LayerAttentionInputs& inputs,
                              const TokenLayout& layout, const AttentionOptions& options) {
    policy.validate();
    const bool needs_qk = policy.kind == ScorerKind::EliteWindow ||
                          (policy.kind == ScorerKind::AllTextTokens && policy.renormalized);
    if (needs_qk) {
        if (inputs.q == nullptr || inputs.k == nullptr) throw Error(ErrorKind::Config, "scorer needs Q and K");
        if (policy.kind == ScorerKind::EliteWindow) {
            const AttentionSnapshot snap =
                build_elite_snapshot(inputs.layer, *inputs.q, *inputs.k, layout, policy.alpha, options);
            return score_elite(snap.a_vtk, layout, inputs.layer);
        }
        // Renormalized all-text pooling: every text token is a window query.
        const Matrix q_text = inputs.q->slice_rows(layout.text_begin(), layout.total());
        const Matrix k_text = inputs.k->slice_rows(layout.text_begin(), layout.total());
        const Matrix k_visual = inputs.k->slice_rows(layout.visual_begin(), layout.text_begin());
        const std::vector<std::size_t> all = index_range(0, layout.n_text);
        return score_elite(elite_window_attention(q_text, k_visual, k_text, all, layout, options), layout,
                           inputs.layer);
    }
    if (policy.kind == ScorerKind::Random) return score_baseline(policy, Matrix{}, layout, inputs.layer);
    if (inputs.full_map == nullptr) throw Error(ErrorKind::Config, "baseline scorer needs the full attention map");
    return score_baseline(policy, *inputs.full_map, layout, inputs.layer);
}

std::vector<double> score_unified(const ScorerPolicy& policy, const LayerAttentionInputs& inputs,
                                  const TokenLayout& layout, const AttentionOptions& options) {
    policy.validate();
    const std::size_t n_candidates = layout.n_visual + layout.n_text;
    if (policy.kind == ScorerKind::Random) return random_scores(policy.seed, inputs.layer, n_candidates);
    if (inputs.full_map == nullptr) throw Error(ErrorKind::Config, "unified scoring needs the full attention map");
    check_full_map(*inputs.full_map, layout);

    std::vector<std::size_t> rows;
    if (policy.kind == ScorerKind::EliteWindow) {
        if (inputs.q == nullptr || inputs.k == nullptr) throw Error(ErrorKind::Config, "scorer needs Q and K");
        const AttentionSnapshot snap = build_elite_snapshot(inputs.layer, *inputs.q, *inputs.k, layout, policy.alpha, options);
        for (std::size_t j : snap.key_text_indices) rows.push_back(layout.text_begin() + j);
    } else {
        rows = baseline_query_rows(policy, layout).rows;
    }
    return pool_rows(*inputs.full_map, rows, layout.visual_begin(), layout.total());
}

std::vector<std::size_t> rank_scores(std::span<const double> scores) {
    std::vector<std::size_t> order = index_range(0, scores.size());
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

std::vector<std::size_t> rank_visual_tokens(const ImportanceProfile& profile) { return rank_scores(profile.scores); }

}  // namespace aircache
