#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "aircache/attention.hpp"
#include "aircache/matrix.hpp"

namespace aircache {

struct ImportanceProfile {
    std::size_t layer = 0;
    std::vector<double> scores;  // one per visual token
    double strength = 0.0;
    double skewness = 0.0;
    bool skewness_degenerate = false;
    // A baseline window was larger than the available queries and was clamped.
    bool window_clamped = false;
};

enum class ScorerKind {
    EliteWindow,
    ContinuousTextWindow,
    AllTextTokens,
    VisualWindow,
    H2OCumulative,
    Random,
};

std::string_view to_string(ScorerKind kind);
ScorerKind parse_scorer_kind(std::string_view name);

struct ScorerPolicy {
    ScorerKind kind = ScorerKind::EliteWindow;
    double alpha = 0.9;           // EliteWindow
    std::size_t window = 16;      // ContinuousTextWindow, VisualWindow
    bool renormalized = false;    // AllTextTokens: pool the renormalized sub-attention
    std::uint64_t seed = 0;       // Random

    static ScorerPolicy elite(double alpha);
    static ScorerPolicy continuous_text_window(std::size_t size);
    static ScorerPolicy all_text_tokens(bool renormalized = false);
    static ScorerPolicy visual_window(std::size_t size);
    static ScorerPolicy h2o_cumulative();
    static ScorerPolicy random(std::uint64_t seed);

    void validate() const;
};

// k = { j : row[j] >= alpha * max(row) }, ascending. Never empty.
std::vector<std::size_t> select_key_text_tokens(std::span<const double> a_tt_last_row, double alpha);

// Scores from one layer's full-prompt Q and K: last-row text attention,
// key-text selection and the elite window sub-attention.
AttentionSnapshot build_elite_snapshot(std::size_t layer, const Matrix& q, const Matrix& k, const TokenLayout& layout,
                                       double alpha, const AttentionOptions& options = {});

// Mean over window rows of the visual columns of a_vtk.
ImportanceProfile score_elite(const Matrix& a_vtk, const TokenLayout& layout, std::size_t layer = 0);

// Baselines read the full causal attention map of the prompt (N x N).
// AllTextTokens with `renormalized` set needs q/k instead; use score_layer.
ImportanceProfile score_baseline(const ScorerPolicy& policy, const Matrix& full_map, const TokenLayout& layout,
                                 std::size_t layer = 0);

struct LayerAttentionInputs {
    std::size_t layer = 0;
    const Matrix* q = nullptr;         // N x D, full prompt
    const Matrix* k = nullptr;         // N x D, full prompt
    const Matrix* full_map = nullptr;  // N x N head-averaged causal attention
};

// Dispatches on the policy; elite and renormalized all-text use q/k.
ImportanceProfile score_layer(const ScorerPolicy& policy, const LayerAttentionInputs& inputs,
                              const TokenLayout& layout, const AttentionOptions& options = {});

// Scores over the visual and text segments together (N_v + N_t entries),
// pooled from the full map with the policy's observation queries.
std::vector<double> score_unified(const ScorerPolicy& policy, const LayerAttentionInputs& inputs,
                                  const TokenLayout& layout, const AttentionOptions& options = {});

// Descending score, ties by ascending index.
std::vector<std::size_t> rank_scores(std::span<const double> scores);
std::vector<std::size_t> rank_visual_tokens(const ImportanceProfile& profile);

}  // namespace aircache
