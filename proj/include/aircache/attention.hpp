#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "aircache/matrix.hpp"

namespace aircache {

// Prompt layout: system tokens, then visual tokens, then instruction text.
struct TokenLayout {
    std::size_t n_system = 0;
    std::size_t n_visual = 0;
    std::size_t n_text = 0;
    std::size_t hidden_dim = 0;
    std::size_t n_layers = 1;
    std::size_t n_heads = 1;

    std::size_t total() const noexcept { return n_system + n_visual + n_text; }
    std::size_t visual_begin() const noexcept { return n_system; }
    std::size_t text_begin() const noexcept { return n_system + n_visual; }
    std::size_t head_dim() const noexcept { return hidden_dim / n_heads; }

    // Throws ErrorKind::Config when the layout invariants do not hold.
    void validate() const;
};

struct AttentionOptions {
    // Scale logits by 1/sqrt(D / n_heads) instead of 1/sqrt(D).
    bool per_head_scale = false;
};

double attention_scale(const TokenLayout& layout, const AttentionOptions& options);

struct ProjectionWeights {
    Matrix w_q;
    Matrix w_k;
    Matrix w_v;
};

struct QKV {
    Matrix q;
    Matrix k;
    Matrix v;
};

QKV project_qkv(const Matrix& hidden, const ProjectionWeights& weights);

// Post-softmax attention of `q` rows over `k` rows, computed per head on
// contiguous column blocks of width D / n_heads and then averaged.
Matrix head_averaged_attention(const Matrix& q, const Matrix& k, std::size_t n_heads, double scale,
                               const std::optional<CausalMask>& mask = std::nullopt);

struct MultiHeadOutput {
    Matrix output;       // rows of q x width of v, heads concatenated
    Matrix mean_probs;   // head-averaged attention
};

// Scaled dot-product attention per head; head h owns columns
// [h * D/n_heads, (h + 1) * D/n_heads) of q, k and v.
MultiHeadOutput multi_head_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads,
                                     double scale, const std::optional<CausalMask>& mask = std::nullopt);

// Row N_t - 1 of the causal text-only self-attention, head averaged.
std::vector<double> text_self_attention_last_row(const Matrix& q_text, const Matrix& k_text,
                                                 const TokenLayout& layout,
                                                 const AttentionOptions& options = {});

// Attention of the selected text queries over Concat(K_v, K_t[k]).
// The softmax is renormalized over exactly those N_v + N_tk columns. Visual
// columns are visible to every query; key-text columns follow the original
// causal order. Result is N_tk x (N_v + N_tk).
Matrix elite_window_attention(const Matrix& q_text, const Matrix& k_visual, const Matrix& k_text,
                              std::span<const std::size_t> key_text_indices, const TokenLayout& layout,
                              const AttentionOptions& options = {});

// Full causal N x N head-averaged attention map from full-prompt Q and K.
Matrix causal_attention_map(const Matrix& q, const Matrix& k, const TokenLayout& layout,
                            const AttentionOptions& options = {});

struct AttentionSnapshot {
    std::size_t layer = 0;
    std::vector<double> a_tt_last_row;
    Matrix a_vtk;
    std::vector<std::size_t> key_text_indices;
};

}  // namespace aircache
