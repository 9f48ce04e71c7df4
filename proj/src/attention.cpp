#include "aircache/attention.hpp"

#include <cmath>
#include <string>

#include "aircache/error.hpp"

namespace aircache {

void TokenLayout::validate() const {
    if (n_visual < 1) throw Error(ErrorKind::Config, "layout needs at least one visual token");
    if (n_text < 1) throw Error(ErrorKind::Config, "layout needs at least one text token");
    if (n_heads < 1 || hidden_dim < 1 || hidden_dim % n_heads != 0) {
        throw Error(ErrorKind::Config, "hidden_dim " + std::to_string(hidden_dim) +
                                           " not divisible by n_heads " + std::to_string(n_heads));
    }
    if (n_layers < 1) throw Error(ErrorKind::Config, "layout needs at least one layer");
}

double attention_scale(const TokenLayout& layout, const AttentionOptions& options) {
    const double dim = options.per_head_scale ? static_cast<double>(layout.head_dim())
                                              : static_cast<double>(layout.hidden_dim);
    return 1.0 / std::sqrt(dim);
}

QKV project_qkv(const Matrix& hidden, const ProjectionWeights& weights) {
    const std::size_t d = hidden.cols();
    for (const Matrix* w : {&weights.w_q, &weights.w_k, &weights.w_v}) {
        if (w->rows() != d || w->cols() != d) {
            throw Error(ErrorKind::Shape, "projection weight must be " + std::to_string(d) + "x" +
                                              std::to_string(d));
        }
    }
    return {matmul(hidden, weights.w_q), matmul(hidden, weights.w_k), matmul(hidden, weights.w_v)};
}

namespace {

void head_logits(const Matrix& q, const Matrix& k, std::size_t c0, std::size_t width, double scale, Matrix& logits) {
    for (std::size_t i = 0; i < q.rows(); ++i) {
        auto qi = q.row(i);
        for (std::size_t j = 0; j < k.rows(); ++j) {
            auto kj = k.row(j);
            double acc = 0.0;
            for (std::size_t c = c0; c < c0 + width; ++c) acc += qi[c] * kj[c];
            logits(i, j) = acc * scale;
        }
    }
}

}  // namespace

Matrix head_averaged_attention(const Matrix& q, const Matrix& k, std::size_t n_heads, double scale,
                               const std::optional<CausalMask>& mask) {
    if (q.cols() != k.cols()) throw Error(ErrorKind::Shape, "query/key width mismatch");
    if (n_heads == 0 || q.cols() % n_heads != 0) {
        throw Error(ErrorKind::Shape, "width " + std::to_string(q.cols()) + " not divisible into " +
                                          std::to_string(n_heads) + " heads");
    }
    const std::size_t hd = q.cols() / n_heads;
    Matrix avg(q.rows(), k.rows());
    Matrix logits(q.rows(), k.rows());
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * hd;
        head_logits(q, k, c0, hd, scale, logits);
        const Matrix probs = softmax_rows(logits, mask);
        for (std::size_t i = 0; i < q.rows(); ++i) {
            for (std::size_t j = 0; j < k.rows(); ++j) avg(i, j) += probs(i, j);
        }
    }
    const double inv = 1.0 / static_cast<double>(n_heads);
    for (std::size_t i = 0; i < avg.rows(); ++i) {
        for (double& v : avg.row(i)) v *= inv;
    }
    return avg;
}

MultiHeadOutput multi_head_attention(const Matrix& q, const Matrix& k, const Matrix& v, std::size_t n_heads,
                                     double scale, const std::optional<CausalMask>& mask) {
    if (q.cols() != k.cols() || k.rows() != v.rows() || v.cols() != q.cols()) {
        throw Error(ErrorKind::Shape, "multi-head attention operand shapes disagree");
    }
    if (n_heads == 0 || q.cols() % n_heads != 0) throw Error(ErrorKind::Shape, "width not divisible into heads");
    const std::size_t hd = q.cols() / n_heads;
    MultiHeadOutput out{Matrix(q.rows(), v.cols()), Matrix(q.rows(), k.rows())};
    Matrix logits(q.rows(), k.rows());
    const double inv_heads = 1.0 / static_cast<double>(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t c0 = h * hd;
        head_logits(q, k, c0, hd, scale, logits);
        const Matrix probs = softmax_rows(logits, mask);
        for (std::size_t i = 0; i < q.rows(); ++i) {
            auto out_row = out.output.row(i);
            for (std::size_t j = 0; j < k.rows(); ++j) {
                const double p = probs(i, j);
                out.mean_probs(i, j) += p * inv_heads;
                if (p == 0.0) continue;
                auto vj = v.row(j);
                for (std::size_t c = c0; c < c0 + hd; ++c) out_row[c] += p * vj[c];
            }
        }
    }
    return out;
}

std::vector<double> text_self_attention_last_row(const Matrix& q_text, const Matrix& k_text,
                                                 const TokenLayout& layout, const AttentionOptions& options) {
    if (q_text.rows() == 0 || k_text.rows() == 0) throw Error(ErrorKind::EmptyText, "no text tokens");
    if (q_text.rows() != k_text.rows()) throw Error(ErrorKind::Shape, "text query/key row mismatch");
    // The last text token sees every text key, so no mask applies to this row.
    const Matrix last = q_text.slice_rows(q_text.rows() - 1, q_text.rows());
    const Matrix row = head_averaged_attention(last, k_text, layout.n_heads, attention_scale(layout, options));
    return {row.row(0).begin(), row.row(0).end()};
}

Matrix elite_window_attention(const Matrix& q_text, const Matrix& k_visual, const Matrix& k_text,
                              std::span<const std::size_t> key_text_indices, const TokenLayout& layout,
                              const AttentionOptions& options) {
    if (key_text_indices.empty()) throw Error(ErrorKind::EmptyWindow, "no key text tokens selected");
    for (std::size_t i = 0; i < key_text_indices.size(); ++i) {
        if (key_text_indices[i] >= k_text.rows() || key_text_indices[i] >= q_text.rows()) {
            throw Error(ErrorKind::Shape, "key text index out of range");
        }
        if (i > 0 && key_text_indices[i] <= key_text_indices[i - 1]) {
            throw Error(ErrorKind::Config, "key text indices must be strictly increasing");
        }
    }
    const Matrix q_key = q_text.select_rows(key_text_indices);
    const Matrix k_key = k_text.select_rows(key_text_indices);

    Matrix k_window(0, k_visual.cols());
    for (std::size_t r = 0; r < k_visual.rows(); ++r) k_window.append_row(k_visual.row(r));
    for (std::size_t r = 0; r < k_key.rows(); ++r) k_window.append_row(k_key.row(r));

    // Indices are increasing, so key-text column j is visible to query rows >= j.
    CausalMask mask;
    mask.first_visible_row.assign(k_visual.rows() + k_key.rows(), 0);
    for (std::size_t j = 0; j < k_key.rows(); ++j) mask.first_visible_row[k_visual.rows() + j] = j;

    return head_averaged_attention(q_key, k_window, layout.n_heads, attention_scale(layout, options), mask);
}

Matrix causal_attention_map(const Matrix& q, const Matrix& k, const TokenLayout& layout,
                            const AttentionOptions& options) {
    if (q.rows() != k.rows()) throw Error(ErrorKind::Shape, "causal map needs square query/key sets");
    return head_averaged_attention(q, k, layout.n_heads, attention_scale(layout, options),
                                   CausalMask::lower_triangular(q.rows()));
}

}  // namespace aircache
