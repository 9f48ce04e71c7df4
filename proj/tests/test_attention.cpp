#include <gtest/gtest.h>

#include <cmath>

#include "aircache/attention.hpp"
#include "aircache/importance.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace aircache;

namespace {

TokenLayout layout_of(std::size_t sys, std::size_t nv, std::size_t nt, std::size_t d, std::size_t heads) {
    TokenLayout l;
    l.n_system = sys;
    l.n_visual = nv;
    l.n_text = nt;
    l.hidden_dim = d;
    l.n_heads = heads;
    return l;
}

}  // namespace

TEST(Layout, Invariants) {
    EXPECT_EQ(kind_of([] { layout_of(0, 0, 2, 8, 2).validate(); }), ErrorKind::Config);
    EXPECT_EQ(kind_of([] { layout_of(0, 2, 0, 8, 2).validate(); }), ErrorKind::Config);
    EXPECT_EQ(kind_of([] { layout_of(0, 2, 2, 9, 2).validate(); }), ErrorKind::Config);
    const TokenLayout l = layout_of(3, 5, 4, 8, 2);
    EXPECT_NO_THROW(l.validate());
    EXPECT_EQ(l.total(), 12u);
    EXPECT_EQ(l.visual_begin(), 3u);
    EXPECT_EQ(l.text_begin(), 8u);
}

TEST(ProjectQkv, IdentityWeights) {
    Rng rng(1);
    const Matrix x = oracle::random_matrix(rng, 5, 4);
    const ProjectionWeights w{Matrix::identity(4), Matrix::identity(4), Matrix::identity(4)};
    const QKV out = project_qkv(x, w);
    EXPECT_EQ(out.q, x);
    EXPECT_EQ(out.k, x);
    EXPECT_EQ(out.v, x);
}

TEST(ProjectQkv, SingleTokenAndOracle) {
    Rng rng(2);
    const Matrix x = oracle::random_matrix(rng, 1, 6);
    const ProjectionWeights w{oracle::random_matrix(rng, 6, 6), oracle::random_matrix(rng, 6, 6),
                              oracle::random_matrix(rng, 6, 6)};
    const QKV out = project_qkv(x, w);
    EXPECT_EQ(out.q.rows(), 1u);
    const Matrix want[3] = {oracle::triple_loop(x, w.w_q), oracle::triple_loop(x, w.w_k),
                            oracle::triple_loop(x, w.w_v)};
    const Matrix* got[3] = {&out.q, &out.k, &out.v};
    for (int m = 0; m < 3; ++m)
        for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR((*got[m])(0, c), want[m](0, c), 1e-12);
}

TEST(ProjectQkv, ShapeMismatch) {
    const ProjectionWeights w{Matrix::identity(4), Matrix(4, 3), Matrix::identity(4)};
    EXPECT_EQ(kind_of([&] { project_qkv(Matrix(2, 4), w); }), ErrorKind::Shape);
}

TEST(TextSelfAttention, SingleToken) {
    const TokenLayout l = layout_of(0, 1, 1, 4, 2);
    Rng rng(3);
    const Matrix q = oracle::random_matrix(rng, 1, 4);
    const Matrix k = oracle::random_matrix(rng, 1, 4);
    const auto row = text_self_attention_last_row(q, k, l);
    ASSERT_EQ(row.size(), 1u);
    EXPECT_DOUBLE_EQ(row[0], 1.0);
}

TEST(TextSelfAttention, IdenticalKeysUniform) {
    const TokenLayout l = layout_of(0, 1, 5, 4, 1);
    Rng rng(4);
    const Matrix q = oracle::random_matrix(rng, 5, 4);
    const Matrix k(5, 4, 0.3);
    for (double v : text_self_attention_last_row(q, k, l)) EXPECT_NEAR(v, 0.2, 1e-15);
}

TEST(TextSelfAttention, MatchesDenseOracle) {
    const TokenLayout l = layout_of(0, 1, 4, 8, 2);
    Rng rng(5);
    const Matrix q = oracle::random_matrix(rng, 4, 8);
    const Matrix k = oracle::random_matrix(rng, 4, 8);
    const auto row = text_self_attention_last_row(q, k, l);
    const Matrix dense = oracle::dense_attention(q, k, 2, 1.0 / std::sqrt(8.0),
                                                 [](std::size_t i, std::size_t j) { return j <= i; });
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(row[j], dense(3, j), 1e-12);
}

TEST(TextSelfAttention, EmptyText) {
    const TokenLayout l = layout_of(0, 1, 1, 4, 1);
    EXPECT_EQ(kind_of([&] { text_self_attention_last_row(Matrix(0, 4), Matrix(0, 4), l); }), ErrorKind::EmptyText);
}

TEST(EliteWindow, SymmetricPair) {
    const TokenLayout l = layout_of(0, 1, 1, 4, 1);
    const Matrix q(1, 4, 1.0);
    const Matrix kv(1, 4, 0.5);
    const Matrix kt(1, 4, 0.5);
    const std::vector<std::size_t> idx{0};
    const Matrix a = elite_window_attention(q, kv, kt, idx, l);
    ASSERT_EQ(a.rows(), 1u);
    ASSERT_EQ(a.cols(), 2u);
    EXPECT_DOUBLE_EQ(a(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(a(0, 1), 0.5);
}

TEST(EliteWindow, AllTextMatchesDenseOracle) {
    const TokenLayout l = layout_of(0, 6, 4, 8, 2);
    Rng rng(6);
    const Matrix qt = oracle::random_matrix(rng, 4, 8);
    const Matrix kv = oracle::random_matrix(rng, 6, 8);
    const Matrix kt = oracle::random_matrix(rng, 4, 8);
    const std::vector<std::size_t> idx{0, 1, 2, 3};
    const Matrix a = elite_window_attention(qt, kv, kt, idx, l);
    Matrix keys(0, 8);
    for (std::size_t r = 0; r < 6; ++r) keys.append_row(kv.row(r));
    for (std::size_t r = 0; r < 4; ++r) keys.append_row(kt.row(r));
    const Matrix dense = oracle::dense_attention(qt, keys, 2, 1.0 / std::sqrt(8.0),
                                                 [](std::size_t i, std::size_t j) { return j < 6 || j - 6 <= i; });
    ASSERT_EQ(a.rows(), 4u);
    ASSERT_EQ(a.cols(), 10u);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(a(i, j), dense(i, j), 1e-12);
}

TEST(EliteWindow, RowsSumToOneAndMaskHolds) {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t nv = 1 + rng.below(20), nt = 1 + rng.below(8), heads = 1 + rng.below(4);
        const TokenLayout l = layout_of(0, nv, nt, 4 * heads, heads);
        const Matrix qt = oracle::random_matrix(rng, nt, 4 * heads, 2.0);
        const Matrix kv = oracle::random_matrix(rng, nv, 4 * heads, 2.0);
        const Matrix kt = oracle::random_matrix(rng, nt, 4 * heads, 2.0);
        std::vector<std::size_t> idx;
        for (std::size_t t = 0; t < nt; ++t)
            if (rng.uniform() < 0.5 || (idx.empty() && t + 1 == nt)) idx.push_back(t);
        const Matrix a = elite_window_attention(qt, kv, kt, idx, l);
        for (std::size_t i = 0; i < a.rows(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < a.cols(); ++j) {
                if (j >= nv && idx[j - nv] > idx[i]) EXPECT_EQ(a(i, j), 0.0);
                s += a(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(EliteWindow, EmptyWindowAndBadIndices) {
    const TokenLayout l = layout_of(0, 2, 3, 4, 1);
    const Matrix qt(3, 4, 0.1), kv(2, 4, 0.2), kt(3, 4, 0.3);
    EXPECT_EQ(kind_of([&] { elite_window_attention(qt, kv, kt, std::vector<std::size_t>{}, l); }),
              ErrorKind::EmptyWindow);
    EXPECT_EQ(kind_of([&] { elite_window_attention(qt, kv, kt, std::vector<std::size_t>{5}, l); }),
              ErrorKind::Shape);
    EXPECT_EQ(kind_of([&] { elite_window_attention(qt, kv, kt, std::vector<std::size_t>{2, 1}, l); }),
              ErrorKind::Config);
}

TEST(CausalMap, MaskedEntriesExactlyZero) {
    const TokenLayout l = layout_of(1, 3, 2, 6, 3);
    Rng rng(8);
    const Matrix q = oracle::random_matrix(rng, 6, 6);
    const Matrix k = oracle::random_matrix(rng, 6, 6);
    const Matrix a = causal_attention_map(q, k, l);
    const Matrix dense = oracle::dense_attention(q, k, 3, 1.0 / std::sqrt(6.0),
                                                 [](std::size_t i, std::size_t j) { return j <= i; });
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            if (j > i) EXPECT_EQ(a(i, j), 0.0);
            EXPECT_NEAR(a(i, j), dense(i, j), 1e-12);
        }
}

TEST(PerHeadScale, UsesHeadDim) {
    const TokenLayout l = layout_of(0, 1, 1, 16, 4);
    EXPECT_DOUBLE_EQ(attention_scale(l, {}), 0.25);
    EXPECT_DOUBLE_EQ(attention_scale(l, {true}), 0.5);
}

// Averaging per-head importance equals pooling the head-averaged map.
TEST(HeadAveraging, CommutesWithPooling) {
    const std::size_t nv = 5, nt = 3, heads = 4, d = 16;
    const TokenLayout l = layout_of(0, nv, nt, d, heads);
    Rng rng(9);
    const Matrix qt = oracle::random_matrix(rng, nt, d);
    const Matrix kv = oracle::random_matrix(rng, nv, d);
    const Matrix kt = oracle::random_matrix(rng, nt, d);
    const std::vector<std::size_t> idx{0, 1, 2};
    const ImportanceProfile pooled = score_elite(elite_window_attention(qt, kv, kt, idx, l), l);

    std::vector<double> per_head(nv, 0.0);
    const std::size_t hd = d / heads;
    for (std::size_t h = 0; h < heads; ++h) {
        const TokenLayout one = layout_of(0, nv, nt, hd, 1);
        // One head alone, scaled as in the full model.
        Matrix q1 = qt.slice_cols(h * hd, (h + 1) * hd);
        for (std::size_t i = 0; i < q1.rows(); ++i)
            for (double& v : q1.row(i)) v *= std::sqrt(static_cast<double>(hd)) / std::sqrt(static_cast<double>(d));
        const ImportanceProfile p = score_elite(
            elite_window_attention(q1, kv.slice_cols(h * hd, (h + 1) * hd), kt.slice_cols(h * hd, (h + 1) * hd),
                                   idx, one),
            one);
        for (std::size_t v = 0; v < nv; ++v) per_head[v] += p.scores[v] / static_cast<double>(heads);
    }
    for (std::size_t v = 0; v < nv; ++v) EXPECT_NEAR(pooled.scores[v], per_head[v], 1e-12);
}
