#include "aircache/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "aircache/error.hpp"
#include "aircache/rng.hpp"

namespace aircache {

namespace {

using namespace residual;

// Planted circuit gains and embedding amplitudes.
constexpr double kRelevanceGain = 1.6;
constexpr double kRetrievalGain = 1.5;
constexpr double kDistractionGain = 1.6;
constexpr double kRetrievalSpread = 0.6;  // per-layer gain in [1 - s/2, 1 + s/2] * base
constexpr double kCopyGain = 1.0;
constexpr double kUnembedPayloadGain = 1.0;
constexpr double kMarkerAmplitude = 6.0;
constexpr double kPayloadAmplitude = 2.0;
constexpr double kContentScale = 0.5;
constexpr double kPositionScale = 0.5;
constexpr double kOutScale = 0.5;
constexpr double kMlpScale = 0.5;
constexpr double kUnembedContentScale = 0.3;
constexpr double kNormEps = 1e-6;

bool is_marker_or_payload(std::size_t dim) { return dim < kContentBegin; }

bool is_payload(std::size_t dim) { return dim >= kPayloadBegin && dim < kContentBegin; }

Matrix gaussian(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
    Matrix m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        for (double& v : m.row(r)) v = rng.normal() * stddev;
    }
    return m;
}

std::vector<double> rms_normalize(std::span<const double> x) {
    double ss = 0.0;
    for (double v : x) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + kNormEps);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * inv;
    return out;
}

Matrix rms_normalize_rows(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const std::vector<double> n = rms_normalize(x.row(r));
        std::copy(n.begin(), n.end(), out.row(r).begin());
    }
    return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
    for (std::size_t r = 0; r < a.rows(); ++r) {
        auto ar = a.row(r);
        auto br = b.row(r);
        for (std::size_t c = 0; c < a.cols(); ++c) ar[c] += br[c];
    }
}

Matrix relu(Matrix m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (double& v : m.row(r)) v = std::max(v, 0.0);
    }
    return m;
}

Matrix rows_from(std::span<const double> row) {
    return Matrix(1, row.size(), std::vector<double>(row.begin(), row.end()));
}

}  // namespace

void ToyModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || vocab < 1) throw Error(ErrorKind::Config, "model counts must be >= 1");
    if (hidden_dim % n_heads != 0) {
        throw Error(ErrorKind::Config, "hidden_dim " + std::to_string(hidden_dim) + " not divisible by n_heads " +
                                           std::to_string(n_heads));
    }
    if (hidden_dim < kMinHiddenDim) {
        throw Error(ErrorKind::Config, "hidden_dim must be >= " + std::to_string(kMinHiddenDim));
    }
    if (hidden_dim / n_heads < kMinHeadDim) {
        throw Error(ErrorKind::Config, "head dim must be >= " + std::to_string(kMinHeadDim));
    }
}

ToyModel ToyModel::build(const ToyModelConfig& config) {
    config.validate();
    ToyModel model;
    model.config_ = config;
    const std::size_t d = config.hidden_dim;
    const std::size_t hd = d / config.n_heads;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    Rng rng(mix_seed(config.seed, 0));

    auto is_reserved_channel = [&](std::size_t col) { return col % hd <= kDistractionChannel; };

    for (std::size_t l = 0; l < config.n_layers; ++l) {
        ToyLayerWeights w;
        w.retrieval_gain = kRetrievalGain * (1.0 - kRetrievalSpread / 2.0 + kRetrievalSpread * rng.uniform());
        w.qkv.w_q = gaussian(rng, d, d, sd);
        w.qkv.w_k = gaussian(rng, d, d, sd);
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                if (is_reserved_channel(c)) {
                    w.qkv.w_q(r, c) = 0.0;
                    w.qkv.w_k(r, c) = 0.0;
                }
            }
        }
        for (std::size_t h = 0; h < config.n_heads; ++h) {
            const std::size_t rel = h * hd + kRelevanceChannel;
            const std::size_t ret = h * hd + kRetrievalChannel;
            const std::size_t dis = h * hd + kDistractionChannel;
            w.qkv.w_q(kLastMarker, rel) = kRelevanceGain;
            w.qkv.w_q(kLastMarker, ret) = w.retrieval_gain;
            w.qkv.w_q(kKeyMarker, ret) = w.retrieval_gain;
            w.qkv.w_q(kGenMarker, ret) = w.retrieval_gain;
            w.qkv.w_q(kFillerMarker, dis) = kDistractionGain;
            w.qkv.w_k(kKeyMarker, rel) = kRelevanceGain;
            w.qkv.w_k(kNeedleMarker, ret) = w.retrieval_gain;
            w.qkv.w_k(kDistractorMarker, dis) = kDistractionGain;
        }

        // Values: payload coordinates are copied verbatim into the same
        // value columns; nothing else feeds those columns.
        w.qkv.w_v = gaussian(rng, d, d, sd);
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = kPayloadBegin; c < kContentBegin; ++c) w.qkv.w_v(r, c) = r == c ? kCopyGain : 0.0;
        }
        w.w_out = gaussian(rng, d, d, sd * kOutScale);
        for (std::size_t r = 0; r < d; ++r) {
            for (std::size_t c = 0; c < d; ++c) {
                if (is_marker_or_payload(c) || is_payload(r)) w.w_out(r, c) = 0.0;
            }
            if (is_payload(r)) w.w_out(r, r) = kCopyGain;
        }
        w.w_up = gaussian(rng, d, 2 * d, sd);
        w.w_down = gaussian(rng, 2 * d, d, kMlpScale / std::sqrt(static_cast<double>(2 * d)));
        for (std::size_t r = 0; r < 2 * d; ++r) {
            for (std::size_t c = 0; c < kContentBegin; ++c) w.w_down(r, c) = 0.0;
        }
        model.layers_.push_back(std::move(w));
    }

    model.embeddings_ = gaussian(rng, config.vocab, d, kContentScale);
    for (std::size_t t = 0; t < config.vocab; ++t) {
        auto row = model.embeddings_.row(t);
        std::fill(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(kContentBegin), 0.0);
        row[kGenMarker] = kMarkerAmplitude;
    }
    model.codes_ = gaussian(rng, config.vocab, kPayloadDims, 1.0);
    model.unembed_ = gaussian(rng, d, config.vocab, kUnembedContentScale * sd);
    for (std::size_t t = 0; t < config.vocab; ++t) {
        for (std::size_t r = 0; r < kContentBegin; ++r) {
            model.unembed_(r, t) = is_payload(r) ? kUnembedPayloadGain * model.codes_(t, r - kPayloadBegin) : 0.0;
        }
    }
    return model;
}

std::span<const double> ToyModel::embedding(int token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab) {
        throw Error(ErrorKind::Config, "token " + std::to_string(token) + " outside vocab");
    }
    return embeddings_.row(static_cast<std::size_t>(token));
}

std::span<const double> ToyModel::payload_code(int token) const {
    if (token < 0 || static_cast<std::size_t>(token) >= config_.vocab) {
        throw Error(ErrorKind::Config, "token " + std::to_string(token) + " outside vocab");
    }
    return codes_.row(static_cast<std::size_t>(token));
}

void ToyModel::add_position(std::span<double> row, std::size_t position) const {
    const std::size_t width = config_.hidden_dim - kContentBegin;
    const double pos = static_cast<double>(position);
    for (std::size_t i = 0; i < width; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(width));
        row[kContentBegin + i] += kPositionScale * (i % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
    }
}

PrefillResult ToyModel::prefill(const Matrix& embeddings, const TokenLayout& layout) const {
    layout.validate();
    if (embeddings.rows() != layout.total() || embeddings.cols() != config_.hidden_dim) {
        throw Error(ErrorKind::Shape, "prompt embeddings must be " + std::to_string(layout.total()) + "x" +
                                          std::to_string(config_.hidden_dim));
    }
    if (layout.hidden_dim != config_.hidden_dim || layout.n_heads != config_.n_heads ||
        layout.n_layers != config_.n_layers) {
        throw Error(ErrorKind::Config, "layout does not match model dimensions");
    }
    PrefillResult result;
    result.layout = layout;
    Matrix hidden = embeddings;
    for (std::size_t p = 0; p < hidden.rows(); ++p) add_position(hidden.row(p), p);

    const double scale = attention_scale(layout, config_.attention);
    const CausalMask mask = CausalMask::lower_triangular(hidden.rows());
    for (const ToyLayerWeights& w : layers_) {
        LayerPrefill lp;
        QKV qkv = project_qkv(rms_normalize_rows(hidden), w.qkv);
        MultiHeadOutput attn = multi_head_attention(qkv.q, qkv.k, qkv.v, config_.n_heads, scale, mask);
        add_inplace(hidden, matmul(attn.output, w.w_out));
        add_inplace(hidden, matmul(relu(matmul(rms_normalize_rows(hidden), w.w_up)), w.w_down));
        result.caches.push_back(aircache::prefill(qkv.k, qkv.v, layout));
        lp.q = std::move(qkv.q);
        lp.k = std::move(qkv.k);
        lp.v = std::move(qkv.v);
        lp.attention = std::move(attn.mean_probs);
        result.layers.push_back(std::move(lp));
    }
    const Matrix last = rows_from(rms_normalize(hidden.row(hidden.rows() - 1)));
    const Matrix logits = matmul(last, unembed_);
    result.last_logits.assign(logits.row(0).begin(), logits.row(0).end());
    result.first_token = argmax(result.last_logits);
    return result;
}

Matrix ToyModel::forward_logits(const Matrix& embeddings) const {
    if (embeddings.cols() != config_.hidden_dim || embeddings.rows() == 0) {
        throw Error(ErrorKind::Shape, "embeddings must be N x hidden_dim");
    }
    Matrix hidden = embeddings;
    for (std::size_t p = 0; p < hidden.rows(); ++p) add_position(hidden.row(p), p);
    TokenLayout dims;
    dims.hidden_dim = config_.hidden_dim;
    dims.n_heads = config_.n_heads;
    const double scale = attention_scale(dims, config_.attention);
    const CausalMask mask = CausalMask::lower_triangular(hidden.rows());
    for (const ToyLayerWeights& w : layers_) {
        const QKV qkv = project_qkv(rms_normalize_rows(hidden), w.qkv);
        const MultiHeadOutput attn = multi_head_attention(qkv.q, qkv.k, qkv.v, config_.n_heads, scale, mask);
        add_inplace(hidden, matmul(attn.output, w.w_out));
        add_inplace(hidden, matmul(relu(matmul(rms_normalize_rows(hidden), w.w_up)), w.w_down));
    }
    return matmul(rms_normalize_rows(hidden), unembed_);
}

StepResult ToyModel::step(std::vector<LayerCache>& caches, int token) const {
    if (caches.size() != layers_.size()) throw Error(ErrorKind::Config, "one cache per layer required");
    const std::size_t position = caches.front().next_id();
    std::vector<double> h(embedding(token).begin(), embedding(token).end());
    add_position(h, position);

    TokenLayout dims;
    dims.hidden_dim = config_.hidden_dim;
    dims.n_heads = config_.n_heads;
    const double scale = attention_scale(dims, config_.attention);

    StepResult result;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const ToyLayerWeights& w = layers_[l];
        Matrix hidden = rows_from(h);
        const QKV qkv = project_qkv(rms_normalize_rows(hidden), w.qkv);
        caches[l].append(qkv.k.row(0), qkv.v.row(0));
        const MultiHeadOutput attn =
            multi_head_attention(qkv.q, caches[l].keys(), caches[l].values(), config_.n_heads, scale);
        result.attended_columns.push_back(caches[l].rows());
        add_inplace(hidden, matmul(attn.output, w.w_out));
        add_inplace(hidden, matmul(relu(matmul(rms_normalize_rows(hidden), w.w_up)), w.w_down));
        h.assign(hidden.row(0).begin(), hidden.row(0).end());
    }
    const Matrix logits = matmul(rows_from(rms_normalize(h)), unembed_);
    result.logits.assign(logits.row(0).begin(), logits.row(0).end());
    return result;
}

int argmax(std::span<const double> values) {
    if (values.empty()) throw Error(ErrorKind::InsufficientData, "argmax of empty vector");
    return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

std::vector<int> decode(const ToyModel& model, std::vector<LayerCache>& caches, int first_token, int steps) {
    if (steps < 1) throw Error(ErrorKind::Config, "decode needs steps >= 1");
    std::vector<int> tokens;
    tokens.reserve(static_cast<std::size_t>(steps));
    int token = first_token;
    for (int s = 0; s < steps; ++s) {
        token = argmax(model.step(caches, token).logits);
        tokens.push_back(token);
    }
    return tokens;
}

void NeedleScenario::validate() const {
    if (n_visual < 1 || n_text < 1) throw Error(ErrorKind::Config, "scenario needs visual and text tokens");
    const std::size_t needles = needle_indices.empty() ? n_needles : needle_indices.size();
    if (10 * needles > n_visual) {
        throw Error(ErrorKind::Config, "at most 10% of visual tokens may be needles");
    }
    for (std::size_t idx : needle_indices) {
        if (idx >= n_visual) throw Error(ErrorKind::Config, "needle index outside visual range");
    }
    if (!needle_payload.empty() && needle_payload.size() != needles) {
        throw Error(ErrorKind::Config, "needle payload length must match needle count");
    }
    if (needles + n_distractors > n_visual) throw Error(ErrorKind::Config, "too many distractors");
    if (n_key_text + 1 > n_text) throw Error(ErrorKind::Config, "too many key text tokens");
}

NeedlePrompt generate_needle_prompt(const ToyModel& model, const NeedleScenario& scenario, std::uint64_t seed,
                                    int continuation_steps) {
    scenario.validate();
    const ToyModelConfig& cfg = model.config();
    const std::size_t d = cfg.hidden_dim;
    Rng rng(mix_seed(seed, 1));

    NeedlePrompt prompt;
    prompt.layout = TokenLayout{scenario.n_system, scenario.n_visual, scenario.n_text, d, cfg.n_layers, cfg.n_heads};
    prompt.layout.validate();

    std::vector<std::size_t> visual_order(scenario.n_visual);
    std::iota(visual_order.begin(), visual_order.end(), 0);
    rng.shuffle(visual_order);
    if (scenario.needle_indices.empty()) {
        prompt.needle_indices.assign(visual_order.begin(),
                                     visual_order.begin() + static_cast<std::ptrdiff_t>(scenario.n_needles));
    } else {
        prompt.needle_indices = scenario.needle_indices;
    }
    std::sort(prompt.needle_indices.begin(), prompt.needle_indices.end());
    prompt.needle_indices.erase(std::unique(prompt.needle_indices.begin(), prompt.needle_indices.end()),
                                prompt.needle_indices.end());
    for (std::size_t idx : visual_order) {
        if (prompt.distractor_indices.size() == scenario.n_distractors) break;
        if (!std::binary_search(prompt.needle_indices.begin(), prompt.needle_indices.end(), idx)) {
            prompt.distractor_indices.push_back(idx);
        }
    }
    std::sort(prompt.distractor_indices.begin(), prompt.distractor_indices.end());

    if (scenario.needle_payload.empty()) {
        for (std::size_t i = 0; i < prompt.needle_indices.size(); ++i) {
            prompt.needle_payload.push_back(static_cast<int>(rng.below(cfg.vocab)));
        }
    } else {
        prompt.needle_payload = scenario.needle_payload;
    }

    std::vector<std::size_t> text_order(scenario.n_text > 0 ? scenario.n_text - 1 : 0);
    std::iota(text_order.begin(), text_order.end(), 0);
    rng.shuffle(text_order);
    prompt.key_text_positions.assign(text_order.begin(),
                                     text_order.begin() + static_cast<std::ptrdiff_t>(scenario.n_key_text));
    std::sort(prompt.key_text_positions.begin(), prompt.key_text_positions.end());

    const TokenLayout& layout = prompt.layout;
    prompt.embeddings = Matrix(layout.total(), d);
    for (std::size_t r = 0; r < layout.total(); ++r) {
        auto row = prompt.embeddings.row(r);
        for (std::size_t c = kContentBegin; c < d; ++c) row[c] = rng.normal() * kContentScale;
    }
    for (std::size_t i = 0; i < prompt.needle_indices.size(); ++i) {
        auto row = prompt.embeddings.row(layout.visual_begin() + prompt.needle_indices[i]);
        row[kNeedleMarker] = kMarkerAmplitude;
        const auto code = model.payload_code(prompt.needle_payload[i]);
        for (std::size_t c = 0; c < kPayloadDims; ++c) row[kPayloadBegin + c] = kPayloadAmplitude * code[c];
    }
    for (std::size_t idx : prompt.distractor_indices) {
        prompt.embeddings(layout.visual_begin() + idx, kDistractorMarker) = kMarkerAmplitude;
    }
    for (std::size_t t = 0; t + 1 < layout.n_text; ++t) {
        const bool key = std::binary_search(prompt.key_text_positions.begin(), prompt.key_text_positions.end(), t);
        prompt.embeddings(layout.text_begin() + t, key ? kKeyMarker : kFillerMarker) = kMarkerAmplitude;
    }
    prompt.embeddings(layout.total() - 1, kLastMarker) = kMarkerAmplitude;

    if (prompt.needle_indices.empty()) {
        if (continuation_steps >= 1) {
            PrefillResult pre = model.prefill(prompt.embeddings, layout);
            prompt.ground_truth = decode(model, pre.caches, pre.first_token, continuation_steps);
        }
    } else {
        prompt.ground_truth = prompt.needle_payload;
    }
    return prompt;
}

}  // namespace aircache
