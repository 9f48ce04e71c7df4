#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "aircache/attention.hpp"
#include "aircache/kv_cache.hpp"
#include "aircache/matrix.hpp"

namespace aircache {

struct ToyModelConfig {
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t hidden_dim = 64;
    std::size_t vocab = 256;
    std::uint64_t seed = 0;
    AttentionOptions attention;

    void validate() const;
};

// Reserved residual-stream coordinates. Blocks never write the marker or
// payload coordinates except through the planted copy path, so the markers
// carried by the prompt embeddings reach every layer unchanged.
//
// Each head additionally reserves three query/key channels at the start of
// its column block: relevance (last text token -> key text tokens),
// retrieval (key text / generated tokens -> needles) and distraction
// (filler text -> distractor visual tokens).
namespace residual {
inline constexpr std::size_t kLastMarker = 0;
inline constexpr std::size_t kKeyMarker = 1;
inline constexpr std::size_t kNeedleMarker = 2;
inline constexpr std::size_t kGenMarker = 3;
inline constexpr std::size_t kFillerMarker = 4;
inline constexpr std::size_t kDistractorMarker = 5;
inline constexpr std::size_t kPayloadBegin = 6;
inline constexpr std::size_t kPayloadDims = 12;
inline constexpr std::size_t kContentBegin = kPayloadBegin + kPayloadDims;

inline constexpr std::size_t kRelevanceChannel = 0;
inline constexpr std::size_t kRetrievalChannel = 1;
inline constexpr std::size_t kDistractionChannel = 2;

inline constexpr std::size_t kMinHiddenDim = 32;
inline constexpr std::size_t kMinHeadDim = 4;
}  // namespace residual

struct ToyLayerWeights {
    ProjectionWeights qkv;
    Matrix w_out;
    Matrix w_up;
    Matrix w_down;
    double retrieval_gain = 0.0;
};

struct LayerPrefill {
    Matrix q;
    Matrix k;
    Matrix v;
    Matrix attention;  // head-averaged causal map, N x N
};

struct PrefillResult {
    TokenLayout layout;
    std::vector<LayerPrefill> layers;
    std::vector<LayerCache> caches;
    std::vector<double> last_logits;
    int first_token = 0;  // greedy token predicted from the last prompt position
};

struct StepResult {
    std::vector<double> logits;
    std::vector<std::size_t> attended_columns;  // per layer, after the append
};

class ToyModel {
public:
    // Seeded weights; identical config gives identical weights.
    static ToyModel build(const ToyModelConfig& config);

    const ToyModelConfig& config() const noexcept { return config_; }
    const std::vector<ToyLayerWeights>& layers() const noexcept { return layers_; }

    std::span<const double> embedding(int token) const;
    // Fixed linear code of a token inside the payload coordinates.
    std::span<const double> payload_code(int token) const;

    // Adds the sinusoidal position to the content coordinates of `row`.
    void add_position(std::span<double> row, std::size_t position) const;

    // Causal forward over input embeddings at positions 0..N-1.
    PrefillResult prefill(const Matrix& embeddings, const TokenLayout& layout) const;

    // Logits for every position; positions are added internally.
    Matrix forward_logits(const Matrix& embeddings) const;

    // Feeds `token` at the caches' next position, appends one row per layer.
    StepResult step(std::vector<LayerCache>& caches, int token) const;

    std::size_t vocab() const noexcept { return config_.vocab; }

private:
    ToyModelConfig config_;
    std::vector<ToyLayerWeights> layers_;
    Matrix embeddings_;  // vocab x D
    Matrix codes_;       // vocab x payload dims
    Matrix unembed_;     // D x vocab
};

int argmax(std::span<const double> values);

// Greedy decode of `steps` tokens. `first_token` is fed first; every step
// appends one row per layer and yields the next token.
std::vector<int> decode(const ToyModel& model, std::vector<LayerCache>& caches, int first_token, int steps);

struct NeedleScenario {
    std::size_t n_system = 4;
    std::size_t n_visual = 200;
    std::size_t n_text = 16;
    std::size_t n_needles = 10;
    std::size_t n_key_text = 3;
    std::size_t n_distractors = 20;
    // Explicit placement and payload; drawn from the seed when empty.
    std::vector<std::size_t> needle_indices;
    std::vector<int> needle_payload;

    void validate() const;
};

struct NeedlePrompt {
    Matrix embeddings;
    TokenLayout layout;
    std::vector<std::size_t> needle_indices;      // visual-segment positions, ascending
    std::vector<int> needle_payload;
    std::vector<std::size_t> distractor_indices;  // visual-segment positions, ascending
    std::vector<std::size_t> key_text_positions;  // text-segment positions, ascending
    std::vector<int> ground_truth;
};

// Visual rows are noise except needles (payload code plus a needle marker)
// and distractors. Key text tokens and the last text token carry the query
// markers that steer attention toward needles. With no needles the ground
// truth is the model's own full-cache continuation of `continuation_steps`.
NeedlePrompt generate_needle_prompt(const ToyModel& model, const NeedleScenario& scenario, std::uint64_t seed,
                                    int continuation_steps = 8);

}  // namespace aircache
