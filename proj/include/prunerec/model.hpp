#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "prunerec/tensor.hpp"

namespace prunerec {

struct ModelConfig {
    int n_layers = 0;
    int n_heads = 0;    // per layer at construction time
    int d_k = 0;        // head dimension
    int d_model = 0;    // residual width; d_model == n_heads * d_k pre-pruning only
    int d_ff = 0;       // MLP intermediate width at construction time
    int vocab_size = 0;
    int max_seq_len = 0;
    double rope_base = 10000.0;
    bool tie_embeddings = true;
    bool mlp_bias = true;

    void validate() const;
};

// One decoder block. heads and d_ff are per-layer so the model stays valid
// after ragged pruning.
struct LayerWeights {
    int n_heads = 0;
    int d_ff = 0;
    TensorPtr w_q, w_k, w_v;  // [d_model x heads*d_k]
    TensorPtr w_o;            // [heads*d_k x d_model]
    TensorPtr w_gate, w_up;   // [d_model x d_ff]
    TensorPtr w_down;         // [d_ff x d_model]
    TensorPtr b_gate, b_up;   // [d_ff], null when mlp_bias is off
    TensorPtr b_down;         // [d_model], null when mlp_bias is off
    TensorPtr attn_norm, mlp_norm;  // [d_model]
};

struct TransformerModel {
    ModelConfig config;
    TensorPtr token_embedding;  // [vocab x d_model]
    TensorPtr lm_head;          // [d_model x vocab]; null when tied (uses embedding^T)
    TensorPtr final_norm;       // [d_model]
    std::vector<LayerWeights> layers;

    int n_layers() const { return static_cast<int>(layers.size()); }

    // All weight tensors in a fixed serialization/optimizer order.
    std::vector<TensorPtr> parameters() const;
    void set_requires_grad(bool on);
    void zero_grads();
};

// Head suppression: the chosen head's pre-softmax attention
// logits are multiplied by epsilon.
struct SuppressionSpec {
    int layer = 0;
    int head = 0;
    double epsilon = 0.0;
};

struct LayerMask {
    std::set<int> skip;
};

// Side-channel capture of intermediate activations during a forward pass.
struct LayerActivations {
    TensorPtr attn_out;     // [S x d_model], attention sublayer output (post W_o)
    TensorPtr attn_concat;  // [S x heads*d_k], concatenated head outputs (pre W_o)
    TensorPtr mlp_preact;   // [S x d_ff], H = X W_up + b_up
};
using Activations = std::vector<LayerActivations>;

constexpr double kNormEps = 1e-6;

// Full pre-norm causal forward pass returning [S x vocab] logits. tape and
// capture may be null. Skipped layers are identity pass-throughs.
TensorPtr forward(const TransformerModel& model, std::span<const int> tokens,
                  const SuppressionSpec* suppress = nullptr,
                  const LayerMask* mask = nullptr, Tape* tape = nullptr,
                  Activations* capture = nullptr);

// Unmodified forward pass that returns the per-layer activation record.
Activations capture_activations(const TransformerModel& model, std::span<const int> tokens);

// exp(mean next-token NLL) over positions 1..S-1 of every sequence.
double perplexity(const TransformerModel& model,
                  const std::vector<std::vector<int>>& sequences,
                  const LayerMask* mask = nullptr);

// Deterministic seeded initialization: normal(0, 0.02) weights, residual
// output projections scaled by 1/sqrt(2L), unit norms, zero biases.
TransformerModel init_model(const ModelConfig& config, std::uint64_t seed);

// Deep copy (fresh tensor storage, tying preserved).
TransformerModel clone_model(const TransformerModel& model);

}  // namespace prunerec
