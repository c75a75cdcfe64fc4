#pragma once

#include <optional>
#include <vector>

#include "prunerec/model.hpp"
#include "prunerec/recdata.hpp"

namespace prunerec {

// Per-layer, per-head scores. Raw scores are mean KL divergences; after
// normalization and propagation every entry lies in [0, 1].
using HeadScoreMatrix = std::vector<std::vector<double>>;

struct HeadImportance {
    HeadScoreMatrix scores;
    double alpha = 0.0;
    int calibration_count = 0;
};

struct DimImportance {
    std::vector<double> scores;  // length d_model, nonnegative
    int calibration_count = 0;
};

struct MlpDimStats {
    std::vector<std::vector<int>> counts;  // per layer, per dim, in [0, B]
    std::vector<double> tau;               // resolved threshold per layer
    int calibration_count = 0;
};

struct LayerImportance {
    std::vector<double> delta_ppl;  // per currently-present layer
    double baseline_ppl = 0.0;
};

// Mean over calibration sequences of KL(intact || head-suppressed) at the
// final position, epsilon fixed to 0. The intact distribution is computed
// once per sample and reused.
HeadScoreMatrix head_importance_raw(const TransformerModel& model,
                                    const std::vector<Encoded>& calib);

// Per-row (x - min) / (max - min); degenerate rows map to all 0.5.
HeadScoreMatrix minmax_normalize_rows(const HeadScoreMatrix& raw);

// Recursive cross-layer blend: layer 0 keeps its normalized scores, layer l
// gets alpha * propagated(l-1) + (1 - alpha) * normalized(l).
HeadImportance propagate_importance(const HeadScoreMatrix& normalized, double alpha);

// Per layer, the k_attn lowest-importance heads; ties prune the lower index.
std::vector<std::vector<int>> select_heads(const HeadImportance& imp, int k_attn);

// Mean |embedding * embedding-gradient| per hidden dimension at the token
// rows actually used, per-sample gradients, next-token CE loss.
DimImportance embedding_dim_importance(TransformerModel& model,
                                       const std::vector<Encoded>& calib);

// Top-k hidden dimensions by importance; ties keep the lower index.
// Returned sorted ascending, ready for prune_hidden_dims.
std::vector<int> select_hidden_dims(const DimImportance& imp, int keep);

// Activation-frequency counts over the last-token MLP pre-activations.
// tau == nullopt resolves to the per-layer median of pooled |H_last|.
MlpDimStats mlp_dim_stats(const TransformerModel& model, const std::vector<Encoded>& calib,
                          std::optional<double> tau);

// Per layer, the k_mlp most frequently activated dims; ties keep the lower
// index. Returned sorted ascending.
std::vector<std::vector<int>> select_mlp_dims(const MlpDimStats& stats, int k_mlp);

LayerImportance layer_delta_ppl(const TransformerModel& model,
                                const std::vector<std::vector<int>>& calib_sequences);

// Greedy removal down to k_layer layers. With recompute (the default) the
// delta-PPL scores are refreshed on the reduced model after each removal.
// Returns original layer indices in removal order.
std::vector<int> select_layers(const TransformerModel& model,
                               const std::vector<std::vector<int>>& calib_sequences,
                               int k_layer, bool recompute = true);

}  // namespace prunerec
