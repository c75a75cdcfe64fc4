#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "prunerec/model.hpp"

namespace prunerec {

// Explicit surgery recipe. Index sets are sorted ascending; an absent
// optional means "leave that axis alone".
struct PruningPlan {
    std::vector<std::vector<int>> heads_to_prune;  // per layer, may be empty
    std::optional<std::vector<int>> hidden_dims_to_keep;
    std::optional<std::vector<std::vector<int>>> mlp_dims_to_keep;  // per layer
    std::optional<std::vector<int>> layers_to_remove;
    std::string provenance;
};

// Each transform is pure: the input model is never touched and the result is
// freshly allocated, exactly equal to the masked original.

TransformerModel prune_heads(const TransformerModel& model,
                             const std::vector<std::vector<int>>& heads_to_prune);
TransformerModel prune_hidden_dims(const TransformerModel& model,
                                   const std::vector<int>& keep);
TransformerModel prune_mlp_dims(const TransformerModel& model,
                                const std::vector<std::vector<int>>& keep_per_layer);
TransformerModel drop_layers(const TransformerModel& model, const std::vector<int>& remove);

TransformerModel apply_plan(const TransformerModel& model, const PruningPlan& plan);

// Seeded uniform choice of k_attn heads per layer (the "random" comparison strategy).
PruningPlan random_head_plan(const TransformerModel& model, int k_attn, std::uint64_t seed);

// Total scalar parameters. Excluding embeddings omits token_embedding (and a
// tied lm_head, which shares its storage); an untied lm_head always counts.
std::int64_t param_count(const TransformerModel& model, bool include_embeddings);

void save_plan(const PruningPlan& plan, const std::string& path);
PruningPlan load_plan(const std::string& path);

}  // namespace prunerec
