#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prunerec/distill.hpp"
#include "prunerec/evalmetrics.hpp"
#include "prunerec/importance.hpp"
#include "prunerec/model.hpp"
#include "prunerec/prune.hpp"
#include "prunerec/recdata.hpp"

namespace prunerec {

enum class CheckpointDtype { F64, F32 };

// "PRCK" binary checkpoint: magic, u32 version, u64 header length, textual
// header (config + tensor directory + payload checksum), then little-endian
// IEEE-754 payload at the stored precision.
void save_checkpoint(const TransformerModel& model, const std::string& path,
                     CheckpointDtype dtype = CheckpointDtype::F64,
                     const std::string& stage = "", const std::string& seed_lineage = "");
TransformerModel load_checkpoint(const std::string& path);
std::string inspect_checkpoint(const std::string& path);  // header text only

struct PipelineConfig {
    ModelConfig model{8, 8, 8, 64, 256, 0 /*derived*/, 16, 10000.0, true, true};
    GeneratorConfig data;
    std::string dataset_path;  // when set, load instead of generating
    int calib_b = 100;
    double alpha = 0.3;
    int k_attn = 4;
    int hidden_keep = -1;          // -1: d_k * (heads - k_attn)
    std::optional<double> tau;     // nullopt: per-layer auto threshold
    int k_mlp = -1;                // -1: 2 * current d_model at stage 2
    int k_layer = 5;
    DistillConfig distill_base, distill_stage1, distill_stage2, distill_stage3;
    std::uint64_t seed = 1;    // master seed for init/training/calibration
    std::string load_base;     // optional checkpoint to reuse as the base model

    int resolved_hidden_keep() const;
    int resolved_k_mlp(int current_d_model) const;
};

PipelineConfig parse_pipeline_config(const std::string& path);
void apply_config_line(PipelineConfig& config, const std::string& line);

struct StageResult {
    TransformerModel model;
    PruningPlan plan;
    bool restored = false;
    double hr20_pre_restore = 0.0;   // valid split
    double hr20_post_restore = 0.0;  // valid split; equals pre when skipped
};

StageResult run_stage1(const TransformerModel& model, const RecDataset& dataset,
                       const PipelineConfig& config, const std::string& out_dir);
StageResult run_stage2(const TransformerModel& model, const RecDataset& dataset,
                       const PipelineConfig& config, const std::string& out_dir);
StageResult run_stage3(const TransformerModel& model, const RecDataset& dataset,
                       const PipelineConfig& config, const std::string& out_dir);

struct LedgerRow {
    std::string stage;
    std::int64_t param_count_non_embedding = 0;
    double hr20 = 0.0;
    double ndcg20 = 0.0;
};

struct PipelineResult {
    TransformerModel final_model;
    EvalReport final_eval;  // test split
    std::vector<LedgerRow> ledger;
    std::vector<StageResult> stages;
};

PipelineResult run_pipeline(const PipelineConfig& config, const std::string& out_dir);

struct StrategyOutcome {
    std::string strategy;
    std::uint64_t seed = 0;
    double hr20 = 0.0;
    double ndcg20 = 0.0;
};

struct ComparisonTable {
    std::vector<StrategyOutcome> rows;
    std::map<std::string, std::pair<double, double>> medians;  // hr20, ndcg20
};

inline const std::vector<std::string> kAllStrategies = {"prunerec", "random", "wanda",
                                                        "no_alpha", "global_importance"};

// Head-selection strategy comparison: each strategy prunes k_attn heads per layer from
// a per-seed base model, restores identically, and is scored on valid.
ComparisonTable compare_baselines(const PipelineConfig& config,
                                  const std::vector<std::string>& strategies,
                                  const std::vector<std::uint64_t>& seeds,
                                  const std::string& out_dir);

// Valid-split HR@k / NDCG@k without the perplexity pass.
std::pair<double, double> quick_hr_ndcg(const TransformerModel& model,
                                        const RecDataset& dataset, Split split, int k);

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t salt);

// Importance report rows: kind, layer (or -1), index, score.
struct ImportanceRow {
    std::string kind;
    int layer = -1;
    int index = 0;
    double score = 0.0;
};
void save_importance_report(const std::vector<ImportanceRow>& rows, const std::string& path);

void save_ledger(const std::vector<LedgerRow>& ledger, const std::string& path);

}  // namespace prunerec
