#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "prunerec/model.hpp"
#include "prunerec/recdata.hpp"

namespace prunerec {

// Activation-mass concentration probe: how much of the absolute activation
// mass lives in the top K% of dimensions, per layer and per site.
struct ConcentrationReport {
    struct Row {
        int layer = 0;
        std::string site;  // "attn" or "mlp"
        double k_percent = 0.0;
        double ratio = 0.0;
    };
    std::vector<Row> rows;
    int sample_count = 0;
};

// Sum of the top ceil(d*k/100) absolute values over the total absolute sum.
double concentration_ratio(const std::vector<double>& values, double k_percent);

inline const std::vector<double> kDefaultKGrid = {1, 5, 10, 25, 50, 100};

// Captures attention outputs and MLP intermediate activations for B seeded
// train samples and averages concentration ratios. last_token_only mirrors
// the H_last convention; the alternative averages over all positions.
ConcentrationReport observe(const TransformerModel& model, const RecDataset& dataset,
                            int b, const std::vector<double>& k_grid, std::uint64_t seed,
                            bool last_token_only = true);

// WANDA-style score: |W[i,j]| * l2norm(X[:,i]).
TensorPtr wanda_score(const TensorPtr& weight, const TensorPtr& activations);

void save_concentration_report(const ConcentrationReport& report, const std::string& path);

}  // namespace prunerec
