#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "prunerec/model.hpp"
#include "prunerec/recdata.hpp"

namespace prunerec {

struct EvalReport {
    std::map<int, double> hr;
    std::map<int, double> ndcg;
    double ppl = 0.0;
    int n_evaluated = 0;
    std::int64_t param_count_non_embedding = 0;
};

struct EvalOptions {
    // When set, adds tiny seeded noise to item logits before ranking so ties
    // are broken randomly instead of by token id.
    std::optional<std::uint64_t> tie_break_noise_seed;
};

// 1-based rank of the target among the item logits, descending; exact ties
// rank the lower token id first.
int rank_from_logits(const std::vector<double>& item_logits, int target_token);

// Ranks the target over the full item catalog using the logit row at the
// prediction position.
int rank_target(const TransformerModel& model, const Encoded& encoded, int n_items);

double hr_at_k(const std::vector<int>& ranks, int k);
double ndcg_at_k(const std::vector<int>& ranks, int k);

EvalReport evaluate(const TransformerModel& model, const RecDataset& dataset, Split split,
                    const std::vector<int>& k_list, const EvalOptions& options = {});

void save_eval_report(const EvalReport& report, const std::string& path);

}  // namespace prunerec
