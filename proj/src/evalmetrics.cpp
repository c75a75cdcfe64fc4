#include "prunerec/evalmetrics.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "prunerec/errors.hpp"
#include "prunerec/prune.hpp"
#include "prunerec/rng.hpp"

namespace prunerec {

int rank_from_logits(const std::vector<double>& item_logits, int target_token) {
    if (target_token < 0 || target_token >= static_cast<int>(item_logits.size()))
        throw ContractError("rank_from_logits: target " + std::to_string(target_token) +
                            " is not an item token");
    const double t = item_logits[static_cast<std::size_t>(target_token)];
    int rank = 1;
    for (int j = 0; j < static_cast<int>(item_logits.size()); ++j) {
        const double v = item_logits[static_cast<std::size_t>(j)];
        if (v > t || (v == t && j < target_token)) ++rank;
    }
    return rank;
}

int rank_target(const TransformerModel& model, const Encoded& encoded, int n_items) {
    if (encoded.target_token < 0 || encoded.target_token >= n_items)
        throw ContractError("rank_target: target token " +
                            std::to_string(encoded.target_token) + " is not an item token");
    TensorPtr logits = forward(model, encoded.tokens);
    const std::int64_t vocab = logits->dim(1);
    const double* row = logits->data.data() + encoded.loss_position * vocab;
    std::vector<double> item_logits(row, row + n_items);
    return rank_from_logits(item_logits, encoded.target_token);
}

double hr_at_k(const std::vector<int>& ranks, int k) {
    if (ranks.empty()) throw ContractError("hr_at_k: empty rank list");
    if (k < 1) throw ContractError("hr_at_k: k must be >= 1");
    double hits = 0.0;
    for (int r : ranks) {
        if (r < 1) throw ContractError("hr_at_k: rank below 1");
        if (r <= k) hits += 1.0;
    }
    return hits / static_cast<double>(ranks.size());
}

double ndcg_at_k(const std::vector<int>& ranks, int k) {
    if (ranks.empty()) throw ContractError("ndcg_at_k: empty rank list");
    if (k < 1) throw ContractError("ndcg_at_k: k must be >= 1");
    double gain = 0.0;
    for (int r : ranks) {
        if (r < 1) throw ContractError("ndcg_at_k: rank below 1");
        if (r <= k) gain += 1.0 / std::log2(static_cast<double>(r) + 1.0);
    }
    return gain / static_cast<double>(ranks.size());
}

EvalReport evaluate(const TransformerModel& model, const RecDataset& dataset, Split split,
                    const std::vector<int>& k_list, const EvalOptions& options) {
    const std::vector<int>& indices = dataset.split_indices(split);
    if (indices.empty()) throw ContractError("evaluate: empty split");

    std::vector<int> ranks;
    ranks.reserve(indices.size());
    std::vector<std::vector<int>> ppl_sequences;
    ppl_sequences.reserve(indices.size());
    for (int idx : indices) {
        const Encoded enc = encode(dataset, idx);
        TensorPtr logits = forward(model, enc.tokens);
        const std::int64_t vocab = logits->dim(1);
        const double* row = logits->data.data() + enc.loss_position * vocab;
        std::vector<double> item_logits(row, row + dataset.n_items);
        if (options.tie_break_noise_seed) {
            Rng rng(*options.tie_break_noise_seed +
                    static_cast<std::uint64_t>(idx) * 0x9e3779b97f4a7c15ULL);
            for (double& v : item_logits) v += rng.uniform() * 1e-9;
        }
        ranks.push_back(rank_from_logits(item_logits, enc.target_token));
        ppl_sequences.push_back(full_token_sequence(dataset, idx));
    }

    EvalReport report;
    for (int k : k_list) {
        report.hr[k] = hr_at_k(ranks, k);
        report.ndcg[k] = ndcg_at_k(ranks, k);
    }
    report.ppl = perplexity(model, ppl_sequences);
    report.n_evaluated = static_cast<int>(indices.size());
    report.param_count_non_embedding = param_count(model, false);
    return report;
}

void save_eval_report(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << std::setprecision(17);
    out << "n_evaluated=" << report.n_evaluated << "\n";
    out << "ppl=" << report.ppl << "\n";
    out << "param_count_non_embedding=" << report.param_count_non_embedding << "\n";
    for (const auto& [k, v] : report.hr) out << "hr@" << k << "=" << v << "\n";
    for (const auto& [k, v] : report.ndcg) out << "ndcg@" << k << "=" << v << "\n";
    // one machine-readable row for cross-run comparison files
    out << "row\t" << report.param_count_non_embedding << '\t' << report.ppl;
    for (const auto& [k, v] : report.hr) out << '\t' << v;
    for (const auto& [k, v] : report.ndcg) out << '\t' << v;
    out << "\n";
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace prunerec
