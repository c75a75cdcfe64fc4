#include "prunerec/importance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prunerec/errors.hpp"
#include "prunerec/prune.hpp"

namespace prunerec {

namespace {

// softmax of the final logit row, as a fresh [V] tensor
TensorPtr last_position_distribution(const TensorPtr& logits) {
    const std::int64_t vocab = logits->dim(1);
    const std::int64_t row = logits->dim(0) - 1;
    auto slice = make_tensor({vocab});
    std::copy_n(logits->data.data() + row * vocab, vocab, slice->data.data());
    return softmax_last_dim(slice);
}

std::vector<int> next_token_targets(const Encoded& enc) {
    std::vector<int> targets;
    for (std::size_t p = 0; p + 1 < enc.tokens.size(); ++p)
        targets.push_back(enc.tokens[p + 1]);
    targets.push_back(enc.target_token);
    return targets;
}

}  // namespace

HeadScoreMatrix head_importance_raw(const TransformerModel& model,
                                    const std::vector<Encoded>& calib) {
    if (calib.empty()) throw ContractError("head_importance_raw: empty calibration set");
    HeadScoreMatrix scores(static_cast<std::size_t>(model.n_layers()));
    for (int li = 0; li < model.n_layers(); ++li)
        scores[li].assign(static_cast<std::size_t>(model.layers[li].n_heads), 0.0);

    for (const Encoded& enc : calib) {
        TensorPtr base = last_position_distribution(forward(model, enc.tokens));
        for (int li = 0; li < model.n_layers(); ++li) {
            for (int hi = 0; hi < model.layers[li].n_heads; ++hi) {
                SuppressionSpec sup{li, hi, 0.0};
                TensorPtr perturbed =
                    last_position_distribution(forward(model, enc.tokens, &sup));
                scores[li][hi] += kl_divergence(base, perturbed)->data[0];
            }
        }
    }
    const double inv_b = 1.0 / static_cast<double>(calib.size());
    for (auto& row : scores)
        for (double& s : row) s *= inv_b;
    return scores;
}

HeadScoreMatrix minmax_normalize_rows(const HeadScoreMatrix& raw) {
    HeadScoreMatrix out = raw;
    for (auto& row : out) {
        if (row.empty()) continue;
        const auto [mn_it, mx_it] = std::minmax_element(row.begin(), row.end());
        const double mn = *mn_it, mx = *mx_it;
        if (mx == mn) {
            std::fill(row.begin(), row.end(), 0.5);  // no within-layer signal
        } else {
            for (double& v : row) v = (v - mn) / (mx - mn);
        }
    }
    return out;
}

HeadImportance propagate_importance(const HeadScoreMatrix& normalized, double alpha) {
    if (alpha < 0.0 || alpha > 1.0)
        throw ContractError("propagate_importance: alpha " + std::to_string(alpha) +
                            " outside [0, 1]");
    HeadImportance imp;
    imp.alpha = alpha;
    imp.scores = normalized;
    for (std::size_t l = 1; l < imp.scores.size(); ++l) {
        auto& cur = imp.scores[l];
        const auto& prev = imp.scores[l - 1];
        for (std::size_t i = 0; i < cur.size(); ++i) {
            const double carried = i < prev.size() ? prev[i] : 0.5;
            cur[i] = alpha * carried + (1.0 - alpha) * normalized[l][i];
        }
    }
    return imp;
}

std::vector<std::vector<int>> select_heads(const HeadImportance& imp, int k_attn) {
    std::vector<std::vector<int>> out;
    for (std::size_t l = 0; l < imp.scores.size(); ++l) {
        const auto& row = imp.scores[l];
        if (k_attn < 0 || k_attn >= static_cast<int>(row.size()))
            throw ContractError("select_heads: k_attn " + std::to_string(k_attn) +
                                " must be < heads " + std::to_string(row.size()) +
                                " in layer " + std::to_string(l));
        std::vector<int> idx(row.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&row](int a, int b) { return row[a] < row[b]; });
        idx.resize(static_cast<std::size_t>(k_attn));
        std::sort(idx.begin(), idx.end());
        out.push_back(std::move(idx));
    }
    return out;
}

DimImportance embedding_dim_importance(TransformerModel& model,
                                       const std::vector<Encoded>& calib) {
    if (calib.empty()) throw ContractError("embedding_dim_importance: empty calibration set");
    if (!model.token_embedding->requires_grad)
        throw ContractError("embedding_dim_importance: embedding does not require grad");
    const std::int64_t d_model = model.config.d_model;
    DimImportance imp;
    imp.scores.assign(static_cast<std::size_t>(d_model), 0.0);
    imp.calibration_count = static_cast<int>(calib.size());

    const TensorPtr& emb = model.token_embedding;
    for (const Encoded& enc : calib) {
        emb->zero_grad();  // per-sample gradients
        Tape tape;
        TensorPtr logits = forward(model, enc.tokens, nullptr, nullptr, &tape);
        TensorPtr loss = cross_entropy_logits(logits, next_token_targets(enc), &tape);
        backward(loss, tape);
        emb->ensure_grad();
        const double inv_s = 1.0 / static_cast<double>(enc.tokens.size());
        for (int tok : enc.tokens) {
            const double* e = emb->data.data() + static_cast<std::int64_t>(tok) * d_model;
            const double* g = emb->grad.data() + static_cast<std::int64_t>(tok) * d_model;
            for (std::int64_t d = 0; d < d_model; ++d)
                imp.scores[static_cast<std::size_t>(d)] += std::abs(e[d] * g[d]) * inv_s;
        }
    }
    const double inv_b = 1.0 / static_cast<double>(calib.size());
    for (double& s : imp.scores) s *= inv_b;
    emb->zero_grad();
    return imp;
}

std::vector<int> select_hidden_dims(const DimImportance& imp, int keep) {
    const int d = static_cast<int>(imp.scores.size());
    if (keep < 1 || keep > d)
        throw ContractError("select_hidden_dims: keep " + std::to_string(keep) +
                            " outside [1, " + std::to_string(d) + "]");
    std::vector<int> idx(static_cast<std::size_t>(d));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&imp](int a, int b) {
        return imp.scores[a] > imp.scores[b];  // stable keeps the lower index on ties
    });
    idx.resize(static_cast<std::size_t>(keep));
    std::sort(idx.begin(), idx.end());
    return idx;
}

MlpDimStats mlp_dim_stats(const TransformerModel& model, const std::vector<Encoded>& calib,
                          std::optional<double> tau) {
    if (calib.empty()) throw ContractError("mlp_dim_stats: empty calibration set");
    if (tau && *tau < 0.0) throw ContractError("mlp_dim_stats: tau must be >= 0");
    const int n_layers = model.n_layers();
    // gather |H_last| per layer per sample
    std::vector<std::vector<std::vector<double>>> h_last(
        static_cast<std::size_t>(n_layers));
    for (const Encoded& enc : calib) {
        Activations acts = capture_activations(model, enc.tokens);
        for (int li = 0; li < n_layers; ++li) {
            const TensorPtr& h = acts[li].mlp_preact;
            const std::int64_t d_ff = h->dim(1);
            const double* row = h->data.data() + (h->dim(0) - 1) * d_ff;
            std::vector<double> abs_row(static_cast<std::size_t>(d_ff));
            for (std::int64_t d = 0; d < d_ff; ++d) abs_row[d] = std::abs(row[d]);
            h_last[li].push_back(std::move(abs_row));
        }
    }
    MlpDimStats stats;
    stats.calibration_count = static_cast<int>(calib.size());
    for (int li = 0; li < n_layers; ++li) {
        double layer_tau;
        if (tau) {
            layer_tau = *tau;
        } else {
            // per-layer median of |H_last| pooled over dims and samples
            std::vector<double> pooled;
            for (const auto& row : h_last[li]) pooled.insert(pooled.end(), row.begin(), row.end());
            const std::size_t mid = pooled.size() / 2;
            std::nth_element(pooled.begin(), pooled.begin() + mid, pooled.end());
            layer_tau = pooled[mid];
        }
        stats.tau.push_back(layer_tau);
        const std::size_t d_ff = h_last[li].front().size();
        std::vector<int> counts(d_ff, 0);
        for (const auto& row : h_last[li])
            for (std::size_t d = 0; d < d_ff; ++d)
                if (row[d] > layer_tau) ++counts[d];
        stats.counts.push_back(std::move(counts));
    }
    return stats;
}

std::vector<std::vector<int>> select_mlp_dims(const MlpDimStats& stats, int k_mlp) {
    std::vector<std::vector<int>> out;
    for (std::size_t li = 0; li < stats.counts.size(); ++li) {
        const auto& counts = stats.counts[li];
        if (k_mlp < 1 || k_mlp > static_cast<int>(counts.size()))
            throw ContractError("select_mlp_dims: k_mlp " + std::to_string(k_mlp) +
                                " outside [1, " + std::to_string(counts.size()) +
                                "] in layer " + std::to_string(li));
        std::vector<int> idx(counts.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(),
                         [&counts](int a, int b) { return counts[a] > counts[b]; });
        idx.resize(static_cast<std::size_t>(k_mlp));
        std::sort(idx.begin(), idx.end());
        out.push_back(std::move(idx));
    }
    return out;
}

LayerImportance layer_delta_ppl(const TransformerModel& model,
                                const std::vector<std::vector<int>>& calib_sequences) {
    LayerImportance imp;
    imp.baseline_ppl = perplexity(model, calib_sequences);
    for (int li = 0; li < model.n_layers(); ++li) {
        LayerMask mask{{li}};
        imp.delta_ppl.push_back(perplexity(model, calib_sequences, &mask) - imp.baseline_ppl);
    }
    return imp;
}

std::vector<int> select_layers(const TransformerModel& model,
                               const std::vector<std::vector<int>>& calib_sequences,
                               int k_layer, bool recompute) {
    if (k_layer < 1 || k_layer > model.n_layers())
        throw ContractError("select_layers: k_layer " + std::to_string(k_layer) +
                            " outside [1, " + std::to_string(model.n_layers()) + "]");
    std::vector<int> removal_order;
    TransformerModel current = clone_model(model);
    std::vector<int> alive(static_cast<std::size_t>(model.n_layers()));
    std::iota(alive.begin(), alive.end(), 0);
    std::optional<LayerImportance> one_shot;
    if (!recompute) one_shot = layer_delta_ppl(current, calib_sequences);

    while (static_cast<int>(alive.size()) > k_layer) {
        std::size_t best = 0;
        if (recompute) {
            LayerImportance imp = layer_delta_ppl(current, calib_sequences);
            for (std::size_t j = 1; j < imp.delta_ppl.size(); ++j)
                if (imp.delta_ppl[j] < imp.delta_ppl[best]) best = j;
        } else {
            // one-shot scoring over original indices
            for (std::size_t j = 1; j < alive.size(); ++j)
                if (one_shot->delta_ppl[alive[j]] < one_shot->delta_ppl[alive[best]]) best = j;
        }
        removal_order.push_back(alive[best]);
        current = drop_layers(current, {static_cast<int>(best)});
        alive.erase(alive.begin() + static_cast<std::ptrdiff_t>(best));
    }
    return removal_order;
}

}  // namespace prunerec
