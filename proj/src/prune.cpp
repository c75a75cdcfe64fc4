#include "prunerec/prune.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "prunerec/errors.hpp"
#include "prunerec/rng.hpp"

namespace prunerec {

namespace {

TensorPtr take_rows(const TensorPtr& t, const std::vector<int>& keep) {
    const std::int64_t cols = t->dim(1);
    auto out = make_tensor({static_cast<std::int64_t>(keep.size()), cols});
    for (std::size_t r = 0; r < keep.size(); ++r)
        std::copy_n(t->data.data() + static_cast<std::int64_t>(keep[r]) * cols, cols,
                    out->data.data() + static_cast<std::int64_t>(r) * cols);
    return out;
}

TensorPtr take_cols(const TensorPtr& t, const std::vector<int>& keep) {
    const std::int64_t rows = t->dim(0), cols = t->dim(1);
    const std::int64_t w = static_cast<std::int64_t>(keep.size());
    auto out = make_tensor({rows, w});
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < w; ++c)
            out->data[r * w + c] = t->data[r * cols + keep[static_cast<std::size_t>(c)]];
    return out;
}

TensorPtr take_vec(const TensorPtr& t, const std::vector<int>& keep) {
    auto out = make_tensor({static_cast<std::int64_t>(keep.size())});
    for (std::size_t i = 0; i < keep.size(); ++i) out->data[i] = t->data[keep[i]];
    return out;
}

void check_strictly_increasing(const std::vector<int>& v, int limit, const char* what) {
    if (v.empty()) throw ContractError(std::string(what) + ": empty keep set");
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] < 0 || v[i] >= limit)
            throw PlanError(std::string(what) + ": index " + std::to_string(v[i]) +
                            " out of range " + std::to_string(limit));
        if (i > 0 && v[i] <= v[i - 1])
            throw PlanError(std::string(what) + ": indices not strictly increasing");
    }
}

}  // namespace

TransformerModel prune_heads(const TransformerModel& model,
                             const std::vector<std::vector<int>>& heads_to_prune) {
    if (static_cast<int>(heads_to_prune.size()) != model.n_layers())
        throw PlanError("prune_heads: plan covers " + std::to_string(heads_to_prune.size()) +
                        " layers, model has " + std::to_string(model.n_layers()));
    TransformerModel out = clone_model(model);
    const int d_k = model.config.d_k;
    for (int li = 0; li < model.n_layers(); ++li) {
        const LayerWeights& layer = model.layers[li];
        std::set<int> pruned;
        for (int h : heads_to_prune[li]) {
            if (h < 0 || h >= layer.n_heads)
                throw PlanError("prune_heads: layer " + std::to_string(li) + " head " +
                                std::to_string(h) + " out of range");
            if (!pruned.insert(h).second)
                throw PlanError("prune_heads: layer " + std::to_string(li) +
                                " duplicates head " + std::to_string(h));
        }
        if (static_cast<int>(pruned.size()) >= layer.n_heads)
            throw PlanError("prune_heads: layer " + std::to_string(li) +
                            " would lose every head");
        if (pruned.empty()) continue;
        std::vector<int> keep_cols;
        int kept_heads = 0;
        for (int h = 0; h < layer.n_heads; ++h) {
            if (pruned.count(h)) continue;
            ++kept_heads;
            for (int j = 0; j < d_k; ++j) keep_cols.push_back(h * d_k + j);
        }
        LayerWeights& dst = out.layers[li];
        dst.w_q = take_cols(layer.w_q, keep_cols);
        dst.w_k = take_cols(layer.w_k, keep_cols);
        dst.w_v = take_cols(layer.w_v, keep_cols);
        dst.w_o = take_rows(layer.w_o, keep_cols);
        dst.n_heads = kept_heads;
    }
    return out;
}

TransformerModel prune_hidden_dims(const TransformerModel& model,
                                   const std::vector<int>& keep) {
    check_strictly_increasing(keep, model.config.d_model, "prune_hidden_dims");
    TransformerModel out = clone_model(model);
    out.token_embedding = take_cols(model.token_embedding, keep);
    if (model.lm_head) out.lm_head = take_rows(model.lm_head, keep);
    out.final_norm = take_vec(model.final_norm, keep);
    for (int li = 0; li < model.n_layers(); ++li) {
        const LayerWeights& src = model.layers[li];
        LayerWeights& dst = out.layers[li];
        dst.w_q = take_rows(src.w_q, keep);
        dst.w_k = take_rows(src.w_k, keep);
        dst.w_v = take_rows(src.w_v, keep);
        dst.w_o = take_cols(src.w_o, keep);
        dst.w_gate = take_rows(src.w_gate, keep);
        dst.w_up = take_rows(src.w_up, keep);
        dst.w_down = take_cols(src.w_down, keep);
        if (src.b_down) dst.b_down = take_vec(src.b_down, keep);
        dst.attn_norm = take_vec(src.attn_norm, keep);
        dst.mlp_norm = take_vec(src.mlp_norm, keep);
    }
    out.config.d_model = static_cast<int>(keep.size());
    return out;
}

TransformerModel prune_mlp_dims(const TransformerModel& model,
                                const std::vector<std::vector<int>>& keep_per_layer) {
    if (static_cast<int>(keep_per_layer.size()) != model.n_layers())
        throw PlanError("prune_mlp_dims: plan covers " +
                        std::to_string(keep_per_layer.size()) + " layers, model has " +
                        std::to_string(model.n_layers()));
    TransformerModel out = clone_model(model);
    for (int li = 0; li < model.n_layers(); ++li) {
        const std::vector<int>& keep = keep_per_layer[li];
        const LayerWeights& src = model.layers[li];
        check_strictly_increasing(keep, src.d_ff,
                                  ("prune_mlp_dims layer " + std::to_string(li)).c_str());
        LayerWeights& dst = out.layers[li];
        dst.w_gate = take_cols(src.w_gate, keep);
        dst.w_up = take_cols(src.w_up, keep);
        dst.w_down = take_rows(src.w_down, keep);
        if (src.b_gate) dst.b_gate = take_vec(src.b_gate, keep);
        if (src.b_up) dst.b_up = take_vec(src.b_up, keep);
        dst.d_ff = static_cast<int>(keep.size());
    }
    return out;
}

TransformerModel drop_layers(const TransformerModel& model, const std::vector<int>& remove) {
    std::set<int> gone(remove.begin(), remove.end());
    for (int l : gone)
        if (l < 0 || l >= model.n_layers())
            throw PlanError("drop_layers: layer " + std::to_string(l) + " out of range");
    if (static_cast<int>(gone.size()) >= model.n_layers())
        throw ContractError("drop_layers: cannot remove every layer");
    TransformerModel out = clone_model(model);
    std::vector<LayerWeights> kept;
    for (int li = 0; li < model.n_layers(); ++li)
        if (!gone.count(li)) kept.push_back(std::move(out.layers[li]));
    out.layers = std::move(kept);
    out.config.n_layers = static_cast<int>(out.layers.size());
    return out;
}

TransformerModel apply_plan(const TransformerModel& model, const PruningPlan& plan) {
    TransformerModel out = clone_model(model);
    if (!plan.heads_to_prune.empty()) out = prune_heads(out, plan.heads_to_prune);
    if (plan.hidden_dims_to_keep) out = prune_hidden_dims(out, *plan.hidden_dims_to_keep);
    if (plan.mlp_dims_to_keep) out = prune_mlp_dims(out, *plan.mlp_dims_to_keep);
    if (plan.layers_to_remove) out = drop_layers(out, *plan.layers_to_remove);
    return out;
}

PruningPlan random_head_plan(const TransformerModel& model, int k_attn, std::uint64_t seed) {
    if (k_attn < 0) throw ContractError("random_head_plan: negative k_attn");
    Rng rng(seed);
    PruningPlan plan;
    plan.provenance = "random seed=" + std::to_string(seed);
    for (int li = 0; li < model.n_layers(); ++li) {
        const int heads = model.layers[li].n_heads;
        if (k_attn >= heads)
            throw ContractError("random_head_plan: k_attn " + std::to_string(k_attn) +
                                " >= heads " + std::to_string(heads) + " in layer " +
                                std::to_string(li));
        std::vector<int> idx(static_cast<std::size_t>(heads));
        std::iota(idx.begin(), idx.end(), 0);
        rng.shuffle(idx);
        idx.resize(static_cast<std::size_t>(k_attn));
        std::sort(idx.begin(), idx.end());
        plan.heads_to_prune.push_back(std::move(idx));
    }
    return plan;
}

std::int64_t param_count(const TransformerModel& model, bool include_embeddings) {
    std::int64_t total = 0;
    for (const auto& l : model.layers) {
        total += l.w_q->numel() + l.w_k->numel() + l.w_v->numel() + l.w_o->numel();
        total += l.w_gate->numel() + l.w_up->numel() + l.w_down->numel();
        if (l.b_gate) total += l.b_gate->numel();
        if (l.b_up) total += l.b_up->numel();
        if (l.b_down) total += l.b_down->numel();
        total += l.attn_norm->numel() + l.mlp_norm->numel();
    }
    total += model.final_norm->numel();
    if (model.lm_head) total += model.lm_head->numel();
    if (include_embeddings) total += model.token_embedding->numel();
    return total;
}

namespace {

std::string join_indices(const std::vector<int>& v) {
    if (v.empty()) return "-";
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s += ',';
        s += std::to_string(v[i]);
    }
    return s;
}

std::vector<int> parse_indices(const std::string& s) {
    std::vector<int> out;
    if (s == "-") return out;
    std::istringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) out.push_back(std::stoi(tok));
    return out;
}

}  // namespace

void save_plan(const PruningPlan& plan, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "# prunerec-plan v1\n";
    out << "# provenance=" << plan.provenance << "\n";
    for (std::size_t li = 0; li < plan.heads_to_prune.size(); ++li)
        out << "heads " << li << " " << join_indices(plan.heads_to_prune[li]) << "\n";
    if (plan.hidden_dims_to_keep)
        out << "hidden - " << join_indices(*plan.hidden_dims_to_keep) << "\n";
    if (plan.mlp_dims_to_keep)
        for (std::size_t li = 0; li < plan.mlp_dims_to_keep->size(); ++li)
            out << "mlp " << li << " " << join_indices((*plan.mlp_dims_to_keep)[li]) << "\n";
    if (plan.layers_to_remove)
        out << "layers - " << join_indices(*plan.layers_to_remove) << "\n";
    if (!out) throw IoError("write failed for " + path);
}

PruningPlan load_plan(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line) || line != "# prunerec-plan v1")
        throw IoError("bad plan header in " + path);
    PruningPlan plan;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("# provenance=", 0) == 0) {
            plan.provenance = line.substr(13);
            continue;
        }
        std::istringstream row(line);
        std::string kind, layer, indices;
        if (!(row >> kind >> layer >> indices)) throw IoError("malformed plan row: " + line);
        if (kind == "heads") {
            const std::size_t li = std::stoul(layer);
            if (plan.heads_to_prune.size() <= li) plan.heads_to_prune.resize(li + 1);
            plan.heads_to_prune[li] = parse_indices(indices);
        } else if (kind == "hidden") {
            plan.hidden_dims_to_keep = parse_indices(indices);
        } else if (kind == "mlp") {
            const std::size_t li = std::stoul(layer);
            if (!plan.mlp_dims_to_keep) plan.mlp_dims_to_keep.emplace();
            if (plan.mlp_dims_to_keep->size() <= li) plan.mlp_dims_to_keep->resize(li + 1);
            (*plan.mlp_dims_to_keep)[li] = parse_indices(indices);
        } else if (kind == "layers") {
            plan.layers_to_remove = parse_indices(indices);
        } else {
            throw IoError("unknown plan row kind: " + kind);
        }
    }
    return plan;
}

}  // namespace prunerec
