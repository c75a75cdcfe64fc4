#include "prunerec/model.hpp"

#include <cmath>
#include <cstring>

#include "prunerec/errors.hpp"
#include "prunerec/rng.hpp"

namespace prunerec {

void ModelConfig::validate() const {
    if (n_layers < 1 || n_heads < 1 || d_k < 1 || d_model < 1 || d_ff < 1 ||
        vocab_size < 1 || max_seq_len < 1)
        throw ContractError("model config: all counts must be >= 1");
    if (d_k % 2 != 0) throw ContractError("model config: d_k must be even for rotary encoding");
    if (rope_base <= 1.0) throw ContractError("model config: rope_base must exceed 1");
}

std::vector<TensorPtr> TransformerModel::parameters() const {
    std::vector<TensorPtr> out;
    out.push_back(token_embedding);
    for (const auto& l : layers) {
        out.push_back(l.w_q);
        out.push_back(l.w_k);
        out.push_back(l.w_v);
        out.push_back(l.w_o);
        out.push_back(l.w_gate);
        out.push_back(l.w_up);
        out.push_back(l.w_down);
        if (l.b_gate) out.push_back(l.b_gate);
        if (l.b_up) out.push_back(l.b_up);
        if (l.b_down) out.push_back(l.b_down);
        out.push_back(l.attn_norm);
        out.push_back(l.mlp_norm);
    }
    out.push_back(final_norm);
    if (lm_head) out.push_back(lm_head);
    return out;
}

void TransformerModel::set_requires_grad(bool on) {
    for (auto& p : parameters()) p->requires_grad = on;
}

void TransformerModel::zero_grads() {
    for (auto& p : parameters()) p->zero_grad();
}

namespace {

void validate_tokens(const TransformerModel& model, std::span<const int> tokens) {
    if (tokens.empty()) throw ContractError("forward: empty token sequence");
    if (static_cast<int>(tokens.size()) > model.config.max_seq_len)
        throw ContractError("forward: sequence length " + std::to_string(tokens.size()) +
                            " exceeds max_seq_len " +
                            std::to_string(model.config.max_seq_len));
    for (int t : tokens)
        if (t < 0 || t >= model.config.vocab_size)
            throw IndexError("forward: token id " + std::to_string(t) +
                             " out of range for vocab " +
                             std::to_string(model.config.vocab_size));
}

void validate_hooks(const TransformerModel& model, const SuppressionSpec* suppress,
                    const LayerMask* mask) {
    if (suppress) {
        if (suppress->layer < 0 || suppress->layer >= model.n_layers())
            throw IndexError("suppression layer " + std::to_string(suppress->layer) +
                             " out of range");
        if (suppress->head < 0 || suppress->head >= model.layers[suppress->layer].n_heads)
            throw IndexError("suppression head " + std::to_string(suppress->head) +
                             " out of range for layer " + std::to_string(suppress->layer));
        if (suppress->epsilon < 0.0 || suppress->epsilon > 1.0)
            throw ContractError("suppression epsilon must lie in [0, 1]");
    }
    if (mask)
        for (int l : mask->skip)
            if (l < 0 || l >= model.n_layers())
                throw ContractError("layer mask index " + std::to_string(l) + " out of range");
}

}  // namespace

TensorPtr forward(const TransformerModel& model, std::span<const int> tokens,
                  const SuppressionSpec* suppress, const LayerMask* mask, Tape* tape,
                  Activations* capture) {
    validate_tokens(model, tokens);
    validate_hooks(model, suppress, mask);
    if (capture) capture->clear();

    std::vector<int> ids(tokens.begin(), tokens.end());
    TensorPtr x = embedding_rows(model.token_embedding, ids, tape);

    for (int li = 0; li < model.n_layers(); ++li) {
        if (mask && mask->skip.count(li)) {
            if (capture) capture->emplace_back();
            continue;
        }
        const LayerWeights& layer = model.layers[li];
        const int d_k = model.config.d_k;
        const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(d_k));

        // attention sublayer
        TensorPtr h = rms_norm(x, layer.attn_norm, kNormEps, tape);
        TensorPtr q = rope(matmul(h, layer.w_q, tape), d_k, model.config.rope_base, tape);
        TensorPtr k = rope(matmul(h, layer.w_k, tape), d_k, model.config.rope_base, tape);
        TensorPtr v = matmul(h, layer.w_v, tape);
        std::vector<TensorPtr> head_outputs;
        head_outputs.reserve(static_cast<std::size_t>(layer.n_heads));
        for (int hi = 0; hi < layer.n_heads; ++hi) {
            TensorPtr qi = slice_cols(q, static_cast<std::int64_t>(hi) * d_k, d_k, tape);
            TensorPtr ki = slice_cols(k, static_cast<std::int64_t>(hi) * d_k, d_k, tape);
            TensorPtr vi = slice_cols(v, static_cast<std::int64_t>(hi) * d_k, d_k, tape);
            double factor = inv_sqrt_dk;
            if (suppress && suppress->layer == li && suppress->head == hi)
                factor = suppress->epsilon * inv_sqrt_dk;
            TensorPtr scores = scale(matmul_bt(qi, ki, tape), factor, tape);
            TensorPtr attn = softmax_last_dim(causal_mask(scores, tape), tape);
            head_outputs.push_back(matmul(attn, vi, tape));
        }
        TensorPtr concat = concat_cols(head_outputs, tape);
        TensorPtr attn_out = matmul(concat, layer.w_o, tape);
        x = add(x, attn_out, tape);

        // gated MLP sublayer
        TensorPtr h2 = rms_norm(x, layer.mlp_norm, kNormEps, tape);
        TensorPtr gate = matmul(h2, layer.w_gate, tape);
        if (layer.b_gate) gate = add_bias(gate, layer.b_gate, tape);
        TensorPtr up = matmul(h2, layer.w_up, tape);
        if (layer.b_up) up = add_bias(up, layer.b_up, tape);
        TensorPtr inner = mul(silu(gate, tape), up, tape);
        TensorPtr down = matmul(inner, layer.w_down, tape);
        if (layer.b_down) down = add_bias(down, layer.b_down, tape);
        x = add(x, down, tape);

        if (capture) capture->push_back({attn_out, concat, up});
    }

    x = rms_norm(x, model.final_norm, kNormEps, tape);
    if (model.lm_head) return matmul(x, model.lm_head, tape);
    return matmul_bt(x, model.token_embedding, tape);
}

Activations capture_activations(const TransformerModel& model, std::span<const int> tokens) {
    Activations acts;
    forward(model, tokens, nullptr, nullptr, nullptr, &acts);
    return acts;
}

double perplexity(const TransformerModel& model,
                  const std::vector<std::vector<int>>& sequences, const LayerMask* mask) {
    if (sequences.empty()) throw ContractError("perplexity: empty dataset slice");
    double total_nll = 0.0;
    std::int64_t total_positions = 0;
    const std::int64_t vocab = model.config.vocab_size;
    for (const auto& seq : sequences) {
        if (seq.size() < 2) continue;
        TensorPtr logits = forward(model, seq, nullptr, mask);
        const std::int64_t rows = static_cast<std::int64_t>(seq.size()) - 1;
        for (std::int64_t r = 0; r < rows; ++r) {
            const double* row = logits->data.data() + r * vocab;
            double mx = row[0];
            for (std::int64_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (std::int64_t j = 0; j < vocab; ++j) sum += std::exp(row[j] - mx);
            total_nll += std::log(sum) + mx - row[seq[static_cast<std::size_t>(r) + 1]];
        }
        total_positions += rows;
    }
    if (total_positions == 0)
        throw ContractError("perplexity: no next-token positions in slice");
    return std::exp(total_nll / static_cast<double>(total_positions));
}

TransformerModel init_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Rng rng(seed);
    const double std_base = 0.02;
    const double std_resid =
        std_base / std::sqrt(2.0 * static_cast<double>(config.n_layers));
    auto normal_tensor = [&rng](Shape shape, double stddev) {
        auto t = make_tensor(std::move(shape));
        for (auto& v : t->data) v = rng.normal(0.0, stddev);
        return t;
    };

    TransformerModel model;
    model.config = config;
    const std::int64_t d = config.d_model;
    const std::int64_t attn_w = static_cast<std::int64_t>(config.n_heads) * config.d_k;
    model.token_embedding = normal_tensor({config.vocab_size, d}, std_base);
    for (int li = 0; li < config.n_layers; ++li) {
        LayerWeights layer;
        layer.n_heads = config.n_heads;
        layer.d_ff = config.d_ff;
        layer.w_q = normal_tensor({d, attn_w}, std_base);
        layer.w_k = normal_tensor({d, attn_w}, std_base);
        layer.w_v = normal_tensor({d, attn_w}, std_base);
        layer.w_o = normal_tensor({attn_w, d}, std_resid);
        layer.w_gate = normal_tensor({d, config.d_ff}, std_base);
        layer.w_up = normal_tensor({d, config.d_ff}, std_base);
        layer.w_down = normal_tensor({config.d_ff, d}, std_resid);
        if (config.mlp_bias) {
            layer.b_gate = make_tensor({config.d_ff});
            layer.b_up = make_tensor({config.d_ff});
            layer.b_down = make_tensor({d});
        }
        layer.attn_norm = full_like_value({d}, 1.0);
        layer.mlp_norm = full_like_value({d}, 1.0);
        model.layers.push_back(std::move(layer));
    }
    model.final_norm = full_like_value({d}, 1.0);
    if (!config.tie_embeddings) model.lm_head = normal_tensor({d, config.vocab_size}, std_base);
    return model;
}

TransformerModel clone_model(const TransformerModel& model) {
    auto copy_tensor = [](const TensorPtr& t) -> TensorPtr {
        if (!t) return nullptr;
        return make_tensor(t->shape, t->data);
    };
    TransformerModel out;
    out.config = model.config;
    out.token_embedding = copy_tensor(model.token_embedding);
    out.lm_head = copy_tensor(model.lm_head);
    out.final_norm = copy_tensor(model.final_norm);
    for (const auto& l : model.layers) {
        LayerWeights c;
        c.n_heads = l.n_heads;
        c.d_ff = l.d_ff;
        c.w_q = copy_tensor(l.w_q);
        c.w_k = copy_tensor(l.w_k);
        c.w_v = copy_tensor(l.w_v);
        c.w_o = copy_tensor(l.w_o);
        c.w_gate = copy_tensor(l.w_gate);
        c.w_up = copy_tensor(l.w_up);
        c.w_down = copy_tensor(l.w_down);
        c.b_gate = copy_tensor(l.b_gate);
        c.b_up = copy_tensor(l.b_up);
        c.b_down = copy_tensor(l.b_down);
        c.attn_norm = copy_tensor(l.attn_norm);
        c.mlp_norm = copy_tensor(l.mlp_norm);
        out.layers.push_back(std::move(c));
    }
    return out;
}

}  // namespace prunerec
