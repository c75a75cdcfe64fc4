#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "prunerec/errors.hpp"
#include "prunerec/prune.hpp"

using namespace prunerec;
using namespace prunerec::testing;

namespace {

ModelConfig small_config() {
    return {2, 2, 4, 8, 16, 17, 32, 1000.0, true, true};
}

}  // namespace

TEST_CASE("init_model is seed-deterministic and seed-sensitive") {
    const ModelConfig cfg = small_config();
    const auto a = init_model(cfg, 5), b = init_model(cfg, 5), c = init_model(cfg, 6);
    CHECK(models_bitwise_equal(a, b));
    bool any_diff = false;
    const auto pa = a.parameters(), pc = c.parameters();
    for (std::size_t i = 0; i < pa.size() && !any_diff; ++i)
        any_diff = pa[i]->data != pc[i]->data;
    CHECK(any_diff);
}

TEST_CASE("param_count matches the closed-form for the documented config") {
    ModelConfig cfg{4, 8, 8, 64, 256, 100, 16, 10000.0, true, true};
    const auto m = init_model(cfg, 1);
    CHECK(param_count(m, false) == 265024);
    CHECK(param_count(m, true) - param_count(m, false) ==
          static_cast<std::int64_t>(cfg.vocab_size) * cfg.d_model);
}

TEST_CASE("appending a token does not change earlier logits") {
    Rng rng(41);
    const auto m = init_model(small_config(), 3);
    for (int trial = 0; trial < 5; ++trial) {
        auto toks = random_tokens(6, m.config.vocab_size, rng);
        auto longer = toks;
        longer.push_back(static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(m.config.vocab_size))));
        auto short_logits = forward(m, toks);
        auto long_logits = forward(m, longer);
        for (std::size_t i = 0; i < short_logits->data.size(); ++i)
            CHECK(std::abs(short_logits->data[i] - long_logits->data[i]) < 1e-12);
    }
}

TEST_CASE("suppression with epsilon 1 is bit-identical to no suppression") {
    Rng rng(43);
    const auto m = init_model(small_config(), 9);
    const auto toks = random_tokens(7, m.config.vocab_size, rng);
    const auto plain = forward(m, toks);
    for (int l = 0; l < m.n_layers(); ++l)
        for (int h = 0; h < m.config.n_heads; ++h) {
            SuppressionSpec spec{l, h, 1.0};
            CHECK(bitwise_equal(forward(m, toks, &spec), plain));
        }
}

TEST_CASE("suppression with epsilon 0 makes the head causally uniform") {
    Rng rng(47);
    const auto m = init_model(small_config(), 13);
    const auto toks = random_tokens(6, m.config.vocab_size, rng);
    const int layer = 1, head = 1, d_k = m.config.d_k;
    SuppressionSpec spec{layer, head, 0.0};
    Activations acts;
    forward(m, toks, &spec, nullptr, nullptr, &acts);

    // oracle: the suppressed head's output row t is the mean of V rows 0..t
    const LayerWeights& lw = m.layers[static_cast<std::size_t>(layer)];
    // rebuild the layer input by running a forward capture without suppression:
    // layers below the suppressed one are unaffected by it.
    Activations plain_acts;
    forward(m, toks, nullptr, nullptr, nullptr, &plain_acts);
    auto x = embedding_rows(m.token_embedding, toks);
    // residual stream entering the suppressed layer = embedding + lower-layer outputs
    for (int l = 0; l < layer; ++l) {
        x = add(x, plain_acts[static_cast<std::size_t>(l)].attn_out);
        // recompute the mlp sublayer output from the captured preactivation
        const LayerWeights& low = m.layers[static_cast<std::size_t>(l)];
        auto xn = rms_norm(x, low.mlp_norm, kNormEps);
        auto gate = silu(add_bias(matmul(xn, low.w_gate), low.b_gate));
        auto up = add_bias(matmul(xn, low.w_up), low.b_up);
        auto mlp_out = add_bias(matmul(mul(gate, up), low.w_down), low.b_down);
        x = add(x, mlp_out);
    }
    auto xn = rms_norm(x, lw.attn_norm, kNormEps);
    auto v = slice_cols(matmul(xn, lw.w_v), head * d_k, d_k);
    const std::int64_t s = v->dim(0);
    auto expect = make_tensor({s, d_k});
    for (std::int64_t t = 0; t < s; ++t)
        for (std::int64_t c = 0; c < d_k; ++c) {
            double sum = 0.0;
            for (std::int64_t j = 0; j <= t; ++j) sum += v->data[static_cast<std::size_t>(j * d_k + c)];
            expect->data[static_cast<std::size_t>(t * d_k + c)] = sum / static_cast<double>(t + 1);
        }
    auto got = slice_cols(acts[static_cast<std::size_t>(layer)].attn_concat, head * d_k, d_k);
    CHECK(max_abs_diff(got, expect) < 1e-12);
}

TEST_CASE("masking all layers reduces to normalized embedding times lm head") {
    Rng rng(53);
    const auto m = init_model(small_config(), 17);
    const auto toks = random_tokens(5, m.config.vocab_size, rng);
    LayerMask mask{{0, 1}};
    auto got = forward(m, toks, nullptr, &mask);
    auto want = matmul_bt(rms_norm(embedding_rows(m.token_embedding, toks), m.final_norm, kNormEps),
                          m.token_embedding);
    CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("masking a layer equals physically deleting it") {
    Rng rng(59);
    ModelConfig cfg{3, 2, 4, 8, 16, 17, 32, 1000.0, true, true};
    const auto m = init_model(cfg, 19);
    for (int l = 0; l < 3; ++l) {
        const auto dropped = drop_layers(m, {l});
        LayerMask mask{{l}};
        for (int trial = 0; trial < 3; ++trial) {
            const auto toks = random_tokens(6, cfg.vocab_size, rng);
            CHECK(max_abs_diff(forward(m, toks, nullptr, &mask), forward(dropped, toks)) < 1e-12);
        }
    }
}

TEST_CASE("a head with zero output-projection rows is inert under suppression") {
    Rng rng(61);
    auto m = init_model(small_config(), 23);
    const int layer = 0, head = 1, d_k = m.config.d_k;
    auto& w_o = m.layers[0].w_o;
    const std::int64_t d_model = w_o->dim(1);
    for (std::int64_t r = head * d_k; r < (head + 1) * d_k; ++r)
        for (std::int64_t c = 0; c < d_model; ++c) w_o->data[static_cast<std::size_t>(r * d_model + c)] = 0.0;
    const auto toks = random_tokens(6, m.config.vocab_size, rng);
    SuppressionSpec spec{layer, head, 0.0};
    CHECK(bitwise_equal(forward(m, toks, &spec), forward(m, toks)));
}

TEST_CASE("perplexity of a uniform-logit model equals vocab size") {
    ModelConfig cfg = small_config();
    auto m = init_model(cfg, 29);
    for (double& v : m.token_embedding->data) v = 0.0;  // tied head: all logits 0
    std::vector<std::vector<int>> seqs = {{1, 2, 3}, {4, 5, 6, 7}};
    CHECK(perplexity(m, seqs) == doctest::Approx(static_cast<double>(cfg.vocab_size)).epsilon(1e-9));
}

TEST_CASE("perplexity basics and contracts") {
    Rng rng(67);
    const auto m = init_model(small_config(), 31);
    std::vector<std::vector<int>> seqs;
    for (int i = 0; i < 4; ++i) seqs.push_back(random_tokens(6, m.config.vocab_size, rng));
    LayerMask empty_mask;
    const double p1 = perplexity(m, seqs);
    CHECK(p1 == perplexity(m, seqs, &empty_mask));
    CHECK(p1 >= 1.0);
    CHECK_THROWS_AS(perplexity(m, {}), ContractError);
    CHECK_THROWS_AS(perplexity(m, {{3}}), ContractError);  // no predicted positions
}

TEST_CASE("forward input contracts") {
    const auto m = init_model(small_config(), 37);
    CHECK_THROWS_AS(forward(m, std::vector<int>{1, 999}), IndexError);
    CHECK_THROWS_AS(forward(m, std::vector<int>{}), Error);
    std::vector<int> too_long(static_cast<std::size_t>(m.config.max_seq_len) + 1, 1);
    CHECK_THROWS_AS(forward(m, too_long), Error);
}

TEST_CASE("capture_activations shapes and zero-weight behavior") {
    Rng rng(71);
    auto m = init_model(small_config(), 41);
    const auto toks = random_tokens(6, m.config.vocab_size, rng);
    auto acts = capture_activations(m, toks);
    REQUIRE(acts.size() == 2);
    for (int l = 0; l < 2; ++l) {
        CHECK(acts[static_cast<std::size_t>(l)].mlp_preact->shape ==
              Shape{6, m.layers[static_cast<std::size_t>(l)].d_ff});
        CHECK(acts[static_cast<std::size_t>(l)].attn_out->shape == Shape{6, m.config.d_model});
        CHECK(acts[static_cast<std::size_t>(l)].attn_concat->shape ==
              Shape{6, m.layers[static_cast<std::size_t>(l)].n_heads * m.config.d_k});
    }
    // captured tensors equal what a capturing forward produces
    Activations via_forward;
    forward(m, toks, nullptr, nullptr, nullptr, &via_forward);
    for (int l = 0; l < 2; ++l) {
        CHECK(bitwise_equal(acts[static_cast<std::size_t>(l)].mlp_preact,
                            via_forward[static_cast<std::size_t>(l)].mlp_preact));
        CHECK(bitwise_equal(acts[static_cast<std::size_t>(l)].attn_out,
                            via_forward[static_cast<std::size_t>(l)].attn_out));
    }

    for (double& v : m.layers[0].w_up->data) v = 0.0;
    for (double& v : m.layers[0].b_up->data) v = 0.0;
    auto zero_acts = capture_activations(m, toks);
    for (double v : zero_acts[0].mlp_preact->data) CHECK(v == 0.0);
}

TEST_CASE("clone_model is deep and tie-preserving") {
    auto m = init_model(small_config(), 43);
    auto c = clone_model(m);
    CHECK(models_bitwise_equal(m, c));
    c.token_embedding->data[0] += 1.0;
    CHECK(m.token_embedding->data[0] != c.token_embedding->data[0]);
    CHECK(c.lm_head == nullptr);  // tied
}

TEST_CASE("full transformer loss gradient matches finite differences") {
    Rng rng(73);
    ModelConfig cfg{2, 2, 4, 8, 16, 11, 16, 1000.0, true, true};
    auto m = init_model(cfg, 47);
    const auto toks = random_tokens(5, cfg.vocab_size, rng);
    const std::vector<int> targets = {1, 2, 3, 4, 5};

    m.set_requires_grad(true);
    Tape tape;
    auto loss = cross_entropy_logits(forward(m, toks, nullptr, nullptr, &tape), targets, &tape);
    backward(loss, tape);

    auto loss_value = [&]() {
        return cross_entropy_logits(forward(m, toks), targets)->data[0];
    };
    // 10 random coordinates spread over all parameter tensors
    auto params = m.parameters();
    for (int probe = 0; probe < 10; ++probe) {
        auto& p = params[probe % params.size()];
        const std::size_t i = static_cast<std::size_t>(rng.uniform_index(p->data.size()));
        const double h = 1e-5, orig = p->data[i];
        p->data[i] = orig + h;
        const double up = loss_value();
        p->data[i] = orig - h;
        const double down = loss_value();
        p->data[i] = orig;
        const double fd = (up - down) / (2 * h);
        const double an = p->has_grad() ? p->grad[i] : 0.0;
        CHECK(rel_err(an, fd) < 1e-5);
    }
    m.set_requires_grad(false);
}
