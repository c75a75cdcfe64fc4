#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "helpers.hpp"
#include "prunerec/errors.hpp"
#include "prunerec/evalmetrics.hpp"
#include "prunerec/prune.hpp"

using namespace prunerec;
using namespace prunerec::testing;

namespace {

// independent oracle: stable sort by (logit desc, id asc), find the target
int rank_by_sorting(const std::vector<double>& logits, int target) {
    std::vector<int> idx(logits.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        if (logits[static_cast<std::size_t>(a)] != logits[static_cast<std::size_t>(b)])
            return logits[static_cast<std::size_t>(a)] > logits[static_cast<std::size_t>(b)];
        return a < b;
    });
    for (std::size_t p = 0; p < idx.size(); ++p)
        if (idx[p] == target) return static_cast<int>(p) + 1;
    return -1;
}

RecDataset eval_dataset() {
    GeneratorConfig cfg;
    cfg.n_items = 50;
    cfg.n_users = 100;
    cfg.n_clusters = 5;
    cfg.walk_len = 7;
    cfg.seed = 11;
    return generate(cfg);
}

}  // namespace

TEST_CASE("rank_from_logits matches the sorting oracle, ties included") {
    Rng rng(21);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = 2 + static_cast<int>(rng.uniform_index(30));
        std::vector<double> logits(static_cast<std::size_t>(n));
        for (double& v : logits) v = rng.uniform() * 4.0 - 2.0;
        // inject exact ties about half the time
        if (trial % 2 == 0 && n >= 3) logits[0] = logits[2] = logits[n / 2];
        const int target = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(n)));
        CHECK(rank_from_logits(logits, target) == rank_by_sorting(logits, target));
    }
    CHECK_THROWS_AS(rank_from_logits({1.0, 2.0}, 2), ContractError);
    CHECK_THROWS_AS(rank_from_logits({1.0, 2.0}, -1), ContractError);
}

TEST_CASE("ranks are invariant under increasing monotone transforms") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> logits(20);
        for (double& v : logits) v = rng.uniform() * 6.0 - 3.0;
        auto warped = logits;
        for (double& v : warped) v = 2.0 * v + 1.0;
        auto tanhish = logits;
        for (double& v : tanhish) v = std::tanh(v);
        for (int t = 0; t < 20; ++t) {
            const int r = rank_from_logits(logits, t);
            CHECK(rank_from_logits(warped, t) == r);
            CHECK(rank_from_logits(tanhish, t) == r);
        }
    }
}

TEST_CASE("hit rate and ndcg closed forms") {
    CHECK(hr_at_k({1}, 1) == doctest::Approx(1.0));
    CHECK(ndcg_at_k({1}, 1) == doctest::Approx(1.0));
    CHECK(ndcg_at_k({3}, 10) == doctest::Approx(0.5));  // 1/log2(4)
    CHECK(hr_at_k({11}, 10) == doctest::Approx(0.0));
    CHECK(hr_at_k({11}, 20) == doctest::Approx(1.0));
    CHECK(ndcg_at_k({11}, 10) == doctest::Approx(0.0));
    CHECK(hr_at_k({1, 3, 11}, 10) == doctest::Approx(2.0 / 3.0));
    CHECK(ndcg_at_k({1, 3, 11}, 10) == doctest::Approx((1.0 + 0.5) / 3.0));

    CHECK_THROWS_AS(hr_at_k({}, 10), ContractError);
    CHECK_THROWS_AS(ndcg_at_k({}, 10), ContractError);
    CHECK_THROWS_AS(hr_at_k({1}, 0), ContractError);
    CHECK_THROWS_AS(ndcg_at_k({1}, 0), ContractError);
    CHECK_THROWS_AS(hr_at_k({0}, 5), ContractError);
    CHECK_THROWS_AS(ndcg_at_k({0}, 5), ContractError);
}

TEST_CASE("ndcg never exceeds hit rate and both grow with k") {
    Rng rng(29);
    std::vector<int> ranks;
    for (int i = 0; i < 100; ++i)
        ranks.push_back(1 + static_cast<int>(rng.uniform_index(40)));
    double prev_hr = 0.0, prev_ndcg = 0.0;
    for (int k : {1, 5, 10, 20, 40}) {
        const double hr = hr_at_k(ranks, k), ndcg = ndcg_at_k(ranks, k);
        CHECK(ndcg <= hr + 1e-15);
        CHECK(hr >= prev_hr);
        CHECK(ndcg >= prev_ndcg);
        prev_hr = hr;
        prev_ndcg = ndcg;
    }
}

TEST_CASE("evaluate is deterministic with well-formed metrics") {
    const auto ds = eval_dataset();
    ModelConfig cfg{1, 2, 4, 8, 16, ds.vocab_size(), 32, 1000.0, true, true};
    const auto m = init_model(cfg, 3);
    const std::vector<int> ks = {5, 10, 20};
    const auto a = evaluate(m, ds, Split::Valid, ks);
    const auto b = evaluate(m, ds, Split::Valid, ks);
    CHECK(a.n_evaluated == static_cast<int>(ds.valid_idx.size()));
    CHECK(a.param_count_non_embedding == param_count(m, false));
    CHECK(a.ppl == b.ppl);
    CHECK(a.ppl >= 1.0);
    double prev = 0.0;
    for (int k : ks) {
        REQUIRE(a.hr.count(k) == 1);
        REQUIRE(a.ndcg.count(k) == 1);
        CHECK(a.hr.at(k) == b.hr.at(k));
        CHECK(a.ndcg.at(k) <= a.hr.at(k) + 1e-15);
        CHECK(a.hr.at(k) >= prev);
        prev = a.hr.at(k);
    }
    CHECK(a.hr.size() == ks.size());
    CHECK_THROWS_AS(evaluate(m, RecDataset{}, Split::Test, ks), ContractError);
}

TEST_CASE("uniform logits with noisy tie-breaks hit at roughly k over n") {
    const auto ds = eval_dataset();
    ModelConfig cfg{1, 2, 4, 8, 16, ds.vocab_size(), 32, 1000.0, true, true};
    auto m = init_model(cfg, 7);
    for (double& v : m.token_embedding->data) v = 0.0;  // tied head: all logits 0

    EvalOptions opt;
    opt.tie_break_noise_seed = 77;
    const auto rep = evaluate(m, ds, Split::Test, {10});
    const auto noisy = evaluate(m, ds, Split::Test, {10}, opt);

    // without noise the target competes on token id alone; with noise the
    // rank is uniform on [1, n_items], so hr@10 sits near 10/50 = 0.2
    const double p = 10.0 / 50.0;
    const double n = static_cast<double>(noisy.n_evaluated);
    const double sigma = std::sqrt(p * (1.0 - p) / n);
    CHECK(std::abs(noisy.hr.at(10) - p) <= 3.0 * sigma);
    // determinism of the noisy path too
    CHECK(evaluate(m, ds, Split::Test, {10}, opt).hr.at(10) == noisy.hr.at(10));
    CHECK(rep.ppl == doctest::Approx(static_cast<double>(ds.vocab_size())));
}

TEST_CASE("eval report file round trips its key lines") {
    const auto ds = eval_dataset();
    ModelConfig cfg{1, 2, 4, 8, 16, ds.vocab_size(), 32, 1000.0, true, true};
    const auto m = init_model(cfg, 9);
    const auto rep = evaluate(m, ds, Split::Valid, {10, 20});
    const std::string path = "/tmp/prunerec_test_eval.txt";
    save_eval_report(rep, path);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text.find("hr@10=") != std::string::npos);
    CHECK(text.find("ndcg@20=") != std::string::npos);
    CHECK(text.find("ppl=") != std::string::npos);
    CHECK_THROWS_AS(save_eval_report(rep, "/no/such/dir/eval.txt"), IoError);
    std::remove(path.c_str());
}
