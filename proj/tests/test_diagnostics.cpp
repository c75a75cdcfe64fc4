#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "helpers.hpp"
#include "prunerec/diagnostics.hpp"
#include "prunerec/distill.hpp"
#include "prunerec/errors.hpp"

using namespace prunerec;
using namespace prunerec::testing;

namespace {

RecDataset tiny_dataset() {
    GeneratorConfig cfg;
    cfg.n_items = 30;
    cfg.n_users = 12;
    cfg.n_clusters = 3;
    cfg.walk_len = 9;
    cfg.seed = 5;
    return generate(cfg);
}

}  // namespace

TEST_CASE("concentration_ratio closed forms") {
    CHECK(concentration_ratio({4, 3, 2, 1}, 25.0) == doctest::Approx(0.4));
    CHECK(concentration_ratio({4, 3, 2, 1}, 50.0) == doctest::Approx(0.7));
    CHECK(concentration_ratio({4, 3, 2, 1}, 100.0) == doctest::Approx(1.0));
    CHECK(concentration_ratio({0, 0, 9, 0}, 25.0) == doctest::Approx(1.0));
    CHECK(concentration_ratio({1, 1, 1, 1}, 50.0) == doctest::Approx(0.5));
    // signs and order are irrelevant; only magnitudes matter
    CHECK(concentration_ratio({-1, 2, -3, 4}, 50.0) ==
          doctest::Approx(concentration_ratio({4, 3, 2, 1}, 50.0)));
    // positive scaling cancels
    CHECK(concentration_ratio({8, 6, 4, 2}, 25.0) == doctest::Approx(0.4));
}

TEST_CASE("concentration_ratio monotone in k and contract errors") {
    Rng rng(3);
    std::vector<double> v(37);
    for (double& x : v) x = rng.uniform() * 2.0 - 1.0;
    double prev = 0.0;
    for (double k : {1.0, 5.0, 10.0, 25.0, 50.0, 100.0}) {
        const double r = concentration_ratio(v, k);
        CHECK(r >= prev);
        CHECK(r <= 1.0 + 1e-15);
        prev = r;
    }
    CHECK(concentration_ratio(v, 100.0) == doctest::Approx(1.0));

    CHECK_THROWS_AS(concentration_ratio({}, 50.0), ContractError);
    CHECK_THROWS_AS(concentration_ratio({0.0, 0.0}, 50.0), ContractError);
    CHECK_THROWS_AS(concentration_ratio({1.0}, 0.0), ContractError);
    CHECK_THROWS_AS(concentration_ratio({1.0}, 101.0), ContractError);
}

TEST_CASE("observe report shape, determinism, and k=100 saturation") {
    const auto ds = tiny_dataset();
    ModelConfig cfg{2, 2, 4, 8, 16, ds.vocab_size(), 16, 1000.0, true, true};
    const auto m = init_model(cfg, 31);

    const auto sat = observe(m, ds, 4, {100.0}, 9);
    REQUIRE(sat.rows.size() == 2u * 2u * 1u);
    for (const auto& row : sat.rows) CHECK(row.ratio == doctest::Approx(1.0));

    const auto a = observe(m, ds, 5, kDefaultKGrid, 9);
    const auto b = observe(m, ds, 5, kDefaultKGrid, 9);
    REQUIRE(a.rows.size() == 2u * 2u * kDefaultKGrid.size());
    CHECK(a.sample_count == 5);
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        CHECK(a.rows[i].ratio == b.rows[i].ratio);
        CHECK(a.rows[i].ratio > 0.0);
        CHECK(a.rows[i].ratio <= 1.0 + 1e-15);
    }
    // within each (layer, site) block the grid is ascending, so ratios are too
    for (std::size_t i = 0; i + 1 < a.rows.size(); ++i)
        if (a.rows[i].layer == a.rows[i + 1].layer && a.rows[i].site == a.rows[i + 1].site)
            CHECK(a.rows[i].ratio <= a.rows[i + 1].ratio + 1e-12);

    // averaging over all positions is also well formed
    const auto all_pos = observe(m, ds, 4, {10.0, 50.0}, 9, false);
    for (const auto& row : all_pos.rows) {
        CHECK(row.ratio > 0.0);
        CHECK(row.ratio <= 1.0 + 1e-15);
    }

    CHECK_THROWS_AS(observe(m, ds, 0, kDefaultKGrid, 9), ContractError);
}

TEST_CASE("wanda score closed forms") {
    auto w = make_tensor({1, 1}, std::vector<double>{-2.0});
    auto x = make_tensor({1, 1}, std::vector<double>{3.0});
    CHECK(wanda_score(w, x)->data[0] == doctest::Approx(6.0));

    // column norm pools rows: ||(3, 4)|| = 5
    auto x2 = make_tensor({2, 1}, std::vector<double>{3.0, 4.0});
    CHECK(wanda_score(w, x2)->data[0] == doctest::Approx(10.0));

    auto zero_x = make_tensor({2, 1}, std::vector<double>{0.0, 0.0});
    CHECK(wanda_score(w, zero_x)->data[0] == 0.0);

    auto bad = make_tensor({2, 3});
    CHECK_THROWS_AS(wanda_score(w, bad), DimensionError);
}

TEST_CASE("wanda score is homogeneous in both arguments") {
    Rng rng(7);
    auto w = random_tensor({4, 3}, rng);
    auto x = random_tensor({5, 4}, rng);
    const auto base = wanda_score(w, x);

    auto w2 = make_tensor(w->shape, w->data);
    for (double& v : w2->data) v *= -3.0;
    auto x2 = make_tensor(x->shape, x->data);
    for (double& v : x2->data) v *= 2.0;

    const auto scaled = wanda_score(w2, x2);
    for (std::size_t i = 0; i < base->data.size(); ++i)
        CHECK(scaled->data[i] == doctest::Approx(6.0 * base->data[i]).epsilon(1e-12));
}

TEST_CASE("training sharpens top-10% mlp concentration versus random init") {
    const auto ds = tiny_dataset();
    ModelConfig cfg{2, 2, 4, 8, 16, ds.vocab_size(), 16, 1000.0, true, true};
    DistillConfig dc;
    dc.epochs = 2;
    dc.batch_size = 16;
    dc.learning_rate = 3e-3;

    auto mean_mlp_ratio = [&](const TransformerModel& m) {
        const auto rep = observe(m, ds, 8, {10.0}, 13);
        double sum = 0.0;
        int n = 0;
        for (const auto& row : rep.rows)
            if (row.site == "mlp") {
                sum += row.ratio;
                ++n;
            }
        return sum / n;
    };

    double trained_sum = 0.0, random_sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto m = init_model(cfg, seed);
        random_sum += mean_mlp_ratio(m);
        dc.seed = seed;
        train_base(m, ds, dc);
        trained_sum += mean_mlp_ratio(m);
    }
    CHECK(trained_sum > random_sum);
}
