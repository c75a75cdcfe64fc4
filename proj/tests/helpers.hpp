#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "prunerec/model.hpp"
#include "prunerec/rng.hpp"
#include "prunerec/tensor.hpp"

namespace prunerec::testing {

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

inline TensorPtr random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
    auto t = make_tensor(std::move(shape));
    for (double& v : t->data) v = rng.normal() * scale;
    return t;
}

// Gradient check for a single differentiable input of an op. build(x, tape)
// must rebuild the op graph from scratch; the scalar probe is a fixed random
// weighting of the output, so arbitrary output shapes work.
template <typename Builder>
double max_grad_err(const TensorPtr& x, Builder build, Rng& rng, double h = 1e-5) {
    TensorPtr probe_out = build(x, static_cast<Tape*>(nullptr));
    std::vector<double> w(probe_out->data.size());
    for (double& v : w) v = rng.normal();

    auto value = [&](const TensorPtr& xx) {
        TensorPtr y = build(xx, static_cast<Tape*>(nullptr));
        double s = 0.0;
        for (std::size_t i = 0; i < y->data.size(); ++i) s += w[i] * y->data[i];
        return s;
    };

    auto xg = make_tensor(x->shape, x->data, true);
    Tape tape;
    TensorPtr y = build(xg, &tape);
    y->ensure_grad();
    for (std::size_t i = 0; i < w.size(); ++i) y->grad[i] = w[i];
    tape.run_backward();

    TensorPtr fd = finite_diff_grad(value, x, h);
    double worst = 0.0;
    for (std::size_t i = 0; i < fd->data.size(); ++i)
        worst = std::max(worst, rel_err(xg->grad[i], fd->data[i]));
    return worst;
}

inline double max_abs_diff(const TensorPtr& a, const TensorPtr& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a->data.size(); ++i)
        worst = std::max(worst, std::abs(a->data[i] - b->data[i]));
    return worst;
}

inline bool bitwise_equal(const TensorPtr& a, const TensorPtr& b) {
    return a->shape == b->shape && a->data == b->data;
}

inline bool models_bitwise_equal(const TransformerModel& a, const TransformerModel& b) {
    const auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i)
        if (!bitwise_equal(pa[i], pb[i])) return false;
    return true;
}

inline std::vector<int> random_tokens(int len, int vocab, Rng& rng) {
    std::vector<int> toks(static_cast<std::size_t>(len));
    for (int& t : toks) t = static_cast<int>(rng.uniform_index(static_cast<std::size_t>(vocab)));
    return toks;
}

}  // namespace prunerec::testing
