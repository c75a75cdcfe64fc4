#include "prunerec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "prunerec/errors.hpp"

namespace prunerec {

namespace {

constexpr double kMaskValue = -1e30;
constexpr double kKlFloor = 1e-12;

bool want_grad(Tape* tape, std::initializer_list<const TensorPtr*> inputs) {
    if (!tape) return false;
    for (const TensorPtr* t : inputs)
        if ((*t)->requires_grad) return true;
    return false;
}

void require_2d(const TensorPtr& t, const char* name) {
    if (t->ndim() != 2)
        throw DimensionError(std::string(name) + " must be 2-D, got shape " +
                             shape_str(t->shape));
}

std::int64_t last_extent(const Tensor& t) {
    if (t.shape.empty()) return 1;
    return t.shape.back();
}

}  // namespace

void Tensor::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() {
    std::fill(grad.begin(), grad.end(), 0.0);
}

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

TensorPtr make_tensor(Shape shape, bool requires_grad) {
    for (auto e : shape)
        if (e <= 0) throw DimensionError("nonpositive extent in shape " + shape_str(shape));
    auto t = std::make_shared<Tensor>();
    t->data.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
    t->shape = std::move(shape);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    auto t = std::make_shared<Tensor>();
    t->shape = std::move(shape);
    t->data = std::move(data);
    t->requires_grad = requires_grad;
    return t;
}

TensorPtr full_like_value(Shape shape, double value, bool requires_grad) {
    auto t = make_tensor(std::move(shape), requires_grad);
    std::fill(t->data.begin(), t->data.end(), value);
    return t;
}

void check_finite(const Tensor& t, const std::string& context) {
    for (double v : t.data)
        if (!std::isfinite(v))
            throw ContractError("non-finite value in " + context);
}

void gemm(std::int64_t m, std::int64_t k, std::int64_t n, const double* a,
          const double* b, double* c, bool trans_a, bool trans_b, bool accumulate) {
    if (!accumulate) std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(m * n));
    if (!trans_a && !trans_b) {
        // a: m x k, b: k x n
        for (std::int64_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (std::int64_t l = 0; l < k; ++l) {
                const double av = arow[l];
                if (av == 0.0) continue;
                const double* brow = b + l * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // a: m x k, b stored n x k. A row-of-dots loop serializes on one
        // accumulator, so transpose b once and reuse the vectorizable
        // row-update form instead.
        std::vector<double> bt(static_cast<std::size_t>(k * n));
        for (std::int64_t j = 0; j < n; ++j)
            for (std::int64_t l = 0; l < k; ++l)
                bt[static_cast<std::size_t>(l * n + j)] = b[j * k + l];
        for (std::int64_t i = 0; i < m; ++i) {
            const double* arow = a + i * k;
            double* crow = c + i * n;
            for (std::int64_t l = 0; l < k; ++l) {
                const double av = arow[l];
                if (av == 0.0) continue;
                const double* brow = bt.data() + l * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (trans_a && !trans_b) {
        // a stored k x m, b: k x n
        for (std::int64_t l = 0; l < k; ++l) {
            const double* arow = a + l * m;
            const double* brow = b + l * n;
            for (std::int64_t i = 0; i < m; ++i) {
                const double av = arow[i];
                if (av == 0.0) continue;
                double* crow = c + i * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        throw ContractError("gemm: double transpose unsupported");
    }
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b, Tape* tape) {
    require_2d(a, "matmul lhs");
    require_2d(b, "matmul rhs");
    const std::int64_t m = a->dim(0), k = a->dim(1), n = b->dim(1);
    if (b->dim(0) != k)
        throw DimensionError("matmul: " + shape_str(a->shape) + " x " + shape_str(b->shape));
    auto out = make_tensor({m, n});
    gemm(m, k, n, a->data.data(), b->data.data(), out->data.data(), false, false, false);
    if (want_grad(tape, {&a, &b})) {
        out->requires_grad = true;
        tape->record([a, b, out, m, k, n] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                gemm(m, n, k, out->grad.data(), b->data.data(), a->grad.data(), false, true, true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                gemm(k, m, n, a->data.data(), out->grad.data(), b->grad.data(), true, false, true);
            }
        });
    }
    return out;
}

TensorPtr matmul_bt(const TensorPtr& a, const TensorPtr& b, Tape* tape) {
    require_2d(a, "matmul_bt lhs");
    require_2d(b, "matmul_bt rhs");
    const std::int64_t m = a->dim(0), k = a->dim(1), n = b->dim(0);
    if (b->dim(1) != k)
        throw DimensionError("matmul_bt: " + shape_str(a->shape) + " x " +
                             shape_str(b->shape) + "^T");
    auto out = make_tensor({m, n});
    gemm(m, k, n, a->data.data(), b->data.data(), out->data.data(), false, true, false);
    if (want_grad(tape, {&a, &b})) {
        out->requires_grad = true;
        tape->record([a, b, out, m, k, n] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                gemm(m, n, k, out->grad.data(), b->data.data(), a->grad.data(), false, false, true);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                gemm(n, m, k, out->grad.data(), a->data.data(), b->grad.data(), true, false, true);
            }
        });
    }
    return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b, Tape* tape) {
    if (a->shape != b->shape)
        throw DimensionError("add: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = make_tensor(a->shape);
    const std::size_t n = a->data.size();
    for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] + b->data[i];
    if (want_grad(tape, {&a, &b})) {
        out->requires_grad = true;
        tape->record([a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) a->grad[i] += out->grad[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) b->grad[i] += out->grad[i];
            }
        });
    }
    return out;
}

TensorPtr add_bias(const TensorPtr& x, const TensorPtr& bias, Tape* tape) {
    require_2d(x, "add_bias input");
    const std::int64_t rows = x->dim(0), cols = x->dim(1);
    if (bias->numel() != cols)
        throw DimensionError("add_bias: bias length " + std::to_string(bias->numel()) +
                             " vs width " + std::to_string(cols));
    auto out = make_tensor(x->shape);
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t c = 0; c < cols; ++c)
            out->data[r * cols + c] = x->data[r * cols + c] + bias->data[c];
    if (want_grad(tape, {&x, &bias})) {
        out->requires_grad = true;
        tape->record([x, bias, out, rows, cols] {
            if (!out->has_grad()) return;
            if (x->requires_grad) {
                x->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i];
            }
            if (bias->requires_grad) {
                bias->ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t c = 0; c < cols; ++c)
                        bias->grad[c] += out->grad[r * cols + c];
            }
        });
    }
    return out;
}

TensorPtr mul(const TensorPtr& a, const TensorPtr& b, Tape* tape) {
    if (a->shape != b->shape)
        throw DimensionError("mul: " + shape_str(a->shape) + " vs " + shape_str(b->shape));
    auto out = make_tensor(a->shape);
    const std::size_t n = a->data.size();
    for (std::size_t i = 0; i < n; ++i) out->data[i] = a->data[i] * b->data[i];
    if (want_grad(tape, {&a, &b})) {
        out->requires_grad = true;
        tape->record([a, b, out] {
            if (!out->has_grad()) return;
            if (a->requires_grad) {
                a->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i)
                    a->grad[i] += out->grad[i] * b->data[i];
            }
            if (b->requires_grad) {
                b->ensure_grad();
                for (std::size_t i = 0; i < out->grad.size(); ++i)
                    b->grad[i] += out->grad[i] * a->data[i];
            }
        });
    }
    return out;
}

TensorPtr scale(const TensorPtr& x, double c, Tape* tape) {
    auto out = make_tensor(x->shape);
    for (std::size_t i = 0; i < x->data.size(); ++i) out->data[i] = x->data[i] * c;
    if (want_grad(tape, {&x})) {
        out->requires_grad = true;
        tape->record([x, out, c] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) x->grad[i] += out->grad[i] * c;
        });
    }
    return out;
}

TensorPtr silu(const TensorPtr& x, Tape* tape) {
    auto out = make_tensor(x->shape);
    for (std::size_t i = 0; i < x->data.size(); ++i) {
        const double v = x->data[i];
        out->data[i] = v / (1.0 + std::exp(-v));
    }
    if (want_grad(tape, {&x})) {
        out->requires_grad = true;
        tape->record([x, out] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (std::size_t i = 0; i < out->grad.size(); ++i) {
                const double v = x->data[i];
                const double s = 1.0 / (1.0 + std::exp(-v));
                x->grad[i] += out->grad[i] * s * (1.0 + v * (1.0 - s));
            }
        });
    }
    return out;
}

TensorPtr softmax_last_dim(const TensorPtr& x, Tape* tape) {
    const std::int64_t width = last_extent(*x);
    if (x->shape.empty() || width < 1)
        throw DimensionError("softmax_last_dim: empty last dimension, shape " +
                             shape_str(x->shape));
    const std::int64_t rows = x->numel() / width;
    auto out = make_tensor(x->shape);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = x->data.data() + r * width;
        double* o = out->data.data() + r * width;
        double mx = in[0];
        for (std::int64_t j = 1; j < width; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < width; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < width; ++j) o[j] *= inv;
    }
    check_finite(*out, "softmax_last_dim output");
    if (want_grad(tape, {&x})) {
        out->requires_grad = true;
        tape->record([x, out, rows, width] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* y = out->data.data() + r * width;
                const double* g = out->grad.data() + r * width;
                double dot = 0.0;
                for (std::int64_t j = 0; j < width; ++j) dot += y[j] * g[j];
                double* gx = x->grad.data() + r * width;
                for (std::int64_t j = 0; j < width; ++j) gx[j] += y[j] * (g[j] - dot);
            }
        });
    }
    return out;
}

TensorPtr rms_norm(const TensorPtr& x, const TensorPtr& weight, double eps, Tape* tape) {
    const std::int64_t width = last_extent(*x);
    if (weight->numel() != width)
        throw DimensionError("rms_norm: weight length " + std::to_string(weight->numel()) +
                             " vs last extent " + std::to_string(width));
    if (eps < 0.0) throw ContractError("rms_norm: eps must be >= 0");
    const std::int64_t rows = x->numel() / width;
    auto out = make_tensor(x->shape);
    std::vector<double> inv_rms(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = x->data.data() + r * width;
        double ms = 0.0;
        for (std::int64_t j = 0; j < width; ++j) ms += in[j] * in[j];
        ms = ms / static_cast<double>(width) + eps;
        const double inv = 1.0 / std::sqrt(ms);
        inv_rms[static_cast<std::size_t>(r)] = inv;
        double* o = out->data.data() + r * width;
        for (std::int64_t j = 0; j < width; ++j) o[j] = in[j] * inv * weight->data[j];
    }
    if (want_grad(tape, {&x, &weight})) {
        out->requires_grad = true;
        tape->record([x, weight, out, rows, width, inv_rms = std::move(inv_rms)] {
            if (!out->has_grad()) return;
            if (x->requires_grad) x->ensure_grad();
            if (weight->requires_grad) weight->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const double inv = inv_rms[static_cast<std::size_t>(r)];
                const double* in = x->data.data() + r * width;
                const double* g = out->grad.data() + r * width;
                if (weight->requires_grad)
                    for (std::int64_t j = 0; j < width; ++j)
                        weight->grad[j] += g[j] * in[j] * inv;
                if (x->requires_grad) {
                    double dot = 0.0;
                    for (std::int64_t j = 0; j < width; ++j)
                        dot += g[j] * weight->data[j] * in[j];
                    const double coeff = dot * inv * inv * inv / static_cast<double>(width);
                    double* gx = x->grad.data() + r * width;
                    for (std::int64_t j = 0; j < width; ++j)
                        gx[j] += g[j] * weight->data[j] * inv - in[j] * coeff;
                }
            }
        });
    }
    return out;
}

TensorPtr cross_entropy_logits(const TensorPtr& logits, const std::vector<int>& targets,
                               Tape* tape) {
    require_2d(logits, "cross_entropy_logits");
    const std::int64_t rows = logits->dim(0), vocab = logits->dim(1);
    if (static_cast<std::int64_t>(targets.size()) != rows)
        throw DimensionError("cross_entropy_logits: " + std::to_string(targets.size()) +
                             " targets for " + std::to_string(rows) + " rows");
    for (int t : targets)
        if (t < 0 || t >= vocab)
            throw IndexError("cross_entropy_logits: target " + std::to_string(t) +
                             " out of range for vocab " + std::to_string(vocab));
    // softmax rows cached for the backward rule
    std::vector<double> probs(logits->data.size());
    double total = 0.0;
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* in = logits->data.data() + r * vocab;
        double* p = probs.data() + r * vocab;
        double mx = in[0];
        for (std::int64_t j = 1; j < vocab; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < vocab; ++j) {
            p[j] = std::exp(in[j] - mx);
            sum += p[j];
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < vocab; ++j) p[j] *= inv;
        total += std::log(sum) + mx - in[targets[static_cast<std::size_t>(r)]];
    }
    auto out = make_tensor({1}, std::vector<double>{total / static_cast<double>(rows)});
    check_finite(*out, "cross_entropy_logits output");
    if (want_grad(tape, {&logits})) {
        out->requires_grad = true;
        tape->record([logits, out, targets, rows, vocab, probs = std::move(probs)] {
            if (!out->has_grad()) return;
            logits->ensure_grad();
            const double g = out->grad[0] / static_cast<double>(rows);
            for (std::int64_t r = 0; r < rows; ++r) {
                const double* p = probs.data() + r * vocab;
                double* gl = logits->grad.data() + r * vocab;
                for (std::int64_t j = 0; j < vocab; ++j) gl[j] += g * p[j];
                gl[targets[static_cast<std::size_t>(r)]] -= g;
            }
        });
    }
    return out;
}

TensorPtr kl_divergence(const TensorPtr& p, const TensorPtr& q, Tape* tape) {
    if (p->numel() != q->numel())
        throw DimensionError("kl_divergence: " + shape_str(p->shape) + " vs " +
                             shape_str(q->shape));
    auto validate = [](const Tensor& t, const char* name) {
        double sum = 0.0;
        for (double v : t.data) {
            if (v < 0.0 || !std::isfinite(v))
                throw ContractError(std::string("kl_divergence: ") + name +
                                    " has a negative or non-finite entry");
            sum += v;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ContractError(std::string("kl_divergence: ") + name + " sums to " +
                                std::to_string(sum) + ", expected 1");
    };
    validate(*p, "p");
    validate(*q, "q");
    const std::size_t n = p->data.size();
    double kl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pi = p->data[i];
        if (pi <= 0.0) continue;  // 0 * ln(0/q) == 0 by convention
        const double qi = std::max(q->data[i], kKlFloor);
        kl += pi * std::log(pi / qi);
    }
    auto out = make_tensor({1}, std::vector<double>{kl});
    if (want_grad(tape, {&p, &q})) {
        out->requires_grad = true;
        tape->record([p, q, out, n] {
            if (!out->has_grad()) return;
            const double g = out->grad[0];
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    const double pi = std::max(p->data[i], kKlFloor);
                    const double qi = std::max(q->data[i], kKlFloor);
                    p->grad[i] += g * (std::log(pi / qi) + 1.0);
                }
            }
            if (q->requires_grad) {
                q->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    if (q->data[i] <= kKlFloor) continue;  // clamped region, flat
                    q->grad[i] -= g * p->data[i] / q->data[i];
                }
            }
        });
    }
    return out;
}

TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids, Tape* tape) {
    require_2d(table, "embedding table");
    const std::int64_t vocab = table->dim(0), width = table->dim(1);
    const std::int64_t rows = static_cast<std::int64_t>(ids.size());
    if (rows == 0) throw ContractError("embedding_rows: empty id list");
    for (int id : ids)
        if (id < 0 || id >= vocab)
            throw IndexError("embedding_rows: id " + std::to_string(id) +
                             " out of range for vocab " + std::to_string(vocab));
    auto out = make_tensor({rows, width});
    for (std::int64_t r = 0; r < rows; ++r)
        std::memcpy(out->data.data() + r * width,
                    table->data.data() + static_cast<std::int64_t>(ids[r]) * width,
                    sizeof(double) * static_cast<std::size_t>(width));
    if (want_grad(tape, {&table})) {
        out->requires_grad = true;
        tape->record([table, out, ids, rows, width] {
            if (!out->has_grad()) return;
            table->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                double* dst = table->grad.data() + static_cast<std::int64_t>(ids[r]) * width;
                const double* src = out->grad.data() + r * width;
                for (std::int64_t j = 0; j < width; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

TensorPtr slice_cols(const TensorPtr& x, std::int64_t start, std::int64_t len, Tape* tape) {
    require_2d(x, "slice_cols input");
    const std::int64_t rows = x->dim(0), cols = x->dim(1);
    if (start < 0 || len <= 0 || start + len > cols)
        throw DimensionError("slice_cols: [" + std::to_string(start) + ", " +
                             std::to_string(start + len) + ") out of width " +
                             std::to_string(cols));
    auto out = make_tensor({rows, len});
    for (std::int64_t r = 0; r < rows; ++r)
        std::memcpy(out->data.data() + r * len, x->data.data() + r * cols + start,
                    sizeof(double) * static_cast<std::size_t>(len));
    if (want_grad(tape, {&x})) {
        out->requires_grad = true;
        tape->record([x, out, start, len, rows, cols] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                double* dst = x->grad.data() + r * cols + start;
                const double* src = out->grad.data() + r * len;
                for (std::int64_t j = 0; j < len; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

TensorPtr concat_cols(const std::vector<TensorPtr>& parts, Tape* tape) {
    if (parts.empty()) throw ContractError("concat_cols: no parts");
    const std::int64_t rows = parts[0]->dim(0);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        require_2d(p, "concat_cols part");
        if (p->dim(0) != rows)
            throw DimensionError("concat_cols: row mismatch " + std::to_string(p->dim(0)) +
                                 " vs " + std::to_string(rows));
        total += p->dim(1);
    }
    auto out = make_tensor({rows, total});
    std::int64_t off = 0;
    for (const auto& p : parts) {
        const std::int64_t w = p->dim(1);
        for (std::int64_t r = 0; r < rows; ++r)
            std::memcpy(out->data.data() + r * total + off, p->data.data() + r * w,
                        sizeof(double) * static_cast<std::size_t>(w));
        off += w;
    }
    bool any_grad = false;
    for (const auto& p : parts) any_grad = any_grad || p->requires_grad;
    if (tape && any_grad) {
        out->requires_grad = true;
        tape->record([parts, out, rows, total] {
            if (!out->has_grad()) return;
            std::int64_t off = 0;
            for (const auto& p : parts) {
                const std::int64_t w = p->dim(1);
                if (p->requires_grad) {
                    p->ensure_grad();
                    for (std::int64_t r = 0; r < rows; ++r) {
                        double* dst = p->grad.data() + r * w;
                        const double* src = out->grad.data() + r * total + off;
                        for (std::int64_t j = 0; j < w; ++j) dst[j] += src[j];
                    }
                }
                off += w;
            }
        });
    }
    return out;
}

TensorPtr causal_mask(const TensorPtr& scores, Tape* tape) {
    require_2d(scores, "causal_mask input");
    const std::int64_t n = scores->dim(0);
    if (scores->dim(1) != n)
        throw DimensionError("causal_mask: expected square scores, got " +
                             shape_str(scores->shape));
    auto out = make_tensor(scores->shape);
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j)
            out->data[i * n + j] = j <= i ? scores->data[i * n + j] : kMaskValue;
    if (want_grad(tape, {&scores})) {
        out->requires_grad = true;
        tape->record([scores, out, n] {
            if (!out->has_grad()) return;
            scores->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i)
                for (std::int64_t j = 0; j <= i; ++j)
                    scores->grad[i * n + j] += out->grad[i * n + j];
        });
    }
    return out;
}

TensorPtr rope(const TensorPtr& x, std::int64_t d_head, double base, Tape* tape) {
    require_2d(x, "rope input");
    const std::int64_t rows = x->dim(0), cols = x->dim(1);
    if (d_head <= 0 || d_head % 2 != 0 || cols % d_head != 0)
        throw DimensionError("rope: width " + std::to_string(cols) +
                             " incompatible with even head dim " + std::to_string(d_head));
    const std::int64_t n_heads = cols / d_head;
    const std::int64_t half = d_head / 2;
    // angle table: theta[s][j] = s * base^(-2j/d_head)
    std::vector<double> cos_t(static_cast<std::size_t>(rows * half));
    std::vector<double> sin_t(static_cast<std::size_t>(rows * half));
    for (std::int64_t s = 0; s < rows; ++s)
        for (std::int64_t j = 0; j < half; ++j) {
            const double freq =
                std::pow(base, -2.0 * static_cast<double>(j) / static_cast<double>(d_head));
            const double theta = static_cast<double>(s) * freq;
            cos_t[static_cast<std::size_t>(s * half + j)] = std::cos(theta);
            sin_t[static_cast<std::size_t>(s * half + j)] = std::sin(theta);
        }
    auto out = make_tensor(x->shape);
    for (std::int64_t s = 0; s < rows; ++s)
        for (std::int64_t h = 0; h < n_heads; ++h) {
            const std::int64_t off = s * cols + h * d_head;
            for (std::int64_t j = 0; j < half; ++j) {
                const double c = cos_t[static_cast<std::size_t>(s * half + j)];
                const double sn = sin_t[static_cast<std::size_t>(s * half + j)];
                const double u = x->data[off + j];
                const double v = x->data[off + j + half];
                out->data[off + j] = u * c - v * sn;
                out->data[off + j + half] = u * sn + v * c;
            }
        }
    if (want_grad(tape, {&x})) {
        out->requires_grad = true;
        tape->record([x, out, rows, cols, n_heads, half, d_head, cos_t = std::move(cos_t),
                      sin_t = std::move(sin_t)] {
            if (!out->has_grad()) return;
            x->ensure_grad();
            for (std::int64_t s = 0; s < rows; ++s)
                for (std::int64_t h = 0; h < n_heads; ++h) {
                    const std::int64_t off = s * cols + h * d_head;
                    for (std::int64_t j = 0; j < half; ++j) {
                        const double c = cos_t[static_cast<std::size_t>(s * half + j)];
                        const double sn = sin_t[static_cast<std::size_t>(s * half + j)];
                        const double gu = out->grad[off + j];
                        const double gv = out->grad[off + j + half];
                        x->grad[off + j] += gu * c + gv * sn;
                        x->grad[off + j + half] += -gu * sn + gv * c;
                    }
                }
        });
    }
    return out;
}

void backward(const TensorPtr& loss, Tape& tape) {
    if (loss->numel() != 1)
        throw ContractError("backward: loss must be scalar, got shape " +
                            shape_str(loss->shape));
    loss->ensure_grad();
    loss->grad[0] += 1.0;
    tape.run_backward();
}

TensorPtr finite_diff_grad(const std::function<double(const TensorPtr&)>& f,
                           const TensorPtr& x, double h) {
    if (h <= 0.0) throw ContractError("finite_diff_grad: h must be positive");
    auto g = make_tensor(x->shape);
    for (std::size_t i = 0; i < x->data.size(); ++i) {
        auto plus = make_tensor(x->shape, x->data);
        auto minus = make_tensor(x->shape, x->data);
        plus->data[i] += h;
        minus->data[i] -= h;
        g->data[i] = (f(plus) - f(minus)) / (2.0 * h);
    }
    return g;
}

}  // namespace prunerec
