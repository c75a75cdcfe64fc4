#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace prunerec {

using Shape = std::vector<std::int64_t>;

// Dense row-major 64-bit tensor. Data is immutable once an op has consumed
// it; only grad is populated after the fact. A tensor's identity is
// (shape, data) -- no strides or views.
struct Tensor {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until touched by backward

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    std::int64_t dim(std::size_t i) const { return shape[i]; }
    std::size_t ndim() const { return shape.size(); }

    // Lazily sizes grad to match data, zero-filled.
    void ensure_grad();
    void zero_grad();
    bool has_grad() const { return !grad.empty(); }
};

using TensorPtr = std::shared_ptr<Tensor>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

TensorPtr make_tensor(Shape shape, bool requires_grad = false);
TensorPtr make_tensor(Shape shape, std::vector<double> data, bool requires_grad = false);
TensorPtr full_like_value(Shape shape, double value, bool requires_grad = false);

// Throws ContractError if any entry of t is NaN or infinite.
void check_finite(const Tensor& t, const std::string& context);

// Reverse-mode tape. Ops append their local backward rule as they execute;
// backward() replays the list once in reverse. Confined to one thread.
class Tape {
public:
    void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Replays all recorded backward rules, newest first.
    void run_backward() {
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    std::vector<std::function<void()>> nodes_;
};

// ---- primitive ops -------------------------------------------------------
// Every op takes an optional tape; with tape == nullptr no gradient state is
// recorded and requires_grad does not propagate.

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b, Tape* tape = nullptr);
// a[m x k] . transpose(b[n x k]) -> [m x n]
TensorPtr matmul_bt(const TensorPtr& a, const TensorPtr& b, Tape* tape = nullptr);
TensorPtr add(const TensorPtr& a, const TensorPtr& b, Tape* tape = nullptr);
// x[m x n] + bias[n] broadcast over rows
TensorPtr add_bias(const TensorPtr& x, const TensorPtr& bias, Tape* tape = nullptr);
TensorPtr mul(const TensorPtr& a, const TensorPtr& b, Tape* tape = nullptr);
TensorPtr scale(const TensorPtr& x, double c, Tape* tape = nullptr);
TensorPtr silu(const TensorPtr& x, Tape* tape = nullptr);
TensorPtr softmax_last_dim(const TensorPtr& x, Tape* tape = nullptr);
TensorPtr rms_norm(const TensorPtr& x, const TensorPtr& weight, double eps,
                   Tape* tape = nullptr);
// Mean over rows of -log softmax(logits)[target]; scalar output.
TensorPtr cross_entropy_logits(const TensorPtr& logits, const std::vector<int>& targets,
                               Tape* tape = nullptr);
// KL(p || q) in nats for probability vectors; q clamped at 1e-12 inside the
// log, p == 0 terms contribute exactly 0.
TensorPtr kl_divergence(const TensorPtr& p, const TensorPtr& q, Tape* tape = nullptr);
// Gathers rows of table[v x d] at the given ids -> [n x d].
TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids,
                         Tape* tape = nullptr);
TensorPtr slice_cols(const TensorPtr& x, std::int64_t start, std::int64_t len,
                     Tape* tape = nullptr);
TensorPtr concat_cols(const std::vector<TensorPtr>& parts, Tape* tape = nullptr);
// Adds -1e30 to entries above the diagonal of a square score matrix.
TensorPtr causal_mask(const TensorPtr& scores, Tape* tape = nullptr);
// Rotary position encoding applied independently to every d_head-wide column
// block (half-split pairing). Row index is the position.
TensorPtr rope(const TensorPtr& x, std::int64_t d_head, double base, Tape* tape = nullptr);

// Seeds d(loss)/d(loss) = 1 and replays the tape. loss must be scalar.
void backward(const TensorPtr& loss, Tape& tape);

// Central-difference gradient oracle: (f(x + h e_i) - f(x - h e_i)) / 2h.
// f receives a fresh tensor with perturbed data.
TensorPtr finite_diff_grad(const std::function<double(const TensorPtr&)>& f,
                           const TensorPtr& x, double h);

// Raw kernel shared by the matmul ops: C = op(A) . op(B), optionally
// accumulating into C. A is m x k after transposition, B is k x n.
void gemm(std::int64_t m, std::int64_t k, std::int64_t n, const double* a,
          const double* b, double* c, bool trans_a, bool trans_b, bool accumulate);

}  // namespace prunerec
