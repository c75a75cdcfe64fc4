#include "prunerec/distill.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include "prunerec/errors.hpp"

namespace prunerec {

namespace {

constexpr double kLogFloor = 1e-12;

// softmax rows into a flat buffer
void softmax_rows(const double* in, double* out, std::int64_t rows, std::int64_t width) {
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* x = in + r * width;
        double* p = out + r * width;
        double mx = x[0];
        for (std::int64_t j = 1; j < width; ++j) mx = std::max(mx, x[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < width; ++j) {
            p[j] = std::exp(x[j] - mx);
            sum += p[j];
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < width; ++j) p[j] *= inv;
    }
}

class AdamOptimizer {
public:
    AdamOptimizer(std::vector<TensorPtr> params, const DistillConfig& cfg)
        : params_(std::move(params)), cfg_(cfg) {
        for (const auto& p : params_) {
            m_.emplace_back(p->data.size(), 0.0);
            v_.emplace_back(p->data.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor& p = *params_[pi];
            if (!p.has_grad()) continue;
            for (std::size_t i = 0; i < p.data.size(); ++i) {
                const double g = p.grad[i];
                m_[pi][i] = cfg_.beta1 * m_[pi][i] + (1.0 - cfg_.beta1) * g;
                v_[pi][i] = cfg_.beta2 * v_[pi][i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m_[pi][i] / bc1;
                const double vhat = v_[pi][i] / bc2;
                p.data[i] -= cfg_.learning_rate * mhat / (std::sqrt(vhat) + cfg_.adam_eps);
            }
        }
    }

private:
    std::vector<TensorPtr> params_;
    DistillConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    int t_ = 0;
};

std::uint64_t epoch_seed(std::uint64_t base, int epoch) {
    return base * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch) + 1;
}

}  // namespace

void DistillConfig::validate() const {
    if (lambda < 0.0 || lambda > 1.0)
        throw ContractError("distill config: lambda outside [0, 1]");
    if (learning_rate <= 0.0) throw ContractError("distill config: learning_rate must be > 0");
    if (epochs < 0 || batch_size < 1)
        throw ContractError("distill config: epochs/batch_size out of range");
}

TensorPtr kl_teacher_student(const TensorPtr& teacher_logits,
                             const TensorPtr& student_logits, KlDirection direction,
                             Tape* tape) {
    if (teacher_logits->shape != student_logits->shape)
        throw DimensionError("kl_teacher_student: teacher " +
                             shape_str(teacher_logits->shape) + " vs student " +
                             shape_str(student_logits->shape));
    if (teacher_logits->ndim() != 2)
        throw DimensionError("kl_teacher_student: logits must be 2-D");
    const std::int64_t rows = teacher_logits->dim(0), vocab = teacher_logits->dim(1);
    std::vector<double> p_t(teacher_logits->data.size());
    std::vector<double> p_s(student_logits->data.size());
    softmax_rows(teacher_logits->data.data(), p_t.data(), rows, vocab);
    softmax_rows(student_logits->data.data(), p_s.data(), rows, vocab);

    double total = 0.0;
    if (direction == KlDirection::Forward) {
        for (std::size_t i = 0; i < p_t.size(); ++i) {
            if (p_t[i] <= 0.0) continue;
            total += p_t[i] * std::log(p_t[i] / std::max(p_s[i], kLogFloor));
        }
    } else {
        for (std::size_t i = 0; i < p_s.size(); ++i) {
            if (p_s[i] <= 0.0) continue;
            total += p_s[i] * std::log(p_s[i] / std::max(p_t[i], kLogFloor));
        }
    }
    auto out = make_tensor({1}, std::vector<double>{total / static_cast<double>(rows)});
    check_finite(*out, "kl_teacher_student output");

    if (tape && student_logits->requires_grad) {
        out->requires_grad = true;
        tape->record([student_logits, out, rows, vocab, direction, p_t = std::move(p_t),
                      p_s = std::move(p_s)] {
            if (!out->has_grad()) return;
            student_logits->ensure_grad();
            const double g = out->grad[0] / static_cast<double>(rows);
            if (direction == KlDirection::Forward) {
                for (std::size_t i = 0; i < p_s.size(); ++i)
                    student_logits->grad[i] += g * (p_s[i] - p_t[i]);
            } else {
                for (std::int64_t r = 0; r < rows; ++r) {
                    const double* ps = p_s.data() + r * vocab;
                    const double* pt = p_t.data() + r * vocab;
                    double mean_a = 0.0;
                    for (std::int64_t j = 0; j < vocab; ++j) {
                        if (ps[j] <= 0.0) continue;
                        mean_a += ps[j] * std::log(ps[j] / std::max(pt[j], kLogFloor));
                    }
                    double* gz = student_logits->grad.data() + r * vocab;
                    for (std::int64_t j = 0; j < vocab; ++j) {
                        if (ps[j] <= 0.0) continue;
                        const double a = std::log(ps[j] / std::max(pt[j], kLogFloor));
                        gz[j] += g * ps[j] * (a - mean_a);
                    }
                }
            }
        });
    }
    return out;
}

TensorPtr distill_loss(const TensorPtr& teacher_logits, const TensorPtr& student_logits,
                       const std::vector<int>& targets, double lambda,
                       KlDirection direction, Tape* tape, double* kl_out, double* ce_out) {
    if (lambda < 0.0 || lambda > 1.0)
        throw ContractError("distill_loss: lambda outside [0, 1]");
    TensorPtr kl = kl_teacher_student(teacher_logits, student_logits, direction, tape);
    TensorPtr ce = cross_entropy_logits(student_logits, targets, tape);
    if (kl_out) *kl_out = kl->data[0];
    if (ce_out) *ce_out = ce->data[0];
    return add(scale(kl, lambda, tape), scale(ce, 1.0 - lambda, tape), tape);
}

namespace {

struct RowLoss {
    TensorPtr loss;
    double kl = 0.0;
    double ce = 0.0;
};

// Shared mini-batch loop. build_row_loss sees the unpadded tokens/targets of
// one sequence and returns its mean-per-position loss.
template <typename RowFn>
TrainReport run_training(TransformerModel& model, const RecDataset& dataset,
                         const DistillConfig& config, RowFn build_row_loss) {
    config.validate();
    if (dataset.train_idx.empty()) throw ContractError("training: empty train split");
    const auto start_time = std::chrono::steady_clock::now();
    TrainReport report;
    if (config.epochs == 0) return report;

    model.set_requires_grad(true);
    AdamOptimizer opt(model.parameters(), config);

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        auto epoch_batches = batches(dataset, Split::Train, config.batch_size,
                                     epoch_seed(config.seed, epoch));
        double sum_loss = 0.0, sum_kl = 0.0, sum_ce = 0.0;
        for (const Batch& batch : epoch_batches) {
            Tape tape;
            for (auto& p : model.parameters()) p->zero_grad();

            std::int64_t total_positions = 0;
            std::vector<std::vector<int>> row_tokens, row_targets;
            for (std::size_t r = 0; r < batch.input_tokens.size(); ++r) {
                std::size_t len = 0;
                while (len < batch.loss_mask[r].size() && batch.loss_mask[r][len] == 1) ++len;
                row_tokens.emplace_back(batch.input_tokens[r].begin(),
                                        batch.input_tokens[r].begin() + len);
                row_targets.emplace_back(batch.target_tokens[r].begin(),
                                         batch.target_tokens[r].begin() + len);
                total_positions += static_cast<std::int64_t>(len);
            }

            TensorPtr batch_loss;
            double step_kl = 0.0, step_ce = 0.0;
            for (std::size_t r = 0; r < row_tokens.size(); ++r) {
                RowLoss rl = build_row_loss(row_tokens[r], row_targets[r], tape);
                const double w = static_cast<double>(row_tokens[r].size()) /
                                 static_cast<double>(total_positions);
                TensorPtr weighted = scale(rl.loss, w, &tape);
                batch_loss = batch_loss ? add(batch_loss, weighted, &tape) : weighted;
                step_kl += w * rl.kl;
                step_ce += w * rl.ce;
            }
            backward(batch_loss, tape);
            opt.step();

            report.steps.push_back({batch_loss->data[0], step_kl, step_ce});
            sum_loss += batch_loss->data[0];
            sum_kl += step_kl;
            sum_ce += step_ce;
        }
        const double inv = 1.0 / static_cast<double>(epoch_batches.size());
        report.epochs.push_back({sum_loss * inv, sum_kl * inv, sum_ce * inv});
    }
    model.set_requires_grad(false);
    model.zero_grads();
    report.wall_time_sec =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
    return report;
}

}  // namespace

TrainReport train_base(TransformerModel& model, const RecDataset& dataset,
                       const DistillConfig& config) {
    return run_training(model, dataset, config,
                        [&model](const std::vector<int>& tokens,
                                 const std::vector<int>& targets, Tape& tape) {
                            TensorPtr logits =
                                forward(model, tokens, nullptr, nullptr, &tape);
                            RowLoss rl;
                            rl.loss = cross_entropy_logits(logits, targets, &tape);
                            rl.ce = rl.loss->data[0];
                            return rl;
                        });
}

TrainReport restore(TransformerModel& student, const TransformerModel& teacher,
                    const RecDataset& dataset, const DistillConfig& config) {
    if (student.config.vocab_size != teacher.config.vocab_size)
        throw ContractError("restore: student vocab " +
                            std::to_string(student.config.vocab_size) +
                            " != teacher vocab " +
                            std::to_string(teacher.config.vocab_size));
    return run_training(
        student, dataset, config,
        [&student, &teacher, &config](const std::vector<int>& tokens,
                                      const std::vector<int>& targets, Tape& tape) {
            TensorPtr teacher_logits = forward(teacher, tokens);  // frozen, no tape
            TensorPtr student_logits = forward(student, tokens, nullptr, nullptr, &tape);
            RowLoss rl;
            rl.loss = distill_loss(teacher_logits, student_logits, targets, config.lambda,
                                   config.kl_direction, &tape, &rl.kl, &rl.ce);
            return rl;
        });
}

void append_train_log(const TrainReport& report, const std::string& path,
                      const std::string& label) {
    std::ofstream out(path, std::ios::app);
    if (!out) throw IoError("cannot open " + path + " for appending");
    out << "# " << label << " wall_time_sec=" << report.wall_time_sec << "\n";
    out << "step\tloss\tkl\tce\n";
    for (std::size_t i = 0; i < report.steps.size(); ++i)
        out << i << '\t' << report.steps[i].loss << '\t' << report.steps[i].kl << '\t'
            << report.steps[i].ce << '\n';
    for (std::size_t e = 0; e < report.epochs.size(); ++e)
        out << "epoch " << e << " mean_loss=" << report.epochs[e].mean_loss
            << " mean_kl=" << report.epochs[e].mean_kl
            << " mean_ce=" << report.epochs[e].mean_ce << "\n";
    if (!out) throw IoError("write failed for " + path);
}

}  // namespace prunerec
