#pragma once

#include <cstdint>
#include <vector>

#include "prunerec/model.hpp"
#include "prunerec/recdata.hpp"

namespace prunerec {

enum class KlDirection { Forward, Reverse };

struct DistillConfig {
    double lambda = 0.8;  // weight on the KL term
    KlDirection kl_direction = KlDirection::Forward;
    double learning_rate = 3e-4;
    int epochs = 3;
    int batch_size = 32;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

struct TrainReport {
    struct EpochStats {
        double mean_loss = 0.0;
        double mean_kl = 0.0;
        double mean_ce = 0.0;
    };
    struct StepStats {
        double loss = 0.0;
        double kl = 0.0;
        double ce = 0.0;
    };
    std::vector<EpochStats> epochs;
    std::vector<StepStats> steps;
    double wall_time_sec = 0.0;
};

// Mean-over-rows KL between teacher and student softmax distributions.
// Teacher logits are constants; gradient flows to the student only.
// direction == Reverse computes KL(student || teacher).
TensorPtr kl_teacher_student(const TensorPtr& teacher_logits,
                             const TensorPtr& student_logits, KlDirection direction,
                             Tape* tape = nullptr);

// Restoration loss: lambda * KL + (1 - lambda) * CE. kl_out/ce_out
// receive the component values when non-null.
TensorPtr distill_loss(const TensorPtr& teacher_logits, const TensorPtr& student_logits,
                       const std::vector<int>& targets, double lambda,
                       KlDirection direction, Tape* tape = nullptr,
                       double* kl_out = nullptr, double* ce_out = nullptr);

// Next-token cross-entropy fine-tuning over the train split. Deterministic
// under seed; model trained in place.
TrainReport train_base(TransformerModel& model, const RecDataset& dataset,
                       const DistillConfig& config);

// Distillation against a frozen teacher over the train split. The student is
// trained in place; the teacher is never modified.
TrainReport restore(TransformerModel& student, const TransformerModel& teacher,
                    const RecDataset& dataset, const DistillConfig& config);

void append_train_log(const TrainReport& report, const std::string& path,
                      const std::string& label);

}  // namespace prunerec
