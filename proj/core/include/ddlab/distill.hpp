#pragma once

#include <utility>

#include "ddlab/attacks.hpp"
#include "ddlab/models.hpp"
#include "ddlab/tensor.hpp"
#include "ddlab/train.hpp"

namespace ddlab::distill {

/// Images paired with the teacher's temperature-softened probabilities.
/// Carries no ground-truth labels.
struct SoftDataset {
    Tensor images;         // N x C x H x W
    Tensor teacher_probs;  // N x K, rows sum to 1, strictly positive
    float temperature = 1.0f;

    std::size_t size() const { return teacher_probs.rank() == 2 ? static_cast<std::size_t>(teacher_probs.dim(0)) : 0; }
    /// Teacher argmax per row.
    std::vector<int> hard_targets() const;
    void validate() const;
};

/// softmax(teacher(x) / T) in inference mode.
SoftDataset make_soft_targets(const LogitsFn& teacher, const Tensor& images, float temperature);

struct DistillOptions {
    /// Weight of an extra cross-entropy term on the teacher's hard predictions; 0 disables.
    float hard_blend = 0.0f;
};

/// Trains the student on soft_cross_entropy(student / T, teacher probs). The
/// kept epoch maximizes argmax agreement with the teacher on `val`.
TrainLog distill_train(StudentCnn& student, const SoftDataset& train, const SoftDataset& val, const TrainHyper& hyper,
                       Prng prng, const DistillOptions& options = {});

/// Fraction of samples where the student's argmax equals the teacher's.
double agreement(const LogitsFn& student, const SoftDataset& data);

/// Mean soft cross-entropy of the student on `data` (no tape).
double distill_loss(const LogitsFn& student, const SoftDataset& data);

struct TransferResult {
    double teacher_robust_accuracy = 0.0;
    double student_robust_accuracy = 0.0;
};

/// Robust accuracies of teacher and student on the same adversarial batch.
TransferResult transferability_gap(const LogitsFn& teacher, const LogitsFn& student, const attacks::AdvBatch& adv);

}  // namespace ddlab::distill
