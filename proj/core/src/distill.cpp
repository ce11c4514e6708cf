#include "ddlab/distill.hpp"

#include <cmath>
#include <limits>

#include "ddlab/errors.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/tape.hpp"

namespace ddlab::distill {

std::vector<int> SoftDataset::hard_targets() const { return ops::argmax_rows(teacher_probs); }

void SoftDataset::validate() const {
    if (teacher_probs.rank() != 2 || images.rank() != 4 || images.dim(0) != teacher_probs.dim(0)) {
        throw ValidationError("soft dataset: images " + shape_str(images.shape()) + " do not pair with targets " +
                              shape_str(teacher_probs.shape()));
    }
    if (!(temperature > 0.0f)) throw ParameterError("soft dataset: temperature must be positive");
    const auto k = teacher_probs.dim(1);
    for (std::int64_t r = 0; r < teacher_probs.dim(0); ++r) {
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const float p = teacher_probs[std::size_t(r * k + j)];
            if (!(p > 0.0f)) throw ValidationError("soft dataset: row " + std::to_string(r) + " has a non-positive entry");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-5) throw ValidationError("soft dataset: row " + std::to_string(r) + " does not sum to 1");
    }
}

SoftDataset make_soft_targets(const LogitsFn& teacher, const Tensor& images, float temperature) {
    if (!(temperature > 0.0f)) throw ParameterError("make_soft_targets: temperature must be positive");
    NoGradGuard no_grad;
    Tensor probs = ops::softmax(predict_logits(teacher, images), temperature);
    const auto k = probs.dim(1);
    auto p = probs.data();
    for (std::int64_t r = 0; r < probs.dim(0); ++r) {
        float* row = p.data() + r * k;
        bool underflow = false;
        for (std::int64_t j = 0; j < k; ++j) underflow |= !(row[j] > 0.0f);
        if (!underflow) continue;
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            row[j] = std::max(row[j], std::numeric_limits<float>::min());
            s += row[j];
        }
        for (std::int64_t j = 0; j < k; ++j) row[j] = static_cast<float>(row[j] / s);
    }
    SoftDataset out{images.clone(), std::move(probs), temperature};
    return out;
}

double agreement(const LogitsFn& student, const SoftDataset& data) {
    if (data.size() == 0) throw ValidationError("agreement: empty soft dataset");
    const auto pred = ops::argmax_rows(predict_logits(student, data.images));
    const auto target = data.hard_targets();
    std::size_t same = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) same += pred[i] == target[i];
    return double(same) / double(pred.size());
}

double distill_loss(const LogitsFn& student, const SoftDataset& data) {
    if (data.size() == 0) throw ValidationError("distill_loss: empty soft dataset");
    NoGradGuard no_grad;
    const Tensor logits = predict_logits(student, data.images);
    return ops::soft_cross_entropy(logits, data.teacher_probs, data.temperature).item();
}

TrainLog distill_train(StudentCnn& student, const SoftDataset& train, const SoftDataset& val, const TrainHyper& hyper,
                       Prng prng, const DistillOptions& options) {
    if (train.size() == 0 || val.size() == 0) throw ValidationError("distill_train: empty soft dataset");
    train.validate();
    val.validate();
    if (options.hard_blend < 0.0f || options.hard_blend > 1.0f) {
        throw ParameterError("distill_train: hard_blend must lie in [0, 1]");
    }
    const LogitsFn model = [&student](const Tensor& x) { return student.forward(x); };
    const std::vector<int> hard = options.hard_blend > 0.0f ? train.hard_targets() : std::vector<int>{};
    auto loss_fn = [&](std::span<const std::size_t> batch, Prng&) {
        const Tensor x = gather_rows(train.images, batch);
        const Tensor q = gather_rows(train.teacher_probs, batch);
        const Tensor logits = student.forward(x);
        Tensor loss = ops::soft_cross_entropy(logits, q, train.temperature);
        if (options.hard_blend > 0.0f) {
            std::vector<int> y;
            y.reserve(batch.size());
            for (auto i : batch) y.push_back(hard[i]);
            loss = ops::add(ops::scale(loss, 1.0f - options.hard_blend),
                            ops::scale(ops::cross_entropy(logits, y), options.hard_blend));
        }
        return loss;
    };
    auto val_fn = [&]() { return std::pair{distill_loss(model, val), agreement(model, val)}; };
    return fit(student.params(), train.size(), loss_fn, val_fn, hyper, prng);
}

TransferResult transferability_gap(const LogitsFn& teacher, const LogitsFn& student, const attacks::AdvBatch& adv) {
    TransferResult r;
    r.teacher_robust_accuracy = 1.0 - attacks::attack_success_rate(teacher, adv);
    r.student_robust_accuracy = 1.0 - attacks::attack_success_rate(student, adv);
    return r;
}

}  // namespace ddlab::distill
