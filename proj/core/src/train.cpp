#include "ddlab/train.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "ddlab/errors.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/tape.hpp"

namespace ddlab {

namespace {

void clip_gradients(ModelParams& params, float max_norm) {
    double sq = 0.0;
    for (const auto& e : params)
        for (float g : e.second.grad()) sq += double(g) * g;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const float s = static_cast<float>(max_norm / norm);
    for (auto& e : params)
        for (auto& g : e.second.mutable_grad()) g *= s;
}

}  // namespace

TrainLog fit(ModelParams& params, std::size_t n_train, const BatchLossFn& loss_fn, const ValidationFn& val_fn,
             const TrainHyper& hyper, Prng prng) {
    if (n_train == 0) throw ValidationError("fit: empty training split");
    if (hyper.epochs < 1 || hyper.batch_size < 1) throw ParameterError("fit: epochs and batch_size must be >= 1");

    Sgd opt(hyper.lr, hyper.momentum, hyper.weight_decay);
    const std::size_t bs = static_cast<std::size_t>(hyper.batch_size);
    const std::size_t steps_per_epoch = (n_train + bs - 1) / bs;
    const double total_steps = double(steps_per_epoch) * hyper.epochs;
    std::size_t step = 0;

    TrainLog log;
    ModelParams best;
    double best_loss = INFINITY;
    std::vector<std::size_t> order(n_train);

    for (int epoch = 1; epoch <= hyper.epochs; ++epoch) {
        Prng erng = prng.split("epoch/" + std::to_string(epoch));
        std::iota(order.begin(), order.end(), 0);
        for (std::size_t i = n_train - 1; i > 0; --i) std::swap(order[i], order[erng.below(i + 1)]);

        double loss_sum = 0.0;
        for (std::size_t start = 0; start < n_train; start += bs) {
            const std::size_t end = std::min(n_train, start + bs);
            std::span<const std::size_t> batch(order.data() + start, end - start);
            if (hyper.cosine_decay) {
                opt.set_lr(static_cast<float>(hyper.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step) / total_steps))));
            }
            params.zero_grad();
            Tape tape;
            Tensor loss;
            {
                TapeGuard guard(tape);
                loss = loss_fn(batch, erng);
            }
            backward(tape, loss);
            if (hyper.clip_norm > 0.0f) clip_gradients(params, hyper.clip_norm);
            opt.step(params);
            loss_sum += double(loss.item()) * double(batch.size());
            ++step;
        }

        EpochLog row;
        row.epoch = epoch;
        row.train_loss = loss_sum / double(n_train);
        std::tie(row.val_loss, row.val_metric) = val_fn();
        log.epochs.push_back(row);

        const bool better = log.epochs.size() == 1 || row.val_metric > log.best_metric ||
                            (row.val_metric == log.best_metric && row.val_loss < best_loss);
        if (better) {
            log.best_epoch = epoch;
            log.best_metric = row.val_metric;
            best_loss = row.val_loss;
            best = params.clone();
        }
    }
    params.assign_from(best);
    params.zero_grad();
    return log;
}

Tensor predict_logits(const LogitsFn& model, const Tensor& images, std::size_t batch_size) {
    NoGradGuard no_grad;
    const std::size_t n = static_cast<std::size_t>(images.dim(0));
    if (n == 0) throw ValidationError("predict_logits: empty batch");
    std::vector<float> out;
    Shape out_shape;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor logits = model(gather_rows(images, idx));
        out.insert(out.end(), logits.data().begin(), logits.data().end());
        out_shape = logits.shape();
    }
    out_shape[0] = static_cast<std::int64_t>(n);
    return Tensor(std::move(out_shape), std::move(out));
}

double accuracy_of(const LogitsFn& model, const LabeledImages& data) {
    if (data.size() == 0) throw ValidationError("accuracy_of: empty data");
    const auto pred = ops::argmax_rows(predict_logits(model, data.images));
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == data.labels[i];
    return double(correct) / double(pred.size());
}

TrainLog train_classifier(ModelParams& params, const LogitsFn& model, const LabeledImages& train,
                          const LabeledImages& val, const TrainHyper& hyper, Prng prng, const AugmentFn& augment) {
    if (train.size() == 0 || val.size() == 0) throw ValidationError("train_classifier: empty train or val split");
    auto loss_fn = [&](std::span<const std::size_t> batch, Prng& rng) {
        const LabeledImages b = train.select(batch);
        const Tensor x = augment ? augment(b.images, rng) : b.images;
        return ops::cross_entropy(model(x), b.labels);
    };
    auto val_fn = [&]() {
        const Tensor logits = predict_logits(model, val.images);
        const auto losses = ops::per_sample_cross_entropy(logits, val.labels);
        const auto pred = ops::argmax_rows(logits);
        double loss = 0.0;
        std::size_t correct = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            loss += losses[i];
            correct += pred[i] == val.labels[i];
        }
        return std::pair{loss / double(pred.size()), double(correct) / double(pred.size())};
    };
    return fit(params, train.size(), loss_fn, val_fn, hyper, prng);
}

}  // namespace ddlab
