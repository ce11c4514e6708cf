#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ddlab/dataset.hpp"
#include "ddlab/models.hpp"
#include "ddlab/optim.hpp"
#include "ddlab/prng.hpp"

namespace ddlab {

struct TrainHyper {
    int epochs = 10;
    int batch_size = 32;
    float lr = 0.05f;
    float momentum = 0.9f;
    /// Cosine decay of the learning rate to zero over all steps.
    bool cosine_decay = true;
    /// Global gradient-norm clip; 0 disables.
    float clip_norm = 0.0f;
    /// L2 penalty folded into the SGD update; 0 disables.
    float weight_decay = 0.0f;
};

struct EpochLog {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_metric = 0.0;  // higher is better
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    int best_epoch = 0;
    double best_metric = 0.0;
};

/// Loss of one mini-batch given training-set indices. Runs under an active tape.
using BatchLossFn = std::function<Tensor(std::span<const std::size_t> batch, Prng& rng)>;
/// Validation pass returning (loss, metric).
using ValidationFn = std::function<std::pair<double, double>()>;

/// Mini-batch SGD over `n_train` samples. After every epoch the validation
/// metric is computed; on return `params` hold the best-metric epoch's values
/// (ties go to lower validation loss, then to the earlier epoch).
TrainLog fit(ModelParams& params, std::size_t n_train, const BatchLossFn& loss_fn, const ValidationFn& val_fn,
             const TrainHyper& hyper, Prng prng);

/// Optional per-batch input transform applied during training only.
using AugmentFn = std::function<Tensor(const Tensor& batch, Prng& rng)>;

/// Cross-entropy training of any classifier whose forward reads `params`.
/// Selects the best-validation-accuracy epoch.
TrainLog train_classifier(ModelParams& params, const LogitsFn& model, const LabeledImages& train,
                          const LabeledImages& val, const TrainHyper& hyper, Prng prng,
                          const AugmentFn& augment = nullptr);

/// Inference-mode logits in batches of `batch_size`.
Tensor predict_logits(const LogitsFn& model, const Tensor& images, std::size_t batch_size = 128);
double accuracy_of(const LogitsFn& model, const LabeledImages& data);

}  // namespace ddlab
