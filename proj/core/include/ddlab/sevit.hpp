#pragma once

#include <vector>

#include "ddlab/dataset.hpp"
#include "ddlab/models.hpp"
#include "ddlab/train.hpp"

namespace ddlab::sevit {

/// Frozen ViT plus MLP heads on the patch tokens of blocks 1..m (head i reads block i).
struct SevitEnsemble {
    const VitModel* vit = nullptr;
    std::vector<MlpHead> heads;

    std::size_t m() const noexcept { return heads.size(); }
};

MlpConfig head_config(const VitConfig& vit, std::int64_t hidden = 256);

/// Block-`block` patch tokens (1-based) of every image, computed in inference mode.
Tensor block_tokens(const VitModel& vit, const Tensor& images, std::int64_t block, std::size_t batch_size = 128);

/// One head per block 1..m trained with true labels on cached tokens. The ViT
/// is never written. m must lie in [1, L].
std::vector<MlpHead> train_intermediate_heads(const VitModel& vit, const LabeledImages& train, const LabeledImages& val,
                                              std::int64_t m, const TrainHyper& hyper, Prng prng,
                                              std::int64_t hidden = 256);

struct Prediction {
    std::vector<int> classes;
    /// Per sample, the number of voters (m heads + ViT) choosing each class; sums to m + 1.
    std::vector<std::vector<int>> votes;
    std::vector<int> vit_classes;
};

/// Majority vote; ties go to the ViT's class, then to the lower class index.
Prediction ensemble_predict(const SevitEnsemble& e, const Tensor& x, std::size_t batch_size = 128);

/// Vote counts with a 0.5 bonus on the ViT's class, so argmax reproduces the
/// tie-broken majority. Usable wherever a LogitsFn is expected.
Tensor ensemble_scores(const SevitEnsemble& e, const Tensor& x);
LogitsFn as_logits(const SevitEnsemble& e);

/// Flags a sample when more than `threshold` voters disagree with the majority.
/// threshold must lie in [0, m].
std::vector<bool> detect_adversarial(const SevitEnsemble& e, const Tensor& x, int threshold);

/// Per-head accuracy on `data` (index i is head i + 1).
std::vector<double> head_accuracies(const SevitEnsemble& e, const LabeledImages& data);

}  // namespace ddlab::sevit
