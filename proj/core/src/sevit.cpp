#include "ddlab/sevit.hpp"

#include <algorithm>
#include <numeric>

#include "ddlab/errors.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/tape.hpp"

namespace ddlab::sevit {

MlpConfig head_config(const VitConfig& vit, std::int64_t hidden) {
    MlpConfig c;
    c.hidden = hidden;
    c.num_patches = vit.num_patches();
    c.embed_dim = vit.embed_dim;
    c.num_classes = vit.num_classes;
    return c;
}

namespace {

// Runs the ViT over `images` in batches and hands each batch's output to `sink`.
template <class Sink>
void for_each_batch(const VitModel& vit, const Tensor& images, std::size_t batch_size, Sink&& sink) {
    NoGradGuard no_grad;
    const std::size_t n = static_cast<std::size_t>(images.dim(0));
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        idx.resize(end - start);
        std::iota(idx.begin(), idx.end(), start);
        sink(vit.forward(gather_rows(images, idx)));
    }
}

Tensor concat_rows(std::vector<float>&& data, Shape shape, std::size_t n) {
    shape[0] = static_cast<std::int64_t>(n);
    return Tensor(std::move(shape), std::move(data));
}

}  // namespace

Tensor block_tokens(const VitModel& vit, const Tensor& images, std::int64_t block, std::size_t batch_size) {
    if (block < 1 || block > vit.config().num_blocks) {
        throw ParameterError("block " + std::to_string(block) + " outside [1, " + std::to_string(vit.config().num_blocks) + "]");
    }
    std::vector<float> out;
    Shape shape;
    for_each_batch(vit, images, batch_size, [&](const VitModel::Output& o) {
        const Tensor& t = o.block_tokens[std::size_t(block - 1)];
        out.insert(out.end(), t.data().begin(), t.data().end());
        shape = t.shape();
    });
    return concat_rows(std::move(out), shape, static_cast<std::size_t>(images.dim(0)));
}

std::vector<MlpHead> train_intermediate_heads(const VitModel& vit, const LabeledImages& train, const LabeledImages& val,
                                              std::int64_t m, const TrainHyper& hyper, Prng prng,
                                              std::int64_t hidden) {
    const std::int64_t L = vit.config().num_blocks;
    if (m < 1 || m > L) throw ParameterError("ensemble size m = " + std::to_string(m) + " outside [1, " + std::to_string(L) + "]");
    if (train.size() == 0 || val.size() == 0) throw ValidationError("train_intermediate_heads: empty train or val split");
    std::vector<MlpHead> heads;
    for (std::int64_t b = 1; b <= m; ++b) {
        const std::string tag = "head/" + std::to_string(b);
        MlpHead head(head_config(vit.config(), hidden), prng.split(tag + "/init"));
        const LabeledImages tr{block_tokens(vit, train.images, b), train.labels};
        const LabeledImages va{block_tokens(vit, val.images, b), val.labels};
        const LogitsFn fn = [&head](const Tensor& tokens) { return head.forward(tokens); };
        train_classifier(head.params(), fn, tr, va, hyper, prng.split(tag + "/train"));
        heads.push_back(std::move(head));
    }
    return heads;
}

Prediction ensemble_predict(const SevitEnsemble& e, const Tensor& x, std::size_t batch_size) {
    if (!e.vit) throw ValidationError("ensemble_predict: no ViT attached");
    if (e.m() > static_cast<std::size_t>(e.vit->config().num_blocks)) {
        throw ValidationError("ensemble_predict: more heads than ViT blocks");
    }
    const std::size_t k = static_cast<std::size_t>(e.vit->config().num_classes);
    Prediction p;
    for_each_batch(*e.vit, x, batch_size, [&](const VitModel::Output& o) {
        const auto vit_pred = ops::argmax_rows(o.logits);
        const std::size_t n = vit_pred.size();
        std::vector<std::vector<int>> votes(n, std::vector<int>(k, 0));
        for (std::size_t i = 0; i < n; ++i) ++votes[i][std::size_t(vit_pred[i])];
        for (std::size_t h = 0; h < e.m(); ++h) {
            const auto hp = ops::argmax_rows(e.heads[h].forward(o.block_tokens[h]));
            for (std::size_t i = 0; i < n; ++i) ++votes[i][std::size_t(hp[i])];
        }
        for (std::size_t i = 0; i < n; ++i) {
            const int top = *std::max_element(votes[i].begin(), votes[i].end());
            int cls = vit_pred[i];
            if (votes[i][std::size_t(cls)] != top) {
                cls = static_cast<int>(std::find(votes[i].begin(), votes[i].end(), top) - votes[i].begin());
            }
            p.classes.push_back(cls);
            p.vit_classes.push_back(vit_pred[i]);
            p.votes.push_back(std::move(votes[i]));
        }
    });
    return p;
}

Tensor ensemble_scores(const SevitEnsemble& e, const Tensor& x) {
    const Prediction p = ensemble_predict(e, x);
    const std::size_t n = p.classes.size(), k = p.votes.empty() ? 0 : p.votes[0].size();
    std::vector<float> s(n * k);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) s[i * k + j] = static_cast<float>(p.votes[i][j]);
        s[i * k + std::size_t(p.vit_classes[i])] += 0.5f;
    }
    return Tensor({static_cast<std::int64_t>(n), static_cast<std::int64_t>(k)}, std::move(s));
}

LogitsFn as_logits(const SevitEnsemble& e) {
    return [&e](const Tensor& x) { return ensemble_scores(e, x); };
}

std::vector<bool> detect_adversarial(const SevitEnsemble& e, const Tensor& x, int threshold) {
    if (threshold < 0 || static_cast<std::size_t>(threshold) > e.m()) {
        throw ParameterError("detection threshold " + std::to_string(threshold) + " outside [0, " + std::to_string(e.m()) + "]");
    }
    const Prediction p = ensemble_predict(e, x);
    std::vector<bool> flagged(p.classes.size());
    const int voters = static_cast<int>(e.m()) + 1;
    for (std::size_t i = 0; i < flagged.size(); ++i) {
        flagged[i] = voters - p.votes[i][std::size_t(p.classes[i])] > threshold;
    }
    return flagged;
}

std::vector<double> head_accuracies(const SevitEnsemble& e, const LabeledImages& data) {
    if (!e.vit) throw ValidationError("head_accuracies: no ViT attached");
    if (data.size() == 0) throw ValidationError("head_accuracies: empty data");
    std::vector<std::size_t> correct(e.m(), 0);
    std::size_t offset = 0;
    for_each_batch(*e.vit, data.images, 128, [&](const VitModel::Output& o) {
        for (std::size_t h = 0; h < e.m(); ++h) {
            const auto hp = ops::argmax_rows(e.heads[h].forward(o.block_tokens[h]));
            for (std::size_t i = 0; i < hp.size(); ++i) correct[h] += hp[i] == data.labels[offset + i];
        }
        offset += static_cast<std::size_t>(o.logits.dim(0));
    });
    std::vector<double> acc;
    for (auto c : correct) acc.push_back(double(c) / double(data.size()));
    return acc;
}

}  // namespace ddlab::sevit
