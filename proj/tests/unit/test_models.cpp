#include <gtest/gtest.h>

#include <cmath>

#include "ddlab/dataset.hpp"
#include "ddlab/errors.hpp"
#include "ddlab/models.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/tape.hpp"
#include "ddlab/train.hpp"

using namespace ddlab;

namespace {

VitConfig small_vit() {
    VitConfig c;
    c.image_size = 16;
    c.embed_dim = 16;
    c.num_blocks = 3;
    c.num_heads = 2;
    return c;
}

Tensor images(std::int64_t n, std::int64_t size, std::uint64_t seed) {
    Prng p(seed);
    return Tensor::uniform({n, 1, size, size}, p, 0.0f, 1.0f);
}

void zero(Tensor& t) {
    for (float& v : t.data()) v = 0.0f;
}

/// Every parameter receives a nonzero gradient from one backward pass.
void expect_full_gradient_flow(ModelParams& params, const std::function<Tensor()>& loss_fn) {
    params.zero_grad();
    Tape tape;
    Tensor loss;
    {
        TapeGuard g(tape);
        loss = loss_fn();
    }
    backward(tape, loss);
    for (auto& [name, t] : params) {
        ASSERT_TRUE(t.has_grad()) << name;
        double norm = 0.0;
        for (float g : t.grad()) norm += double(g) * g;
        EXPECT_GT(norm, 0.0) << name;
    }
}

}  // namespace

// ViT ------------------------------------------------------------------------

TEST(Vit, ShapesAndBlockTokens) {
    const VitConfig cfg = small_vit();
    VitModel m(cfg, Prng(1));
    const auto out = m.forward(images(3, 16, 2));
    EXPECT_EQ(out.logits.shape(), (Shape{3, 2}));
    ASSERT_EQ(out.block_tokens.size(), 3u);
    for (const auto& t : out.block_tokens) EXPECT_EQ(t.shape(), (Shape{3, 16, 16}));
}

TEST(Vit, ZeroHeadGivesExactlyZeroLogits) {
    VitModel m(small_vit(), Prng(1));
    zero(m.params().at("head.weight"));
    zero(m.params().at("head.bias"));
    const Tensor out = m.logits(images(4, 16, 3));
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Vit, BatchEquivariance) {
    VitModel m(small_vit(), Prng(4));
    const Tensor x = images(5, 16, 5);
    const Tensor all = m.logits(x);
    for (std::int64_t i = 0; i < 5; ++i) {
        const Tensor one = m.logits(ops::slice(x, 0, i, 1));
        for (std::int64_t k = 0; k < 2; ++k) EXPECT_NEAR(one[std::size_t(k)], all[std::size_t(i * 2 + k)], 1e-5);
    }
}

TEST(Vit, SameSeedSameWeights) {
    EXPECT_TRUE(bitwise_equal(VitModel(small_vit(), Prng(6)).params(), VitModel(small_vit(), Prng(6)).params()));
    EXPECT_FALSE(bitwise_equal(VitModel(small_vit(), Prng(6)).params(), VitModel(small_vit(), Prng(7)).params()));
}

TEST(Vit, ConfigErrors) {
    VitConfig c = small_vit();
    c.patch_size = 5;
    EXPECT_THROW(VitModel(c, Prng(1)), ParameterError);
    c = small_vit();
    c.num_heads = 3;
    EXPECT_THROW(VitModel(c, Prng(1)), ParameterError);
    VitModel m(small_vit(), Prng(1));
    EXPECT_THROW(m.logits(images(1, 12, 1)), DimensionError);
}

TEST(Vit, EveryParameterReceivesGradient) {
    VitModel m(small_vit(), Prng(8));
    const Tensor x = images(4, 16, 9);
    const std::vector<int> y{0, 1, 0, 1};
    expect_full_gradient_flow(m.params(), [&] { return ops::cross_entropy(m.logits(x), y); });
}

// MLP head -------------------------------------------------------------------

TEST(MlpHeadModel, ZeroWeightsGiveZeroLogits) {
    MlpHead h(MlpConfig{4, 3, 8, 2}, Prng(1));
    for (auto& [name, t] : h.params()) zero(t);
    Prng p(2);
    const Tensor out = h.forward(Tensor::randn({3, 4, 3}, p));
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(MlpHeadModel, SensitiveToEveryToken) {
    MlpHead h(MlpConfig{4, 3, 16, 2}, Prng(3));
    Prng p(4);
    const Tensor tokens = Tensor::randn({1, 4, 3}, p);
    const Tensor base = h.forward(tokens);
    for (std::size_t i = 0; i < tokens.numel(); ++i) {
        Tensor moved = tokens.clone();
        moved.data()[i] += 1.0f;
        EXPECT_GT(max_abs_diff(h.forward(moved), base), 0.0f) << "entry " << i;
    }
}

TEST(MlpHeadModel, ShapeErrorAndGradientFlow) {
    MlpHead h(MlpConfig{4, 3, 8, 2}, Prng(5));
    Prng p(6);
    EXPECT_THROW(h.forward(Tensor::randn({2, 5, 3}, p)), DimensionError);
    const Tensor tokens = Tensor::randn({4, 4, 3}, p);
    const std::vector<int> y{0, 1, 1, 0};
    expect_full_gradient_flow(h.params(), [&] { return ops::cross_entropy(h.forward(tokens), y); });
}

// Student CNN ------------------------------------------------------------------

TEST(Cnn, ShapesAndZeroHead) {
    StudentCnn c(CnnConfig{16, 1, {4, 8}, 2}, Prng(1));
    const Tensor x = images(3, 16, 2);
    EXPECT_EQ(c.forward(x).shape(), (Shape{3, 2}));
    zero(c.params().at("head.weight"));
    const Tensor out = c.forward(x);
    for (float v : out.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Cnn, ConfigErrors) {
    EXPECT_THROW(StudentCnn(CnnConfig{16, 1, {}, 2}, Prng(1)), ParameterError);
    EXPECT_THROW(StudentCnn(CnnConfig{16, 1, {4, 0}, 2}, Prng(1)), ParameterError);
}

TEST(Cnn, EveryParameterReceivesGradient) {
    StudentCnn c(CnnConfig{16, 1, {4, 8, 8}, 2}, Prng(3));
    const Tensor x = images(4, 16, 4);
    const std::vector<int> y{1, 0, 1, 0};
    expect_full_gradient_flow(c.params(), [&] { return ops::cross_entropy(c.forward(x), y); });
}

// U-Net ------------------------------------------------------------------------

TEST(UNetModel, ShapeAndTimestepRange) {
    UNet u(UNetConfig{16, 1, 4, 10}, Prng(1));
    const Tensor x = images(2, 16, 2);
    EXPECT_EQ(u.forward(x, 3).shape(), x.shape());
    EXPECT_NO_THROW(u.forward(x, 0));
    EXPECT_NO_THROW(u.forward(x, 10));
    EXPECT_THROW(u.forward(x, 11), ParameterError);
    EXPECT_THROW(u.forward(x, -1), ParameterError);
    const std::vector<int> wrong_count{1, 2, 3};
    EXPECT_THROW(u.forward(x, wrong_count), DimensionError);
    EXPECT_THROW(UNet(UNetConfig{18, 1, 4, 10}, Prng(1)), ParameterError);
}

TEST(UNetModel, ZeroOutputLayerIsIdentity) {
    UNet u(UNetConfig{16, 1, 4, 10}, Prng(3));
    zero(u.params().at("out.weight"));
    const Tensor x = images(2, 16, 4);
    EXPECT_TRUE(bitwise_equal(u.forward(x, 5), x));
}

TEST(UNetModel, TimestepConditioningMatters) {
    UNet u(UNetConfig{16, 1, 4, 10}, Prng(5));
    const Tensor x = images(1, 16, 6);
    EXPECT_GT(max_abs_diff(u.forward(x, 1), u.forward(x, 9)), 0.0f);
    const std::vector<int> mixed{1, 9};
    const Tensor pair = ops::concat(std::vector<Tensor>{x, x}, 0);
    const Tensor out = u.forward(pair, mixed);
    EXPECT_LT(max_abs_diff(ops::slice(out, 0, 1, 1), u.forward(x, 9)), 1e-5f);
}

TEST(UNetModel, EveryParameterReceivesGradient) {
    UNet u(UNetConfig{8, 1, 4, 4}, Prng(7));
    const Tensor x = images(2, 8, 8), target = images(2, 8, 9);
    const std::vector<int> ts{1, 3};
    expect_full_gradient_flow(u.params(), [&] { return ops::mse_loss(u.forward(x, ts), target); });
}

TEST(TimestepEmbedding, SinCosPairs) {
    const std::vector<int> ts{0, 7};
    const Tensor e = timestep_embedding(ts, 8);
    EXPECT_EQ(e.shape(), (Shape{2, 8}));
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(e[std::size_t(2 * i)], 0.0f);
        EXPECT_EQ(e[std::size_t(2 * i + 1)], 1.0f);
        const float s = e[std::size_t(8 + 2 * i)], c = e[std::size_t(8 + 2 * i + 1)];
        EXPECT_NEAR(s * s + c * c, 1.0f, 1e-6);
    }
}

// Training -------------------------------------------------------------------

namespace {

struct TinyTask {
    LabeledImages train, val;
};

TinyTask tiny_task(std::size_t n) {
    Dataset ds = generate_synthetic(n, 16, Prng(11));
    ds.splits = split_dataset(n, {0.5, 0.5, 0.0}, Prng(12));
    // The zero test ratio still leaves one test sample; both used splits are populated.
    return {ds.subset(Split::train), ds.subset(Split::val)};
}

}  // namespace

TEST(TrainClassifier, OneEpochLogsOneRow) {
    const TinyTask task = tiny_task(8);
    StudentCnn c(CnnConfig{16, 1, {4}, 2}, Prng(1));
    const TrainHyper hyper{1, 4, 0.05f, 0.9f, true, 0.0f, 0.0f};
    const TrainLog log = train_classifier(
        c.params(), [&](const Tensor& x) { return c.forward(x); }, task.train, task.val, hyper, Prng(2));
    ASSERT_EQ(log.epochs.size(), 1u);
    EXPECT_EQ(log.best_epoch, log.epochs[0].epoch);
    EXPECT_TRUE(std::isfinite(log.epochs[0].train_loss));
}

TEST(TrainClassifier, DeterministicGivenSeed) {
    const TinyTask task = tiny_task(24);
    const TrainHyper hyper{2, 4, 0.05f, 0.9f, true, 1.0f, 0.0f};
    auto run = [&](std::uint64_t seed) {
        StudentCnn c(CnnConfig{16, 1, {4, 4}, 2}, Prng(3));
        train_classifier(c.params(), [&](const Tensor& x) { return c.forward(x); }, task.train, task.val, hyper,
                         Prng(seed));
        return c.params().clone();
    };
    const ModelParams a = run(5), b = run(5);
    EXPECT_TRUE(bitwise_equal(a, b));
    EXPECT_FALSE(bitwise_equal(a, run(6)));
}

TEST(TrainClassifier, LearnsTheSyntheticTask) {
    const TinyTask task = tiny_task(200);
    StudentCnn c(CnnConfig{16, 1, {8, 8}, 2}, Prng(4));
    const LogitsFn model = [&](const Tensor& x) { return c.forward(x); };
    const TrainHyper hyper{6, 16, 0.05f, 0.9f, true, 1.0f, 0.0f};
    const TrainLog log = train_classifier(c.params(), model, task.train, task.val, hyper, Prng(5));
    EXPECT_LT(log.epochs.back().train_loss, log.epochs.front().train_loss);
    EXPECT_GT(accuracy_of(model, task.val), 0.9);
    EXPECT_DOUBLE_EQ(accuracy_of(model, task.val), log.best_metric);
}

TEST(TrainClassifier, EmptySplitRejected) {
    const TinyTask task = tiny_task(8);
    StudentCnn c(CnnConfig{16, 1, {4}, 2}, Prng(1));
    const LogitsFn model = [&](const Tensor& x) { return c.forward(x); };
    EXPECT_THROW(train_classifier(c.params(), model, LabeledImages{}, task.val, TrainHyper{}, Prng(1)),
                 ValidationError);
    EXPECT_THROW(accuracy_of(model, LabeledImages{}), ValidationError);
}

TEST(Fit, RestoresBestEpoch) {
    // Metric peaks at epoch 2 of 4; the returned parameters are the epoch-2 values.
    ModelParams p;
    p.add("w", Tensor::full({1}, 0.0f, true));
    std::vector<float> snapshots;
    int epoch = 0;
    const BatchLossFn loss = [&](std::span<const std::size_t>, Prng&) {
        return ops::scale(ops::sum(p.at("w")), -1.0f);
    };
    const ValidationFn val = [&] {
        ++epoch;
        snapshots.push_back(p.at("w")[0]);
        return std::pair<double, double>{0.0, epoch == 2 ? 1.0 : 0.0};
    };
    const TrainLog log = fit(p, 4, loss, val, TrainHyper{4, 4, 0.1f, 0.0f, false, 0.0f, 0.0f}, Prng(1));
    EXPECT_EQ(log.best_epoch, 2);
    EXPECT_EQ(p.at("w")[0], snapshots[1]);
    EXPECT_LT(p.at("w")[0], snapshots[3]);
}
