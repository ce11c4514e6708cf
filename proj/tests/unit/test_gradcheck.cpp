#include <gtest/gtest.h>

#include <cmath>

#include "checks.hpp"
#include "ddlab/models.hpp"
#include "ddlab/ops.hpp"
#include "ddlab/tape.hpp"

using namespace ddlab;

TEST(GradientSuite, EveryOpMatchesFiniteDifferences) {
    const auto outcomes = checks::gradient_suite(2024, 1e-3, 1e-3, 5);
    ASSERT_GE(outcomes.size(), 25u);
    for (const auto& o : outcomes) {
        EXPECT_TRUE(o.passed) << o.name << ": worst relative error " << o.worst << " (" << o.detail << ")";
    }
}

TEST(GradientSuite, SecondSeed) {
    for (const auto& o : checks::gradient_suite(7, 1e-3, 1e-3, 5)) {
        EXPECT_TRUE(o.passed) << o.name << ": worst relative error " << o.worst;
    }
}

TEST(GradientSuite, DetectsABrokenGradient) {
    // The oracle itself must be able to fail: a forward that is not what the
    // tape differentiates (detached second factor) is caught.
    Prng p(1);
    checks::GradCase c{"detached",
                       {Tensor::uniform({3, 3}, p, -1.0f, 1.0f)},
                       {},
                       [](const std::vector<Tensor>& x) {
                           const Tensor frozen = x[0].clone();
                           return ops::mul(x[0], frozen);
                       }};
    Prng probes(2);
    EXPECT_GT(checks::gradient_error(c, probes), 0.1);
}

namespace {

/// Finite differences on a random sample of parameter entries of a model.
/// Returns the norm-wise relative error over the sampled entries.
double sampled_param_error(ModelParams& params, const std::function<Tensor()>& loss_fn, Prng& prng, int samples) {
    params.zero_grad();
    Tape tape;
    Tensor loss;
    {
        TapeGuard g(tape);
        loss = loss_fn();
    }
    backward(tape, loss);
    double diff = 0.0, na = 0.0, nn = 0.0;
    std::vector<std::pair<std::string, Tensor>> entries(params.begin(), params.end());
    NoGradGuard ng;
    for (int s = 0; s < samples; ++s) {
        auto& [name, t] = entries[prng.below(entries.size())];
        const std::size_t j = prng.below(t.numel());
        const float analytic = t.has_grad() ? t.grad()[j] : 0.0f;
        auto v = t.data();
        const float orig = v[j];
        const double h = 1e-3;
        v[j] = static_cast<float>(orig + h);
        const double up = loss_fn().item();
        v[j] = static_cast<float>(orig - h);
        const double down = loss_fn().item();
        v[j] = orig;
        const double numeric = (up - down) / (2 * h);
        diff += (analytic - numeric) * (analytic - numeric);
        na += double(analytic) * analytic;
        nn += numeric * numeric;
    }
    return std::sqrt(diff) / std::sqrt(std::max({na, nn, 1e-12}));
}

}  // namespace

// Model-level losses are sums of many float terms, so the finite-difference
// noise floor is higher than for single ops; 1e-2 still catches any wrong rule.
TEST(ModelGradients, VitParameters) {
    VitConfig cfg{8, 1, 4, 8, 2, 2, 2, 2};
    VitModel m(cfg, Prng(3));
    Prng p(4);
    const Tensor x = Tensor::uniform({3, 1, 8, 8}, p, 0.0f, 1.0f);
    const std::vector<int> y{0, 1, 1};
    auto loss = [&] { return ops::cross_entropy(m.logits(x), y); };
    EXPECT_LT(sampled_param_error(m.params(), loss, p, 60), 1e-2);
}

TEST(ModelGradients, MlpHeadParameters) {
    MlpHead h(MlpConfig{4, 3, 8, 2}, Prng(5));
    Prng p(6);
    const Tensor tokens = Tensor::randn({3, 4, 3}, p);
    const std::vector<int> y{1, 0, 1};
    auto loss = [&] { return ops::cross_entropy(h.forward(tokens), y); };
    EXPECT_LT(sampled_param_error(h.params(), loss, p, 60), 1e-2);
}

TEST(ModelGradients, StudentCnnParameters) {
    StudentCnn c(CnnConfig{8, 1, {2, 3, 4}, 2}, Prng(7));
    Prng p(8);
    const Tensor x = Tensor::uniform({2, 1, 8, 8}, p, 0.0f, 1.0f);
    const std::vector<int> y{0, 1};
    auto loss = [&] { return ops::cross_entropy(c.forward(x), y); };
    EXPECT_LT(sampled_param_error(c.params(), loss, p, 60), 1e-2);
}

TEST(ModelGradients, UNetParameters) {
    UNet u(UNetConfig{8, 1, 4, 4}, Prng(9));
    Prng p(10);
    const Tensor x = Tensor::uniform({2, 1, 8, 8}, p, 0.0f, 1.0f);
    const Tensor target = Tensor::uniform({2, 1, 8, 8}, p, 0.0f, 1.0f);
    const std::vector<int> ts{1, 3};
    auto loss = [&] { return ops::mse_loss(u.forward(x, ts), target); };
    EXPECT_LT(sampled_param_error(u.params(), loss, p, 60), 1e-2);
}
