#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ddlab/tensor.hpp"

namespace ddlab {

/// Named, ordered collection of trainable tensors.
class ModelParams {
public:
    /// Registers a tensor; names must be unique. Returns the stored handle.
    Tensor& add(std::string name, Tensor t);

    Tensor& at(std::string_view name);
    const Tensor& at(std::string_view name) const;
    bool contains(std::string_view name) const;

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    std::size_t total_elements() const;

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

    void zero_grad();
    void set_requires_grad(bool on);

    /// Deep copy with fresh storage.
    ModelParams clone() const;

    /// Replaces values in place from `other`, which must have identical names and shapes.
    void assign_from(const ModelParams& other);

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
};

bool bitwise_equal(const ModelParams& a, const ModelParams& b);

/// Stops gradient accumulation into a parameter set for the guard's lifetime.
class FreezeGuard {
public:
    explicit FreezeGuard(ModelParams& params);
    ~FreezeGuard();
    FreezeGuard(const FreezeGuard&) = delete;
    FreezeGuard& operator=(const FreezeGuard&) = delete;

private:
    ModelParams& params_;
    std::vector<bool> saved_;
};

/// SGD with heavy-ball momentum: v <- momentum * v + grad; p <- p - lr * v.
class Sgd {
public:
    /// weight_decay adds an L2 term: v <- momentum * v + grad + weight_decay * p.
    Sgd(float lr, float momentum, float weight_decay = 0.0f) : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}

    /// Throws ContractError when a parameter has no gradient. Gradients are left untouched.
    void step(ModelParams& params);

    void set_lr(float lr) noexcept { lr_ = lr; }
    float lr() const noexcept { return lr_; }

private:
    float lr_;
    float momentum_;
    float weight_decay_;
    std::vector<std::vector<float>> velocity_;
};

/// One-shot update without persistent velocity (momentum applies to a zero velocity).
void sgd_step(ModelParams& params, float lr, float momentum);

}  // namespace ddlab
