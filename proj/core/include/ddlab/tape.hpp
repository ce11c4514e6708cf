#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "ddlab/tensor.hpp"

namespace ddlab {

/// Backward rule of a recorded op. `grad_out` is d loss / d output; `grad_in[i]`
/// points at the accumulation buffer for input i, or is null when that input
/// does not require a gradient. Rules must accumulate (`+=`), never assign.
using BackwardFn = std::function<void(std::span<const float> grad_out, std::span<float* const> grad_in)>;

/// Linear record of differentiable operations, replayed in reverse by backward().
///
/// Recording is opt-in: ops record onto the tape installed by a TapeGuard on the
/// current thread, and only when at least one input requires a gradient.
class Tape {
public:
    struct Node {
        std::string_view name;
        std::vector<std::shared_ptr<TensorData>> inputs;
        std::shared_ptr<TensorData> output;
        BackwardFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::string_view name, std::span<const Tensor> inputs, const Tensor& output, BackwardFn fn);

    std::size_t size() const noexcept { return nodes_.size(); }
    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    void clear() noexcept { nodes_.clear(); }

private:
    std::vector<Node> nodes_;
};

/// Installs a tape as the recording target for the current thread.
class TapeGuard {
public:
    explicit TapeGuard(Tape& tape) noexcept;
    ~TapeGuard();
    TapeGuard(const TapeGuard&) = delete;
    TapeGuard& operator=(const TapeGuard&) = delete;

private:
    Tape* previous_;
};

/// Suspends recording on the current thread (inference mode).
class NoGradGuard {
public:
    NoGradGuard() noexcept;
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    Tape* previous_;
};

Tape* active_tape() noexcept;

/// True when an op with these inputs must be recorded.
bool needs_recording(std::span<const Tensor> inputs) noexcept;

/// Propagates d loss / d x to every leaf tensor with requires_grad.
///
/// Leaf gradients accumulate into `Tensor::grad()`; callers zero them between
/// steps. Each pass accumulates into scratch buffers first, so running the same
/// tape twice doubles every leaf gradient exactly.
void backward(const Tape& tape, const Tensor& loss);

}  // namespace ddlab
