#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ddlab/prng.hpp"

namespace ddlab {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Storage shared between Tensor handles. Kept separate so the tape can hold
/// on to inputs without copying them.
struct TensorData {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;  // empty until a backward pass reaches this tensor
    bool requires_grad = false;
};

/// Reference-counted handle to a row-major float32 array.
///
/// Copying a Tensor copies the handle, not the values; use `clone()` for a
/// detached deep copy. An empty shape denotes a scalar holding one element.
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<float> values, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor scalar(float value);
    /// Normal(0, stddev^2) entries.
    static Tensor randn(Shape shape, Prng& prng, float stddev = 1.0f, bool requires_grad = false);
    /// Uniform[lo, hi) entries.
    static Tensor uniform(Shape shape, Prng& prng, float lo, float hi, bool requires_grad = false);

    const Shape& shape() const noexcept { return impl_->shape; }
    std::size_t rank() const noexcept { return impl_->shape.size(); }
    /// Dimension `axis`; negative values count from the back.
    std::int64_t dim(int axis) const;
    std::size_t numel() const noexcept { return impl_->data.size(); }

    std::span<float> data() noexcept { return impl_->data; }
    std::span<const float> data() const noexcept { return impl_->data; }
    float operator[](std::size_t i) const { return impl_->data[i]; }
    float item() const;

    bool requires_grad() const noexcept { return impl_->requires_grad; }
    void set_requires_grad(bool on) noexcept { impl_->requires_grad = on; }
    bool has_grad() const noexcept { return !impl_->grad.empty(); }
    std::span<const float> grad() const noexcept { return impl_->grad; }
    std::span<float> mutable_grad();
    void zero_grad() noexcept;

    Tensor clone() const;

    const std::shared_ptr<TensorData>& impl() const noexcept { return impl_; }
    bool same_storage(const Tensor& other) const noexcept { return impl_ == other.impl_; }

private:
    explicit Tensor(std::shared_ptr<TensorData> impl) : impl_(std::move(impl)) {}
    friend Tensor wrap_storage(std::shared_ptr<TensorData> impl);

    std::shared_ptr<TensorData> impl_;
};

Tensor wrap_storage(std::shared_ptr<TensorData> impl);

/// Bitwise equality of shape and values.
bool bitwise_equal(const Tensor& a, const Tensor& b);
float max_abs_diff(const Tensor& a, const Tensor& b);
bool all_finite(const Tensor& t);

}  // namespace ddlab
