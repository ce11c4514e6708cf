#include "ddlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "ddlab/errors.hpp"

namespace ddlab {

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(shape));
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor() : impl_(std::make_shared<TensorData>()) {
    impl_->data.assign(1, 0.0f);
}

Tensor::Tensor(Shape shape, std::vector<float> values, bool requires_grad)
    : impl_(std::make_shared<TensorData>()) {
    const auto n = shape_numel(shape);
    if (static_cast<std::int64_t>(values.size()) != n) {
        throw DimensionError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(n) +
                             " values, got " + std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<float>(static_cast<std::size_t>(n), value), requires_grad);
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

Tensor Tensor::randn(Shape shape, Prng& prng, float stddev, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = static_cast<float>(prng.normal()) * stddev;
    return t;
}

Tensor Tensor::uniform(Shape shape, Prng& prng, float lo, float hi, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = static_cast<float>(prng.uniform(lo, hi));
    return t;
}

std::int64_t Tensor::dim(int axis) const {
    const int r = static_cast<int>(rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
    }
    return impl_->shape[static_cast<std::size_t>(a)];
}

float Tensor::item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
}

std::span<float> Tensor::mutable_grad() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0f);
    return impl_->grad;
}

void Tensor::zero_grad() noexcept {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

Tensor Tensor::clone() const {
    auto copy = std::make_shared<TensorData>();
    copy->shape = impl_->shape;
    copy->data = impl_->data;
    return Tensor(std::move(copy));
}

Tensor wrap_storage(std::shared_ptr<TensorData> impl) { return Tensor(std::move(impl)); }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.numel() != b.numel()) {
        throw DimensionError("max_abs_diff between " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool all_finite(const Tensor& t) {
    return std::all_of(t.data().begin(), t.data().end(), [](float v) { return std::isfinite(v); });
}

}  // namespace ddlab
