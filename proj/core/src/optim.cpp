#include "ddlab/optim.hpp"

#include <algorithm>

#include "ddlab/errors.hpp"

namespace ddlab {

Tensor& ModelParams::add(std::string name, Tensor t) {
    if (contains(name)) throw ValidationError("duplicate parameter name '" + name + "'");
    entries_.emplace_back(std::move(name), std::move(t));
    return entries_.back().second;
}

Tensor& ModelParams::at(std::string_view name) {
    for (auto& [n, t] : entries_)
        if (n == name) return t;
    throw IndexError("no parameter named '" + std::string(name) + "'");
}

const Tensor& ModelParams::at(std::string_view name) const {
    for (const auto& [n, t] : entries_)
        if (n == name) return t;
    throw IndexError("no parameter named '" + std::string(name) + "'");
}

bool ModelParams::contains(std::string_view name) const {
    return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

std::size_t ModelParams::total_elements() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.numel();
    return n;
}

void ModelParams::zero_grad() {
    for (auto& e : entries_) e.second.zero_grad();
}

void ModelParams::set_requires_grad(bool on) {
    for (auto& e : entries_) e.second.set_requires_grad(on);
}

ModelParams ModelParams::clone() const {
    ModelParams out;
    for (const auto& [n, t] : entries_) {
        Tensor c = t.clone();
        c.set_requires_grad(t.requires_grad());
        out.entries_.emplace_back(n, std::move(c));
    }
    return out;
}

void ModelParams::assign_from(const ModelParams& other) {
    if (other.size() != size()) {
        throw CheckpointMismatchError("parameter count " + std::to_string(other.size()) + " does not match expected " +
                                      std::to_string(size()));
    }
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& [name, src] = other.entries_[i];
        auto& [dst_name, dst] = entries_[i];
        if (name != dst_name) {
            throw CheckpointMismatchError("parameter #" + std::to_string(i) + " is '" + name + "', expected '" +
                                          dst_name + "'");
        }
        if (src.shape() != dst.shape()) {
            throw CheckpointMismatchError("parameter '" + name + "' has shape " + shape_str(src.shape()) +
                                          ", expected " + shape_str(dst.shape()));
        }
        std::copy(src.data().begin(), src.data().end(), dst.data().begin());
    }
}

bool bitwise_equal(const ModelParams& a, const ModelParams& b) {
    if (a.size() != b.size()) return false;
    auto ia = a.begin();
    for (auto ib = b.begin(); ib != b.end(); ++ia, ++ib) {
        if (ia->first != ib->first || !bitwise_equal(ia->second, ib->second)) return false;
    }
    return true;
}

FreezeGuard::FreezeGuard(ModelParams& params) : params_(params) {
    for (auto& e : params_) {
        saved_.push_back(e.second.requires_grad());
        e.second.set_requires_grad(false);
    }
}

FreezeGuard::~FreezeGuard() {
    std::size_t i = 0;
    for (auto& e : params_) e.second.set_requires_grad(saved_[i++]);
}

void Sgd::step(ModelParams& params) {
    if (velocity_.size() != params.size()) {
        velocity_.clear();
        for (const auto& e : params) velocity_.emplace_back(e.second.numel(), 0.0f);
    }
    for (const auto& e : params) {
        if (!e.second.has_grad()) throw ContractError("parameter '" + e.first + "' has no gradient");
    }
    std::size_t i = 0;
    for (auto& e : params) {
        auto& v = velocity_[i++];
        auto p = e.second.data();
        auto g = e.second.grad();
        for (std::size_t j = 0; j < p.size(); ++j) {
            v[j] = momentum_ * v[j] + g[j] + weight_decay_ * p[j];
            p[j] -= lr_ * v[j];
        }
    }
}

void sgd_step(ModelParams& params, float lr, float momentum) {
    Sgd(lr, momentum).step(params);
}

}  // namespace ddlab
