#include "ddlab/tape.hpp"

#include <unordered_map>
#include <unordered_set>

#include "ddlab/errors.hpp"

namespace ddlab {

namespace {
thread_local Tape* g_active_tape = nullptr;
}

void Tape::record(std::string_view name, std::span<const Tensor> inputs, const Tensor& output, BackwardFn fn) {
    Node node;
    node.name = name;
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) node.inputs.push_back(in.impl());
    node.output = output.impl();
    node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
}

TapeGuard::TapeGuard(Tape& tape) noexcept : previous_(g_active_tape) { g_active_tape = &tape; }
TapeGuard::~TapeGuard() { g_active_tape = previous_; }

NoGradGuard::NoGradGuard() noexcept : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

bool needs_recording(std::span<const Tensor> inputs) noexcept {
    if (!g_active_tape) return false;
    for (const auto& t : inputs) {
        if (t.requires_grad()) return true;
    }
    return false;
}

void backward(const Tape& tape, const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
    }
    const auto& nodes = tape.nodes();
    std::unordered_set<const TensorData*> produced;
    produced.reserve(nodes.size());
    for (const auto& n : nodes) produced.insert(n.output.get());
    if (!produced.contains(loss.impl().get())) {
        throw ContractError("loss was not produced by any operation recorded on this tape");
    }

    std::unordered_map<const TensorData*, std::vector<float>> scratch;
    std::unordered_map<const TensorData*, TensorData*> leaves;
    scratch[loss.impl().get()] = {1.0f};

    std::vector<float*> grad_in;
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        auto out_it = scratch.find(it->output.get());
        if (out_it == scratch.end()) continue;
        std::vector<float> grad_out = std::move(out_it->second);
        scratch.erase(out_it);

        grad_in.assign(it->inputs.size(), nullptr);
        for (std::size_t i = 0; i < it->inputs.size(); ++i) {
            TensorData* in = it->inputs[i].get();
            if (!in->requires_grad) continue;
            auto& buf = scratch[in];
            if (buf.empty()) buf.assign(in->data.size(), 0.0f);
            grad_in[i] = buf.data();
            if (!produced.contains(in)) leaves[in] = in;
        }
        it->backward(grad_out, grad_in);
    }

    for (auto& [key, leaf] : leaves) {
        const auto& g = scratch.at(key);
        if (leaf->grad.empty()) leaf->grad.assign(g.size(), 0.0f);
        for (std::size_t i = 0; i < g.size(); ++i) leaf->grad[i] += g[i];
    }
}

}  // namespace ddlab
