#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "todynet/array.hpp"
#include "todynet/error.hpp"

namespace todynet {

inline std::uint64_t next_parameter_id() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
}

// A trainable array with its gradient accumulator and Adam moment buffers.
template <typename R>
struct Parameter {
    std::string name;
    DenseArray<R> value;
    DenseArray<R> grad;
    DenseArray<R> moment1;
    DenseArray<R> moment2;
    std::uint64_t id = 0;
    bool trainable = true;

    Parameter() = default;

    Parameter(std::string n, DenseArray<R> v, bool train = true)
        : name(std::move(n)),
          value(std::move(v)),
          grad(value.shape, R(0)),
          moment1(value.shape, R(0)),
          moment2(value.shape, R(0)),
          id(next_parameter_id()),
          trainable(train) {}

    void zero_grad() { grad.fill(R(0)); }
};

// Handle to a node on the tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Nodes are appended in execution order, which is already
// a topological order, so the backward sweep is a single reverse pass.
template <typename R>
class Tape {
public:
    // Adjoint callback: receives the tape and the output gradient of its node.
    using BackFn = std::function<void(Tape&, const DenseArray<R>&)>;

    Var leaf(DenseArray<R> value) { return push(std::move(value), nullptr, nullptr, false); }

    Var param(Parameter<R>& p) { return push(p.value, nullptr, &p, true); }

    // Records an op output. The adjoint is dropped when no input needs a
    // gradient, so constant subgraphs cost nothing in the sweep.
    Var record(DenseArray<R> value, std::initializer_list<Var> inputs, BackFn back) {
        bool needs = false;
        for (Var v : inputs) needs = needs || needs_grad(v);
        return push(std::move(value), needs ? std::move(back) : BackFn{}, nullptr, needs);
    }

    Var record(DenseArray<R> value, const std::vector<Var>& inputs, BackFn back) {
        bool needs = false;
        for (Var v : inputs) needs = needs || needs_grad(v);
        return push(std::move(value), needs ? std::move(back) : BackFn{}, nullptr, needs);
    }

    bool needs_grad(Var v) const { return nodes_[check(v)].requires_grad; }

    const DenseArray<R>& value(Var v) const { return nodes_[check(v)].value; }

    const DenseArray<R>& grad(Var v) const { return nodes_[check(v)].grad; }

    bool has_grad(Var v) const { return !nodes_[check(v)].grad.data.empty(); }

    // Accumulates g into the gradient buffer of node `id` (used by adjoints).
    void add_grad(int id, const DenseArray<R>& g) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.data.empty()) {
            n.grad = DenseArray<R>(n.value.shape, R(0));
        }
        for (std::size_t i = 0; i < g.data.size(); ++i) n.grad.data[i] += g.data[i];
    }

    DenseArray<R>& grad_buffer(int id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.grad.data.empty()) {
            n.grad = DenseArray<R>(n.value.shape, R(0));
        }
        return n.grad;
    }

    // Reverse sweep from a scalar root. Each node is visited exactly once;
    // Parameter.grad accumulates the leaf gradients; the tape is cleared
    // afterwards.
    void backward(Var root) {
        const std::size_t r = check(root);
        if (nodes_[r].value.numel() != 1) {
            throw_contract("backward: root must be scalar, got shape " +
                           shape_str(nodes_[r].value.shape));
        }
        sweep(r);
        clear();
    }

    // Like backward() but keeps node gradients readable; caller clears.
    void backward_keep(Var root) {
        const std::size_t r = check(root);
        if (nodes_[r].value.numel() != 1) {
            throw_contract("backward: root must be scalar, got shape " +
                           shape_str(nodes_[r].value.shape));
        }
        sweep(r);
    }

    void clear() { nodes_.clear(); }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        DenseArray<R> value;
        DenseArray<R> grad;
        BackFn back;
        Parameter<R>* param = nullptr;
        bool requires_grad = false;
    };

    void sweep(std::size_t root) {
        nodes_[root].grad = DenseArray<R>(nodes_[root].value.shape, R(1));
        for (std::size_t i = root + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (n.grad.data.empty()) continue;  // not reachable from the root
            if (n.back) n.back(*this, n.grad);
            if (n.param) {
                for (std::size_t j = 0; j < n.grad.data.size(); ++j) {
                    n.param->grad.data[j] += n.grad.data[j];
                }
            }
        }
    }

    Var push(DenseArray<R> value, BackFn back, Parameter<R>* p, bool needs) {
        nodes_.push_back(Node{std::move(value), {}, std::move(back), p, needs});
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    std::size_t check(Var v) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size()) {
            throw_contract("tape: invalid node handle");
        }
        return static_cast<std::size_t>(v.id);
    }

    std::vector<Node> nodes_;
};

}  // namespace todynet
