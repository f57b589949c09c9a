#pragma once

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "docmoe/tensor.hpp"

namespace docmoe::ag {

namespace detail {

template <typename T>
struct Node {
    Tensor<T> value;
    Tensor<T> grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads `grad` of this node and accumulates into the inputs' grads.
    std::function<void(Node&)> backward_fn;

    Tensor<T>& grad_buffer() {
        if (grad.size() != value.size()) grad = Tensor<T>(value.shape());
        return grad;
    }
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Handle to a node of the reverse-mode tape. Copies share the node.
template <typename T>
class Var {
public:
    using Node = detail::Node<T>;

    Var() = default;
    explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value; }
    Tensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::size_t dim(std::size_t i) const { return node_->value.dim(i); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    bool has_grad() const { return node_->grad.size() == node_->value.size() && !node_->value.empty(); }
    const Tensor<T>& grad() const { return node_->grad; }
    Tensor<T>& mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad = Tensor<T>(); }

    Var detach() const { return Var(node_->value, false); }

    /// Seeds d(this)/d(this) = 1 for a scalar and propagates through the tape.
    void backward() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

    /// Builds a result node. The closure is dropped when no input needs a gradient.
    static Var make(Tensor<T> value, std::vector<Var> inputs, std::function<void(Node&)> backward_fn) {
        Var out(std::move(value), false);
        if (!grad_enabled()) return out;
        bool any = false;
        for (const auto& in : inputs) any = any || in.requires_grad();
        if (!any) return out;
        out.node_->requires_grad = true;
        for (auto& in : inputs) out.node_->inputs.push_back(in.node_);
        out.node_->backward_fn = std::move(backward_fn);
        return out;
    }

private:
    std::shared_ptr<Node> node_;
};

template <typename T>
void Var<T>::backward() const {
    require(node_->value.size() == 1, "backward() requires a scalar output, got " + shape_str(shape()));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order of the subgraph.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child->requires_grad && !seen.count(child)) {
                seen.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward_fn) continue;  // leaf
        if (n->grad.size() == n->value.size()) n->backward_fn(*n);
        n->grad = Tensor<T>();  // interior grads are not needed once propagated
    }
}

}  // namespace docmoe::ag
