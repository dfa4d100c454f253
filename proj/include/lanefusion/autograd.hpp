#pragma once

#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "lanefusion/tensor.hpp"

namespace lanefusion {

// Minimal define-by-run autodiff. A Var owns its value, an optionally
// allocated gradient, and a closure that pushes its gradient into the
// parents. Graphs are acyclic by construction (children hold owning
// pointers to parents only) and are freed when the root Var dies.

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;  // accumulate node.grad into parents
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.numel() != value.numel()) grad = Tensor(value.shape());
    }
    void zero_grad() {
        if (grad.numel()) grad.fill(0.0f);
    }
};

inline bool& grad_enabled() {
    thread_local bool enabled = true;
    return enabled;
}

// RAII switch for inference paths: ops built under the guard carry no graph.
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
    ~NoGradGuard() { grad_enabled() = prev; }
};

inline Var make_leaf(Tensor value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

inline Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents) any = any || (p && p->requires_grad);
        if (any) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backprop = std::move(backprop);
        }
    }
    return n;
}

// Reverse-mode sweep from a scalar root.
inline void backward(const Var& root) {
    if (!root) throw std::invalid_argument("backward: null root");
    if (root->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!root->requires_grad) return;

    // iterative post-order DFS for a topological order
    std::vector<Node*> topo;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad.fill(1.0f);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (!n->backprop) continue;
        for (auto& p : n->parents)
            if (p && p->requires_grad) p->ensure_grad();
        n->backprop(*n);
    }
}

}  // namespace lanefusion
