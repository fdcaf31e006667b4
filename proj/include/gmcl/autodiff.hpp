#pragma once

#include <atomic>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "gmcl/tensor.hpp"

namespace gmcl {

template <typename T>
struct NodeT;

template <typename T>
using NodePtr = std::shared_ptr<NodeT<T>>;

// Live/peak node counts, per scalar type. Used to verify that no graph leaks
// across meta iterations.
template <typename T>
inline std::atomic<int64_t> g_live_nodes{0};
template <typename T>
inline std::atomic<int64_t> g_peak_nodes{0};

template <typename T>
int64_t live_node_count() {
    return g_live_nodes<T>.load();
}
template <typename T>
int64_t peak_node_count() {
    return g_peak_nodes<T>.load();
}
template <typename T>
void reset_peak_node_count() {
    g_peak_nodes<T>.store(g_live_nodes<T>.load());
}

/// A tensor-valued vertex in the reverse-mode graph. Nodes form a DAG via
/// `parents`; `backward_rule` maps the incoming gradient to one gradient per
/// parent. Because the rule is itself built from graph operations, gradients
/// produced in graph-building mode can be differentiated again.
template <typename T>
struct NodeT {
    TensorT<T> value;
    bool requires_grad = false;
    std::vector<NodePtr<T>> parents;
    // Called with the upstream gradient and a per-parent mask of which
    // gradients are actually needed; entries for unneeded parents may be null.
    std::function<std::vector<NodePtr<T>>(const NodePtr<T>&, const std::vector<char>&)>
        backward_rule;

    explicit NodeT(TensorT<T> v) : value(std::move(v)) {
        int64_t live = ++g_live_nodes<T>;
        int64_t peak = g_peak_nodes<T>.load();
        while (live > peak && !g_peak_nodes<T>.compare_exchange_weak(peak, live)) {
        }
    }
    ~NodeT() { --g_live_nodes<T>; }

    NodeT(const NodeT&) = delete;
    NodeT& operator=(const NodeT&) = delete;
};

// Thread-local switch: when off, newly created nodes record no parents and no
// backward rule, so they are plain values.
inline thread_local bool g_grad_mode = true;

inline bool grad_mode_enabled() { return g_grad_mode; }

struct GradModeGuard {
    bool prev;
    explicit GradModeGuard(bool on) : prev(g_grad_mode) { g_grad_mode = on; }
    ~GradModeGuard() { g_grad_mode = prev; }
    GradModeGuard(const GradModeGuard&) = delete;
    GradModeGuard& operator=(const GradModeGuard&) = delete;
};

/// Leaf with no history. Gradients accumulate here when requires_grad is set.
template <typename T>
NodePtr<T> make_leaf(TensorT<T> v, bool requires_grad) {
    auto n = std::make_shared<NodeT<T>>(std::move(v));
    n->requires_grad = requires_grad;
    return n;
}

template <typename T>
NodePtr<T> make_constant(TensorT<T> v) {
    return make_leaf(std::move(v), false);
}

template <typename T>
NodePtr<T> scalar_constant(T v) {
    return make_constant(TensorT<T>::scalar(v));
}

/// Copy of the node's value with no graph attached.
template <typename T>
NodePtr<T> detached(const NodePtr<T>& n, bool requires_grad = false) {
    return make_leaf(TensorT<T>(n->value), requires_grad);
}

namespace detail {

template <typename T>
bool any_requires_grad(const std::vector<NodePtr<T>>& parents) {
    for (const auto& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

}  // namespace detail

/// Wrap an op result. In grad mode (and if any parent needs gradients) the
/// node records its parents and backward rule; otherwise it is a bare value.
template <typename T, typename Rule>
NodePtr<T> make_op_node(TensorT<T> value, std::vector<NodePtr<T>> parents, Rule&& rule) {
    auto n = std::make_shared<NodeT<T>>(std::move(value));
    if (g_grad_mode && detail::any_requires_grad(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_rule = std::forward<Rule>(rule);
    }
    return n;
}

}  // namespace gmcl
