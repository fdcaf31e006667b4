#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "gmcl/ops.hpp"

namespace gmcl {

/// A named trainable tensor plus its optimizer state. `node` is rebound on
/// every update: to a graph node during differentiable unrolling, or to a
/// fresh leaf for ordinary (detached) steps.
template <typename T>
struct ParameterT {
    std::string name;
    NodePtr<T> node;
    NodePtr<T> vel;  // SGD momentum buffer; graph node during unrolling

    // Adam moments (the optimizer that consumes them is never differentiated
    // through, so plain tensors suffice).
    TensorT<T> adam_m{Shape{}, {T(0)}};
    TensorT<T> adam_v{Shape{}, {T(0)}};
    int64_t adam_t = 0;
    bool has_adam = false;

    const TensorT<T>& value() const { return node->value; }
};

template <typename T>
ParameterT<T> make_parameter(std::string name, TensorT<T> value) {
    ParameterT<T> p;
    p.name = std::move(name);
    p.vel = make_constant(TensorT<T>::zeros(value.shape));
    p.node = make_leaf(std::move(value), true);
    return p;
}

template <typename T>
std::vector<NodePtr<T>> param_nodes(const std::vector<ParameterT<T>*>& params) {
    std::vector<NodePtr<T>> out;
    out.reserve(params.size());
    for (auto* p : params) out.push_back(p->node);
    return out;
}

template <typename T>
std::vector<std::string> param_names(const std::vector<ParameterT<T>*>& params) {
    std::vector<std::string> out;
    out.reserve(params.size());
    for (auto* p : params) out.push_back(p->name);
    return out;
}

/// He-normal fan-in initialization for leaky-relu networks:
/// std = sqrt(2 / ((1 + slope^2) * fan_in)), fan_in = product of all dims
/// after the first (input features, or cin*k*k for conv kernels).
template <typename T>
TensorT<T> kaiming_normal_init(const Shape& shape, T slope, Rng& rng) {
    if (shape.size() < 2) throw DimensionError("kaiming_normal_init: need rank >= 2");
    int64_t fan_in = 1;
    for (size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
    const T stddev = std::sqrt(T(2) / ((T(1) + slope * slope) * T(fan_in)));
    return randn<T>(shape, rng, stddev);
}

namespace detail {
template <typename T>
void check_grad_shape(const ParameterT<T>& p, const Shape& gs, const char* op) {
    if (p.node->value.shape != gs)
        throw DimensionError(std::string(op) + ": parameter " + p.name + " has shape " +
                             shape_str(p.node->value.shape) + " but gradient has shape " +
                             shape_str(gs));
}
}  // namespace detail

/// Heavy-ball SGD: v' = momentum * v + g, theta' = theta - lr * v'.
/// Graph form: lr and momentum are scalar nodes, the updated parameter and
/// velocity stay differentiable (this is what makes the unrolled inner loop
/// differentiable in the learning-rate schedule and the batch source).
template <typename T>
void sgd_momentum_step_graph(ParameterT<T>& p, const NodePtr<T>& grad, const NodePtr<T>& lr,
                             const NodePtr<T>& momentum) {
    detail::check_grad_shape(p, grad->value.shape, "sgd_momentum_step");
    if (!lr->value.is_scalar() || !momentum->value.is_scalar())
        throw DimensionError("sgd_momentum_step: lr and momentum must be scalar");
    auto vnew = ops::add(ops::mul(momentum, p.vel), grad);
    p.node = ops::sub(p.node, ops::mul(lr, vnew));
    p.vel = vnew;
}

/// Same update rule with plain values; the result is a fresh leaf carrying no
/// history. Used for ordinary training and for the persistent-model update
/// after each unrolled window.
template <typename T>
void sgd_momentum_step(ParameterT<T>& p, const TensorT<T>& grad, T lr, T momentum) {
    detail::check_grad_shape(p, grad.shape, "sgd_momentum_step");
    TensorT<T> v = p.vel->value;
    TensorT<T> theta = p.node->value;
    for (int64_t i = 0; i < v.numel(); ++i) {
        v.data[i] = momentum * v.data[i] + grad.data[i];
        theta.data[i] -= lr * v.data[i];
    }
    p.vel = make_constant(std::move(v));
    p.node = make_leaf(std::move(theta), true);
}

/// Adam with bias correction; epsilon is added after the square root.
template <typename T>
void adam_step(ParameterT<T>& p, const TensorT<T>& grad, T lr, T beta1, T beta2, T eps) {
    detail::check_grad_shape(p, grad.shape, "adam_step");
    if (!p.has_adam) {
        p.adam_m = TensorT<T>::zeros(grad.shape);
        p.adam_v = TensorT<T>::zeros(grad.shape);
        p.adam_t = 0;
        p.has_adam = true;
    }
    ++p.adam_t;
    const T c1 = T(1) - std::pow(beta1, T(p.adam_t));
    const T c2 = T(1) - std::pow(beta2, T(p.adam_t));
    TensorT<T> theta = p.node->value;
    for (int64_t i = 0; i < theta.numel(); ++i) {
        const T g = grad.data[i];
        p.adam_m.data[i] = beta1 * p.adam_m.data[i] + (T(1) - beta1) * g;
        p.adam_v.data[i] = beta2 * p.adam_v.data[i] + (T(1) - beta2) * g * g;
        const T mhat = p.adam_m.data[i] / c1;
        const T vhat = p.adam_v.data[i] / c2;
        theta.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
    p.node = make_leaf(std::move(theta), true);
}

}  // namespace gmcl
