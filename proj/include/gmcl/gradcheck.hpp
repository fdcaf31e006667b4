#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gmcl/training.hpp"

namespace gmcl {

struct GradcheckEntry {
    std::string name;
    double max_rel = 0;
    double tol = 0;
    int checked = 0;
    bool pass = false;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    bool all_pass() const {
        for (const auto& e : entries)
            if (!e.pass) return false;
        return !entries.empty();
    }
    const GradcheckEntry* worst() const {
        const GradcheckEntry* w = nullptr;
        for (const auto& e : entries)
            if (!w || e.max_rel / e.tol > w->max_rel / w->tol) w = &e;
        return w;
    }
};

namespace gradcheck_detail {

inline double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-12});
    return std::fabs(a - b) / denom;
}

}  // namespace gradcheck_detail

// ---------------------------------------------------------------------------
// Small bilevel rig: linear teacher emitting 8x8 one-channel images, student
// with one 2-filter conv + linear head, M = 2 unrolled steps, double
// precision. Smooth activations keep finite differences well conditioned.
// The whole object is address-stable because the hooks point into it.
// ---------------------------------------------------------------------------

template <typename T>
struct TinyBilevelRigT {
    TrainingConfig cfg;
    LinearLayerT<T> teacher_lin;
    Conv2dLayerT<T> student_conv;
    LinearLayerT<T> student_fc;
    MetaScheduleT<T> schedule;
    std::vector<LatentBatchT<T>> bank;
    TensorT<T> real_images{Shape{}, {T(0)}};
    std::vector<int> real_labels;
    BilevelHooksT<T> hooks;

    TinyBilevelRigT() = default;
    TinyBilevelRigT(const TinyBilevelRigT&) = delete;
    TinyBilevelRigT& operator=(const TinyBilevelRigT&) = delete;

    void init(uint64_t seed) {
        cfg = TrainingConfig{};
        cfg.n_meta = 1;
        cfg.m_teach = 2;
        cfg.inner_batch = 4;
        cfg.outer_batch = 4;
        cfg.image_size = 8;
        cfg.channels = 1;
        cfg.num_classes = 2;
        cfg.latent_dim = 3;
        cfg.curriculum = true;
        cfg.adaptive_schedule = true;
        cfg.precision = Precision::F64;

        auto rng = make_rng(seed, Stream::GradCheck);
        const int64_t hw = cfg.image_size * cfg.image_size;
        teacher_lin.init("teacher.lin", hw, cfg.latent_dim + cfg.num_classes, T(0.1), rng);
        // break the zero-bias symmetry so bias coordinates carry signal
        teacher_lin.bias.node = make_leaf(randn<T>({hw}, rng, T(0.1)), true);
        student_conv.init("student.conv", 2, cfg.channels, 3, 1, 1, T(0.1), rng);
        student_fc.init("student.fc", cfg.num_classes, 2, T(0.1), rng);
        schedule.init(cfg.m_teach, T(cfg.init_lr), T(cfg.init_momentum));

        for (int64_t j = 0; j < cfg.m_teach; ++j)
            bank.push_back(
                sample_latent_batch<T>(cfg.inner_batch, cfg.latent_dim, cfg.num_classes, rng));
        real_images = randn<T>({cfg.outer_batch, 1, cfg.image_size, cfg.image_size}, rng);
        real_labels.resize(size_t(cfg.outer_batch));
        for (int64_t i = 0; i < cfg.outer_batch; ++i)
            real_labels[size_t(i)] = int(i % cfg.num_classes);

        hooks.teacher_forward = [this](const LatentBatchT<T>& lb, bool) {
            const int64_t b = lb.z.shape[0], d = cfg.latent_dim, k = cfg.num_classes;
            auto in = TensorT<T>::zeros({b, d + k});
            for (int64_t i = 0; i < b; ++i) {
                for (int64_t c = 0; c < d; ++c) in.data[i * (d + k) + c] = lb.z.data[i * d + c];
                in.data[i * (d + k) + d + lb.labels[size_t(i)]] = T(1);
            }
            auto flat = ops::tanh_op(teacher_lin.forward(make_constant(std::move(in))));
            return ops::reshape(flat, {b, 1, cfg.image_size, cfg.image_size});
        };
        hooks.student_forward = [this](const NodePtr<T>& x, bool) {
            auto h = ops::tanh_op(student_conv.forward(x));
            return student_fc.forward(ops::global_avg_pool(h));
        };
        hooks.teacher_params = {&teacher_lin.weight, &teacher_lin.bias};
        hooks.student_params = {&student_conv.kernel, &student_conv.bias, &student_fc.weight,
                                &student_fc.bias};
        hooks.schedule = &schedule;
    }

    /// Unrolled meta loss at the current teacher/schedule values; student
    /// parameters are restored afterwards so probes are independent.
    T loss_value() {
        auto snap = snapshot_params(hooks.student_params);
        for (int64_t j = 0; j < cfg.m_teach; ++j) teaching_step(hooks, cfg, bank[j], j);
        auto loss = meta_loss_node(hooks, real_images, real_labels);
        const T v = loss->value.data[0];
        restore_params(hooks.student_params, snap);
        return v;
    }

    /// Analytic meta-gradients in the order [teacher..., schedule raw_lr,
    /// schedule raw_momentum].
    std::vector<TensorT<T>> analytic_grads() {
        auto snap = snapshot_params(hooks.student_params);
        for (int64_t j = 0; j < cfg.m_teach; ++j) teaching_step(hooks, cfg, bank[j], j);
        auto loss = meta_loss_node(hooks, real_images, real_labels);
        std::vector<NodePtr<T>> wrt;
        std::vector<std::string> names;
        for (auto* p : hooks.teacher_params) {
            wrt.push_back(p->node);
            names.push_back(p->name);
        }
        for (auto* p : schedule.parameters()) {
            wrt.push_back(p->node);
            names.push_back(p->name);
        }
        auto grads = ops::backward(loss, wrt, /*build_graph=*/false, &names);
        restore_params(hooks.student_params, snap);
        std::vector<TensorT<T>> out;
        for (const auto& g : grads) out.push_back(g->value);
        return out;
    }

    std::vector<ParameterT<T>*> targets() {
        std::vector<ParameterT<T>*> out = hooks.teacher_params;
        for (auto* p : schedule.parameters()) out.push_back(p);
        return out;
    }
};

// ---------------------------------------------------------------------------
// Finite-difference drivers.
// ---------------------------------------------------------------------------

/// Central finite differences of the rig's unrolled meta loss against the
/// analytic meta-gradients. Up to `max_coords` coordinates per target are
/// probed (all of them when the target is at most that large), chosen by a
/// seeded draw. `sabotage_bias` perturbs the analytic value before the
/// comparison — the negative control proving the check can fail.
template <typename T>
GradcheckEntry fd_meta_check(TinyBilevelRigT<T>& rig, const std::string& name,
                             ParameterT<T>& target, int64_t max_coords, double h, double tol,
                             uint64_t seed, double sabotage_bias = 0) {
    GradcheckEntry entry{name, 0, tol, 0, false};

    auto targets = rig.targets();
    size_t which = targets.size();
    for (size_t i = 0; i < targets.size(); ++i)
        if (targets[i] == &target) which = i;
    if (which == targets.size()) throw ValueError("fd_meta_check: unknown target parameter");
    auto analytic = rig.analytic_grads()[which];

    const int64_t n = target.node->value.numel();
    std::vector<int64_t> coords;
    if (n <= max_coords) {
        for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
        auto rng = make_rng(seed, Stream::GradCheck);
        std::vector<int64_t> all(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) all[size_t(i)] = i;
        for (int64_t i = 0; i < max_coords; ++i) {
            const int64_t j = i + int64_t(rng() % uint64_t(n - i));
            std::swap(all[size_t(i)], all[size_t(j)]);
            coords.push_back(all[size_t(i)]);
        }
    }

    const TensorT<T> base = target.node->value;
    for (int64_t c : coords) {
        TensorT<T> plus = base, minus = base;
        plus.data[c] += T(h);
        minus.data[c] -= T(h);
        target.node = make_leaf(plus, true);
        const double lp = double(rig.loss_value());
        target.node = make_leaf(minus, true);
        const double lm = double(rig.loss_value());
        target.node = make_leaf(base, true);
        const double fd = (lp - lm) / (2 * h);
        double ad = double(analytic.data[c]);
        if (sabotage_bias != 0) ad += sabotage_bias * (1 + std::fabs(ad));
        entry.max_rel = std::max(entry.max_rel, gradcheck_detail::rel_err(ad, fd));
        ++entry.checked;
    }
    entry.pass = entry.max_rel <= tol;
    return entry;
}

/// Single-op finite-difference check: scalar loss = <f(inputs), r> with a
/// fixed random projection r, probed exhaustively over every input
/// coordinate.
inline GradcheckEntry fd_op_check(
    const std::string& name, const std::vector<TensorT<double>>& inputs,
    const std::function<NodePtr<double>(const std::vector<NodePtr<double>>&)>& f, double h,
    double tol, uint64_t seed, double sabotage_bias = 0) {
    GradcheckEntry entry{name, 0, tol, 0, false};

    auto build = [&](const std::vector<TensorT<double>>& vals) {
        std::vector<NodePtr<double>> xs;
        for (const auto& v : vals) xs.push_back(make_leaf(v, true));
        return std::pair(f(xs), xs);
    };

    auto [y0, xs0] = build(inputs);
    auto rng = make_rng(seed, Stream::GradCheck);
    const TensorT<double> proj = randn<double>(y0->value.shape, rng);
    auto proj_loss = [&](const NodePtr<double>& y) {
        return ops::sum_all(ops::mul(y, make_constant(proj)));
    };

    auto loss0 = proj_loss(y0);
    auto grads = ops::backward(loss0, xs0, /*build_graph=*/false);

    auto eval = [&](const std::vector<TensorT<double>>& vals) {
        auto [y, xs] = build(vals);
        (void)xs;
        return proj_loss(y)->value.data[0];
    };

    bool first = true;
    for (size_t i = 0; i < inputs.size(); ++i) {
        for (int64_t c = 0; c < inputs[i].numel(); ++c) {
            auto vals = inputs;
            vals[i].data[c] += h;
            const double lp = eval(vals);
            vals[i].data[c] -= 2 * h;
            const double lm = eval(vals);
            const double fd = (lp - lm) / (2 * h);
            double ad = grads[i]->value.data[c];
            if (sabotage_bias != 0 && first) {
                ad += sabotage_bias * (1 + std::fabs(ad));
                first = false;
            }
            entry.max_rel = std::max(entry.max_rel, gradcheck_detail::rel_err(ad, fd));
            ++entry.checked;
        }
    }
    entry.pass = entry.max_rel <= tol;
    return entry;
}

// ---------------------------------------------------------------------------
// The full report: representative per-op checks plus the bilevel meta checks.
// `sabotage_op` (empty for none) biases the analytic side of the named check
// so the harness demonstrably catches wrong gradients.
// ---------------------------------------------------------------------------

inline GradcheckReport run_gradcheck(uint64_t seed = 7, const std::string& sabotage_op = "") {
    GradcheckReport report;
    const double h = 1e-5, tol = 1e-6;
    auto rng = make_rng(seed, Stream::GradCheck);
    auto sab = [&](const std::string& n) { return n == sabotage_op ? 1e-2 : 0.0; };

    auto add_op = [&](const std::string& name, const std::vector<TensorT<double>>& inputs,
                      const std::function<NodePtr<double>(const std::vector<NodePtr<double>>&)>& f) {
        report.entries.push_back(fd_op_check(name, inputs, f, h, tol, seed + 1, sab(name)));
    };

    using Nodes = std::vector<NodePtr<double>>;
    add_op("linear", {randn<double>({3, 4}, rng), randn<double>({2, 4}, rng),
                      randn<double>({2}, rng)},
           [](const Nodes& x) { return ops::linear(x[0], x[1], x[2]); });
    add_op("matmul", {randn<double>({3, 4}, rng), randn<double>({4, 2}, rng)},
           [](const Nodes& x) { return ops::matmul(x[0], x[1]); });
    add_op("conv2d",
           {randn<double>({2, 2, 5, 5}, rng), randn<double>({3, 2, 3, 3}, rng),
            randn<double>({3}, rng)},
           [](const Nodes& x) { return ops::conv2d(x[0], x[1], x[2], 2, 1); });
    add_op("batchnorm_train",
           {randn<double>({3, 2, 4, 4}, rng), rand_uniform<double>({2}, rng, 0.5, 1.5),
            randn<double>({2}, rng)},
           [](const Nodes& x) { return ops::batchnorm_train(x[0], x[1], x[2], 1e-5); });
    add_op("softmax_cross_entropy", {randn<double>({4, 3}, rng)}, [](const Nodes& x) {
        return ops::softmax_cross_entropy(x[0], std::vector<int>{0, 2, 1, 2});
    });
    add_op("tanh", {randn<double>({2, 3}, rng)},
           [](const Nodes& x) { return ops::tanh_op(x[0]); });
    add_op("sigmoid", {randn<double>({2, 3}, rng)},
           [](const Nodes& x) { return ops::sigmoid(x[0]); });
    add_op("exp", {randn<double>({2, 3}, rng)},
           [](const Nodes& x) { return ops::exp_op(x[0]); });
    add_op("log", {rand_uniform<double>({2, 3}, rng, 0.5, 2.0)},
           [](const Nodes& x) { return ops::log_op(x[0]); });
    {
        // inputs bounded away from the kink so finite differences are valid
        auto t = rand_uniform<double>({2, 6}, rng, 0.25, 1.0);
        for (int64_t i = 0; i < t.numel(); i += 2) t.data[i] = -t.data[i];
        add_op("leaky_relu", {t},
               [](const Nodes& x) { return ops::leaky_relu(x[0], 0.1); });
    }
    add_op("upsample_nearest2x", {randn<double>({2, 2, 3, 3}, rng)},
           [](const Nodes& x) { return ops::upsample_nearest2x(x[0]); });
    add_op("global_avg_pool", {randn<double>({2, 3, 4, 4}, rng)},
           [](const Nodes& x) { return ops::global_avg_pool(x[0]); });
    add_op("schedule_entry", {randn<double>({4}, rng)},
           [](const Nodes& x) { return ops::exp_op(ops::pick(x[0], 2)); });

    TinyBilevelRigT<double> rig;
    rig.init(seed);
    report.entries.push_back(fd_meta_check(rig, "meta_grad_teacher_weight", rig.teacher_lin.weight,
                                           40, 1e-3, 1e-4, seed + 2,
                                           sab("meta_grad_teacher_weight")));
    report.entries.push_back(fd_meta_check(rig, "meta_grad_teacher_bias", rig.teacher_lin.bias, 10,
                                           1e-3, 1e-4, seed + 3, sab("meta_grad_teacher_bias")));
    report.entries.push_back(fd_meta_check(rig, "meta_grad_schedule_lr", rig.schedule.raw_lr, 64,
                                           1e-3, 1e-4, seed + 4, sab("meta_grad_schedule_lr")));
    report.entries.push_back(fd_meta_check(rig, "meta_grad_schedule_momentum",
                                           rig.schedule.raw_momentum, 64, 1e-3, 1e-4, seed + 5,
                                           sab("meta_grad_schedule_momentum")));
    return report;
}

}  // namespace gmcl
