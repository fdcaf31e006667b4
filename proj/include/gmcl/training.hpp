#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gmcl/checkpoint.hpp"
#include "gmcl/config.hpp"
#include "gmcl/data.hpp"
#include "gmcl/metrics.hpp"
#include "gmcl/models.hpp"

namespace gmcl {

// ---------------------------------------------------------------------------
// Generic bilevel core. The step functions only see forward closures and
// parameter pointers, so the same code path drives the full generator/CNN
// pair, the finite-difference rigs, and any tiny test model.
// ---------------------------------------------------------------------------

template <typename T>
struct BilevelHooksT {
    std::function<NodePtr<T>(const LatentBatchT<T>&, bool training)> teacher_forward;
    std::function<NodePtr<T>(const NodePtr<T>& images, bool training)> student_forward;
    std::vector<ParameterT<T>*> teacher_params;
    std::vector<ParameterT<T>*> student_params;
    MetaScheduleT<T>* schedule = nullptr;  // null: fixed (init_lr, init_momentum) every step
};

/// One differentiable inner update: generate a curriculum batch, evaluate the
/// student on it, and apply an SGD-momentum step whose result stays a graph
/// node (a function of the teacher and, when adaptive, the schedule).
/// Returns the teach loss value.
template <typename T>
T teaching_step(BilevelHooksT<T>& hooks, const TrainingConfig& cfg, const LatentBatchT<T>& lb,
                int64_t j) {
    NodePtr<T> lr, momentum;
    if (hooks.schedule) {
        std::tie(lr, momentum) = hooks.schedule->values(j);
    } else {
        lr = scalar_constant(T(cfg.init_lr));
        momentum = scalar_constant(T(cfg.init_momentum));
    }
    auto images = hooks.teacher_forward(lb, true);
    auto logits = hooks.student_forward(images, true);
    auto loss = ops::softmax_cross_entropy(logits, lb.labels);
    const T lv = loss->value.data[0];
    if (!std::isfinite(double(lv)))
        throw DivergenceError("teaching step " + std::to_string(j) + ": loss is not finite");
    auto names = param_names(hooks.student_params);
    auto grads = ops::backward(loss, param_nodes(hooks.student_params), /*build_graph=*/true,
                               &names);
    for (size_t i = 0; i < hooks.student_params.size(); ++i)
        sgd_momentum_step_graph(*hooks.student_params[i], grads[i], lr, momentum);
    return lv;
}

/// Real-batch loss through the student's current (possibly unrolled)
/// parameters. Shared by the outer update and the gradient checkers.
template <typename T>
NodePtr<T> meta_loss_node(BilevelHooksT<T>& hooks, const TensorT<T>& images,
                          const std::vector<int>& labels) {
    auto logits = hooks.student_forward(make_constant(images), true);
    return ops::softmax_cross_entropy(logits, labels);
}

/// Outer update. One backward pass from the real-batch loss yields the
/// student's direct gradient plus — through the unrolled teaching steps — the
/// teacher and schedule gradients. Updates are applied in fixed order:
/// student (SGD step with the last schedule entry, detached), then teacher
/// (Adam), then schedule (Adam). `curriculum_ran` = false restricts
/// everything to the student, for runs whose inner loop is disabled.
/// All parameters end up as fresh leaves, so the unrolled graph is dropped.
template <typename T>
T meta_step(BilevelHooksT<T>& hooks, const TrainingConfig& cfg, const TensorT<T>& images,
            const std::vector<int>& labels, bool curriculum_ran) {
    auto loss = meta_loss_node(hooks, images, labels);
    const T lv = loss->value.data[0];
    if (!std::isfinite(double(lv))) throw DivergenceError("meta loss is not finite");

    const bool train_teacher = curriculum_ran && !hooks.teacher_params.empty();
    const bool train_schedule = curriculum_ran && hooks.schedule != nullptr;

    auto wrt = param_nodes(hooks.student_params);
    auto names = param_names(hooks.student_params);
    const size_t ns = wrt.size();
    size_t teacher_at = 0, schedule_at = 0;
    if (train_teacher) {
        teacher_at = wrt.size();
        for (auto* p : hooks.teacher_params) {
            wrt.push_back(p->node);
            names.push_back(p->name);
        }
    }
    if (train_schedule) {
        schedule_at = wrt.size();
        for (auto* p : hooks.schedule->parameters()) {
            wrt.push_back(p->node);
            names.push_back(p->name);
        }
    }
    auto grads = ops::backward(loss, wrt, /*build_graph=*/false, &names);

    T lr = T(cfg.init_lr), momentum = T(cfg.init_momentum);
    if (hooks.schedule)
        std::tie(lr, momentum) = hooks.schedule->values_detached(cfg.m_teach - 1);
    for (size_t i = 0; i < ns; ++i)
        sgd_momentum_step(*hooks.student_params[i], grads[i]->value, lr, momentum);
    if (train_teacher)
        for (size_t i = 0; i < hooks.teacher_params.size(); ++i)
            adam_step(*hooks.teacher_params[i], grads[teacher_at + i]->value, T(cfg.lr_teacher),
                      T(cfg.adam_beta1), T(cfg.adam_beta2), T(cfg.adam_eps));
    if (train_schedule) {
        auto sched = hooks.schedule->parameters();
        for (size_t i = 0; i < sched.size(); ++i)
            adam_step(*sched[i], grads[schedule_at + i]->value, T(cfg.lr_meta), T(cfg.adam_beta1),
                      T(cfg.adam_beta2), T(cfg.adam_eps));
    }
    return lv;
}

// Value snapshots for probe-and-restore workflows (finite differences).
template <typename T>
struct ParamSnapshotT {
    std::vector<TensorT<T>> values, vels;
};

template <typename T>
ParamSnapshotT<T> snapshot_params(const std::vector<ParameterT<T>*>& params) {
    ParamSnapshotT<T> s;
    for (auto* p : params) {
        s.values.push_back(p->node->value);
        s.vels.push_back(p->vel->value);
    }
    return s;
}

template <typename T>
void restore_params(const std::vector<ParameterT<T>*>& params, const ParamSnapshotT<T>& s) {
    if (params.size() != s.values.size())
        throw ValueError("restore_params: snapshot size mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        params[i]->node = make_leaf(s.values[i], true);
        params[i]->vel = make_constant(s.vels[i]);
    }
}

// ---------------------------------------------------------------------------
// Full run state and the two trainers.
// ---------------------------------------------------------------------------

template <typename T>
struct RunStateT {
    TrainingConfig cfg;
    bool has_teacher = true;  // false for the plain-learner baselines
    TeacherGeneratorT<T> teacher;
    StudentLearnerT<T> student;
    MetaScheduleT<T> schedule;
    std::vector<LatentBatchT<T>> latent_bank;
    CountedRng latent_rng, data_rng, augment_rng;
    int64_t meta_iter = 0;  // completed outer iterations
    std::vector<T> teach_losses, meta_losses;
};

template <typename T>
RunStateT<T> init_run_state(const TrainingConfig& cfg) {
    cfg.validate();
    RunStateT<T> st;
    st.cfg = cfg;
    st.has_teacher = true;
    auto trng = make_rng(uint64_t(cfg.seed), Stream::TeacherInit);
    st.teacher.init(cfg.latent_dim, cfg.num_classes, cfg.image_size, cfg.channels, trng);
    auto srng = make_rng(uint64_t(cfg.seed), Stream::StudentInit);
    st.student.init(cfg.channels, cfg.num_classes, srng);
    // with the schedule frozen, momentum 0 is allowed; the dormant schedule
    // still needs a representable starting point
    const T sm = cfg.init_momentum > 0 ? T(cfg.init_momentum) : T(0.5);
    st.schedule.init(cfg.m_teach, T(cfg.init_lr), sm);
    st.latent_rng = make_counted_rng(uint64_t(cfg.seed), Stream::Latent);
    st.data_rng = make_counted_rng(uint64_t(cfg.seed), Stream::DataOrder);
    st.augment_rng = make_counted_rng(uint64_t(cfg.seed), Stream::Augment);
    if (cfg.curriculum && cfg.latent_strategy == LatentStrategy::FixedAcrossTraining)
        for (int64_t j = 0; j < cfg.m_teach; ++j)
            st.latent_bank.push_back(sample_latent_batch<T>(cfg.inner_batch, cfg.latent_dim,
                                                            cfg.num_classes, st.latent_rng));
    return st;
}

/// Student-only state for the baselines; draws from the same streams as the
/// full setup so that trajectories are comparable batch-for-batch.
template <typename T>
RunStateT<T> init_plain_state(const TrainingConfig& cfg) {
    cfg.validate();
    RunStateT<T> st;
    st.cfg = cfg;
    st.cfg.curriculum = false;
    st.has_teacher = false;
    auto srng = make_rng(uint64_t(cfg.seed), Stream::StudentInit);
    st.student.init(cfg.channels, cfg.num_classes, srng);
    st.data_rng = make_counted_rng(uint64_t(cfg.seed), Stream::DataOrder);
    st.augment_rng = make_counted_rng(uint64_t(cfg.seed), Stream::Augment);
    return st;
}

template <typename T>
BilevelHooksT<T> make_hooks(RunStateT<T>& st) {
    BilevelHooksT<T> hooks;
    hooks.student_forward = [&st](const NodePtr<T>& x, bool training) {
        return st.student.forward(x, training);
    };
    hooks.student_params = st.student.parameters();
    if (st.has_teacher) {
        hooks.teacher_forward = [&st](const LatentBatchT<T>& lb, bool training) {
            return st.teacher.forward(lb, training);
        };
        hooks.teacher_params = st.teacher.parameters();
        if (st.cfg.adaptive_schedule) hooks.schedule = &st.schedule;
    }
    return hooks;
}

/// One pass of training batches in training mode, averaging per-batch
/// normalization statistics into the running buffers. An alternative to
/// "running stats = last training batch" that momentum 0 gives by default.
template <typename T>
void recompute_norm_stats(StudentLearnerT<T>& student, const LabeledImageSetT<T>& train_set,
                          int64_t batch) {
    GradModeGuard guard(false);
    const int64_t n = train_set.size();
    if (n == 0) throw ValueError("recompute_norm_stats: empty split");
    auto layers = student.norm_layers();
    for (auto* bn : layers) bn->begin_stat_accumulation();
    const int64_t c = train_set.images.shape[1], h = train_set.images.shape[2],
                  w = train_set.images.shape[3];
    const int64_t per = c * h * w;
    for (int64_t start = 0; start < n; start += batch) {
        const int64_t b = std::min(batch, n - start);
        if (b < 2) break;  // batch statistics need at least two samples
        auto chunk = TensorT<T>::zeros({b, c, h, w});
        std::copy_n(train_set.images.data.begin() + start * per, b * per, chunk.data.begin());
        student.forward(make_constant(std::move(chunk)), true);
    }
    for (auto* bn : layers) bn->finish_stat_accumulation();
}

/// Evaluation-mode metrics over a full split in fixed order. Probabilities
/// are computed with a numerically stable softmax in double precision.
template <typename T>
MetricsReport evaluate(StudentLearnerT<T>& student, const LabeledImageSetT<T>& set,
                       int64_t batch = 256) {
    const int64_t n = set.size();
    if (n == 0) throw ValueError("evaluate: empty split");
    if (batch < 1) throw ValueError("evaluate: batch must be positive");
    if (set.images.rank() != 4) throw DimensionError("evaluate: images must be [n,c,h,w]");
    GradModeGuard guard(false);
    const int k = int(student.num_classes);
    const int64_t c = set.images.shape[1], h = set.images.shape[2], w = set.images.shape[3];
    const int64_t per = c * h * w;
    std::vector<double> scores(size_t(n) * size_t(k));
    std::vector<int> pred(static_cast<size_t>(n));
    for (int64_t start = 0; start < n; start += batch) {
        const int64_t b = std::min(batch, n - start);
        auto chunk = TensorT<T>::zeros({b, c, h, w});
        std::copy_n(set.images.data.begin() + start * per, b * per, chunk.data.begin());
        auto logits = student.forward(make_constant(std::move(chunk)), false);
        for (int64_t i = 0; i < b; ++i) {
            const T* row = logits->value.data.data() + i * k;
            int arg = 0;
            double mx = double(row[0]);
            for (int j = 1; j < k; ++j)
                if (double(row[j]) > mx) {
                    mx = double(row[j]);
                    arg = j;
                }
            double denom = 0;
            for (int j = 0; j < k; ++j) denom += std::exp(double(row[j]) - mx);
            for (int j = 0; j < k; ++j)
                scores[size_t(start + i) * size_t(k) + size_t(j)] =
                    std::exp(double(row[j]) - mx) / denom;
            pred[size_t(start + i)] = arg;
        }
    }
    MetricsReport rep;
    rep.confusion = confusion_matrix(pred, set.labels, k);
    rep.accuracy = accuracy(rep.confusion);
    rep.auc = macro_auc_ovr(scores, n, k, set.labels);
    std::tie(rep.sensitivity, rep.specificity) = sensitivity_specificity(rep.confusion);
    return rep;
}

namespace detail {

inline std::string format_loss(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

/// Append-mode CSV; the header is written only when the file starts empty,
/// so resumed runs keep one header.
struct MetricsCsv {
    std::ofstream out;

    void open(const std::string& path) {
        const bool fresh = !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
        out.open(path, std::ios::app);
        if (!out) throw DataError("cannot open metrics log '" + path + "'");
        if (fresh) out << "meta_iter,teach_loss_mean,meta_loss,eval_acc,eval_auc,eval_sens,eval_spec\n";
    }
    void row(int64_t meta_iter, double teach_mean, double meta_loss, const MetricsReport* rep) {
        if (!out.is_open()) return;
        out << meta_iter << ',';
        if (std::isfinite(teach_mean)) out << format_loss(teach_mean);
        out << ',' << format_loss(meta_loss) << ',';
        if (rep)
            out << format_loss(rep->accuracy) << ',' << format_loss(rep->auc) << ','
                << format_loss(rep->sensitivity) << ',' << format_loss(rep->specificity);
        else
            out << ",,,";
        out << '\n';
        out.flush();
    }
};

template <typename T>
TensorT<T> apply_real_augment(const TensorT<T>& images, AugmentKind kind, CountedRng& rng) {
    switch (kind) {
        case AugmentKind::None: return images;
        case AugmentKind::CropFlip: return augment_crop_flip(images, 4, rng);
        case AugmentKind::Traditional: return augment_traditional(images, rng);
    }
    throw ConfigError("unknown augmentation kind");
}

template <typename T>
void check_dataset(const TrainingConfig& cfg, const LabeledImageSetT<T>& set,
                   const char* which) {
    const auto& s = set.images.shape;
    if (set.size() == 0) return;
    if (s.size() != 4 || s[1] != cfg.channels || s[2] != cfg.image_size || s[3] != cfg.image_size)
        throw ConfigError(std::string(which) + " split images have shape " + shape_str(s) +
                          " but config expects [n," + std::to_string(cfg.channels) + "," +
                          std::to_string(cfg.image_size) + "," + std::to_string(cfg.image_size) +
                          "]");
    for (int v : set.labels)
        if (v < 0 || v >= cfg.num_classes)
            throw ConfigError(std::string(which) + " split has label " + std::to_string(v) +
                              " outside [0," + std::to_string(cfg.num_classes) + ")");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoint adapters.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void save_param_group(CheckpointData& ck, const std::string& prefix,
                      const std::vector<ParameterT<T>*>& params, bool with_vel) {
    for (auto* p : params) {
        ck.add(prefix + p->name, p->node->value.template cast<float>());
        if (with_vel) ck.add(prefix + p->name + ".vel", p->vel->value.template cast<float>());
        if (p->has_adam) {
            ck.add(prefix + p->name + ".adam_m", p->adam_m.template cast<float>());
            ck.add(prefix + p->name + ".adam_v", p->adam_v.template cast<float>());
            ck.add_u64(prefix + p->name + ".adam_t", uint64_t(p->adam_t));
        }
    }
}

template <typename T>
void load_param_group(const CheckpointData& ck, const std::string& prefix,
                      const std::vector<ParameterT<T>*>& params, bool with_vel) {
    for (auto* p : params) {
        const auto& v = ck.require(prefix + p->name);
        if (v.shape != p->node->value.shape)
            throw DataError("checkpoint tensor '" + prefix + p->name + "' has shape " +
                            shape_str(v.shape) + ", expected " +
                            shape_str(p->node->value.shape));
        p->node = make_leaf(v.template cast<T>(), true);
        if (with_vel) p->vel = make_constant(ck.require(prefix + p->name + ".vel").template cast<T>());
        if (const auto* m = ck.find(prefix + p->name + ".adam_m")) {
            p->adam_m = m->template cast<T>();
            p->adam_v = ck.require(prefix + p->name + ".adam_v").template cast<T>();
            p->adam_t = int64_t(ck.get_u64(prefix + p->name + ".adam_t"));
            p->has_adam = true;
        }
    }
}

// Batchnorm running buffers are keyed off the layer's gamma name.
template <typename T>
std::string norm_prefix(const BatchNormLayerT<T>& bn) {
    const std::string& g = bn.gamma.name;  // "<layer>.gamma"
    return g.substr(0, g.size() - std::string(".gamma").size());
}

template <typename T>
void save_norm_stats(CheckpointData& ck, const std::string& prefix,
                     const std::vector<BatchNormLayerT<T>*>& layers) {
    for (auto* bn : layers) {
        ck.add(prefix + norm_prefix(*bn) + ".running_mean", bn->running_mean.template cast<float>());
        ck.add(prefix + norm_prefix(*bn) + ".running_var", bn->running_var.template cast<float>());
    }
}

template <typename T>
void load_norm_stats(const CheckpointData& ck, const std::string& prefix,
                     const std::vector<BatchNormLayerT<T>*>& layers) {
    for (auto* bn : layers) {
        bn->running_mean = ck.require(prefix + norm_prefix(*bn) + ".running_mean").template cast<T>();
        bn->running_var = ck.require(prefix + norm_prefix(*bn) + ".running_var").template cast<T>();
    }
}

template <typename T>
TensorT<T> history_tensor(const std::vector<T>& v) {
    return TensorT<T>(Shape{int64_t(v.size())}, v);
}

}  // namespace detail

template <typename T>
CheckpointData to_checkpoint(const RunStateT<T>& state) {
    CheckpointData ck;
    ck.config_text = serialize_config(state.cfg);
    ck.add_scalar("state.has_teacher", state.has_teacher ? 1 : 0);
    ck.add_u64("state.meta_iter", uint64_t(state.meta_iter));
    ck.add_u64("rng.latent", state.latent_rng.draws);
    ck.add_u64("rng.data", state.data_rng.draws);
    ck.add_u64("rng.augment", state.augment_rng.draws);
    auto& self = const_cast<RunStateT<T>&>(state);  // parameters() is non-const plumbing
    detail::save_param_group<T>(ck, "student.", self.student.parameters(), /*with_vel=*/true);
    detail::save_norm_stats<T>(ck, "student.", self.student.norm_layers());
    if (state.has_teacher) {
        detail::save_param_group<T>(ck, "teacher.", self.teacher.parameters(), /*with_vel=*/false);
        detail::save_norm_stats<T>(ck, "teacher.", self.teacher.norm_layers());
        detail::save_param_group<T>(ck, "", self.schedule.parameters(), /*with_vel=*/false);
        for (size_t j = 0; j < state.latent_bank.size(); ++j) {
            const auto& lb = state.latent_bank[j];
            ck.add("latent.z." + std::to_string(j), lb.z.template cast<float>());
            TensorT<float> y(Shape{int64_t(lb.labels.size())},
                             std::vector<float>(lb.labels.begin(), lb.labels.end()));
            ck.add("latent.y." + std::to_string(j), std::move(y));
        }
    }
    if (!state.teach_losses.empty())
        ck.add("history.teach", detail::history_tensor(state.teach_losses).template cast<float>());
    if (!state.meta_losses.empty())
        ck.add("history.meta", detail::history_tensor(state.meta_losses).template cast<float>());
    return ck;
}

template <typename T>
RunStateT<T> from_checkpoint(const CheckpointData& ck) {
    auto cfg = parse_config_text(ck.config_text, "checkpoint config");
    const bool has_teacher = ck.require("state.has_teacher").data[0] != 0.0f;
    RunStateT<T> st = has_teacher ? init_run_state<T>(cfg) : init_plain_state<T>(cfg);
    detail::load_param_group<T>(ck, "student.", st.student.parameters(), /*with_vel=*/true);
    detail::load_norm_stats<T>(ck, "student.", st.student.norm_layers());
    if (has_teacher) {
        detail::load_param_group<T>(ck, "teacher.", st.teacher.parameters(), /*with_vel=*/false);
        detail::load_norm_stats<T>(ck, "teacher.", st.teacher.norm_layers());
        detail::load_param_group<T>(ck, "", st.schedule.parameters(), /*with_vel=*/false);
        for (size_t j = 0; j < st.latent_bank.size(); ++j) {
            auto& lb = st.latent_bank[j];
            const auto& z = ck.require("latent.z." + std::to_string(j));
            if (z.shape != lb.z.shape)
                throw DataError("checkpoint latent bank entry " + std::to_string(j) +
                                " has shape " + shape_str(z.shape) + ", expected " +
                                shape_str(lb.z.shape));
            lb.z = z.template cast<T>();
            const auto& y = ck.require("latent.y." + std::to_string(j));
            lb.labels.assign(y.data.begin(), y.data.end());
        }
    }
    st.meta_iter = int64_t(ck.get_u64("state.meta_iter"));
    st.latent_rng = restore_counted_rng(uint64_t(cfg.seed), Stream::Latent, ck.get_u64("rng.latent"));
    st.data_rng = restore_counted_rng(uint64_t(cfg.seed), Stream::DataOrder, ck.get_u64("rng.data"));
    st.augment_rng =
        restore_counted_rng(uint64_t(cfg.seed), Stream::Augment, ck.get_u64("rng.augment"));
    if (const auto* h = ck.find("history.teach")) {
        auto t = h->template cast<T>();
        st.teach_losses.assign(t.data.begin(), t.data.end());
    }
    if (const auto* h = ck.find("history.meta")) {
        auto t = h->template cast<T>();
        st.meta_losses.assign(t.data.begin(), t.data.end());
    }
    return st;
}

// ---------------------------------------------------------------------------
// Trainers.
// ---------------------------------------------------------------------------

/// Called after each completed outer iteration. `teach_mean` is NaN when the
/// iteration ran no teaching steps; `report` is null off the eval cadence.
template <typename T>
using IterationHookT =
    std::function<void(RunStateT<T>& state, int64_t iter, T teach_mean, T meta_loss,
                       const MetricsReport* report)>;

/// The outer loop: per iteration, M differentiable teaching steps followed by
/// one meta step, with periodic evaluation, CSV logging, and checkpointing
/// (both happen in `out_dir` unless it is empty). Continues from
/// state.meta_iter, so a state loaded from a checkpoint resumes in place.
template <typename T>
void run_training(RunStateT<T>& state, const LabeledImageSetT<T>& train_set,
                  const LabeledImageSetT<T>& test_set, const std::string& out_dir,
                  const IterationHookT<T>& hook = {}) {
    const TrainingConfig& cfg = state.cfg;
    cfg.validate();
    detail::check_dataset(cfg, train_set, "train");
    detail::check_dataset(cfg, test_set, "test");
    if (train_set.size() < cfg.outer_batch)
        throw ConfigError("train split of " + std::to_string(train_set.size()) +
                          " images is smaller than the outer batch " +
                          std::to_string(cfg.outer_batch));
    auto hooks = make_hooks(state);

    detail::MetricsCsv csv;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        csv.open(out_dir + "/metrics.csv");
    }

    for (int64_t it = state.meta_iter; it < cfg.n_meta; ++it) {
        T teach_mean = std::numeric_limits<T>::quiet_NaN();
        if (cfg.curriculum) {
            if (cfg.latent_strategy == LatentStrategy::ResampledPerMetaIteration) {
                state.latent_bank.clear();
                for (int64_t j = 0; j < cfg.m_teach; ++j)
                    state.latent_bank.push_back(sample_latent_batch<T>(
                        cfg.inner_batch, cfg.latent_dim, cfg.num_classes, state.latent_rng));
            }
            T sum = T(0);
            for (int64_t j = 0; j < cfg.m_teach; ++j) {
                LatentBatchT<T> fresh;
                if (cfg.latent_strategy == LatentStrategy::ResampledPerStep)
                    fresh = sample_latent_batch<T>(cfg.inner_batch, cfg.latent_dim,
                                                   cfg.num_classes, state.latent_rng);
                const LatentBatchT<T>& lb =
                    cfg.latent_strategy == LatentStrategy::ResampledPerStep ? fresh
                                                                            : state.latent_bank[j];
                const T l = teaching_step(hooks, cfg, lb, j);
                state.teach_losses.push_back(l);
                sum += l;
            }
            teach_mean = sum / T(cfg.m_teach);
        }
        auto [images, labels] = sample_batch(train_set, cfg.outer_batch, state.data_rng);
        images = detail::apply_real_augment(images, cfg.real_augment, state.augment_rng);
        const T meta_loss = meta_step(hooks, cfg, images, labels, cfg.curriculum);
        state.meta_losses.push_back(meta_loss);
        state.meta_iter = it + 1;

        const bool cadence = ((it + 1) % cfg.eval_every == 0) || (it + 1 == cfg.n_meta);
        MetricsReport rep;
        bool have_rep = false;
        if (cadence && test_set.size() > 0) {
            if (cfg.bn_recompute_stats)
                recompute_norm_stats(state.student, train_set, cfg.outer_batch);
            rep = evaluate(state.student, test_set, cfg.outer_batch);
            have_rep = true;
        }
        csv.row(it + 1, double(teach_mean), double(meta_loss), have_rep ? &rep : nullptr);
        if (cadence && !out_dir.empty())
            write_checkpoint(out_dir + "/checkpoint.gmcl", to_checkpoint(state));
        if (hook) hook(state, it, teach_mean, meta_loss, have_rep ? &rep : nullptr);
    }
}

/// Baseline: the same student trained on real batches only, one SGD-momentum
/// step per iteration with the configured (init_lr, init_momentum). Draws
/// data and augmentation from the same streams as run_training, so with the
/// inner loop disabled there the two see identical batches.
template <typename T>
void train_plain_learner(RunStateT<T>& state, const LabeledImageSetT<T>& train_set,
                         const LabeledImageSetT<T>& test_set, AugmentKind augmentation,
                         const std::string& out_dir, const IterationHookT<T>& hook = {}) {
    const TrainingConfig& cfg = state.cfg;
    cfg.validate();
    detail::check_dataset(cfg, train_set, "train");
    detail::check_dataset(cfg, test_set, "test");
    if (train_set.size() < cfg.outer_batch)
        throw ConfigError("train split of " + std::to_string(train_set.size()) +
                          " images is smaller than the outer batch " +
                          std::to_string(cfg.outer_batch));
    auto params = state.student.parameters();
    auto names = param_names(params);

    detail::MetricsCsv csv;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        csv.open(out_dir + "/metrics.csv");
    }

    for (int64_t it = state.meta_iter; it < cfg.n_meta; ++it) {
        auto [images, labels] = sample_batch(train_set, cfg.outer_batch, state.data_rng);
        images = detail::apply_real_augment(images, augmentation, state.augment_rng);
        auto logits = state.student.forward(make_constant(images), true);
        auto loss = ops::softmax_cross_entropy(logits, labels);
        const T lv = loss->value.data[0];
        if (!std::isfinite(double(lv)))
            throw DivergenceError("training step " + std::to_string(it) + ": loss is not finite");
        auto grads = ops::backward(loss, param_nodes(params), /*build_graph=*/false, &names);
        for (size_t i = 0; i < params.size(); ++i)
            sgd_momentum_step(*params[i], grads[i]->value, T(cfg.init_lr), T(cfg.init_momentum));
        state.meta_losses.push_back(lv);
        state.meta_iter = it + 1;

        const bool cadence = ((it + 1) % cfg.eval_every == 0) || (it + 1 == cfg.n_meta);
        MetricsReport rep;
        bool have_rep = false;
        if (cadence && test_set.size() > 0) {
            if (cfg.bn_recompute_stats)
                recompute_norm_stats(state.student, train_set, cfg.outer_batch);
            rep = evaluate(state.student, test_set, cfg.outer_batch);
            have_rep = true;
        }
        csv.row(it + 1, std::numeric_limits<double>::quiet_NaN(), double(lv),
                have_rep ? &rep : nullptr);
        if (cadence && !out_dir.empty())
            write_checkpoint(out_dir + "/checkpoint.gmcl", to_checkpoint(state));
        if (hook) hook(state, it, std::numeric_limits<T>::quiet_NaN(), lv,
                       have_rep ? &rep : nullptr);
    }
}

}  // namespace gmcl
