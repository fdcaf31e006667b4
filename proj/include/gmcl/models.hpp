#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "gmcl/optim.hpp"

namespace gmcl {

template <typename T>
struct LinearLayerT {
    ParameterT<T> weight, bias;

    void init(const std::string& prefix, int64_t out, int64_t in, T slope, Rng& rng) {
        weight = make_parameter(prefix + ".weight", kaiming_normal_init<T>({out, in}, slope, rng));
        bias = make_parameter(prefix + ".bias", TensorT<T>::zeros({out}));
    }
    NodePtr<T> forward(const NodePtr<T>& x) const {
        return ops::linear(x, weight.node, bias.node);
    }
    void collect(std::vector<ParameterT<T>*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

template <typename T>
struct Conv2dLayerT {
    ParameterT<T> kernel, bias;
    int64_t stride = 1, pad = 1;

    void init(const std::string& prefix, int64_t cout, int64_t cin, int64_t k, int64_t stride_,
              int64_t pad_, T slope, Rng& rng) {
        stride = stride_;
        pad = pad_;
        kernel = make_parameter(prefix + ".kernel",
                                kaiming_normal_init<T>({cout, cin, k, k}, slope, rng));
        bias = make_parameter(prefix + ".bias", TensorT<T>::zeros({cout}));
    }
    NodePtr<T> forward(const NodePtr<T>& x) const {
        return ops::conv2d(x, kernel.node, bias.node, stride, pad);
    }
    void collect(std::vector<ParameterT<T>*>& out) {
        out.push_back(&kernel);
        out.push_back(&bias);
    }
};

/// Batchnorm layer owning its running statistics. Update rule:
/// running' = (1 - momentum) * batch + momentum * running, so momentum 0
/// keeps exactly the latest batch statistics.
template <typename T>
struct BatchNormLayerT {
    ParameterT<T> gamma, beta;
    TensorT<T> running_mean{Shape{}, {T(0)}}, running_var{Shape{}, {T(0)}};
    T momentum = T(0);
    T eps = T(1e-5);

    // one-pass recomputation of statistics (config switch)
    bool accumulating = false;
    TensorT<T> acc_mean{Shape{}, {T(0)}}, acc_var{Shape{}, {T(0)}};
    int64_t acc_batches = 0;

    void init(const std::string& prefix, int64_t c, T momentum_) {
        momentum = momentum_;
        gamma = make_parameter(prefix + ".gamma", TensorT<T>::full({c}, T(1)));
        beta = make_parameter(prefix + ".beta", TensorT<T>::zeros({c}));
        running_mean = TensorT<T>::zeros({c});
        running_var = TensorT<T>::full({c}, T(1));
    }

    NodePtr<T> forward(const NodePtr<T>& x, bool training) {
        if (!training)
            return ops::batchnorm_eval(x, gamma.node, beta.node, running_mean, running_var, eps);
        TensorT<T> bm, bv;
        auto y = ops::batchnorm_train(x, gamma.node, beta.node, eps, &bm, &bv);
        for (int64_t i = 0; i < bm.numel(); ++i) {
            running_mean.data[i] = (T(1) - momentum) * bm.data[i] + momentum * running_mean.data[i];
            running_var.data[i] = (T(1) - momentum) * bv.data[i] + momentum * running_var.data[i];
        }
        if (accumulating) {
            for (int64_t i = 0; i < bm.numel(); ++i) {
                acc_mean.data[i] += bm.data[i];
                acc_var.data[i] += bv.data[i];
            }
            ++acc_batches;
        }
        return y;
    }

    void begin_stat_accumulation() {
        accumulating = true;
        acc_mean = TensorT<T>::zeros(running_mean.shape);
        acc_var = TensorT<T>::zeros(running_var.shape);
        acc_batches = 0;
    }
    void finish_stat_accumulation() {
        accumulating = false;
        if (acc_batches == 0) return;
        for (int64_t i = 0; i < acc_mean.numel(); ++i) {
            running_mean.data[i] = acc_mean.data[i] / T(acc_batches);
            running_var.data[i] = acc_var.data[i] / T(acc_batches);
        }
    }

    void collect(std::vector<ParameterT<T>*>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }
};

/// A batch of generator inputs: latent vectors plus the class labels the
/// generated images are conditioned on.
template <typename T>
struct LatentBatchT {
    TensorT<T> z{Shape{}, {T(0)}};
    std::vector<int> labels;
};

/// Balanced label assignment (counts differ by at most one), order shuffled.
template <typename T, typename G = Rng>
LatentBatchT<T> sample_latent_batch(int64_t batch, int64_t latent_dim, int64_t num_classes,
                                    G& rng) {
    if (batch < 1 || latent_dim < 1 || num_classes < 1)
        throw ValueError("sample_latent_batch: batch, latent_dim, num_classes must be positive");
    LatentBatchT<T> out;
    out.z = randn<T>({batch, latent_dim}, rng);
    out.labels.resize(batch);
    for (int64_t i = 0; i < batch; ++i) out.labels[i] = static_cast<int>(i % num_classes);
    for (int64_t i = batch - 1; i > 0; --i) {
        const int64_t j = static_cast<int64_t>(rng() % static_cast<uint64_t>(i + 1));
        std::swap(out.labels[i], out.labels[j]);
    }
    return out;
}

/// Conditional image generator: two FC blocks expand latent+label to a
/// 128-channel (H/4)x(H/4) map, which two upsample+conv blocks grow to HxH.
/// tanh keeps outputs in (-1,1), the range real images are normalized to.
template <typename T>
struct TeacherGeneratorT {
    int64_t latent_dim = 0, num_classes = 0, out_hw = 0, out_channels = 0;
    LinearLayerT<T> fc1, fc2;
    BatchNormLayerT<T> bn1, bn2, bn3;
    Conv2dLayerT<T> conv1, conv2;
    static constexpr T kSlope = T(0.1);

    void init(int64_t latent, int64_t classes, int64_t h, int64_t channels, Rng& rng) {
        if (h % 4 != 0 || h <= 0)
            throw ConfigError("teacher: output side " + std::to_string(h) +
                              " must be a positive multiple of 4");
        latent_dim = latent;
        num_classes = classes;
        out_hw = h;
        out_channels = channels;
        const int64_t q = h / 4;
        fc1.init("fc1", 1024, latent + classes, kSlope, rng);
        bn1.init("bn1", 1024, T(0));
        fc2.init("fc2", 128 * q * q, 1024, kSlope, rng);
        bn2.init("bn2", 128 * q * q, T(0));
        conv1.init("conv1", 64, 128, 3, 1, 1, kSlope, rng);
        bn3.init("bn3", 64, T(0));
        conv2.init("conv2", channels, 64, 3, 1, 1, kSlope, rng);
    }

    /// [batch, latent+num_classes] input: latent columns then one-hot label.
    TensorT<T> assemble_input(const LatentBatchT<T>& lb) const {
        const int64_t b = lb.z.shape[0];
        if (lb.z.shape != Shape{b, latent_dim})
            throw DimensionError("teacher: latent " + shape_str(lb.z.shape) + " expected [" +
                                 std::to_string(b) + "," + std::to_string(latent_dim) + "]");
        if (static_cast<int64_t>(lb.labels.size()) != b)
            throw DimensionError("teacher: " + std::to_string(lb.labels.size()) +
                                 " labels for latent batch " + std::to_string(b));
        auto in = TensorT<T>::zeros({b, latent_dim + num_classes});
        for (int64_t i = 0; i < b; ++i) {
            const int y = lb.labels[i];
            if (y < 0 || y >= num_classes)
                throw ValueError("teacher: label " + std::to_string(y) + " out of range [0," +
                                 std::to_string(num_classes) + ") at batch index " +
                                 std::to_string(i));
            for (int64_t j = 0; j < latent_dim; ++j)
                in.data[i * (latent_dim + num_classes) + j] = lb.z.data[i * latent_dim + j];
            in.data[i * (latent_dim + num_classes) + latent_dim + y] = T(1);
        }
        return in;
    }

    NodePtr<T> forward(const LatentBatchT<T>& lb, bool training = true) {
        auto x = make_constant(assemble_input(lb));
        auto h = ops::leaky_relu(bn1.forward(fc1.forward(x), training), kSlope);
        h = ops::leaky_relu(bn2.forward(fc2.forward(h), training), kSlope);
        const int64_t b = lb.z.shape[0], q = out_hw / 4;
        auto map = ops::reshape(h, {b, 128, q, q});
        map = ops::upsample_nearest2x(map);
        map = ops::leaky_relu(bn3.forward(conv1.forward(map), training), kSlope);
        map = ops::upsample_nearest2x(map);
        return ops::tanh_op(conv2.forward(map));
    }

    std::vector<ParameterT<T>*> parameters() {
        std::vector<ParameterT<T>*> out;
        fc1.collect(out);
        bn1.collect(out);
        fc2.collect(out);
        bn2.collect(out);
        conv1.collect(out);
        bn3.collect(out);
        conv2.collect(out);
        return out;
    }
    std::vector<BatchNormLayerT<T>*> norm_layers() { return {&bn1, &bn2, &bn3}; }
};

/// Five conv/batchnorm/leaky-relu blocks, global average pooling, and a
/// linear classifier head.
template <typename T>
struct StudentLearnerT {
    int64_t num_classes = 0, in_channels = 0;
    std::array<Conv2dLayerT<T>, 5> convs;
    std::array<BatchNormLayerT<T>, 5> bns;
    LinearLayerT<T> fc;
    static constexpr T kSlope = T(0.1);

    void init(int64_t channels, int64_t classes, Rng& rng) {
        num_classes = classes;
        in_channels = channels;
        const int64_t chan[5] = {32, 64, 64, 128, 128};
        const int64_t stride[5] = {1, 2, 1, 2, 1};
        int64_t cin = channels;
        for (int i = 0; i < 5; ++i) {
            const std::string n = "conv" + std::to_string(i + 1);
            convs[i].init(n, chan[i], cin, 3, stride[i], 1, kSlope, rng);
            bns[i].init("bn" + std::to_string(i + 1), chan[i], T(0));
            cin = chan[i];
        }
        fc.init("fc", classes, 128, kSlope, rng);
    }

    NodePtr<T> forward(const NodePtr<T>& images, bool training) {
        auto x = images;
        for (int i = 0; i < 5; ++i)
            x = ops::leaky_relu(bns[i].forward(convs[i].forward(x), training), kSlope);
        return fc.forward(ops::global_avg_pool(x));
    }

    std::vector<ParameterT<T>*> parameters() {
        std::vector<ParameterT<T>*> out;
        for (int i = 0; i < 5; ++i) {
            convs[i].collect(out);
            bns[i].collect(out);
        }
        fc.collect(out);
        return out;
    }
    std::vector<BatchNormLayerT<T>*> norm_layers() {
        std::vector<BatchNormLayerT<T>*> out;
        for (auto& b : bns) out.push_back(&b);
        return out;
    }
};

/// Per-step learning rate and momentum, stored in unconstrained form:
/// alpha_j = exp(raw_lr[j]) > 0 and mu_j = sigmoid(raw_momentum[j]) in (0,1).
template <typename T>
struct MetaScheduleT {
    int64_t steps = 0;
    ParameterT<T> raw_lr, raw_momentum;

    void init(int64_t m, T init_lr, T init_momentum) {
        if (m < 1) throw ConfigError("schedule: step count must be >= 1");
        if (init_lr <= T(0) || init_momentum <= T(0) || init_momentum >= T(1))
            throw ConfigError("schedule: need init_lr > 0 and init_momentum in (0,1)");
        steps = m;
        raw_lr = make_parameter("sched.raw_lr", TensorT<T>::full({m}, std::log(init_lr)));
        raw_momentum = make_parameter(
            "sched.raw_momentum",
            TensorT<T>::full({m}, std::log(init_momentum / (T(1) - init_momentum))));
    }

    std::pair<NodePtr<T>, NodePtr<T>> values(int64_t j) {
        if (j < 0 || j >= steps)
            throw ValueError("schedule: step index " + std::to_string(j) + " out of range [0," +
                             std::to_string(steps) + ")");
        return {ops::exp_op(ops::pick(raw_lr.node, j)),
                ops::sigmoid(ops::pick(raw_momentum.node, j))};
    }

    std::pair<T, T> values_detached(int64_t j) {
        auto [a, m] = values(j);
        return {a->value.data[0], m->value.data[0]};
    }

    std::vector<ParameterT<T>*> parameters() { return {&raw_lr, &raw_momentum}; }
};

template <typename T>
int64_t count_parameters(const std::vector<ParameterT<T>*>& params) {
    int64_t n = 0;
    for (auto* p : params) n += p->node->value.numel();
    return n;
}

}  // namespace gmcl
