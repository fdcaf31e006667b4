#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "gmcl/models.hpp"

using namespace gmcl;

namespace {

template <typename T>
int64_t total_params(std::vector<ParameterT<T>*> ps) {
    int64_t n = 0;
    for (auto* p : ps) n += p->node->value.numel();
    return n;
}

// Layer-by-layer arithmetic for the generator's size, written independently
// of the module's own bookkeeping.
int64_t teacher_expected(int64_t latent, int64_t classes, int64_t h, int64_t channels) {
    const int64_t q = h / 4, map = 128 * q * q;
    int64_t n = 0;
    n += 1024 * (latent + classes) + 1024;  // fc1
    n += 2 * 1024;                          // bn1
    n += map * 1024 + map;                  // fc2
    n += 2 * map;                           // bn2
    n += 64 * 128 * 9 + 64;                 // conv1
    n += 2 * 64;                            // bn3
    n += channels * 64 * 9 + channels;      // conv2
    return n;
}

int64_t student_expected(int64_t channels, int64_t classes) {
    const int64_t chan[5] = {32, 64, 64, 128, 128};
    int64_t n = 0, cin = channels;
    for (int i = 0; i < 5; ++i) {
        n += chan[i] * cin * 9 + chan[i];  // conv
        n += 2 * chan[i];                  // bn
        cin = chan[i];
    }
    n += classes * 128 + classes;  // fc
    return n;
}

template <typename T>
void zero_params(std::vector<ParameterT<T>*> ps) {
    for (auto* p : ps) std::fill(p->node->value.data.begin(), p->node->value.data.end(), T(0));
}

}  // namespace

TEST_CASE("teacher parameter inventory") {
    auto rng = make_rng(1, Stream::TeacherInit);
    TeacherGeneratorT<float> t;
    t.init(128, 4, 32, 3, rng);
    CHECK(t.parameters().size() == 14);
    CHECK(total_params(t.parameters()) == teacher_expected(128, 4, 32, 3));
    CHECK(total_params(t.parameters()) == 8627075);

    TeacherGeneratorT<float> small;
    small.init(64, 2, 16, 1, rng);
    CHECK(total_params(small.parameters()) == teacher_expected(64, 2, 16, 1));

    TeacherGeneratorT<float> bad;
    CHECK_THROWS_AS(bad.init(8, 2, 10, 1, rng), ConfigError);  // side not a multiple of 4
}

TEST_CASE("teacher forward: shape, range, conditioning errors") {
    auto rng = make_rng(5, Stream::TeacherInit);
    TeacherGeneratorT<double> t;
    t.init(16, 3, 8, 1, rng);

    auto lrng = make_rng(5, Stream::Latent);
    LatentBatchT<double> lb;
    lb.z = randn<double>({6, 16}, lrng);
    lb.labels = {0, 1, 2, 0, 1, 2};
    auto out = t.forward(lb, true);
    CHECK(out->value.shape == Shape{6, 1, 8, 8});
    for (double v : out->value.data) {
        CHECK(v > -1.0);
        CHECK(v < 1.0);
    }

    // the one-hot block: same z, different label, different image
    LatentBatchT<double> lb2 = lb;
    lb2.labels[0] = 1;
    auto out2 = t.forward(lb2, true);
    double diff = 0;
    for (int64_t i = 0; i < 64; ++i) diff += std::abs(out2->value.data[i] - out->value.data[i]);
    CHECK(diff > 1e-6);

    lb2.labels[0] = 3;
    CHECK_THROWS_AS(t.forward(lb2, true), ValueError);
    LatentBatchT<double> narrow;
    narrow.z = randn<double>({6, 5}, lrng);
    narrow.labels = lb.labels;
    CHECK_THROWS_AS(t.forward(narrow, true), DimensionError);
}

TEST_CASE("teacher with zeroed parameters emits exactly zero") {
    auto rng = make_rng(2, Stream::TeacherInit);
    TeacherGeneratorT<double> t;
    t.init(8, 2, 8, 3, rng);
    zero_params(t.parameters());
    auto lrng = make_rng(2, Stream::Latent);
    auto lb = sample_latent_batch<double>(4, 8, 2, lrng);
    auto out = t.forward(lb, true);
    for (double v : out->value.data) CHECK(v == 0.0);  // tanh(0)
}

TEST_CASE("student parameter inventory") {
    auto rng = make_rng(1, Stream::StudentInit);
    StudentLearnerT<float> s;
    s.init(3, 4, rng);
    CHECK(s.parameters().size() == 22);
    CHECK(total_params(s.parameters()) == student_expected(3, 4));
    CHECK(total_params(s.parameters()) == 279108);

    StudentLearnerT<float> gray;
    gray.init(1, 2, rng);
    CHECK(total_params(gray.parameters()) == student_expected(1, 2));
}

TEST_CASE("student forward shapes and zero case") {
    auto rng = make_rng(3, Stream::StudentInit);
    StudentLearnerT<double> s;
    s.init(1, 2, rng);
    auto drng = make_rng(3, Stream::DataOrder);

    for (int64_t hw : {8, 16, 32}) {
        auto x = make_constant(randn<double>({5, 1, hw, hw}, drng));
        auto logits = s.forward(x, true);
        CHECK(logits->value.shape == Shape{5, 2});
    }

    zero_params(s.parameters());
    auto x = make_constant(randn<double>({4, 1, 8, 8}, drng));
    auto logits = s.forward(x, true);
    for (double v : logits->value.data) CHECK(v == 0.0);
}

TEST_CASE("meta schedule: stored form round-trips the requested values") {
    MetaScheduleT<double> sch;
    sch.init(16, 0.02, 0.5);
    CHECK(sch.steps == 16);
    CHECK(sch.raw_lr.node->value.shape == Shape{16});
    CHECK(sch.raw_momentum.node->value.shape == Shape{16});
    for (int64_t j = 0; j < 16; ++j) {
        auto [a, m] = sch.values_detached(j);
        CHECK(a == doctest::Approx(0.02).epsilon(1e-12));
        CHECK(m == doctest::Approx(0.5).epsilon(1e-12));
    }
    CHECK_THROWS_AS(sch.values(-1), ValueError);
    CHECK_THROWS_AS(sch.values(16), ValueError);

    MetaScheduleT<double> bad;
    CHECK_THROWS_AS(bad.init(0, 0.02, 0.5), ConfigError);
    CHECK_THROWS_AS(bad.init(4, 0.0, 0.5), ConfigError);
    CHECK_THROWS_AS(bad.init(4, 0.02, 1.0), ConfigError);
}

TEST_CASE("meta schedule: gradients hit only the picked step") {
    // d alpha_j / d raw_lr[i] = alpha_j * [i == j]
    MetaScheduleT<double> sch;
    sch.init(4, 0.1, 0.7);
    auto [a1, m1] = sch.values(1);
    auto ga = ops::backward(a1, {sch.raw_lr.node}, false)[0];
    for (int64_t i = 0; i < 4; ++i)
        CHECK(ga->value.data[i] == doctest::Approx(i == 1 ? 0.1 : 0.0).epsilon(1e-12));
    auto gm = ops::backward(m1, {sch.raw_momentum.node}, false)[0];
    for (int64_t i = 0; i < 4; ++i)
        CHECK(gm->value.data[i] == doctest::Approx(i == 1 ? 0.7 * 0.3 : 0.0).epsilon(1e-12));
}

TEST_CASE("batchnorm layer: momentum zero keeps the latest batch statistics") {
    BatchNormLayerT<double> bn;
    bn.init("bn", 1, 0.0);
    // batch of 4 values in one channel: mean 2.5, biased variance 1.25
    auto x = make_constant(TensorT<double>({4, 1, 1, 1}, {1, 2, 3, 4}));
    bn.forward(x, true);
    CHECK(bn.running_mean.data[0] == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(bn.running_var.data[0] == doctest::Approx(1.25).epsilon(1e-12));

    // second batch fully replaces the stats
    auto x2 = make_constant(TensorT<double>({2, 1, 1, 1}, {10, 20}));
    bn.forward(x2, true);
    CHECK(bn.running_mean.data[0] == doctest::Approx(15.0).epsilon(1e-12));
    CHECK(bn.running_var.data[0] == doctest::Approx(25.0).epsilon(1e-12));

    // nonzero momentum blends: 0.5*batch + 0.5*old
    BatchNormLayerT<double> blend;
    blend.init("bn", 1, 0.5);
    blend.forward(x, true);  // starts from running (0, 1)
    CHECK(blend.running_mean.data[0] == doctest::Approx(0.5 * 2.5).epsilon(1e-12));
    CHECK(blend.running_var.data[0] == doctest::Approx(0.5 * 1.25 + 0.5).epsilon(1e-12));
}

TEST_CASE("batchnorm layer: eval mode uses stored statistics") {
    BatchNormLayerT<double> bn;
    bn.init("bn", 1, 0.0);
    bn.running_mean.data[0] = 2.0;
    bn.running_var.data[0] = 4.0;
    auto x = make_constant(TensorT<double>({2, 1, 1, 1}, {2.0, 6.0}));
    auto y = bn.forward(x, false);
    // (x - 2) / sqrt(4 + eps)
    CHECK(y->value.data[0] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(y->value.data[1] == doctest::Approx(4.0 / std::sqrt(4.0 + 1e-5)).epsilon(1e-9));
}

TEST_CASE("batchnorm layer: stat accumulation averages batches") {
    BatchNormLayerT<double> bn;
    bn.init("bn", 1, 0.0);
    bn.begin_stat_accumulation();
    bn.forward(make_constant(TensorT<double>({2, 1, 1, 1}, {0.0, 2.0})), true);  // mean 1 var 1
    bn.forward(make_constant(TensorT<double>({2, 1, 1, 1}, {4.0, 8.0})), true);  // mean 6 var 4
    bn.finish_stat_accumulation();
    CHECK(bn.running_mean.data[0] == doctest::Approx(3.5).epsilon(1e-12));
    CHECK(bn.running_var.data[0] == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("latent batches are balanced and deterministic") {
    auto rng = make_rng(9, Stream::Latent);
    auto lb = sample_latent_batch<double>(10, 6, 4, rng);
    CHECK(lb.z.shape == Shape{10, 6});
    std::array<int, 4> counts{};
    for (int y : lb.labels) {
        REQUIRE(y >= 0);
        REQUIRE(y < 4);
        counts[size_t(y)]++;
    }
    const auto [lo, hi] = std::minmax_element(counts.begin(), counts.end());
    CHECK(*hi - *lo <= 1);

    auto rng2 = make_rng(9, Stream::Latent);
    auto lb2 = sample_latent_batch<double>(10, 6, 4, rng2);
    CHECK(lb2.z.data == lb.z.data);
    CHECK(lb2.labels == lb.labels);

    CHECK_THROWS_AS(sample_latent_batch<double>(0, 6, 4, rng), ValueError);
}

TEST_CASE("model initialization is seed-deterministic") {
    auto r1 = make_rng(17, Stream::StudentInit);
    auto r2 = make_rng(17, Stream::StudentInit);
    StudentLearnerT<float> a, b;
    a.init(3, 4, r1);
    b.init(3, 4, r2);
    auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->name == pb[i]->name);
        CHECK(pa[i]->node->value.data == pb[i]->node->value.data);
    }

    auto r3 = make_rng(18, Stream::StudentInit);
    StudentLearnerT<float> c;
    c.init(3, 4, r3);
    CHECK(c.convs[0].kernel.node->value.data != a.convs[0].kernel.node->value.data);
}
