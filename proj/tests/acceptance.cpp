// End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
// the process exits nonzero if any fail.
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gmcl/gradcheck.hpp"
#include "gmcl/training.hpp"

using namespace gmcl;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void criterion(const char* name, const std::function<std::string()>& body) {
    try {
        const std::string detail = body();
        std::printf("[PASS] %s%s%s\n", name, detail.empty() ? "" : " — ", detail.c_str());
    } catch (const std::exception& e) {
        ++g_failures;
        std::printf("[FAIL] %s — %s\n", name, e.what());
    }
    std::fflush(stdout);
}

struct CheckFail : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
    if (!ok) throw CheckFail(what);
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("gmcl_accept_" + tag + "_" + std::to_string(getpid()));
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& s) const { return (path / s).string(); }
};

std::string fmt(const char* f, ...) {
    char buf[256];
    va_list ap;
    va_start(ap, f);
    std::vsnprintf(buf, sizeof buf, f, ap);
    va_end(ap);
    return buf;
}

// --------------------------------------------------------------------------
// 1. Meta-gradients against central finite differences on the tiny bilevel
//    rig (linear teacher to 8x8 images, 2-filter conv + FC student, two
//    unrolled steps, double precision).
// --------------------------------------------------------------------------
std::string check_meta_gradients() {
    const auto t0 = clk::now();
    TinyBilevelRigT<double> rig;
    rig.init(7);
    const double h = 1e-3, tol = 1e-4;

    std::vector<GradcheckEntry> entries;
    entries.push_back(fd_meta_check(rig, "teacher weight", rig.teacher_lin.weight, 64, h, tol, 11));
    entries.push_back(fd_meta_check(rig, "teacher bias", rig.teacher_lin.bias, 16, h, tol, 12));
    entries.push_back(fd_meta_check(rig, "schedule rate", rig.schedule.raw_lr, 64, h, tol, 13));
    entries.push_back(
        fd_meta_check(rig, "schedule momentum", rig.schedule.raw_momentum, 64, h, tol, 14));

    int teacher_coords = entries[0].checked + entries[1].checked;
    int sched_coords = entries[2].checked + entries[3].checked;
    double worst = 0;
    for (const auto& e : entries) {
        require(e.pass, e.name + ": max rel err " + fmt("%.3e", e.max_rel) + " exceeds " +
                            fmt("%.0e", tol));
        worst = std::max(worst, e.max_rel);
    }
    require(teacher_coords >= 50,
            fmt("only %d teacher coordinates probed, need >= 50", teacher_coords));
    require(sched_coords == 4, "expected all 4 schedule coordinates probed");
    const double secs = std::chrono::duration<double>(clk::now() - t0).count();
    require(secs < 60.0, fmt("took %.1fs, budget 60s", secs));
    return fmt("worst rel err %.2e over %d teacher + %d schedule coords in %.1fs", worst,
               teacher_coords, sched_coords, secs);
}

// --------------------------------------------------------------------------
// 2. The hand-computable unrolled composition: inner objective theta^3, one
//    step with rate 0.1 from theta = 1, outer loss theta'^2 -> 0.56.
// --------------------------------------------------------------------------
std::string check_unrolled_composition() {
    auto th = make_leaf(TensorT<double>::scalar(1.0), true);
    auto inner = ops::mul(th, ops::mul(th, th));
    auto gin = ops::backward(inner, {th}, true)[0];
    auto thp = ops::sub(th, ops::scale(gin, 0.1));
    auto outer = ops::mul(thp, thp);
    auto meta = ops::backward(outer, {th}, false)[0];
    const double got = meta->value.data[0];
    require(std::abs(got - 0.56) <= 1e-12, fmt("got %.17g, want 0.56 within 1e-12", got));
    return fmt("meta-gradient %.17g", got);
}

// --------------------------------------------------------------------------
// 3. Ordering of the three training arms on the synthetic 4-class task at
//    equal real-data step budgets, averaged over 5 seeds.
// --------------------------------------------------------------------------
std::string check_arm_ordering() {
    const int n_seeds = 5;
    double mean_ad = 0, mean_fx = 0, mean_pl = 0;
    for (int s = 1; s <= n_seeds; ++s) {
        TrainingConfig cfg;
        cfg.n_meta = 8;  // every arm consumes exactly 8 real batches
        cfg.m_teach = 4;
        cfg.inner_batch = 8;
        cfg.outer_batch = 16;
        cfg.latent_dim = 16;
        cfg.image_size = 16;
        cfg.channels = 3;
        cfg.num_classes = 4;
        cfg.eval_every = 1000000;
        cfg.precision = Precision::F32;
        cfg.init_lr = 0.002;  // deliberately starved: adaptation has to earn the gap
        cfg.lr_meta = 0.05;
        cfg.seed = s;
        auto train = synth_generate<float>(cfg.dataset(), 64, uint64_t(s));      // 256 images
        auto test = synth_generate<float>(cfg.dataset(), 128, uint64_t(s) + 1);  // 512 images
        test.split = "test";

        auto ad = init_run_state<float>(cfg);
        run_training(ad, train, test, "", {});
        mean_ad += evaluate(ad.student, test, 256).accuracy;

        auto cfg_fx = cfg;
        cfg_fx.adaptive_schedule = false;
        auto fx = init_run_state<float>(cfg_fx);
        run_training(fx, train, test, "", {});
        mean_fx += evaluate(fx.student, test, 256).accuracy;

        auto pl = init_plain_state<float>(cfg);
        train_plain_learner(pl, train, test, cfg.real_augment, "", {});
        mean_pl += evaluate(pl.student, test, 256).accuracy;
    }
    mean_ad /= n_seeds;
    mean_fx /= n_seeds;
    mean_pl /= n_seeds;
    const std::string means =
        fmt("adaptive %.4f, fixed %.4f, plain %.4f", mean_ad, mean_fx, mean_pl);
    require(mean_ad >= mean_pl + 0.02, means + ": adaptive does not beat plain by 2 points");
    require(mean_ad >= mean_fx - 0.01, means + ": adaptive trails fixed by over 1 point");
    return means;
}

// --------------------------------------------------------------------------
// 4. Metric oracles with hand-computed answers.
// --------------------------------------------------------------------------
std::string check_metric_oracles() {
    // uniform cross entropy over 4 classes = ln 4
    auto logits = make_leaf(TensorT<double>::zeros({2, 4}), true);
    auto ce = ops::softmax_cross_entropy(logits, std::vector<int>{0, 3});
    require(std::abs(ce->value.data[0] - std::log(4.0)) <= 1e-6,
            fmt("uniform CE %.9f != ln 4", ce->value.data[0]));

    // the textbook 4-sample binary ranking: one discordant pair of four
    const std::vector<double> scores = {0.9, 0.1, 0.6, 0.4, 0.65, 0.35, 0.2, 0.8};
    const std::vector<int> labels = {0, 0, 1, 1};
    const double auc = macro_auc_ovr(scores, 4, 2, labels);
    require(auc == 0.75, fmt("4-sample AUC %.17g != 0.75", auc));

    const Confusion cm = {{8, 2}, {1, 9}};
    const auto [sens, spec] = sensitivity_specificity(cm);
    // 0.85 exactly as IEEE arithmetic produces it from the per-class rates
    const double want = (0.8 + 0.9) / 2.0;
    require(sens == want && spec == want,
            fmt("confusion [[8,2],[1,9]] gave sens %.17g spec %.17g, want %.17g", sens, spec,
                want));

    // rank statistic == brute-force pair counting on random instances
    std::mt19937_64 rng(99);
    for (int rep = 0; rep < 200; ++rep) {
        const int k = 2 + int(rng() % 4);
        const int n = 2 + int(rng() % 49);
        std::vector<int> y(static_cast<size_t>(n));
        for (auto& v : y) v = int(rng() % uint64_t(k));
        y[0] = 0;
        y[static_cast<size_t>(n) - 1] = k - 1;  // at least two classes present
        std::vector<double> sc(size_t(n) * size_t(k));
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        for (auto& v : sc) v = rep % 3 == 0 ? std::round(unif(rng) * 4) / 4 : unif(rng);

        double macro = 0;
        int scorable = 0;
        for (int c = 0; c < k; ++c) {
            double wins = 0;
            int64_t pos = 0, neg = 0;
            for (int i = 0; i < n; ++i) (y[size_t(i)] == c ? pos : neg) += 1;
            if (pos == 0 || neg == 0) continue;
            for (int i = 0; i < n; ++i) {
                if (y[size_t(i)] != c) continue;
                for (int j = 0; j < n; ++j) {
                    if (y[size_t(j)] == c) continue;
                    const double si = sc[size_t(i) * size_t(k) + size_t(c)];
                    const double sj = sc[size_t(j) * size_t(k) + size_t(c)];
                    wins += si > sj ? 1.0 : si == sj ? 0.5 : 0.0;
                }
            }
            macro += wins / (double(pos) * double(neg));
            ++scorable;
        }
        macro /= scorable;
        const double got = macro_auc_ovr(sc, n, k, y);
        require(got == macro, fmt("rep %d (n=%d k=%d): rank AUC %.17g != pair count %.17g", rep,
                                  n, k, got, macro));
    }
    return "ln 4 CE, 0.75 AUC, 0.85/0.85, and 200 pair-counting replays agree";
}

// --------------------------------------------------------------------------
// 5. Bitwise determinism of checkpoints and metrics logs in f32 mode.
// --------------------------------------------------------------------------
std::string check_determinism() {
    TrainingConfig cfg;
    cfg.n_meta = 4;
    cfg.m_teach = 2;
    cfg.inner_batch = 4;
    cfg.outer_batch = 8;
    cfg.latent_dim = 8;
    cfg.image_size = 8;
    cfg.channels = 1;
    cfg.num_classes = 2;
    cfg.eval_every = 2;
    cfg.precision = Precision::F32;
    cfg.seed = 33;
    auto train = synth_generate<float>(cfg.dataset(), 8, uint64_t(cfg.seed));
    auto test = synth_generate<float>(cfg.dataset(), 4, uint64_t(cfg.seed) + 1);
    test.split = "test";

    TempDir d1("det1"), d2("det2");
    auto s1 = init_run_state<float>(cfg);
    run_training(s1, train, test, d1.file("run"), {});
    auto s2 = init_run_state<float>(cfg);
    run_training(s2, train, test, d2.file("run"), {});

    const auto ck1 = slurp(d1.file("run") + "/checkpoint.gmcl");
    const auto ck2 = slurp(d2.file("run") + "/checkpoint.gmcl");
    const auto csv1 = slurp(d1.file("run") + "/metrics.csv");
    const auto csv2 = slurp(d2.file("run") + "/metrics.csv");
    require(!ck1.empty() && !csv1.empty(), "first run produced no artifacts");
    require(ck1 == ck2, "checkpoints differ between identical runs");
    require(csv1 == csv2, "metrics logs differ between identical runs");
    return fmt("checkpoint (%zu bytes) and log (%zu bytes) identical across runs", ck1.size(),
               csv1.size());
}

// --------------------------------------------------------------------------
// 6. No graph retention across iterations: live and peak node counts settle
//    to constants over a 50-iteration run.
// --------------------------------------------------------------------------
std::string check_memory_hygiene() {
    TrainingConfig cfg;
    cfg.n_meta = 50;
    cfg.m_teach = 2;
    cfg.inner_batch = 4;
    cfg.outer_batch = 8;
    cfg.latent_dim = 8;
    cfg.image_size = 8;
    cfg.channels = 1;
    cfg.num_classes = 2;
    cfg.eval_every = 1000000;
    cfg.precision = Precision::F32;
    cfg.seed = 5;
    auto train = synth_generate<float>(cfg.dataset(), 8, 3);
    LabeledImageSetT<float> no_test;  // keep every iteration structurally identical

    std::vector<int64_t> live, peak;
    IterationHookT<float> hook = [&](RunStateT<float>&, int64_t, float, float,
                                     const MetricsReport*) {
        live.push_back(live_node_count<float>());
        peak.push_back(peak_node_count<float>());
        reset_peak_node_count<float>();
    };
    auto st = init_run_state<float>(cfg);
    reset_peak_node_count<float>();
    run_training(st, train, no_test, "", hook);

    require(live.size() == 50, "expected 50 iterations");
    for (size_t i = 1; i < live.size(); ++i)
        require(live[i] == live[1],
                fmt("live node count drifted: %lld at iter 1 vs %lld at iter %zu",
                    (long long)live[1], (long long)live[i], i));
    for (size_t i = 2; i < peak.size(); ++i)
        require(peak[i] == peak[2],
                fmt("peak node count drifted: %lld at iter 2 vs %lld at iter %zu",
                    (long long)peak[2], (long long)peak[i], i));
    return fmt("live %lld, peak %lld nodes, flat across 50 iterations", (long long)live[1],
               (long long)peak[2]);
}

// --------------------------------------------------------------------------
// 7. With zero momentum, the schedule frozen, and no teaching steps, the
//    curriculum runner's student trajectory is the plain learner's.
// --------------------------------------------------------------------------
std::string check_baseline_equivalence() {
    TrainingConfig cfg;
    cfg.n_meta = 10;
    cfg.m_teach = 2;
    cfg.inner_batch = 4;
    cfg.outer_batch = 8;
    cfg.latent_dim = 8;
    cfg.image_size = 8;
    cfg.channels = 1;
    cfg.num_classes = 2;
    cfg.eval_every = 1000000;
    cfg.precision = Precision::F64;
    cfg.seed = 17;
    cfg.init_momentum = 0.0;
    cfg.adaptive_schedule = false;
    cfg.curriculum = false;
    auto train = synth_generate<double>(cfg.dataset(), 8, uint64_t(cfg.seed));
    LabeledImageSetT<double> no_test;

    // snapshot every parameter tensor after each step, for both runners
    std::vector<std::vector<double>> traj_a, traj_b;
    auto a = init_run_state<double>(cfg);
    IterationHookT<double> hook_a = [&](RunStateT<double>&, int64_t, double, double,
                                        const MetricsReport*) {
        std::vector<double> flat;
        for (auto* p : a.student.parameters())
            flat.insert(flat.end(), p->node->value.data.begin(), p->node->value.data.end());
        traj_a.push_back(std::move(flat));
    };
    run_training(a, train, no_test, "", hook_a);

    auto b = init_plain_state<double>(cfg);
    IterationHookT<double> hook_b = [&](RunStateT<double>&, int64_t, double, double,
                                        const MetricsReport*) {
        std::vector<double> flat;
        for (auto* p : b.student.parameters())
            flat.insert(flat.end(), p->node->value.data.begin(), p->node->value.data.end());
        traj_b.push_back(std::move(flat));
    };
    train_plain_learner(b, train, no_test, cfg.real_augment, "", hook_b);

    require(traj_a.size() == 10 && traj_b.size() == 10, "expected 10 recorded steps each");
    for (size_t i = 0; i < 10; ++i)
        require(traj_a[i] == traj_b[i], fmt("trajectories diverge at step %zu", i + 1));
    require(a.meta_losses == b.meta_losses, "loss histories differ");
    return "10-step student trajectories bitwise identical";
}

// --------------------------------------------------------------------------
// 8. Curriculum export round-trips through the on-disk image format.
// --------------------------------------------------------------------------
std::string check_export_roundtrip() {
    TrainingConfig cfg;
    cfg.latent_dim = 16;
    cfg.image_size = 16;
    cfg.channels = 3;
    cfg.num_classes = 4;
    cfg.seed = 9;
    auto trng = make_rng(uint64_t(cfg.seed), Stream::TeacherInit);
    TeacherGeneratorT<double> teacher;
    teacher.init(cfg.latent_dim, cfg.num_classes, cfg.image_size, cfg.channels, trng);

    const int64_t per_class = 6;
    const int64_t n = per_class * cfg.num_classes;
    LabeledImageSetT<double> out;
    out.images = TensorT<double>::zeros({n, cfg.channels, cfg.image_size, cfg.image_size});
    out.labels.resize(static_cast<size_t>(n));
    auto lrng = make_rng(uint64_t(cfg.seed), Stream::Export);
    GradModeGuard guard(false);
    const int64_t per = cfg.channels * cfg.image_size * cfg.image_size;
    for (int cls = 0; cls < cfg.num_classes; ++cls) {
        LatentBatchT<double> lb;
        lb.z = randn<double>({per_class, cfg.latent_dim}, lrng);
        lb.labels.assign(static_cast<size_t>(per_class), cls);
        auto imgs = teacher.forward(lb, false);
        for (int64_t i = 0; i < per_class; ++i) {
            const int64_t row = cls * per_class + i;
            std::copy_n(imgs->value.data.begin() + i * per, per,
                        out.images.data.begin() + row * per);
            out.labels[static_cast<size_t>(row)] = cls;
        }
    }

    TempDir dir("export");
    write_manifest_dir(dir.file("curriculum"), out, cfg.dataset());
    auto back = load_manifest_dir<double>(dir.file("curriculum"), cfg.dataset());
    require(back.size() == n, "reloaded set has the wrong size");
    require(back.labels == out.labels, "labels changed in the round trip");
    double worst = 0;
    for (size_t i = 0; i < out.images.data.size(); ++i)
        worst = std::max(worst, std::abs(back.images.data[i] - out.images.data[i]));
    require(worst <= 1.0 / 255.0, fmt("max pixel error %.6f exceeds 1/255", worst));

    // endpoint mapping survives the byte format exactly
    LabeledImageSetT<double> ends;
    ends.images = TensorT<double>::zeros({1, cfg.channels, cfg.image_size, cfg.image_size});
    ends.images.data.front() = -1.0;
    ends.images.data.back() = 1.0;
    ends.labels = {0};
    write_manifest_dir(dir.file("ends"), ends, cfg.dataset());
    auto eback = load_manifest_dir<double>(dir.file("ends"), cfg.dataset());
    require(eback.images.data.front() == -1.0 && eback.images.data.back() == 1.0,
            "endpoint pixels -1/+1 did not map exactly");
    return fmt("max round-trip error %.6f (<= 1/255), endpoints exact", worst);
}

}  // namespace

int main() {
    criterion("meta-gradients match finite differences", check_meta_gradients);
    criterion("unrolled composition gradient is 0.56", check_unrolled_composition);
    criterion("arm ordering on the synthetic task", check_arm_ordering);
    criterion("metric oracles", check_metric_oracles);
    criterion("bitwise deterministic runs", check_determinism);
    criterion("constant graph footprint", check_memory_hygiene);
    criterion("baseline equivalence at zero momentum", check_baseline_equivalence);
    criterion("curriculum export round trip", check_export_roundtrip);
    if (g_failures) {
        std::printf("%d criteria failed\n", g_failures);
        return 1;
    }
    std::printf("all criteria satisfied\n");
    return 0;
}
