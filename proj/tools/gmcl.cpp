#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <utility>

#include "CLI11.hpp"
#include "gmcl/gradcheck.hpp"
#include "gmcl/training.hpp"

namespace fs = std::filesystem;
using namespace gmcl;

namespace {

// wrong invocation rather than bad input files; exits 1 like a parse error
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config_path, out_dir = "run", checkpoint_path, data_dir, mode = "gmcl";
    std::string input_path, sabotage;
    int64_t seed = -1;  // negative: keep the config's seed
    int64_t train_per_class = 64, test_per_class = 128, per_class = 8, patch = 32;
    int64_t gradcheck_seed = 7;
};

void apply_env_precision(TrainingConfig& cfg) {
    const char* env = std::getenv("GMCL_PRECISION");
    if (!env) return;
    const std::string v = env;
    if (v == "f32")
        cfg.precision = Precision::F32;
    else if (v == "f64")
        cfg.precision = Precision::F64;
    else
        throw UsageError("GMCL_PRECISION must be 'f32' or 'f64', got '" + v + "'");
}

TrainingConfig make_config(const Options& o) {
    TrainingConfig cfg = o.config_path.empty() ? TrainingConfig{} : parse_config_file(o.config_path);
    if (o.seed >= 0) cfg.seed = o.seed;
    apply_env_precision(cfg);
    return cfg;
}

void apply_mode(TrainingConfig& cfg, const std::string& mode) {
    if (mode == "gmcl") {
        cfg.curriculum = true;
        cfg.adaptive_schedule = true;
    } else if (mode == "gmcl-fixed-schedule") {
        cfg.curriculum = true;
        cfg.adaptive_schedule = false;
    } else if (mode == "plain") {
        cfg.real_augment = AugmentKind::None;
    } else if (mode == "plain-aug") {
        cfg.real_augment = AugmentKind::CropFlip;
    } else if (mode == "plain-traditional") {
        cfg.real_augment = AugmentKind::Traditional;
    } else {
        throw ConfigError("unknown mode '" + mode + "'");
    }
}

bool is_plain_mode(const std::string& mode) { return mode.rfind("plain", 0) == 0; }

template <typename T>
std::pair<LabeledImageSetT<T>, LabeledImageSetT<T>> load_splits(const Options& o,
                                                                const TrainingConfig& cfg) {
    const DatasetSpec spec = cfg.dataset();
    LabeledImageSetT<T> train, test;
    if (o.data_dir.empty()) {
        train = synth_generate<T>(spec, o.train_per_class, uint64_t(cfg.seed));
        test = synth_generate<T>(spec, o.test_per_class, uint64_t(cfg.seed) + 1);
    } else if (fs::exists(o.data_dir + "/train-images.idx3-ubyte")) {
        train = load_idx_pair<T>(o.data_dir + "/train-images.idx3-ubyte",
                                 o.data_dir + "/train-labels.idx1-ubyte", spec);
        test = load_idx_pair<T>(o.data_dir + "/test-images.idx3-ubyte",
                                o.data_dir + "/test-labels.idx1-ubyte", spec);
    } else if (fs::exists(o.data_dir + "/train/labels.csv")) {
        train = load_manifest_dir<T>(o.data_dir + "/train", spec);
        test = load_manifest_dir<T>(o.data_dir + "/test", spec);
    } else {
        throw DataError("unrecognized layout in '" + o.data_dir +
                        "': expected train-images.idx3-ubyte/train-labels.idx1-ubyte/"
                        "test-images.idx3-ubyte/test-labels.idx1-ubyte, or train/labels.csv "
                        "and test/labels.csv manifest directories");
    }
    train.split = "train";
    test.split = "test";
    return {std::move(train), std::move(test)};
}

void print_report(const char* tag, const MetricsReport& rep) {
    std::printf("%s acc %.4f  auc %.4f  sens %.4f  spec %.4f\n", tag, rep.accuracy, rep.auc,
                rep.sensitivity, rep.specificity);
}

template <typename T>
int do_train(const Options& o, bool resuming) {
    RunStateT<T> state;
    if (resuming) {
        state = from_checkpoint<T>(read_checkpoint(o.checkpoint_path));
        std::printf("resuming at iteration %lld of %lld (%s)\n",
                    (long long)state.meta_iter, (long long)state.cfg.n_meta,
                    state.has_teacher ? "curriculum" : "plain");
    } else {
        TrainingConfig cfg = make_config(o);
        apply_mode(cfg, o.mode);
        state = is_plain_mode(o.mode) ? init_plain_state<T>(cfg) : init_run_state<T>(cfg);
    }
    auto [train, test] = load_splits<T>(o, state.cfg);

    IterationHookT<T> hook = [](RunStateT<T>& st, int64_t it, T teach, T meta,
                                const MetricsReport* rep) {
        if (!rep) return;
        std::printf("iter %lld/%lld  teach %.4f  meta %.4f  acc %.4f  auc %.4f\n",
                    (long long)(it + 1), (long long)st.cfg.n_meta, double(teach), double(meta),
                    rep->accuracy, rep->auc);
        std::fflush(stdout);
    };
    if (state.has_teacher)
        run_training(state, train, test, o.out_dir, hook);
    else
        train_plain_learner(state, train, test, state.cfg.real_augment, o.out_dir, hook);

    if (test.size() > 0) {
        if (state.cfg.bn_recompute_stats)
            recompute_norm_stats(state.student, train, state.cfg.outer_batch);
        print_report("final", evaluate(state.student, test, state.cfg.outer_batch));
    }
    std::printf("checkpoint: %s/checkpoint.gmcl\nmetrics:    %s/metrics.csv\n", o.out_dir.c_str(),
                o.out_dir.c_str());
    return 0;
}

template <typename T>
int do_eval(const Options& o, const TrainingConfig& cfg_from_ck) {
    auto state = from_checkpoint<T>(read_checkpoint(o.checkpoint_path));
    Options data_opts = o;
    auto [train, test] = load_splits<T>(data_opts, cfg_from_ck);
    if (test.size() == 0) throw DataError("eval: empty test split");
    if (state.cfg.bn_recompute_stats && train.size() > 0)
        recompute_norm_stats(state.student, train, state.cfg.outer_batch);
    print_report("eval", evaluate(state.student, test, state.cfg.outer_batch));
    return 0;
}

template <typename T>
int do_export(const Options& o, const TrainingConfig& cfg) {
    auto state = from_checkpoint<T>(read_checkpoint(o.checkpoint_path));
    if (!state.has_teacher)
        throw DataError("checkpoint '" + o.checkpoint_path + "' holds a plain learner; "
                        "there is no generator to export from");
    const DatasetSpec spec = cfg.dataset();
    const uint64_t seed = o.seed >= 0 ? uint64_t(o.seed) : uint64_t(cfg.seed);
    auto rng = make_rng(seed, Stream::Export);
    GradModeGuard guard(false);

    const int64_t per = spec.channels * spec.image_size * spec.image_size;
    LabeledImageSetT<T> out;
    out.images =
        TensorT<T>::zeros({spec.num_classes * o.per_class, spec.channels, spec.image_size,
                           spec.image_size});
    out.split = "export";
    for (int64_t k = 0; k < spec.num_classes; ++k) {
        LatentBatchT<T> lb;
        lb.z = randn<T>({o.per_class, cfg.latent_dim}, rng);
        lb.labels.assign(size_t(o.per_class), int(k));
        auto imgs = state.teacher.forward(lb, /*training=*/false);
        std::copy_n(imgs->value.data.begin(), o.per_class * per,
                    out.images.data.begin() + k * o.per_class * per);
        for (int64_t i = 0; i < o.per_class; ++i) out.labels.push_back(int(k));
    }
    write_manifest_dir(o.out_dir, out, spec);
    std::printf("wrote %lld curriculum images to %s\n", (long long)out.size(), o.out_dir.c_str());
    return 0;
}

int do_gradcheck(const Options& o) {
    auto report = run_gradcheck(uint64_t(o.gradcheck_seed), o.sabotage);
    for (const auto& e : report.entries)
        std::printf("%-28s max rel err %.3e  tol %.0e  coords %3d  %s\n", e.name.c_str(),
                    e.max_rel, e.tol, e.checked, e.pass ? "pass" : "FAIL");
    if (!report.all_pass()) {
        const auto* w = report.worst();
        std::fprintf(stderr, "gradcheck failed; worst offender: %s (max rel err %.3e, tol %.0e)\n",
                     w->name.c_str(), w->max_rel, w->tol);
        return 4;
    }
    std::printf("gradcheck passed (%zu checks)\n", report.entries.size());
    return 0;
}

template <typename T>
int do_synth_data(const Options& o, const TrainingConfig& cfg) {
    const DatasetSpec spec = cfg.dataset();
    auto train = synth_generate<T>(spec, o.train_per_class, uint64_t(cfg.seed));
    auto test = synth_generate<T>(spec, o.test_per_class, uint64_t(cfg.seed) + 1);
    write_manifest_dir(o.out_dir + "/train", train, spec);
    write_manifest_dir(o.out_dir + "/test", test, spec);
    std::printf("wrote %lld train and %lld test images under %s\n", (long long)train.size(),
                (long long)test.size(), o.out_dir.c_str());
    return 0;
}

int do_patchify(const Options& o) {
    const io::RawImage img = io::read_pnm(o.input_path);
    auto tensor = TensorT<float>::zeros({img.channels, img.rows, img.cols});
    for (size_t i = 0; i < img.pixels.size(); ++i)
        tensor.data[i] = normalize_pixel<float>(img.pixels[i]);
    auto patches = patchify(tensor, o.patch);
    fs::create_directories(o.out_dir);
    const char* ext = img.channels == 1 ? ".pgm" : ".ppm";
    for (size_t i = 0; i < patches.size(); ++i) {
        io::RawImage p;
        p.channels = img.channels;
        p.rows = p.cols = o.patch;
        p.pixels.resize(size_t(img.channels) * size_t(o.patch) * size_t(o.patch));
        for (size_t j = 0; j < p.pixels.size(); ++j)
            p.pixels[j] = quantize_pixel(patches[i].data[j]);
        io::write_pnm(o.out_dir + "/patch" + std::to_string(i) + ext, p);
    }
    std::printf("wrote %zu patches of %lldx%lld to %s\n", patches.size(), (long long)o.patch,
                (long long)o.patch, o.out_dir.c_str());
    return 0;
}

template <typename F>
int with_precision(Precision p, F&& fn) {
    return p == Precision::F64 ? fn.template operator()<double>()
                               : fn.template operator()<float>();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Generative curriculum training: a teacher network learns to emit synthetic "
                 "batches (and per-step optimizer settings) that make a student classifier "
                 "improve fastest on real data."};
    app.require_subcommand(1);
    Options o;

    auto add_data_flags = [&](CLI::App* cmd) {
        cmd->add_option("--data", o.data_dir,
                        "dataset directory (IDX pair or manifest layout); omit to use the "
                        "built-in synthetic set");
        cmd->add_option("--train-per-class", o.train_per_class,
                        "synthetic train images per class")->check(CLI::PositiveNumber);
        cmd->add_option("--test-per-class", o.test_per_class,
                        "synthetic test images per class")->check(CLI::PositiveNumber);
    };

    auto* train = app.add_subcommand("train", "run the bilevel training loop (or a baseline)");
    train->add_option("--config", o.config_path, "config file (key = value lines)");
    train->add_option("--out", o.out_dir, "output directory for checkpoint + metrics CSV");
    train->add_option("--checkpoint", o.checkpoint_path,
                      "resume from this checkpoint (configuration comes from it)");
    train->add_option("--seed", o.seed, "override the config seed");
    train->add_option("--mode", o.mode, "training variant")
        ->check(CLI::IsMember({"gmcl", "gmcl-fixed-schedule", "plain", "plain-aug",
                               "plain-traditional"}));
    add_data_flags(train);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
    eval->add_option("--checkpoint", o.checkpoint_path, "checkpoint to evaluate")->required();
    add_data_flags(eval);

    auto* exp = app.add_subcommand("export-curriculum",
                                   "render generator outputs per class as PGM/PPM files");
    exp->add_option("--checkpoint", o.checkpoint_path, "trained checkpoint")->required();
    exp->add_option("--out", o.out_dir, "output directory")->required();
    exp->add_option("--per-class", o.per_class, "images per class")->check(CLI::PositiveNumber);
    exp->add_option("--seed", o.seed, "latent seed (defaults to the checkpoint's)");

    auto* gc = app.add_subcommand("gradcheck",
                                  "finite-difference verification of gradients, including the "
                                  "unrolled meta-gradients");
    gc->add_option("--seed", o.gradcheck_seed, "probe seed");
    gc->add_option("--sabotage", o.sabotage,
                   "bias the named check's analytic value (negative control; must fail)");

    auto* synth = app.add_subcommand("synth-data", "materialize the synthetic dataset to disk");
    synth->add_option("--config", o.config_path, "config controlling size/channels/classes");
    synth->add_option("--out", o.out_dir, "output directory (train/ and test/ written inside)")
        ->required();
    synth->add_option("--seed", o.seed, "override the config seed");
    synth->add_option("--train-per-class", o.train_per_class, "train images per class")
        ->check(CLI::PositiveNumber);
    synth->add_option("--test-per-class", o.test_per_class, "test images per class")
        ->check(CLI::PositiveNumber);

    auto* pat = app.add_subcommand("patchify", "cut one PGM/PPM image into square patches");
    pat->add_option("--input", o.input_path, "source image (P5/P6)")->required();
    pat->add_option("--out", o.out_dir, "output directory")->required();
    pat->add_option("--patch", o.patch, "patch side length")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (train->parsed()) {
            const bool resuming = !o.checkpoint_path.empty();
            if (resuming && (!o.config_path.empty() || train->count("--mode") ||
                             train->count("--seed")))
                throw UsageError(
                    "--checkpoint resumes with the configuration stored in the checkpoint; "
                    "--config/--mode/--seed cannot be combined with it");
            Precision prec;
            if (resuming) {
                TrainingConfig cfg =
                    parse_config_text(read_checkpoint(o.checkpoint_path).config_text,
                                      "checkpoint config");
                apply_env_precision(cfg);
                prec = cfg.precision;
            } else {
                TrainingConfig cfg = make_config(o);
                apply_mode(cfg, o.mode);
                cfg.validate();
                prec = cfg.precision;
            }
            return with_precision(prec, [&]<typename T>() { return do_train<T>(o, resuming); });
        }
        if (eval->parsed()) {
            TrainingConfig cfg = parse_config_text(
                read_checkpoint(o.checkpoint_path).config_text, "checkpoint config");
            apply_env_precision(cfg);
            return with_precision(cfg.precision,
                                  [&]<typename T>() { return do_eval<T>(o, cfg); });
        }
        if (exp->parsed()) {
            TrainingConfig cfg = parse_config_text(
                read_checkpoint(o.checkpoint_path).config_text, "checkpoint config");
            apply_env_precision(cfg);
            return with_precision(cfg.precision,
                                  [&]<typename T>() { return do_export<T>(o, cfg); });
        }
        if (gc->parsed()) return do_gradcheck(o);
        if (synth->parsed()) {
            TrainingConfig cfg = make_config(o);
            return with_precision(cfg.precision,
                                  [&]<typename T>() { return do_synth_data<T>(o, cfg); });
        }
        if (pat->parsed()) return do_patchify(o);
        std::fprintf(stderr, "no subcommand\n");
        return 1;
    } catch (const UsageError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}
