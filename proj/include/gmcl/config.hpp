#pragma once

#include <cstdint>
#include <string>

#include "gmcl/data.hpp"

namespace gmcl {

enum class LatentStrategy { FixedAcrossTraining, ResampledPerMetaIteration, ResampledPerStep };
enum class AugmentKind { None, CropFlip, Traditional };
enum class Precision { F32, F64 };

/// Flat run configuration. Defaults reproduce the reference hyperparameters;
/// parse/serialize round-trip exactly.
struct TrainingConfig {
    int64_t n_meta = 2000;    // outer iterations
    int64_t m_teach = 16;     // unrolled teaching steps per outer iteration
    double lr_teacher = 0.01;  // Adam step size for the generator
    double lr_meta = 0.001;    // Adam step size for the schedule
    double init_lr = 0.02;
    double init_momentum = 0.5;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.9;
    double adam_eps = 1e-5;
    int64_t inner_batch = 64;
    int64_t outer_batch = 128;
    int64_t latent_dim = 128;
    LatentStrategy latent_strategy = LatentStrategy::FixedAcrossTraining;
    bool adaptive_schedule = true;
    bool curriculum = true;  // off: skip teaching steps entirely (ablation/debug)
    AugmentKind real_augment = AugmentKind::CropFlip;
    int64_t seed = 1;
    Precision precision = Precision::F32;
    int64_t eval_every = 50;
    bool bn_recompute_stats = false;
    int64_t image_size = 32;
    int64_t channels = 3;
    int64_t num_classes = 4;
    std::string class_names;  // comma-separated, optional

    DatasetSpec dataset() const;
    void validate() const;
    bool operator==(const TrainingConfig&) const = default;
};

/// `key = value` lines, `#` comments, unknown keys rejected. Errors carry the
/// line number. Missing keys keep their defaults.
TrainingConfig parse_config_text(const std::string& text, const std::string& origin = "config");
TrainingConfig parse_config_file(const std::string& path);
std::string serialize_config(const TrainingConfig& cfg);

const char* to_string(LatentStrategy s);
const char* to_string(AugmentKind a);
const char* to_string(Precision p);

}  // namespace gmcl
