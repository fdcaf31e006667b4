#include "gmcl/config.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace gmcl {

const char* to_string(LatentStrategy s) {
    switch (s) {
        case LatentStrategy::FixedAcrossTraining: return "fixed_across_training";
        case LatentStrategy::ResampledPerMetaIteration: return "resampled_per_meta_iteration";
        case LatentStrategy::ResampledPerStep: return "resampled_per_step";
    }
    return "?";
}

const char* to_string(AugmentKind a) {
    switch (a) {
        case AugmentKind::None: return "none";
        case AugmentKind::CropFlip: return "crop_flip";
        case AugmentKind::Traditional: return "traditional";
    }
    return "?";
}

const char* to_string(Precision p) {
    return p == Precision::F32 ? "f32" : "f64";
}

DatasetSpec TrainingConfig::dataset() const {
    DatasetSpec spec;
    spec.image_size = image_size;
    spec.channels = channels;
    spec.num_classes = num_classes;
    if (!class_names.empty()) {
        std::stringstream ss(class_names);
        std::string part;
        while (std::getline(ss, part, ',')) spec.class_names.push_back(part);
    }
    return spec;
}

void TrainingConfig::validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
    if (n_meta < 1) fail("n_meta must be >= 1");
    if (m_teach < 1) fail("m_teach must be >= 1");
    if (lr_teacher < 0) fail("lr_teacher must be >= 0");
    if (lr_meta < 0) fail("lr_meta must be >= 0");
    if (init_lr <= 0) fail("init_lr must be > 0");
    if (init_momentum < 0 || init_momentum >= 1) fail("init_momentum must be in [0,1)");
    // the schedule parameterizes momentum through a sigmoid, which cannot
    // start at exactly zero
    if (adaptive_schedule && init_momentum == 0)
        fail("init_momentum must be in (0,1) when the schedule is adaptive");
    if (adam_beta1 < 0 || adam_beta1 >= 1) fail("adam_beta1 must be in [0,1)");
    if (adam_beta2 < 0 || adam_beta2 >= 1) fail("adam_beta2 must be in [0,1)");
    if (adam_eps <= 0) fail("adam_eps must be > 0");
    if (inner_batch < 2) fail("inner_batch must be >= 2 (batch statistics need it)");
    if (outer_batch < 2) fail("outer_batch must be >= 2 (batch statistics need it)");
    if (latent_dim < 1) fail("latent_dim must be >= 1");
    if (seed < 0) fail("seed must be >= 0");
    if (eval_every < 1) fail("eval_every must be >= 1");
    dataset().validate();
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

struct Field {
    std::function<void(TrainingConfig&, const std::string&)> set;
    std::function<std::string(const TrainingConfig&)> get;
};

int64_t parse_int(const std::string& v) {
    size_t used = 0;
    const int64_t r = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
}

double parse_double(const std::string& v) {
    size_t used = 0;
    const double r = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return r;
}

bool parse_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::invalid_argument(v);
}

LatentStrategy parse_strategy(const std::string& v) {
    if (v == "fixed_across_training") return LatentStrategy::FixedAcrossTraining;
    if (v == "resampled_per_meta_iteration") return LatentStrategy::ResampledPerMetaIteration;
    if (v == "resampled_per_step") return LatentStrategy::ResampledPerStep;
    throw std::invalid_argument(v);
}

AugmentKind parse_augment(const std::string& v) {
    if (v == "none") return AugmentKind::None;
    if (v == "crop_flip") return AugmentKind::CropFlip;
    if (v == "traditional") return AugmentKind::Traditional;
    throw std::invalid_argument(v);
}

Precision parse_precision(const std::string& v) {
    if (v == "f32") return Precision::F32;
    if (v == "f64") return Precision::F64;
    throw std::invalid_argument(v);
}

#define INT_FIELD(name)                                                      \
    {#name,                                                                  \
     {[](TrainingConfig& c, const std::string& v) { c.name = parse_int(v); }, \
      [](const TrainingConfig& c) { return std::to_string(c.name); }}}
#define DBL_FIELD(name)                                                         \
    {#name,                                                                     \
     {[](TrainingConfig& c, const std::string& v) { c.name = parse_double(v); }, \
      [](const TrainingConfig& c) { return fmt_double(c.name); }}}
#define BOOL_FIELD(name)                                                      \
    {#name,                                                                   \
     {[](TrainingConfig& c, const std::string& v) { c.name = parse_bool(v); }, \
      [](const TrainingConfig& c) { return std::string(c.name ? "true" : "false"); }}}

// Definition order is the canonical serialization order.
const std::vector<std::pair<std::string, Field>>& fields() {
    static const std::vector<std::pair<std::string, Field>> f = {
        INT_FIELD(n_meta),
        INT_FIELD(m_teach),
        DBL_FIELD(lr_teacher),
        DBL_FIELD(lr_meta),
        DBL_FIELD(init_lr),
        DBL_FIELD(init_momentum),
        DBL_FIELD(adam_beta1),
        DBL_FIELD(adam_beta2),
        DBL_FIELD(adam_eps),
        INT_FIELD(inner_batch),
        INT_FIELD(outer_batch),
        INT_FIELD(latent_dim),
        {"latent_strategy",
         {[](TrainingConfig& c, const std::string& v) { c.latent_strategy = parse_strategy(v); },
          [](const TrainingConfig& c) { return std::string(to_string(c.latent_strategy)); }}},
        BOOL_FIELD(adaptive_schedule),
        BOOL_FIELD(curriculum),
        {"real_augment",
         {[](TrainingConfig& c, const std::string& v) { c.real_augment = parse_augment(v); },
          [](const TrainingConfig& c) { return std::string(to_string(c.real_augment)); }}},
        INT_FIELD(seed),
        {"precision",
         {[](TrainingConfig& c, const std::string& v) { c.precision = parse_precision(v); },
          [](const TrainingConfig& c) { return std::string(to_string(c.precision)); }}},
        INT_FIELD(eval_every),
        BOOL_FIELD(bn_recompute_stats),
        INT_FIELD(image_size),
        INT_FIELD(channels),
        INT_FIELD(num_classes),
        {"class_names",
         {[](TrainingConfig& c, const std::string& v) { c.class_names = v; },
          [](const TrainingConfig& c) { return c.class_names; }}},
    };
    return f;
}

#undef INT_FIELD
#undef DBL_FIELD
#undef BOOL_FIELD

}  // namespace

TrainingConfig parse_config_text(const std::string& text, const std::string& origin) {
    TrainingConfig cfg;
    std::stringstream ss(text);
    std::string line;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected `key = value`");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const auto& fs = fields();
        auto it = std::find_if(fs.begin(), fs.end(), [&](const auto& p) { return p.first == key; });
        if (it == fs.end())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": unknown key '" + key +
                              "'");
        try {
            it->second.set(cfg, value);
        } catch (const std::exception&) {
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": unparsable value '" +
                              value + "' for key '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

TrainingConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::stringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str(), path);
}

std::string serialize_config(const TrainingConfig& cfg) {
    std::string out;
    for (const auto& [name, field] : fields()) {
        out += name;
        out += " = ";
        out += field.get(cfg);
        out += "\n";
    }
    return out;
}

}  // namespace gmcl
