#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "gmcl/imageio.hpp"
#include "gmcl/tensor.hpp"

namespace gmcl {

struct DatasetSpec {
    int64_t image_size = 32;  // side length, divisible by 4
    int64_t channels = 3;
    int64_t num_classes = 4;
    std::vector<std::string> class_names;

    void validate() const {
        if (image_size < 4 || image_size % 4 != 0)
            throw ConfigError("dataset: image_size " + std::to_string(image_size) +
                              " must be a positive multiple of 4");
        if (channels < 1) throw ConfigError("dataset: channels must be >= 1");
        if (num_classes < 2) throw ConfigError("dataset: num_classes must be >= 2");
        if (!class_names.empty() && int64_t(class_names.size()) != num_classes)
            throw ConfigError("dataset: " + std::to_string(class_names.size()) +
                              " class names for " + std::to_string(num_classes) + " classes");
    }
};

/// Images live in [-1,1]; labels in [0, num_classes).
template <typename T>
struct LabeledImageSetT {
    TensorT<T> images{Shape{}, {T(0)}};  // [n, channels, H, H]
    std::vector<int> labels;
    std::string split = "train";

    int64_t size() const { return labels.empty() ? 0 : images.shape[0]; }
};

// pixel byte -> [-1, 1]; 0 -> -1 and 255 -> +1 exactly
template <typename T>
T normalize_pixel(uint8_t b) {
    return (T(b) - T(127.5)) / T(127.5);
}

// [-1, 1] -> byte; -1 -> 0 and +1 -> 255 exactly, clamped in between
template <typename T>
uint8_t quantize_pixel(T v) {
    const T scaled = (v + T(1)) * T(127.5);
    const long r = std::lround(double(scaled));
    return uint8_t(r < 0 ? 0 : (r > 255 ? 255 : r));
}

namespace detail {
template <typename T>
void validate_set(const LabeledImageSetT<T>& s, const DatasetSpec& spec, const std::string& who) {
    const Shape want{int64_t(s.labels.size()), spec.channels, spec.image_size, spec.image_size};
    if (s.images.shape != want)
        throw DataError(who + ": images " + shape_str(s.images.shape) + " do not conform to " +
                        shape_str(want));
    for (size_t i = 0; i < s.labels.size(); ++i)
        if (s.labels[i] < 0 || s.labels[i] >= spec.num_classes)
            throw DataError(who + ": label " + std::to_string(s.labels[i]) + " out of range at " +
                            std::to_string(i));
}
}  // namespace detail

template <typename T>
LabeledImageSetT<T> load_idx_pair(const std::string& images_path, const std::string& labels_path,
                                  const DatasetSpec& spec) {
    spec.validate();
    if (spec.channels != 1)
        throw DataError(images_path + ": IDX images are single-channel but the dataset expects " +
                        std::to_string(spec.channels));
    auto raw = io::read_idx_images(images_path);
    auto labels = io::read_idx_labels(labels_path);
    if (raw.count != int64_t(labels.size()))
        throw DataError(images_path + ": " + std::to_string(raw.count) + " images but " +
                        std::to_string(labels.size()) + " labels in " + labels_path);
    if (raw.rows != spec.image_size || raw.cols != spec.image_size)
        throw DataError(images_path + ": " + std::to_string(raw.rows) + "x" +
                        std::to_string(raw.cols) + " images, dataset expects " +
                        std::to_string(spec.image_size) + "x" + std::to_string(spec.image_size));
    if (raw.count < 1) throw DataError(images_path + ": empty image set");

    LabeledImageSetT<T> out;
    out.images = TensorT<T>::zeros({raw.count, 1, raw.rows, raw.cols});
    for (int64_t i = 0; i < int64_t(raw.pixels.size()); ++i)
        out.images.data[i] = normalize_pixel<T>(raw.pixels[i]);
    out.labels.resize(labels.size());
    for (size_t i = 0; i < labels.size(); ++i) out.labels[i] = int(labels[i]);
    detail::validate_set(out, spec, images_path);
    return out;
}

/// Directory with labels.csv (`filename,label_index` per line) plus P5/P6
/// image files. Entries load in manifest order.
template <typename T>
LabeledImageSetT<T> load_manifest_dir(const std::string& dir, const DatasetSpec& spec) {
    spec.validate();
    const std::string manifest = dir + "/labels.csv";
    std::ifstream f(manifest);
    if (!f) throw DataError("cannot open " + manifest);

    std::vector<std::pair<std::string, int>> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos)
            throw DataError(manifest + ":" + std::to_string(lineno) +
                            ": expected `filename,label`");
        const std::string fname = line.substr(0, comma);
        int label = -1;
        try {
            size_t used = 0;
            label = std::stoi(line.substr(comma + 1), &used);
        } catch (const std::exception&) {
            throw DataError(manifest + ":" + std::to_string(lineno) + ": unparsable label '" +
                            line.substr(comma + 1) + "'");
        }
        if (label < 0 || label >= spec.num_classes)
            throw DataError(manifest + ":" + std::to_string(lineno) + ": label " +
                            std::to_string(label) + " out of range [0," +
                            std::to_string(spec.num_classes) + ")");
        entries.emplace_back(fname, label);
    }
    if (entries.empty()) throw DataError(manifest + ": no entries");

    LabeledImageSetT<T> out;
    const int64_t n = int64_t(entries.size());
    out.images = TensorT<T>::zeros({n, spec.channels, spec.image_size, spec.image_size});
    out.labels.resize(entries.size());
    const int64_t per = spec.channels * spec.image_size * spec.image_size;
    for (int64_t i = 0; i < n; ++i) {
        const auto img = io::read_pnm(dir + "/" + entries[i].first);
        if (img.channels != spec.channels || img.rows != spec.image_size ||
            img.cols != spec.image_size)
            throw DataError(dir + "/" + entries[i].first + ": got " +
                            std::to_string(img.channels) + "x" + std::to_string(img.rows) + "x" +
                            std::to_string(img.cols) + ", dataset expects " +
                            std::to_string(spec.channels) + "x" + std::to_string(spec.image_size) +
                            "x" + std::to_string(spec.image_size));
        for (int64_t p = 0; p < per; ++p)
            out.images.data[i * per + p] = normalize_pixel<T>(img.pixels[p]);
        out.labels[i] = entries[i].second;
    }
    detail::validate_set(out, spec, dir);
    return out;
}

/// Writes a set as a manifest directory (the inverse of load_manifest_dir).
template <typename T>
void write_manifest_dir(const std::string& dir, const LabeledImageSetT<T>& set,
                        const DatasetSpec& spec) {
    if (spec.channels != 1 && spec.channels != 3)
        throw DataError(dir + ": can only export 1- or 3-channel sets");
    std::filesystem::create_directories(dir);
    std::ofstream manifest(dir + "/labels.csv", std::ios::trunc);
    if (!manifest) throw DataError("cannot open " + dir + "/labels.csv for writing");
    const char* ext = spec.channels == 1 ? ".pgm" : ".ppm";
    const int64_t per = spec.channels * spec.image_size * spec.image_size;
    std::vector<int64_t> class_counter(size_t(spec.num_classes), 0);
    for (int64_t i = 0; i < set.size(); ++i) {
        const int k = set.labels[i];
        io::RawImage img;
        img.channels = spec.channels;
        img.rows = img.cols = spec.image_size;
        img.pixels.resize(size_t(per));
        for (int64_t p = 0; p < per; ++p)
            img.pixels[p] = quantize_pixel(set.images.data[i * per + p]);
        const std::string name =
            "class" + std::to_string(k) + "_" + std::to_string(class_counter[k]++) + ext;
        io::write_pnm(dir + "/" + name, img);
        manifest << name << "," << k << "\n";
    }
    if (!manifest) throw DataError("short write to " + dir + "/labels.csv");
}

/// Class-conditional textured images: each class pairs a distinct
/// frequency/orientation grating with a per-channel sign signature, plus
/// Gaussian noise (sigma 0.15). Deterministic under seed.
template <typename T>
LabeledImageSetT<T> synth_generate(const DatasetSpec& spec, int64_t n_per_class, uint64_t seed) {
    spec.validate();
    if (n_per_class < 1) throw ValueError("synth_generate: need n >= 1 per class");
    auto rng = make_rng(seed, Stream::Synth);
    const int64_t k = spec.num_classes, h = spec.image_size, c = spec.channels;
    const int64_t n = k * n_per_class;
    const T sigma = T(0.15), dc_amp = T(0.5), grating_amp = T(0.5);

    // 3-channel sign signatures: any two of the first four differ in exactly
    // two channels. Wider class counts cycle through the patterns and rely on
    // the gratings to stay distinct.
    static const int codes[4][3] = {{1, 1, 1}, {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}};

    LabeledImageSetT<T> out;
    out.images = TensorT<T>::zeros({n, c, h, h});
    out.labels.resize(size_t(n));
    std::normal_distribution<double> gauss(0.0, double(sigma));
    std::uniform_real_distribution<double> phase(-0.6, 0.6);
    const double tau = 2.0 * std::numbers::pi;

    int64_t idx = 0;
    for (int64_t cls = 0; cls < k; ++cls) {
        const double freq = 2.0 + double(cls % 5);
        const double theta = tau * (double(cls) * 0.382 + 0.0625);  // golden-ratio spacing
        const double dx = std::cos(theta) * freq / double(h);
        const double dy = std::sin(theta) * freq / double(h);
        for (int64_t i = 0; i < n_per_class; ++i, ++idx) {
            out.labels[size_t(idx)] = int(cls);
            const double jitter = phase(rng);
            T* img = out.images.data.data() + idx * c * h * h;
            for (int64_t ch = 0; ch < c; ++ch) {
                const T sign = c >= 2 ? T(codes[cls % 4][ch % 3])
                                      : T(1);  // single channel: separate by offset below
                const T offset = c >= 2 ? dc_amp * sign
                                        : T(-0.6) + T(1.2) * T(cls) / T(std::max<int64_t>(k - 1, 1));
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t x = 0; x < h; ++x) {
                        const double g =
                            std::cos(tau * (dx * double(x) + dy * double(y)) + jitter);
                        double v = double(offset) + double(sign * grating_amp) * g + gauss(rng);
                        v = std::min(1.0, std::max(-1.0, v));
                        img[(ch * h + y) * h + x] = T(v);
                    }
            }
        }
    }
    return out;
}

/// Reflect-pad by `pad`, crop back to the original size at a random offset,
/// then flip horizontally with probability 1/2. Labels are untouched.
template <typename T, typename G = Rng>
TensorT<T> augment_crop_flip(const TensorT<T>& batch, int64_t pad, G& rng) {
    if (batch.rank() != 4) throw DimensionError("augment_crop_flip: need [n,c,h,w]");
    const int64_t n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
    if (pad < 0 || pad >= h || pad >= w)
        throw ValueError("augment_crop_flip: pad " + std::to_string(pad) + " out of range");
    auto reflect = [](int64_t t, int64_t size) {
        if (t < 0) return -t;
        if (t >= size) return 2 * size - 2 - t;
        return t;
    };
    TensorT<T> out = batch;
    for (int64_t i = 0; i < n; ++i) {
        const int64_t oy = int64_t(rng() % uint64_t(2 * pad + 1));
        const int64_t ox = int64_t(rng() % uint64_t(2 * pad + 1));
        const bool flip = (rng() % 2) == 1;
        for (int64_t ch = 0; ch < c; ++ch) {
            const T* src = batch.data.data() + (i * c + ch) * h * w;
            T* dst = out.data.data() + (i * c + ch) * h * w;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    const int64_t sy = reflect(y + oy - pad, h);
                    int64_t sx = reflect(x + ox - pad, w);
                    if (flip) sx = w - 1 - sx;
                    dst[y * w + x] = src[sy * w + sx];
                }
        }
    }
    return out;
}

/// Rotation from {0,90,180,270} degrees, independent horizontal/vertical
/// flips, then per-channel contrast scale U[0.8,1.2] and brightness shift
/// U[-0.1,0.1], clamped back to [-1,1].
template <typename T, typename G = Rng>
TensorT<T> augment_traditional(const TensorT<T>& batch, G& rng) {
    if (batch.rank() != 4) throw DimensionError("augment_traditional: need [n,c,h,w]");
    const int64_t n = batch.shape[0], c = batch.shape[1], h = batch.shape[2], w = batch.shape[3];
    if (h != w) throw DimensionError("augment_traditional: quarter-turns need square images");
    std::uniform_real_distribution<double> scale_d(0.8, 1.2), shift_d(-0.1, 0.1);
    TensorT<T> out = batch;
    for (int64_t i = 0; i < n; ++i) {
        const int rot = int(rng() % 4);
        const bool hflip = (rng() % 2) == 1;
        const bool vflip = (rng() % 2) == 1;
        for (int64_t ch = 0; ch < c; ++ch) {
            const T scale = T(scale_d(rng));
            const T shift = T(shift_d(rng));
            const T* src = batch.data.data() + (i * c + ch) * h * w;
            T* dst = out.data.data() + (i * c + ch) * h * w;
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    int64_t sy = y, sx = x;
                    if (hflip) sx = w - 1 - sx;
                    if (vflip) sy = h - 1 - sy;
                    // inverse quarter-turn source lookup
                    int64_t ry = sy, rx = sx;
                    switch (rot) {
                        case 1: ry = sx; rx = h - 1 - sy; break;          // 90 cw
                        case 2: ry = h - 1 - sy; rx = w - 1 - sx; break;  // 180
                        case 3: ry = w - 1 - sx; rx = sy; break;          // 270 cw
                        default: break;
                    }
                    T v = src[ry * w + rx] * scale + shift;
                    dst[y * w + x] = std::min(T(1), std::max(T(-1), v));
                }
        }
    }
    return out;
}

/// Non-overlapping tiles in row-major order; remainder rows/columns dropped.
template <typename T>
std::vector<TensorT<T>> patchify(const TensorT<T>& image, int64_t patch) {
    if (image.rank() != 3) throw DimensionError("patchify: need [c,h,w]");
    if (patch < 1) throw ValueError("patchify: patch size must be positive");
    const int64_t c = image.shape[0], h = image.shape[1], w = image.shape[2];
    if (h < patch || w < patch)
        throw ValueError("patchify: image " + shape_str(image.shape) +
                         " smaller than patch size " + std::to_string(patch));
    std::vector<TensorT<T>> out;
    for (int64_t by = 0; by + patch <= h; by += patch)
        for (int64_t bx = 0; bx + patch <= w; bx += patch) {
            auto tile = TensorT<T>::zeros({c, patch, patch});
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t y = 0; y < patch; ++y)
                    for (int64_t x = 0; x < patch; ++x)
                        tile.data[(ch * patch + y) * patch + x] =
                            image.data[(ch * h + by + y) * w + bx + x];
            out.push_back(std::move(tile));
        }
    return out;
}

/// Uniform batch without replacement (partial Fisher-Yates over an index
/// vector). Deterministic in the rng state.
template <typename T, typename G = Rng>
std::pair<TensorT<T>, std::vector<int>> sample_batch(const LabeledImageSetT<T>& set,
                                                     int64_t batch, G& rng) {
    const int64_t n = set.size();
    if (n < batch)
        throw ConfigError("dataset of " + std::to_string(n) + " images is smaller than batch " +
                          std::to_string(batch));
    std::vector<int64_t> idx(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) idx[size_t(i)] = i;
    for (int64_t i = 0; i < batch; ++i) {
        const int64_t j = i + int64_t(rng() % uint64_t(n - i));
        std::swap(idx[size_t(i)], idx[size_t(j)]);
    }
    const int64_t per = set.images.numel() / n;
    auto images = TensorT<T>::zeros({batch, set.images.shape[1], set.images.shape[2],
                                     set.images.shape[3]});
    std::vector<int> labels(static_cast<size_t>(batch));
    for (int64_t i = 0; i < batch; ++i) {
        std::copy_n(set.images.data.begin() + idx[size_t(i)] * per, per,
                    images.data.begin() + i * per);
        labels[size_t(i)] = set.labels[size_t(idx[size_t(i)])];
    }
    return {std::move(images), std::move(labels)};
}

}  // namespace gmcl
