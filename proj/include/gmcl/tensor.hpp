#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "gmcl/errors.hpp"

namespace gmcl {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

inline void check_shape_valid(const Shape& s) {
    for (int64_t d : s)
        if (d <= 0) throw DimensionError("non-positive dimension in shape " + shape_str(s));
}

/// Dense row-major n-d array of scalars. Rank 0 (empty shape) is a scalar.
template <typename T>
struct TensorT {
    Shape shape;
    std::vector<T> data;

    TensorT() = default;
    TensorT(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        check_shape_valid(shape);
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw DimensionError("shape " + shape_str(shape) + " does not match data length " +
                                 std::to_string(data.size()));
    }

    static TensorT zeros(Shape s) {
        check_shape_valid(s);
        std::vector<T> d(static_cast<size_t>(shape_numel(s)), T(0));
        return TensorT(std::move(s), std::move(d));
    }
    static TensorT full(Shape s, T v) {
        check_shape_valid(s);
        std::vector<T> d(static_cast<size_t>(shape_numel(s)), v);
        return TensorT(std::move(s), std::move(d));
    }
    static TensorT scalar(T v) { return TensorT(Shape{}, std::vector<T>{v}); }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }
    bool is_scalar() const { return data.size() == 1; }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    bool all_finite() const {
        for (T v : data)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    template <typename U>
    TensorT<U> cast() const {
        std::vector<U> d(data.size());
        for (size_t i = 0; i < data.size(); ++i) d[i] = static_cast<U>(data[i]);
        return TensorT<U>(shape, std::move(d));
    }
};

template <typename T>
bool operator==(const TensorT<T>& a, const TensorT<T>& b) {
    return a.shape == b.shape && a.data == b.data;
}

// ---------------------------------------------------------------------------
// Seeding. Every consumer of randomness gets its own stream derived from the
// run seed, so enabling or disabling one consumer never shifts another.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97f4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t stream) {
    return splitmix64(base + 0x9E3779B97f4A7C15ULL * (stream + 1));
}

// Named streams used across the codebase.
enum class Stream : uint64_t {
    TeacherInit = 1,
    StudentInit = 2,
    MetaInit = 3,
    Latent = 4,
    DataOrder = 5,
    Augment = 6,
    Synth = 7,
    Export = 8,
    GradCheck = 9,
};

inline Rng make_rng(uint64_t base_seed, Stream s) {
    return Rng(derive_seed(base_seed, static_cast<uint64_t>(s)));
}

/// Engine wrapper that counts raw draws, so a stream's exact position can be
/// stored in a snapshot and reproduced later via seed + discard.
struct CountedRng {
    Rng engine;
    uint64_t draws = 0;

    using result_type = Rng::result_type;
    static constexpr result_type min() { return Rng::min(); }
    static constexpr result_type max() { return Rng::max(); }
    result_type operator()() {
        ++draws;
        return engine();
    }
};

inline CountedRng make_counted_rng(uint64_t base_seed, Stream s) {
    return CountedRng{make_rng(base_seed, s), 0};
}

inline CountedRng restore_counted_rng(uint64_t base_seed, Stream s, uint64_t draws) {
    CountedRng r{make_rng(base_seed, s), draws};
    r.engine.discard(static_cast<unsigned long long>(draws));
    return r;
}

template <typename T, typename G = Rng>
TensorT<T> randn(Shape s, G& rng, T stddev = T(1), T mean = T(0)) {
    auto t = TensorT<T>::zeros(std::move(s));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (auto& v : t.data) v = mean + stddev * static_cast<T>(dist(rng));
    return t;
}

template <typename T, typename G = Rng>
TensorT<T> rand_uniform(Shape s, G& rng, T lo, T hi) {
    auto t = TensorT<T>::zeros(std::move(s));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& v : t.data) v = static_cast<T>(dist(rng));
    return t;
}

}  // namespace gmcl
