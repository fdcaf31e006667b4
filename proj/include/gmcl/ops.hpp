#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "gmcl/autodiff.hpp"

// Differentiable tensor operations. Every backward rule is written in terms
// of the operations in this file, so gradients produced in graph-building
// mode can be differentiated again (needed for gradients through an
// optimizer update).

namespace gmcl {
namespace ops {

namespace detail {

template <typename T>
void matmul_kernel(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
TensorT<T> transpose_value(const TensorT<T>& x) {
    const int64_t m = x.shape[0], n = x.shape[1];
    auto out = TensorT<T>::zeros({n, m});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data[j * m + i] = x.data[i * n + j];
    return out;
}

struct ConvGeom {
    int64_t batch, cin, h, w;
    int64_t k, stride, pad;
    int64_t oh, ow;
};

inline ConvGeom conv_geom(const Shape& xs, int64_t k, int64_t stride, int64_t pad) {
    ConvGeom g{xs[0], xs[1], xs[2], xs[3], k, stride, pad, 0, 0};
    const int64_t eh = g.h + 2 * pad - k, ew = g.w + 2 * pad - k;
    if (eh < 0 || ew < 0)
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " with padding " +
                             std::to_string(pad) + " exceeds input " + shape_str(xs));
    g.oh = eh / stride + 1;
    g.ow = ew / stride + 1;
    if (g.oh < 1 || g.ow < 1)
        throw DimensionError("conv2d: non-positive output size for input " + shape_str(xs));
    return g;
}

// Patch extraction: rows index (batch, oy, ox), columns index (cin, ky, kx).
template <typename T>
TensorT<T> im2col_value(const TensorT<T>& x, const ConvGeom& g) {
    auto out = TensorT<T>::zeros({g.batch * g.oh * g.ow, g.cin * g.k * g.k});
    const int64_t cols = g.cin * g.k * g.k;
    int64_t row = 0;
    for (int64_t b = 0; b < g.batch; ++b) {
        const T* img = x.data.data() + b * g.cin * g.h * g.w;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
            for (int64_t ox = 0; ox < g.ow; ++ox, ++row) {
                T* dst = out.data.data() + row * cols;
                for (int64_t c = 0; c < g.cin; ++c) {
                    const T* chan = img + c * g.h * g.w;
                    for (int64_t ky = 0; ky < g.k; ++ky) {
                        const int64_t y = oy * g.stride + ky - g.pad;
                        for (int64_t kx = 0; kx < g.k; ++kx) {
                            const int64_t xx = ox * g.stride + kx - g.pad;
                            *dst++ = (y >= 0 && y < g.h && xx >= 0 && xx < g.w)
                                         ? chan[y * g.w + xx]
                                         : T(0);
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
TensorT<T> col2im_value(const TensorT<T>& cols, const ConvGeom& g) {
    auto out = TensorT<T>::zeros({g.batch, g.cin, g.h, g.w});
    const int64_t ncols = g.cin * g.k * g.k;
    int64_t row = 0;
    for (int64_t b = 0; b < g.batch; ++b) {
        T* img = out.data.data() + b * g.cin * g.h * g.w;
        for (int64_t oy = 0; oy < g.oh; ++oy) {
            for (int64_t ox = 0; ox < g.ow; ++ox, ++row) {
                const T* src = cols.data.data() + row * ncols;
                for (int64_t c = 0; c < g.cin; ++c) {
                    T* chan = img + c * g.h * g.w;
                    for (int64_t ky = 0; ky < g.k; ++ky) {
                        const int64_t y = oy * g.stride + ky - g.pad;
                        for (int64_t kx = 0; kx < g.k; ++kx, ++src) {
                            const int64_t xx = ox * g.stride + kx - g.pad;
                            if (y >= 0 && y < g.h && xx >= 0 && xx < g.w)
                                chan[y * g.w + xx] += *src;
                        }
                    }
                }
            }
        }
    }
    return out;
}

template <typename T>
TensorT<T> permute_value(const TensorT<T>& x, const std::vector<int>& perm) {
    const size_t r = x.rank();
    Shape os(r);
    for (size_t i = 0; i < r; ++i) os[i] = x.shape[perm[i]];
    auto out = TensorT<T>::zeros(os);
    std::vector<int64_t> xstride(r, 1);
    for (size_t i = r - 1; i > 0; --i) xstride[i - 1] = xstride[i] * x.shape[i];
    std::vector<int64_t> coord(r, 0);
    for (int64_t idx = 0; idx < out.numel(); ++idx) {
        int64_t src = 0;
        for (size_t i = 0; i < r; ++i) src += coord[i] * xstride[perm[i]];
        out.data[idx] = x.data[src];
        for (size_t i = r; i-- > 0;) {
            if (++coord[i] < os[i]) break;
            coord[i] = 0;
        }
    }
    return out;
}

inline std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    return inv;
}

}  // namespace detail

// Forward declarations: backward rules freely reference sibling ops, and
// unqualified lookup inside the templates does not see later declarations.
template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b);
template <typename T>
NodePtr<T> sub(const NodePtr<T>& a, const NodePtr<T>& b);
template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b);
template <typename T>
NodePtr<T> neg(const NodePtr<T>& a);
template <typename T>
NodePtr<T> scale(const NodePtr<T>& a, T c);
template <typename T>
NodePtr<T> add_const(const NodePtr<T>& a, T c);
template <typename T>
NodePtr<T> sum_all(const NodePtr<T>& a);
template <typename T>
NodePtr<T> full_broadcast(const NodePtr<T>& s, Shape shape);
template <typename T>
NodePtr<T> reshape(const NodePtr<T>& a, Shape shape);
template <typename T>
NodePtr<T> permute(const NodePtr<T>& a, std::vector<int> perm);
template <typename T>
NodePtr<T> transpose(const NodePtr<T>& a);
template <typename T>
NodePtr<T> matmul(const NodePtr<T>& a, const NodePtr<T>& b);
template <typename T>
NodePtr<T> channel_sum(const NodePtr<T>& a);
template <typename T>
NodePtr<T> channel_broadcast(const NodePtr<T>& v, Shape target);
template <typename T>
NodePtr<T> row_sum(const NodePtr<T>& a);
template <typename T>
NodePtr<T> row_broadcast(const NodePtr<T>& v, int64_t n);
template <typename T>
NodePtr<T> spatial_sum(const NodePtr<T>& a);
template <typename T>
NodePtr<T> spatial_broadcast(const NodePtr<T>& v, int64_t h, int64_t w);
template <typename T>
NodePtr<T> exp_op(const NodePtr<T>& a);
template <typename T>
NodePtr<T> log_op(const NodePtr<T>& a);
template <typename T>
NodePtr<T> pow_const(const NodePtr<T>& a, T p);
template <typename T>
NodePtr<T> leaky_relu(const NodePtr<T>& a, T slope);
template <typename T>
NodePtr<T> tanh_op(const NodePtr<T>& a);
template <typename T>
NodePtr<T> sigmoid(const NodePtr<T>& a);
template <typename T>
NodePtr<T> pick(const NodePtr<T>& a, int64_t i);
template <typename T>
NodePtr<T> scatter_at(const NodePtr<T>& s, int64_t n, int64_t i);
template <typename T>
NodePtr<T> upsample_nearest2x(const NodePtr<T>& a);
template <typename T>
NodePtr<T> sum_pool2x(const NodePtr<T>& a);
template <typename T>
NodePtr<T> im2col(const NodePtr<T>& a, int64_t k, int64_t stride, int64_t pad);
template <typename T>
NodePtr<T> col2im(const NodePtr<T>& cols, const detail::ConvGeom& g);

// ---------------------------------------------------------------------------
// Elementwise binary ops. Same shapes, or either side a scalar.
// ---------------------------------------------------------------------------

namespace detail {

template <typename T, typename F>
TensorT<T> ew_binary_value(const TensorT<T>& a, const TensorT<T>& b, F f, const char* opname) {
    if (a.same_shape(b)) {
        TensorT<T> out = a;
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(a.data[i], b.data[i]);
        return out;
    }
    if (b.is_scalar()) {
        TensorT<T> out = a;
        const T bv = b.data[0];
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(a.data[i], bv);
        return out;
    }
    if (a.is_scalar()) {
        TensorT<T> out = b;
        const T av = a.data[0];
        for (int64_t i = 0; i < out.numel(); ++i) out.data[i] = f(av, b.data[i]);
        return out;
    }
    throw DimensionError(std::string(opname) + ": incompatible shapes " + shape_str(a.shape) +
                         " and " + shape_str(b.shape));
}

// Reduce a gradient back to the shape of a (possibly scalar-broadcast) input.
template <typename T>
NodePtr<T> reduce_to(const NodePtr<T>& g, const Shape& shape) {
    if (g->value.shape == shape) return g;
    if (g->value.numel() == shape_numel(shape)) return reshape(g, shape);
    return reshape(sum_all(g), shape);
}

}  // namespace detail

template <typename T>
NodePtr<T> add(const NodePtr<T>& a, const NodePtr<T>& b) {
    auto v = detail::ew_binary_value(a->value, b->value, [](T x, T y) { return x + y; }, "add");
    Shape as = a->value.shape, bs = b->value.shape;
    return make_op_node<T>(std::move(v), {a, b},
                           [as, bs](const NodePtr<T>& g, const std::vector<char>& needed) {
                               std::vector<NodePtr<T>> out(2);
                               if (needed[0]) out[0] = detail::reduce_to(g, as);
                               if (needed[1]) out[1] = detail::reduce_to(g, bs);
                               return out;
                           });
}

template <typename T>
NodePtr<T> sub(const NodePtr<T>& a, const NodePtr<T>& b) {
    auto v = detail::ew_binary_value(a->value, b->value, [](T x, T y) { return x - y; }, "sub");
    Shape as = a->value.shape, bs = b->value.shape;
    return make_op_node<T>(std::move(v), {a, b},
                           [as, bs](const NodePtr<T>& g, const std::vector<char>& needed) {
                               std::vector<NodePtr<T>> out(2);
                               if (needed[0]) out[0] = detail::reduce_to(g, as);
                               if (needed[1]) out[1] = detail::reduce_to(neg(g), bs);
                               return out;
                           });
}

template <typename T>
NodePtr<T> mul(const NodePtr<T>& a, const NodePtr<T>& b) {
    auto v = detail::ew_binary_value(a->value, b->value, [](T x, T y) { return x * y; }, "mul");
    return make_op_node<T>(std::move(v), {a, b},
                           [a, b](const NodePtr<T>& g, const std::vector<char>& needed) {
                               std::vector<NodePtr<T>> out(2);
                               if (needed[0]) out[0] = detail::reduce_to(mul(g, b), a->value.shape);
                               if (needed[1]) out[1] = detail::reduce_to(mul(g, a), b->value.shape);
                               return out;
                           });
}

template <typename T>
NodePtr<T> neg(const NodePtr<T>& a) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x = -x;
    return make_op_node<T>(std::move(v), {a},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{neg(g)};
                           });
}

/// Multiply by a plain (non-differentiable) constant.
template <typename T>
NodePtr<T> scale(const NodePtr<T>& a, T c) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x *= c;
    return make_op_node<T>(std::move(v), {a},
                           [c](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{scale(g, c)};
                           });
}

template <typename T>
NodePtr<T> add_const(const NodePtr<T>& a, T c) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x += c;
    return make_op_node<T>(std::move(v), {a},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{g};
                           });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> reshape(const NodePtr<T>& a, Shape shape) {
    if (shape_numel(shape) != a->value.numel())
        throw DimensionError("reshape: cannot view " + shape_str(a->value.shape) + " as " +
                             shape_str(shape));
    TensorT<T> v(shape, a->value.data);
    Shape orig = a->value.shape;
    return make_op_node<T>(std::move(v), {a},
                           [orig](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{reshape(g, orig)};
                           });
}

template <typename T>
NodePtr<T> permute(const NodePtr<T>& a, std::vector<int> perm) {
    auto v = detail::permute_value(a->value, perm);
    auto inv = detail::inverse_perm(perm);
    return make_op_node<T>(std::move(v), {a},
                           [inv](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{permute(g, inv)};
                           });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> transpose(const NodePtr<T>& a) {
    if (a->value.rank() != 2) throw DimensionError("transpose: need rank 2, got " + shape_str(a->value.shape));
    auto v = detail::transpose_value(a->value);
    return make_op_node<T>(std::move(v), {a},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{transpose(g)};
                           });
}

template <typename T>
NodePtr<T> matmul(const NodePtr<T>& a, const NodePtr<T>& b) {
    const auto& as = a->value.shape;
    const auto& bs = b->value.shape;
    if (a->value.rank() != 2 || b->value.rank() != 2 || as[1] != bs[0])
        throw DimensionError("matmul: incompatible shapes " + shape_str(as) + " and " +
                             shape_str(bs));
    auto v = TensorT<T>::zeros({as[0], bs[1]});
    detail::matmul_kernel(a->value.data.data(), b->value.data.data(), v.data.data(), as[0], as[1],
                          bs[1]);
    return make_op_node<T>(std::move(v), {a, b},
                           [a, b](const NodePtr<T>& g, const std::vector<char>& needed) {
                               std::vector<NodePtr<T>> out(2);
                               if (needed[0]) out[0] = matmul(g, transpose(b));
                               if (needed[1]) out[1] = matmul(transpose(a), g);
                               return out;
                           });
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> sum_all(const NodePtr<T>& a) {
    T s = 0;
    for (T x : a->value.data) s += x;
    Shape orig = a->value.shape;
    return make_op_node<T>(TensorT<T>::scalar(s), {a},
                           [orig](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{full_broadcast(g, orig)};
                           });
}

template <typename T>
NodePtr<T> full_broadcast(const NodePtr<T>& s, Shape shape) {
    if (!s->value.is_scalar()) throw DimensionError("full_broadcast: source must be scalar");
    auto v = TensorT<T>::full(shape, s->value.data[0]);
    return make_op_node<T>(std::move(v), {s},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{sum_all(g)};
                           });
}

template <typename T>
NodePtr<T> channel_broadcast(const NodePtr<T>& v, Shape target);

/// Sum over every axis except the channel axis (axis 1). Works for [n,c],
/// [n,c,h,w] and any rank >= 2.
template <typename T>
NodePtr<T> channel_sum(const NodePtr<T>& a) {
    if (a->value.rank() < 2) throw DimensionError("channel_sum: need rank >= 2");
    const int64_t c = a->value.shape[1];
    int64_t inner = 1;
    for (size_t i = 2; i < a->value.rank(); ++i) inner *= a->value.shape[i];
    auto out = TensorT<T>::zeros({c});
    const int64_t n0 = a->value.shape[0];
    const T* src = a->value.data.data();
    for (int64_t b = 0; b < n0; ++b)
        for (int64_t ci = 0; ci < c; ++ci) {
            T s = 0;
            for (int64_t i = 0; i < inner; ++i) s += *src++;
            out.data[ci] += s;
        }
    Shape orig = a->value.shape;
    return make_op_node<T>(std::move(out), {a},
                           [orig](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{channel_broadcast(g, orig)};
                           });
}

template <typename T>
NodePtr<T> channel_broadcast(const NodePtr<T>& v, Shape target) {
    if (v->value.rank() != 1 || target.size() < 2 || target[1] != v->value.shape[0])
        throw DimensionError("channel_broadcast: vector " + shape_str(v->value.shape) +
                             " does not match channel axis of " + shape_str(target));
    const int64_t c = target[1];
    int64_t inner = 1;
    for (size_t i = 2; i < target.size(); ++i) inner *= target[i];
    auto out = TensorT<T>::zeros(target);
    T* dst = out.data.data();
    for (int64_t b = 0; b < target[0]; ++b)
        for (int64_t ci = 0; ci < c; ++ci) {
            const T x = v->value.data[ci];
            for (int64_t i = 0; i < inner; ++i) *dst++ = x;
        }
    return make_op_node<T>(std::move(out), {v},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{channel_sum(g)};
                           });
}

template <typename T>
NodePtr<T> row_broadcast(const NodePtr<T>& v, int64_t n);

template <typename T>
NodePtr<T> row_sum(const NodePtr<T>& a) {
    if (a->value.rank() != 2) throw DimensionError("row_sum: need rank 2");
    const int64_t m = a->value.shape[0], n = a->value.shape[1];
    auto out = TensorT<T>::zeros({m});
    for (int64_t i = 0; i < m; ++i) {
        T s = 0;
        for (int64_t j = 0; j < n; ++j) s += a->value.data[i * n + j];
        out.data[i] = s;
    }
    return make_op_node<T>(std::move(out), {a},
                           [n](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{row_broadcast(g, n)};
                           });
}

template <typename T>
NodePtr<T> row_broadcast(const NodePtr<T>& v, int64_t n) {
    if (v->value.rank() != 1) throw DimensionError("row_broadcast: need rank 1");
    const int64_t m = v->value.shape[0];
    auto out = TensorT<T>::zeros({m, n});
    for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j) out.data[i * n + j] = v->value.data[i];
    return make_op_node<T>(std::move(out), {v},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{row_sum(g)};
                           });
}

template <typename T>
NodePtr<T> spatial_broadcast(const NodePtr<T>& v, int64_t h, int64_t w);

/// [b,c,h,w] -> [b,c], summing the spatial axes.
template <typename T>
NodePtr<T> spatial_sum(const NodePtr<T>& a) {
    if (a->value.rank() != 4) throw DimensionError("spatial_sum: need rank 4");
    const auto& s = a->value.shape;
    const int64_t plane = s[2] * s[3];
    auto out = TensorT<T>::zeros({s[0], s[1]});
    const T* src = a->value.data.data();
    for (int64_t i = 0; i < s[0] * s[1]; ++i) {
        T acc = 0;
        for (int64_t p = 0; p < plane; ++p) acc += *src++;
        out.data[i] = acc;
    }
    const int64_t h = s[2], w = s[3];
    return make_op_node<T>(std::move(out), {a},
                           [h, w](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{spatial_broadcast(g, h, w)};
                           });
}

template <typename T>
NodePtr<T> spatial_broadcast(const NodePtr<T>& v, int64_t h, int64_t w) {
    if (v->value.rank() != 2) throw DimensionError("spatial_broadcast: need rank 2");
    const auto& s = v->value.shape;
    auto out = TensorT<T>::zeros({s[0], s[1], h, w});
    T* dst = out.data.data();
    for (int64_t i = 0; i < s[0] * s[1]; ++i) {
        const T x = v->value.data[i];
        for (int64_t p = 0; p < h * w; ++p) *dst++ = x;
    }
    return make_op_node<T>(std::move(out), {v},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{spatial_sum(g)};
                           });
}

// ---------------------------------------------------------------------------
// Elementwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> exp_op(const NodePtr<T>& a) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x = std::exp(x);
    return make_op_node<T>(std::move(v), {a},
                           [a](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{mul(g, exp_op(a))};
                           });
}

template <typename T>
NodePtr<T> log_op(const NodePtr<T>& a) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x = std::log(x);
    return make_op_node<T>(std::move(v), {a},
                           [a](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{mul(g, pow_const(a, T(-1)))};
                           });
}

/// x^p with constant exponent.
template <typename T>
NodePtr<T> pow_const(const NodePtr<T>& a, T p) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x = std::pow(x, p);
    return make_op_node<T>(std::move(v), {a},
                           [a, p](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{
                                   scale(mul(g, pow_const(a, p - T(1))), p)};
                           });
}

template <typename T>
NodePtr<T> leaky_relu(const NodePtr<T>& a, T slope) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x = x >= T(0) ? x : slope * x;
    // The local slope is piecewise constant in x, so the mask enters the
    // backward rule as a constant; second derivatives are zero a.e.
    return make_op_node<T>(std::move(v), {a},
                           [a, slope](const NodePtr<T>& g, const std::vector<char>&) {
                               TensorT<T> mask = a->value;
                               for (auto& x : mask.data) x = x >= T(0) ? T(1) : slope;
                               return std::vector<NodePtr<T>>{mul(g, make_constant(std::move(mask)))};
                           });
}

template <typename T>
NodePtr<T> tanh_op(const NodePtr<T>& a) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x = std::tanh(x);
    return make_op_node<T>(std::move(v), {a},
                           [a](const NodePtr<T>& g, const std::vector<char>&) {
                               auto t = tanh_op(a);
                               auto ones = make_constant(TensorT<T>::full(a->value.shape, T(1)));
                               return std::vector<NodePtr<T>>{mul(g, sub(ones, mul(t, t)))};
                           });
}

template <typename T>
NodePtr<T> sigmoid(const NodePtr<T>& a) {
    TensorT<T> v = a->value;
    for (auto& x : v.data) x = T(1) / (T(1) + std::exp(-x));
    return make_op_node<T>(std::move(v), {a},
                           [a](const NodePtr<T>& g, const std::vector<char>&) {
                               auto s = sigmoid(a);
                               auto ones = make_constant(TensorT<T>::full(a->value.shape, T(1)));
                               return std::vector<NodePtr<T>>{mul(g, mul(s, sub(ones, s)))};
                           });
}

// ---------------------------------------------------------------------------
// Indexing (used for the per-step schedule entries)
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> scatter_at(const NodePtr<T>& s, int64_t n, int64_t i);

/// Element i of a rank-1 tensor, as a differentiable scalar.
template <typename T>
NodePtr<T> pick(const NodePtr<T>& a, int64_t i) {
    if (a->value.rank() != 1) throw DimensionError("pick: need rank 1");
    const int64_t n = a->value.shape[0];
    if (i < 0 || i >= n)
        throw ValueError("pick: index " + std::to_string(i) + " out of range [0," +
                         std::to_string(n) + ")");
    return make_op_node<T>(TensorT<T>::scalar(a->value.data[i]), {a},
                           [n, i](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{scatter_at(g, n, i)};
                           });
}

template <typename T>
NodePtr<T> scatter_at(const NodePtr<T>& s, int64_t n, int64_t i) {
    if (!s->value.is_scalar()) throw DimensionError("scatter_at: source must be scalar");
    auto v = TensorT<T>::zeros({n});
    v.data[i] = s->value.data[0];
    return make_op_node<T>(std::move(v), {s},
                           [i](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{pick(g, i)};
                           });
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

template <typename T>
NodePtr<T> sum_pool2x(const NodePtr<T>& a);

/// Nearest-neighbor 2x upsampling: each pixel becomes a 2x2 block.
template <typename T>
NodePtr<T> upsample_nearest2x(const NodePtr<T>& a) {
    if (a->value.rank() != 4) throw DimensionError("upsample_nearest2x: need rank 4");
    const auto& s = a->value.shape;
    auto out = TensorT<T>::zeros({s[0], s[1], 2 * s[2], 2 * s[3]});
    const int64_t h = s[2], w = s[3];
    const T* src = a->value.data.data();
    T* dst = out.data.data();
    for (int64_t p = 0; p < s[0] * s[1]; ++p) {
        const T* in = src + p * h * w;
        T* o = dst + p * 4 * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const T v = in[y * w + x];
                T* q = o + (2 * y) * 2 * w + 2 * x;
                q[0] = v;
                q[1] = v;
                q[2 * w] = v;
                q[2 * w + 1] = v;
            }
    }
    return make_op_node<T>(std::move(out), {a},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{sum_pool2x(g)};
                           });
}

/// Sum over non-overlapping 2x2 blocks; the adjoint of upsample_nearest2x.
template <typename T>
NodePtr<T> sum_pool2x(const NodePtr<T>& a) {
    if (a->value.rank() != 4) throw DimensionError("sum_pool2x: need rank 4");
    const auto& s = a->value.shape;
    if (s[2] % 2 != 0 || s[3] % 2 != 0)
        throw DimensionError("sum_pool2x: spatial dims must be even, got " + shape_str(s));
    const int64_t h = s[2] / 2, w = s[3] / 2;
    auto out = TensorT<T>::zeros({s[0], s[1], h, w});
    const T* src = a->value.data.data();
    T* dst = out.data.data();
    for (int64_t p = 0; p < s[0] * s[1]; ++p) {
        const T* in = src + p * 4 * h * w;
        T* o = dst + p * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                const T* q = in + (2 * y) * 2 * w + 2 * x;
                o[y * w + x] = q[0] + q[1] + q[2 * w] + q[2 * w + 1];
            }
    }
    return make_op_node<T>(std::move(out), {a},
                           [](const NodePtr<T>& g, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{upsample_nearest2x(g)};
                           });
}

template <typename T>
NodePtr<T> im2col(const NodePtr<T>& a, int64_t k, int64_t stride, int64_t pad) {
    auto g = detail::conv_geom(a->value.shape, k, stride, pad);
    auto v = detail::im2col_value(a->value, g);
    return make_op_node<T>(std::move(v), {a},
                           [g](const NodePtr<T>& gr, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{col2im(gr, g)};
                           });
}

template <typename T>
NodePtr<T> col2im(const NodePtr<T>& cols, const detail::ConvGeom& g) {
    auto v = detail::col2im_value(cols->value, g);
    return make_op_node<T>(std::move(v), {cols},
                           [g](const NodePtr<T>& gr, const std::vector<char>&) {
                               return std::vector<NodePtr<T>>{im2col(gr, g.k, g.stride, g.pad)};
                           });
}

// ---------------------------------------------------------------------------
// Network-level composites. Backward comes for free from the primitives.
// ---------------------------------------------------------------------------

/// output[b,o] = sum_i input[b,i] * weight[o,i] + bias[o]
template <typename T>
NodePtr<T> linear(const NodePtr<T>& input, const NodePtr<T>& weight, const NodePtr<T>& bias) {
    const auto& xs = input->value.shape;
    const auto& ws = weight->value.shape;
    const auto& bs = bias->value.shape;
    if (input->value.rank() != 2 || weight->value.rank() != 2 || bias->value.rank() != 1 ||
        xs[1] != ws[1] || ws[0] != bs[0])
        throw DimensionError("linear: input " + shape_str(xs) + " incompatible with weight " +
                             shape_str(ws) + " and bias " + shape_str(bs));
    auto y = matmul(input, transpose(weight));
    return add(y, channel_broadcast(bias, y->value.shape));
}

/// Cross-correlation with zero padding, square kernels.
template <typename T>
NodePtr<T> conv2d(const NodePtr<T>& input, const NodePtr<T>& kernel, const NodePtr<T>& bias,
                  int64_t stride, int64_t pad) {
    const auto& xs = input->value.shape;
    const auto& ks = kernel->value.shape;
    if (input->value.rank() != 4 || kernel->value.rank() != 4 || ks[2] != ks[3])
        throw DimensionError("conv2d: input " + shape_str(xs) + " kernel " + shape_str(ks));
    if (ks[1] != xs[1])
        throw DimensionError("conv2d: input channels " + shape_str(xs) +
                             " do not match kernel " + shape_str(ks));
    if (bias->value.rank() != 1 || bias->value.shape[0] != ks[0])
        throw DimensionError("conv2d: bias " + shape_str(bias->value.shape) +
                             " does not match kernel " + shape_str(ks));
    auto geom = detail::conv_geom(xs, ks[2], stride, pad);
    auto cols = im2col(input, ks[2], stride, pad);
    auto wmat = reshape(kernel, {ks[0], ks[1] * ks[2] * ks[3]});
    auto y = matmul(cols, transpose(wmat));
    y = add(y, channel_broadcast(bias, y->value.shape));
    auto y4 = reshape(y, {geom.batch, geom.oh, geom.ow, ks[0]});
    return permute(y4, {0, 3, 1, 2});
}

/// Per-channel batch normalization in training mode (batch statistics are
/// part of the graph). Accepts [n,c] or [n,c,h,w]. Biased variance.
/// If batch_mean/batch_var are given, the detached batch statistics are
/// written there (for running-statistics bookkeeping).
template <typename T>
NodePtr<T> batchnorm_train(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta,
                           T eps, TensorT<T>* batch_mean = nullptr,
                           TensorT<T>* batch_var = nullptr) {
    const auto& xs = x->value.shape;
    if (x->value.rank() != 2 && x->value.rank() != 4)
        throw DimensionError("batchnorm: need rank 2 or 4, got " + shape_str(xs));
    const int64_t c = xs[1];
    if (gamma->value.shape != Shape{c} || beta->value.shape != Shape{c})
        throw DimensionError("batchnorm: gamma/beta must be [" + std::to_string(c) + "]");
    const int64_t n = x->value.numel() / c;
    if (n < 2)
        throw ValueError("batchnorm: degenerate variance, only " + std::to_string(n) +
                         " value per channel (batch of 1 with no spatial extent)");
    auto mean = scale(channel_sum(x), T(1) / T(n));
    auto centered = sub(x, channel_broadcast(mean, xs));
    auto var = scale(channel_sum(mul(centered, centered)), T(1) / T(n));
    auto inv_std = pow_const(add_const(var, eps), T(-0.5));
    auto xhat = mul(centered, channel_broadcast(inv_std, xs));
    if (batch_mean) *batch_mean = mean->value;
    if (batch_var) *batch_var = var->value;
    return add(mul(xhat, channel_broadcast(gamma, xs)), channel_broadcast(beta, xs));
}

/// Batch normalization with frozen statistics (evaluation mode).
template <typename T>
NodePtr<T> batchnorm_eval(const NodePtr<T>& x, const NodePtr<T>& gamma, const NodePtr<T>& beta,
                          const TensorT<T>& running_mean, const TensorT<T>& running_var, T eps) {
    const auto& xs = x->value.shape;
    if (x->value.rank() != 2 && x->value.rank() != 4)
        throw DimensionError("batchnorm: need rank 2 or 4, got " + shape_str(xs));
    const int64_t c = xs[1];
    if (gamma->value.shape != Shape{c} || beta->value.shape != Shape{c} ||
        running_mean.shape != Shape{c} || running_var.shape != Shape{c})
        throw DimensionError("batchnorm: per-channel tensors must be [" + std::to_string(c) +
                             "]");
    TensorT<T> inv = running_var;
    for (auto& v : inv.data) v = T(1) / std::sqrt(v + eps);
    auto centered = sub(x, channel_broadcast(make_constant(TensorT<T>(running_mean)), xs));
    auto xhat = mul(centered, channel_broadcast(make_constant(std::move(inv)), xs));
    return add(mul(xhat, channel_broadcast(gamma, xs)), channel_broadcast(beta, xs));
}

/// Spatial mean per channel: [b,c,h,w] -> [b,c].
template <typename T>
NodePtr<T> global_avg_pool(const NodePtr<T>& x) {
    if (x->value.rank() != 4)
        throw DimensionError("global_avg_pool: need rank 4, got " + shape_str(x->value.shape));
    const int64_t plane = x->value.shape[2] * x->value.shape[3];
    return scale(spatial_sum(x), T(1) / T(plane));
}

/// Mean over the batch of -log softmax(logits)[label], stabilized by
/// subtracting the (detached) row max.
template <typename T>
NodePtr<T> softmax_cross_entropy(const NodePtr<T>& logits, const std::vector<int>& labels) {
    const auto& ls = logits->value.shape;
    if (logits->value.rank() != 2)
        throw DimensionError("softmax_cross_entropy: logits must be rank 2, got " + shape_str(ls));
    const int64_t b = ls[0], k = ls[1];
    if (static_cast<int64_t>(labels.size()) != b)
        throw DimensionError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch " + std::to_string(b));
    for (int64_t i = 0; i < b; ++i)
        if (labels[i] < 0 || labels[i] >= k)
            throw ValueError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                             " out of range [0," + std::to_string(k) + ") at batch index " +
                             std::to_string(i));

    TensorT<T> shift = TensorT<T>::zeros({b, k});
    for (int64_t i = 0; i < b; ++i) {
        T m = logits->value.data[i * k];
        for (int64_t j = 1; j < k; ++j) m = std::max(m, logits->value.data[i * k + j]);
        for (int64_t j = 0; j < k; ++j) shift.data[i * k + j] = m;
    }
    TensorT<T> onehot = TensorT<T>::zeros({b, k});
    for (int64_t i = 0; i < b; ++i) onehot.data[i * k + labels[i]] = T(1);

    auto shifted = sub(logits, make_constant(std::move(shift)));
    auto lse = log_op(row_sum(exp_op(shifted)));
    auto picked = row_sum(mul(shifted, make_constant(std::move(onehot))));
    return scale(sum_all(sub(lse, picked)), T(1) / T(b));
}

// ---------------------------------------------------------------------------
// Reverse-mode sweep
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
std::vector<NodeT<T>*> toposort(const NodePtr<T>& root) {
    std::vector<NodeT<T>*> order;
    std::unordered_set<NodeT<T>*> visited;
    // (node, next-parent-index) iterative post-order DFS
    std::vector<std::pair<NodeT<T>*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            NodeT<T>* p = node->parents[idx++].get();
            if (p && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace detail

/// Reverse-mode gradients of a scalar loss with respect to `wrt`. When
/// `build_graph` is set, the returned gradients are graph nodes that can be
/// differentiated again. Propagation is pruned to subgraphs that can reach a
/// requested node.
template <typename T>
std::vector<NodePtr<T>> backward(const NodePtr<T>& loss, const std::vector<NodePtr<T>>& wrt,
                                 bool build_graph,
                                 const std::vector<std::string>* names = nullptr) {
    if (!loss) throw ValueError("backward: null loss");
    if (!loss->value.is_scalar())
        throw ValueError("backward: loss must be scalar, got shape " +
                         shape_str(loss->value.shape));
    auto name_of = [&](size_t i) {
        return names && i < names->size() ? (*names)[i] : "wrt[" + std::to_string(i) + "]";
    };

    auto order = detail::toposort(loss);  // parents before consumers
    std::unordered_set<NodeT<T>*> wanted;
    for (const auto& w : wrt) wanted.insert(w.get());

    // A node needs gradient propagation iff a requested node is reachable
    // from it through parent edges.
    std::unordered_map<NodeT<T>*, char> reach;
    reach.reserve(order.size());
    for (NodeT<T>* n : order) {
        char r = wanted.count(n) ? 1 : 0;
        if (!r)
            for (const auto& p : n->parents)
                if (p && reach[p.get()]) {
                    r = 1;
                    break;
                }
        reach[n] = r;
    }

    std::unordered_map<NodeT<T>*, NodePtr<T>> grads;
    grads.reserve(order.size());
    {
        GradModeGuard guard(build_graph);
        grads[loss.get()] = make_constant(TensorT<T>::full(loss->value.shape, T(1)));
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            NodeT<T>* n = *it;
            auto git = grads.find(n);
            if (git == grads.end() || !n->backward_rule) continue;
            std::vector<char> needed(n->parents.size(), 0);
            bool any = false;
            for (size_t i = 0; i < n->parents.size(); ++i) {
                const auto& p = n->parents[i];
                if (p && p->requires_grad && reach[p.get()]) {
                    needed[i] = 1;
                    any = true;
                }
            }
            if (!any) continue;
            auto parts = n->backward_rule(git->second, needed);
            for (size_t i = 0; i < n->parents.size(); ++i) {
                if (!needed[i] || !parts[i]) continue;
                NodeT<T>* p = n->parents[i].get();
                auto gp = grads.find(p);
                if (gp == grads.end())
                    grads.emplace(p, parts[i]);
                else
                    gp->second = add(gp->second, parts[i]);
            }
        }
    }

    std::vector<NodePtr<T>> out(wrt.size());
    for (size_t i = 0; i < wrt.size(); ++i) {
        auto it = grads.find(wrt[i].get());
        if (it == grads.end())
            throw ConnectivityError("backward: parameter " + name_of(i) +
                                    " is not reachable from the loss");
        out[i] = it->second;
    }
    return out;
}

}  // namespace ops
}  // namespace gmcl
