#include "ddlab/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ddlab/errors.hpp"
#include "ddlab/tape.hpp"

namespace ddlab::ops {

namespace {

using Span = std::span<const float>;
using GradIn = std::span<float* const>;

void record(std::string_view name, std::initializer_list<Tensor> inputs, Tensor& out, BackwardFn fn) {
    std::span<const Tensor> ins(inputs.begin(), inputs.size());
    if (!needs_recording(ins)) return;
    out.set_requires_grad(true);
    active_tape()->record(name, ins, out, std::move(fn));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

void require_rank(const char* op, const Tensor& t, std::size_t r) {
    if (t.rank() != r) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(r) + ", got shape " +
                             shape_str(t.shape()));
    }
}

// Row-major C = op(A) op(B) + beta C. op(A) is M x K, op(B) is K x N.
void gemm(bool ta, bool tb, int m, int n, int k, const float* a, const float* b, float beta, float* c) {
    cblas_sgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, n, k, 1.0f, a,
                ta ? m : k, b, tb ? k : n, beta, c, n);
}

int normalize_axis(const Tensor& x, int axis, const char* op) {
    const int r = static_cast<int>(x.rank());
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for shape " +
                             shape_str(x.shape()));
    }
    return a;
}

// Splits shape around `axis` into (outer, dim, inner) extents.
struct AxisSplit {
    std::int64_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
    AxisSplit r;
    for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
    r.dim = s[static_cast<std::size_t>(axis)];
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

std::int64_t last_dim(const Tensor& x, const char* op) {
    if (x.rank() == 0) throw DimensionError(std::string(op) + ": scalar input has no last axis");
    return x.dim(-1);
}

void validate_labels(std::span<const int> labels, std::int64_t n, std::int64_t k) {
    if (static_cast<std::int64_t>(labels.size()) != n) {
        throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                             " rows");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= k) {
            throw IndexError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                             " outside [0, " + std::to_string(k) + ")");
        }
    }
}

// Row-wise log-softmax of x / t in double.
// tanh through one expf; accurate to a few ulp away from 0, exact sign and limits.
inline float fast_tanh(float u) {
    if (std::abs(u) < 0.02f) return u * (1.0f - u * u / 3.0f);
    const float e = std::exp(-2.0f * std::abs(u));
    return std::copysign((1.0f - e) / (1.0f + e), u);
}

void log_softmax_row(const float* x, std::int64_t k, double inv_t, double* out) {
    double mx = -INFINITY;
    for (std::int64_t j = 0; j < k; ++j) mx = std::max(mx, x[j] * inv_t);
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) s += std::exp(x[j] * inv_t - mx);
    const double lse = mx + std::log(s);
    for (std::int64_t j = 0; j < k; ++j) out[j] = x[j] * inv_t - lse;
}

void check_temperature(float t, const char* op) {
    if (!(t > 0.0f) || !std::isfinite(t)) {
        throw ParameterError(std::string(op) + ": temperature must be positive, got " + std::to_string(t));
    }
}

}  // namespace

// Linear algebra -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank("matmul", a, 2);
    require_rank("matmul", b, 2);
    if (a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const int m = static_cast<int>(a.dim(0)), k = static_cast<int>(a.dim(1)), n = static_cast<int>(b.dim(1));
    Tensor out = Tensor::zeros({m, n});
    gemm(false, false, m, n, k, a.data().data(), b.data().data(), 0.0f, out.data().data());
    record("matmul", {a, b}, out, [a, b, m, n, k](Span g, GradIn gi) {
        if (gi[0]) gemm(false, true, m, k, n, g.data(), b.data().data(), 1.0f, gi[0]);
        if (gi[1]) gemm(true, false, k, n, m, a.data().data(), g.data(), 1.0f, gi[1]);
    });
    return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
    require_rank("bmm", a, 3);
    require_rank("bmm", b, 3);
    const auto batch = a.dim(0);
    const int m = static_cast<int>(ta ? a.dim(2) : a.dim(1));
    const int k = static_cast<int>(ta ? a.dim(1) : a.dim(2));
    const int kb = static_cast<int>(tb ? b.dim(2) : b.dim(1));
    const int n = static_cast<int>(tb ? b.dim(1) : b.dim(2));
    if (b.dim(0) != batch || k != kb) {
        throw DimensionError("bmm: incompatible operands " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({batch, m, n});
    const std::int64_t sa = std::int64_t(m) * k, sb = std::int64_t(k) * n, sc = std::int64_t(m) * n;
    for (std::int64_t i = 0; i < batch; ++i) {
        gemm(ta, tb, m, n, k, a.data().data() + i * sa, b.data().data() + i * sb, 0.0f, out.data().data() + i * sc);
    }
    record("bmm", {a, b}, out, [a, b, ta, tb, batch, m, n, k, sa, sb, sc](Span g, GradIn gi) {
        for (std::int64_t i = 0; i < batch; ++i) {
            const float* gc = g.data() + i * sc;
            const float* pa = a.data().data() + i * sa;
            const float* pb = b.data().data() + i * sb;
            if (gi[0]) {
                if (!ta) gemm(false, !tb, m, k, n, gc, pb, 1.0f, gi[0] + i * sa);
                else gemm(tb, true, k, m, n, pb, gc, 1.0f, gi[0] + i * sa);
            }
            if (gi[1]) {
                if (!tb) gemm(!ta, false, k, n, m, pa, gc, 1.0f, gi[1] + i * sb);
                else gemm(true, ta, n, k, m, gc, pa, 1.0f, gi[1] + i * sb);
            }
        }
    });
    return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b) {
    require_rank("linear", w, 2);
    const auto in = last_dim(x, "linear");
    if (w.dim(0) != in) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                             shape_str(w.shape()));
    }
    const auto outf = w.dim(1);
    if (b && (b->rank() != 1 || b->dim(0) != outf)) {
        throw DimensionError("linear: bias " + shape_str(b->shape()) + " does not match " + std::to_string(outf) +
                             " outputs");
    }
    const int rows = static_cast<int>(static_cast<std::int64_t>(x.numel()) / in);
    Shape out_shape = x.shape();
    out_shape.back() = outf;
    Tensor out = Tensor::zeros(out_shape);
    float* po = out.data().data();
    if (b) {
        for (int r = 0; r < rows; ++r) std::copy(b->data().begin(), b->data().end(), po + std::int64_t(r) * outf);
    }
    gemm(false, false, rows, static_cast<int>(outf), static_cast<int>(in), x.data().data(), w.data().data(),
         b ? 1.0f : 0.0f, po);

    const Tensor bias = b ? *b : Tensor();
    const bool has_bias = b.has_value();
    auto fn = [x, w, rows, in, outf, has_bias](Span g, GradIn gi) {
        const int ii = static_cast<int>(in), oo = static_cast<int>(outf);
        if (gi[0]) gemm(false, true, rows, ii, oo, g.data(), w.data().data(), 1.0f, gi[0]);
        if (gi[1]) gemm(true, false, ii, oo, rows, x.data().data(), g.data(), 1.0f, gi[1]);
        if (has_bias && gi[2]) {
            for (int r = 0; r < rows; ++r) {
                const float* gr = g.data() + std::int64_t(r) * outf;
                for (std::int64_t j = 0; j < outf; ++j) gi[2][j] += gr[j];
            }
        }
    };
    record("linear", {x, w, bias}, out, std::move(fn));
    return out;
}

// Elementwise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    Tensor out = a.clone();
    auto po = out.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] += pb[i];
    record("add", {a, b}, out, [](Span g, GradIn gi) {
        for (int s = 0; s < 2; ++s) {
            if (!gi[s]) continue;
            for (std::size_t i = 0; i < g.size(); ++i) gi[s][i] += g[i];
        }
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    Tensor out = a.clone();
    auto po = out.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] -= pb[i];
    record("sub", {a, b}, out, [](Span g, GradIn gi) {
        if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
        if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] -= g[i];
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    Tensor out = a.clone();
    auto po = out.data();
    auto pb = b.data();
    for (std::size_t i = 0; i < po.size(); ++i) po[i] *= pb[i];
    record("mul", {a, b}, out, [a, b](Span g, GradIn gi) {
        if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * b[i];
        if (gi[1]) for (std::size_t i = 0; i < g.size(); ++i) gi[1][i] += g[i] * a[i];
    });
    return out;
}

Tensor scale(const Tensor& x, float s) {
    Tensor out = x.clone();
    for (auto& v : out.data()) v *= s;
    record("scale", {x}, out, [s](Span g, GradIn gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i] * s;
    });
    return out;
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
    const auto& xs = x.shape();
    const auto& bs = b.shape();
    if (bs.empty() || bs.size() > xs.size() || !std::equal(bs.begin(), bs.end(), xs.end() - std::ptrdiff_t(bs.size()))) {
        throw DimensionError("add_bias: bias " + shape_str(bs) + " is not a trailing sub-shape of " + shape_str(xs));
    }
    const std::size_t inner = b.numel();
    const std::size_t outer = x.numel() / inner;
    Tensor out = x.clone();
    auto po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) po[o * inner + i] += b[i];
    record("add_bias", {x, b}, out, [outer, inner](Span g, GradIn gi) {
        if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
        if (gi[1])
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t i = 0; i < inner; ++i) gi[1][i] += g[o * inner + i];
    });
    return out;
}

Tensor add_per_channel(const Tensor& x, const Tensor& b) {
    if (x.rank() < 2) throw DimensionError("add_per_channel: input must be at least N x C, got " + shape_str(x.shape()));
    const auto n = x.dim(0), c = x.dim(1);
    const bool per_sample = b.rank() == 2;
    if (!((b.rank() == 1 && b.dim(0) == c) || (per_sample && b.dim(0) == n && b.dim(1) == c))) {
        throw DimensionError("add_per_channel: bias " + shape_str(b.shape()) + " incompatible with " +
                             shape_str(x.shape()));
    }
    const std::int64_t spatial = static_cast<std::int64_t>(x.numel()) / (n * c);
    Tensor out = x.clone();
    auto po = out.data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            const float v = b[static_cast<std::size_t>(per_sample ? i * c + j : j)];
            float* p = po.data() + (i * c + j) * spatial;
            for (std::int64_t s = 0; s < spatial; ++s) p[s] += v;
        }
    record("add_per_channel", {x, b}, out, [n, c, spatial, per_sample](Span g, GradIn gi) {
        if (gi[0]) for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
        if (!gi[1]) return;
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < c; ++j) {
                const float* p = g.data() + (i * c + j) * spatial;
                double acc = 0.0;
                for (std::int64_t s = 0; s < spatial; ++s) acc += p[s];
                gi[1][per_sample ? i * c + j : j] += static_cast<float>(acc);
            }
    });
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out = x.clone();
    for (auto& v : out.data()) v = v > 0.0f ? v : 0.0f;
    record("relu", {x}, out, [x](Span g, GradIn gi) {
        for (std::size_t i = 0; i < g.size(); ++i)
            if (x[i] > 0.0f) gi[0][i] += g[i];
    });
    return out;
}

namespace {
constexpr float kGeluC = 0.7978845608f;  // sqrt(2 / pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(const Tensor& x) {
    Tensor out = x.clone();
    for (auto& v : out.data()) v = 0.5f * v * (1.0f + fast_tanh(kGeluC * (v + kGeluA * v * v * v)));
    record("gelu", {x}, out, [x](Span g, GradIn gi) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            const float v = x[i];
            const float t = fast_tanh(kGeluC * (v + kGeluA * v * v * v));
            const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * kGeluC * (1.0f + 3.0f * kGeluA * v * v);
            gi[0][i] += g[i] * d;
        }
    });
    return out;
}

// Shape ----------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != static_cast<std::int64_t>(x.numel())) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor out(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
    record("reshape", {x}, out, [](Span g, GradIn gi) {
        for (std::size_t i = 0; i < g.size(); ++i) gi[0][i] += g[i];
    });
    return out;
}

Tensor permute(const Tensor& x, std::span<const int> axes) {
    const std::size_t r = x.rank();
    if (axes.size() != r) throw DimensionError("permute: axis list length differs from rank of " + shape_str(x.shape()));
    std::vector<bool> seen(r, false);
    for (int a : axes) {
        if (a < 0 || static_cast<std::size_t>(a) >= r || seen[static_cast<std::size_t>(a)]) {
            throw DimensionError("permute: invalid axis permutation for " + shape_str(x.shape()));
        }
        seen[static_cast<std::size_t>(a)] = true;
    }
    const auto& in_shape = x.shape();
    std::vector<std::int64_t> in_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in_shape[i];
    Shape out_shape(r);
    std::vector<std::int64_t> src_stride(r);
    for (std::size_t i = 0; i < r; ++i) {
        out_shape[i] = in_shape[static_cast<std::size_t>(axes[i])];
        src_stride[i] = in_stride[static_cast<std::size_t>(axes[i])];
    }
    // out[j] = x[map[j]]
    std::vector<std::int64_t> map(x.numel());
    std::vector<std::int64_t> idx(r, 0);
    std::int64_t src = 0;
    for (std::size_t j = 0; j < map.size(); ++j) {
        map[j] = src;
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < out_shape[d]) {
                src += src_stride[d];
                break;
            }
            src -= src_stride[d] * (out_shape[d] - 1);
            idx[d] = 0;
        }
    }
    Tensor out = Tensor::zeros(out_shape);
    auto po = out.data();
    for (std::size_t j = 0; j < map.size(); ++j) po[j] = x[static_cast<std::size_t>(map[j])];
    record("permute", {x}, out, [map = std::move(map)](Span g, GradIn gi) {
        for (std::size_t j = 0; j < g.size(); ++j) gi[0][map[j]] += g[j];
    });
    return out;
}

Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length) {
    const int a = normalize_axis(x, axis, "slice");
    const auto sp = split_at(x.shape(), a);
    if (start < 0 || length <= 0 || start + length > sp.dim) {
        throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                             ") outside axis of size " + std::to_string(sp.dim));
    }
    Shape out_shape = x.shape();
    out_shape[static_cast<std::size_t>(a)] = length;
    Tensor out = Tensor::zeros(out_shape);
    auto po = out.data();
    const std::int64_t chunk = length * sp.inner;
    for (std::int64_t o = 0; o < sp.outer; ++o) {
        const float* src = x.data().data() + (o * sp.dim + start) * sp.inner;
        std::copy(src, src + chunk, po.data() + o * chunk);
    }
    record("slice", {x}, out, [sp, start, chunk](Span g, GradIn gi) {
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            float* dst = gi[0] + (o * sp.dim + start) * sp.inner;
            const float* src = g.data() + o * chunk;
            for (std::int64_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
    });
    return out;
}

Tensor concat(std::span<const Tensor> xs, int axis) {
    if (xs.empty()) throw DimensionError("concat: no inputs");
    const int a = normalize_axis(xs[0], axis, "concat");
    Shape out_shape = xs[0].shape();
    std::int64_t total = 0;
    for (const auto& t : xs) {
        if (t.rank() != out_shape.size()) throw DimensionError("concat: rank mismatch " + shape_str(t.shape()));
        for (std::size_t d = 0; d < out_shape.size(); ++d) {
            if (static_cast<int>(d) != a && t.shape()[d] != out_shape[d]) {
                throw DimensionError("concat: incompatible shapes " + shape_str(xs[0].shape()) + " and " +
                                     shape_str(t.shape()));
            }
        }
        total += t.shape()[static_cast<std::size_t>(a)];
    }
    out_shape[static_cast<std::size_t>(a)] = total;
    const auto sp = split_at(out_shape, a);
    Tensor out = Tensor::zeros(out_shape);
    auto po = out.data();
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const auto& t : xs) {
        offsets.push_back(off);
        const std::int64_t d = t.shape()[static_cast<std::size_t>(a)];
        for (std::int64_t o = 0; o < sp.outer; ++o) {
            const float* src = t.data().data() + o * d * sp.inner;
            std::copy(src, src + d * sp.inner, po.data() + (o * total + off) * sp.inner);
        }
        off += d;
    }
    std::vector<std::int64_t> dims;
    for (const auto& t : xs) dims.push_back(t.shape()[static_cast<std::size_t>(a)]);

    std::span<const Tensor> ins = xs;
    if (needs_recording(ins)) {
        out.set_requires_grad(true);
        active_tape()->record("concat", ins, out, [sp, total, offsets, dims](Span g, GradIn gi) {
            for (std::size_t k = 0; k < dims.size(); ++k) {
                if (!gi[k]) continue;
                for (std::int64_t o = 0; o < sp.outer; ++o) {
                    const float* src = g.data() + (o * total + offsets[k]) * sp.inner;
                    float* dst = gi[k] + o * dims[k] * sp.inner;
                    for (std::int64_t i = 0; i < dims[k] * sp.inner; ++i) dst[i] += src[i];
                }
            }
        });
    }
    return out;
}

Tensor repeat_batch(const Tensor& x, std::int64_t n) {
    if (n <= 0) throw DimensionError("repeat_batch: count must be positive");
    Shape out_shape{n};
    out_shape.insert(out_shape.end(), x.shape().begin(), x.shape().end());
    Tensor out = Tensor::zeros(out_shape);
    const std::size_t m = x.numel();
    auto po = out.data();
    for (std::int64_t i = 0; i < n; ++i) std::copy(x.data().begin(), x.data().end(), po.begin() + i * std::int64_t(m));
    record("repeat_batch", {x}, out, [n, m](Span g, GradIn gi) {
        for (std::int64_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < m; ++j) gi[0][j] += g[std::size_t(i) * m + j];
    });
    return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
    require_rank("upsample_nearest2x", x, 4);
    const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor out = Tensor::zeros({n, c, 2 * h, 2 * w});
    auto po = out.data();
    const std::int64_t planes = n * c;
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < 2 * h; ++i)
            for (std::int64_t j = 0; j < 2 * w; ++j)
                po[static_cast<std::size_t>((p * 2 * h + i) * 2 * w + j)] = x[static_cast<std::size_t>((p * h + i / 2) * w + j / 2)];
    record("upsample_nearest2x", {x}, out, [planes, h, w](Span g, GradIn gi) {
        for (std::int64_t p = 0; p < planes; ++p)
            for (std::int64_t i = 0; i < 2 * h; ++i)
                for (std::int64_t j = 0; j < 2 * w; ++j)
                    gi[0][(p * h + i / 2) * w + j / 2] += g[static_cast<std::size_t>((p * 2 * h + i) * 2 * w + j)];
    });
    return out;
}

// Reductions and normalization -------------------------------------------------

Tensor sum(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    Tensor out = Tensor::scalar(static_cast<float>(acc));
    const std::size_t n = x.numel();
    record("sum", {x}, out, [n](Span g, GradIn gi) {
        for (std::size_t i = 0; i < n; ++i) gi[0][i] += g[0];
    });
    return out;
}

Tensor mean(const Tensor& x) {
    double acc = 0.0;
    for (float v : x.data()) acc += v;
    const std::size_t n = x.numel();
    Tensor out = Tensor::scalar(static_cast<float>(acc / static_cast<double>(n)));
    record("mean", {x}, out, [n](Span g, GradIn gi) {
        const float d = g[0] / static_cast<float>(n);
        for (std::size_t i = 0; i < n; ++i) gi[0][i] += d;
    });
    return out;
}

Tensor softmax(const Tensor& x, float temperature) {
    check_temperature(temperature, "softmax");
    const auto k = last_dim(x, "softmax");
    const std::size_t rows = x.numel() / static_cast<std::size_t>(k);
    const double inv_t = 1.0 / temperature;
    Tensor out = Tensor::zeros(x.shape());
    const float inv_tf = static_cast<float>(inv_t);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x.data().data() + r * k;
        float* yr = out.data().data() + r * k;
        float mx = -INFINITY;
        for (std::int64_t j = 0; j < k; ++j) mx = std::max(mx, xr[j] * inv_tf);
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            yr[j] = std::exp(xr[j] * inv_tf - mx);
            s += yr[j];
        }
        const double inv_s = 1.0 / s;
        for (std::int64_t j = 0; j < k; ++j) yr[j] = static_cast<float>(yr[j] * inv_s);
    }
    record("softmax", {x}, out, [y = out, rows, k, inv_t](Span g, GradIn gi) {
        for (std::size_t r = 0; r < rows; ++r) {
            const float* yr = y.data().data() + r * k;
            const float* gr = g.data() + r * k;
            double dot = 0.0;
            for (std::int64_t j = 0; j < k; ++j) dot += double(gr[j]) * yr[j];
            for (std::int64_t j = 0; j < k; ++j)
                gi[0][r * k + j] += static_cast<float>(yr[j] * (gr[j] - dot) * inv_t);
        }
    });
    return out;
}

Tensor log_softmax(const Tensor& x, float temperature) {
    check_temperature(temperature, "log_softmax");
    const auto k = last_dim(x, "log_softmax");
    const std::size_t rows = x.numel() / static_cast<std::size_t>(k);
    const double inv_t = 1.0 / temperature;
    Tensor out = Tensor::zeros(x.shape());
    std::vector<double> buf(static_cast<std::size_t>(k));
    for (std::size_t r = 0; r < rows; ++r) {
        log_softmax_row(x.data().data() + r * k, k, inv_t, buf.data());
        for (std::int64_t j = 0; j < k; ++j) out.data()[r * k + j] = static_cast<float>(buf[j]);
    }
    record("log_softmax", {x}, out, [y = out, rows, k, inv_t](Span g, GradIn gi) {
        for (std::size_t r = 0; r < rows; ++r) {
            const float* yr = y.data().data() + r * k;
            const float* gr = g.data() + r * k;
            double gs = 0.0;
            for (std::int64_t j = 0; j < k; ++j) gs += gr[j];
            for (std::int64_t j = 0; j < k; ++j)
                gi[0][r * k + j] += static_cast<float>((gr[j] - std::exp(double(yr[j])) * gs) * inv_t);
        }
    });
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
    if (!(eps > 0.0f)) throw ParameterError("layer_norm: eps must be positive");
    const auto d = last_dim(x, "layer_norm");
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw DimensionError("layer_norm: gamma/beta " + shape_str(gamma.shape()) + "/" + shape_str(beta.shape()) +
                             " do not match last axis of " + shape_str(x.shape()));
    }
    const std::size_t rows = x.numel() / static_cast<std::size_t>(d);
    Tensor out = Tensor::zeros(x.shape());
    std::vector<float> xhat(x.numel());
    std::vector<float> rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const float* xr = x.data().data() + r * d;
        double mu = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mu += xr[j];
        mu /= double(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= double(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        rstd[r] = static_cast<float>(rs);
        for (std::int64_t j = 0; j < d; ++j) {
            const float xh = static_cast<float>((xr[j] - mu) * rs);
            xhat[r * d + j] = xh;
            out.data()[r * d + j] = xh * gamma[j] + beta[j];
        }
    }
    record("layer_norm", {x, gamma, beta}, out,
           [xhat = std::move(xhat), rstd = std::move(rstd), gamma, rows, d](Span g, GradIn gi) {
               std::vector<double> dxh(static_cast<std::size_t>(d));
               for (std::size_t r = 0; r < rows; ++r) {
                   const float* gr = g.data() + r * d;
                   const float* xh = xhat.data() + r * d;
                   if (gi[1]) for (std::int64_t j = 0; j < d; ++j) gi[1][j] += gr[j] * xh[j];
                   if (gi[2]) for (std::int64_t j = 0; j < d; ++j) gi[2][j] += gr[j];
                   if (!gi[0]) continue;
                   double m1 = 0.0, m2 = 0.0;
                   for (std::int64_t j = 0; j < d; ++j) {
                       dxh[j] = double(gr[j]) * gamma[j];
                       m1 += dxh[j];
                       m2 += dxh[j] * xh[j];
                   }
                   m1 /= double(d);
                   m2 /= double(d);
                   for (std::int64_t j = 0; j < d; ++j)
                       gi[0][r * d + j] += static_cast<float>(rstd[r] * (dxh[j] - m1 - xh[j] * m2));
               }
           });
    return out;
}

// Convolution ----------------------------------------------------------------

namespace {

struct ConvGeom {
    std::int64_t n, c, h, w, f, kh, kw, oh, ow;
    int stride, pad;
    std::int64_t cols() const { return c * kh * kw; }
    std::int64_t positions() const { return oh * ow; }
};

ConvGeom conv_geometry(const Tensor& x, const Tensor& w, int stride, int padding) {
    require_rank("conv2d", x, 4);
    require_rank("conv2d", w, 4);
    if (stride < 1) throw ParameterError("conv2d: stride must be >= 1");
    if (padding < 0) throw ParameterError("conv2d: padding must be >= 0");
    ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, stride, padding};
    if (w.dim(1) != g.c) {
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                             " channels, input " + shape_str(x.shape()) + " has " + std::to_string(g.c));
    }
    if (g.kh > g.h + 2 * padding || g.kw > g.w + 2 * padding) {
        throw DimensionError("conv2d: kernel " + shape_str(w.shape()) + " larger than padded input " +
                             shape_str(x.shape()));
    }
    g.oh = (g.h + 2 * padding - g.kh) / stride + 1;
    g.ow = (g.w + 2 * padding - g.kw) / stride + 1;
    return g;
}

// cols[(c, i, j), (oy, ox)] for one sample.
void im2col(const ConvGeom& g, const float* x, float* cols) {
    const std::int64_t p = g.positions();
    for (std::int64_t c = 0; c < g.c; ++c)
        for (std::int64_t i = 0; i < g.kh; ++i)
            for (std::int64_t j = 0; j < g.kw; ++j) {
                float* row = cols + ((c * g.kh + i) * g.kw + j) * p;
                const float* plane = x + c * g.h * g.w;
                for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + i;
                    float* dst = row + oy * g.ow;
                    if (iy < 0 || iy >= g.h) {
                        std::fill(dst, dst + g.ow, 0.0f);
                        continue;
                    }
                    for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + j;
                        dst[ox] = (ix < 0 || ix >= g.w) ? 0.0f : plane[iy * g.w + ix];
                    }
                }
            }
}

void col2im(const ConvGeom& g, const float* cols, float* dx) {
    const std::int64_t p = g.positions();
    for (std::int64_t c = 0; c < g.c; ++c)
        for (std::int64_t i = 0; i < g.kh; ++i)
            for (std::int64_t j = 0; j < g.kw; ++j) {
                const float* row = cols + ((c * g.kh + i) * g.kw + j) * p;
                float* plane = dx + c * g.h * g.w;
                for (std::int64_t oy = 0; oy < g.oh; ++oy) {
                    const std::int64_t iy = oy * g.stride - g.pad + i;
                    if (iy < 0 || iy >= g.h) continue;
                    for (std::int64_t ox = 0; ox < g.ow; ++ox) {
                        const std::int64_t ix = ox * g.stride - g.pad + j;
                        if (ix >= 0 && ix < g.w) plane[iy * g.w + ix] += row[oy * g.ow + ox];
                    }
                }
            }
}

Tensor conv2d_impl(const Tensor& x, const Tensor& w, const Tensor* bias, int stride, int padding) {
    const ConvGeom g = conv_geometry(x, w, stride, padding);
    if (bias && bias->shape() != Shape{g.f}) {
        throw DimensionError("conv2d: bias " + shape_str(bias->shape()) + " does not match " + std::to_string(g.f) +
                             " filters");
    }
    Tensor out = Tensor::zeros({g.n, g.f, g.oh, g.ow});
    const std::int64_t p = g.positions(), k = g.cols();
    std::vector<float> cols(static_cast<std::size_t>(k * p));
    for (std::int64_t s = 0; s < g.n; ++s) {
        im2col(g, x.data().data() + s * g.c * g.h * g.w, cols.data());
        float* po = out.data().data() + s * g.f * p;
        if (bias) {
            for (std::int64_t f = 0; f < g.f; ++f) std::fill(po + f * p, po + (f + 1) * p, (*bias)[std::size_t(f)]);
        }
        gemm(false, false, int(g.f), int(p), int(k), w.data().data(), cols.data(), bias ? 1.0f : 0.0f, po);
    }
    const Tensor b = bias ? *bias : Tensor();
    const bool has_bias = bias != nullptr;
    record("conv2d", {x, w, b}, out, [x, w, g, has_bias](Span grad, GradIn gi) {
        const std::int64_t p = g.positions(), k = g.cols();
        std::vector<float> cols(static_cast<std::size_t>(k * p));
        std::vector<float> dcols;
        if (gi[0]) dcols.resize(cols.size());
        for (std::int64_t s = 0; s < g.n; ++s) {
            const float* gs = grad.data() + s * g.f * p;
            if (gi[1]) {
                im2col(g, x.data().data() + s * g.c * g.h * g.w, cols.data());
                gemm(false, true, int(g.f), int(k), int(p), gs, cols.data(), 1.0f, gi[1]);
            }
            if (gi[0]) {
                gemm(true, false, int(k), int(p), int(g.f), w.data().data(), gs, 0.0f, dcols.data());
                col2im(g, dcols.data(), gi[0] + s * g.c * g.h * g.w);
            }
            if (has_bias && gi[2]) {
                for (std::int64_t f = 0; f < g.f; ++f) {
                    double acc = 0.0;
                    for (std::int64_t q = 0; q < p; ++q) acc += gs[f * p + q];
                    gi[2][f] += static_cast<float>(acc);
                }
            }
        }
    });
    return out;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
    return conv2d_impl(x, w, nullptr, stride, padding);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding) {
    return conv2d_impl(x, w, &bias, stride, padding);
}

// Losses ---------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank("cross_entropy", logits, 2);
    const auto n = logits.dim(0), k = logits.dim(1);
    validate_labels(labels, n, k);
    std::vector<double> ls(static_cast<std::size_t>(k));
    std::vector<float> probs(logits.numel());
    double total = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
        log_softmax_row(logits.data().data() + r * k, k, 1.0, ls.data());
        total -= ls[static_cast<std::size_t>(labels[r])];
        for (std::int64_t j = 0; j < k; ++j) probs[r * k + j] = static_cast<float>(std::exp(ls[j]));
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / double(n)));
    std::vector<int> lab(labels.begin(), labels.end());
    record("cross_entropy", {logits}, out, [probs = std::move(probs), lab = std::move(lab), n, k](Span g, GradIn gi) {
        const float s = g[0] / static_cast<float>(n);
        for (std::int64_t r = 0; r < n; ++r)
            for (std::int64_t j = 0; j < k; ++j) {
                const float onehot = j == lab[r] ? 1.0f : 0.0f;
                gi[0][r * k + j] += s * (probs[r * k + j] - onehot);
            }
    });
    return out;
}

Tensor soft_cross_entropy(const Tensor& logits, const Tensor& target_probs, float temperature) {
    check_temperature(temperature, "soft_cross_entropy");
    require_rank("soft_cross_entropy", logits, 2);
    require_same_shape("soft_cross_entropy", logits, target_probs);
    const auto n = logits.dim(0), k = logits.dim(1);
    for (std::int64_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::int64_t j = 0; j < k; ++j) {
            const float p = target_probs[std::size_t(r * k + j)];
            if (p < 0.0f || !std::isfinite(p)) {
                throw ValidationError("soft_cross_entropy: target row " + std::to_string(r) + " has invalid entry");
            }
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-5) {
            throw ValidationError("soft_cross_entropy: target row " + std::to_string(r) + " sums to " +
                                  std::to_string(s) + ", expected 1");
        }
    }
    const double inv_t = 1.0 / temperature;
    std::vector<double> ls(static_cast<std::size_t>(k));
    std::vector<float> q(logits.numel());
    double total = 0.0;
    for (std::int64_t r = 0; r < n; ++r) {
        log_softmax_row(logits.data().data() + r * k, k, inv_t, ls.data());
        for (std::int64_t j = 0; j < k; ++j) {
            total -= double(target_probs[std::size_t(r * k + j)]) * ls[j];
            q[r * k + j] = static_cast<float>(std::exp(ls[j]));
        }
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / double(n)));
    record("soft_cross_entropy", {logits}, out,
           [q = std::move(q), target_probs, n, k, inv_t](Span g, GradIn gi) {
               const double s = g[0] * inv_t / double(n);
               for (std::int64_t r = 0; r < n; ++r) {
                   double psum = 0.0;
                   for (std::int64_t j = 0; j < k; ++j) psum += target_probs[std::size_t(r * k + j)];
                   for (std::int64_t j = 0; j < k; ++j) {
                       const std::size_t idx = std::size_t(r * k + j);
                       gi[0][idx] += static_cast<float>(s * (q[idx] * psum - target_probs[idx]));
                   }
               }
           });
    return out;
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
    require_same_shape("mse_loss", a, b);
    const std::size_t n = a.numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = double(a[i]) - b[i];
        acc += d * d;
    }
    Tensor out = Tensor::scalar(static_cast<float>(acc / double(n)));
    record("mse_loss", {a, b}, out, [a, b, n](Span g, GradIn gi) {
        const float s = 2.0f * g[0] / static_cast<float>(n);
        for (std::size_t i = 0; i < n; ++i) {
            const float d = s * (a[i] - b[i]);
            if (gi[0]) gi[0][i] += d;
            if (gi[1]) gi[1][i] -= d;
        }
    });
    return out;
}

// Non-differentiable helpers ---------------------------------------------------

std::vector<double> per_sample_cross_entropy(const Tensor& logits, std::span<const int> labels) {
    require_rank("per_sample_cross_entropy", logits, 2);
    const auto n = logits.dim(0), k = logits.dim(1);
    validate_labels(labels, n, k);
    std::vector<double> ls(static_cast<std::size_t>(k));
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t r = 0; r < n; ++r) {
        log_softmax_row(logits.data().data() + r * k, k, 1.0, ls.data());
        out[std::size_t(r)] = -ls[static_cast<std::size_t>(labels[r])];
    }
    return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
    require_rank("argmax_rows", logits, 2);
    const auto n = logits.dim(0), k = logits.dim(1);
    std::vector<int> out(static_cast<std::size_t>(n));
    for (std::int64_t r = 0; r < n; ++r) {
        const float* row = logits.data().data() + r * k;
        out[std::size_t(r)] = static_cast<int>(std::max_element(row, row + k) - row);
    }
    return out;
}

}  // namespace ddlab::ops
