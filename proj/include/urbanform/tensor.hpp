#pragma once

// Minimal reverse-mode autograd over dense NCHW float64 tensors, with the layer kernels the
// segmentation models need. Convolutions run as im2col + Eigen GEMM per image.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "urbanform/error.hpp"

namespace urbanform::nn {

struct Shape {
    std::size_t n = 1, c = 1, h = 1, w = 1;
    std::size_t numel() const noexcept { return n * c * h * w; }
    std::size_t plane() const noexcept { return h * w; }
    bool operator==(const Shape&) const = default;
    std::string str() const {
        return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
    }
};

struct Tensor {
    Shape shape;
    std::vector<double> values;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(s), values(s.numel(), fill) {}

    std::size_t numel() const noexcept { return values.size(); }
    double& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return values[((n * shape.c + c) * shape.h + h) * shape.w + w];
    }
    double operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return values[((n * shape.c + c) * shape.h + h) * shape.w + w];
    }
    double* data() noexcept { return values.data(); }
    const double* data() const noexcept { return values.data(); }
};

struct Node {
    Tensor value;
    Tensor grad;  // allocated on demand
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    Tensor& ensure_grad() {
        if (grad.shape != value.shape || grad.values.size() != value.values.size()) grad = Tensor(value.shape);
        return grad;
    }
    const Shape& shape() const noexcept { return value.shape; }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Tensor t) {
    auto v = std::make_shared<Node>();
    v->value = std::move(t);
    return v;
}

inline Var parameter(Tensor t) {
    auto v = constant(std::move(t));
    v->requires_grad = true;
    return v;
}

namespace detail {

inline Var make_result(Tensor value, std::vector<Var> parents) {
    auto v = std::make_shared<Node>();
    v->value = std::move(value);
    for (const auto& p : parents) v->requires_grad = v->requires_grad || p->requires_grad;
    v->parents = std::move(parents);
    return v;
}

}  // namespace detail

/// Runs reverse-mode accumulation from a scalar output. Gradients add into existing `grad` buffers.
inline void backward(const Var& root) {
    if (root->value.numel() != 1) throw Error("backward() needs a scalar output");
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad().values[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn && (*it)->requires_grad) (*it)->backward_fn();
}

/// Hash of every piecewise-linear branch decision (ReLU sign, max-pool argmax) seen in a forward
/// pass. Two passes with equal traces took identical branches.
struct KinkTrace {
    std::uint64_t hash = 1469598103934665603ull;
    void mix(std::uint64_t v) noexcept {
        hash ^= v + 0x9e3779b97f4a7c15ull + (hash << 6) + (hash >> 2);
    }
};

// --- elementwise / structural ops ---------------------------------------------------------------

inline Var relu(const Var& x, KinkTrace* trace = nullptr) {
    Tensor y(x->shape());
    const auto& xv = x->value.values;
    for (std::size_t i = 0; i < xv.size(); ++i) y.values[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    if (trace) {
        std::uint64_t word = 0;
        for (std::size_t i = 0; i < xv.size(); ++i) {
            word = (word << 1) | (xv[i] > 0.0);
            if (i % 64 == 63) trace->mix(word), word = 0;
        }
        trace->mix(word);
    }
    auto out = detail::make_result(std::move(y), {x});
    Node* self = out.get();
    out->backward_fn = [self, x] {
        if (!x->requires_grad) return;
        auto& gx = x->ensure_grad().values;
        const auto& g = self->grad.values;
        const auto& xv = x->value.values;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += xv[i] > 0.0 ? g[i] : 0.0;
    };
    return out;
}

inline Var add(const Var& a, const Var& b) {
    if (a->shape() != b->shape()) throw Error("add: shape mismatch " + a->shape().str() + " vs " + b->shape().str());
    Tensor y(a->shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y.values[i] = a->value.values[i] + b->value.values[i];
    auto out = detail::make_result(std::move(y), {a, b});
    Node* self = out.get();
    out->backward_fn = [self, a, b] {
        for (const auto& p : {a, b}) {
            if (!p->requires_grad) continue;
            auto& gp = p->ensure_grad().values;
            for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self->grad.values[i];
        }
    };
    return out;
}

inline Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw Error("concat of nothing");
    Shape s = xs.front()->shape();
    s.c = 0;
    for (const auto& x : xs) {
        const auto& xs_ = x->shape();
        if (xs_.n != s.n || xs_.h != s.h || xs_.w != s.w) throw Error("concat: spatial or batch mismatch");
        s.c += xs_.c;
    }
    Tensor y(s);
    const auto plane = s.plane();
    for (std::size_t n = 0; n < s.n; ++n) {
        std::size_t c0 = 0;
        for (const auto& x : xs) {
            const auto cx = x->shape().c;
            std::copy_n(x->value.data() + n * cx * plane, cx * plane, y.data() + (n * s.c + c0) * plane);
            c0 += cx;
        }
    }
    auto out = detail::make_result(std::move(y), xs);
    Node* self = out.get();
    out->backward_fn = [self, xs] {
        const auto& s = self->value.shape;
        const auto plane = s.plane();
        std::size_t c0 = 0;
        for (const auto& x : xs) {
            const auto cx = x->shape().c;
            if (x->requires_grad) {
                auto& gx = x->ensure_grad();
                for (std::size_t n = 0; n < s.n; ++n) {
                    const double* src = self->grad.data() + (n * s.c + c0) * plane;
                    double* dst = gx.data() + n * cx * plane;
                    for (std::size_t i = 0; i < cx * plane; ++i) dst[i] += src[i];
                }
            }
            c0 += cx;
        }
    };
    return out;
}

/// Sum of x weighted elementwise by a constant tensor. Used as a probe loss.
inline Var weighted_sum(const Var& x, const Tensor& weights) {
    if (x->shape() != weights.shape) throw Error("weighted_sum: shape mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < weights.numel(); ++i) s += x->value.values[i] * weights.values[i];
    Tensor y(Shape{1, 1, 1, 1}, s);
    auto out = detail::make_result(std::move(y), {x});
    Node* self = out.get();
    out->backward_fn = [self, x, weights] {
        if (!x->requires_grad) return;
        auto& gx = x->ensure_grad().values;
        const double g = self->grad.values[0];
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * weights.values[i];
    };
    return out;
}

// --- convolution ------------------------------------------------------------------------------

enum class Padding { same, valid };

struct ConvSpec {
    std::size_t stride = 1;
    std::size_t dilation = 1;
    Padding padding = Padding::same;
};

struct ConvGeometry {
    std::size_t k, pad, out_h, out_w;
};

inline ConvGeometry conv_geometry(std::size_t in_h, std::size_t in_w, std::size_t k, const ConvSpec& spec) {
    if (spec.dilation < 1 || spec.stride < 1) throw Error("conv: stride and dilation must be >= 1");
    const std::size_t span = spec.dilation * (k - 1) + 1;
    const std::size_t pad = spec.padding == Padding::same ? spec.dilation * (k - 1) / 2 : 0;
    if (in_h + 2 * pad < span || in_w + 2 * pad < span) throw Error("conv: kernel larger than padded input");
    return {k, pad, (in_h + 2 * pad - span) / spec.stride + 1, (in_w + 2 * pad - span) / spec.stride + 1};
}

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

inline void im2col(const double* img, std::size_t C, std::size_t H, std::size_t W, const ConvGeometry& g,
                   const ConvSpec& s, double* col) {
    const auto P = g.out_h * g.out_w;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                double* row = col + ((c * g.k + ky) * g.k + kx) * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long long iy = static_cast<long long>(oy * s.stride + ky * s.dilation) - static_cast<long long>(g.pad);
                    double* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<long long>(H)) {
                        std::fill_n(dst, g.out_w, 0.0);
                        continue;
                    }
                    const double* src = img + (c * H + static_cast<std::size_t>(iy)) * W;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long long ix = static_cast<long long>(ox * s.stride + kx * s.dilation) - static_cast<long long>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<long long>(W)) ? 0.0 : src[ix];
                    }
                }
            }
}

inline void col2im_add(const double* col, std::size_t C, std::size_t H, std::size_t W, const ConvGeometry& g,
                       const ConvSpec& s, double* img) {
    const auto P = g.out_h * g.out_w;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < g.k; ++ky)
            for (std::size_t kx = 0; kx < g.k; ++kx) {
                const double* row = col + ((c * g.k + ky) * g.k + kx) * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const long long iy = static_cast<long long>(oy * s.stride + ky * s.dilation) - static_cast<long long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long long>(H)) continue;
                    double* dst = img + (c * H + static_cast<std::size_t>(iy)) * W;
                    const double* src = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const long long ix = static_cast<long long>(ox * s.stride + kx * s.dilation) - static_cast<long long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long long>(W)) dst[ix] += src[ox];
                    }
                }
            }
}

/// Output indices [lo, hi) whose tap o*stride + offset - pad lands inside [0, extent).
inline std::pair<std::size_t, std::size_t> valid_outputs(std::size_t out, std::size_t extent, std::size_t offset,
                                                         std::size_t stride, std::size_t pad) {
    const long long base = static_cast<long long>(offset) - static_cast<long long>(pad);
    const long long st = static_cast<long long>(stride);
    const long long lo = base >= 0 ? 0 : (-base + st - 1) / st;
    const long long last = static_cast<long long>(extent) - 1 - base;
    const long long hi = last < 0 ? 0 : std::min<long long>(static_cast<long long>(out), last / st + 1);
    return {static_cast<std::size_t>(std::min<long long>(lo, static_cast<long long>(out))), static_cast<std::size_t>(std::max(hi, lo))};
}

}  // namespace detail

/// Cross-correlation. `weights` is (out_channels, in_channels, k, k); `bias` is (1, out, 1, 1) or null.
inline Var conv2d(const Var& x, const Var& weights, const Var& bias, const ConvSpec& spec = {}) {
    const auto xs = x->shape();
    const auto ws = weights->shape();
    if (ws.c != xs.c) throw Error("conv2d: input has " + std::to_string(xs.c) + " channels, kernel expects " + std::to_string(ws.c));
    if (ws.h != ws.w) throw Error("conv2d: kernel must be square");
    if (bias && bias->value.numel() != ws.n) throw Error("conv2d: bias length mismatch");
    const auto g = conv_geometry(xs.h, xs.w, ws.h, spec);
    const std::size_t K = xs.c * g.k * g.k, P = g.out_h * g.out_w, Cout = ws.n;
    const bool direct = g.k == 1 && spec.stride == 1 && g.pad == 0;

    Tensor y(Shape{xs.n, Cout, g.out_h, g.out_w});
    detail::ConstRowMap W(weights->value.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
    std::vector<double> col(direct ? 0 : K * P);
    for (std::size_t n = 0; n < xs.n; ++n) {
        const double* img = x->value.data() + n * xs.c * xs.plane();
        if (!direct) detail::im2col(img, xs.c, xs.h, xs.w, g, spec, col.data());
        detail::ConstRowMap colm(direct ? img : col.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
        detail::RowMap out(y.data() + n * Cout * P, static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(P));
        out.noalias() = W * colm;
        if (bias)
            for (std::size_t c = 0; c < Cout; ++c) out.row(static_cast<Eigen::Index>(c)).array() += bias->value.values[c];
    }

    std::vector<Var> parents{x, weights};
    if (bias) parents.push_back(bias);
    auto out = detail::make_result(std::move(y), parents);
    Node* self = out.get();
    out->backward_fn = [self, x, weights, bias, spec, g, K, P, Cout, direct] {
        const auto xs = x->shape();
        detail::ConstRowMap W(weights->value.data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
        std::vector<double> col(direct ? 0 : K * P), dcol(x->requires_grad && !direct ? K * P : 0);
        for (std::size_t n = 0; n < xs.n; ++n) {
            detail::ConstRowMap gy(self->grad.data() + n * Cout * P, static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(P));
            const double* img = x->value.data() + n * xs.c * xs.plane();
            if (weights->requires_grad) {
                if (!direct) detail::im2col(img, xs.c, xs.h, xs.w, g, spec, col.data());
                detail::ConstRowMap colm(direct ? img : col.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                detail::RowMap gw(weights->ensure_grad().data(), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(K));
                gw.noalias() += gy * colm.transpose();
            }
            if (bias && bias->requires_grad) {
                auto& gb = bias->ensure_grad().values;
                for (std::size_t c = 0; c < Cout; ++c) gb[c] += gy.row(static_cast<Eigen::Index>(c)).sum();
            }
            if (x->requires_grad) {
                double* gimg = x->ensure_grad().data() + n * xs.c * xs.plane();
                if (direct) {
                    detail::RowMap gx(gimg, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                    gx.noalias() += W.transpose() * gy;
                } else {
                    detail::RowMap dc(dcol.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                    dc.noalias() = W.transpose() * gy;
                    detail::col2im_add(dcol.data(), xs.c, xs.h, xs.w, g, spec, gimg);
                }
            }
        }
    };
    return out;
}

/// Per-channel convolution. `weights` is (channels, 1, k, k).
inline Var depthwise_conv2d(const Var& x, const Var& weights, const ConvSpec& spec = {}) {
    const auto xs = x->shape();
    const auto ws = weights->shape();
    if (ws.n != xs.c || ws.c != 1 || ws.h != ws.w) throw Error("depthwise_conv2d: kernel shape " + ws.str() + " does not fit input " + xs.str());
    const auto g = conv_geometry(xs.h, xs.w, ws.h, spec);
    Tensor y(Shape{xs.n, xs.c, g.out_h, g.out_w});
    const std::size_t st = spec.stride;
    for (std::size_t n = 0; n < xs.n; ++n)
        for (std::size_t c = 0; c < xs.c; ++c) {
            const double* img = x->value.data() + (n * xs.c + c) * xs.plane();
            const double* w = weights->value.data() + c * g.k * g.k;
            double* dst = y.data() + (n * xs.c + c) * g.out_h * g.out_w;
            for (std::size_t ky = 0; ky < g.k; ++ky) {
                const auto [y0, y1] = detail::valid_outputs(g.out_h, xs.h, ky * spec.dilation, st, g.pad);
                for (std::size_t kx = 0; kx < g.k; ++kx) {
                    const double wv = w[ky * g.k + kx];
                    const auto [x0, x1] = detail::valid_outputs(g.out_w, xs.w, kx * spec.dilation, st, g.pad);
                    for (std::size_t oy = y0; oy < y1; ++oy) {
                        const double* row = img + (oy * st + ky * spec.dilation - g.pad) * xs.w + kx * spec.dilation - g.pad;
                        double* drow = dst + oy * g.out_w;
                        for (std::size_t ox = x0; ox < x1; ++ox) drow[ox] += wv * row[ox * st];
                    }
                }
            }
        }
    auto out = detail::make_result(std::move(y), {x, weights});
    Node* self = out.get();
    out->backward_fn = [self, x, weights, g, spec] {
        const auto xs = x->shape();
        const std::size_t st = spec.stride;
        for (std::size_t n = 0; n < xs.n; ++n)
            for (std::size_t c = 0; c < xs.c; ++c) {
                const double* img = x->value.data() + (n * xs.c + c) * xs.plane();
                const double* gy = self->grad.data() + (n * xs.c + c) * g.out_h * g.out_w;
                const double* w = weights->value.data() + c * g.k * g.k;
                double* gw = weights->requires_grad ? weights->ensure_grad().data() + c * g.k * g.k : nullptr;
                double* gx = x->requires_grad ? x->ensure_grad().data() + (n * xs.c + c) * xs.plane() : nullptr;
                for (std::size_t ky = 0; ky < g.k; ++ky) {
                    const auto [y0, y1] = detail::valid_outputs(g.out_h, xs.h, ky * spec.dilation, st, g.pad);
                    for (std::size_t kx = 0; kx < g.k; ++kx) {
                        const auto [x0, x1] = detail::valid_outputs(g.out_w, xs.w, kx * spec.dilation, st, g.pad);
                        const double wv = w[ky * g.k + kx];
                        double acc = 0.0;
                        for (std::size_t oy = y0; oy < y1; ++oy) {
                            const std::size_t off = (oy * st + ky * spec.dilation - g.pad) * xs.w + kx * spec.dilation - g.pad;
                            const double* grow = gy + oy * g.out_w;
                            for (std::size_t ox = x0; ox < x1; ++ox) acc += grow[ox] * img[off + ox * st];
                            if (gx)
                                for (std::size_t ox = x0; ox < x1; ++ox) gx[off + ox * st] += grow[ox] * wv;
                        }
                        if (gw) gw[ky * g.k + kx] += acc;
                    }
                }
            }
    };
    return out;
}

// --- normalization ----------------------------------------------------------------------------

struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.1;
    double eps = 1e-5;

    explicit BatchNormState(std::size_t channels = 0) : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Batch normalization over (N, H, W). Training mode normalizes with batch statistics and
/// updates the running moments; inference mode uses the running moments.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training) {
    const auto s = x->shape();
    if (gamma->value.numel() != s.c || beta->value.numel() != s.c || state.running_mean.size() != s.c)
        throw Error("batch_norm: channel mismatch for input " + s.str());
    const auto plane = s.plane();
    const double m = static_cast<double>(s.n * plane);
    std::vector<double> mean(s.c), invstd(s.c);
    for (std::size_t c = 0; c < s.c; ++c) {
        if (training) {
            double sum = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* p = x->value.data() + (n * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) sum += p[i];
            }
            const double mu = sum / m;
            double ss = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const double* p = x->value.data() + (n * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) ss += (p[i] - mu) * (p[i] - mu);
            }
            const double var = ss / m;
            mean[c] = mu;
            invstd[c] = 1.0 / std::sqrt(var + state.eps);
            const double unbiased = m > 1 ? ss / (m - 1) : var;
            state.running_mean[c] = (1 - state.momentum) * state.running_mean[c] + state.momentum * mu;
            state.running_var[c] = (1 - state.momentum) * state.running_var[c] + state.momentum * unbiased;
        } else {
            mean[c] = state.running_mean[c];
            invstd[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
        }
    }
    Tensor xhat(s), y(s);
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t c = 0; c < s.c; ++c) {
            const std::size_t off = (n * s.c + c) * plane;
            const double gm = gamma->value.values[c], bt = beta->value.values[c];
            for (std::size_t i = 0; i < plane; ++i) {
                const double xh = (x->value.values[off + i] - mean[c]) * invstd[c];
                xhat.values[off + i] = xh;
                y.values[off + i] = gm * xh + bt;
            }
        }
    auto out = detail::make_result(std::move(y), {x, gamma, beta});
    Node* self = out.get();
    out->backward_fn = [self, x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), training, m] {
        const auto s = x->shape();
        const auto plane = s.plane();
        for (std::size_t c = 0; c < s.c; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t n = 0; n < s.n; ++n) {
                const std::size_t off = (n * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    sum_g += self->grad.values[off + i];
                    sum_gx += self->grad.values[off + i] * xhat.values[off + i];
                }
            }
            if (gamma->requires_grad) gamma->ensure_grad().values[c] += sum_gx;
            if (beta->requires_grad) beta->ensure_grad().values[c] += sum_g;
            if (!x->requires_grad) continue;
            auto& gx = x->ensure_grad().values;
            const double gm = gamma->value.values[c];
            for (std::size_t n = 0; n < s.n; ++n) {
                const std::size_t off = (n * s.c + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double g = self->grad.values[off + i];
                    if (training)
                        gx[off + i] += gm * invstd[c] * (g - sum_g / m - xhat.values[off + i] * sum_gx / m);
                    else
                        gx[off + i] += gm * invstd[c] * g;
                }
            }
        }
    };
    return out;
}

// --- pooling and resampling -------------------------------------------------------------------

/// 2x2 max pooling, stride 2. Ties go to the first element in row-major order.
inline Var max_pool2(const Var& x, KinkTrace* trace = nullptr) {
    const auto s = x->shape();
    if (s.h < 2 || s.w < 2) throw Error("max_pool2: input too small");
    const std::size_t oh = s.h / 2, ow = s.w / 2;
    Tensor y(Shape{s.n, s.c, oh, ow});
    std::vector<std::uint32_t> arg(y.numel());
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        const double* img = x->value.data() + nc * s.plane();
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                std::size_t best = (2 * oy) * s.w + 2 * ox;
                for (std::size_t dy = 0; dy < 2; ++dy)
                    for (std::size_t dx = 0; dx < 2; ++dx) {
                        const std::size_t k = (2 * oy + dy) * s.w + 2 * ox + dx;
                        if (img[k] > img[best]) best = k;
                    }
                const std::size_t o = nc * oh * ow + oy * ow + ox;
                y.values[o] = img[best];
                arg[o] = static_cast<std::uint32_t>(best);
            }
    }
    if (trace)
        for (auto a : arg) trace->mix(a);
    auto out = detail::make_result(std::move(y), {x});
    Node* self = out.get();
    out->backward_fn = [self, x, arg = std::move(arg), oh, ow] {
        if (!x->requires_grad) return;
        const auto s = x->shape();
        auto& gx = x->ensure_grad().values;
        for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
            for (std::size_t k = 0; k < oh * ow; ++k)
                gx[nc * s.plane() + arg[nc * oh * ow + k]] += self->grad.values[nc * oh * ow + k];
    };
    return out;
}

/// 2x2 average pooling, stride 2.
inline Var avg_pool2(const Var& x) {
    const auto s = x->shape();
    if (s.h < 2 || s.w < 2) throw Error("avg_pool2: input too small");
    const std::size_t oh = s.h / 2, ow = s.w / 2;
    Tensor y(Shape{s.n, s.c, oh, ow});
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        const double* img = x->value.data() + nc * s.plane();
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                const std::size_t k = (2 * oy) * s.w + 2 * ox;
                y.values[nc * oh * ow + oy * ow + ox] = 0.25 * (img[k] + img[k + 1] + img[k + s.w] + img[k + s.w + 1]);
            }
    }
    auto out = detail::make_result(std::move(y), {x});
    Node* self = out.get();
    out->backward_fn = [self, x, oh, ow] {
        if (!x->requires_grad) return;
        const auto s = x->shape();
        auto& gx = x->ensure_grad().values;
        for (std::size_t nc = 0; nc < s.n * s.c; ++nc)
            for (std::size_t oy = 0; oy < oh; ++oy)
                for (std::size_t ox = 0; ox < ow; ++ox) {
                    const double g = 0.25 * self->grad.values[nc * oh * ow + oy * ow + ox];
                    const std::size_t k = nc * s.plane() + (2 * oy) * s.w + 2 * ox;
                    gx[k] += g;
                    gx[k + 1] += g;
                    gx[k + s.w] += g;
                    gx[k + s.w + 1] += g;
                }
    };
    return out;
}

/// Mean over each channel plane, giving (N, C, 1, 1).
inline Var global_avg_pool(const Var& x) {
    const auto s = x->shape();
    Tensor y(Shape{s.n, s.c, 1, 1});
    const double inv = 1.0 / static_cast<double>(s.plane());
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        const double* p = x->value.data() + nc * s.plane();
        y.values[nc] = std::accumulate(p, p + s.plane(), 0.0) * inv;
    }
    auto out = detail::make_result(std::move(y), {x});
    Node* self = out.get();
    out->backward_fn = [self, x, inv] {
        if (!x->requires_grad) return;
        const auto s = x->shape();
        auto& gx = x->ensure_grad().values;
        for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
            const double g = self->grad.values[nc] * inv;
            for (std::size_t i = 0; i < s.plane(); ++i) gx[nc * s.plane() + i] += g;
        }
    };
    return out;
}

namespace detail {

struct InterpTaps {
    std::vector<std::size_t> lo, hi;
    std::vector<double> frac;
};

/// Align-corners sampling positions: output i maps to i * (in - 1) / (out - 1).
inline InterpTaps interp_taps(std::size_t in, std::size_t out) {
    InterpTaps t;
    t.lo.resize(out);
    t.hi.resize(out);
    t.frac.resize(out);
    for (std::size_t i = 0; i < out; ++i) {
        const double src = out > 1 ? static_cast<double>(i) * static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
        auto lo = static_cast<std::size_t>(std::floor(src));
        lo = std::min(lo, in - 1);
        t.lo[i] = lo;
        t.hi[i] = std::min(lo + 1, in - 1);
        t.frac[i] = src - static_cast<double>(lo);
    }
    return t;
}

}  // namespace detail

/// Bilinear resampling with aligned corners.
inline Var bilinear_upsample(const Var& x, std::size_t out_h, std::size_t out_w) {
    const auto s = x->shape();
    if (s.numel() == 0 || s.h == 0 || s.w == 0) throw Error("bilinear_upsample: empty input");
    if (out_h < s.h || out_w < s.w) throw Error("bilinear_upsample: output smaller than input");
    if (out_h == s.h && out_w == s.w) return x;
    const auto ty = detail::interp_taps(s.h, out_h), tx = detail::interp_taps(s.w, out_w);
    Tensor y(Shape{s.n, s.c, out_h, out_w});
    for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
        const double* img = x->value.data() + nc * s.plane();
        double* dst = y.data() + nc * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const double fy = ty.frac[oy];
            const double* r0 = img + ty.lo[oy] * s.w;
            const double* r1 = img + ty.hi[oy] * s.w;
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const double fx = tx.frac[ox];
                const double top = r0[tx.lo[ox]] * (1 - fx) + r0[tx.hi[ox]] * fx;
                const double bot = r1[tx.lo[ox]] * (1 - fx) + r1[tx.hi[ox]] * fx;
                dst[oy * out_w + ox] = top * (1 - fy) + bot * fy;
            }
        }
    }
    auto out = detail::make_result(std::move(y), {x});
    Node* self = out.get();
    out->backward_fn = [self, x, ty, tx, out_h, out_w] {
        if (!x->requires_grad) return;
        const auto s = x->shape();
        auto& gx = x->ensure_grad().values;
        for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
            double* g = gx.data() + nc * s.plane();
            const double* gy = self->grad.data() + nc * out_h * out_w;
            for (std::size_t oy = 0; oy < out_h; ++oy) {
                const double fy = ty.frac[oy];
                for (std::size_t ox = 0; ox < out_w; ++ox) {
                    const double fx = tx.frac[ox];
                    const double v = gy[oy * out_w + ox];
                    g[ty.lo[oy] * s.w + tx.lo[ox]] += v * (1 - fy) * (1 - fx);
                    g[ty.lo[oy] * s.w + tx.hi[ox]] += v * (1 - fy) * fx;
                    g[ty.hi[oy] * s.w + tx.lo[ox]] += v * fy * (1 - fx);
                    g[ty.hi[oy] * s.w + tx.hi[ox]] += v * fy * fx;
                }
            }
        }
    };
    return out;
}

// --- loss -------------------------------------------------------------------------------------

/// Channel softmax of an (N, C, H, W) score tensor.
inline Tensor softmax_channels(const Tensor& logits) {
    const auto s = logits.shape;
    Tensor p(s);
    const auto plane = s.plane();
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
            double mx = -INFINITY;
            for (std::size_t c = 0; c < s.c; ++c) mx = std::max(mx, logits.values[(n * s.c + c) * plane + i]);
            double z = 0.0;
            for (std::size_t c = 0; c < s.c; ++c) {
                const double e = std::exp(logits.values[(n * s.c + c) * plane + i] - mx);
                p.values[(n * s.c + c) * plane + i] = e;
                z += e;
            }
            for (std::size_t c = 0; c < s.c; ++c) p.values[(n * s.c + c) * plane + i] /= z;
        }
    return p;
}

/// Mean softmax cross-entropy over cells whose mask is set. `labels` and `mask` are (N, H, W).
inline Var masked_cross_entropy(const Var& logits, const std::vector<std::uint8_t>& labels,
                                const std::vector<std::uint8_t>& mask) {
    const auto s = logits->shape();
    const auto plane = s.plane();
    if (labels.size() != s.n * plane || mask.size() != s.n * plane) throw Error("cross entropy: label/mask size mismatch");
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) {
            if (labels[i] >= s.c) throw Error("cross entropy: label " + std::to_string(labels[i]) + " outside class range");
            ++count;
        }
    if (count == 0) throw Error("cross entropy: no labeled cells");
    auto prob = softmax_channels(logits->value);
    double loss = 0.0;
    for (std::size_t n = 0; n < s.n; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
            if (!mask[n * plane + i]) continue;
            const double p = prob.values[(n * s.c + labels[n * plane + i]) * plane + i];
            loss -= std::log(std::max(p, 1e-300));
        }
    const double inv = 1.0 / static_cast<double>(count);
    auto out = detail::make_result(Tensor(Shape{1, 1, 1, 1}, loss * inv), {logits});
    Node* self = out.get();
    out->backward_fn = [self, logits, labels, mask, prob = std::move(prob), inv] {
        if (!logits->requires_grad) return;
        const auto s = logits->shape();
        const auto plane = s.plane();
        auto& g = logits->ensure_grad().values;
        const double scale = self->grad.values[0] * inv;
        for (std::size_t n = 0; n < s.n; ++n)
            for (std::size_t i = 0; i < plane; ++i) {
                if (!mask[n * plane + i]) continue;
                for (std::size_t c = 0; c < s.c; ++c) {
                    const std::size_t k = (n * s.c + c) * plane + i;
                    g[k] += scale * (prob.values[k] - (c == labels[n * plane + i] ? 1.0 : 0.0));
                }
            }
    };
    return out;
}

}  // namespace urbanform::nn
