#pragma once

// Differentiable network primitives on [N,C,H,W] tensors.
//
// Forward kernels accumulate each output element in a fixed order (bias
// first, then input channel, kernel row, kernel column) so that they agree
// bit-for-bit with direct-loop reference implementations. Backward passes go
// through Eigen GEMMs; they are deterministic but not order-matched, and are
// verified against finite differences instead.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "bcmf/error.hpp"
#include "bcmf/label_map.hpp"
#include "bcmf/tensor.hpp"

namespace bcmf {

enum class Mode { train, eval };

struct ConvParams {
    Tensor weight;  // [Co, Ci, kh, kw]
    Tensor bias;    // [Co] or undefined
    std::size_t stride = 1;
    std::size_t pad = 0;
};

struct BatchNormParams {
    Tensor gamma;         // [C]
    Tensor beta;          // [C]
    Tensor running_mean;  // [C]; undefined until the first training update
    Tensor running_var;   // [C]
    double eps = 1e-5;
    double momentum = 0.1;
};

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

inline void require_rank4(const Tensor& x, const char* op) {
    require(x.defined() && x.rank() == 4, ErrorKind::shape,
            std::string(op) + ": expected [N,C,H,W], got " + (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
}

struct ConvGeometry {
    std::size_t n, ci, h, w, co, kh, kw, stride, pad, ho, wo;
    std::size_t k() const { return ci * kh * kw; }
    std::size_t p() const { return ho * wo; }
    bool is_pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

inline ConvGeometry conv_geometry(const Tensor& x, const ConvParams& p) {
    require_rank4(x, "conv2d");
    require(p.weight.defined() && p.weight.rank() == 4, ErrorKind::shape, "conv2d: weight must be [Co,Ci,kh,kw]");
    require(p.stride >= 1, ErrorKind::domain, "conv2d: stride must be >= 1");
    ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), p.weight.dim(0), p.weight.dim(2), p.weight.dim(3), p.stride, p.pad, 0, 0};
    require(p.weight.dim(1) == g.ci, ErrorKind::shape,
            "conv2d: input has " + std::to_string(g.ci) + " channels, weight expects " + std::to_string(p.weight.dim(1)));
    if (p.bias.defined()) require(p.bias.numel() == g.co, ErrorKind::shape, "conv2d: bias length must equal Co");
    const std::size_t hp = g.h + 2 * g.pad, wp = g.w + 2 * g.pad;
    require(hp >= g.kh && wp >= g.kw, ErrorKind::shape, "conv2d: kernel larger than padded input " + shape_str(x.shape()));
    // Output extents floor, so a 3x3 stride-2 conv with padding 1 halves even inputs.
    g.ho = (hp - g.kh) / g.stride + 1;
    g.wo = (wp - g.kw) / g.stride + 1;
    return g;
}

// col[k][p], k = (ci*kh + ky)*kw + kx, p = oy*wo + ox; zero outside the image.
inline void im2col(const double* x, const ConvGeometry& g, double* col) {
    const std::size_t P = g.p();
    for (std::size_t c = 0; c < g.ci; ++c) {
        const double* plane = x + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                double* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    double* dst = row + oy * g.wo;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
                        std::fill(dst, dst + g.wo, 0.0);
                        continue;
                    }
                    const double* src = plane + static_cast<std::size_t>(iy) * g.w;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* dx) {
    const std::size_t P = g.p();
    for (std::size_t c = 0; c < g.ci; ++c) {
        double* plane = dx + c * g.h * g.w;
        for (std::size_t ky = 0; ky < g.kh; ++ky) {
            for (std::size_t kx = 0; kx < g.kw; ++kx) {
                const double* row = col + ((c * g.kh + ky) * g.kw + kx) * P;
                for (std::size_t oy = 0; oy < g.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
                    double* dst = plane + static_cast<std::size_t>(iy) * g.w;
                    const double* src = row + oy * g.wo;
                    for (std::size_t ox = 0; ox < g.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const ConvParams& p) {
    const detail::ConvGeometry g = detail::conv_geometry(x, p);
    const std::size_t K = g.k(), P = g.p();
    Tensor out({g.n, g.co, g.ho, g.wo});
    std::vector<double> col(g.is_pointwise() ? 0 : K * P);
    const double* w = p.weight.data().data();
    const double* bias = p.bias.defined() ? p.bias.data().data() : nullptr;
    constexpr std::size_t kTile = 256;
    for (std::size_t n = 0; n < g.n; ++n) {
        const double* xin = x.data().data() + n * g.ci * g.h * g.w;
        const double* src = xin;
        if (!g.is_pointwise()) {
            detail::im2col(xin, g, col.data());
            src = col.data();
        }
        double* o = out.data().data() + n * g.co * P;
        for (std::size_t p0 = 0; p0 < P; p0 += kTile) {
            const std::size_t len = std::min(kTile, P - p0);
            for (std::size_t co = 0; co < g.co; ++co) {
                double* dst = o + co * P + p0;
                const double b = bias ? bias[co] : 0.0;
                for (std::size_t j = 0; j < len; ++j) dst[j] = b;
                const double* wrow = w + co * K;
                for (std::size_t k = 0; k < K; ++k) {
                    const double wk = wrow[k];
                    const double* s = src + k * P + p0;
                    for (std::size_t j = 0; j < len; ++j) dst[j] += wk * s[j];
                }
            }
        }
    }
    detail::check_finite(out, "conv2d");
    if (Tape* tape = detail::recording_tape({&x, &p.weight, &p.bias})) {
        out.set_requires_grad();
        tape->record(out, [x, p, out, g]() mutable {
            const std::size_t K = g.k(), P = g.p();
            auto gout = out.grad();
            const bool need_x = x.requires_grad();
            const bool need_w = p.weight.requires_grad();
            const bool need_b = p.bias.defined() && p.bias.requires_grad();
            std::vector<double> col(K * P);
            std::vector<double> dcol(need_x ? K * P : 0);
            detail::ConstRowMap wmat(p.weight.data().data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(K));
            double* gw = need_w ? p.weight.grad_buffer().data() : nullptr;
            double* gb = need_b ? p.bias.grad_buffer().data() : nullptr;
            double* gx = need_x ? x.grad_buffer().data() : nullptr;
            for (std::size_t n = 0; n < g.n; ++n) {
                detail::ConstRowMap dout(gout.data() + n * g.co * P, static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(P));
                if (need_w) {
                    const double* src = x.data().data() + n * g.ci * g.h * g.w;
                    if (!g.is_pointwise()) {
                        detail::im2col(src, g, col.data());
                        src = col.data();
                    }
                    detail::ConstRowMap cmat(src, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                    detail::RowMap(gw, static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(K)).noalias() += dout * cmat.transpose();
                }
                if (need_b) {
                    for (std::size_t co = 0; co < g.co; ++co) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < P; ++j) acc += dout(static_cast<Eigen::Index>(co), static_cast<Eigen::Index>(j));
                        gb[co] += acc;
                    }
                }
                if (need_x) {
                    double* dxn = gx + n * g.ci * g.h * g.w;
                    if (g.is_pointwise()) {
                        detail::RowMap(dxn, static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P)).noalias() += wmat.transpose() * dout;
                    } else {
                        detail::RowMap dc(dcol.data(), static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(P));
                        dc.noalias() = wmat.transpose() * dout;
                        detail::col2im_add(dcol.data(), g, dxn);
                    }
                }
            }
        });
    }
    return out;
}

/// Mean over non-overlapping or strided k x k windows.
inline Tensor avg_pool2d(const Tensor& x, std::size_t k, std::size_t s) {
    detail::require_rank4(x, "avg_pool2d");
    require(k >= 1 && s >= 1, ErrorKind::domain, "avg_pool2d: window and stride must be >= 1");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(H >= k && W >= k, ErrorKind::shape, "avg_pool2d: window larger than input " + shape_str(x.shape()));
    require((H - k) % s == 0 && (W - k) % s == 0, ErrorKind::shape, "avg_pool2d: output extent is not integral");
    const std::size_t Ho = (H - k) / s + 1, Wo = (W - k) / s + 1;
    const double area = static_cast<double>(k * k);
    Tensor out({N, C, Ho, Wo});
    const double* in = x.data().data();
    double* o = out.data().data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* plane = in + nc * H * W;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                double acc = 0.0;
                for (std::size_t ky = 0; ky < k; ++ky)
                    for (std::size_t kx = 0; kx < k; ++kx) acc += plane[(oy * s + ky) * W + ox * s + kx];
                o[(nc * Ho + oy) * Wo + ox] = acc / area;
            }
        }
    }
    detail::check_finite(out, "avg_pool2d");
    if (Tape* tape = detail::recording_tape({&x})) {
        out.set_requires_grad();
        tape->record(out, [x, out, k, s, N, C, H, W, Ho, Wo, area]() mutable {
            auto g = out.grad();
            auto gx = x.grad_buffer();
            for (std::size_t nc = 0; nc < N * C; ++nc)
                for (std::size_t oy = 0; oy < Ho; ++oy)
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        const double v = g[(nc * Ho + oy) * Wo + ox] / area;
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) gx[nc * H * W + (oy * s + ky) * W + ox * s + kx] += v;
                    }
        });
    }
    return out;
}

inline Tensor global_avg_pool(const Tensor& x) {
    detail::require_rank4(x, "global_avg_pool");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out({N, C, 1, 1});
    const double* in = x.data().data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i) acc += in[nc * HW + i];
        out[nc] = acc / static_cast<double>(HW);
    }
    detail::check_finite(out, "global_avg_pool");
    if (Tape* tape = detail::recording_tape({&x})) {
        out.set_requires_grad();
        tape->record(out, [x, out, N, C, HW]() mutable {
            auto g = out.grad();
            auto gx = x.grad_buffer();
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                const double v = g[nc] / static_cast<double>(HW);
                for (std::size_t i = 0; i < HW; ++i) gx[nc * HW + i] += v;
            }
        });
    }
    return out;
}

namespace detail {

struct LerpTap {
    std::size_t lo, hi;
    double frac;
};

// Half-pixel centres: u = (i + 0.5) * src / dst - 0.5, clamped to [0, src-1].
inline std::vector<LerpTap> lerp_taps(std::size_t src, std::size_t dst) {
    std::vector<LerpTap> taps(dst);
    for (std::size_t i = 0; i < dst; ++i) {
        double u = (static_cast<double>(i) + 0.5) * static_cast<double>(src) / static_cast<double>(dst) - 0.5;
        u = std::clamp(u, 0.0, static_cast<double>(src - 1));
        const auto lo = static_cast<std::size_t>(std::floor(u));
        taps[i] = {lo, std::min(lo + 1, src - 1), u - static_cast<double>(lo)};
    }
    return taps;
}

}  // namespace detail

inline Tensor bilinear_upsample(const Tensor& x, std::size_t out_h, std::size_t out_w) {
    detail::require_rank4(x, "bilinear_upsample");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    require(out_h >= H && out_w >= W, ErrorKind::shape,
            "bilinear_upsample: target " + std::to_string(out_h) + "x" + std::to_string(out_w) + " smaller than source " + shape_str(x.shape()));
    const auto ty = detail::lerp_taps(H, out_h);
    const auto tx = detail::lerp_taps(W, out_w);
    Tensor out({N, C, out_h, out_w});
    const double* in = x.data().data();
    double* o = out.data().data();
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* plane = in + nc * H * W;
        for (std::size_t i = 0; i < out_h; ++i) {
            const auto [y0, y1, fy] = ty[i];
            for (std::size_t j = 0; j < out_w; ++j) {
                const auto [x0, x1, fx] = tx[j];
                const double top = (1.0 - fx) * plane[y0 * W + x0] + fx * plane[y0 * W + x1];
                const double bottom = (1.0 - fx) * plane[y1 * W + x0] + fx * plane[y1 * W + x1];
                o[(nc * out_h + i) * out_w + j] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    detail::check_finite(out, "bilinear_upsample");
    if (Tape* tape = detail::recording_tape({&x})) {
        out.set_requires_grad();
        tape->record(out, [x, out, N, C, H, W, out_h, out_w, ty, tx]() mutable {
            auto g = out.grad();
            auto gx = x.grad_buffer();
            for (std::size_t nc = 0; nc < N * C; ++nc) {
                double* plane = gx.data() + nc * H * W;
                for (std::size_t i = 0; i < out_h; ++i) {
                    const auto [y0, y1, fy] = ty[i];
                    for (std::size_t j = 0; j < out_w; ++j) {
                        const auto [x0, x1, fx] = tx[j];
                        const double v = g[(nc * out_h + i) * out_w + j];
                        plane[y0 * W + x0] += v * (1.0 - fy) * (1.0 - fx);
                        plane[y0 * W + x1] += v * (1.0 - fy) * fx;
                        plane[y1 * W + x0] += v * fy * (1.0 - fx);
                        plane[y1 * W + x1] += v * fy * fx;
                    }
                }
            }
        });
    }
    return out;
}

/// Train mode normalizes by batch statistics and updates the running
/// estimates (unbiased variance); eval mode is the affine map given by them.
inline Tensor batch_norm(const Tensor& x, BatchNormParams& p, Mode mode) {
    detail::require_rank4(x, "batch_norm");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    require(p.gamma.defined() && p.gamma.numel() == C && p.beta.defined() && p.beta.numel() == C, ErrorKind::shape,
            "batch_norm: gamma/beta must have " + std::to_string(C) + " entries");
    require(p.eps > 0.0, ErrorKind::domain, "batch_norm: eps must be positive");
    const std::size_t count = N * HW;
    const double* in = x.data().data();
    Tensor out(x.shape());
    double* o = out.data().data();
    std::vector<double> mean(C), invstd(C);

    if (mode == Mode::train) {
        require(count >= 2, ErrorKind::shape, "batch_norm: training needs at least two values per channel");
        require(p.momentum > 0.0 && p.momentum < 1.0, ErrorKind::domain, "batch_norm: momentum must lie in (0,1)");
        if (!p.running_mean.defined()) p.running_mean = Tensor({C}, 0.0);
        if (!p.running_var.defined()) p.running_var = Tensor({C}, 1.0);
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < HW; ++i) s += in[(n * C + c) * HW + i];
            const double m = s / static_cast<double>(count);
            double ss = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < HW; ++i) {
                    const double d = in[(n * C + c) * HW + i] - m;
                    ss += d * d;
                }
            const double var = ss / static_cast<double>(count);
            mean[c] = m;
            invstd[c] = 1.0 / std::sqrt(var + p.eps);
            p.running_mean[c] = (1.0 - p.momentum) * p.running_mean[c] + p.momentum * m;
            p.running_var[c] = (1.0 - p.momentum) * p.running_var[c] + p.momentum * ss / static_cast<double>(count - 1);
        }
    } else {
        require(p.running_mean.defined() && p.running_var.defined(), ErrorKind::state,
                "batch_norm: eval mode before any running-statistics update");
        for (std::size_t c = 0; c < C; ++c) {
            require(p.running_var[c] >= 0.0, ErrorKind::domain, "batch_norm: negative running variance");
            mean[c] = p.running_mean[c];
            invstd[c] = 1.0 / std::sqrt(p.running_var[c] + p.eps);
        }
    }

    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const double gm = p.gamma[c], bt = p.beta[c], m = mean[c], is = invstd[c];
            const std::size_t base = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) o[base + i] = gm * ((in[base + i] - m) * is) + bt;
        }
    detail::check_finite(out, "batch_norm");

    if (Tape* tape = detail::recording_tape({&x, &p.gamma, &p.beta})) {
        out.set_requires_grad();
        tape->record(out, [x, gamma = p.gamma, beta = p.beta, out, mean, invstd, mode, N, C, HW]() mutable {
            auto g = out.grad();
            const double* in = x.data().data();
            const double cnt = static_cast<double>(N * HW);
            double* gx = x.requires_grad() ? x.grad_buffer().data() : nullptr;
            double* gg = gamma.requires_grad() ? gamma.grad_buffer().data() : nullptr;
            double* gb = beta.requires_grad() ? beta.grad_buffer().data() : nullptr;
            for (std::size_t c = 0; c < C; ++c) {
                double sum_g = 0.0, sum_gx = 0.0;
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < HW; ++i) {
                        const std::size_t idx = (n * C + c) * HW + i;
                        sum_g += g[idx];
                        sum_gx += g[idx] * (in[idx] - mean[c]) * invstd[c];
                    }
                if (gg) gg[c] += sum_gx;
                if (gb) gb[c] += sum_g;
                if (!gx) continue;
                const double gm = gamma[c], is = invstd[c];
                for (std::size_t n = 0; n < N; ++n)
                    for (std::size_t i = 0; i < HW; ++i) {
                        const std::size_t idx = (n * C + c) * HW + i;
                        if (mode == Mode::train) {
                            const double xhat = (in[idx] - mean[c]) * is;
                            gx[idx] += gm * is * (g[idx] - sum_g / cnt - xhat * sum_gx / cnt);
                        } else {
                            gx[idx] += gm * is * g[idx];
                        }
                    }
            }
        });
    }
    return out;
}

inline Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    auto o = out.data();
    auto in = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = in[i] > 0.0 ? in[i] : 0.0;
    detail::check_finite(out, "relu");
    if (Tape* tape = detail::recording_tape({&x})) {
        out.set_requires_grad();
        tape->record(out, [x, out]() mutable {
            auto g = out.grad();
            auto gx = x.grad_buffer();
            auto in = x.data();
            for (std::size_t i = 0; i < g.size(); ++i)
                if (in[i] > 0.0) gx[i] += g[i];
        });
    }
    return out;
}

/// Softmax over the channel axis of [N,M,H,W], max-subtracted.
inline Tensor softmax_channels(const Tensor& x) {
    detail::require_rank4(x, "softmax_channels");
    const std::size_t N = x.dim(0), M = x.dim(1), HW = x.dim(2) * x.dim(3);
    Tensor out(x.shape());
    const double* in = x.data().data();
    double* o = out.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        const std::size_t base = n * M * HW;
        for (std::size_t i = 0; i < HW; ++i) {
            double mx = in[base + i];
            for (std::size_t c = 1; c < M; ++c) mx = std::max(mx, in[base + c * HW + i]);
            double z = 0.0;
            for (std::size_t c = 0; c < M; ++c) {
                const double e = std::exp(in[base + c * HW + i] - mx);
                o[base + c * HW + i] = e;
                z += e;
            }
            for (std::size_t c = 0; c < M; ++c) o[base + c * HW + i] /= z;
        }
    }
    detail::check_finite(out, "softmax_channels");
    if (Tape* tape = detail::recording_tape({&x})) {
        out.set_requires_grad();
        tape->record(out, [x, out, N, M, HW]() mutable {
            auto g = out.grad();
            auto pr = out.data();
            auto gx = x.grad_buffer();
            for (std::size_t n = 0; n < N; ++n) {
                const std::size_t base = n * M * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < M; ++c) dot += g[base + c * HW + i] * pr[base + c * HW + i];
                    for (std::size_t c = 0; c < M; ++c) {
                        const std::size_t idx = base + c * HW + i;
                        gx[idx] += pr[idx] * (g[idx] - dot);
                    }
                }
            }
        });
    }
    return out;
}

inline constexpr double kProbabilityFloor = 1e-12;

/// Per-pixel -log(probs[label]) as [N,H,W]; ignored pixels are 0.
inline Tensor cross_entropy_map(const Tensor& probs, const LabelBatch& labels) {
    detail::require_rank4(probs, "cross_entropy_map");
    const std::size_t N = probs.dim(0), M = probs.dim(1), H = probs.dim(2), W = probs.dim(3), HW = H * W;
    require(labels.size() == N, ErrorKind::shape, "cross_entropy_map: batch has " + std::to_string(N) + " samples but " +
                                                       std::to_string(labels.size()) + " label maps");
    for (const LabelMap& lm : labels) {
        require(lm.height == H && lm.width == W && lm.labels.size() == HW, ErrorKind::shape,
                "cross_entropy_map: label map extents do not match probabilities");
        for (std::int32_t v : lm.labels)
            require(v == lm.ignore_index || (v >= 0 && static_cast<std::size_t>(v) < M), ErrorKind::domain,
                    "cross_entropy_map: label " + std::to_string(v) + " out of range for " + std::to_string(M) + " classes");
    }
    Tensor out({N, H, W});
    const double* pr = probs.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        const LabelMap& lm = labels[n];
        for (std::size_t i = 0; i < HW; ++i) {
            const std::int32_t y = lm.labels[i];
            if (y == lm.ignore_index) continue;
            out[n * HW + i] = -std::log(std::max(pr[(n * M + static_cast<std::size_t>(y)) * HW + i], kProbabilityFloor));
        }
    }
    detail::check_finite(out, "cross_entropy_map");
    if (Tape* tape = detail::recording_tape({&probs})) {
        out.set_requires_grad();
        tape->record(out, [probs, labels, out, N, M, HW]() mutable {
            auto g = out.grad();
            auto gp = probs.grad_buffer();
            auto pr = probs.data();
            for (std::size_t n = 0; n < N; ++n) {
                const LabelMap& lm = labels[n];
                for (std::size_t i = 0; i < HW; ++i) {
                    const std::int32_t y = lm.labels[i];
                    if (y == lm.ignore_index) continue;
                    const std::size_t idx = (n * M + static_cast<std::size_t>(y)) * HW + i;
                    if (pr[idx] > kProbabilityFloor) gp[idx] -= g[n * HW + i] / pr[idx];
                }
            }
        });
    }
    return out;
}

/// Concatenation along the channel axis; all inputs share N, H, W.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    require(!parts.empty(), ErrorKind::shape, "concat_channels: no inputs");
    for (const Tensor& t : parts) detail::require_rank4(t, "concat_channels");
    const std::size_t N = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3), HW = H * W;
    std::size_t C = 0;
    for (const Tensor& t : parts) {
        require(t.dim(0) == N && t.dim(2) == H && t.dim(3) == W, ErrorKind::shape, "concat_channels: N/H/W mismatch");
        C += t.dim(1);
    }
    Tensor out({N, C, H, W});
    std::size_t offset = 0;
    for (const Tensor& t : parts) {
        const std::size_t Ct = t.dim(1);
        for (std::size_t n = 0; n < N; ++n)
            std::copy_n(t.data().data() + n * Ct * HW, Ct * HW, out.data().data() + (n * C + offset) * HW);
        offset += Ct;
    }
    bool any = false;
    for (const Tensor& t : parts) any = any || t.requires_grad();
    if (Tape* tape = Tape::active(); tape && any) {
        out.set_requires_grad();
        tape->record(out, [parts, out, N, C, HW]() mutable {
            auto g = out.grad();
            std::size_t offset = 0;
            for (const Tensor& t : parts) {
                const std::size_t Ct = t.dim(1);
                if (t.requires_grad()) {
                    auto gt = t.grad_buffer();
                    for (std::size_t n = 0; n < N; ++n)
                        for (std::size_t i = 0; i < Ct * HW; ++i) gt[n * Ct * HW + i] += g[(n * C + offset) * HW + i];
                }
                offset += Ct;
            }
        });
    }
    return out;
}

/// Mean of the listed elements (in list order) as a [1] tensor; 0 if empty.
inline Tensor gather_mean(const Tensor& x, const std::vector<std::size_t>& indices) {
    if (indices.empty()) return Tensor::scalar(0.0);
    double acc = 0.0;
    for (std::size_t idx : indices) {
        require(idx < x.numel(), ErrorKind::shape, "gather_mean: index out of range");
        acc += x[idx];
    }
    const double cnt = static_cast<double>(indices.size());
    Tensor out = Tensor::scalar(acc / cnt);
    detail::check_finite(out, "gather_mean");
    if (Tape* tape = detail::recording_tape({&x})) {
        out.set_requires_grad();
        tape->record(out, [x, indices, out, cnt]() mutable {
            const double g = out.grad()[0] / cnt;
            auto gx = x.grad_buffer();
            for (std::size_t idx : indices) gx[idx] += g;
        });
    }
    return out;
}

/// One SGD-with-momentum update on raw buffers:
/// v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.
inline void sgd_step(std::span<double> param, std::span<const double> grad, std::span<double> velocity, double lr,
                     double momentum, double weight_decay) {
    require(param.size() == grad.size() && param.size() == velocity.size(), ErrorKind::shape, "sgd_step: buffer length mismatch");
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * param[i];
        param[i] -= lr * velocity[i];
    }
}

/// Momentum state for a fixed list of parameter tensors.
class Sgd {
   public:
    Sgd(std::vector<Tensor> params, double momentum, double weight_decay)
        : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {
        for (const Tensor& t : params_) velocity_.emplace_back(t.numel(), 0.0);
    }

    void step(double lr) {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& t = params_[i];
            if (!t.has_grad()) t.grad_buffer();
            sgd_step(t.data(), t.grad(), velocity_[i], lr, momentum_, weight_decay_);
        }
    }

    void zero_grad() {
        for (Tensor& t : params_) t.zero_grad();
    }

   private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> velocity_;
    double momentum_;
    double weight_decay_;
};

}  // namespace bcmf
