#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <vector>

#include "lanefusion/autograd.hpp"

namespace lanefusion {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace detail {

inline std::vector<float>& scratch_a() {
    thread_local std::vector<float> buf;
    return buf;
}
inline std::vector<float>& scratch_b() {
    thread_local std::vector<float> buf;
    return buf;
}

// Unfold one image (C,H,W) into (C*kh*kw, Hg*Wg) where (Hg,Wg) is the window
// grid: window (oy,ox) reads input pixel (oy*stride-pad+ky, ox*stride-pad+kx).
// Every destination element is written (zeros where out of bounds).
inline void im2col(const float* src, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int Hg, int Wg, float* dst) {
    const int64_t grid = static_cast<int64_t>(Hg) * Wg;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                float* out = dst + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) * grid;
                for (int oy = 0; oy < Hg; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    float* orow = out + static_cast<int64_t>(oy) * Wg;
                    if (iy < 0 || iy >= H) {
                        std::fill(orow, orow + Wg, 0.0f);
                        continue;
                    }
                    const float* irow = src + (static_cast<int64_t>(c) * H + iy) * W;
                    for (int ox = 0; ox < Wg; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        orow[ox] = (ix >= 0 && ix < W) ? irow[ix] : 0.0f;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back into the (C,H,W) image.
inline void col2im_add(const float* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                       int Hg, int Wg, float* dst) {
    const int64_t grid = static_cast<int64_t>(Hg) * Wg;
    for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const float* in = cols + ((static_cast<int64_t>(c) * kh + ky) * kw + kx) * grid;
                for (int oy = 0; oy < Hg; ++oy) {
                    const int iy = oy * stride - pad + ky;
                    if (iy < 0 || iy >= H) continue;
                    float* drow = dst + (static_cast<int64_t>(c) * H + iy) * W;
                    const float* irow = in + static_cast<int64_t>(oy) * Wg;
                    for (int ox = 0; ox < Wg; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < W) drow[ix] += irow[ox];
                    }
                }
            }
        }
    }
}

inline int conv_out_size(int in, int k, int stride, int pad) {
    const int out = (in + 2 * pad - k) / stride + 1;
    if (out <= 0) throw std::invalid_argument("conv: output size would be non-positive");
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: x {N,Cin,H,W}, w {Cout,Cin,kh,kw}, optional bias {Cout}
// ---------------------------------------------------------------------------
inline Var conv2d(const Var& x, const Var& w, const Var& bias, int stride, int pad) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 4 || ws.size() != 4)
        throw std::invalid_argument("conv2d: expected 4-d input and weight");
    const int N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    const int Cout = ws[0], kh = ws[2], kw = ws[3];
    if (ws[1] != Cin) throw std::invalid_argument("conv2d: channel mismatch");
    const int Ho = detail::conv_out_size(H, kh, stride, pad);
    const int Wo = detail::conv_out_size(W, kw, stride, pad);
    const int64_t K = static_cast<int64_t>(Cin) * kh * kw;
    const int64_t L = static_cast<int64_t>(Ho) * Wo;
    const bool identity_cols = (kh == 1 && kw == 1 && stride == 1 && pad == 0);

    Tensor out({N, Cout, Ho, Wo});
    {
        auto& cols = detail::scratch_a();
        if (!identity_cols) cols.resize(static_cast<size_t>(N) * K * L);
        CMapMat Wm(w->value.data(), Cout, K);
#pragma omp parallel for schedule(static) if (N > 1)
        for (int n = 0; n < N; ++n) {
            const float* xn = x->value.data() + static_cast<int64_t>(n) * Cin * H * W;
            const float* colp = xn;
            if (!identity_cols) {
                float* cn = cols.data() + static_cast<size_t>(n) * K * L;
                detail::im2col(xn, Cin, H, W, kh, kw, stride, pad, Ho, Wo, cn);
                colp = cn;
            }
            MapMat Ym(out.data() + static_cast<int64_t>(n) * Cout * L, Cout, L);
            Ym.noalias() = Wm * CMapMat(colp, K, L);
        }
    }
    if (bias) {
        const float* b = bias->value.data();
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < Cout; ++c) {
                float* p = out.data() + (static_cast<int64_t>(n) * Cout + c) * L;
                for (int64_t i = 0; i < L; ++i) p[i] += b[c];
            }
    }

    std::vector<Var> parents = bias ? std::vector<Var>{x, w, bias} : std::vector<Var>{x, w};
    return make_node(std::move(out), std::move(parents),
                     [=](Node& node) {
        const int64_t plane = static_cast<int64_t>(Cin) * H * W;
        auto& cols = detail::scratch_a();
        auto& slabs = detail::scratch_b();
        if (!identity_cols) cols.resize(static_cast<size_t>(N) * K * L);
        const bool wgrad = w->requires_grad;
        if (wgrad) slabs.assign(static_cast<size_t>(N) * Cout * K, 0.0f);
        CMapMat Wm(w->value.data(), Cout, K);
#pragma omp parallel for schedule(static) if (N > 1)
        for (int n = 0; n < N; ++n) {
            const float* xn = x->value.data() + n * plane;
            const float* gyn = node.grad.data() + static_cast<int64_t>(n) * Cout * L;
            const float* colp = xn;
            if (!identity_cols) {
                float* cn = cols.data() + static_cast<size_t>(n) * K * L;
                detail::im2col(xn, Cin, H, W, kh, kw, stride, pad, Ho, Wo, cn);
                colp = cn;
            }
            if (wgrad) {
                MapMat dWn(slabs.data() + static_cast<size_t>(n) * Cout * K, Cout, K);
                dWn.noalias() = CMapMat(gyn, Cout, L) * CMapMat(colp, K, L).transpose();
            }
            if (x->requires_grad) {
                if (identity_cols) {
                    MapMat dXn(x->grad.data() + n * plane, K, L);
                    dXn.noalias() += Wm.transpose() * CMapMat(gyn, Cout, L);
                } else {
                    float* cn = cols.data() + static_cast<size_t>(n) * K * L;
                    MapMat dCols(cn, K, L);
                    dCols.noalias() = Wm.transpose() * CMapMat(gyn, Cout, L);
                    detail::col2im_add(cn, Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                       x->grad.data() + n * plane);
                }
            }
        }
        if (wgrad) {
            MapMat dW(w->grad.data(), Cout, K);
            for (int n = 0; n < N; ++n)
                dW += CMapMat(slabs.data() + static_cast<size_t>(n) * Cout * K, Cout, K);
        }
        if (bias && bias->requires_grad) {
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < Cout; ++c) {
                    const float* g = node.grad.data() + (static_cast<int64_t>(n) * Cout + c) * L;
                    double s = 0.0;
                    for (int64_t i = 0; i < L; ++i) s += g[i];
                    bias->grad[c] += static_cast<float>(s);
                }
        }
    });
}

// Depthwise conv2d: w {C,1,kh,kw}, one filter per channel.
inline Var conv2d_depthwise(const Var& x, const Var& w, int stride, int pad) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[1] != 1 || ws[0] != xs[1])
        throw std::invalid_argument("conv2d_depthwise: bad shapes");
    const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int kh = ws[2], kw = ws[3];
    const int Ho = detail::conv_out_size(H, kh, stride, pad);
    const int Wo = detail::conv_out_size(W, kw, stride, pad);

    Tensor out({N, C, Ho, Wo});
#pragma omp parallel for schedule(static) collapse(2) if (N * C > 1)
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const float* xp = x->value.data() + (static_cast<int64_t>(n) * C + c) * H * W;
            const float* wp = w->value.data() + static_cast<int64_t>(c) * kh * kw;
            float* op = out.data() + (static_cast<int64_t>(n) * C + c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy)
                for (int ox = 0; ox < Wo; ++ox) {
                    float acc = 0.0f;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= H) continue;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= W) continue;
                            acc += wp[ky * kw + kx] * xp[iy * W + ix];
                        }
                    }
                    op[oy * Wo + ox] = acc;
                }
        }

    return make_node(std::move(out), {x, w}, [=](Node& node) {
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const float* xp = x->value.data() + (static_cast<int64_t>(n) * C + c) * H * W;
                const float* wp = w->value.data() + static_cast<int64_t>(c) * kh * kw;
                const float* gp = node.grad.data() + (static_cast<int64_t>(n) * C + c) * Ho * Wo;
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        const float g = gp[oy * Wo + ox];
                        for (int ky = 0; ky < kh; ++ky) {
                            const int iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= H) continue;
                            for (int kx = 0; kx < kw; ++kx) {
                                const int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= W) continue;
                                if (w->requires_grad)
                                    w->grad[c * kh * kw + ky * kw + kx] += g * xp[iy * W + ix];
                                if (x->requires_grad)
                                    x->grad[(static_cast<int64_t>(n) * C + c) * H * W + iy * W + ix] +=
                                        g * wp[ky * kw + kx];
                            }
                        }
                    }
            }
    });
}

// ---------------------------------------------------------------------------
// conv_transpose2d: x {N,Cin,H,W}, w {Cin,Cout,kh,kw}
// out spatial = stride*(in-1) + k - 2*pad + out_pad
// ---------------------------------------------------------------------------
inline Var conv_transpose2d(const Var& x, const Var& w, int stride, int pad, int out_pad) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    if (xs.size() != 4 || ws.size() != 4)
        throw std::invalid_argument("conv_transpose2d: expected 4-d input and weight");
    const int N = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
    if (ws[0] != Cin) throw std::invalid_argument("conv_transpose2d: channel mismatch");
    const int Cout = ws[1], kh = ws[2], kw = ws[3];
    const int Ho = stride * (H - 1) + kh - 2 * pad + out_pad;
    const int Wo = stride * (W - 1) + kw - 2 * pad + out_pad;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv_transpose2d: bad output size");
    const int64_t K = static_cast<int64_t>(Cout) * kh * kw;
    const int64_t L = static_cast<int64_t>(H) * W;

    Tensor out({N, Cout, Ho, Wo});
    {
        auto& cols = detail::scratch_a();
        cols.resize(static_cast<size_t>(N) * K * L);
        CMapMat Wm(w->value.data(), Cin, K);
#pragma omp parallel for schedule(static) if (N > 1)
        for (int n = 0; n < N; ++n) {
            float* cn = cols.data() + static_cast<size_t>(n) * K * L;
            CMapMat Xm(x->value.data() + n * Cin * L, Cin, L);
            MapMat(cn, K, L).noalias() = Wm.transpose() * Xm;
            detail::col2im_add(cn, Cout, Ho, Wo, kh, kw, stride, pad, H, W,
                               out.data() + static_cast<int64_t>(n) * Cout * Ho * Wo);
        }
    }

    return make_node(std::move(out), {x, w}, [=](Node& node) {
        auto& cols = detail::scratch_a();
        auto& slabs = detail::scratch_b();
        cols.resize(static_cast<size_t>(N) * K * L);
        const bool wgrad = w->requires_grad;
        if (wgrad) slabs.assign(static_cast<size_t>(N) * Cin * K, 0.0f);
        CMapMat Wm(w->value.data(), Cin, K);
#pragma omp parallel for schedule(static) if (N > 1)
        for (int n = 0; n < N; ++n) {
            float* cn = cols.data() + static_cast<size_t>(n) * K * L;
            detail::im2col(node.grad.data() + static_cast<int64_t>(n) * Cout * Ho * Wo,
                           Cout, Ho, Wo, kh, kw, stride, pad, H, W, cn);
            if (wgrad) {
                CMapMat Xm(x->value.data() + n * Cin * L, Cin, L);
                MapMat dWn(slabs.data() + static_cast<size_t>(n) * Cin * K, Cin, K);
                dWn.noalias() = Xm * CMapMat(cn, K, L).transpose();
            }
            if (x->requires_grad) {
                MapMat dXn(x->grad.data() + n * Cin * L, Cin, L);
                dXn.noalias() += Wm * CMapMat(cn, K, L);
            }
        }
        if (wgrad) {
            MapMat dW(w->grad.data(), Cin, K);
            for (int n = 0; n < N; ++n)
                dW += CMapMat(slabs.data() + static_cast<size_t>(n) * Cin * K, Cin, K);
        }
    });
}

// ---------------------------------------------------------------------------
// batch norm over {N,C,H,W}, statistics per channel
// ---------------------------------------------------------------------------
inline Var batch_norm2d(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
                        Tensor& running_var, bool training, float momentum = 0.1f,
                        float eps = 1e-5f) {
    const auto& xs = x->value.shape();
    if (xs.size() != 4) throw std::invalid_argument("batch_norm2d: expected 4-d input");
    const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw std::invalid_argument("batch_norm2d: parameter size mismatch");
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t count = static_cast<int64_t>(N) * plane;

    struct Saved {
        Tensor xhat;
        std::vector<float> inv_std;
    };
    auto saved = std::make_shared<Saved>();
    saved->xhat = Tensor({N, C, H, W});
    saved->inv_std.resize(C);

    Tensor out({N, C, H, W});
#pragma omp parallel for schedule(static)
    for (int c = 0; c < C; ++c) {
        double mean, var;
        if (training) {
            double s = 0.0, s2 = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = x->value.data() + (static_cast<int64_t>(n) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    s += p[i];
                    s2 += static_cast<double>(p[i]) * p[i];
                }
            }
            mean = s / count;
            var = std::max(0.0, s2 / count - mean * mean);
            const double unbiased = count > 1 ? var * count / (count - 1) : var;
            running_mean[c] = (1.0f - momentum) * running_mean[c] + momentum * static_cast<float>(mean);
            running_var[c] = (1.0f - momentum) * running_var[c] + momentum * static_cast<float>(unbiased);
        } else {
            mean = running_mean[c];
            var = running_var[c];
        }
        const float istd = static_cast<float>(1.0 / std::sqrt(var + eps));
        saved->inv_std[c] = istd;
        const float g = gamma->value[c], b = beta->value[c], m = static_cast<float>(mean);
        for (int n = 0; n < N; ++n) {
            const float* p = x->value.data() + (static_cast<int64_t>(n) * C + c) * plane;
            float* xh = saved->xhat.data() + (static_cast<int64_t>(n) * C + c) * plane;
            float* o = out.data() + (static_cast<int64_t>(n) * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                xh[i] = (p[i] - m) * istd;
                o[i] = g * xh[i] + b;
            }
        }
    }

    return make_node(std::move(out), {x, gamma, beta}, [=](Node& node) {
#pragma omp parallel for schedule(static)
        for (int c = 0; c < C; ++c) {
            double s1 = 0.0, s2 = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* g = node.grad.data() + (static_cast<int64_t>(n) * C + c) * plane;
                const float* xh = saved->xhat.data() + (static_cast<int64_t>(n) * C + c) * plane;
                for (int64_t i = 0; i < plane; ++i) {
                    s1 += g[i];
                    s2 += static_cast<double>(g[i]) * xh[i];
                }
            }
            if (gamma->requires_grad) gamma->grad[c] += static_cast<float>(s2);
            if (beta->requires_grad) beta->grad[c] += static_cast<float>(s1);
            if (x->requires_grad) {
                const float gm = gamma->value[c] * saved->inv_std[c];
                if (training) {
                    const float m1 = static_cast<float>(s1 / count);
                    const float m2 = static_cast<float>(s2 / count);
                    for (int n = 0; n < N; ++n) {
                        const float* g = node.grad.data() + (static_cast<int64_t>(n) * C + c) * plane;
                        const float* xh = saved->xhat.data() + (static_cast<int64_t>(n) * C + c) * plane;
                        float* dx = x->grad.data() + (static_cast<int64_t>(n) * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i)
                            dx[i] += gm * (g[i] - m1 - xh[i] * m2);
                    }
                } else {
                    for (int n = 0; n < N; ++n) {
                        const float* g = node.grad.data() + (static_cast<int64_t>(n) * C + c) * plane;
                        float* dx = x->grad.data() + (static_cast<int64_t>(n) * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) dx[i] += gm * g[i];
                    }
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// elementwise and structural ops
// ---------------------------------------------------------------------------
inline Var relu(const Var& x) {
    Tensor out(x->value.shape());
    const int64_t n = x->value.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = x->value[i] > 0.0f ? x->value[i] : 0.0f;
    return make_node(std::move(out), {x}, [=](Node& node) {
        if (!x->requires_grad) return;
        for (int64_t i = 0; i < n; ++i)
            if (x->value[i] > 0.0f) x->grad[i] += node.grad[i];
    });
}

inline Var add(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw std::invalid_argument("add: shape mismatch");
    Tensor out(a->value.shape());
    const int64_t n = out.numel();
    for (int64_t i = 0; i < n; ++i) out[i] = a->value[i] + b->value[i];
    return make_node(std::move(out), {a, b}, [=](Node& node) {
        if (a->requires_grad)
            for (int64_t i = 0; i < n; ++i) a->grad[i] += node.grad[i];
        if (b->requires_grad)
            for (int64_t i = 0; i < n; ++i) b->grad[i] += node.grad[i];
    });
}

inline Var concat_channels(const Var& a, const Var& b) {
    const auto& as = a->value.shape();
    const auto& bs = b->value.shape();
    if (as.size() != 4 || bs.size() != 4 || as[0] != bs[0] || as[2] != bs[2] || as[3] != bs[3])
        throw std::invalid_argument("concat_channels: shape mismatch");
    const int N = as[0], Ca = as[1], Cb = bs[1], H = as[2], W = as[3];
    const int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::memcpy(out.data() + static_cast<int64_t>(n) * (Ca + Cb) * plane,
                    a->value.data() + static_cast<int64_t>(n) * Ca * plane,
                    sizeof(float) * Ca * plane);
        std::memcpy(out.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * plane,
                    b->value.data() + static_cast<int64_t>(n) * Cb * plane,
                    sizeof(float) * Cb * plane);
    }
    return make_node(std::move(out), {a, b}, [=](Node& node) {
        for (int n = 0; n < N; ++n) {
            if (a->requires_grad) {
                const float* g = node.grad.data() + static_cast<int64_t>(n) * (Ca + Cb) * plane;
                float* d = a->grad.data() + static_cast<int64_t>(n) * Ca * plane;
                for (int64_t i = 0; i < Ca * plane; ++i) d[i] += g[i];
            }
            if (b->requires_grad) {
                const float* g = node.grad.data() + (static_cast<int64_t>(n) * (Ca + Cb) + Ca) * plane;
                float* d = b->grad.data() + static_cast<int64_t>(n) * Cb * plane;
                for (int64_t i = 0; i < Cb * plane; ++i) d[i] += g[i];
            }
        }
    });
}

// log-softmax across the channel dimension of {N,C,H,W}
inline Var log_softmax_channels(const Var& x) {
    const auto& xs = x->value.shape();
    if (xs.size() != 4) throw std::invalid_argument("log_softmax_channels: expected 4-d input");
    const int N = xs[0], C = xs[1], H = xs[2], W = xs[3];
    const int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out(x->value.shape());
    for (int n = 0; n < N; ++n) {
        const float* xp = x->value.data() + static_cast<int64_t>(n) * C * plane;
        float* op = out.data() + static_cast<int64_t>(n) * C * plane;
        for (int64_t i = 0; i < plane; ++i) {
            float m = xp[i];
            for (int c = 1; c < C; ++c) m = std::max(m, xp[c * plane + i]);
            double s = 0.0;
            for (int c = 0; c < C; ++c) s += std::exp(static_cast<double>(xp[c * plane + i]) - m);
            const float lse = m + static_cast<float>(std::log(s));
            for (int c = 0; c < C; ++c) op[c * plane + i] = xp[c * plane + i] - lse;
        }
    }
    return make_node(std::move(out), {x}, [=](Node& node) {
        if (!x->requires_grad) return;
        for (int n = 0; n < N; ++n) {
            const float* op = node.value.data() + static_cast<int64_t>(n) * C * plane;
            const float* gp = node.grad.data() + static_cast<int64_t>(n) * C * plane;
            float* dx = x->grad.data() + static_cast<int64_t>(n) * C * plane;
            for (int64_t i = 0; i < plane; ++i) {
                double gs = 0.0;
                for (int c = 0; c < C; ++c) gs += gp[c * plane + i];
                for (int c = 0; c < C; ++c)
                    dx[c * plane + i] +=
                        gp[c * plane + i] - static_cast<float>(std::exp(op[c * plane + i]) * gs);
            }
        }
    });
}

// probability of class 1 from two-class logits: sigmoid(l1 - l0), {N,2,H,W} -> {N,1,H,W}
inline Var two_class_prob(const Var& logits) {
    const auto& xs = logits->value.shape();
    if (xs.size() != 4 || xs[1] != 2) throw std::invalid_argument("two_class_prob: expected {N,2,H,W}");
    const int N = xs[0], H = xs[2], W = xs[3];
    const int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out({N, 1, H, W});
    for (int n = 0; n < N; ++n) {
        const float* l = logits->value.data() + static_cast<int64_t>(n) * 2 * plane;
        float* o = out.data() + static_cast<int64_t>(n) * plane;
        for (int64_t i = 0; i < plane; ++i) {
            const double d = static_cast<double>(l[plane + i]) - l[i];
            o[i] = static_cast<float>(1.0 / (1.0 + std::exp(-d)));
        }
    }
    return make_node(std::move(out), {logits}, [=](Node& node) {
        if (!logits->requires_grad) return;
        for (int n = 0; n < N; ++n) {
            const float* p = node.value.data() + static_cast<int64_t>(n) * plane;
            const float* g = node.grad.data() + static_cast<int64_t>(n) * plane;
            float* dl = logits->grad.data() + static_cast<int64_t>(n) * 2 * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const float d = g[i] * p[i] * (1.0f - p[i]);
                dl[plane + i] += d;
                dl[i] -= d;
            }
        }
    });
}

// lane * (k + (1-k) * road), with the scalar k clamped to [0,1] before use.
// dk accumulates lane*(1-road), the analytic derivative inside the clamp.
inline Var combine_lane_road(const Var& lane, const Var& road, const Var& k) {
    if (!lane->value.same_shape(road->value))
        throw std::invalid_argument("combine_lane_road: shape mismatch");
    if (k->value.numel() != 1) throw std::invalid_argument("combine_lane_road: k must be scalar");
    const int64_t n = lane->value.numel();
    const float kraw = k->value[0];
    const float kc = std::clamp(kraw, 0.0f, 1.0f);
    Tensor out(lane->value.shape());
    for (int64_t i = 0; i < n; ++i)
        out[i] = lane->value[i] * (kc + (1.0f - kc) * road->value[i]);
    return make_node(std::move(out), {lane, road, k}, [=](Node& node) {
        const bool kin = kraw >= 0.0f && kraw <= 1.0f;
        double dk = 0.0;
        for (int64_t i = 0; i < n; ++i) {
            const float g = node.grad[i];
            if (lane->requires_grad) lane->grad[i] += g * (kc + (1.0f - kc) * road->value[i]);
            if (road->requires_grad) road->grad[i] += g * lane->value[i] * (1.0f - kc);
            if (kin) dk += static_cast<double>(g) * lane->value[i] * (1.0f - road->value[i]);
        }
        if (k->requires_grad && kin) k->grad[0] += static_cast<float>(dk);
    });
}

// {N,1,H,W} probability -> {N,2,H,W} log-probabilities [log(1-p), log(p)],
// clamped away from 0 so the logs stay finite.
inline Var prob_to_logpair(const Var& p, float eps = 1e-7f) {
    const auto& xs = p->value.shape();
    if (xs.size() != 4 || xs[1] != 1) throw std::invalid_argument("prob_to_logpair: expected {N,1,H,W}");
    const int N = xs[0], H = xs[2], W = xs[3];
    const int64_t plane = static_cast<int64_t>(H) * W;
    Tensor out({N, 2, H, W});
    for (int n = 0; n < N; ++n) {
        const float* q = p->value.data() + static_cast<int64_t>(n) * plane;
        float* o = out.data() + static_cast<int64_t>(n) * 2 * plane;
        for (int64_t i = 0; i < plane; ++i) {
            const float v = std::clamp(q[i], eps, 1.0f - eps);
            o[i] = std::log(1.0f - v);
            o[plane + i] = std::log(v);
        }
    }
    return make_node(std::move(out), {p}, [=](Node& node) {
        if (!p->requires_grad) return;
        for (int n = 0; n < N; ++n) {
            const float* q = p->value.data() + static_cast<int64_t>(n) * plane;
            const float* g = node.grad.data() + static_cast<int64_t>(n) * 2 * plane;
            float* dp = p->grad.data() + static_cast<int64_t>(n) * plane;
            for (int64_t i = 0; i < plane; ++i) {
                if (q[i] < eps || q[i] > 1.0f - eps) continue;
                dp[i] += g[plane + i] / q[i] - g[i] / (1.0f - q[i]);
            }
        }
    });
}

// Weighted two-class negative log likelihood, mean over pixels.
// logprob {N,2,H,W}; target {N,H,W} with values 0/1. Throws if the log
// probabilities are not normalized per pixel.
inline Var weighted_nll(const Var& logprob, const Tensor& target, float w_background, float w_lane) {
    const auto& xs = logprob->value.shape();
    if (xs.size() != 4 || xs[1] != 2) throw std::invalid_argument("weighted_nll: expected {N,2,H,W}");
    const int N = xs[0], H = xs[2], W = xs[3];
    check_shape(target, {N, H, W}, "weighted_nll target");
    const int64_t plane = static_cast<int64_t>(H) * W;
    const int64_t total = static_cast<int64_t>(N) * plane;

    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        const float* lp = logprob->value.data() + static_cast<int64_t>(n) * 2 * plane;
        const float* t = target.data() + static_cast<int64_t>(n) * plane;
        for (int64_t i = 0; i < plane; ++i) {
            const double sum = std::exp(static_cast<double>(lp[i])) +
                               std::exp(static_cast<double>(lp[plane + i]));
            if (std::abs(sum - 1.0) > 1e-3)
                throw std::invalid_argument("weighted_nll: log probabilities are not normalized");
            const bool lane = t[i] != 0.0f;
            loss -= static_cast<double>(lane ? w_lane : w_background) *
                    (lane ? lp[plane + i] : lp[i]);
        }
    }
    Tensor out({1});
    out[0] = static_cast<float>(loss / total);

    return make_node(std::move(out), {logprob}, [=](Node& node) {
        if (!logprob->requires_grad) return;
        const float scale = node.grad[0] / static_cast<float>(total);
        for (int n = 0; n < N; ++n) {
            const float* t = target.data() + static_cast<int64_t>(n) * plane;
            float* d = logprob->grad.data() + static_cast<int64_t>(n) * 2 * plane;
            for (int64_t i = 0; i < plane; ++i) {
                const bool lane = t[i] != 0.0f;
                if (lane)
                    d[plane + i] -= scale * w_lane;
                else
                    d[i] -= scale * w_background;
            }
        }
    });
}

}  // namespace lanefusion
