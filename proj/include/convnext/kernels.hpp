#pragma once

// Inner loops shared by the dense and sparse code paths. Both paths visit
// taps in (ky, kx) order and accumulate with the same expression, so a
// submanifold convolution over active sites reproduces the dense result on
// those sites when inactive inputs are zero.

#include <cmath>
#include <cstddef>
#include <numbers>

namespace cnx::kernels {

template <class T>
inline void channel_fma(T* __restrict out, const T* __restrict x, const T* __restrict w, std::size_t c) {
    for (std::size_t i = 0; i < c; ++i) out[i] += x[i] * w[i];
}

template <class T>
inline void channel_bias(T* __restrict out, const T* __restrict b, std::size_t c) {
    if (!b) return;
    for (std::size_t i = 0; i < c; ++i) out[i] += b[i];
}

// NHWC depthwise forward; w is kh x kw x C.
template <class T>
void depthwise_forward(const T* x, std::size_t n, std::size_t h, std::size_t w, std::size_t c, const T* wt,
                       std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, const T* bias, T* out,
                       std::size_t ho, std::size_t wo) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                T* o = out + ((b * ho + oy) * wo + ox) * c;
                for (std::size_t i = 0; i < c; ++i) o[i] = T(0);
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        channel_fma(o, x + ((b * h + iy) * w + ix) * c, wt + (ky * kw + kx) * c, c);
                    }
                }
                channel_bias(o, bias, c);
            }
}

// dx and dw may be null; non-null buffers are accumulated into.
template <class T>
void depthwise_backward(const T* x, std::size_t n, std::size_t h, std::size_t w, std::size_t c, const T* wt,
                        std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, const T* gy,
                        std::size_t ho, std::size_t wo, T* dx, T* dw) {
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                const T* g = gy + ((b * ho + oy) * wo + ox) * c;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                    const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
                    if (iy < 0 || iy >= static_cast<long>(h)) continue;
                    for (std::size_t kx = 0; kx < kw; ++kx) {
                        const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
                        if (ix < 0 || ix >= static_cast<long>(w)) continue;
                        const std::size_t off = ((b * h + iy) * w + ix) * c;
                        const std::size_t tap = (ky * kw + kx) * c;
                        if (dx) channel_fma(dx + off, g, wt + tap, c);
                        if (dw) channel_fma(dw + tap, g, x + off, c);
                    }
                }
            }
}

// Depthwise over a neighbor table: nbr[site * taps + t] is the input row of
// tap t or -1 when that input is inactive or outside the grid.
template <class T>
void depthwise_gather_forward(const T* x, const long* nbr, std::size_t sites, std::size_t taps, std::size_t c,
                              const T* wt, const T* bias, T* out) {
    for (std::size_t s = 0; s < sites; ++s) {
        T* o = out + s * c;
        for (std::size_t i = 0; i < c; ++i) o[i] = T(0);
        const long* nb = nbr + s * taps;
        for (std::size_t t = 0; t < taps; ++t) {
            if (nb[t] < 0) continue;
            channel_fma(o, x + static_cast<std::size_t>(nb[t]) * c, wt + t * c, c);
        }
        channel_bias(o, bias, c);
    }
}

template <class T>
void depthwise_gather_backward(const T* x, const long* nbr, std::size_t sites, std::size_t taps, std::size_t c,
                               const T* wt, const T* gy, T* dx, T* dw) {
    for (std::size_t s = 0; s < sites; ++s) {
        const T* g = gy + s * c;
        const long* nb = nbr + s * taps;
        for (std::size_t t = 0; t < taps; ++t) {
            if (nb[t] < 0) continue;
            const std::size_t off = static_cast<std::size_t>(nb[t]) * c;
            if (dx) channel_fma(dx + off, g, wt + t * c, c);
            if (dw) channel_fma(dw + t * c, g, x + off, c);
        }
    }
}

// Row-wise layer norm. xhat and rstd are saved for the backward pass.
template <class T>
void layer_norm_rows(const T* x, std::size_t rows, std::size_t c, const T* gamma, const T* beta, T eps, T* out,
                     T* xhat, T* rstd) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = x + r * c;
        double mean = 0;
        for (std::size_t j = 0; j < c; ++j) mean += xr[j];
        mean /= static_cast<double>(c);
        double var = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(c);
        const double rs = 1.0 / std::sqrt(var + static_cast<double>(eps));
        rstd[r] = static_cast<T>(rs);
        for (std::size_t j = 0; j < c; ++j) {
            const T xh = static_cast<T>((xr[j] - mean) * rs);
            xhat[r * c + j] = xh;
            out[r * c + j] = xh * gamma[j] + beta[j];
        }
    }
}

template <class T>
void layer_norm_backward_rows(const T* gy, const T* xhat, const T* rstd, const T* gamma, std::size_t rows,
                              std::size_t c, T* dx) {
    for (std::size_t r = 0; r < rows; ++r) {
        const T* g = gy + r * c;
        const T* xh = xhat + r * c;
        double m1 = 0, m2 = 0;
        for (std::size_t j = 0; j < c; ++j) {
            const double d = static_cast<double>(g[j]) * gamma[j];
            m1 += d;
            m2 += d * xh[j];
        }
        m1 /= static_cast<double>(c);
        m2 /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j) {
            const double d = static_cast<double>(g[j]) * gamma[j];
            dx[r * c + j] = static_cast<T>(rstd[r] * (d - m1 - xh[j] * m2));
        }
    }
}

template <class T>
inline T gelu_value(T x) {
    return static_cast<T>(0.5) * x * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <class T>
inline T gelu_grad(T x) {
    const T cdf = static_cast<T>(0.5) * (T(1) + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(static_cast<T>(-0.5) * x * x) * static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

}  // namespace cnx::kernels
