#pragma once

#include "volsplat/types.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace volsplat {

constexpr Real kPsnrCap = Real(99);

/// 10 log10(1 / MSE) over all channels, capped for identical images.
inline Real psnr(const Image& a, const Image& b, Real cap = kPsnrCap) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
    Real mse = 0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const Real d = a.data[i] - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<Real>(a.data.size());
    if (mse <= Real(0)) return cap;
    return std::min(cap, Real(10) * std::log10(Real(1) / mse));
}

namespace metrics_detail {

constexpr int kSsimWindow = 11;
constexpr Real kSsimSigma = Real(1.5);
constexpr Real kSsimK1 = Real(0.01);
constexpr Real kSsimK2 = Real(0.03);

inline const std::array<Real, kSsimWindow>& ssim_kernel() {
    static const std::array<Real, kSsimWindow> k = [] {
        std::array<Real, kSsimWindow> v{};
        Real sum = 0;
        for (int i = 0; i < kSsimWindow; ++i) {
            const Real d = i - (kSsimWindow - 1) / Real(2);
            v[i] = std::exp(-d * d / (2 * kSsimSigma * kSsimSigma));
            sum += v[i];
        }
        for (auto& x : v) x /= sum;
        return v;
    }();
    return k;
}

/// Separable valid-mode correlation of one channel with the SSIM window.
/// in: h x w (row-major), out: (h-10) x (w-10).
inline void valid_filter(const std::vector<Real>& in, int h, int w, std::vector<Real>& tmp,
                         std::vector<Real>& out) {
    const auto& k = ssim_kernel();
    const int oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;
    tmp.assign(static_cast<size_t>(h) * ow, 0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            Real s = 0;
            for (int i = 0; i < kSsimWindow; ++i) s += k[i] * in[y * w + x + i];
            tmp[y * ow + x] = s;
        }
    out.assign(static_cast<size_t>(oh) * ow, 0);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            Real s = 0;
            for (int i = 0; i < kSsimWindow; ++i) s += k[i] * tmp[(y + i) * ow + x];
            out[y * ow + x] = s;
        }
}

/// Transposed counterpart of valid_filter: scatters window-map values back to
/// pixel space (full correlation with the symmetric kernel).
inline void scatter_filter(const std::vector<Real>& in, int oh, int ow, std::vector<Real>& tmp,
                           std::vector<Real>& out, int h, int w) {
    const auto& k = ssim_kernel();
    tmp.assign(static_cast<size_t>(oh) * w, 0);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            const Real v = in[y * ow + x];
            if (v == Real(0)) continue;
            for (int i = 0; i < kSsimWindow; ++i) tmp[y * w + x + i] += k[i] * v;
        }
    out.assign(static_cast<size_t>(h) * w, 0);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < w; ++x) {
            const Real v = tmp[y * w + x];
            if (v == Real(0)) continue;
            for (int i = 0; i < kSsimWindow; ++i) out[(y + i) * w + x] += k[i] * v;
        }
}

}  // namespace metrics_detail

/// Mean local SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03,
/// dynamic range 1), valid windows only. When grad_a is given it receives
/// d(mean SSIM)/d(a).
inline Real ssim(const Image& a, const Image& b, Image* grad_a = nullptr) {
    using namespace metrics_detail;
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: shape mismatch");
    if (a.height < kSsimWindow || a.width < kSsimWindow)
        throw std::invalid_argument("ssim: image smaller than the filter window");
    const int h = a.height, w = a.width, ch = a.channels;
    const int oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;
    const Real c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;

    if (grad_a != nullptr) *grad_a = Image(h, w, ch);

    std::vector<Real> x(static_cast<size_t>(h) * w), y(x.size()), xx(x.size()), yy(x.size()),
        xy(x.size());
    std::vector<Real> mx, my, mxx, myy, mxy, tmp;
    std::vector<Real> alpha, beta, gamma, sa, sb, sc;
    Real total = 0;
    const Real n_windows = static_cast<Real>(oh) * ow * ch;

    for (int c = 0; c < ch; ++c) {
        for (int p = 0; p < h * w; ++p) {
            x[p] = a.data[static_cast<size_t>(p) * ch + c];
            y[p] = b.data[static_cast<size_t>(p) * ch + c];
            xx[p] = x[p] * x[p];
            yy[p] = y[p] * y[p];
            xy[p] = x[p] * y[p];
        }
        valid_filter(x, h, w, tmp, mx);
        valid_filter(y, h, w, tmp, my);
        valid_filter(xx, h, w, tmp, mxx);
        valid_filter(yy, h, w, tmp, myy);
        valid_filter(xy, h, w, tmp, mxy);

        if (grad_a) {
            alpha.assign(mx.size(), 0);
            beta.assign(mx.size(), 0);
            gamma.assign(mx.size(), 0);
        }
        for (size_t p = 0; p < mx.size(); ++p) {
            const Real ux = mx[p], uy = my[p];
            const Real vx = mxx[p] - ux * ux;
            const Real vy = myy[p] - uy * uy;
            const Real vxy = mxy[p] - ux * uy;
            const Real a1 = 2 * ux * uy + c1, a2 = 2 * vxy + c2;
            const Real b1 = ux * ux + uy * uy + c1, b2 = vx + vy + c2;
            const Real denom = b1 * b2;
            const Real s = (a1 * a2) / denom;
            total += s;
            if (grad_a) {
                // dS/dx_q = w_pq (alpha + beta x_q + gamma y_q).
                const Real two_over = 2 / denom;
                alpha[p] = two_over * (uy * (a2 - a1) - s * ux * (b2 - b1));
                beta[p] = two_over * (-s * b1);
                gamma[p] = two_over * a1;
            }
        }
        if (grad_a) {
            scatter_filter(alpha, oh, ow, tmp, sa, h, w);
            scatter_filter(beta, oh, ow, tmp, sb, h, w);
            scatter_filter(gamma, oh, ow, tmp, sc, h, w);
            for (int p = 0; p < h * w; ++p)
                grad_a->data[static_cast<size_t>(p) * ch + c] =
                    (sa[p] + x[p] * sb[p] + y[p] * sc[p]) / n_windows;
        }
    }
    return total / n_windows;
}

}  // namespace volsplat
