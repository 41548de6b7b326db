#pragma once

#include "volsplat/types.hpp"

#include <array>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace volsplat {

constexpr int kMaxShDegree = 3;

/// Number of real SH basis functions for a given degree: (degree+1)^2.
constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

/// Per-channel real spherical harmonic coefficients, 3DGS basis ordering
/// (band 0 first, then the three band-1 terms, and so on).
struct ShCoefficients {
    int degree = 0;
    // coeffs[c][k]: channel c in {0,1,2}, basis index k < (degree+1)^2.
    std::array<std::vector<Real>, 3> coeffs;

    ShCoefficients() { set_degree(0); }
    explicit ShCoefficients(int deg) { set_degree(deg); }

    void set_degree(int deg) {
        if (deg < 0 || deg > kMaxShDegree)
            throw std::invalid_argument("SH degree must be in [0,3]");
        degree = deg;
        for (auto& c : coeffs) c.assign(sh_coeff_count(deg), Real(0));
    }
};

namespace sh_detail {
inline constexpr Real kC0 = 0.28209479177387814;
inline constexpr Real kC1 = 0.4886025119029199;
inline constexpr Real kC2[5] = {1.0925484305920792, -1.0925484305920792,
                                0.31539156525252005, -1.0925484305920792,
                                0.5462742152960396};
inline constexpr Real kC3[7] = {-0.5900435899266435, 2.890611442640554,
                                -0.4570457994644658, 0.3731763325901154,
                                -0.4570457994644658, 1.445305721320277,
                                -0.5900435899266435};

/// Basis values for a unit direction, 3DGS ordering, up to `degree`.
inline void basis(const Vec3& d, int degree, Real* out) {
    const Real x = d.x(), y = d.y(), z = d.z();
    out[0] = kC0;
    if (degree < 1) return;
    out[1] = -kC1 * y;
    out[2] = kC1 * z;
    out[3] = -kC1 * x;
    if (degree < 2) return;
    const Real xx = x * x, yy = y * y, zz = z * z;
    const Real xy = x * y, yz = y * z, xz = x * z;
    out[4] = kC2[0] * xy;
    out[5] = kC2[1] * yz;
    out[6] = kC2[2] * (Real(2) * zz - xx - yy);
    out[7] = kC2[3] * xz;
    out[8] = kC2[4] * (xx - yy);
    if (degree < 3) return;
    out[9] = kC3[0] * y * (Real(3) * xx - yy);
    out[10] = kC3[1] * xy * z;
    out[11] = kC3[2] * y * (Real(4) * zz - xx - yy);
    out[12] = kC3[3] * z * (Real(2) * zz - Real(3) * xx - Real(3) * yy);
    out[13] = kC3[4] * x * (Real(4) * zz - xx - yy);
    out[14] = kC3[5] * z * (xx - yy);
    out[15] = kC3[6] * x * (xx - Real(3) * yy);
}
}  // namespace sh_detail

/// Raw SH contraction (no shift, no clamp) for a unit viewing direction.
inline Vec3 eval_sh_raw(const ShCoefficients& c, const Vec3& direction) {
    Real b[16];
    sh_detail::basis(direction, c.degree, b);
    const int n = sh_coeff_count(c.degree);
    Vec3 rgb = Vec3::Zero();
    for (int ch = 0; ch < 3; ++ch) {
        Real acc = 0;
        for (int k = 0; k < n; ++k) acc += b[k] * c.coeffs[ch][k];
        rgb[ch] = acc;
    }
    return rgb;
}

/// View-dependent color: SH contraction shifted by +0.5 and clamped at zero,
/// the convention 3DGS checkpoints assume.
inline Vec3 eval_sh(const ShCoefficients& c, const Vec3& direction) {
    Vec3 rgb = eval_sh_raw(c, direction) + Vec3::Constant(Real(0.5));
    return rgb.cwiseMax(Real(0));
}

/// Backward companion of eval_sh: accumulates gradients for the coefficients
/// and returns d(color)/d(direction) folded with the incoming gradient.
/// The zero-clamp uses the subgradient 0 below the threshold.
inline Vec3 eval_sh_backward(const ShCoefficients& c, const Vec3& direction,
                             const Vec3& grad_rgb, ShCoefficients& grad_coeffs) {
    Real b[16];
    sh_detail::basis(direction, c.degree, b);
    const int n = sh_coeff_count(c.degree);

    const Vec3 raw = eval_sh_raw(c, direction);
    Vec3 g = grad_rgb;
    for (int ch = 0; ch < 3; ++ch)
        if (raw[ch] + Real(0.5) < Real(0)) g[ch] = Real(0);

    if (grad_coeffs.degree != c.degree) grad_coeffs.set_degree(c.degree);
    for (int ch = 0; ch < 3; ++ch)
        for (int k = 0; k < n; ++k) grad_coeffs.coeffs[ch][k] += g[ch] * b[k];

    // d(basis)/d(direction), nonzero from band 1 up.
    Vec3 grad_dir = Vec3::Zero();
    if (c.degree >= 1) {
        using namespace sh_detail;
        const Real x = direction.x(), y = direction.y(), z = direction.z();
        for (int ch = 0; ch < 3; ++ch) {
            const auto& cc = c.coeffs[ch];
            const Real gc = g[ch];
            if (gc == Real(0)) continue;
            Vec3 d = Vec3::Zero();
            d.y() += -kC1 * cc[1];
            d.z() += kC1 * cc[2];
            d.x() += -kC1 * cc[3];
            if (c.degree >= 2) {
                d.x() += kC2[0] * y * cc[4];
                d.y() += kC2[0] * x * cc[4];
                d.y() += kC2[1] * z * cc[5];
                d.z() += kC2[1] * y * cc[5];
                d.x() += kC2[2] * (-2 * x) * cc[6];
                d.y() += kC2[2] * (-2 * y) * cc[6];
                d.z() += kC2[2] * (4 * z) * cc[6];
                d.x() += kC2[3] * z * cc[7];
                d.z() += kC2[3] * x * cc[7];
                d.x() += kC2[4] * (2 * x) * cc[8];
                d.y() += kC2[4] * (-2 * y) * cc[8];
            }
            if (c.degree >= 3) {
                d.x() += kC3[0] * (6 * x * y) * cc[9];
                d.y() += kC3[0] * (3 * x * x - 3 * y * y) * cc[9];
                d.x() += kC3[1] * y * z * cc[10];
                d.y() += kC3[1] * x * z * cc[10];
                d.z() += kC3[1] * x * y * cc[10];
                d.x() += kC3[2] * (-2 * x * y) * cc[11];
                d.y() += kC3[2] * (4 * z * z - x * x - 3 * y * y) * cc[11];
                d.z() += kC3[2] * (8 * y * z) * cc[11];
                d.x() += kC3[3] * (-6 * x * z) * cc[12];
                d.y() += kC3[3] * (-6 * y * z) * cc[12];
                d.z() += kC3[3] * (6 * z * z - 3 * x * x - 3 * y * y) * cc[12];
                d.x() += kC3[4] * (4 * z * z - 3 * x * x - y * y) * cc[13];
                d.y() += kC3[4] * (-2 * x * y) * cc[13];
                d.z() += kC3[4] * (8 * x * z) * cc[13];
                d.x() += kC3[5] * (2 * x * z) * cc[14];
                d.y() += kC3[5] * (-2 * y * z) * cc[14];
                d.z() += kC3[5] * (x * x - y * y) * cc[14];
                d.x() += kC3[6] * (3 * x * x - 3 * y * y) * cc[15];
                d.y() += kC3[6] * (-6 * x * y) * cc[15];
            }
            grad_dir += gc * d;
        }
    }
    return grad_dir;
}

}  // namespace volsplat
