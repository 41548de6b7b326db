#pragma once

#include "volsplat/sh.hpp"
#include "volsplat/types.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <utility>

namespace volsplat {

/// How the stored data term theta turns into Gaussian amplitudes.
///   EwaMass:         theta is the total mass (integral) of the Gaussian.
///   OpacityAmplitude: theta is the projected 2D peak value, view-independent.
///   OpacityThinSide: theta equals the projected peak when the Gaussian is
///                    seen along its shortest axis; mass is view-independent.
enum class AmplitudeModel { EwaMass, OpacityAmplitude, OpacityThinSide };

/// Which determinant feeds the perspective integral-preservation factor.
enum class JacobianMode { ScreenBlock2x2, FullDet3x3 };

constexpr Real kDefaultNearPlane = Real(0.01);
constexpr Real kDefaultFilterVariance = Real(0.3);
constexpr Real kConditionCap = Real(1e12);

inline Mat3 quaternion_to_rotation(const Vec4& q_raw) {
    const Real n = q_raw.norm();
    const Real r = q_raw[0] / n, x = q_raw[1] / n, y = q_raw[2] / n, z = q_raw[3] / n;
    Mat3 R;
    R << 1 - 2 * (y * y + z * z), 2 * (x * y - r * z), 2 * (x * z + r * y),
         2 * (x * y + r * z), 1 - 2 * (x * x + z * z), 2 * (y * z - r * x),
         2 * (x * z - r * y), 2 * (y * z + r * x), 1 - 2 * (x * x + y * y);
    return R;
}

/// One anisotropic Gaussian primitive. Rotation is a raw (w,x,y,z) quaternion
/// normalized on read; scales live in log space so sigma_k > 0 always holds.
struct Gaussian3D {
    Vec3 position = Vec3::Zero();
    Vec4 rotation = Vec4(1, 0, 0, 0);
    Vec3 log_scales = Vec3::Zero();
    Real theta_raw = Real(0);
    ShCoefficients sh;

    Vec3 scales() const { return log_scales.array().exp(); }
    Mat3 rotation_matrix() const { return quaternion_to_rotation(rotation); }
    Mat3 covariance() const {
        const Mat3 R = rotation_matrix();
        const Vec3 s2 = scales().array().square();
        return R * s2.asDiagonal() * R.transpose();
    }
    /// Condition number of the covariance, available in closed form.
    Real covariance_condition() const {
        const Real lo = log_scales.minCoeff(), hi = log_scales.maxCoeff();
        return std::exp(4 * (hi - lo));
    }
};

enum class CameraProjection { Perspective, Orthographic };

/// Pinhole (or affine/orthographic) camera. The rigid transform maps world to
/// camera space with +z forward and pixel y growing downward; pixel (ix, iy)
/// covers the continuous square [ix, ix+1) x [iy, iy+1) with its center at
/// (ix+0.5, iy+0.5).
struct Camera {
    Vec2 focal = Vec2(1, 1);
    Vec2 principal_point = Vec2(0, 0);
    Eigen::Vector2i resolution = Eigen::Vector2i(0, 0);
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();
    CameraProjection projection = CameraProjection::Perspective;

    Vec3 to_camera(const Vec3& p_world) const { return rotation * p_world + translation; }
    Vec3 center() const { return -rotation.transpose() * translation; }

    /// Unit direction used for SH evaluation at a Gaussian mean.
    Vec3 view_direction_to(const Vec3& mean_world) const {
        if (projection == CameraProjection::Orthographic)
            return rotation.row(2).transpose();
        return (mean_world - center()).normalized();
    }

    Ray pixel_ray(Real px, Real py) const {
        const Real xc = (px - principal_point.x()) / focal.x();
        const Real yc = (py - principal_point.y()) / focal.y();
        if (projection == CameraProjection::Orthographic) {
            const Vec3 origin_cam(xc, yc, 0);
            return Ray{rotation.transpose() * (origin_cam - translation),
                       rotation.row(2).transpose()};
        }
        const Vec3 dir_cam = Vec3(xc, yc, 1).normalized();
        return Ray{center(), rotation.transpose() * dir_cam};
    }

    static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up,
                          Vec2 focal_px, Eigen::Vector2i res,
                          CameraProjection proj = CameraProjection::Perspective) {
        const Vec3 fwd = (target - eye).normalized();
        const Vec3 right = fwd.cross(up).normalized();
        const Vec3 down = fwd.cross(right);
        Camera cam;
        cam.rotation.row(0) = right.transpose();
        cam.rotation.row(1) = down.transpose();
        cam.rotation.row(2) = fwd.transpose();
        cam.translation = -cam.rotation * eye;
        cam.focal = focal_px;
        cam.principal_point = Vec2(Real(res.x()) / 2, Real(res.y()) / 2);
        cam.resolution = res;
        cam.projection = proj;
        return cam;
    }
};

/// Per-view 2D footprint of a projected Gaussian.
struct ProjectedGaussian {
    Vec2 mean2d = Vec2::Zero();       // pixels
    Mat2 cov2d = Mat2::Identity();    // pixels^2
    Real depth = Real(0);             // camera-space z of the mean
    Real amplitude2d = Real(0);       // model-dependent a'
    Vec3 rgb = Vec3::Zero();          // resolved per-view color
    int source_index = -1;
};

/// sqrt((2 pi)^D det(cov)): unbounded integral of the exponential part.
template <typename Derived>
Real normalization_constant(const Eigen::MatrixBase<Derived>& cov) {
    const int dim = static_cast<int>(cov.rows());
    if (dim < 1 || dim > 3 || cov.cols() != cov.rows())
        throw std::invalid_argument("normalization_constant: dimension must be 1, 2 or 3");
    const Real det = cov.determinant();
    if (!(det > Real(0)))
        throw std::domain_error("normalization_constant: covariance is not positive definite");
    return std::sqrt(std::pow(Real(2) * std::numbers::pi_v<Real>, Real(dim)) * det);
}

template <typename Derived>
Real weight_to_amplitude(Real weight, const Eigen::MatrixBase<Derived>& cov) {
    if (weight < Real(0)) throw std::domain_error("weight must be nonnegative");
    return weight / normalization_constant(cov);
}

template <typename Derived>
Real amplitude_to_weight(Real amplitude, const Eigen::MatrixBase<Derived>& cov) {
    if (amplitude < Real(0)) throw std::domain_error("amplitude must be nonnegative");
    return amplitude * normalization_constant(cov);
}

/// 2 pi sqrt(lambda1 lambda2) over the two largest eigenvalues: the largest
/// 2D normalization any projection of this covariance can reach.
inline Real thin_side_constant(const Mat3& cov) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov, Eigen::EigenvaluesOnly);
    const Vec3 ev = es.eigenvalues();  // ascending
    if (!(ev[0] > Real(0)))
        throw std::domain_error("thin_side_constant: covariance is not positive definite");
    return Real(2) * std::numbers::pi_v<Real> * std::sqrt(ev[2] * ev[1]);
}

/// Inverse of an SPD matrix with a condition cap: eigenvalues below
/// lambda_max/cap are treated as null directions (pseudo-inverse).
inline std::pair<Mat3, bool> spd_inverse_capped(const Mat3& cov, Real cap = kConditionCap) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const Vec3 ev = es.eigenvalues();
    const Mat3 V = es.eigenvectors();
    const Real lmax = ev[2];
    if (!(lmax > Real(0))) throw std::domain_error("spd_inverse: matrix is not positive semidefinite");
    const Real thresh = lmax / cap;
    Vec3 inv;
    bool degenerate = false;
    for (int i = 0; i < 3; ++i) {
        if (ev[i] > thresh) {
            inv[i] = Real(1) / ev[i];
        } else {
            inv[i] = Real(0);
            degenerate = true;
        }
    }
    return {V * inv.asDiagonal() * V.transpose(), degenerate};
}

/// Locally-affine perspective Jacobian at a camera-space mean (unit focal).
inline Mat3 eq15_jacobian(const Vec3& mu_cam) {
    const Real z = mu_cam.z();
    const Real l = mu_cam.norm();
    Mat3 J;
    J << 1 / z, 0, -mu_cam.x() / (z * z),
         0, 1 / z, -mu_cam.y() / (z * z),
         mu_cam.x() / l, mu_cam.y() / l, z / l;
    return J;
}

/// Camera-unit 2x2 projected covariance: the top-left block of the full
/// 3x3 product J W Sigma W^T J^T (perspective), or the plain marginal
/// (orthographic). No focal scaling.
inline Mat2 projected_cov_camera(const Mat3& cov_world, const Vec3& mu_cam, const Camera& cam) {
    if (cam.projection == CameraProjection::Orthographic) {
        const Mat3 cov_cam = cam.rotation * cov_world * cam.rotation.transpose();
        return cov_cam.topLeftCorner<2, 2>();
    }
    const Mat3 M = eq15_jacobian(mu_cam) * cam.rotation;
    const Mat3 full = M * cov_world * M.transpose();
    return full.topLeftCorner<2, 2>();
}

/// Projects one Gaussian to its per-view footprint. Behind-camera Gaussians
/// (depth <= near_plane) are culled by returning nullopt. amplitude2d and rgb
/// are left for the renderer to resolve.
inline std::optional<ProjectedGaussian> project(const Gaussian3D& g, const Camera& cam,
                                                Real near_plane = kDefaultNearPlane) {
    const Vec3 mu_cam = cam.to_camera(g.position);
    if (mu_cam.z() <= near_plane) return std::nullopt;

    ProjectedGaussian p;
    p.depth = mu_cam.z();
    const Mat2 block = projected_cov_camera(g.covariance(), mu_cam, cam);
    const Mat2 F = Vec2(cam.focal.x(), cam.focal.y()).asDiagonal();
    p.cov2d = F * block * F;
    if (cam.projection == CameraProjection::Orthographic) {
        p.mean2d = Vec2(cam.focal.x() * mu_cam.x(), cam.focal.y() * mu_cam.y()) +
                   cam.principal_point;
    } else {
        p.mean2d = Vec2(cam.focal.x() * mu_cam.x() / mu_cam.z(),
                        cam.focal.y() * mu_cam.y() / mu_cam.z()) +
                   cam.principal_point;
    }
    return p;
}

/// Integral-preservation factor for extinction-based amplitudes: the absolute
/// determinant of the pixel-unit projection Jacobian, which maps the world
/// Gaussian's area measure into pixels. ScreenBlock2x2 uses the 2x2 screen
/// block (fx fy / z^2); FullDet3x3 uses the full Eq.-15 determinant and adds
/// the off-axis foreshortening l/z. Both agree on the optical axis.
/// Orthographic projection scales areas by fx fy uniformly.
inline Real jacobian_compensation(const Camera& cam, const Vec3& mu_cam,
                                  JacobianMode mode = JacobianMode::ScreenBlock2x2) {
    const Real f2 = cam.focal.x() * cam.focal.y();
    if (cam.projection == CameraProjection::Orthographic) return f2;
    if (mode == JacobianMode::FullDet3x3)
        return f2 * std::abs(eq15_jacobian(mu_cam).determinant());
    const Real z = mu_cam.z();
    return f2 / (z * z);
}

/// Projected amplitude a' for each image formation model (pixel-unit cov2d).
inline Real amplitude2d(AmplitudeModel model, Real theta, const Mat3& cov3d,
                        const Mat2& cov2d, Real jac_comp) {
    if (theta < Real(0)) throw std::domain_error("amplitude2d: theta must be nonnegative");
    switch (model) {
        case AmplitudeModel::OpacityAmplitude:
            return theta;
        case AmplitudeModel::EwaMass:
            return theta * jac_comp / normalization_constant(cov2d);
        case AmplitudeModel::OpacityThinSide:
            return theta * thin_side_constant(cov3d) * jac_comp /
                   normalization_constant(cov2d);
    }
    return Real(0);
}

/// Low-pass footprint convolution (Mip-Splatting style): adds filter_variance
/// to the diagonal and rescales the amplitude so the footprint integral is
/// unchanged.
inline ProjectedGaussian antialias_filter(const ProjectedGaussian& p, Real filter_variance) {
    if (filter_variance < Real(0))
        throw std::invalid_argument("antialias_filter: variance must be nonnegative");
    if (filter_variance == Real(0)) return p;
    ProjectedGaussian out = p;
    out.cov2d = p.cov2d + filter_variance * Mat2::Identity();
    out.amplitude2d = p.amplitude2d *
                      std::sqrt(p.cov2d.determinant() / out.cov2d.determinant());
    return out;
}

/// Camera-frame marginal of a world covariance along the view axis.
inline Mat2 marginal_cov_camera(const Mat3& cov_world, const Camera& cam) {
    const Mat3 cov_cam = cam.rotation * cov_world * cam.rotation.transpose();
    return cov_cam.topLeftCorner<2, 2>();
}

/// View-dependent 3D amplitude for a model (Eq. 17/18/19 family). The view is
/// mandatory for OpacityAmplitude, whose 3D reading is view-dependent: theta
/// is re-normalized by the marginal of the covariance in the view direction,
/// so the optical depth through the center recovers theta.
inline Real amplitude3d(AmplitudeModel model, Real theta, const Mat3& cov3d,
                        const Gaussian3D& g, const Camera* view) {
    (void)g;
    const Real i3 = normalization_constant(cov3d);
    switch (model) {
        case AmplitudeModel::EwaMass:
            return theta / i3;
        case AmplitudeModel::OpacityThinSide:
            return theta * thin_side_constant(cov3d) / i3;
        case AmplitudeModel::OpacityAmplitude: {
            if (view == nullptr)
                throw std::invalid_argument("amplitude3d: OpacityAmplitude requires a view");
            return theta * normalization_constant(marginal_cov_camera(cov3d, *view)) / i3;
        }
    }
    return Real(0);
}

/// Density of one Gaussian at a world point under the chosen model,
/// with theta resolved through the given activation.
inline Real evaluate_density(const Gaussian3D& g, const Vec3& point, AmplitudeModel model,
                             const Camera* view, Real theta) {
    if (g.covariance_condition() > kConditionCap)
        throw std::domain_error("evaluate_density: degenerate covariance");
    const Mat3 cov = g.covariance();
    const Real a = amplitude3d(model, theta, cov, g, view);
    const Vec3 d = point - g.position;
    const auto [inv, degenerate] = spd_inverse_capped(cov);
    (void)degenerate;
    const Real q = d.dot(inv * d);
    return a * std::exp(-q / 2);
}

}  // namespace volsplat
