#pragma once

#include "volsplat/gaussian.hpp"
#include "volsplat/scene.hpp"

#include <random>

namespace volsplat::testing {

inline Vec4 random_unit_quaternion(std::mt19937_64& rng) {
    std::normal_distribution<Real> n(0, 1);
    Vec4 q(n(rng), n(rng), n(rng), n(rng));
    while (q.norm() < Real(1e-3)) q = Vec4(n(rng), n(rng), n(rng), n(rng));
    return q / q.norm();
}

inline Mat3 random_rotation(std::mt19937_64& rng) {
    return quaternion_to_rotation(random_unit_quaternion(rng));
}

inline Mat3 random_spd(std::mt19937_64& rng, Real sigma_min = Real(0.2),
                       Real sigma_max = Real(1.5)) {
    std::uniform_real_distribution<Real> u(std::log(sigma_min), std::log(sigma_max));
    Vec3 s2;
    for (int i = 0; i < 3; ++i) {
        const Real s = std::exp(u(rng));
        s2[i] = s * s;
    }
    const Mat3 R = random_rotation(rng);
    return R * s2.asDiagonal() * R.transpose();
}

inline Vec3 random_unit_vector(std::mt19937_64& rng) {
    std::normal_distribution<Real> n(0, 1);
    Vec3 v(n(rng), n(rng), n(rng));
    while (v.norm() < Real(1e-3)) v = Vec3(n(rng), n(rng), n(rng));
    return v.normalized();
}

/// Random scene in the unit cube: the randomized-scene recipe shared by the
/// gradient checks and renderer comparisons.
inline Scene random_scene(uint64_t seed, int min_count = 5, int max_count = 20,
                          int sh_degree = 1,
                          ThetaActivation act = ThetaActivation::Sigmoid) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> count_dist(min_count, max_count);
    std::uniform_real_distribution<Real> pos(-0.5, 0.5);
    std::uniform_real_distribution<Real> logsig(std::log(Real(0.05)), std::log(Real(0.25)));
    std::uniform_real_distribution<Real> theta_post(0.3, 0.9);
    std::normal_distribution<Real> shn(0, 0.25);

    Scene scene;
    scene.theta_activation = act;
    scene.background = Vec3(0.1, 0.12, 0.15);
    const int n = count_dist(rng);
    for (int i = 0; i < n; ++i) {
        Gaussian3D g;
        g.position = Vec3(pos(rng), pos(rng), pos(rng));
        g.rotation = random_unit_quaternion(rng);
        g.log_scales = Vec3(logsig(rng), logsig(rng), logsig(rng));
        g.theta_raw = activate_theta_inverse(theta_post(rng), act);
        g.sh.set_degree(sh_degree);
        for (int ch = 0; ch < 3; ++ch)
            for (auto& c : g.sh.coeffs[ch]) c = shn(rng);
        scene.gaussians.push_back(g);
    }
    return scene;
}

/// Perspective camera on an orbit looking at the origin.
inline Camera orbit_camera(Real azimuth, Real elevation, Real radius,
                           int res = 64, Real focal = Real(80),
                           CameraProjection proj = CameraProjection::Perspective) {
    const Vec3 eye(radius * std::cos(elevation) * std::cos(azimuth),
                   radius * std::sin(elevation),
                   radius * std::cos(elevation) * std::sin(azimuth));
    return Camera::look_at(eye, Vec3::Zero(), Vec3(0, 1, 0), Vec2(focal, focal),
                           Eigen::Vector2i(res, res), proj);
}

}  // namespace volsplat::testing
