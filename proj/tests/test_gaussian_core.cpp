#include "volsplat/gaussian.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "test_util.hpp"

namespace volsplat {
namespace {

using testing::orbit_camera;
using testing::random_rotation;
using testing::random_spd;
using testing::random_unit_quaternion;
using testing::random_unit_vector;

constexpr Real kPi = std::numbers::pi_v<Real>;

TEST(NormalizationConstant, KnownValues) {
    EXPECT_NEAR(normalization_constant(Mat2::Identity()), 2 * kPi, 1e-12);
    EXPECT_NEAR(normalization_constant(Mat3::Identity()), std::pow(2 * kPi, 1.5), 1e-12);
    const Mat3 cov = Vec3(4, 1, 1).asDiagonal();
    EXPECT_NEAR(normalization_constant(cov), 2 * std::pow(2 * kPi, 1.5), 1e-12);
}

TEST(NormalizationConstant, RejectsNonSpd) {
    Mat2 bad;
    bad << 1, 2, 2, 1;  // det = -3
    EXPECT_THROW(normalization_constant(bad), std::domain_error);
    EXPECT_THROW(normalization_constant(Mat3::Zero()), std::domain_error);
}

TEST(WeightAmplitude, KnownConversions) {
    EXPECT_NEAR(weight_to_amplitude(1.0, Mat3::Identity()), 1.0 / std::pow(2 * kPi, 1.5), 1e-12);
    EXPECT_NEAR(amplitude_to_weight(1.0, Mat2::Identity()), 2 * kPi, 1e-12);
}

TEST(WeightAmplitude, RoundTripProperty) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<Real> wdist(0, 3);
    for (int i = 0; i < 10000; ++i) {
        const Real w = wdist(rng);
        Real back;
        if (i % 2 == 0) {
            const Mat3 cov = random_spd(rng);
            back = amplitude_to_weight(weight_to_amplitude(w, cov), cov);
        } else {
            const Mat3 cov3 = random_spd(rng);
            const Mat2 cov = cov3.topLeftCorner<2, 2>();
            back = amplitude_to_weight(weight_to_amplitude(w, cov), cov);
        }
        EXPECT_NEAR(back, w, 1e-12 * std::max<Real>(w, 1));
    }
}

TEST(Gaussian3D, CovarianceEigenvaluesMatchScales) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
        Gaussian3D g;
        g.rotation = random_unit_quaternion(rng);
        g.log_scales = Vec3(-1.1, 0.2, 0.7);
        const Mat3 cov = g.covariance();
        EXPECT_NEAR((cov - cov.transpose()).norm(), 0, 1e-12);
        Eigen::SelfAdjointEigenSolver<Mat3> es(cov, Eigen::EigenvaluesOnly);
        Vec3 expected = g.scales().array().square();
        std::sort(expected.data(), expected.data() + 3);
        for (int k = 0; k < 3; ++k) EXPECT_NEAR(es.eigenvalues()[k], expected[k], 1e-9);
    }
}

TEST(EvaluateDensity, PeakAndFalloff) {
    Gaussian3D g;  // unit isotropic at origin
    const Real theta = 1.0;
    const Real peak = evaluate_density(g, Vec3::Zero(), AmplitudeModel::EwaMass, nullptr, theta);
    EXPECT_NEAR(peak, 1.0 / std::pow(2 * kPi, 1.5), 1e-9);

    // Mahalanobis distance 2 -> peak * exp(-2).
    const Real v = evaluate_density(g, Vec3(2, 0, 0), AmplitudeModel::EwaMass, nullptr, theta);
    EXPECT_NEAR(v, peak * std::exp(-2.0), 1e-12);
}

TEST(EvaluateDensity, ThinSideIsotropic) {
    Gaussian3D g;
    const Real v =
        evaluate_density(g, Vec3::Zero(), AmplitudeModel::OpacityThinSide, nullptr, 0.8);
    EXPECT_NEAR(v, 0.8 * (2 * kPi) / std::pow(2 * kPi, 1.5), 1e-12);
    EXPECT_NEAR(v, 0.3191538243211462, 1e-12);
}

TEST(EvaluateDensity, DegenerateCovarianceThrows) {
    Gaussian3D g;
    g.log_scales = Vec3(0, 0, -7.5);  // condition e^30 > 1e12
    EXPECT_THROW(evaluate_density(g, Vec3::Zero(), AmplitudeModel::EwaMass, nullptr, 1.0),
                 std::domain_error);
}

TEST(EvaluateDensity, RotationEquivariance) {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 30; ++i) {
        Gaussian3D g;
        g.position = random_unit_vector(rng) * 0.3;
        g.rotation = random_unit_quaternion(rng);
        g.log_scales = Vec3(-0.7, 0.1, 0.4);
        const Vec3 point = g.position + random_unit_vector(rng) * 0.8;

        const Vec4 qr = random_unit_quaternion(rng);
        const Mat3 R = quaternion_to_rotation(qr);

        Gaussian3D gr = g;
        gr.position = R * g.position;
        // Compose quaternions: q_R * q (Hamilton product, w first).
        const Vec4 a = qr, b = g.rotation;
        gr.rotation = Vec4(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                           a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                           a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                           a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);

        for (auto model : {AmplitudeModel::EwaMass, AmplitudeModel::OpacityThinSide}) {
            const Real before = evaluate_density(g, point, model, nullptr, 0.7);
            const Real after = evaluate_density(gr, R * point, model, nullptr, 0.7);
            EXPECT_NEAR(after, before, 1e-9);
        }
    }
}

TEST(Project, OnAxisBlock) {
    Gaussian3D g;
    g.position = Vec3(0, 0, 2);
    Camera cam;  // identity pose, unit focal, pp at 0
    cam.resolution = Eigen::Vector2i(4, 4);
    const auto p = project(g, cam);
    ASSERT_TRUE(p.has_value());
    EXPECT_NEAR(p->depth, 2.0, 1e-15);
    EXPECT_NEAR(p->mean2d.x(), 0.0, 1e-15);
    EXPECT_NEAR(p->cov2d(0, 0), 0.25, 1e-12);
    EXPECT_NEAR(p->cov2d(1, 1), 0.25, 1e-12);
    EXPECT_NEAR(p->cov2d(0, 1), 0.0, 1e-12);
}

TEST(Project, OrthographicMarginalizes) {
    Gaussian3D g;
    g.position = Vec3(0, 0, 3);
    g.log_scales = Vec3(std::log(0.5), std::log(0.8), std::log(1.7));
    Camera cam;
    cam.projection = CameraProjection::Orthographic;
    cam.resolution = Eigen::Vector2i(4, 4);
    const auto p = project(g, cam);
    ASSERT_TRUE(p.has_value());
    EXPECT_NEAR(p->cov2d(0, 0), 0.25, 1e-12);
    EXPECT_NEAR(p->cov2d(1, 1), 0.64, 1e-12);
    EXPECT_NEAR(p->cov2d(0, 1), 0.0, 1e-12);
}

TEST(Project, BehindCameraCulled) {
    Gaussian3D g;
    g.position = Vec3(0, 0, -1);
    Camera cam;
    EXPECT_FALSE(project(g, cam).has_value());
    g.position = Vec3(0, 0, 0.005);  // in front but inside the near plane
    EXPECT_FALSE(project(g, cam).has_value());
}

// Off-axis footprints lose the on-axis symmetry and should track a dense
// numerical projection of the true perspective image of the Gaussian.
TEST(Project, OffAxisMatchesNumericalProjection) {
    Gaussian3D g;
    g.position = Vec3(0.8, 0.3, 2.0);
    g.log_scales = Vec3::Constant(std::log(0.04));
    Camera cam;
    cam.resolution = Eigen::Vector2i(4, 4);
    const auto p = project(g, cam);
    ASSERT_TRUE(p.has_value());
    EXPECT_GT(std::abs(p->cov2d(0, 1)), 1e-6);  // asymmetric relative to on-axis

    // Monte-Carlo covariance of exactly projected samples.
    std::mt19937_64 rng(99);
    std::normal_distribution<Real> n(0, 1);
    const Real sigma = 0.04;
    Vec2 mean = Vec2::Zero();
    Mat2 cov = Mat2::Zero();
    const int samples = 400000;
    std::vector<Vec2> pts(samples);
    for (int i = 0; i < samples; ++i) {
        const Vec3 x = g.position + sigma * Vec3(n(rng), n(rng), n(rng));
        pts[i] = Vec2(x.x() / x.z(), x.y() / x.z());
        mean += pts[i];
    }
    mean /= samples;
    for (const auto& q : pts) cov += (q - mean) * (q - mean).transpose();
    cov /= samples;

    EXPECT_NEAR(p->mean2d.x(), mean.x(), 2e-4);
    EXPECT_NEAR(p->mean2d.y(), mean.y(), 2e-4);
    for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 2; ++c)
            EXPECT_NEAR(p->cov2d(r, c), cov(r, c), 0.03 * cov.trace());
}

TEST(ThinSideConstant, KnownAndRotationInvariant) {
    EXPECT_NEAR(thin_side_constant(Mat3::Identity()), 2 * kPi, 1e-12);
    const Mat3 d = Vec3(9, 4, 1).asDiagonal();
    EXPECT_NEAR(thin_side_constant(d), 2 * kPi * 6, 1e-12);
    std::mt19937_64 rng(5);
    for (int i = 0; i < 20; ++i) {
        const Mat3 R = random_rotation(rng);
        EXPECT_NEAR(thin_side_constant(R * d * R.transpose()), 2 * kPi * 6, 1e-9);
    }
    EXPECT_THROW(thin_side_constant(Mat3::Zero()), std::domain_error);
}

TEST(Amplitude2D, ModelValues) {
    const Mat3 iso = Mat3::Identity();
    const Mat2 proj_iso = Mat2::Identity();
    EXPECT_NEAR(amplitude2d(AmplitudeModel::OpacityAmplitude, 0.7, iso, proj_iso, 1.0), 0.7, 0);
    // Isotropic OTS under an affine view: a' = theta exactly.
    EXPECT_NEAR(amplitude2d(AmplitudeModel::OpacityThinSide, 0.7, iso, proj_iso, 1.0), 0.7,
                1e-12);

    // Flat Gaussian sigma = (1, 1, eps): thin view a' = theta, long view theta/eps.
    const Real eps = 0.1;
    const Mat3 flat = Vec3(1, 1, eps * eps).asDiagonal();
    const Mat2 thin_view = Mat2::Identity();
    EXPECT_NEAR(amplitude2d(AmplitudeModel::OpacityThinSide, 0.6, flat, thin_view, 1.0), 0.6,
                1e-12);
    const Mat2 long_view = Vec2(1, eps * eps).asDiagonal();
    EXPECT_NEAR(amplitude2d(AmplitudeModel::OpacityThinSide, 0.6, flat, long_view, 1.0),
                0.6 / eps, 1e-9);

    // EwaMass: footprint integral a' * I2 equals theta.
    const Real a = amplitude2d(AmplitudeModel::EwaMass, 0.6, flat, long_view, 1.0);
    EXPECT_NEAR(a * normalization_constant(long_view), 0.6, 1e-12);
}

TEST(Amplitude2D, OtsMassViewInvariant) {
    std::mt19937_64 rng(13);
    Gaussian3D g;
    g.rotation = random_unit_quaternion(rng);
    g.log_scales = Vec3(std::log(0.9), std::log(0.4), std::log(0.15));
    const Mat3 cov = g.covariance();
    const Real theta = 0.8;
    const Real expected_mass = theta * thin_side_constant(cov);
    for (int i = 0; i < 100; ++i) {
        const Vec3 dir = random_unit_vector(rng);
        Camera cam = Camera::look_at(dir * 5, Vec3::Zero(), Vec3(0, 1, 0), Vec2(1, 1),
                                     Eigen::Vector2i(4, 4), CameraProjection::Orthographic);
        const auto p = project(g, cam);
        ASSERT_TRUE(p.has_value());
        const Real aprime =
            amplitude2d(AmplitudeModel::OpacityThinSide, theta, cov, p->cov2d, 1.0);
        const Real mass = aprime * normalization_constant(p->cov2d);
        EXPECT_NEAR(mass, expected_mass, 1e-9 * expected_mass);
    }
}

TEST(Amplitude2D, ThinSideConstantIsMaximalI2) {
    std::mt19937_64 rng(17);
    for (int trial = 0; trial < 5; ++trial) {
        const Mat3 cov = random_spd(rng);
        const Real istar = thin_side_constant(cov);
        for (int i = 0; i < 1000; ++i) {
            const Vec3 dir = random_unit_vector(rng);
            Camera cam = Camera::look_at(dir * 5, Vec3::Zero(), Vec3(0, 1, 0), Vec2(1, 1),
                                         Eigen::Vector2i(4, 4), CameraProjection::Orthographic);
            const Mat2 block = projected_cov_camera(cov, cam.to_camera(Vec3::Zero()), cam);
            EXPECT_LE(normalization_constant(block), istar * (1 + 1e-12));
        }
    }
}

// Under the affine camera the numerically integrated footprint of an EwaMass
// Gaussian recovers the stored weight: marginalization preserves w.
TEST(Project, MarginalizationPreservesWeight) {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        Gaussian3D g;
        g.rotation = random_unit_quaternion(rng);
        g.log_scales = Vec3(std::log(0.5), std::log(0.3), std::log(0.12));
        const Vec3 dir = random_unit_vector(rng);
        Camera cam = Camera::look_at(dir * 4, Vec3::Zero(), Vec3(0, 1, 0), Vec2(1, 1),
                                     Eigen::Vector2i(4, 4), CameraProjection::Orthographic);
        const auto p = project(g, cam);
        ASSERT_TRUE(p.has_value());
        const Real w = 0.85;
        const Real aprime = amplitude2d(AmplitudeModel::EwaMass, w, g.covariance(), p->cov2d,
                                        jacobian_compensation(cam, cam.to_camera(g.position)));

        Eigen::SelfAdjointEigenSolver<Mat2> es(p->cov2d);
        const Real smin = std::sqrt(es.eigenvalues()[0]);
        const Real smax = std::sqrt(es.eigenvalues()[1]);
        const Real h = smin / 10;
        const Real extent = 9 * smax;
        const Mat2 inv = p->cov2d.inverse();
        Real integral = 0;
        for (Real y = -extent; y <= extent; y += h)
            for (Real x = -extent; x <= extent; x += h) {
                const Vec2 d(x, y);
                integral += std::exp(-0.5 * d.dot(inv * d));
            }
        integral *= aprime * h * h;
        EXPECT_NEAR(integral, w, 1e-4 * w);
    }
}

TEST(AntialiasFilter, IdentityAndDeterminantScaling) {
    ProjectedGaussian p;
    p.cov2d = Mat2::Identity();
    p.amplitude2d = 1.0;
    const auto same = antialias_filter(p, 0.0);
    EXPECT_EQ(same.amplitude2d, p.amplitude2d);
    EXPECT_EQ(same.cov2d, p.cov2d);

    const auto f = antialias_filter(p, 0.3);
    EXPECT_NEAR(f.amplitude2d, std::sqrt(1.0 / 1.69), 1e-12);
    EXPECT_NEAR(f.cov2d(0, 0), 1.3, 1e-15);

    // Footprint integral is preserved by construction.
    const Real before = p.amplitude2d * normalization_constant(p.cov2d);
    const Real after = f.amplitude2d * normalization_constant(f.cov2d);
    EXPECT_NEAR(after, before, 1e-9 * before);
}

TEST(JacobianCompensation, PixelAreaScaleAndModes) {
    Camera cam;
    cam.focal = Vec2(50, 40);
    cam.resolution = Eigen::Vector2i(8, 8);
    // On-axis both modes give the pixel-area scale fx fy / z^2.
    EXPECT_NEAR(jacobian_compensation(cam, Vec3(0, 0, 2)), 50 * 40 / 4.0, 1e-12);
    EXPECT_NEAR(jacobian_compensation(cam, Vec3(0, 0, 2), JacobianMode::FullDet3x3),
                50 * 40 / 4.0, 1e-9);

    // Full 3x3 mode adds the off-axis foreshortening l / z.
    const Vec3 mu(1.0, 0.5, 2.0);
    const Real base = 50 * 40 / (mu.z() * mu.z());
    EXPECT_NEAR(jacobian_compensation(cam, mu), base, 1e-12);
    EXPECT_NEAR(jacobian_compensation(cam, mu, JacobianMode::FullDet3x3),
                base * mu.norm() / mu.z(), 1e-9);

    Camera ortho;
    ortho.projection = CameraProjection::Orthographic;
    EXPECT_EQ(jacobian_compensation(ortho, mu), 1.0);  // unit focal
}

}  // namespace
}  // namespace volsplat
