#include "volsplat/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "test_util.hpp"
#include "volsplat/scene_io.hpp"

namespace volsplat {
namespace {

TEST(Activations, KnownValues) {
    EXPECT_NEAR(activate_theta(0, ThetaActivation::Sigmoid), 0.5, 1e-15);
    EXPECT_NEAR(activate_theta(0, ThetaActivation::SoftplusBeta2), std::log(2.0) / 2, 1e-15);
    // Softplus beta2 approaches identity for large inputs.
    EXPECT_NEAR(activate_theta(20, ThetaActivation::SoftplusBeta2), 20.0, 1e-12);

    // Inverses round-trip and reject out-of-codomain targets.
    for (Real v : {0.01, 0.3, 0.97}) {
        EXPECT_NEAR(activate_theta(activate_theta_inverse(v, ThetaActivation::Sigmoid),
                                   ThetaActivation::Sigmoid),
                    v, 1e-12);
        EXPECT_NEAR(activate_theta(activate_theta_inverse(v, ThetaActivation::SoftplusBeta2),
                                   ThetaActivation::SoftplusBeta2),
                    v, 1e-12);
    }
    EXPECT_THROW(activate_theta_inverse(1.0, ThetaActivation::Sigmoid), std::invalid_argument);
    EXPECT_THROW(activate_theta_inverse(-0.1, ThetaActivation::SoftplusBeta2),
                 std::invalid_argument);
}

TEST(InitializeScene, PowerLawFormulas) {
    for (int n : {4000, 100000, 1000000}) {
        const Scene gs = initialize_scene(n, RendererVariant::Gs3d, 1, 1);
        const Real expect_gs = 2 / std::pow(Real(n), Real(0.35));
        EXPECT_NEAR(gs.theta(0), expect_gs, 1e-12);

        const Scene ots = initialize_scene(n, RendererVariant::Ots, 1, 1);
        const Real expect_ots = 2 / std::pow(Real(n), Real(0.55));
        EXPECT_NEAR(ots.theta(0), expect_ots, 1e-12);

        const Scene satn = initialize_scene(n, RendererVariant::OtsSatn, 1, 1);
        EXPECT_EQ(satn.theta_activation, ThetaActivation::SoftplusBeta2);
        EXPECT_NEAR(satn.theta(0), expect_ots, 1e-12);
    }
    // Spot values from direct evaluation of the power law.
    EXPECT_NEAR(initialize_scene(100000, RendererVariant::Gs3d, 1, 1).theta(0),
                0.03556558820077846, 1e-12);
    EXPECT_NEAR(initialize_scene(100000, RendererVariant::Ots, 1, 1).theta(0),
                0.003556558820077845, 1e-12);
}

TEST(InitializeScene, DeterministicAndInUnitCube) {
    const Scene a = initialize_scene(500, RendererVariant::Ots, 42, 2);
    const Scene b = initialize_scene(500, RendererVariant::Ots, 42, 2);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a.gaussians[i].position, b.gaussians[i].position);
        EXPECT_LE(a.gaussians[i].position.cwiseAbs().maxCoeff(), 0.5);
    }
    EXPECT_THROW(initialize_scene(0, RendererVariant::Gs3d, 1), std::invalid_argument);
}

TEST(ImageLoss, ClosedFormsAndGradient) {
    Image a(16, 16, 3, 0.5), b(16, 16, 3, 0.5);
    Image grad;
    EXPECT_EQ(image_loss(a, b, 0.2, &grad), 0.0);
    for (Real g : grad.data) EXPECT_EQ(g, 0.0);

    // Constant offset, lambda = 0: pure L1.
    for (auto& v : a.data) v = 0.5 + 0.125;
    EXPECT_NEAR(image_loss(a, b, 0.0), 0.125, 1e-12);

    // Full loss gradient against finite differences.
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<Real> u(0.2, 0.8);
    for (auto& v : a.data) v = u(rng);
    for (auto& v : b.data) v = u(rng);
    image_loss(a, b, 0.2, &grad);
    std::uniform_int_distribution<size_t> pick(0, a.data.size() - 1);
    const Real h = 1e-6;
    for (int t = 0; t < 30; ++t) {
        const size_t i = pick(rng);
        Image ap = a;
        ap.data[i] += h;
        Image am = a;
        am.data[i] -= h;
        const Real fd = (image_loss(ap, b, 0.2) - image_loss(am, b, 0.2)) / (2 * h);
        EXPECT_NEAR(grad.data[i], fd, 1e-5);
    }

    Image wrong(8, 8, 3);
    EXPECT_THROW(image_loss(a, wrong, 0.2), std::invalid_argument);
}

Dataset toy_dataset(RendererVariant gt_variant = RendererVariant::OtsSatn) {
    // A single Gaussian covering the frame with a flat color target.
    SyntheticParams params;
    params.theta = 1.2;
    params.camera_count = 6;
    params.resolution = 48;
    auto synth = make_synthetic(SyntheticKind::SingleGaussian, params);
    RenderConfig cfg;
    return render_dataset(synth.scene, synth.cameras, gt_variant, cfg, 5);
}

TEST(Fit, ZeroLearningRatesFreezeParameters) {
    const Dataset data = toy_dataset();
    TrainConfig cfg = default_train_config(RendererVariant::Gs3d);
    cfg.n_gaussians = 8;
    cfg.iterations = 5;
    cfg.eval_every = 0;
    cfg.sh_degree = 1;
    cfg.lr = LearningRates{0, 0, 0, 0, 0, 0};
    const Scene init = initialize_scene(cfg.n_gaussians, cfg.variant, cfg.seed, cfg.sh_degree);
    const auto result = fit(cfg, data);
    ASSERT_EQ(result.checkpoint.scene.size(), init.size());
    for (size_t i = 0; i < init.size(); ++i) {
        EXPECT_EQ(result.checkpoint.scene.gaussians[i].position, init.gaussians[i].position);
        EXPECT_EQ(result.checkpoint.scene.gaussians[i].theta_raw, init.gaussians[i].theta_raw);
    }
}

TEST(Fit, ToySingleGaussianConverges) {
    // One Gaussian against a rendered single-Gaussian target: any correct
    // implementation climbs above 30 dB on the training view.
    SyntheticParams params;
    params.theta = 1.0;
    params.camera_count = 3;
    params.resolution = 40;
    auto synth = make_synthetic(SyntheticKind::SingleGaussian, params);
    RenderConfig gt_cfg;
    Dataset data = render_dataset(synth.scene, synth.cameras, RendererVariant::OtsSatn,
                                  gt_cfg, 3);
    ASSERT_GE(data.train.size(), 1u);

    TrainConfig cfg = default_train_config(RendererVariant::OtsSatn);
    cfg.n_gaussians = 1;
    cfg.iterations = 400;
    cfg.eval_every = 100;
    cfg.sh_degree = 0;
    cfg.sh_warmup_every = 0;
    cfg.seed = 5;
    cfg.lambda_dssim = 0.2;
    cfg.init_extent = 0.4;
    cfg.lr.position = 2e-3;
    cfg.lr.log_scales = 2e-2;
    cfg.lr.theta = 2e-2;
    const auto result = fit(cfg, data);
    EXPECT_FALSE(result.diverged);

    Real train_psnr = 0;
    for (const auto& view : data.train) {
        const auto out =
            render_variant(result.checkpoint.scene, view.camera, cfg.variant, cfg.render);
        train_psnr += psnr(out.radiance, view.target);
    }
    train_psnr /= data.train.size();
    EXPECT_GT(train_psnr, 30.0);

    // Loss decreases after warm-up.
    ASSERT_GE(result.trace.size(), 2u);
    EXPECT_LT(result.trace.back().loss, result.trace.front().loss);
}

TEST(Fit, SeededRunsAreIdentical) {
    const Dataset data = toy_dataset();
    TrainConfig cfg = default_train_config(RendererVariant::Ots);
    cfg.n_gaussians = 12;
    cfg.iterations = 30;
    cfg.eval_every = 10;
    cfg.sh_degree = 1;
    cfg.seed = 99;
    const auto a = fit(cfg, data);
    const auto b = fit(cfg, data);
    ASSERT_EQ(a.trace.size(), b.trace.size());
    for (size_t i = 0; i < a.trace.size(); ++i) {
        EXPECT_EQ(a.trace[i].loss, b.trace[i].loss);
        EXPECT_EQ(a.trace[i].test_psnr, b.trace[i].test_psnr);
    }
    for (size_t i = 0; i < a.checkpoint.scene.size(); ++i)
        EXPECT_EQ(a.checkpoint.scene.gaussians[i].position,
                  b.checkpoint.scene.gaussians[i].position);
}

TEST(Fit, ParametersStayOnManifold) {
    const Dataset data = toy_dataset();
    TrainConfig cfg = default_train_config(RendererVariant::OtsSatn);
    cfg.n_gaussians = 10;
    cfg.iterations = 50;
    cfg.eval_every = 0;
    cfg.sh_degree = 1;
    const auto result = fit(cfg, data);
    EXPECT_EQ(result.checkpoint.scene.size(), static_cast<size_t>(cfg.n_gaussians));
    for (const auto& g : result.checkpoint.scene.gaussians) {
        EXPECT_NEAR(g.rotation.norm(), 1.0, 1e-9);
        EXPECT_TRUE(g.log_scales.allFinite());
        EXPECT_GT(activate_theta(g.theta_raw, result.checkpoint.scene.theta_activation), 0.0);
    }
}

TEST(Checkpoint, RoundTripsLosslessly) {
    Scene scene = testing::random_scene(17, 6, 10, 2, ThetaActivation::SoftplusBeta2);
    AdamState adam;
    adam.init(scene_param_count(scene));
    std::mt19937_64 rng(1);
    std::normal_distribution<Real> n(0, 1);
    for (auto& v : adam.m) v = n(rng);
    for (auto& v : adam.v) v = std::abs(n(rng));
    adam.step = 123;

    Checkpoint ckpt;
    ckpt.scene = scene;
    ckpt.adam = adam;
    ckpt.iteration = 777;
    ckpt.config = {{"variant", "ots-satn"}, {"n_gaussians", 10}};

    const std::string path = (std::filesystem::temp_directory_path() / "vs_ckpt.bin").string();
    save_checkpoint(ckpt, path);
    const Checkpoint back = load_checkpoint(path);
    EXPECT_EQ(back.iteration, 777);
    EXPECT_EQ(back.adam.step, 123);
    EXPECT_EQ(back.config["variant"], "ots-satn");
    EXPECT_EQ(back.scene.theta_activation, ThetaActivation::SoftplusBeta2);
    ASSERT_EQ(back.scene.size(), scene.size());
    for (size_t i = 0; i < scene.size(); ++i) {
        EXPECT_EQ(back.scene.gaussians[i].position, scene.gaussians[i].position);
        EXPECT_EQ(back.scene.gaussians[i].rotation, scene.gaussians[i].rotation);
        EXPECT_EQ(back.scene.gaussians[i].log_scales, scene.gaussians[i].log_scales);
        EXPECT_EQ(back.scene.gaussians[i].theta_raw, scene.gaussians[i].theta_raw);
        for (int ch = 0; ch < 3; ++ch)
            EXPECT_EQ(back.scene.gaussians[i].sh.coeffs[ch], scene.gaussians[i].sh.coeffs[ch]);
    }
    EXPECT_EQ(back.adam.m, adam.m);
    EXPECT_EQ(back.adam.v, adam.v);
    std::filesystem::remove(path);
}

TEST(Fit, ResumeContinuesTrace) {
    const Dataset data = toy_dataset();
    TrainConfig cfg = default_train_config(RendererVariant::Ots);
    cfg.n_gaussians = 8;
    cfg.iterations = 20;
    cfg.eval_every = 10;
    cfg.sh_degree = 1;
    cfg.seed = 31;

    TrainConfig half = cfg;
    half.iterations = 10;
    auto first = fit(half, data);
    EXPECT_EQ(first.checkpoint.iteration, 10);
    const auto resumed = fit(cfg, data, &first.checkpoint);
    EXPECT_EQ(resumed.checkpoint.iteration, 20);
    ASSERT_FALSE(resumed.trace.empty());
    EXPECT_GT(resumed.trace.front().iteration, 10);
}

}  // namespace
}  // namespace volsplat
