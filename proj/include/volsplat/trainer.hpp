#pragma once

#include "volsplat/gradients.hpp"
#include "volsplat/metrics.hpp"
#include "volsplat/scene.hpp"
#include "volsplat/variants.hpp"

#include <json.hpp>

#include <chrono>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace volsplat {

/// One training/test view.
struct DatasetView {
    Camera camera;
    Image target;  // H x W x 3
    std::string name;
};

struct Dataset {
    std::vector<DatasetView> train;
    std::vector<DatasetView> test;
    std::string scene_name;
    Vec3 background = Vec3(1, 1, 1);
    std::vector<std::string> warnings;
};

/// Per parameter group step sizes (3DGS defaults; OTS-family configs halve
/// the theta rate).
struct LearningRates {
    Real position = Real(1.6e-4);
    Real rotation = Real(1e-3);
    Real log_scales = Real(5e-3);
    Real theta = Real(0.05);
    Real sh_dc = Real(2.5e-3);
    Real sh_rest = Real(1.25e-4);
};

struct TrainConfig {
    RendererVariant variant = RendererVariant::Gs3d;
    int n_gaussians = 4000;
    int iterations = 3000;
    LearningRates lr;
    Real lambda_dssim = Real(0.2);
    int eval_every = 500;
    int eval_views_cap = 10;
    uint64_t seed = 0;
    int sh_degree = 3;
    int sh_warmup_every = 1000;  // raise the active degree every N iterations; 0 = off
    int threads = 1;
    Real init_extent = Real(1);
    RenderConfig render;
};

/// Fills variant-dependent defaults: OTS-family weights train at half the
/// 3DGS theta rate.
inline TrainConfig default_train_config(RendererVariant v) {
    TrainConfig cfg;
    cfg.variant = v;
    if (variant_model(v) == AmplitudeModel::OpacityThinSide) cfg.lr.theta = Real(0.025);
    return cfg;
}

/// Random positions in the unit cube (scaled by extent) with a uniform
/// initial data term: post-activation 2/N^0.35 for the opacity-model family
/// and 2/N^0.55 for OTS-based variants.
inline Scene initialize_scene(int n, RendererVariant variant, uint64_t seed,
                              int sh_degree = 3, Real extent = Real(1)) {
    if (n < 1) throw std::invalid_argument("initialize_scene: need at least one Gaussian");
    const bool ots_family = variant_model(variant) == AmplitudeModel::OpacityThinSide;
    const Real exponent = ots_family ? Real(0.55) : Real(0.35);
    const Real theta0 = Real(2) / std::pow(Real(n), exponent);
    const ThetaActivation act = variant_activation(variant);
    const Real raw0 = activate_theta_inverse(theta0, act);
    const Real sigma0 = extent * std::pow(Real(n), Real(-1) / 3) * Real(0.5);

    Scene scene;
    scene.theta_activation = act;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<Real> u(-extent / 2, extent / 2);
    scene.gaussians.resize(n);
    for (auto& g : scene.gaussians) {
        g.position = Vec3(u(rng), u(rng), u(rng));
        g.rotation = Vec4(1, 0, 0, 0);
        g.log_scales = Vec3::Constant(std::log(sigma0));
        g.theta_raw = raw0;
        g.sh.set_degree(sh_degree);  // zero coefficients: mid-gray
    }
    return scene;
}

/// (1-lambda) L1 + lambda (1 - SSIM) with the exact image-space gradient.
inline Real image_loss(const Image& rendered, const Image& target, Real lambda,
                       Image* grad = nullptr) {
    if (!rendered.same_shape(target)) throw std::invalid_argument("loss: shape mismatch");
    const Real count = static_cast<Real>(rendered.data.size());
    Real l1 = 0;
    if (grad) *grad = Image(rendered.height, rendered.width, rendered.channels);
    for (size_t i = 0; i < rendered.data.size(); ++i) {
        const Real d = rendered.data[i] - target.data[i];
        l1 += std::abs(d);
        if (grad) grad->data[i] = (1 - lambda) * (d > 0 ? 1 : (d < 0 ? -1 : 0)) / count;
    }
    l1 /= count;
    if (lambda == Real(0)) return (1 - lambda) * l1;

    Image ssim_grad;
    const Real s = ssim(rendered, target, grad ? &ssim_grad : nullptr);
    if (grad)
        for (size_t i = 0; i < grad->data.size(); ++i)
            grad->data[i] -= lambda * ssim_grad.data[i];
    return (1 - lambda) * l1 + lambda * (1 - s);
}

// ---------------------------------------------------------------------------
// Adam over the flat scene parameterization.
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<Real> m, v;
    int64_t step = 0;

    void init(size_t count) {
        m.assign(count, Real(0));
        v.assign(count, Real(0));
        step = 0;
    }
};

constexpr Real kAdamBeta1 = Real(0.9);
constexpr Real kAdamBeta2 = Real(0.999);
constexpr Real kAdamEps = Real(1e-15);

inline Real group_learning_rate(const LearningRates& lr, const grad_detail::ParamRef& ref) {
    switch (ref.field) {
        case 0: return lr.position;
        case 1: return lr.rotation;
        case 2: return lr.log_scales;
        case 3: return lr.theta;
        default: return ref.b == 0 ? lr.sh_dc : lr.sh_rest;
    }
}

/// One Adam update; quaternions are renormalized after the step so the
/// rotation invariant holds on every write. Parameters walk in the flat
/// layout order, so the moment arrays line up with the checkpoint format.
inline void adam_step(Scene& scene, const ParamGradients& grads, AdamState& state,
                      const LearningRates& lr) {
    const size_t count = scene_param_count(scene);
    if (state.m.size() != count) state.init(count);
    ++state.step;
    const Real bc1 = 1 - std::pow(kAdamBeta1, static_cast<Real>(state.step));
    const Real bc2 = 1 - std::pow(kAdamBeta2, static_cast<Real>(state.step));

    size_t idx = 0;
    auto update = [&](Real& value, Real g, Real rate) {
        state.m[idx] = kAdamBeta1 * state.m[idx] + (1 - kAdamBeta1) * g;
        state.v[idx] = kAdamBeta2 * state.v[idx] + (1 - kAdamBeta2) * g * g;
        value -= rate * (state.m[idx] / bc1) / (std::sqrt(state.v[idx] / bc2) + kAdamEps);
        ++idx;
    };
    for (size_t i = 0; i < scene.size(); ++i) {
        Gaussian3D& g = scene.gaussians[i];
        for (int k = 0; k < 3; ++k) update(g.position[k], grads.position[i][k], lr.position);
        for (int k = 0; k < 4; ++k) update(g.rotation[k], grads.rotation[i][k], lr.rotation);
        for (int k = 0; k < 3; ++k)
            update(g.log_scales[k], grads.log_scales[i][k], lr.log_scales);
        update(g.theta_raw, grads.theta_raw[i], lr.theta);
        for (int ch = 0; ch < 3; ++ch)
            for (size_t k = 0; k < g.sh.coeffs[ch].size(); ++k)
                update(g.sh.coeffs[ch][k], grads.sh[i].coeffs[ch][k],
                       k == 0 ? lr.sh_dc : lr.sh_rest);
    }
    for (auto& g : scene.gaussians) g.rotation /= g.rotation.norm();
}

// ---------------------------------------------------------------------------
// Checkpoints: versioned binary container, JSON header + raw LE f64 arrays.
// ---------------------------------------------------------------------------

struct Checkpoint {
    Scene scene;
    AdamState adam;
    int iteration = 0;
    nlohmann::json config;
};

namespace trainer_detail {
constexpr char kCheckpointMagic[8] = {'V', 'S', 'P', 'L', 'C', 'K', 'P', '1'};

inline void write_reals(std::ostream& os, const Real* data, size_t count) {
    std::vector<double> buf(count);
    for (size_t i = 0; i < count; ++i) buf[i] = static_cast<double>(data[i]);
    os.write(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(double));
}

inline void read_reals(std::istream& is, Real* data, size_t count) {
    std::vector<double> buf(count);
    is.read(reinterpret_cast<char*>(buf.data()), buf.size() * sizeof(double));
    for (size_t i = 0; i < count; ++i) data[i] = static_cast<Real>(buf[i]);
}
}  // namespace trainer_detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    namespace fs = std::filesystem;
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write checkpoint: " + tmp);
        os.write(trainer_detail::kCheckpointMagic, 8);

        nlohmann::json header;
        header["version"] = 1;
        header["iteration"] = ckpt.iteration;
        header["gaussians"] = ckpt.scene.size();
        header["sh_degree"] = ckpt.scene.gaussians.empty() ? 0 : ckpt.scene.gaussians[0].sh.degree;
        header["theta_activation"] =
            ckpt.scene.theta_activation == ThetaActivation::Sigmoid ? "sigmoid" : "softplus2";
        header["background"] = {ckpt.scene.background.x(), ckpt.scene.background.y(),
                                ckpt.scene.background.z()};
        header["adam_step"] = ckpt.adam.step;
        header["adam_present"] = !ckpt.adam.m.empty();
        header["config"] = ckpt.config;
        const std::string hs = header.dump();
        const uint32_t len = static_cast<uint32_t>(hs.size());
        os.write(reinterpret_cast<const char*>(&len), 4);
        os.write(hs.data(), hs.size());

        for (const auto& g : ckpt.scene.gaussians) {
            trainer_detail::write_reals(os, g.position.data(), 3);
            trainer_detail::write_reals(os, g.rotation.data(), 4);
            trainer_detail::write_reals(os, g.log_scales.data(), 3);
            trainer_detail::write_reals(os, &g.theta_raw, 1);
            for (int ch = 0; ch < 3; ++ch)
                trainer_detail::write_reals(os, g.sh.coeffs[ch].data(), g.sh.coeffs[ch].size());
        }
        if (!ckpt.adam.m.empty()) {
            trainer_detail::write_reals(os, ckpt.adam.m.data(), ckpt.adam.m.size());
            trainer_detail::write_reals(os, ckpt.adam.v.data(), ckpt.adam.v.size());
        }
        if (!os) throw std::runtime_error("checkpoint write failed: " + tmp);
    }
    fs::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, trainer_detail::kCheckpointMagic, 8) != 0)
        throw std::runtime_error("not a volsplat checkpoint: " + path);
    uint32_t len = 0;
    is.read(reinterpret_cast<char*>(&len), 4);
    std::string hs(len, '\0');
    is.read(hs.data(), len);
    const nlohmann::json header = nlohmann::json::parse(hs);

    Checkpoint ckpt;
    ckpt.iteration = header.at("iteration").get<int>();
    ckpt.config = header.value("config", nlohmann::json::object());
    ckpt.scene.theta_activation = header.at("theta_activation").get<std::string>() == "sigmoid"
                                      ? ThetaActivation::Sigmoid
                                      : ThetaActivation::SoftplusBeta2;
    const auto bg = header.at("background");
    ckpt.scene.background = Vec3(bg[0].get<Real>(), bg[1].get<Real>(), bg[2].get<Real>());
    const size_t n = header.at("gaussians").get<size_t>();
    const int degree = header.at("sh_degree").get<int>();
    ckpt.scene.gaussians.resize(n);
    for (auto& g : ckpt.scene.gaussians) {
        g.sh.set_degree(degree);
        trainer_detail::read_reals(is, g.position.data(), 3);
        trainer_detail::read_reals(is, g.rotation.data(), 4);
        trainer_detail::read_reals(is, g.log_scales.data(), 3);
        trainer_detail::read_reals(is, &g.theta_raw, 1);
        for (int ch = 0; ch < 3; ++ch)
            trainer_detail::read_reals(is, g.sh.coeffs[ch].data(), g.sh.coeffs[ch].size());
    }
    if (header.value("adam_present", false)) {
        const size_t count = scene_param_count(ckpt.scene);
        ckpt.adam.m.resize(count);
        ckpt.adam.v.resize(count);
        trainer_detail::read_reals(is, ckpt.adam.m.data(), count);
        trainer_detail::read_reals(is, ckpt.adam.v.data(), count);
        ckpt.adam.step = header.value("adam_step", int64_t(0));
    }
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    return ckpt;
}

// ---------------------------------------------------------------------------
// Fit loop: fixed Gaussian count, no densification, no pruning, no opacity
// reset. One random training view per iteration.
// ---------------------------------------------------------------------------

struct MetricTraceRow {
    int iteration = 0;
    Real loss = 0;
    Real test_psnr = 0;
    Real test_ssim = 0;
    Real wall_seconds = 0;
};

struct FitResult {
    Checkpoint checkpoint;
    std::vector<MetricTraceRow> trace;
    bool diverged = false;
};

/// SH warm-up: the active degree rises by one every sh_warmup_every
/// iterations (coefficients above it are frozen at zero by masking them out
/// of the gradient).
inline int active_sh_degree(const TrainConfig& cfg, int iteration) {
    if (cfg.sh_warmup_every <= 0) return cfg.sh_degree;
    return std::min(cfg.sh_degree, iteration / cfg.sh_warmup_every);
}

inline void mask_sh_gradients(ParamGradients& grads, int active_degree) {
    const int keep = sh_coeff_count(active_degree);
    for (auto& sh : grads.sh)
        for (int ch = 0; ch < 3; ++ch)
            for (size_t k = keep; k < sh.coeffs[ch].size(); ++k) sh.coeffs[ch][k] = 0;
}

inline std::pair<Real, Real> evaluate_test_metrics(const Scene& scene, const Dataset& data,
                                                   const TrainConfig& cfg) {
    const size_t count = std::min<size_t>(data.test.size(), cfg.eval_views_cap);
    if (count == 0) return {Real(0), Real(0)};
    Real psum = 0, ssum = 0;
    for (size_t i = 0; i < count; ++i) {
        const auto out = render_variant(scene, data.test[i].camera, cfg.variant, cfg.render);
        psum += psnr(out.radiance, data.test[i].target);
        ssum += ssim(out.radiance, data.test[i].target);
    }
    return {psum / count, ssum / count};
}

inline FitResult fit(const TrainConfig& cfg, const Dataset& data,
                     const Checkpoint* resume = nullptr,
                     const std::function<void(const MetricTraceRow&)>& on_eval = nullptr) {
    if (data.train.empty()) throw std::invalid_argument("fit: dataset has no training views");

    FitResult result;
    Scene scene;
    AdamState adam;
    int start_iter = 0;
    if (resume != nullptr) {
        scene = resume->scene;
        adam = resume->adam;
        start_iter = resume->iteration;
    } else {
        scene = initialize_scene(cfg.n_gaussians, cfg.variant, cfg.seed, cfg.sh_degree,
                                 cfg.init_extent);
        scene.background = data.background;
    }

    RenderConfig render_cfg = cfg.render;
    render_cfg.threads = cfg.threads;

    std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_int_distribution<size_t> pick(0, data.train.size() - 1);

    Scene last_finite = scene;
    const auto t0 = std::chrono::steady_clock::now();
    for (int it = start_iter; it < cfg.iterations; ++it) {
        const DatasetView& view = data.train[pick(rng)];
        const auto fwd = render_variant(scene, view.camera, cfg.variant, render_cfg);
        Image loss_grad;
        const Real loss = image_loss(fwd.radiance, view.target, cfg.lambda_dssim, &loss_grad);
        if (!std::isfinite(loss)) {
            result.diverged = true;
            scene = last_finite;
            break;
        }
        last_finite = scene;

        ParamGradients grads =
            backward_variant(scene, view.camera, cfg.variant, render_cfg, loss_grad, fwd);
        mask_sh_gradients(grads, active_sh_degree(cfg, it));
        adam_step(scene, grads, adam, cfg.lr);

        const bool last = (it + 1 == cfg.iterations);
        if (last || (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0)) {
            const auto [p, s] = evaluate_test_metrics(scene, data, cfg);
            MetricTraceRow row;
            row.iteration = it + 1;
            row.loss = loss;
            row.test_psnr = p;
            row.test_ssim = s;
            row.wall_seconds =
                std::chrono::duration<Real>(std::chrono::steady_clock::now() - t0).count();
            result.trace.push_back(row);
            if (on_eval) on_eval(row);
        }
    }

    result.checkpoint.scene = std::move(scene);
    result.checkpoint.adam = std::move(adam);
    result.checkpoint.iteration = result.diverged ? start_iter : cfg.iterations;
    return result;
}

}  // namespace volsplat
