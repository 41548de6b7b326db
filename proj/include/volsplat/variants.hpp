#pragma once

#include "volsplat/gradients.hpp"
#include "volsplat/raymarcher.hpp"
#include "volsplat/splatter.hpp"

#include <random>
#include <stdexcept>
#include <string>

namespace volsplat {

/// The six renderer variants under comparison.
enum class RendererVariant { Gs3d, Gs3dStp, Ots, OtsSatn, MarcherGs3d, MarcherOts };

inline const char* variant_name(RendererVariant v) {
    switch (v) {
        case RendererVariant::Gs3d: return "3dgs";
        case RendererVariant::Gs3dStp: return "3dgs-stp";
        case RendererVariant::Ots: return "ots";
        case RendererVariant::OtsSatn: return "ots-satn";
        case RendererVariant::MarcherGs3d: return "3dgs-marcher";
        case RendererVariant::MarcherOts: return "ots-marcher";
    }
    return "?";
}

inline RendererVariant parse_variant(const std::string& s) {
    for (RendererVariant v :
         {RendererVariant::Gs3d, RendererVariant::Gs3dStp, RendererVariant::Ots,
          RendererVariant::OtsSatn, RendererVariant::MarcherGs3d, RendererVariant::MarcherOts})
        if (s == variant_name(v)) return v;
    throw std::invalid_argument("unknown renderer variant: " + s);
}

inline bool variant_is_marcher(RendererVariant v) {
    return v == RendererVariant::MarcherGs3d || v == RendererVariant::MarcherOts;
}

inline AmplitudeModel variant_model(RendererVariant v) {
    switch (v) {
        case RendererVariant::Gs3d:
        case RendererVariant::Gs3dStp:
        case RendererVariant::MarcherGs3d:
            return AmplitudeModel::OpacityAmplitude;
        default:
            return AmplitudeModel::OpacityThinSide;
    }
}

/// Self-attenuation composites true exponentials, so a ray integral of one
/// must be reachable; its theta needs the unbounded softplus instead of the
/// sigmoid every other variant inherits.
inline ThetaActivation variant_activation(RendererVariant v) {
    return v == RendererVariant::OtsSatn ? ThetaActivation::SoftplusBeta2
                                         : ThetaActivation::Sigmoid;
}

struct RenderConfig {
    SplatOptions splat;
    MarchOptions march;
    int threads = 1;
};

inline SplatOptions variant_splat_options(RendererVariant v, SplatOptions base) {
    switch (v) {
        case RendererVariant::Gs3d:
            base.blend_mode = BlendMode::Taylor3DGS;
            base.sort_mode = SortMode::GlobalMeanDepth;
            break;
        case RendererVariant::Gs3dStp:
            base.blend_mode = BlendMode::Taylor3DGS;
            base.sort_mode = SortMode::PerPixelDepth;
            break;
        case RendererVariant::Ots:
            base.blend_mode = BlendMode::TaylorOTS;
            base.sort_mode = SortMode::GlobalMeanDepth;
            break;
        case RendererVariant::OtsSatn:
            base.blend_mode = BlendMode::SelfAttenuation;
            base.sort_mode = SortMode::GlobalMeanDepth;
            break;
        default:
            break;
    }
    return base;
}

inline RenderOutput render_variant(const Scene& scene, const Camera& cam, RendererVariant v,
                                   const RenderConfig& cfg) {
    if (variant_is_marcher(v))
        return render_march(scene, cam, variant_model(v), cfg.march, cfg.threads);
    return rasterize(scene, cam, variant_model(v), variant_splat_options(v, cfg.splat),
                     cfg.threads);
}

inline ParamGradients backward_variant(const Scene& scene, const Camera& cam,
                                       RendererVariant v, const RenderConfig& cfg,
                                       const Image& loss_grad, const RenderOutput& forward) {
    if (variant_is_marcher(v))
        return backward_march(scene, cam, variant_model(v), cfg.march, loss_grad, forward,
                              cfg.threads);
    const SplatOptions opts = variant_splat_options(v, cfg.splat);
    if (v == RendererVariant::OtsSatn)
        return backward_splat_satn(scene, cam, opts, loss_grad, forward, cfg.threads,
                                   variant_model(v));
    return backward_splat_taylor(scene, cam, variant_model(v), opts, loss_grad, forward,
                                 cfg.threads);
}

/// Options used by the gradient verification runs: truncation thresholds are
/// pushed below the finite-difference noise floor (the image formation being
/// differentiated includes whatever cutoffs are configured, so the forward
/// and backward stay consistent).
/// Seeded random scene for gradient verification: 5-9 Gaussians in the unit
/// cube, moderate anisotropy (keeps OTS Taylor alphas clear of the clamp),
/// random degree-1 SH.
inline Scene gradcheck_scene(uint64_t seed, ThetaActivation act) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> count_dist(5, 9);
    std::uniform_real_distribution<Real> pos(-0.5, 0.5);
    std::uniform_real_distribution<Real> logsig(std::log(Real(0.05)), std::log(Real(0.25)));
    std::uniform_real_distribution<Real> theta_post(0.3, 0.9);
    std::normal_distribution<Real> shn(0, 0.25), qn(0, 1);

    Scene scene;
    scene.theta_activation = act;
    scene.background = Vec3(0.1, 0.12, 0.15);
    const int n = count_dist(rng);
    for (int i = 0; i < n; ++i) {
        Gaussian3D g;
        g.position = Vec3(pos(rng), pos(rng), pos(rng));
        Vec4 q(qn(rng), qn(rng), qn(rng), qn(rng));
        while (q.norm() < Real(1e-3)) q = Vec4(qn(rng), qn(rng), qn(rng), qn(rng));
        g.rotation = q / q.norm();
        g.log_scales = Vec3(logsig(rng), logsig(rng), logsig(rng));
        g.theta_raw = activate_theta_inverse(theta_post(rng), act);
        g.sh.set_degree(1);
        for (int ch = 0; ch < 3; ++ch)
            for (auto& c : g.sh.coeffs[ch]) c = shn(rng);
        scene.gaussians.push_back(g);
    }
    return scene;
}

/// Camera used by the seeded gradient checks.
inline Camera gradcheck_camera(uint64_t seed, int res) {
    const Real az = Real(0.3) + Real(0.17) * static_cast<Real>(seed % 31);
    const Vec3 eye(Real(2.6) * std::cos(Real(0.25)) * std::cos(az),
                   Real(2.6) * std::sin(Real(0.25)),
                   Real(2.6) * std::cos(Real(0.25)) * std::sin(az));
    return Camera::look_at(eye, Vec3::Zero(), Vec3(0, 1, 0),
                           Vec2(Real(1.3) * res, Real(1.3) * res), Eigen::Vector2i(res, res));
}

inline RenderConfig gradcheck_config(int threads = 1) {
    RenderConfig cfg;
    cfg.splat.footprint_cutoff = 8;
    cfg.splat.termination_transmittance = 0;
    cfg.splat.termination_transmittance_satn = 0;
    // Fine bins shrink the detachment gap (the detached gradient ignores how
    // borders move with the parameters, finite differences do not).
    cfg.march.bins_per_gaussian = 256;
    cfg.march.termination_opacity = 0;
    cfg.threads = threads;
    return cfg;
}

}  // namespace volsplat
