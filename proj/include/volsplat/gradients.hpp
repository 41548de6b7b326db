#pragma once

#include "volsplat/raymarcher.hpp"
#include "volsplat/scene.hpp"
#include "volsplat/splatter.hpp"
#include "volsplat/threading.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace volsplat {

/// Per-Gaussian gradients with the same shapes as the scene parameters.
struct ParamGradients {
    std::vector<Vec3> position;
    std::vector<Vec4> rotation;
    std::vector<Vec3> log_scales;
    std::vector<Real> theta_raw;
    std::vector<ShCoefficients> sh;

    static ParamGradients zeros_like(const Scene& scene) {
        ParamGradients g;
        const size_t n = scene.size();
        g.position.assign(n, Vec3::Zero());
        g.rotation.assign(n, Vec4::Zero());
        g.log_scales.assign(n, Vec3::Zero());
        g.theta_raw.assign(n, Real(0));
        g.sh.resize(n);
        for (size_t i = 0; i < n; ++i) g.sh[i].set_degree(scene.gaussians[i].sh.degree);
        return g;
    }

    void add(const ParamGradients& o) {
        for (size_t i = 0; i < position.size(); ++i) {
            position[i] += o.position[i];
            rotation[i] += o.rotation[i];
            log_scales[i] += o.log_scales[i];
            theta_raw[i] += o.theta_raw[i];
            for (int ch = 0; ch < 3; ++ch)
                for (size_t k = 0; k < sh[i].coeffs[ch].size(); ++k)
                    sh[i].coeffs[ch][k] += o.sh[i].coeffs[ch][k];
        }
    }

    bool all_finite() const {
        auto ok = [](Real v) { return std::isfinite(v); };
        for (size_t i = 0; i < position.size(); ++i) {
            for (int k = 0; k < 3; ++k)
                if (!ok(position[i][k]) || !ok(log_scales[i][k])) return false;
            for (int k = 0; k < 4; ++k)
                if (!ok(rotation[i][k])) return false;
            if (!ok(theta_raw[i])) return false;
            for (int ch = 0; ch < 3; ++ch)
                for (Real v : sh[i].coeffs[ch])
                    if (!ok(v)) return false;
        }
        return true;
    }
};

// ---------------------------------------------------------------------------
// Flat scalar indexing over scene parameters, shared by the FD harness and
// the optimizer. Per-Gaussian layout: position(3), rotation(4), log_scales(3),
// theta_raw(1), sh coefficients channel-major.
// ---------------------------------------------------------------------------

inline size_t gaussian_param_count(const Gaussian3D& g) {
    return 3 + 4 + 3 + 1 + 3 * static_cast<size_t>(sh_coeff_count(g.sh.degree));
}

inline size_t scene_param_count(const Scene& scene) {
    size_t n = 0;
    for (const auto& g : scene.gaussians) n += gaussian_param_count(g);
    return n;
}

namespace grad_detail {
struct ParamRef {
    size_t gaussian;
    int field;  // 0 pos, 1 rot, 2 log_scales, 3 theta, 4 sh
    int a, b;   // component indices (channel, coeff for sh)
};

inline ParamRef locate_param(const Scene& scene, size_t idx) {
    for (size_t gi = 0; gi < scene.size(); ++gi) {
        const size_t count = gaussian_param_count(scene.gaussians[gi]);
        if (idx >= count) {
            idx -= count;
            continue;
        }
        if (idx < 3) return {gi, 0, static_cast<int>(idx), 0};
        idx -= 3;
        if (idx < 4) return {gi, 1, static_cast<int>(idx), 0};
        idx -= 4;
        if (idx < 3) return {gi, 2, static_cast<int>(idx), 0};
        idx -= 3;
        if (idx < 1) return {gi, 3, 0, 0};
        idx -= 1;
        const int coeffs = sh_coeff_count(scene.gaussians[gi].sh.degree);
        return {gi, 4, static_cast<int>(idx) / coeffs, static_cast<int>(idx) % coeffs};
    }
    throw std::out_of_range("scene parameter index");
}
}  // namespace grad_detail

inline Real get_scene_param(const Scene& scene, size_t idx) {
    const auto r = grad_detail::locate_param(scene, idx);
    const Gaussian3D& g = scene.gaussians[r.gaussian];
    switch (r.field) {
        case 0: return g.position[r.a];
        case 1: return g.rotation[r.a];
        case 2: return g.log_scales[r.a];
        case 3: return g.theta_raw;
        default: return g.sh.coeffs[r.a][r.b];
    }
}

inline void set_scene_param(Scene& scene, size_t idx, Real v) {
    const auto r = grad_detail::locate_param(scene, idx);
    Gaussian3D& g = scene.gaussians[r.gaussian];
    switch (r.field) {
        case 0: g.position[r.a] = v; break;
        case 1: g.rotation[r.a] = v; break;
        case 2: g.log_scales[r.a] = v; break;
        case 3: g.theta_raw = v; break;
        default: g.sh.coeffs[r.a][r.b] = v; break;
    }
}

inline Real get_grad_param(const Scene& scene, const ParamGradients& grads, size_t idx) {
    const auto r = grad_detail::locate_param(scene, idx);
    switch (r.field) {
        case 0: return grads.position[r.gaussian][r.a];
        case 1: return grads.rotation[r.gaussian][r.a];
        case 2: return grads.log_scales[r.gaussian][r.a];
        case 3: return grads.theta_raw[r.gaussian];
        default: return grads.sh.at(r.gaussian).coeffs[r.a][r.b];
    }
}

inline std::string describe_param(const Scene& scene, size_t idx) {
    const auto r = grad_detail::locate_param(scene, idx);
    static const char* names[] = {"position", "rotation", "log_scales", "theta_raw", "sh"};
    return "g" + std::to_string(r.gaussian) + "." + names[r.field] + "[" +
           std::to_string(r.a) + (r.field == 4 ? "," + std::to_string(r.b) : "") + "]";
}

// ---------------------------------------------------------------------------
// Shared chain-rule pieces.
// ---------------------------------------------------------------------------

namespace grad_detail {

/// Backward of Sigma = R diag(exp(2 ls)) R^T into the raw quaternion and the
/// log-scales. g_sigma is dL/dSigma accumulated as a full matrix.
inline void covariance_backward(const Gaussian3D& g, const Mat3& g_sigma, Vec4& d_rotation,
                                Vec3& d_log_scales) {
    const Mat3 R = g.rotation_matrix();
    const Vec3 s2 = g.scales().array().square();

    const Mat3 rtgr = R.transpose() * g_sigma * R;
    for (int k = 0; k < 3; ++k) d_log_scales[k] += rtgr(k, k) * 2 * s2[k];

    const Mat3 dR = (g_sigma + g_sigma.transpose()) * R * s2.asDiagonal();

    // dR/d(unit quaternion), then project through the normalization.
    const Real n = g.rotation.norm();
    const Vec4 q = g.rotation / n;
    const Real w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3 dRdq[4];
    dRdq[0] << 0, -2 * z, 2 * y, 2 * z, 0, -2 * x, -2 * y, 2 * x, 0;
    dRdq[1] << 0, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x;
    dRdq[2] << -4 * y, 2 * x, 2 * w, 2 * x, 0, 2 * z, -2 * w, 2 * z, -4 * y;
    dRdq[3] << -4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, 0;
    Vec4 d_unit;
    for (int c = 0; c < 4; ++c) d_unit[c] = (dR.array() * dRdq[c].array()).sum();
    d_rotation += (d_unit - q * q.dot(d_unit)) / n;
}

/// dln(I2*(Sigma))/dSigma: half the sum of the outer products of the two
/// leading eigenvectors weighted by their inverse eigenvalues.
inline Mat3 thin_side_log_grad(const Mat3& cov) {
    Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
    const Vec3 ev = es.eigenvalues();  // ascending
    const Mat3 V = es.eigenvectors();
    Mat3 out = Mat3::Zero();
    for (int k = 1; k < 3; ++k)
        out += V.col(k) * V.col(k).transpose() / ev[k];
    return out / 2;
}

/// Gradient of the model amplitude3d (a) back to theta, Sigma and, for the
/// view-dependent opacity model, nothing else (the marginal uses only the
/// camera rotation, which is constant).
inline void amplitude3d_backward(AmplitudeModel model, Real theta, const Mat3& cov,
                                 const Camera* view, Real a, Real d_a, Real& d_theta,
                                 Mat3& d_cov) {
    if (!(theta > Real(0))) return;
    d_theta += d_a * a / theta;
    const Mat3 inv = cov.inverse();
    d_cov += d_a * a * (-Real(0.5)) * inv;
    if (model == AmplitudeModel::OpacityThinSide) {
        d_cov += d_a * a * thin_side_log_grad(cov);
    } else if (model == AmplitudeModel::OpacityAmplitude) {
        const Mat2 marg = marginal_cov_camera(cov, *view);
        const Mat2 marg_inv = marg.inverse();
        const Eigen::Matrix<Real, 2, 3> W2 = view->rotation.topRows<2>();
        d_cov += d_a * a * Real(0.5) * (W2.transpose() * marg_inv * W2);
    }
}

}  // namespace grad_detail

// ---------------------------------------------------------------------------
// Splatter backward.
// ---------------------------------------------------------------------------

namespace grad_detail {

/// Per-splat accumulation of the pixel-level gradients.
struct SplatAccum {
    Real d_amp = 0;
    Vec2 d_mean2d = Vec2::Zero();
    Mat2 d_conic = Mat2::Zero();
    Vec3 d_rgb = Vec3::Zero();

    void add(const SplatAccum& o) {
        d_amp += o.d_amp;
        d_mean2d += o.d_mean2d;
        d_conic += o.d_conic;
        d_rgb += o.d_rgb;
    }
};

/// Chains one splat's accumulated footprint gradients back to the Gaussian
/// parameters (recomputing the forward intermediates).
inline void splat_param_chain(const Scene& scene, const Camera& cam, AmplitudeModel model,
                              const SplatOptions& opts, const PreparedSplat& splat,
                              const SplatAccum& acc, ParamGradients& out) {
    const int gi = splat.footprint.source_index;
    const Gaussian3D& g = scene.gaussians[gi];
    const Real theta = scene.theta(gi);
    const Mat3 cov = g.covariance();
    const Vec3 mu_cam = cam.to_camera(g.position);
    const bool persp = cam.projection == CameraProjection::Perspective;

    // Recompute the pre-filter footprint (same routes as prepare_splats).
    const Mat2 block = projected_cov_camera(cov, mu_cam, cam);
    const Mat2 F = Vec2(cam.focal.x(), cam.focal.y()).asDiagonal();
    const Mat2 cov2d = F * block * F;
    const Real jac = jacobian_compensation(cam, mu_cam, opts.jacobian_mode);
    Real a_prime = theta;
    if (model == AmplitudeModel::EwaMass)
        a_prime = theta * jac / normalization_constant(cov2d);
    else if (model == AmplitudeModel::OpacityThinSide)
        a_prime = theta * thin_side_constant_from_scales(g.log_scales) * jac /
                  normalization_constant(cov2d);

    const Mat2 filtered = splat.footprint.cov2d;  // post antialias
    const Mat2 conic = splat.conic;

    // conic -> filtered covariance.
    Mat2 g_filtered = -(conic * acc.d_conic * conic);

    // Antialias amplitude factor k = sqrt(det cov2d / det filtered).
    Real d_a_prime;
    if (opts.filter_variance > Real(0)) {
        const Real k = std::sqrt(cov2d.determinant() / filtered.determinant());
        d_a_prime = acc.d_amp * k;
        const Real d_k = acc.d_amp * a_prime;
        g_filtered += d_k * (k / 2) * (cov2d.inverse() - filtered.inverse());
        // The d(det filtered) part above uses d(filtered) = d(cov2d), folded
        // together with the direct det cov2d term.
    } else {
        d_a_prime = acc.d_amp;
    }
    Mat2 g_cov2d = g_filtered;  // filtered = cov2d + const

    // Amplitude model.
    Real d_theta = 0;
    Mat3 g_cov = Mat3::Zero();
    Real d_jac = 0;
    if (model == AmplitudeModel::OpacityAmplitude) {
        d_theta += d_a_prime;
    } else if (theta > Real(0)) {
        d_theta += d_a_prime * a_prime / theta;
        d_jac += d_a_prime * a_prime / jac;
        g_cov2d += d_a_prime * a_prime * (-Real(0.5)) * cov2d.inverse();
        if (model == AmplitudeModel::OpacityThinSide) {
            // I2* = 2 pi exp(sum of the two largest log scales): unit gradient
            // to those two, zero to the smallest.
            int min_idx = 0;
            g.log_scales.minCoeff(&min_idx);
            for (int k = 0; k < 3; ++k)
                if (k != min_idx) out.log_scales[gi][k] += d_a_prime * a_prime;
        }
    }

    Vec3 d_mu_cam = Vec3::Zero();
    if (persp && d_jac != Real(0)) {
        const Real z = mu_cam.z();
        const Real f2 = cam.focal.x() * cam.focal.y();
        if (opts.jacobian_mode == JacobianMode::ScreenBlock2x2) {
            d_mu_cam.z() += d_jac * (-2 * f2 / (z * z * z));
        } else {
            const Real l = mu_cam.norm();
            d_mu_cam += d_jac * f2 * (mu_cam / (l * z * z * z));
            d_mu_cam.z() += d_jac * f2 * (-3 * l / (z * z * z * z));
        }
    }

    // cov2d = F block F.
    const Mat2 g_block = F * g_cov2d * F;

    // block = M2 cov M2^T with M2 the top two rows of J * W (or W).
    Eigen::Matrix<Real, 2, 3> M2;
    if (persp) {
        M2 = (eq15_jacobian(mu_cam) * cam.rotation).topRows<2>();
    } else {
        M2 = cam.rotation.topRows<2>();
    }
    g_cov += M2.transpose() * g_block * M2;
    const Eigen::Matrix<Real, 2, 3> g_M2 = (g_block + g_block.transpose()) * M2 * cov;

    if (persp) {
        // M2 = J2 W: back through the Eq. 15 Jacobian entries.
        const Eigen::Matrix<Real, 2, 3> g_J2 = g_M2 * cam.rotation.transpose();
        const Real z = mu_cam.z(), x = mu_cam.x(), y = mu_cam.y();
        const Real inv_z2 = 1 / (z * z), inv_z3 = inv_z2 / z;
        d_mu_cam.x() += g_J2(0, 2) * (-inv_z2);
        d_mu_cam.y() += g_J2(1, 2) * (-inv_z2);
        d_mu_cam.z() += (g_J2(0, 0) + g_J2(1, 1)) * (-inv_z2) +
                        g_J2(0, 2) * (2 * x * inv_z3) + g_J2(1, 2) * (2 * y * inv_z3);
    }

    // Projected mean.
    if (persp) {
        const Real z = mu_cam.z();
        d_mu_cam.x() += acc.d_mean2d.x() * cam.focal.x() / z;
        d_mu_cam.y() += acc.d_mean2d.y() * cam.focal.y() / z;
        d_mu_cam.z() += -(acc.d_mean2d.x() * cam.focal.x() * mu_cam.x() +
                          acc.d_mean2d.y() * cam.focal.y() * mu_cam.y()) /
                        (z * z);
    } else {
        d_mu_cam.x() += acc.d_mean2d.x() * cam.focal.x();
        d_mu_cam.y() += acc.d_mean2d.y() * cam.focal.y();
    }

    // Camera transform and the color's view-direction dependence.
    Vec3 d_pos = cam.rotation.transpose() * d_mu_cam;
    const Vec3 dir = cam.view_direction_to(g.position);
    const Vec3 g_dir = eval_sh_backward(g.sh, dir, acc.d_rgb, out.sh[gi]);
    if (persp) {
        const Real r = (g.position - cam.center()).norm();
        d_pos += (g_dir - dir * dir.dot(g_dir)) / r;
    }

    out.position[gi] += d_pos;
    out.theta_raw[gi] += d_theta * activate_theta_grad(g.theta_raw, scene.theta_activation);
    covariance_backward(g, g_cov, out.rotation[gi], out.log_scales[gi]);
}

}  // namespace grad_detail

/// Exact gradient of the Taylor blend (Eq. 16 family) for both Taylor modes,
/// reconstructing intermediate transmittances back-to-front from the stored
/// final state; the clamp contributes a zero subgradient.
/// `forward` must be the output of rasterize() over the same inputs.
inline ParamGradients backward_splat_taylor(const Scene& scene, const Camera& cam,
                                            AmplitudeModel model, const SplatOptions& opts,
                                            const Image& loss_grad,
                                            const RenderOutput& forward, int threads = 1) {
    check_blend_model_compat(opts.blend_mode, model);
    if (opts.blend_mode == BlendMode::SelfAttenuation)
        throw std::invalid_argument("backward_splat_taylor: Taylor modes only");
    const int W = cam.resolution.x(), H = cam.resolution.y();
    if (forward.radiance.height != H || forward.radiance.width != W ||
        loss_grad.height != H || loss_grad.width != W || loss_grad.channels != 3)
        throw std::invalid_argument("backward_splat: missing or mismatched forward cache");

    ParamGradients out = ParamGradients::zeros_like(scene);
    const auto splats = prepare_splats(scene, cam, model, opts);
    if (splats.empty()) return out;
    std::vector<ProjectedGaussian> footprints(splats.size());
    for (size_t i = 0; i < splats.size(); ++i) footprints[i] = splats[i].footprint;
    const std::vector<int> order = sort_global(footprints);
    const auto grid = splat_detail::build_tile_grid(splats, order, opts, W, H);

    // Tile-local accumulators, merged in tile order afterwards so the result
    // does not depend on the worker count.
    std::vector<size_t> tile_offset(grid.lists.size() + 1, 0);
    for (size_t t = 0; t < grid.lists.size(); ++t)
        tile_offset[t + 1] = tile_offset[t] + grid.lists[t].size();
    std::vector<grad_detail::SplatAccum> tile_accum(tile_offset.back());

    struct SplatRow {
        Real mx, my, ca, cb, cc, amp;
        Vec3 rgb;
    };
    std::vector<SplatRow> rows(order.size());
    for (size_t rank = 0; rank < order.size(); ++rank) {
        const auto& s = splats[order[rank]];
        rows[rank] = {s.footprint.mean2d.x(), s.footprint.mean2d.y(), s.conic(0, 0),
                      s.conic(0, 1),          s.conic(1, 1),          s.footprint.amplitude2d,
                      s.footprint.rgb};
    }

    const Real cutoff_sq = opts.footprint_cutoff * opts.footprint_cutoff;
    parallel_for(grid.lists.size(), threads, [&](size_t tile) {
        const auto& list = grid.lists[tile];
        if (list.empty()) return;
        grad_detail::SplatAccum* accum = tile_accum.data() + tile_offset[tile];
        const int tx = static_cast<int>(tile) % grid.tiles_x;
        const int ty = static_cast<int>(tile) / grid.tiles_x;
        const int px1 = std::min((tx + 1) * grid.tile_size, W);
        const int py1 = std::min((ty + 1) * grid.tile_size, H);

        const bool per_pixel = opts.sort_mode == SortMode::PerPixelDepth && list.size() > 1;
        std::vector<int> pixel_order;
        std::vector<Real> keys;
        struct Hit {
            int pos;  // position in the tile list
            Real value;
            Real falloff;  // exp(-q/2)
            Real dx, dy;
        };
        std::vector<Hit> hits;
        for (int py = ty * grid.tile_size; py < py1; ++py) {
            for (int px = tx * grid.tile_size; px < px1; ++px) {
                const int blended =
                    forward.contributor_count[static_cast<size_t>(py) * W + px];
                if (blended == 0) continue;
                const Real cx = px + Real(0.5), cy = py + Real(0.5);

                if (per_pixel) {
                    pixel_order.resize(list.size());
                    std::iota(pixel_order.begin(), pixel_order.end(), 0);
                    const Ray ray = cam.pixel_ray(cx, cy);
                    keys.resize(list.size());
                    for (size_t k = 0; k < list.size(); ++k) {
                        const auto& s = splats[order[list[k]]];
                        keys[k] = peak_t_along_ray(s.inv_cov3d, s.mean_world, ray);
                    }
                    std::stable_sort(pixel_order.begin(), pixel_order.end(),
                                     [&](int a, int b) { return keys[a] < keys[b]; });
                }

                hits.clear();
                for (size_t k = 0; k < list.size(); ++k) {
                    if (static_cast<int>(hits.size()) == blended) break;
                    const int pos = per_pixel ? pixel_order[k] : static_cast<int>(k);
                    const SplatRow& r = rows[list[pos]];
                    const Real dx = cx - r.mx, dy = cy - r.my;
                    const Real q = r.ca * dx * dx + 2 * r.cb * dx * dy + r.cc * dy * dy;
                    if (q > cutoff_sq) continue;
                    const Real falloff = std::exp(-q / 2);
                    hits.push_back({pos, r.amp * falloff, falloff, dx, dy});
                }

                const Vec3 dpix(loss_grad.at(py, px, 0), loss_grad.at(py, px, 1),
                                loss_grad.at(py, px, 2));
                Real T = forward.final_transmittance.at(py, px, 0);
                Vec3 suffix = scene.background * T;
                for (int i = static_cast<int>(hits.size()) - 1; i >= 0; --i) {
                    const Hit& h = hits[i];
                    const SplatRow& r = rows[list[h.pos]];
                    const Real g_val = std::min(std::max(h.value, Real(0)),
                                                opts.alpha_clamp_max);
                    const Real T_i = T / (1 - g_val);
                    const Real d_g = dpix.dot(r.rgb * T_i - suffix / (1 - g_val));
                    auto& slot = accum[h.pos];
                    slot.d_rgb += dpix * (g_val * T_i);
                    if (h.value < opts.alpha_clamp_max) {
                        slot.d_amp += d_g * h.falloff;
                        const Real scale = d_g * h.value;
                        slot.d_mean2d.x() += scale * (r.ca * h.dx + r.cb * h.dy);
                        slot.d_mean2d.y() += scale * (r.cb * h.dx + r.cc * h.dy);
                        const Real cscale = -h.value / 2 * d_g;
                        slot.d_conic(0, 0) += cscale * h.dx * h.dx;
                        slot.d_conic(0, 1) += cscale * h.dx * h.dy;
                        slot.d_conic(1, 0) += cscale * h.dy * h.dx;
                        slot.d_conic(1, 1) += cscale * h.dy * h.dy;
                    }
                    suffix += r.rgb * (g_val * T_i);
                    T = T_i;
                }
            }
        }
    });

    // Deterministic merge and per-splat parameter chains.
    std::vector<grad_detail::SplatAccum> merged(splats.size());
    for (size_t t = 0; t < grid.lists.size(); ++t)
        for (size_t k = 0; k < grid.lists[t].size(); ++k)
            merged[order[grid.lists[t][k]]].add(tile_accum[tile_offset[t] + k]);

    parallel_for(splats.size(), threads, [&](size_t si) {
        grad_detail::splat_param_chain(scene, cam, model, opts, splats[si], merged[si], out);
    });
    return out;
}

/// Exact gradient of the self-attenuation blend (Eq. 22). Traversal is
/// front-to-back: the exponential falloff makes back-to-front transmittance
/// reconstruction numerically unsafe.
inline ParamGradients backward_splat_satn(const Scene& scene, const Camera& cam,
                                          const SplatOptions& opts, const Image& loss_grad,
                                          const RenderOutput& forward, int threads = 1,
                                          AmplitudeModel model = AmplitudeModel::OpacityThinSide) {
    if (opts.blend_mode != BlendMode::SelfAttenuation)
        throw std::invalid_argument("backward_splat_satn: SelfAttenuation mode only");
    check_blend_model_compat(opts.blend_mode, model);
    const int W = cam.resolution.x(), H = cam.resolution.y();
    if (forward.radiance.height != H || forward.radiance.width != W ||
        loss_grad.height != H || loss_grad.width != W || loss_grad.channels != 3)
        throw std::invalid_argument("backward_splat: missing or mismatched forward cache");

    ParamGradients out = ParamGradients::zeros_like(scene);
    const auto splats = prepare_splats(scene, cam, model, opts);
    if (splats.empty()) return out;
    std::vector<ProjectedGaussian> footprints(splats.size());
    for (size_t i = 0; i < splats.size(); ++i) footprints[i] = splats[i].footprint;
    const std::vector<int> order = sort_global(footprints);
    const auto grid = splat_detail::build_tile_grid(splats, order, opts, W, H);

    std::vector<size_t> tile_offset(grid.lists.size() + 1, 0);
    for (size_t t = 0; t < grid.lists.size(); ++t)
        tile_offset[t + 1] = tile_offset[t] + grid.lists[t].size();
    std::vector<grad_detail::SplatAccum> tile_accum(tile_offset.back());

    struct SplatRow {
        Real mx, my, ca, cb, cc, amp;
        Vec3 rgb;
    };
    std::vector<SplatRow> rows(order.size());
    for (size_t rank = 0; rank < order.size(); ++rank) {
        const auto& s = splats[order[rank]];
        rows[rank] = {s.footprint.mean2d.x(), s.footprint.mean2d.y(), s.conic(0, 0),
                      s.conic(0, 1),          s.conic(1, 1),          s.footprint.amplitude2d,
                      s.footprint.rgb};
    }

    const Real cutoff_sq = opts.footprint_cutoff * opts.footprint_cutoff;
    parallel_for(grid.lists.size(), threads, [&](size_t tile) {
        const auto& list = grid.lists[tile];
        if (list.empty()) return;
        grad_detail::SplatAccum* accum = tile_accum.data() + tile_offset[tile];
        const int tx = static_cast<int>(tile) % grid.tiles_x;
        const int ty = static_cast<int>(tile) / grid.tiles_x;
        const int px1 = std::min((tx + 1) * grid.tile_size, W);
        const int py1 = std::min((ty + 1) * grid.tile_size, H);

        const bool per_pixel = opts.sort_mode == SortMode::PerPixelDepth && list.size() > 1;
        std::vector<int> pixel_order;
        std::vector<Real> keys;
        for (int py = ty * grid.tile_size; py < py1; ++py) {
            for (int px = tx * grid.tile_size; px < px1; ++px) {
                const int blended =
                    forward.contributor_count[static_cast<size_t>(py) * W + px];
                if (blended == 0) continue;
                const Real cx = px + Real(0.5), cy = py + Real(0.5);

                if (per_pixel) {
                    pixel_order.resize(list.size());
                    std::iota(pixel_order.begin(), pixel_order.end(), 0);
                    const Ray ray = cam.pixel_ray(cx, cy);
                    keys.resize(list.size());
                    for (size_t k = 0; k < list.size(); ++k) {
                        const auto& s = splats[order[list[k]]];
                        keys[k] = peak_t_along_ray(s.inv_cov3d, s.mean_world, ray);
                    }
                    std::stable_sort(pixel_order.begin(), pixel_order.end(),
                                     [&](int a, int b) { return keys[a] < keys[b]; });
                }

                const Vec3 dpix(loss_grad.at(py, px, 0), loss_grad.at(py, px, 1),
                                loss_grad.at(py, px, 2));
                const Vec3 pixel_value(forward.radiance.at(py, px, 0),
                                       forward.radiance.at(py, px, 1),
                                       forward.radiance.at(py, px, 2));

                Real T = 1;
                Vec3 prefix = Vec3::Zero();
                int done = 0;
                for (size_t k = 0; k < list.size() && done < blended; ++k) {
                    const int pos = per_pixel ? pixel_order[k] : static_cast<int>(k);
                    const SplatRow& r = rows[list[pos]];
                    const Real dx = cx - r.mx, dy = cy - r.my;
                    const Real q = r.ca * dx * dx + 2 * r.cb * dx * dy + r.cc * dy * dy;
                    if (q > cutoff_sq) continue;
                    ++done;
                    const Real falloff = std::exp(-q / 2);
                    const Real f = r.amp * falloff;
                    const Real att = std::exp(-f);
                    const Real w = (1 - att) * T;
                    prefix += r.rgb * w;
                    const Vec3 suffix = pixel_value - prefix;
                    const Real d_f = dpix.dot(r.rgb * (att * T) - suffix);

                    auto& slot = accum[pos];
                    slot.d_rgb += dpix * w;
                    slot.d_amp += d_f * falloff;
                    const Real scale = d_f * f;
                    slot.d_mean2d.x() += scale * (r.ca * dx + r.cb * dy);
                    slot.d_mean2d.y() += scale * (r.cb * dx + r.cc * dy);
                    const Real cscale = -f / 2 * d_f;
                    slot.d_conic(0, 0) += cscale * dx * dx;
                    slot.d_conic(0, 1) += cscale * dx * dy;
                    slot.d_conic(1, 0) += cscale * dy * dx;
                    slot.d_conic(1, 1) += cscale * dy * dy;
                    T *= att;
                }
            }
        }
    });

    std::vector<grad_detail::SplatAccum> merged(splats.size());
    for (size_t t = 0; t < grid.lists.size(); ++t)
        for (size_t k = 0; k < grid.lists[t].size(); ++k)
            merged[order[grid.lists[t][k]]].add(tile_accum[tile_offset[t] + k]);

    parallel_for(splats.size(), threads, [&](size_t si) {
        grad_detail::splat_param_chain(scene, cam, model, opts, splats[si], merged[si], out);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Marcher backward.
// ---------------------------------------------------------------------------

namespace grad_detail {

struct MarchAccum {
    Vec3 d_position = Vec3::Zero();
    Mat3 d_cov = Mat3::Zero();
    Real d_amp3d = 0;
    Vec3 d_rgb = Vec3::Zero();

    void add(const MarchAccum& o) {
        d_position += o.d_position;
        d_cov += o.d_cov;
        d_amp3d += o.d_amp3d;
        d_rgb += o.d_rgb;
    }
};

/// Replays one pixel's march front-to-back and accumulates gradients.
/// Detached mode treats bin borders as constants; Attached also chains the
/// border positions through the section construction (the discrete envelope
/// winner selection is held fixed).
inline void march_ray_backward(const std::vector<MarchPrimitive>& prims, const Ray& ray,
                               const MarchOptions& opts, const Vec3& pixel_value,
                               const Vec3& dpix, std::vector<MarchAccum>& accum) {
    const size_t n = prims.size();
    struct G1dExtra {
        Ray1DGaussian g;
        Vec3 m;          // mean - origin
        Vec3 pd;         // inv_cov * direction
        Real denom = 0;  // d^T inv_cov d
    };
    std::vector<G1dExtra> ext(n);
    for (size_t i = 0; i < n; ++i) {
        ext[i].g = intersect_1d_amplitude(prims[i].inv_cov, prims[i].mean,
                                          prims[i].amplitude, ray, static_cast<int>(i));
        ext[i].m = prims[i].mean - ray.origin;
        ext[i].pd = prims[i].inv_cov * ray.direction;
        ext[i].denom = ray.direction.dot(ext[i].pd);
    }

    // Per-pixel accumulators over the 1D parameters.
    std::vector<Real> d_amp1d(n, Real(0)), d_peak(n, Real(0)), d_sigma(n, Real(0));

    const Real k = opts.section_extent_sigmas;
    const bool attached = opts.gradient_mode == GradientMode::Attached;
    Real T = Real(1);
    Vec3 prefix = Vec3::Zero();
    Real cursor = Real(0);
    std::vector<std::pair<int, Real>> segs;

    auto process_bin = [&](Real t0, Real t1, const BorderProvenance* prov0,
                           const BorderProvenance* prov1) {
        Real rho = 0;
        Vec3 gamma = Vec3::Zero();
        segs.clear();
        for (size_t i = 0; i < n; ++i) {
            const auto& g = ext[i].g;
            if (g.amplitude_1d <= Real(0)) continue;
            const Real pad = march_detail::kSupportSigmas * g.sigma_t;
            if (g.peak_t + pad < t0 || g.peak_t - pad > t1) continue;
            const Real seg = gaussian_segment_integral(g, t0, t1);
            rho += seg;
            gamma += prims[i].rgb * seg;
            segs.push_back({static_cast<int>(i), seg});
        }
        const Real psi = march_detail::in_bin_attenuation(rho);
        prefix += gamma * (psi * T);
        const Vec3 suffix = pixel_value - prefix;
        const Real d_rho =
            dpix.dot(gamma * (march_detail::in_bin_attenuation_grad(rho) * T) - suffix);
        const Vec3 d_gamma = dpix * (psi * T);

        Real d_t0 = 0, d_t1 = 0;  // border gradients (attached mode)
        for (const auto& [gi, seg] : segs) {
            const auto& g = ext[gi].g;
            const Real d_seg = d_rho + d_gamma.dot(prims[gi].rgb);
            accum[gi].d_rgb += d_gamma * seg;

            const Real inv = Real(1) / (g.sigma_t * std::numbers::sqrt2_v<Real>);
            const Real z0 = (t0 - g.peak_t) * inv;
            const Real e0 = std::exp(-z0 * z0);
            Real e1 = 0, z1e1 = 0;
            if (!std::isinf(t1)) {
                const Real z1 = (t1 - g.peak_t) * inv;
                e1 = std::exp(-z1 * z1);
                z1e1 = z1 * e1;
            }
            const Real z0e0 = z0 * e0;

            if (g.amplitude_1d > Real(0)) d_amp1d[gi] += d_seg * seg / g.amplitude_1d;
            d_peak[gi] += d_seg * g.amplitude_1d * (e0 - e1);
            d_sigma[gi] += d_seg * (seg / g.sigma_t -
                                    g.amplitude_1d * std::numbers::sqrt2_v<Real> *
                                        (z1e1 - z0e0));
            if (attached) {
                // Leibniz terms: the bin integral moves with its borders.
                d_t1 += d_seg * g.amplitude_1d * e1;
                d_t0 += -d_seg * g.amplitude_1d * e0;
            }
        }
        if (attached) {
            auto scatter = [&](Real d_b, const BorderProvenance* p) {
                if (p == nullptr || d_b == Real(0)) return;
                if (p->g_a >= 0) {
                    d_peak[p->g_a] += d_b * p->dpeak_a;
                    d_sigma[p->g_a] += d_b * p->dsig_a;
                }
                if (p->g_b >= 0) {
                    d_peak[p->g_b] += d_b * p->dpeak_b;
                    d_sigma[p->g_b] += d_b * p->dsig_b;
                }
            };
            scatter(d_t0, prov0);
            scatter(d_t1, prov1);
        }
        T *= std::exp(-rho);
    };

    std::vector<BorderProvenance> provenance;
    BorderProvenance carry;  // provenance of the previous batch's last border
    bool terminated = false;
    for (;;) {
        std::vector<Ray1DGaussian> active;
        std::vector<int> active_map;  // list index -> primitive index
        for (size_t i = 0; i < n; ++i) {
            const auto& g = ext[i].g;
            if (g.amplitude_1d > Real(0) && !std::isinf(g.sigma_t) &&
                g.peak_t + k * g.sigma_t > cursor) {
                active.push_back(g);
                active_map.push_back(static_cast<int>(i));
            }
        }
        if (active.empty()) break;
        const SectionBuffer buf = build_sections(active, opts, cursor);
        const std::vector<Real> borders =
            sections_to_bins(buf.sections, opts, cursor, attached ? &provenance : nullptr);
        if (borders.size() < 2) break;
        if (attached) {
            for (auto& p : provenance) {  // remap list indices to primitives
                if (p.g_a >= 0) p.g_a = active_map[p.g_a];
                if (p.g_b >= 0) p.g_b = active_map[p.g_b];
            }
            // The batch opens where the previous one ended: same border, same
            // parameter dependence.
            provenance.front() = carry;
        }
        for (size_t b = 0; b + 1 < borders.size(); ++b) {
            process_bin(borders[b], borders[b + 1],
                        attached ? &provenance[b] : nullptr,
                        attached ? &provenance[b + 1] : nullptr);
            if (T < opts.termination_opacity) {
                terminated = true;
                break;
            }
        }
        cursor = borders.back();
        if (attached) carry = provenance.back();
        if (terminated) break;
    }
    if (!terminated)
        process_bin(cursor, std::numeric_limits<Real>::infinity(),
                    attached ? &carry : nullptr, nullptr);

    // Chain the per-ray 1D parameters back to position and covariance.
    for (size_t i = 0; i < n; ++i) {
        if (d_amp1d[i] == Real(0) && d_peak[i] == Real(0) && d_sigma[i] == Real(0)) continue;
        const auto& e = ext[i];
        const auto& g = e.g;
        if (!(e.denom > Real(0)) || g.amplitude_1d <= Real(0)) continue;

        // amplitude_1d = a * exp(-q_peak / 2).
        const Real E = g.amplitude_1d / prims[i].amplitude;
        accum[i].d_amp3d += d_amp1d[i] * E;
        const Real d_qpeak = d_amp1d[i] * (-g.amplitude_1d / 2);

        const Vec3 residual = e.m - g.peak_t * ray.direction;  // m - t* d
        const Vec3 p_res = prims[i].inv_cov * residual;

        // d/dm.
        Vec3 d_m = d_peak[i] * (e.pd / e.denom) + d_qpeak * (2 * p_res);
        accum[i].d_position += d_m;

        // d/dP as a full matrix (only the symmetric part matters downstream).
        Mat3 d_P = d_peak[i] * (ray.direction * residual.transpose()) / e.denom;
        d_P += d_sigma[i] * (-Real(0.5) * std::pow(e.denom, Real(-1.5))) *
               (ray.direction * ray.direction.transpose());
        d_P += d_qpeak * (residual * residual.transpose());
        accum[i].d_cov += -(prims[i].inv_cov * d_P * prims[i].inv_cov);
    }
}

}  // namespace grad_detail

/// Gradient of the volumetric march w.r.t. all scene parameters. Detached by
/// default (bin borders as constants); `forward` must come from render_march
/// over the same inputs.
inline ParamGradients backward_march(const Scene& scene, const Camera& cam,
                                     AmplitudeModel model, const MarchOptions& opts,
                                     const Image& loss_grad, const RenderOutput& forward,
                                     int threads = 1) {
    const int W = cam.resolution.x(), H = cam.resolution.y();
    if (forward.radiance.height != H || forward.radiance.width != W ||
        loss_grad.height != H || loss_grad.width != W || loss_grad.channels != 3)
        throw std::invalid_argument("backward_march: missing or mismatched forward cache");

    ParamGradients out = ParamGradients::zeros_like(scene);
    const auto prims = prepare_march(scene, cam, model, opts);
    if (prims.empty()) return out;

    // Fixed row chunks merged in order: deterministic for any worker count.
    const int chunks = std::min(16, H);
    std::vector<std::vector<grad_detail::MarchAccum>> chunk_accum(chunks);
    parallel_for(static_cast<size_t>(chunks), threads, [&](size_t chunk) {
        auto& accum = chunk_accum[chunk];
        accum.assign(prims.size(), {});
        const int y0 = static_cast<int>(chunk) * H / chunks;
        const int y1 = static_cast<int>(chunk + 1) * H / chunks;
        for (int py = y0; py < y1; ++py) {
            for (int px = 0; px < W; ++px) {
                const Vec3 dpix(loss_grad.at(py, px, 0), loss_grad.at(py, px, 1),
                                loss_grad.at(py, px, 2));
                if (dpix.isZero()) continue;
                const Vec3 pixel_value(forward.radiance.at(py, px, 0),
                                       forward.radiance.at(py, px, 1),
                                       forward.radiance.at(py, px, 2));
                const Ray ray = cam.pixel_ray(px + Real(0.5), py + Real(0.5));
                grad_detail::march_ray_backward(prims, ray, opts, pixel_value, dpix, accum);
            }
        }
    });

    std::vector<grad_detail::MarchAccum> merged(prims.size());
    for (int c = 0; c < chunks; ++c)
        for (size_t i = 0; i < prims.size(); ++i) merged[i].add(chunk_accum[c][i]);

    // Per-primitive chains to the raw parameters.
    parallel_for(prims.size(), threads, [&](size_t pi) {
        const auto& acc = merged[pi];
        const int gi = prims[pi].source_index;
        const Gaussian3D& g = scene.gaussians[gi];
        const Real theta = scene.theta(gi);
        const Mat3 cov = g.covariance();

        Mat3 d_cov = acc.d_cov;
        Real d_theta = 0;
        grad_detail::amplitude3d_backward(model, theta, cov, &cam, prims[pi].amplitude,
                                          acc.d_amp3d, d_theta, d_cov);

        Vec3 d_pos = acc.d_position;
        const Vec3 dir = cam.view_direction_to(g.position);
        const Vec3 g_dir = eval_sh_backward(g.sh, dir, acc.d_rgb, out.sh[gi]);
        if (cam.projection == CameraProjection::Perspective) {
            const Real r = (g.position - cam.center()).norm();
            d_pos += (g_dir - dir * dir.dot(g_dir)) / r;
        }

        out.position[gi] += d_pos;
        out.theta_raw[gi] += d_theta * activate_theta_grad(g.theta_raw, scene.theta_activation);
        grad_detail::covariance_backward(g, d_cov, out.rotation[gi], out.log_scales[gi]);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Finite-difference verification harness.
// ---------------------------------------------------------------------------

struct FdEntry {
    size_t index = 0;
    std::string param;
    Real analytic = 0;
    Real numeric = 0;
    Real rel_error = 0;
};

struct FdReport {
    Real max_rel_error = 0;
    Real mean_rel_error = 0;
    size_t params_checked = 0;
    bool render_finite = true;
    std::vector<FdEntry> entries;  // every parameter, in flat order
};

/// Central-difference check of an analytic gradient. `render` maps a scene to
/// the loss scalar; `analytic` is the gradient under test. The relative error
/// denominator is max(|analytic|, |numeric|, 1e-8).
inline FdReport finite_difference_check(const Scene& scene,
                                        const std::function<Real(const Scene&)>& loss,
                                        const ParamGradients& analytic, Real perturbation) {
    if (!(perturbation >= Real(1e-7) && perturbation <= Real(1e-3)))
        throw std::invalid_argument("fd perturbation must lie in [1e-7, 1e-3]");
    FdReport report;
    report.render_finite = analytic.all_finite();
    const size_t count = scene_param_count(scene);
    report.params_checked = count;
    report.entries.reserve(count);
    Scene work = scene;
    Real sum_rel = 0;
    for (size_t idx = 0; idx < count; ++idx) {
        const Real saved = get_scene_param(work, idx);
        set_scene_param(work, idx, saved + perturbation);
        const Real up = loss(work);
        set_scene_param(work, idx, saved - perturbation);
        const Real down = loss(work);
        set_scene_param(work, idx, saved);
        if (!std::isfinite(up) || !std::isfinite(down)) report.render_finite = false;

        FdEntry e;
        e.index = idx;
        e.param = describe_param(scene, idx);
        e.numeric = (up - down) / (2 * perturbation);
        e.analytic = get_grad_param(scene, analytic, idx);
        const Real denom =
            std::max({std::abs(e.analytic), std::abs(e.numeric), Real(1e-8)});
        e.rel_error = std::abs(e.analytic - e.numeric) / denom;
        report.max_rel_error = std::max(report.max_rel_error, e.rel_error);
        sum_rel += e.rel_error;
        report.entries.push_back(std::move(e));
    }
    if (count > 0) report.mean_rel_error = sum_rel / Real(count);
    return report;
}

}  // namespace volsplat
