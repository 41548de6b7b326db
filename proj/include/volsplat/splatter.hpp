#pragma once

#include "volsplat/gaussian.hpp"
#include "volsplat/scene.hpp"
#include "volsplat/threading.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace volsplat {

/// Blending law of the splatter. Taylor modes use the 1-g transmittance
/// approximation; SelfAttenuation composites exact exponentials and needs no
/// clamp.
enum class BlendMode { Taylor3DGS, TaylorOTS, SelfAttenuation };

enum class SortMode { GlobalMeanDepth, PerPixelDepth };

struct SplatOptions {
    BlendMode blend_mode = BlendMode::Taylor3DGS;
    SortMode sort_mode = SortMode::GlobalMeanDepth;
    int tile_size = 16;
    Real alpha_clamp_max = Real(0.99);
    Real termination_transmittance = Real(1e-4);
    // The exponential falloff of self-attenuation stays numerically
    // significant far longer than the Taylor blend, so its early-out sits
    // three decades lower.
    Real termination_transmittance_satn = Real(1e-7);
    Real footprint_cutoff = Real(3.33);  // Mahalanobis stddevs
    Real filter_variance = kDefaultFilterVariance;
    Real near_plane = kDefaultNearPlane;
    JacobianMode jacobian_mode = JacobianMode::ScreenBlock2x2;

    Real termination() const {
        return blend_mode == BlendMode::SelfAttenuation ? termination_transmittance_satn
                                                        : termination_transmittance;
    }
};

struct RenderOutput {
    Image radiance;             // H x W x 3
    Image final_transmittance;  // H x W x 1
    std::vector<int> contributor_count;  // blended splats per pixel
};

inline void check_blend_model_compat(BlendMode blend, AmplitudeModel model) {
    const bool ok = (blend == BlendMode::Taylor3DGS)
                        ? model == AmplitudeModel::OpacityAmplitude
                        : (model == AmplitudeModel::OpacityThinSide ||
                           model == AmplitudeModel::EwaMass);
    if (!ok) throw std::invalid_argument("incompatible blend mode / amplitude model pair");
}

/// Stable ascending sort by mean view-space depth; ties keep list order.
inline std::vector<int> sort_global(const std::vector<ProjectedGaussian>& projected) {
    std::vector<int> order(projected.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return projected[a].depth < projected[b].depth;
    });
    return order;
}

/// Ray parameter of the maximum of a Gaussian restricted to the ray.
inline Real peak_t_along_ray(const Mat3& inv_cov, const Vec3& mean, const Ray& ray) {
    const Vec3 m = mean - ray.origin;
    const Real denom = ray.direction.dot(inv_cov * ray.direction);
    if (!(denom > Real(0))) return Real(0);
    return ray.direction.dot(inv_cov * m) / denom;
}

/// Exact per-pixel visibility order: ascending peak-t along the pixel ray,
/// ties broken by list position (stable).
inline std::vector<int> sort_per_pixel(const std::vector<Mat3>& inv_covs,
                                       const std::vector<Vec3>& means, const Ray& ray) {
    std::vector<Real> keys(inv_covs.size());
    for (size_t i = 0; i < inv_covs.size(); ++i)
        keys[i] = peak_t_along_ray(inv_covs[i], means[i], ray);
    std::vector<int> order(inv_covs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return keys[a] < keys[b]; });
    return order;
}

/// One already-evaluated contribution: g (Taylor) or f (self-attenuation)
/// plus the resolved color.
struct BlendContribution {
    Real value = Real(0);
    Vec3 rgb = Vec3::Zero();
};

struct BlendResult {
    Vec3 rgb = Vec3::Zero();
    Real transmittance = Real(1);
    int blended = 0;
};

/// Front-to-back compositing of ordered contributions onto a background.
inline BlendResult blend_front_to_back(std::span<const BlendContribution> contribs,
                                       const Vec3& background, BlendMode mode,
                                       Real alpha_clamp_max, Real termination) {
    BlendResult r;
    Vec3 accum = Vec3::Zero();
    for (const auto& c : contribs) {
        Real weight;
        if (mode == BlendMode::SelfAttenuation) {
            const Real att = std::exp(-c.value);
            weight = (Real(1) - att) * r.transmittance;
            r.transmittance *= att;
        } else {
            const Real g = std::min(std::max(c.value, Real(0)), alpha_clamp_max);
            weight = g * r.transmittance;
            r.transmittance *= (Real(1) - g);
        }
        accum += weight * c.rgb;
        ++r.blended;
        if (r.transmittance < termination) break;
    }
    r.rgb = accum + r.transmittance * background;
    return r;
}

/// 2 pi times the product of the two largest scales: the thin-side constant
/// computed straight from the parameterization (the eigenvalues of the
/// covariance are exactly the squared scales).
inline Real thin_side_constant_from_scales(const Vec3& log_scales) {
    const Real lo = log_scales.minCoeff();
    return Real(2) * std::numbers::pi_v<Real> *
           std::exp(log_scales.sum() - lo);
}

/// Per-view footprint with everything the pixel loop needs.
struct PreparedSplat {
    ProjectedGaussian footprint;
    Mat2 conic = Mat2::Identity();  // inverse of the filtered 2D covariance
    Mat3 inv_cov3d = Mat3::Identity();  // filled only for per-pixel sorting
    Vec3 mean_world = Vec3::Zero();
};

/// Projects, colors and filters every visible Gaussian of the scene for one
/// view; output order follows the scene order.
inline std::vector<PreparedSplat> prepare_splats(const Scene& scene, const Camera& cam,
                                                 AmplitudeModel model,
                                                 const SplatOptions& opts) {
    std::vector<PreparedSplat> out;
    out.reserve(scene.size());
    const bool per_pixel = opts.sort_mode == SortMode::PerPixelDepth;
    for (size_t i = 0; i < scene.size(); ++i) {
        const Gaussian3D& g = scene.gaussians[i];
        auto proj = project(g, cam, opts.near_plane);
        if (!proj) continue;
        const Vec3 mu_cam = cam.to_camera(g.position);
        const Real jac = jacobian_compensation(cam, mu_cam, opts.jacobian_mode);
        const Real theta = scene.theta(i);
        switch (model) {
            case AmplitudeModel::OpacityAmplitude:
                proj->amplitude2d = theta;
                break;
            case AmplitudeModel::EwaMass:
                proj->amplitude2d = theta * jac / normalization_constant(proj->cov2d);
                break;
            case AmplitudeModel::OpacityThinSide:
                proj->amplitude2d = theta * thin_side_constant_from_scales(g.log_scales) *
                                    jac / normalization_constant(proj->cov2d);
                break;
        }
        *proj = antialias_filter(*proj, opts.filter_variance);
        proj->rgb = eval_sh(g.sh, cam.view_direction_to(g.position));
        proj->source_index = static_cast<int>(i);

        PreparedSplat s;
        s.footprint = *proj;
        s.conic = proj->cov2d.inverse();
        if (per_pixel) s.inv_cov3d = spd_inverse_capped(g.covariance()).first;
        s.mean_world = g.position;
        out.push_back(std::move(s));
    }
    return out;
}

namespace splat_detail {

struct TileGrid {
    int tiles_x = 0, tiles_y = 0, tile_size = 16;
    // Per tile: indices into the globally sorted splat order, tile lists keep
    // the global order.
    std::vector<std::vector<int>> lists;
};

/// Tight pixel-index bounds of the cutoff ellipse (pixel centers at +0.5).
inline void footprint_pixel_bounds(const ProjectedGaussian& p, Real cutoff, int width,
                                   int height, int& x0, int& x1, int& y0, int& y1) {
    const Real rx = cutoff * std::sqrt(std::max(p.cov2d(0, 0), Real(0)));
    const Real ry = cutoff * std::sqrt(std::max(p.cov2d(1, 1), Real(0)));
    x0 = std::max(0, static_cast<int>(std::ceil(p.mean2d.x() - rx - Real(0.5))));
    x1 = std::min(width - 1, static_cast<int>(std::floor(p.mean2d.x() + rx - Real(0.5))));
    y0 = std::max(0, static_cast<int>(std::ceil(p.mean2d.y() - ry - Real(0.5))));
    y1 = std::min(height - 1, static_cast<int>(std::floor(p.mean2d.y() + ry - Real(0.5))));
}

inline TileGrid build_tile_grid(const std::vector<PreparedSplat>& splats,
                                const std::vector<int>& order, const SplatOptions& opts,
                                int width, int height) {
    TileGrid grid;
    grid.tile_size = opts.tile_size;
    grid.tiles_x = (width + opts.tile_size - 1) / opts.tile_size;
    grid.tiles_y = (height + opts.tile_size - 1) / opts.tile_size;
    grid.lists.resize(static_cast<size_t>(grid.tiles_x) * grid.tiles_y);
    for (int rank = 0; rank < static_cast<int>(order.size()); ++rank) {
        const auto& p = splats[order[rank]].footprint;
        int x0, x1, y0, y1;
        footprint_pixel_bounds(p, opts.footprint_cutoff, width, height, x0, x1, y0, y1);
        if (x0 > x1 || y0 > y1) continue;
        for (int ty = y0 / opts.tile_size; ty <= y1 / opts.tile_size; ++ty)
            for (int tx = x0 / opts.tile_size; tx <= x1 / opts.tile_size; ++tx)
                grid.lists[static_cast<size_t>(ty) * grid.tiles_x + tx].push_back(rank);
    }
    return grid;
}

}  // namespace splat_detail

/// Tile-based forward splatting. Pixels are independent work items, so the
/// result is identical for any worker count and any tile size.
inline RenderOutput rasterize(const Scene& scene, const Camera& cam, AmplitudeModel model,
                              const SplatOptions& opts, int threads = 1) {
    check_blend_model_compat(opts.blend_mode, model);
    const int W = cam.resolution.x(), H = cam.resolution.y();
    if (W <= 0 || H <= 0) throw std::invalid_argument("rasterize: empty camera resolution");

    RenderOutput out;
    out.radiance = Image(H, W, 3);
    out.final_transmittance = Image(H, W, 1, Real(1));
    out.contributor_count.assign(static_cast<size_t>(H) * W, 0);

    const auto splats = prepare_splats(scene, cam, model, opts);
    std::vector<ProjectedGaussian> footprints(splats.size());
    for (size_t i = 0; i < splats.size(); ++i) footprints[i] = splats[i].footprint;
    const std::vector<int> order = sort_global(footprints);
    const auto grid = splat_detail::build_tile_grid(splats, order, opts, W, H);

    const Real cutoff_sq = opts.footprint_cutoff * opts.footprint_cutoff;
    const Real termination = opts.termination();

    // Flat per-rank view of the footprints for the pixel loops.
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

    parallel_for(grid.lists.size(), threads, [&](size_t tile) {
        const auto& list = grid.lists[tile];
        const int tx = static_cast<int>(tile) % grid.tiles_x;
        const int ty = static_cast<int>(tile) / grid.tiles_x;
        const int px0 = tx * grid.tile_size, py0 = ty * grid.tile_size;
        const int px1 = std::min(px0 + grid.tile_size, W);
        const int py1 = std::min(py0 + grid.tile_size, H);

        const bool per_pixel = opts.sort_mode == SortMode::PerPixelDepth && list.size() > 1;
        std::vector<BlendContribution> contribs;
        std::vector<int> pixel_order;
        std::vector<Real> keys;
        for (int py = py0; py < py1; ++py) {
            for (int px = px0; px < px1; ++px) {
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

                contribs.clear();
                const size_t m = list.size();
                for (size_t k = 0; k < m; ++k) {
                    const int rank = per_pixel ? list[pixel_order[k]] : list[k];
                    const SplatRow& r = rows[rank];
                    const Real dx = cx - r.mx, dy = cy - r.my;
                    const Real q = r.ca * dx * dx + 2 * r.cb * dx * dy + r.cc * dy * dy;
                    if (q > cutoff_sq) continue;
                    contribs.push_back({r.amp * std::exp(-q / 2), r.rgb});
                }
                const BlendResult r =
                    blend_front_to_back(contribs, scene.background, opts.blend_mode,
                                        opts.alpha_clamp_max, termination);
                for (int c = 0; c < 3; ++c) out.radiance.at(py, px, c) = r.rgb[c];
                out.final_transmittance.at(py, px, 0) = r.transmittance;
                out.contributor_count[static_cast<size_t>(py) * W + px] = r.blended;
            }
        }
    });
    return out;
}

}  // namespace volsplat
