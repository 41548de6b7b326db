#pragma once

#include "volsplat/gaussian.hpp"
#include "volsplat/scene.hpp"
#include "volsplat/splatter.hpp"
#include "volsplat/threading.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <set>
#include <stdexcept>
#include <vector>

namespace volsplat {

/// A 3D Gaussian restricted to one viewing ray.
struct Ray1DGaussian {
    Real peak_t = Real(0);      // ray parameter of the density maximum
    Real sigma_t = Real(1);     // 1D standard deviation along the ray
    Real amplitude_1d = Real(0);  // density value at peak_t
    int source_index = -1;
};

/// How one border value depends on the proposing Gaussians' 1D parameters:
/// border = const + dpeak_a * peak(g_a) + dsig_a * sigma(g_a) + (same for b).
/// Used only by the attached gradient mode; g = -1 marks no dependence.
struct BorderProvenance {
    int g_a = -1;
    Real dpeak_a = 0, dsig_a = 0;
    int g_b = -1;
    Real dpeak_b = 0, dsig_b = 0;
};

/// Interval of ray parameters with a sampling density (bins per unit t).
/// The provenance fields record which proposal generated each boundary and
/// the density, for the attached gradient mode.
struct DensitySection {
    Real start = Real(0);
    Real end = Real(0);
    Real density = Real(0);
    int start_g = -1;  // proposer of the start boundary, -1 if clipped/none
    Real start_dsig = 0;  // d(start)/d(sigma of start_g); d/dpeak is 1 when start_g >= 0
    int end_g = -1;
    Real end_dsig = 0;
    int density_g = -1;  // proposer whose sigma sets the density
};

struct Bin {
    Real t0 = Real(0), t1 = Real(0);
    Real rho = Real(0);   // integrated extinction over [t0, t1]
    Vec3 gamma = Vec3::Zero();  // color-weighted integrated extinction
};

enum class GradientMode { Detached, Attached };

struct MarchOptions {
    int bins_per_batch = 128;
    int bins_per_gaussian = 16;
    Real section_extent_sigmas = Real(3);
    Real termination_opacity = Real(1e-4);
    GradientMode gradient_mode = GradientMode::Detached;
    int section_buffer_capacity = 64;
    Real near_plane = kDefaultNearPlane;
};

/// Restricts one Gaussian to the line o + t d. `amplitude` is the 3D model
/// amplitude a; the restriction scales it by the density at the 1D peak.
inline Ray1DGaussian intersect_1d_amplitude(const Mat3& inv_cov, const Vec3& mean,
                                            Real amplitude, const Ray& ray,
                                            int source_index = -1) {
    if (std::abs(ray.direction.norm() - Real(1)) > Real(1e-6))
        throw std::domain_error("intersect_1d: ray direction must be unit length");
    Ray1DGaussian g;
    g.source_index = source_index;
    const Vec3 m = mean - ray.origin;
    const Vec3 pd = inv_cov * ray.direction;
    const Real denom = ray.direction.dot(pd);
    if (!(denom > Real(0))) {
        g.sigma_t = std::numeric_limits<Real>::max();
        g.amplitude_1d = Real(0);
        return g;
    }
    g.peak_t = pd.dot(m) / denom;
    g.sigma_t = Real(1) / std::sqrt(denom);
    const Real q_peak = std::max(Real(0), m.dot(inv_cov * m) - denom * g.peak_t * g.peak_t);
    g.amplitude_1d = amplitude * std::exp(-q_peak / 2);
    return g;
}

inline Ray1DGaussian intersect_1d(const Gaussian3D& g, const Ray& ray, AmplitudeModel model,
                                  const Camera* view, Real theta) {
    const Mat3 cov = g.covariance();
    const Real a = amplitude3d(model, theta, cov, g, view);
    return intersect_1d_amplitude(spd_inverse_capped(cov).first, g.position, a, ray);
}

/// Analytic integral of a 1D Gaussian over [t0, t1]; t1 may be +infinity.
inline Real gaussian_segment_integral(const Ray1DGaussian& g, Real t0, Real t1) {
    if (!(t1 >= t0)) throw std::invalid_argument("segment integral needs t0 <= t1");
    if (g.amplitude_1d == Real(0)) return Real(0);
    const Real inv = Real(1) / (g.sigma_t * std::numbers::sqrt2_v<Real>);
    const Real e1 = std::isinf(t1) ? Real(1) : std::erf((t1 - g.peak_t) * inv);
    const Real e0 = std::isinf(t0) ? Real(-1) : std::erf((t0 - g.peak_t) * inv);
    return g.amplitude_1d * g.sigma_t * std::sqrt(std::numbers::pi_v<Real> / 2) * (e1 - e0);
}

struct SectionBuffer {
    std::vector<DensitySection> sections;  // ordered, non-overlapping
    std::vector<int> deferred;             // g1d indices with support past the coverage
};

/// Builds the density section buffer for one batch. Every Gaussian proposes
/// [peak - k sigma, peak + k sigma] with density bins_per_gaussian / (2 k sigma);
/// overlaps resolve pointwise to the higher density (so combining two sections
/// can split one into up to three), making the result independent of the
/// proposal order. Sections past the buffer capacity are deferred.
inline SectionBuffer build_sections(const std::vector<Ray1DGaussian>& g1ds,
                                    const MarchOptions& opts, Real window_start) {
    const Real k = opts.section_extent_sigmas;
    struct Event {
        Real t;
        Real density;
        int g;
        bool open;     // proposal start vs end
        bool clipped;  // start clipped to the window (no parameter dependence)
    };
    std::vector<Event> events;
    std::vector<std::pair<Real, int>> support_ends;  // (end, g1d index)
    for (size_t i = 0; i < g1ds.size(); ++i) {
        const auto& g = g1ds[i];
        if (g.amplitude_1d <= Real(0)) continue;
        const Real full = 2 * k * g.sigma_t;
        if (!(full > Real(0)) || std::isinf(g.sigma_t)) continue;
        const Real raw_start = g.peak_t - k * g.sigma_t;
        const Real start = std::max(window_start, raw_start);
        const Real end = g.peak_t + k * g.sigma_t;
        if (!(end > start)) continue;
        const Real density = Real(opts.bins_per_gaussian) / full;
        events.push_back({start, density, static_cast<int>(i), true, raw_start < window_start});
        events.push_back({end, density, static_cast<int>(i), false, false});
        support_ends.push_back({end, static_cast<int>(i)});
    }

    SectionBuffer out;
    if (events.empty()) return out;
    std::sort(events.begin(), events.end(), [](const Event& a, const Event& b) {
        if (a.t != b.t) return a.t < b.t;
        if (a.open != b.open) return a.open > b.open;  // open before close
        return a.g < b.g;
    });

    // Sweep the upper density envelope; active proposals keyed by density
    // with the g1d index as deterministic tie-break.
    std::multiset<std::pair<Real, int>> active;
    Real cursor = events.front().t;
    const Event* cursor_event = &events.front();
    size_t idx = 0;
    auto boundary_provenance = [&](const Event* e, int& g, Real& dsig, bool is_start) {
        if (e == nullptr || e->clipped) {
            g = -1;
            dsig = 0;
            return;
        }
        g = e->g;
        dsig = (e->open ? -k : k);
        (void)is_start;
    };
    auto emit = [&](Real a, const Event* a_ev, Real b, const Event* b_ev) {
        if (!(b > a) || active.empty()) return;
        const auto [density, gd] = *active.rbegin();
        // Coalescing keys on density alone so the forward bins stay invariant
        // under proposal permutation even on exact density ties; provenance
        // then reflects one subgradient choice.
        if (!out.sections.empty() && out.sections.back().density == density &&
            out.sections.back().end == a) {
            auto& last = out.sections.back();
            last.end = b;  // coalesce equal-density neighbors
            boundary_provenance(b_ev, last.end_g, last.end_dsig, false);
            return;
        }
        DensitySection s;
        s.start = a;
        s.end = b;
        s.density = density;
        s.density_g = gd;
        boundary_provenance(a_ev, s.start_g, s.start_dsig, true);
        boundary_provenance(b_ev, s.end_g, s.end_dsig, false);
        out.sections.push_back(s);
    };
    while (idx < events.size()) {
        const Real t = events[idx].t;
        if (t > cursor) emit(cursor, cursor_event, t, &events[idx]);
        while (idx < events.size() && events[idx].t == t) {
            if (events[idx].open)
                active.insert({events[idx].density, events[idx].g});
            else
                active.erase(active.find({events[idx].density, events[idx].g}));
            cursor_event = &events[idx];
            ++idx;
        }
        cursor = t;
    }

    Real coverage_end = cursor;
    if (static_cast<int>(out.sections.size()) > opts.section_buffer_capacity) {
        out.sections.resize(opts.section_buffer_capacity);
        coverage_end = out.sections.back().end;
    }
    for (const auto& [end, gi] : support_ends)
        if (end > coverage_end) out.deferred.push_back(gi);
    std::sort(out.deferred.begin(), out.deferred.end());
    return out;
}

/// Emits bin borders for one batch starting at window_start. Bin width inside
/// a section is 1/density (last bin truncated at the section end); gaps
/// between sections are absorbed into the following bin so the emitted bins
/// tile [window_start, last border] completely. At most bins_per_batch bins.
/// When `provenance` is given, each border records how it moves with the
/// proposing Gaussians' 1D parameters (attached gradient mode).
inline std::vector<Real> sections_to_bins(const std::vector<DensitySection>& sections,
                                          const MarchOptions& opts, Real window_start,
                                          std::vector<BorderProvenance>* provenance = nullptr) {
    std::vector<Real> borders;
    if (sections.empty()) return borders;
    borders.reserve(opts.bins_per_batch + 1);
    borders.push_back(window_start);
    if (provenance) {
        provenance->clear();
        provenance->push_back({});  // batch start: held fixed
    }
    int bins = 0;
    const Real dwidth_dsig =
        2 * opts.section_extent_sigmas / Real(opts.bins_per_gaussian);
    for (const auto& sec : sections) {
        const Real width = Real(1) / sec.density;
        const bool clipped = sec.start < window_start;
        Real t = clipped ? window_start : sec.start;
        int steps = 0;
        while (t < sec.end && bins < opts.bins_per_batch) {
            Real next = t + width;
            ++steps;
            bool truncated = false;
            if (next > sec.end - width * Real(1e-9)) {
                next = sec.end;  // truncate last bin
                truncated = true;
            }
            borders.push_back(next);
            if (provenance) {
                BorderProvenance p;
                if (truncated) {
                    if (sec.end_g >= 0) {
                        p.g_a = sec.end_g;
                        p.dpeak_a = 1;
                        p.dsig_a = sec.end_dsig;
                    }
                } else {
                    if (!clipped && sec.start_g >= 0) {
                        p.g_a = sec.start_g;
                        p.dpeak_a = 1;
                        p.dsig_a = sec.start_dsig;
                    }
                    if (sec.density_g >= 0) {
                        p.g_b = sec.density_g;
                        p.dsig_b = steps * dwidth_dsig;
                    }
                }
                provenance->push_back(p);
            }
            ++bins;
            t = next;
        }
        if (bins >= opts.bins_per_batch) break;
    }
    return borders;
}

/// Per-view data the marcher needs for each scene Gaussian.
struct MarchPrimitive {
    Mat3 inv_cov = Mat3::Identity();
    Vec3 mean = Vec3::Zero();
    Real amplitude = Real(0);  // model amplitude a (view-resolved)
    Vec3 rgb = Vec3::Zero();
    int source_index = -1;
};

inline std::vector<MarchPrimitive> prepare_march(const Scene& scene, const Camera& cam,
                                                 AmplitudeModel model,
                                                 const MarchOptions& opts) {
    std::vector<MarchPrimitive> prims;
    prims.reserve(scene.size());
    for (size_t i = 0; i < scene.size(); ++i) {
        const Gaussian3D& g = scene.gaussians[i];
        const Vec3 mu_cam = cam.to_camera(g.position);
        if (mu_cam.z() <= opts.near_plane) continue;  // consistent with splatting culls
        MarchPrimitive p;
        const Mat3 cov = g.covariance();
        p.inv_cov = spd_inverse_capped(cov).first;
        p.mean = g.position;
        p.amplitude = amplitude3d(model, scene.theta(i), cov, g, &cam);
        p.rgb = eval_sh(g.sh, cam.view_direction_to(g.position));
        p.source_index = static_cast<int>(i);
        prims.push_back(std::move(p));
    }
    return prims;
}

namespace march_detail {

/// (1 - e^-x) / x with a stable small-x branch.
inline Real in_bin_attenuation(Real x) {
    if (x < Real(1e-5)) return Real(1) - x / 2 + x * x / 6;
    return -std::expm1(-x) / x;
}

/// Derivative of in_bin_attenuation: (e^-x (1+x) - 1) / x^2.
inline Real in_bin_attenuation_grad(Real x) {
    if (x < Real(1e-4)) return Real(-0.5) + x / 3 - x * x / 8;
    return (std::exp(-x) * (1 + x) - 1) / (x * x);
}

constexpr Real kSupportSigmas = Real(8.5);  // integrals beyond this are < 1e-16

}  // namespace march_detail

struct MarchResult {
    Vec3 rgb = Vec3::Zero();
    Real transmittance = Real(1);
    int bins = 0;
};

/// Extinction-correct integration of the mixture along one pixel ray.
/// Batches of bins are laid out by build_sections/sections_to_bins; each bin
/// integrates every overlapping 1D Gaussian analytically, and bins composite
/// with exact per-bin opacity 1 - e^-rho.
inline MarchResult march_ray(const std::vector<MarchPrimitive>& prims, const Ray& ray,
                             const Vec3& background, const MarchOptions& opts) {
    std::vector<Ray1DGaussian> g1ds;
    g1ds.reserve(prims.size());
    for (size_t i = 0; i < prims.size(); ++i) {
        Ray1DGaussian g =
            intersect_1d_amplitude(prims[i].inv_cov, prims[i].mean, prims[i].amplitude, ray,
                                   static_cast<int>(i));
        g1ds.push_back(g);
    }

    MarchResult res;
    Vec3 accum = Vec3::Zero();
    Real T = Real(1);
    Real cursor = Real(0);
    const Real k = opts.section_extent_sigmas;

    auto blend_bin = [&](Real t0, Real t1) {
        Real rho = Real(0);
        Vec3 gamma = Vec3::Zero();
        for (const auto& g : g1ds) {
            if (g.amplitude_1d <= Real(0)) continue;
            const Real pad = march_detail::kSupportSigmas * g.sigma_t;
            if (g.peak_t + pad < t0 || g.peak_t - pad > t1) continue;
            const Real seg = gaussian_segment_integral(g, t0, t1);
            rho += seg;
            gamma += prims[g.source_index].rgb * seg;
        }
        accum += gamma * (march_detail::in_bin_attenuation(rho) * T);
        T *= std::exp(-rho);
        ++res.bins;
    };

    for (;;) {
        std::vector<Ray1DGaussian> active;
        for (const auto& g : g1ds)
            if (g.amplitude_1d > Real(0) && !std::isinf(g.sigma_t) &&
                g.peak_t + k * g.sigma_t > cursor)
                active.push_back(g);
        if (active.empty()) break;

        const SectionBuffer buf = build_sections(active, opts, cursor);
        const std::vector<Real> borders = sections_to_bins(buf.sections, opts, cursor);
        if (borders.size() < 2) break;
        bool terminated = false;
        for (size_t b = 0; b + 1 < borders.size(); ++b) {
            blend_bin(borders[b], borders[b + 1]);
            if (T < opts.termination_opacity) {
                terminated = true;
                break;
            }
        }
        cursor = borders.back();
        if (terminated) {
            res.rgb = accum + T * background;
            res.transmittance = T;
            return res;
        }
    }

    // Closure bin: the mass beyond the last +k sigma support border.
    blend_bin(cursor, std::numeric_limits<Real>::infinity());

    res.rgb = accum + T * background;
    res.transmittance = T;
    return res;
}

/// Volumetric march of a single pixel.
inline MarchResult march(const Scene& scene, const Camera& cam, int px, int py,
                         AmplitudeModel model, const MarchOptions& opts) {
    const auto prims = prepare_march(scene, cam, model, opts);
    const Ray ray = cam.pixel_ray(px + Real(0.5), py + Real(0.5));
    return march_ray(prims, ray, scene.background, opts);
}

/// Full-frame marcher sharing the splatter's output contract.
inline RenderOutput render_march(const Scene& scene, const Camera& cam, AmplitudeModel model,
                                 const MarchOptions& opts, int threads = 1) {
    const int W = cam.resolution.x(), H = cam.resolution.y();
    if (W <= 0 || H <= 0) throw std::invalid_argument("render_march: empty camera resolution");
    RenderOutput out;
    out.radiance = Image(H, W, 3);
    out.final_transmittance = Image(H, W, 1, Real(1));
    out.contributor_count.assign(static_cast<size_t>(H) * W, 0);

    const auto prims = prepare_march(scene, cam, model, opts);
    parallel_for(static_cast<size_t>(H), threads, [&](size_t row) {
        const int py = static_cast<int>(row);
        for (int px = 0; px < W; ++px) {
            const Ray ray = cam.pixel_ray(px + Real(0.5), py + Real(0.5));
            const MarchResult r = march_ray(prims, ray, scene.background, opts);
            for (int c = 0; c < 3; ++c) out.radiance.at(py, px, c) = r.rgb[c];
            out.final_transmittance.at(py, px, 0) = r.transmittance;
            out.contributor_count[static_cast<size_t>(py) * W + px] = r.bins;
        }
    });
    return out;
}

}  // namespace volsplat
