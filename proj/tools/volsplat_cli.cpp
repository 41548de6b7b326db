// Command-line surface for the Gaussian volume renderer: render single
// frames, fit scenes, verify gradients, compare variants across budgets, and
// generate synthetic scenes/datasets.

#include "volsplat/gradients.hpp"
#include "volsplat/metrics.hpp"
#include "volsplat/scene_io.hpp"
#include "volsplat/trainer.hpp"
#include "volsplat/variants.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>

namespace vs = volsplat;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

struct NumericalFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Shared helpers.
// ---------------------------------------------------------------------------

vs::Scene load_scene_file(const std::string& path, std::vector<std::string>& warnings,
                          vs::RendererVariant variant) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw std::runtime_error("cannot open scene file: " + path);
    char magic[8] = {};
    probe.read(magic, 8);
    probe.close();
    if (std::string(magic, 8) == "VSPLCKP1") return vs::load_checkpoint(path).scene;
    return vs::import_ply(path, &warnings, vs::variant_model(variant));
}

struct CameraSpec {
    std::vector<vs::Camera> cameras;
};

/// Reads a camera rig JSON: camera_angle_x, resolution [w,h], frames with
/// transform_matrix (NeRF convention). Spec string may carry ":index".
CameraSpec load_camera_rig(const std::string& spec) {
    std::string path = spec;
    int index = -1;
    if (const auto pos = spec.rfind(':');
        pos != std::string::npos && pos > 1 && spec.find(".json", pos - 5) != std::string::npos) {
        path = spec.substr(0, pos);
        index = std::stoi(spec.substr(pos + 1));
    }
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open camera rig: " + path);
    json doc;
    try {
        is >> doc;
    } catch (const std::exception& e) {
        throw std::runtime_error("malformed camera rig " + path + ": " + e.what());
    }
    if (!doc.contains("camera_angle_x") || !doc.contains("frames"))
        throw std::runtime_error("camera rig needs camera_angle_x and frames: " + path);
    if (!doc.contains("resolution"))
        throw std::runtime_error("camera rig needs a resolution [w,h] entry: " + path);
    const int w = doc["resolution"][0].get<int>();
    const int h = doc["resolution"][1].get<int>();
    const vs::Real angle = doc["camera_angle_x"].get<vs::Real>();
    const vs::Real focal = vs::Real(0.5) * w / std::tan(angle / 2);

    CameraSpec out;
    for (const auto& frame : doc["frames"]) {
        vs::Camera cam;
        cam.focal = vs::Vec2(focal, focal);
        cam.principal_point = vs::Vec2(w / vs::Real(2), h / vs::Real(2));
        cam.resolution = Eigen::Vector2i(w, h);
        vs::io_detail::camera_from_nerf_matrix(frame.at("transform_matrix"), cam);
        out.cameras.push_back(cam);
    }
    if (out.cameras.empty()) throw std::runtime_error("camera rig has no frames: " + path);
    if (index >= 0) {
        if (index >= static_cast<int>(out.cameras.size()))
            throw std::runtime_error("camera index out of range: " + spec);
        out.cameras = {out.cameras[static_cast<size_t>(index)]};
    }
    return out;
}

void save_camera_rig(const std::vector<vs::Camera>& cams, const std::string& path) {
    json doc;
    const vs::Camera& c0 = cams.front();
    doc["camera_angle_x"] = 2 * std::atan(vs::Real(0.5) * c0.resolution.x() / c0.focal.x());
    doc["resolution"] = {c0.resolution.x(), c0.resolution.y()};
    doc["frames"] = json::array();
    for (const auto& cam : cams)
        doc["frames"].push_back({{"transform_matrix", vs::io_detail::camera_to_nerf_matrix(cam)}});
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write rig: " + path);
    os << doc.dump(1);
}

json render_config_json(const vs::RenderConfig& cfg, vs::RendererVariant variant) {
    json j;
    j["variant"] = vs::variant_name(variant);
    j["tile_size"] = cfg.splat.tile_size;
    j["alpha_clamp_max"] = cfg.splat.alpha_clamp_max;
    j["termination_transmittance"] = cfg.splat.termination_transmittance;
    j["footprint_cutoff"] = cfg.splat.footprint_cutoff;
    j["filter_variance"] = cfg.splat.filter_variance;
    j["sort_mode"] = cfg.splat.sort_mode == vs::SortMode::PerPixelDepth ? "per-pixel" : "global";
    j["bins_per_batch"] = cfg.march.bins_per_batch;
    j["bins_per_gaussian"] = cfg.march.bins_per_gaussian;
    j["section_extent_sigmas"] = cfg.march.section_extent_sigmas;
    j["termination_opacity"] = cfg.march.termination_opacity;
    return j;
}

std::string options_hash(const json& j) {
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016zx", std::hash<std::string>{}(j.dump()));
    return buf;
}

vs::Vec3 parse_background(const std::string& s) {
    if (s == "white") return vs::Vec3(1, 1, 1);
    if (s == "black") return vs::Vec3(0, 0, 0);
    vs::Vec3 bg;
    std::istringstream ss(s);
    char comma;
    if (!(ss >> bg[0] >> comma >> bg[1] >> comma >> bg[2]))
        throw std::invalid_argument("background must be white, black or r,g,b: " + s);
    return bg;
}

// ---------------------------------------------------------------------------
// fit config file handling.
// ---------------------------------------------------------------------------

const std::vector<std::string> kConfigKeys = {
    "variant",       "n_gaussians",   "iterations",     "seed",
    "sh_degree",     "sh_warmup_every", "lambda_dssim", "eval_every",
    "eval_views_cap", "threads",      "background",     "learning_rates",
    "bins_per_gaussian", "bins_per_batch", "init_extent"};
const std::vector<std::string> kLrKeys = {"position", "rotation", "log_scales",
                                          "theta",    "sh_dc",    "sh_rest"};

void apply_config_json(const json& doc, vs::TrainConfig& cfg, std::string& background) {
    for (const auto& [key, value] : doc.items()) {
        (void)value;
        if (std::find(kConfigKeys.begin(), kConfigKeys.end(), key) == kConfigKeys.end())
            throw std::invalid_argument("unknown config key: \"" + key + "\"");
    }
    // The variant seeds its own defaults (e.g. the OTS theta rate) before the
    // remaining keys override them.
    if (doc.contains("variant"))
        cfg = vs::default_train_config(vs::parse_variant(doc["variant"].get<std::string>()));
    for (const auto& [key, value] : doc.items()) {
        if (key == "n_gaussians") cfg.n_gaussians = value.get<int>();
        else if (key == "iterations") cfg.iterations = value.get<int>();
        else if (key == "seed") cfg.seed = value.get<uint64_t>();
        else if (key == "sh_degree") cfg.sh_degree = value.get<int>();
        else if (key == "sh_warmup_every") cfg.sh_warmup_every = value.get<int>();
        else if (key == "lambda_dssim") cfg.lambda_dssim = value.get<vs::Real>();
        else if (key == "eval_every") cfg.eval_every = value.get<int>();
        else if (key == "eval_views_cap") cfg.eval_views_cap = value.get<int>();
        else if (key == "threads") cfg.threads = value.get<int>();
        else if (key == "background") background = value.get<std::string>();
        else if (key == "init_extent") cfg.init_extent = value.get<vs::Real>();
        else if (key == "bins_per_gaussian") cfg.render.march.bins_per_gaussian = value.get<int>();
        else if (key == "bins_per_batch") cfg.render.march.bins_per_batch = value.get<int>();
        else if (key == "learning_rates") {
            for (const auto& [lk, lv] : value.items()) {
                if (std::find(kLrKeys.begin(), kLrKeys.end(), lk) == kLrKeys.end())
                    throw std::invalid_argument("unknown config key: \"learning_rates." + lk +
                                                "\"");
                const vs::Real r = lv.get<vs::Real>();
                if (lk == "position") cfg.lr.position = r;
                else if (lk == "rotation") cfg.lr.rotation = r;
                else if (lk == "log_scales") cfg.lr.log_scales = r;
                else if (lk == "theta") cfg.lr.theta = r;
                else if (lk == "sh_dc") cfg.lr.sh_dc = r;
                else if (lk == "sh_rest") cfg.lr.sh_rest = r;
            }
        }
    }
}

json effective_config_json(const vs::TrainConfig& cfg, const std::string& background) {
    json j;
    j["variant"] = vs::variant_name(cfg.variant);
    j["n_gaussians"] = cfg.n_gaussians;
    j["iterations"] = cfg.iterations;
    j["seed"] = cfg.seed;
    j["sh_degree"] = cfg.sh_degree;
    j["sh_warmup_every"] = cfg.sh_warmup_every;
    j["lambda_dssim"] = cfg.lambda_dssim;
    j["eval_every"] = cfg.eval_every;
    j["eval_views_cap"] = cfg.eval_views_cap;
    j["threads"] = cfg.threads;
    j["background"] = background;
    j["init_extent"] = cfg.init_extent;
    j["learning_rates"] = {{"position", cfg.lr.position},   {"rotation", cfg.lr.rotation},
                           {"log_scales", cfg.lr.log_scales}, {"theta", cfg.lr.theta},
                           {"sh_dc", cfg.lr.sh_dc},         {"sh_rest", cfg.lr.sh_rest}};
    j["bins_per_gaussian"] = cfg.render.march.bins_per_gaussian;
    j["bins_per_batch"] = cfg.render.march.bins_per_batch;
    return j;
}

// ---------------------------------------------------------------------------
// Commands.
// ---------------------------------------------------------------------------

int cmd_render(const std::string& scene_path, const std::string& camera_spec,
               const std::string& variant_str, const std::string& out_path,
               const std::string& background, int threads) {
    const vs::RendererVariant variant = vs::parse_variant(variant_str);
    std::vector<std::string> warnings;
    vs::Scene scene = load_scene_file(scene_path, warnings, variant);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";
    if (!background.empty()) scene.background = parse_background(background);

    const CameraSpec rig = load_camera_rig(camera_spec);
    vs::RenderConfig cfg;
    cfg.threads = threads;

    const auto t0 = std::chrono::steady_clock::now();
    const auto out = vs::render_variant(scene, rig.cameras.front(), variant, cfg);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    vs::write_png(out_path, out.radiance);

    json opts = render_config_json(cfg, variant);
    json sidecar;
    sidecar["variant"] = variant_str;
    sidecar["scene"] = scene_path;
    sidecar["camera"] = camera_spec;
    sidecar["options"] = opts;
    sidecar["options_hash"] = options_hash(opts);
    sidecar["timing_ms"] = ms;
    std::ofstream(out_path + ".json") << sidecar.dump(1);
    std::cout << "wrote " << out_path << " (" << ms << " ms)\n";
    return kExitOk;
}

int cmd_fit(const std::string& config_path, const std::string& data_path,
            const std::string& out_dir, const std::string& resume_path, int threads_override,
            int iter_override, int n_override, int64_t seed_override,
            const std::string& variant_override) {
    vs::TrainConfig cfg = vs::default_train_config(vs::RendererVariant::Gs3d);
    std::string background = "white";
    json doc = json::object();
    if (!config_path.empty()) {
        std::ifstream is(config_path);
        if (!is) throw std::runtime_error("cannot open config: " + config_path);
        try {
            is >> doc;
        } catch (const std::exception& e) {
            throw std::invalid_argument("malformed config JSON: " + std::string(e.what()));
        }
    }
    // Flags override file values; the variant flag participates in the config
    // so its defaults resolve the same way.
    if (!variant_override.empty()) doc["variant"] = variant_override;
    apply_config_json(doc, cfg, background);
    if (threads_override > 0) cfg.threads = threads_override;
    if (iter_override > 0) cfg.iterations = iter_override;
    if (n_override > 0) cfg.n_gaussians = n_override;
    if (seed_override >= 0) cfg.seed = static_cast<uint64_t>(seed_override);

    const vs::Dataset data = vs::load_dataset(
        data_path, background == "black" ? vs::BackgroundPolicy::Black : vs::BackgroundPolicy::White);
    for (const auto& w : data.warnings) std::cerr << "warning: " << w << "\n";

    fs::create_directories(out_dir);
    std::ofstream((fs::path(out_dir) / "effective_config.json"))
        << effective_config_json(cfg, background).dump(1) << "\n";

    std::ofstream csv(fs::path(out_dir) / "metrics.csv");
    csv << "iteration,loss,test_psnr,test_ssim,wall_seconds\n";
    csv.flush();

    vs::Checkpoint resume;
    const vs::Checkpoint* resume_ptr = nullptr;
    if (!resume_path.empty()) {
        resume = vs::load_checkpoint(resume_path);
        resume_ptr = &resume;
    }

    const auto result = vs::fit(cfg, data, resume_ptr, [&](const vs::MetricTraceRow& row) {
        csv << row.iteration << "," << row.loss << "," << row.test_psnr << ","
            << row.test_ssim << "," << row.wall_seconds << "\n";
        csv.flush();
        std::cout << "iter " << row.iteration << "  loss " << row.loss << "  psnr "
                  << row.test_psnr << "  ssim " << row.test_ssim << "\n";
    });

    vs::Checkpoint ckpt = result.checkpoint;
    ckpt.config = effective_config_json(cfg, background);
    vs::save_checkpoint(ckpt, (fs::path(out_dir) / "checkpoint.bin").string());
    if (result.diverged) throw NumericalFailure("fit diverged (non-finite loss)");
    std::cout << "checkpoint written to " << out_dir << "\n";
    return kExitOk;
}

int cmd_gradcheck(const std::string& variant_str, uint64_t seed, const std::string& report_path,
                  int scene_count, double tolerance, bool corrupt, int threads) {
    const vs::RendererVariant variant = vs::parse_variant(variant_str);
    const bool marcher = vs::variant_is_marcher(variant);
    if (tolerance <= 0) tolerance = marcher ? 5e-4 : 1e-4;

    json report;
    report["variant"] = variant_str;
    report["tolerance"] = tolerance;
    report["perturbation"] = 1e-4;
    report["scenes"] = json::array();
    bool all_pass = true;
    vs::Real worst = 0;

    for (int s = 0; s < scene_count; ++s) {
        const uint64_t scene_seed = seed + 1000 * s;
        vs::Scene scene = vs::gradcheck_scene(scene_seed, vs::variant_activation(variant));
        const int res = marcher ? 10 : 20;
        vs::Camera cam = vs::gradcheck_camera(scene_seed, res);
        vs::RenderConfig cfg = vs::gradcheck_config(threads);

        std::mt19937_64 rng(scene_seed * 13 + 7);
        std::normal_distribution<vs::Real> nd(0, 0.5);
        vs::Image weights(res, res, 3);
        for (auto& v : weights.data) v = nd(rng);

        auto loss = [&](const vs::Scene& sc) {
            const auto out = vs::render_variant(sc, cam, variant, cfg);
            vs::Real sum = 0;
            for (size_t i = 0; i < out.radiance.data.size(); ++i)
                sum += out.radiance.data[i] * weights.data[i];
            return sum;
        };
        const auto fwd = vs::render_variant(scene, cam, variant, cfg);
        vs::ParamGradients grads = vs::backward_variant(scene, cam, variant, cfg, weights, fwd);
        if (corrupt)
            for (auto& v : grads.theta_raw) v *= vs::Real(1.1);

        const auto fd = vs::finite_difference_check(scene, loss, grads, 1e-4);
        const bool pass = fd.max_rel_error <= tolerance && fd.render_finite;
        all_pass = all_pass && pass;
        worst = std::max(worst, fd.max_rel_error);

        json scene_report;
        scene_report["seed"] = scene_seed;
        scene_report["gaussians"] = scene.size();
        scene_report["params_checked"] = fd.params_checked;
        scene_report["max_rel_error"] = fd.max_rel_error;
        scene_report["mean_rel_error"] = fd.mean_rel_error;
        scene_report["pass"] = pass;
        // The worst parameters, for debugging.
        auto entries = fd.entries;
        std::sort(entries.begin(), entries.end(),
                  [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
        json worst_list = json::array();
        for (size_t i = 0; i < std::min<size_t>(5, entries.size()); ++i)
            worst_list.push_back({{"param", entries[i].param},
                                  {"analytic", entries[i].analytic},
                                  {"numeric", entries[i].numeric},
                                  {"rel_error", entries[i].rel_error}});
        scene_report["worst"] = worst_list;
        report["scenes"].push_back(scene_report);
        std::cout << "scene " << scene_seed << ": max rel " << fd.max_rel_error
                  << (pass ? " PASS" : " FAIL") << "\n";
    }
    report["max_rel_error"] = worst;
    report["pass"] = all_pass;
    if (!report_path.empty()) {
        std::ofstream os(report_path);
        os << report.dump(1) << "\n";
    }
    if (!all_pass) throw NumericalFailure("gradient check failed (max rel error " +
                                          std::to_string(double(worst)) + ")");
    std::cout << "gradcheck " << variant_str << " PASS (max rel " << worst << ")\n";
    return kExitOk;
}

int cmd_compare(const std::string& data_path, const std::string& n_list,
                const std::string& variant_list, const std::string& out_dir, int iterations,
                uint64_t seed, int threads) {
    const vs::Dataset data = vs::load_dataset(data_path, vs::BackgroundPolicy::Black);

    std::vector<int> ns;
    for (std::stringstream ss(n_list); ss.good();) {
        std::string tok;
        std::getline(ss, tok, ',');
        if (!tok.empty()) ns.push_back(std::stoi(tok));
    }
    std::vector<vs::RendererVariant> variants;
    for (std::stringstream ss(variant_list); ss.good();) {
        std::string tok;
        std::getline(ss, tok, ',');
        if (!tok.empty()) variants.push_back(vs::parse_variant(tok));
    }
    if (ns.empty() || variants.empty())
        throw std::invalid_argument("compare needs --n and --variants lists");

    fs::create_directories(out_dir);
    std::ofstream csv(fs::path(out_dir) / "compare.csv");
    csv << "variant,n_gaussians,iterations,test_psnr,test_ssim,wall_seconds,status\n";

    // Per-(variant, n) render of the first test view collected into a grid.
    const vs::DatasetView* grid_view = data.test.empty() ? &data.train[0] : &data.test[0];
    const int gw = grid_view->camera.resolution.x(), gh = grid_view->camera.resolution.y();
    vs::Image grid(gh * static_cast<int>(ns.size()), gw * static_cast<int>(variants.size() + 1),
                   3);

    for (size_t ni = 0; ni < ns.size(); ++ni) {
        for (int y = 0; y < gh; ++y)  // ground truth in the first column
            for (int x = 0; x < gw; ++x)
                for (int c = 0; c < 3; ++c)
                    grid.at(static_cast<int>(ni) * gh + y, x, c) = grid_view->target.at(y, x, c);
        for (size_t vi = 0; vi < variants.size(); ++vi) {
            vs::TrainConfig cfg = vs::default_train_config(variants[vi]);
            cfg.n_gaussians = ns[ni];
            cfg.iterations = iterations;
            cfg.seed = seed;
            cfg.threads = threads;
            cfg.eval_every = 0;  // metrics at the end only
            try {
                const auto result = vs::fit(cfg, data);
                if (result.diverged) throw NumericalFailure("diverged");
                vs::TrainConfig eval_cfg = cfg;
                eval_cfg.eval_views_cap = 1000000;
                const auto [p, s] =
                    vs::evaluate_test_metrics(result.checkpoint.scene, data, eval_cfg);
                const vs::Real wall = result.trace.empty() ? 0 : result.trace.back().wall_seconds;
                csv << vs::variant_name(variants[vi]) << "," << ns[ni] << "," << iterations
                    << "," << p << "," << s << "," << wall << ",ok\n";
                const auto view_render = vs::render_variant(
                    result.checkpoint.scene, grid_view->camera, variants[vi], cfg.render);
                for (int y = 0; y < gh; ++y)
                    for (int x = 0; x < gw; ++x)
                        for (int c = 0; c < 3; ++c)
                            grid.at(static_cast<int>(ni) * gh + y,
                                    static_cast<int>(vi + 1) * gw + x, c) =
                                view_render.radiance.at(y, x, c);
                std::cout << vs::variant_name(variants[vi]) << " n=" << ns[ni] << " psnr=" << p
                          << " ssim=" << s << "\n";
            } catch (const std::exception& e) {
                csv << vs::variant_name(variants[vi]) << "," << ns[ni] << "," << iterations
                    << ",,,," << "error: " << e.what() << "\n";
                std::cerr << "row failed (" << vs::variant_name(variants[vi]) << ", n=" << ns[ni]
                          << "): " << e.what() << "\n";
            }
            csv.flush();
        }
    }
    vs::write_png((fs::path(out_dir) / (data.scene_name + "_grid.png")).string(), grid);
    std::cout << "results in " << out_dir << "\n";
    return kExitOk;
}

int cmd_make_scene(const std::string& kind_str, int count, uint64_t seed,
                   const std::string& out_ply, const std::string& rig_path,
                   const std::string& dataset_out, const std::string& gt_variant_str,
                   int views, int resolution, int test_every, int threads) {
    const vs::SyntheticKind kind = vs::parse_synthetic_kind(kind_str);
    vs::SyntheticParams params;
    params.blob_count = count;
    params.seed = seed;
    params.camera_count = views;
    params.resolution = resolution;
    const auto synth = vs::make_synthetic(kind, params);

    if (!out_ply.empty()) {
        vs::export_ply(synth.scene, out_ply, vs::AmplitudeModel::OpacityThinSide);
        std::cout << "wrote " << out_ply << " (" << synth.scene.size() << " gaussians)\n";
    }
    if (!rig_path.empty()) {
        save_camera_rig(synth.cameras, rig_path);
        std::cout << "wrote " << rig_path << " (" << synth.cameras.size() << " cameras)\n";
    }
    if (!dataset_out.empty()) {
        const vs::RendererVariant gt_variant = vs::parse_variant(gt_variant_str);
        vs::RenderConfig cfg;
        cfg.threads = threads;
        const vs::Dataset data =
            vs::render_dataset(synth.scene, synth.cameras, gt_variant, cfg, test_every);
        vs::save_dataset(data, dataset_out);
        std::cout << "wrote dataset to " << dataset_out << " (" << data.train.size()
                  << " train / " << data.test.size() << " test views)\n";
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Gaussian mixture volume renderer and optimizer"};
    app.require_subcommand(1);

    // render
    auto* render = app.add_subcommand("render", "Render a scene or checkpoint to PNG");
    std::string r_scene, r_camera, r_variant = "3dgs", r_out, r_background;
    int r_threads = 2;
    render->add_option("--scene", r_scene, "Scene PLY or checkpoint")->required();
    render->add_option("--camera", r_camera, "Camera rig JSON, optional :index")->required();
    render->add_option("--variant", r_variant,
                       "Renderer: 3dgs, 3dgs-stp, ots, ots-satn, 3dgs-marcher, ots-marcher");
    render->add_option("--out", r_out, "Output PNG path")->required();
    render->add_option("--background", r_background, "white, black or r,g,b");
    render->add_option("--threads", r_threads, "Worker threads");

    // fit
    auto* fit_cmd = app.add_subcommand("fit", "Optimize a scene against a dataset");
    std::string f_config, f_data, f_out, f_resume, f_variant;
    int f_threads = 0, f_iters = 0, f_n = 0;
    int64_t f_seed = -1;
    fit_cmd->add_option("--config", f_config, "JSON config file");
    fit_cmd->add_option("--data", f_data, "Dataset directory")->required();
    fit_cmd->add_option("--out", f_out, "Output directory")->required();
    fit_cmd->add_option("--resume", f_resume, "Checkpoint to resume from");
    fit_cmd->add_option("--variant", f_variant, "Renderer variant override");
    fit_cmd->add_option("--threads", f_threads, "Worker threads override");
    fit_cmd->add_option("--iterations", f_iters, "Iteration override");
    fit_cmd->add_option("--n", f_n, "Gaussian count override");
    fit_cmd->add_option("--seed", f_seed, "Seed override");

    // gradcheck
    auto* grad = app.add_subcommand("gradcheck", "Verify analytic gradients against FD");
    std::string g_variant = "3dgs", g_report;
    uint64_t g_seed = 1;
    int g_scenes = 3, g_threads = 2;
    double g_tol = -1;
    bool g_corrupt = false;
    grad->add_option("--variant", g_variant, "Renderer variant");
    grad->add_option("--seed", g_seed, "Base scene seed");
    grad->add_option("--report", g_report, "JSON report path");
    grad->add_option("--scenes", g_scenes, "Number of random scenes");
    grad->add_option("--tolerance", g_tol, "Max relative error (default per variant)");
    grad->add_flag("--corrupt", g_corrupt, "Self-test: corrupt gradients, expect failure");
    grad->add_option("--threads", g_threads, "Worker threads");

    // compare
    auto* cmp = app.add_subcommand("compare", "Fit variants across Gaussian budgets");
    std::string c_data, c_n = "4000", c_variants = "3dgs,ots", c_out;
    int c_iters = 3000, c_threads = 2;
    uint64_t c_seed = 0;
    cmp->add_option("--data", c_data, "Dataset directory")->required();
    cmp->add_option("--n", c_n, "Comma-separated Gaussian counts");
    cmp->add_option("--variants", c_variants, "Comma-separated renderer variants");
    cmp->add_option("--out", c_out, "Output directory")->required();
    cmp->add_option("--iterations", c_iters, "Training iterations per row");
    cmp->add_option("--seed", c_seed, "Seed");
    cmp->add_option("--threads", c_threads, "Worker threads");

    // make-scene
    auto* mk = app.add_subcommand("make-scene", "Generate synthetic scenes and datasets");
    std::string m_kind = "blob_cloud", m_out, m_rig, m_dataset, m_gt = "ots-marcher";
    int m_count = 64, m_views = 24, m_res = 128, m_test_every = 5, m_threads = 2;
    uint64_t m_seed = 7;
    mk->add_option("--kind", m_kind,
                   "single_gaussian, crossed_pair, anisotropic_triplet, blob_cloud");
    mk->add_option("--count", m_count, "Blob count (blob_cloud)");
    mk->add_option("--seed", m_seed, "Seed");
    mk->add_option("--out", m_out, "Output PLY path");
    mk->add_option("--rig", m_rig, "Camera rig JSON output");
    mk->add_option("--dataset-out", m_dataset, "Render a dataset into this directory");
    mk->add_option("--gt-variant", m_gt, "Renderer for ground-truth views");
    mk->add_option("--views", m_views, "Camera count");
    mk->add_option("--resolution", m_res, "Render resolution");
    mk->add_option("--test-every", m_test_every, "Every k-th view goes to the test split");
    mk->add_option("--threads", m_threads, "Worker threads");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (*render)
            return cmd_render(r_scene, r_camera, r_variant, r_out, r_background, r_threads);
        if (*fit_cmd)
            return cmd_fit(f_config, f_data, f_out, f_resume, f_threads, f_iters, f_n, f_seed,
                           f_variant);
        if (*grad)
            return cmd_gradcheck(g_variant, g_seed, g_report, g_scenes, g_tol, g_corrupt,
                                 g_threads);
        if (*cmp) return cmd_compare(c_data, c_n, c_variants, c_out, c_iters, c_seed, c_threads);
        if (*mk)
            return cmd_make_scene(m_kind, m_count, m_seed, m_out, m_rig, m_dataset, m_gt,
                                  m_views, m_res, m_test_every, m_threads);
    } catch (const NumericalFailure& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::runtime_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitUsage;
}
