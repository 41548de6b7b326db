#pragma once

#include "volsplat/png_io.hpp"
#include "volsplat/scene.hpp"
#include "volsplat/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace volsplat {

enum class BackgroundPolicy { White, Black };

namespace io_detail {

/// NeRF-synthetic transform_matrix is camera-to-world in the OpenGL
/// convention (x right, y up, z backward); our cameras use x right, y down,
/// z forward.
inline void camera_from_nerf_matrix(const nlohmann::json& m, Camera& cam) {
    Mat3 rot_gl;
    Vec3 pos;
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) rot_gl(r, c) = m.at(r).at(c).get<Real>();
        pos[r] = m.at(r).at(3).get<Real>();
    }
    Mat3 rot_cv = rot_gl;
    rot_cv.col(1) *= -1;
    rot_cv.col(2) *= -1;
    cam.rotation = rot_cv.transpose();
    cam.translation = -cam.rotation * pos;
}

inline nlohmann::json camera_to_nerf_matrix(const Camera& cam) {
    Mat3 rot_cv = cam.rotation.transpose();
    const Vec3 pos = cam.center();
    Mat3 rot_gl = rot_cv;
    rot_gl.col(1) *= -1;
    rot_gl.col(2) *= -1;
    nlohmann::json m = nlohmann::json::array();
    for (int r = 0; r < 3; ++r)
        m.push_back({rot_gl(r, 0), rot_gl(r, 1), rot_gl(r, 2), pos[r]});
    m.push_back({0.0, 0.0, 0.0, 1.0});
    return m;
}

inline std::vector<DatasetView> load_split(const std::filesystem::path& root,
                                           const std::string& split, const Vec3& background,
                                           std::vector<std::string>& warnings) {
    namespace fs = std::filesystem;
    const fs::path json_path = root / ("transforms_" + split + ".json");
    std::ifstream is(json_path);
    if (!is) return {};

    nlohmann::json doc;
    try {
        is >> doc;
    } catch (const std::exception& e) {
        throw std::runtime_error("malformed " + json_path.string() + ": " + e.what());
    }
    if (!doc.contains("camera_angle_x"))
        throw std::runtime_error(json_path.string() + " lacks camera_angle_x");
    if (!doc.contains("frames"))
        throw std::runtime_error(json_path.string() + " lacks frames");
    const Real angle_x = doc["camera_angle_x"].get<Real>();

    std::vector<DatasetView> views;
    int res_w = -1, res_h = -1;
    for (const auto& frame : doc["frames"]) {
        std::string file = frame.at("file_path").get<std::string>();
        fs::path img_path = root / file;
        if (!img_path.has_extension()) img_path += ".png";
        if (!fs::exists(img_path))
            throw std::runtime_error("missing frame image: " + img_path.string());
        Image raw = read_png(img_path.string());
        if (res_w < 0) {
            res_w = raw.width;
            res_h = raw.height;
        } else if (res_w != raw.width || res_h != raw.height) {
            throw std::runtime_error("inconsistent resolutions in split " + split + " at " +
                                     img_path.string());
        }

        DatasetView view;
        view.name = file;
        view.target = Image(raw.height, raw.width, 3);
        const bool has_alpha = raw.channels == 4;
        for (int y = 0; y < raw.height; ++y)
            for (int x = 0; x < raw.width; ++x) {
                const Real a = has_alpha ? raw.at(y, x, 3) : Real(1);
                for (int c = 0; c < 3; ++c)
                    view.target.at(y, x, c) = raw.at(y, x, c) * a + background[c] * (1 - a);
            }

        const Real focal = Real(0.5) * raw.width / std::tan(angle_x / 2);
        view.camera.focal = Vec2(focal, focal);
        view.camera.principal_point = Vec2(raw.width / Real(2), raw.height / Real(2));
        view.camera.resolution = Eigen::Vector2i(raw.width, raw.height);
        camera_from_nerf_matrix(frame.at("transform_matrix"), view.camera);
        views.push_back(std::move(view));
    }
    if (views.empty()) warnings.push_back("split " + split + " has no frames");
    return views;
}

}  // namespace io_detail

/// Loads a NeRF-synthetic style dataset (transforms_{train,test}.json plus
/// PNG frames). Alpha is composited onto the requested background; a missing
/// test split is a warning, not an error.
inline Dataset load_dataset(const std::string& path,
                            BackgroundPolicy policy = BackgroundPolicy::White) {
    namespace fs = std::filesystem;
    if (!fs::exists(fs::path(path) / "transforms_train.json"))
        throw std::runtime_error("no transforms_train.json under " + path);
    Dataset data;
    data.scene_name = fs::path(path).filename().string();
    data.background = policy == BackgroundPolicy::White ? Vec3(1, 1, 1) : Vec3(0, 0, 0);
    data.train = io_detail::load_split(path, "train", data.background, data.warnings);
    data.test = io_detail::load_split(path, "test", data.background, data.warnings);
    if (data.train.empty()) throw std::runtime_error("dataset has no training frames: " + path);
    if (data.test.empty()) data.warnings.push_back("no test split found; test set is empty");
    return data;
}

// ---------------------------------------------------------------------------
// 3DGS-compatible binary PLY.
// ---------------------------------------------------------------------------

inline void export_ply(const Scene& scene, const std::string& path,
                       AmplitudeModel model = AmplitudeModel::OpacityAmplitude) {
    for (const auto& g : scene.gaussians)
        if (!g.position.allFinite() || !std::isfinite(g.theta_raw))
            throw std::invalid_argument("export_ply: non-finite parameters");

    const int degree = scene.gaussians.empty() ? 0 : scene.gaussians[0].sh.degree;
    const int rest = sh_coeff_count(degree) - 1;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write PLY: " + path);

    const char* model_tag = model == AmplitudeModel::OpacityAmplitude
                                ? "3dgs"
                                : (model == AmplitudeModel::OpacityThinSide ? "ots" : "ewa");
    os << "ply\nformat binary_little_endian 1.0\n";
    os << "comment volsplat_convention model=" << model_tag << " activation="
       << (scene.theta_activation == ThetaActivation::Sigmoid ? "sigmoid" : "softplus2")
       << "\n";
    os << "element vertex " << scene.size() << "\n";
    for (const char* p : {"x", "y", "z", "nx", "ny", "nz"})
        os << "property float " << p << "\n";
    for (int i = 0; i < 3; ++i) os << "property float f_dc_" << i << "\n";
    for (int i = 0; i < 3 * rest; ++i) os << "property float f_rest_" << i << "\n";
    os << "property float opacity\n";
    for (int i = 0; i < 3; ++i) os << "property float scale_" << i << "\n";
    for (int i = 0; i < 4; ++i) os << "property float rot_" << i << "\n";
    os << "end_header\n";

    std::vector<float> row;
    for (const auto& g : scene.gaussians) {
        row.clear();
        for (int k = 0; k < 3; ++k) row.push_back(static_cast<float>(g.position[k]));
        for (int k = 0; k < 3; ++k) row.push_back(0.0f);  // normals, zero by convention
        for (int ch = 0; ch < 3; ++ch) row.push_back(static_cast<float>(g.sh.coeffs[ch][0]));
        for (int ch = 0; ch < 3; ++ch)
            for (int k = 1; k <= rest; ++k)
                row.push_back(static_cast<float>(g.sh.coeffs[ch][k]));
        row.push_back(static_cast<float>(g.theta_raw));
        for (int k = 0; k < 3; ++k) row.push_back(static_cast<float>(g.log_scales[k]));
        for (int k = 0; k < 4; ++k) row.push_back(static_cast<float>(g.rotation[k]));
        os.write(reinterpret_cast<const char*>(row.data()), row.size() * sizeof(float));
    }
    if (!os) throw std::runtime_error("PLY write failed: " + path);
}

inline Scene import_ply(const std::string& path, std::vector<std::string>* warnings = nullptr,
                        AmplitudeModel expected_model = AmplitudeModel::OpacityAmplitude) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open PLY: " + path);
    std::string line;
    std::getline(is, line);
    if (line != "ply") throw std::runtime_error("not a PLY file: " + path);

    size_t count = 0;
    std::vector<std::string> props;
    std::string convention;
    bool binary_le = false;
    while (std::getline(is, line)) {
        std::istringstream ss(line);
        std::string word;
        ss >> word;
        if (word == "format") {
            std::string fmt;
            ss >> fmt;
            binary_le = fmt == "binary_little_endian";
        } else if (word == "comment") {
            std::string rest_of;
            std::getline(ss, rest_of);
            if (rest_of.find("volsplat_convention") != std::string::npos)
                convention = rest_of;
        } else if (word == "element") {
            std::string kind;
            ss >> kind >> count;
            if (kind != "vertex") throw std::runtime_error("unsupported PLY element: " + kind);
        } else if (word == "property") {
            std::string type, name;
            ss >> type >> name;
            if (type != "float")
                throw std::runtime_error("unsupported PLY property type: " + type);
            props.push_back(name);
        } else if (word == "end_header") {
            break;
        }
    }
    if (!binary_le) throw std::runtime_error("PLY must be binary little-endian: " + path);

    auto find_prop = [&](const std::string& name) {
        for (size_t i = 0; i < props.size(); ++i)
            if (props[i] == name) return static_cast<int>(i);
        return -1;
    };
    for (const char* required : {"x", "y", "z", "opacity", "scale_0", "rot_0", "f_dc_0"})
        if (find_prop(required) < 0)
            throw std::runtime_error(std::string("PLY lacks required field ") + required +
                                     ": " + path);

    int rest = 0;
    while (find_prop("f_rest_" + std::to_string(rest)) >= 0) ++rest;
    if (rest % 3 != 0) throw std::runtime_error("PLY f_rest count not divisible by 3");
    const int coeffs = rest / 3 + 1;
    int degree = 0;
    while (sh_coeff_count(degree) < coeffs && degree < kMaxShDegree) ++degree;
    if (sh_coeff_count(degree) != coeffs)
        throw std::runtime_error("PLY f_rest count does not match an SH degree");

    // Unknown fields are tolerated (skipped) with a warning.
    static const std::vector<std::string> known = {"x",  "y",  "z",  "nx", "ny", "nz",
                                                   "opacity", "scale_0", "scale_1", "scale_2",
                                                   "rot_0", "rot_1", "rot_2", "rot_3"};
    for (const auto& p : props) {
        const bool is_known = std::find(known.begin(), known.end(), p) != known.end() ||
                              p.rfind("f_dc_", 0) == 0 || p.rfind("f_rest_", 0) == 0;
        if (!is_known && warnings)
            warnings->push_back("ignoring unknown PLY field: " + p);
    }

    Scene scene;
    if (!convention.empty()) {
        if (convention.find("activation=softplus2") != std::string::npos)
            scene.theta_activation = ThetaActivation::SoftplusBeta2;
        const char* expected_tag = expected_model == AmplitudeModel::OpacityAmplitude
                                       ? "3dgs"
                                       : (expected_model == AmplitudeModel::OpacityThinSide
                                              ? "ots"
                                              : "ewa");
        if (convention.find(std::string("model=") + expected_tag) == std::string::npos &&
            warnings)
            warnings->push_back("theta convention tag mismatch: checkpoint says '" +
                                convention + "'");
    }

    std::vector<float> row(props.size());
    scene.gaussians.resize(count);
    const int ix = find_prop("x"), iop = find_prop("opacity"), isc = find_prop("scale_0");
    const int irot = find_prop("rot_0"), idc = find_prop("f_dc_0"), irest = find_prop("f_rest_0");
    for (auto& g : scene.gaussians) {
        is.read(reinterpret_cast<char*>(row.data()), row.size() * sizeof(float));
        if (!is) throw std::runtime_error("truncated PLY: " + path);
        g.position = Vec3(row[ix], row[ix + 1], row[ix + 2]);
        g.theta_raw = row[iop];
        g.log_scales = Vec3(row[isc], row[isc + 1], row[isc + 2]);
        // Quaternions stay as stored (renderers normalize on read), keeping
        // import/export idempotent at 32-bit width.
        g.rotation = Vec4(row[irot], row[irot + 1], row[irot + 2], row[irot + 3]);
        g.sh.set_degree(degree);
        for (int ch = 0; ch < 3; ++ch) {
            g.sh.coeffs[ch][0] = row[idc + ch];
            for (int k = 1; k < coeffs; ++k)
                g.sh.coeffs[ch][k] = row[irest + ch * (coeffs - 1) + (k - 1)];
        }
    }
    return scene;
}

// ---------------------------------------------------------------------------
// Synthetic analysis scenes with an orbiting camera rig.
// ---------------------------------------------------------------------------

enum class SyntheticKind { SingleGaussian, CrossedPair, AnisotropicTriplet, BlobCloud };

inline SyntheticKind parse_synthetic_kind(const std::string& s) {
    if (s == "single_gaussian") return SyntheticKind::SingleGaussian;
    if (s == "crossed_pair") return SyntheticKind::CrossedPair;
    if (s == "anisotropic_triplet") return SyntheticKind::AnisotropicTriplet;
    if (s == "blob_cloud") return SyntheticKind::BlobCloud;
    throw std::invalid_argument("unknown synthetic scene kind: " + s);
}

struct SyntheticParams {
    int blob_count = 64;
    uint64_t seed = 7;
    Real theta = Real(0.8);
    int camera_count = 24;
    Real orbit_radius = Real(3.2);
    int resolution = 128;
    Real fov_x = Real(0.8);  // radians
};

struct SyntheticScene {
    Scene scene;
    std::vector<Camera> cameras;
};

inline std::vector<Camera> make_orbit(int count, Real radius, int resolution, Real fov_x) {
    std::vector<Camera> cams;
    const Real focal = Real(0.5) * resolution / std::tan(fov_x / 2);
    for (int i = 0; i < count; ++i) {
        const Real az = 2 * std::numbers::pi_v<Real> * i / count;
        const Real elev = Real(0.35) * std::sin(Real(1.7) * az) + Real(0.15);
        const Vec3 eye(radius * std::cos(elev) * std::cos(az), radius * std::sin(elev),
                       radius * std::cos(elev) * std::sin(az));
        cams.push_back(Camera::look_at(eye, Vec3::Zero(), Vec3(0, 1, 0), Vec2(focal, focal),
                                       Eigen::Vector2i(resolution, resolution)));
    }
    return cams;
}

namespace io_detail {
inline ShCoefficients gray_sh() {
    return ShCoefficients(0);  // zero coefficients resolve to 0.5 gray
}

inline Vec4 rotation_about_y(Real angle) {
    return Vec4(std::cos(angle / 2), 0, std::sin(angle / 2), 0);
}
}  // namespace io_detail

/// Deterministic scenes mirroring the analysis setups: a single unit
/// Gaussian, the crossed anisotropic pair (same position, axes at 90
/// degrees), the thin/45-degree/thick triplet, and a seeded random blob
/// cloud for volumetric trend checks.
inline SyntheticScene make_synthetic(SyntheticKind kind, const SyntheticParams& params = {}) {
    SyntheticScene out;
    Scene& scene = out.scene;
    scene.background = Vec3(0, 0, 0);
    scene.theta_activation = ThetaActivation::SoftplusBeta2;
    const Real raw = activate_theta_inverse(params.theta, scene.theta_activation);

    switch (kind) {
        case SyntheticKind::SingleGaussian: {
            Gaussian3D g;
            g.log_scales = Vec3::Zero();  // unit isotropic
            g.theta_raw = raw;
            g.sh = io_detail::gray_sh();
            scene.gaussians.push_back(g);
            out.cameras = make_orbit(params.camera_count, std::max(params.orbit_radius, Real(6)),
                                     params.resolution, params.fov_x);
            break;
        }
        case SyntheticKind::CrossedPair: {
            Gaussian3D a;
            a.log_scales = Vec3(std::log(Real(0.8)), std::log(Real(0.08)), std::log(Real(0.08)));
            a.theta_raw = raw;
            a.rotation = io_detail::rotation_about_y(std::numbers::pi_v<Real> / 4);
            a.sh.set_degree(0);
            a.sh.coeffs[0][0] = Real(0.5) / sh_detail::kC0;   // red
            a.sh.coeffs[1][0] = Real(-0.5) / sh_detail::kC0;
            a.sh.coeffs[2][0] = Real(-0.5) / sh_detail::kC0;
            Gaussian3D b = a;
            b.rotation = io_detail::rotation_about_y(-std::numbers::pi_v<Real> / 4);
            b.sh.coeffs[0][0] = Real(-0.5) / sh_detail::kC0;  // blue
            b.sh.coeffs[2][0] = Real(0.5) / sh_detail::kC0;
            scene.gaussians = {a, b};
            out.cameras = make_orbit(params.camera_count, params.orbit_radius,
                                     params.resolution, params.fov_x);
            break;
        }
        case SyntheticKind::AnisotropicTriplet: {
            // Thin side, 45 degrees, thick side facing the camera rig start.
            for (int i = 0; i < 3; ++i) {
                Gaussian3D g;
                g.position = Vec3(Real(i - 1) * Real(1.2), 0, 0);
                g.log_scales =
                    Vec3(std::log(Real(0.35)), std::log(Real(0.35)), std::log(Real(0.05)));
                g.theta_raw = raw;
                g.rotation = io_detail::rotation_about_y(std::numbers::pi_v<Real> / 4 * i);
                g.sh = io_detail::gray_sh();
                scene.gaussians.push_back(g);
            }
            out.cameras = make_orbit(params.camera_count, params.orbit_radius,
                                     params.resolution, params.fov_x);
            break;
        }
        case SyntheticKind::BlobCloud: {
            std::mt19937_64 rng(params.seed);
            std::uniform_real_distribution<Real> pos(-0.4, 0.4);
            std::uniform_real_distribution<Real> logsig(std::log(Real(0.05)),
                                                        std::log(Real(0.22)));
            std::uniform_real_distribution<Real> th(0.3, 1.5);
            std::normal_distribution<Real> qn(0, 1), dc(0, 0.35), rest(0, 0.1);
            for (int i = 0; i < params.blob_count; ++i) {
                Gaussian3D g;
                g.position = Vec3(pos(rng), pos(rng), pos(rng));
                Vec4 q(qn(rng), qn(rng), qn(rng), qn(rng));
                while (q.norm() < Real(1e-3)) q = Vec4(qn(rng), qn(rng), qn(rng), qn(rng));
                g.rotation = q / q.norm();
                g.log_scales = Vec3(logsig(rng), logsig(rng), logsig(rng));
                g.theta_raw = activate_theta_inverse(th(rng), scene.theta_activation);
                g.sh.set_degree(1);
                for (int ch = 0; ch < 3; ++ch) {
                    g.sh.coeffs[ch][0] = dc(rng);
                    for (int k = 1; k < 4; ++k) g.sh.coeffs[ch][k] = rest(rng);
                }
                scene.gaussians.push_back(g);
            }
            out.cameras = make_orbit(params.camera_count, Real(2.8), params.resolution,
                                     params.fov_x);
            break;
        }
    }
    return out;
}

/// Renders ground-truth views of a scene into an in-memory dataset.
inline Dataset render_dataset(const Scene& scene, const std::vector<Camera>& cams,
                              RendererVariant gt_variant, const RenderConfig& cfg,
                              int test_every = 5) {
    Dataset data;
    data.scene_name = "synthetic";
    data.background = scene.background;
    for (size_t i = 0; i < cams.size(); ++i) {
        DatasetView view;
        view.camera = cams[i];
        view.name = "view_" + std::to_string(i);
        view.target = render_variant(scene, cams[i], gt_variant, cfg).radiance;
        if (test_every > 0 && i % test_every == test_every - 1)
            data.test.push_back(std::move(view));
        else
            data.train.push_back(std::move(view));
    }
    return data;
}

/// Writes a dataset to disk in the transforms_{train,test}.json layout.
inline void save_dataset(const Dataset& data, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    auto dump_split = [&](const std::vector<DatasetView>& views, const std::string& split) {
        if (views.empty()) return;
        fs::create_directories(fs::path(out_dir) / split);
        nlohmann::json doc;
        const Camera& c0 = views.front().camera;
        doc["camera_angle_x"] =
            2 * std::atan(Real(0.5) * c0.resolution.x() / c0.focal.x());
        doc["frames"] = nlohmann::json::array();
        for (size_t i = 0; i < views.size(); ++i) {
            const std::string rel = "./" + split + "/r_" + std::to_string(i);
            write_png((fs::path(out_dir) / (rel + ".png")).string(), views[i].target, 16);
            nlohmann::json frame;
            frame["file_path"] = rel;
            frame["transform_matrix"] = io_detail::camera_to_nerf_matrix(views[i].camera);
            doc["frames"].push_back(frame);
        }
        std::ofstream os(fs::path(out_dir) / ("transforms_" + split + ".json"));
        os << doc.dump(1);
    };
    dump_split(data.train, "train");
    dump_split(data.test, "test");
}

}  // namespace volsplat
