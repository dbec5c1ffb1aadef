#include "diffslam/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <json.hpp>

namespace diffslam {

namespace {

struct Hit {
    double depth = -1.0;  // camera-frame z (== ray parameter with unit-z dirs)
    Eigen::Vector3d normal = Eigen::Vector3d::Zero();
    Eigen::Vector3d albedo = Eigen::Vector3d::Zero();
    bool valid() const { return depth > 0.0; }
};

constexpr double kRayEps = 1e-6;

void consider(Hit& best, double s, const Eigen::Vector3d& n, const Eigen::Vector3d& albedo) {
    if (s <= kRayEps) return;
    if (!best.valid() || s < best.depth) {
        best.depth = s;
        best.normal = n;
        best.albedo = albedo;
    }
}

Eigen::Vector3d textured_albedo(const PlaneShape& pl, const Eigen::Vector3d& p) {
    if (pl.texture == PlaneTexture::flat) return pl.albedo;
    Eigen::Vector3d ref = std::abs(pl.normal.y()) < 0.9 ? Eigen::Vector3d(0, 1, 0)
                                                        : Eigen::Vector3d(1, 0, 0);
    Eigen::Vector3d u = pl.normal.cross(ref).normalized();
    Eigen::Vector3d v = pl.normal.cross(u);
    const double tu = p.dot(u), tv = p.dot(v);
    if (pl.texture == PlaneTexture::checker) {
        const auto cell = [&](double t) {
            return static_cast<long long>(std::floor(t / pl.texture_size));
        };
        const bool odd = ((cell(tu) + cell(tv)) & 1) != 0;
        return odd ? pl.albedo2 : pl.albedo;
    }
    // smooth blend between the two albedos
    const double s = 0.5 + 0.5 * std::sin(2 * M_PI * tu / pl.texture_size) *
                               std::sin(2 * M_PI * tv / pl.texture_size);
    return pl.albedo + s * (pl.albedo2 - pl.albedo);
}

void intersect_sphere(Hit& best, const SphereShape& sp, const Eigen::Vector3d& o,
                      const Eigen::Vector3d& d) {
    const Eigen::Vector3d oc = o - sp.center;
    const double a = d.squaredNorm();
    const double b = 2.0 * d.dot(oc);
    const double c = oc.squaredNorm() - sp.radius * sp.radius;
    const double disc = b * b - 4 * a * c;
    if (disc < 0) return;
    const double root = std::sqrt(disc);
    double s = (-b - root) / (2 * a);
    if (s <= kRayEps) s = (-b + root) / (2 * a);
    if (s <= kRayEps) return;
    const Eigen::Vector3d p = o + s * d;
    consider(best, s, (p - sp.center).normalized(), sp.albedo);
}

void intersect_plane(Hit& best, const PlaneShape& pl, const Eigen::Vector3d& o,
                     const Eigen::Vector3d& d) {
    const double denom = pl.normal.dot(d);
    if (std::abs(denom) < 1e-12) return;
    const double s = (pl.offset - pl.normal.dot(o)) / denom;
    if (s <= kRayEps) return;
    const Eigen::Vector3d p = o + s * d;
    Eigen::Vector3d n = denom > 0 ? Eigen::Vector3d(-pl.normal) : pl.normal;
    consider(best, s, n, textured_albedo(pl, p));
}

void intersect_box(Hit& best, const BoxShape& bx, const Eigen::Vector3d& o,
                   const Eigen::Vector3d& d) {
    double tmin = -std::numeric_limits<double>::infinity();
    double tmax = std::numeric_limits<double>::infinity();
    int axis = -1;
    for (int i = 0; i < 3; ++i) {
        if (std::abs(d[i]) < 1e-12) {
            if (o[i] < bx.min[i] || o[i] > bx.max[i]) return;
            continue;
        }
        double t0 = (bx.min[i] - o[i]) / d[i];
        double t1 = (bx.max[i] - o[i]) / d[i];
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > tmin) {
            tmin = t0;
            axis = i;
        }
        tmax = std::min(tmax, t1);
        if (tmin > tmax) return;
    }
    if (tmin <= kRayEps || axis < 0) return;
    Eigen::Vector3d n = Eigen::Vector3d::Zero();
    n[axis] = d[axis] > 0 ? -1.0 : 1.0;
    consider(best, tmin, n, bx.albedo);
}

std::uint64_t frame_seed(std::uint64_t scene_seed, size_t frame_index) {
    return scene_seed ^ (0x9e3779b97f4a7c15ULL * (static_cast<std::uint64_t>(frame_index) + 1));
}

}  // namespace

Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target) {
    Eigen::Vector3d z = (target - eye).normalized();
    Eigen::Vector3d down(0, 1, 0);
    Eigen::Vector3d x = down.cross(z);
    if (x.norm() < 1e-9) x = Eigen::Vector3d(1, 0, 0);
    x.normalize();
    Eigen::Vector3d y = z.cross(x);
    Eigen::Matrix4d T = Eigen::Matrix4d::Identity();
    T.block<3, 1>(0, 0) = x;
    T.block<3, 1>(0, 1) = y;
    T.block<3, 1>(0, 2) = z;
    T.block<3, 1>(0, 3) = eye;
    return T;
}

void SyntheticScene::validate() const {
    intrinsics.validate();
    if (trajectory.empty()) throw ContractError("synthetic scene: empty trajectory");
    for (const TimedPose& tp : trajectory.poses) {
        const Eigen::Vector3d eye = tp.pose.block<3, 1>(0, 3);
        for (const SphereShape& sp : spheres)
            if ((eye - sp.center).norm() <= sp.radius)
                throw ContractError("synthetic scene: camera inside a sphere");
        for (const BoxShape& bx : boxes)
            if ((eye.array() >= bx.min.array()).all() && (eye.array() <= bx.max.array()).all())
                throw ContractError("synthetic scene: camera inside a box");
    }
}

RenderedFrame render_synthetic(const SyntheticScene& scene, size_t frame_index) {
    if (frame_index >= scene.trajectory.size())
        throw ContractError("render_synthetic: frame index out of range");
    const CameraIntrinsics& K = scene.intrinsics;
    const TimedPose& tp = scene.trajectory.poses[frame_index];
    const Eigen::Matrix3d R = tp.pose.block<3, 3>(0, 0);
    const Eigen::Vector3d o = tp.pose.block<3, 1>(0, 3);

    const Index h = K.height, w = K.width;
    std::vector<double> depth(static_cast<size_t>(h * w), 0.0);
    std::vector<double> color(static_cast<size_t>(h * w * 3), 0.0);

    for (Index v = 0; v < h; ++v) {
        for (Index u = 0; u < w; ++u) {
            Eigen::Vector3d dc((u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0);
            Eigen::Vector3d d = R * dc;
            Hit hit;
            for (const SphereShape& sp : scene.spheres) intersect_sphere(hit, sp, o, d);
            for (const PlaneShape& pl : scene.planes) intersect_plane(hit, pl, o, d);
            for (const BoxShape& bx : scene.boxes) intersect_box(hit, bx, o, d);
            if (!hit.valid() || hit.depth > scene.max_depth) continue;
            const size_t p = static_cast<size_t>(v * w + u);
            depth[p] = hit.depth;
            const Eigen::Vector3d view = -d.normalized();
            const double lambert = std::max(0.0, hit.normal.dot(view));
            for (int c = 0; c < 3; ++c)
                color[p * 3 + c] = std::clamp(hit.albedo[c] * (0.25 + 0.75 * lambert), 0.0, 1.0);
        }
    }

    if (scene.noise.enabled()) {
        std::mt19937_64 rng(frame_seed(scene.seed, frame_index));
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (size_t p = 0; p < depth.size(); ++p) {
            const double n = gauss(rng);  // drawn for every pixel: count is layout-stable
            if (depth[p] > 0.0) depth[p] = std::max(1e-3, depth[p] + scene.noise.sigma(depth[p]) * n);
        }
    }

    RenderedFrame out;
    out.pose = tp.pose;
    out.frame.timestamp = tp.timestamp;
    out.frame.intrinsics = K;
    out.frame.depth = Tensor::constant({h, w}, std::move(depth));
    out.frame.color = Tensor::constant({h, w, 3}, std::move(color));
    out.frame.refresh_valid();
    return out;
}

RGBDFrame apply_perturbation(const RGBDFrame& frame, PerturbationKind kind,
                             const PixelRegion& region, std::uint64_t seed, double amount) {
    RGBDFrame out = frame;
    if (region.empty()) return out;
    const Index h = frame.height(), w = frame.width();
    if (region.x < 0 || region.y < 0 || region.x + region.w > w || region.y + region.h > h)
        throw ContractError("apply_perturbation: region out of bounds");

    std::vector<double> depth = frame.depth.to_vector();
    std::vector<double> color = frame.color.to_vector();
    std::mt19937_64 rng(seed);

    for (Index i = region.y; i < region.y + region.h; ++i) {
        for (Index j = region.x; j < region.x + region.w; ++j) {
            const size_t p = static_cast<size_t>(i * w + j);
            switch (kind) {
                case PerturbationKind::occluder:
                    depth[p] = 0.5;
                    for (int c = 0; c < 3; ++c) color[p * 3 + c] = 0.35;
                    break;
                case PerturbationKind::pixel_noise: {
                    std::normal_distribution<double> gauss(0.0, amount);
                    if (depth[p] > 0.0) depth[p] = std::max(1e-3, depth[p] + gauss(rng));
                    break;
                }
                case PerturbationKind::uniform_noise: {
                    std::uniform_real_distribution<double> ud(0.3, 3.0);
                    std::uniform_real_distribution<double> uc(0.0, 1.0);
                    depth[p] = ud(rng);
                    for (int c = 0; c < 3; ++c) color[p * 3 + c] = uc(rng);
                    break;
                }
            }
        }
    }
    out.depth = Tensor::constant(frame.depth.shape(), std::move(depth));
    out.color = Tensor::constant(frame.color.shape(), std::move(color));
    out.refresh_valid();
    return out;
}

namespace {

nlohmann::json vec_json(const Eigen::Vector3d& v) { return {v.x(), v.y(), v.z()}; }
Eigen::Vector3d json_vec(const nlohmann::json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

}  // namespace

SyntheticScene SyntheticScene::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("synthetic scene: cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("synthetic scene: malformed JSON in " + path + ": " + e.what());
    }
    SyntheticScene s;
    const auto& cam = j.at("camera");
    s.intrinsics.fx = cam.at("fx").get<double>();
    s.intrinsics.fy = cam.at("fy").get<double>();
    s.intrinsics.cx = cam.at("cx").get<double>();
    s.intrinsics.cy = cam.at("cy").get<double>();
    s.intrinsics.width = cam.at("width").get<int>();
    s.intrinsics.height = cam.at("height").get<int>();
    if (cam.contains("depth_scale")) s.intrinsics.depth_scale = cam.at("depth_scale").get<double>();
    for (const auto& e : j.value("spheres", nlohmann::json::array())) {
        SphereShape sp;
        sp.center = json_vec(e.at("center"));
        sp.radius = e.at("radius").get<double>();
        if (e.contains("albedo")) sp.albedo = json_vec(e.at("albedo"));
        s.spheres.push_back(sp);
    }
    for (const auto& e : j.value("planes", nlohmann::json::array())) {
        PlaneShape pl;
        pl.normal = json_vec(e.at("normal")).normalized();
        pl.offset = e.at("offset").get<double>();
        if (e.contains("albedo")) pl.albedo = json_vec(e.at("albedo"));
        const std::string tex = e.value("texture", e.value("checker", false) ? "checker" : "flat");
        pl.texture = tex == "checker"  ? PlaneTexture::checker
                     : tex == "sine"   ? PlaneTexture::sine
                                       : PlaneTexture::flat;
        pl.texture_size = e.value("texture_size", e.value("checker_size", 0.25));
        if (e.contains("albedo2")) pl.albedo2 = json_vec(e.at("albedo2"));
        s.planes.push_back(pl);
    }
    for (const auto& e : j.value("boxes", nlohmann::json::array())) {
        BoxShape bx;
        bx.min = json_vec(e.at("min"));
        bx.max = json_vec(e.at("max"));
        if (e.contains("albedo")) bx.albedo = json_vec(e.at("albedo"));
        s.boxes.push_back(bx);
    }
    const auto& tr = j.at("trajectory");
    const std::string type = tr.value("type", "poses");
    const double fps = tr.value("fps", 30.0);
    if (type == "orbit") {
        const Eigen::Vector3d center = tr.contains("center") ? json_vec(tr.at("center"))
                                                             : Eigen::Vector3d::Zero();
        const double radius = tr.at("radius").get<double>();
        const double height = tr.value("height", 0.0);
        const double arc = tr.value("arc_degrees", 48.0) * M_PI / 180.0;
        const int frames = tr.at("frames").get<int>();
        for (int i = 0; i < frames; ++i) {
            const double t = frames > 1 ? static_cast<double>(i) / (frames - 1) : 0.5;
            const double a = -arc / 2 + arc * t;
            Eigen::Vector3d eye = center + Eigen::Vector3d(radius * std::sin(a), height,
                                                           -radius * std::cos(a));
            TimedPose tp;
            tp.timestamp = i / fps;
            tp.pose = look_at(eye, center);
            s.trajectory.poses.push_back(tp);
        }
    } else if (type == "poses") {
        int i = 0;
        for (const auto& e : tr.at("poses")) {
            TimedPose tp;
            tp.timestamp = i / fps;
            for (int r = 0; r < 4; ++r)
                for (int c = 0; c < 4; ++c) tp.pose(r, c) = e.at(r * 4 + c).get<double>();
            s.trajectory.poses.push_back(tp);
            ++i;
        }
    } else {
        throw IoError("synthetic scene: unknown trajectory type '" + type + "'");
    }
    if (j.contains("noise")) {
        s.noise.base = j.at("noise").value("base", 0.0);
        s.noise.quad = j.at("noise").value("quad", 0.0);
        s.noise.ref_depth = j.at("noise").value("ref_depth", 0.4);
    }
    s.seed = j.value("seed", 0ULL);
    s.max_depth = j.value("max_depth", 10.0);
    s.validate();
    return s;
}

void SyntheticScene::save(const std::string& path) const {
    nlohmann::json j;
    j["camera"] = {{"fx", intrinsics.fx}, {"fy", intrinsics.fy}, {"cx", intrinsics.cx},
                   {"cy", intrinsics.cy}, {"width", intrinsics.width},
                   {"height", intrinsics.height}, {"depth_scale", intrinsics.depth_scale}};
    for (const auto& sp : spheres)
        j["spheres"].push_back({{"center", vec_json(sp.center)}, {"radius", sp.radius},
                                {"albedo", vec_json(sp.albedo)}});
    for (const auto& pl : planes)
        j["planes"].push_back(
            {{"normal", vec_json(pl.normal)},
             {"offset", pl.offset},
             {"albedo", vec_json(pl.albedo)},
             {"texture", pl.texture == PlaneTexture::checker ? "checker"
                         : pl.texture == PlaneTexture::sine  ? "sine"
                                                             : "flat"},
             {"texture_size", pl.texture_size},
             {"albedo2", vec_json(pl.albedo2)}});
    for (const auto& bx : boxes)
        j["boxes"].push_back({{"min", vec_json(bx.min)}, {"max", vec_json(bx.max)},
                              {"albedo", vec_json(bx.albedo)}});
    nlohmann::json poses = nlohmann::json::array();
    for (const auto& tp : trajectory.poses) {
        nlohmann::json m = nlohmann::json::array();
        for (int r = 0; r < 4; ++r)
            for (int c = 0; c < 4; ++c) m.push_back(tp.pose(r, c));
        poses.push_back(m);
    }
    j["trajectory"] = {{"type", "poses"}, {"poses", poses}};
    j["noise"] = {{"base", noise.base}, {"quad", noise.quad}, {"ref_depth", noise.ref_depth}};
    j["seed"] = seed;
    j["max_depth"] = max_depth;
    std::ofstream out(path);
    if (!out) throw IoError("synthetic scene: cannot write " + path);
    out << j.dump(2) << "\n";
}

SyntheticScene SyntheticScene::builtin(const std::string& name, int frames) {
    SyntheticScene s;
    s.intrinsics.fx = 60.0;
    s.intrinsics.fy = 60.0;
    s.intrinsics.cx = 31.5;
    s.intrinsics.cy = 31.5;
    s.intrinsics.width = 64;
    s.intrinsics.height = 64;
    const double fps = 30.0;

    if (name == "sphere") {
        s.spheres.push_back({Eigen::Vector3d(0, 0, 0), 1.0, Eigen::Vector3d(0.8, 0.35, 0.25)});
        PlaneShape ground;
        ground.normal = Eigen::Vector3d(0, 1, 0);
        ground.offset = 1.0;  // y = 1, touching the sphere bottom
        ground.texture = PlaneTexture::checker;
        ground.texture_size = 0.5;
        s.planes.push_back(ground);
        s.boxes.push_back({Eigen::Vector3d(1.2, 0.2, -0.4), Eigen::Vector3d(1.9, 1.0, 0.4),
                           Eigen::Vector3d(0.25, 0.5, 0.8)});
        const double arc = 24.0 * M_PI / 180.0;
        for (int i = 0; i < frames; ++i) {
            const double t = frames > 1 ? static_cast<double>(i) / (frames - 1) : 0.5;
            const double a = -arc / 2 + arc * t;
            Eigen::Vector3d eye(3.0 * std::sin(a), -0.4, -3.0 * std::cos(a));
            TimedPose tp;
            tp.timestamp = i / fps;
            tp.pose = look_at(eye, Eigen::Vector3d::Zero());
            s.trajectory.poses.push_back(tp);
        }
    } else if (name == "plane") {
        PlaneShape wall;
        wall.normal = Eigen::Vector3d(0, 0, 1);
        wall.offset = 2.2;  // z = 2.2 facing the camera
        wall.texture = PlaneTexture::sine;
        wall.texture_size = 0.6;
        wall.albedo = Eigen::Vector3d(0.75, 0.7, 0.6);
        wall.albedo2 = Eigen::Vector3d(0.2, 0.25, 0.35);
        s.planes.push_back(wall);
        s.boxes.push_back({Eigen::Vector3d(0.3, 0.2, 1.7), Eigen::Vector3d(0.95, 0.9, 2.2),
                           Eigen::Vector3d(0.3, 0.6, 0.3)});
        for (int i = 0; i < frames; ++i) {
            TimedPose tp;
            tp.timestamp = i / fps;
            tp.pose = Eigen::Matrix4d::Identity();
            tp.pose(0, 3) = 0.01 * i;  // 1 cm lateral dolly per frame
            s.trajectory.poses.push_back(tp);
        }
    } else if (name == "corner") {
        PlaneShape back;
        back.normal = Eigen::Vector3d(0, 0, 1);
        back.offset = 3.0;
        back.texture = PlaneTexture::sine;
        back.texture_size = 0.8;
        s.planes.push_back(back);
        PlaneShape left;
        left.normal = Eigen::Vector3d(1, 0, 0);
        left.offset = -1.5;  // x = -1.5
        left.albedo = Eigen::Vector3d(0.6, 0.4, 0.3);
        s.planes.push_back(left);
        PlaneShape floor;
        floor.normal = Eigen::Vector3d(0, 1, 0);
        floor.offset = 1.2;  // y = 1.2
        floor.albedo = Eigen::Vector3d(0.4, 0.45, 0.4);
        s.planes.push_back(floor);
        for (int i = 0; i < frames; ++i) {
            TimedPose tp;
            tp.timestamp = i / fps;
            const double yaw = (2.0 * M_PI / 180.0) * i;
            tp.pose = Eigen::Matrix4d::Identity();
            tp.pose.block<3, 3>(0, 0) =
                Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitY()).toRotationMatrix();
            s.trajectory.poses.push_back(tp);
        }
    } else {
        throw ContractError("unknown builtin scene '" + name + "'");
    }
    s.validate();
    return s;
}

}  // namespace diffslam
