#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "diffslam/frame.hpp"
#include "diffslam/trajectory.hpp"

namespace diffslam {

// World convention: x right, y down, z forward (camera-aligned at identity).

struct SphereShape {
    Eigen::Vector3d center = Eigen::Vector3d::Zero();
    double radius = 1.0;
    Eigen::Vector3d albedo = Eigen::Vector3d(0.8, 0.3, 0.2);
};

enum class PlaneTexture { flat, checker, sine };

struct PlaneShape {
    Eigen::Vector3d normal = Eigen::Vector3d(0, -1, 0);  // unit; plane is n . x = offset
    double offset = 1.0;
    Eigen::Vector3d albedo = Eigen::Vector3d(0.5, 0.5, 0.55);
    // optional texture in the plane's own axes; sine is smooth (useful for
    // photometric alignment), checker is hard-edged
    PlaneTexture texture = PlaneTexture::flat;
    double texture_size = 0.25;
    Eigen::Vector3d albedo2 = Eigen::Vector3d(0.15, 0.15, 0.2);
};

struct BoxShape {
    Eigen::Vector3d min = Eigen::Vector3d(-0.5, -0.5, -0.5);
    Eigen::Vector3d max = Eigen::Vector3d(0.5, 0.5, 0.5);
    Eigen::Vector3d albedo = Eigen::Vector3d(0.2, 0.5, 0.8);
};

// Depth-dependent Gaussian noise: sigma(d) = base + quad (d - ref_depth)^2.
struct DepthNoiseModel {
    double base = 0.0;
    double quad = 0.0;
    double ref_depth = 0.4;
    double sigma(double d) const { return base + quad * (d - ref_depth) * (d - ref_depth); }
    bool enabled() const { return base > 0.0 || quad > 0.0; }
};

struct SyntheticScene {
    std::vector<SphereShape> spheres;
    std::vector<PlaneShape> planes;
    std::vector<BoxShape> boxes;
    Trajectory trajectory;  // camera-to-world per frame
    CameraIntrinsics intrinsics;
    DepthNoiseModel noise;
    std::uint64_t seed = 0;
    double max_depth = 10.0;

    // Throws if the camera enters a primitive.
    void validate() const;

    static SyntheticScene load(const std::string& path);
    void save(const std::string& path) const;

    // Named test scenes: "sphere" (unit sphere + ground plane + box, orbit
    // arc), "plane" (checkered wall + box, lateral dolly), "corner" (two
    // walls + floor, yaw sweep).
    static SyntheticScene builtin(const std::string& name, int frames = 20);
};

struct RenderedFrame {
    RGBDFrame frame;
    Eigen::Matrix4d pose;  // camera-to-world ground truth
};

// Analytic ray casting + Lambertian-ish shading; deterministic given
// (scene, frame_index) including the optional depth noise.
RenderedFrame render_synthetic(const SyntheticScene& scene, size_t frame_index);

enum class PerturbationKind { occluder, pixel_noise, uniform_noise };

struct PixelRegion {
    int x = 0, y = 0, w = 0, h = 0;
    bool empty() const { return w <= 0 || h <= 0; }
};

// occluder: depth in the region set to a constant 0.5 m near plane.
// pixel_noise: seeded Gaussian with std `amount` added to region depth.
// uniform_noise: region depth ~ U(0.3, 3.0) and color ~ U(0,1), seeded.
RGBDFrame apply_perturbation(const RGBDFrame& frame, PerturbationKind kind,
                             const PixelRegion& region, std::uint64_t seed,
                             double amount = 0.05);

// Camera-to-world pose looking from `eye` toward `target` (y-down world).
Eigen::Matrix4d look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target);

}  // namespace diffslam
