#pragma once

#include <Eigen/Dense>
#include <memory>
#include <string>

#include "diffslam/frame.hpp"
#include "diffslam/geometry.hpp"
#include "diffslam/io/ply.hpp"

namespace diffslam {

struct TSDFVolumeConfig {
    Eigen::Vector3d origin = Eigen::Vector3d(-1.6, -1.6, -1.6);
    double voxel_size = 0.1;
    int nx = 32, ny = 32, nz = 32;
    double mu = 0.3;  // truncation band, must be >= 2 * voxel_size
    double weight_cap = 64.0;

    void validate() const;
    Index voxel_count() const { return static_cast<Index>(nx) * ny * nz; }
};

// Dense truncated signed distance grid. Free space carries positive values,
// occluded space negative, both normalized to (-1, 1) by the smooth
// truncation.
class TSDFVolume {
public:
    explicit TSDFVolume(TSDFVolumeConfig config);

    const TSDFVolumeConfig& config() const { return config_; }
    Index voxel_count() const { return config_.voxel_count(); }
    const Tensor& tsdf() const { return tsdf_; }      // [nx,ny,nz]
    const Tensor& weight() const { return weight_; }  // [nx,ny,nz]
    const Tensor& centers() const { return centers_; }  // [N,3] world, constant

    void set_fields(Tensor tsdf, Tensor weight);

    // world points [N,3] -> continuous voxel coordinates [N,3]
    Tensor world_to_voxel(const Tensor& points) const;

    Index active_voxel_count(double weight_min = 1e-3) const;

    // Snapshot: one ASCII header line + row-major float64 tsdf and weight.
    void save(const std::string& path) const;
    static TSDFVolume load(const std::string& path);

private:
    TSDFVolumeConfig config_;
    Tensor tsdf_, weight_, centers_;
};

// Odd, strictly monotone soft truncation mapping metric distance to (-1, 1);
// calibrated so trunc_smooth(mu) = 0.95.
Tensor trunc_smooth(const Tensor& sdf_meters, double mu);
double trunc_smooth_beta();

struct TSDFMeasurement {
    Tensor sdf;     // [N] truncated values
    Tensor weight;  // [N] accumulation weights, ~0 outside the band
};

struct TSDFMeasureOptions {
    double min_cos = 0.1;  // smooth floor of the view-angle weight
};

// Projective surface measurement of one frame into the volume at `pose`
// (camera-to-world). Depth is sampled bilinearly at the subpixel projection.
TSDFMeasurement tsdf_measure(const TSDFVolume& volume, const RGBDFrame& frame,
                             const RigidTransform& pose, const TSDFMeasureOptions& options = {});

// Weighted running average with a smooth weight cap; differentiable in all
// operands.
void tsdf_fuse(TSDFVolume& volume, const TSDFMeasurement& measurement);

struct RaycastOptions {
    double step_scale = 0.5;  // fraction of voxel_size per step
    double min_depth = 0.2;
    double max_depth = 6.0;
    double sigma = -1.0;       // Gaussian ray-pooling falloff; <0 = 2 * voxel_size
    double weight_eps = 1e-3;  // samples need this much fused weight to count
    // Pooling center per pixel (e.g. the live depth map). Falls back to the
    // refined crossing depth (detached) where absent/invalid.
    const Tensor* reference_depth = nullptr;  // [H,W]
};

struct RaycastResult {
    VertexNormalMaps maps;  // camera-frame crossing points + gradient normals
    Tensor depth;           // [H,W] refined crossing depth (0 where invalid)
    Tensor aggregated;      // [H,W] Gaussian-pooled ray value
    std::vector<std::uint8_t> aggregated_valid;
};

RaycastResult raycast(const TSDFVolume& volume, const RigidTransform& pose,
                      const CameraIntrinsics& K, const RaycastOptions& options = {});

// Central-difference ray differential of Eq.-style aggregated values:
// ((v_r - v_l)/2, (v_u - v_d)/2) per ray, with one-sided substitution where a
// neighbour is invalid.
struct RayDifferentials {
    Tensor d;  // [N,2]
    std::vector<std::uint8_t> one_sided;
};
RayDifferentials ray_differential(const Tensor& v_c, const Tensor& v_l, const Tensor& v_r,
                                  const Tensor& v_u, const Tensor& v_d,
                                  const std::vector<std::uint8_t>* left_valid = nullptr,
                                  const std::vector<std::uint8_t>* right_valid = nullptr,
                                  const std::vector<std::uint8_t>* up_valid = nullptr,
                                  const std::vector<std::uint8_t>* down_valid = nullptr);

// Samples the aggregated image at (rounded) pixel coords. The backward rule
// for the coordinates is the finite-difference ray differential of the
// neighbouring aggregated values instead of the (non-existent) analytic one.
Tensor sample_aggregated_with_ray_differential(const Tensor& aggregated, const Tensor& coords,
                                               const std::vector<std::uint8_t>& aggregated_valid);

// Non-differentiable iso-surface export.
io::TriangleMesh extract_mesh(const TSDFVolume& volume, double iso = 0.0,
                              double weight_min = 1e-3);

}  // namespace diffslam
