#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

#include "diffslam/ops.hpp"
#include "diffslam/tensor.hpp"

namespace diffslam {

struct CameraIntrinsics {
    double fx = 0, fy = 0;
    double cx = 0, cy = 0;
    int width = 0, height = 0;
    double depth_scale = 1.0 / 5000.0;  // meters per stored depth unit

    void validate() const;
    // Intrinsics for the image downsampled by an integer factor.
    CameraIntrinsics scaled(int factor) const;

    // Sidecar: either "fx fy cx cy width height depth_scale" plain text or a
    // JSON object with the same keys.
    static CameraIntrinsics load(const std::string& path);
    void save(const std::string& path) const;
};

// SE(3) element wrapped around a 4x4 homogeneous matrix tensor, possibly on
// tape. Twist coordinates are ordered (omega, v).
class RigidTransform {
public:
    RigidTransform();  // identity
    explicit RigidTransform(Tensor matrix4x4);
    static RigidTransform from_eigen(const Eigen::Matrix4d& m);

    const Tensor& matrix() const { return mat_; }
    Tensor rotation() const;     // [3,3]
    Tensor translation() const;  // [3]

    RigidTransform inverse() const;
    RigidTransform operator*(const RigidTransform& rhs) const;

    // Applies R p + t to each row of a [N,3] tensor.
    Tensor apply(const Tensor& points) const;

    Eigen::Matrix4d to_eigen() const;

private:
    Tensor mat_;
};

// Rodrigues exponential; switches to a 2nd-order Taylor branch below 1e-6 rad
// so the gradient stays finite through omega = 0.
Tensor so3_hat(const Tensor& omega);
Tensor so3_exp(const Tensor& omega);

RigidTransform se3_exp(const Tensor& twist);
// Throws SingularityError when the rotation angle exceeds pi - 1e-6.
Tensor se3_log(const RigidTransform& T);

struct VertexNormalMaps {
    Tensor vertices;                  // [H,W,3] camera-frame meters
    Tensor normals;                   // [H,W,3] unit where valid
    std::vector<std::uint8_t> valid;  // H*W
    int height = 0, width = 0;

    std::vector<Index> valid_indices() const;
    Index valid_count() const;
};

struct ProjectResult {
    Tensor coords;                    // [N,2] subpixel (u,v)
    Tensor depth;                     // [N] camera-frame z
    std::vector<std::uint8_t> valid;  // z > 1e-6 and inside image
};

// Projects camera-frame or world points through T into the image plane of K.
// Subpixel output feeds gather_bilinear; nothing is floored.
ProjectResult transform_project(const Tensor& points, const RigidTransform& T,
                                const CameraIntrinsics& K);

// Dense pixel->ray direction table (K^-1 [u,v,1]) as a constant [H,W,3].
Tensor backproject_directions(const CameraIntrinsics& K);

// Per-row cross product of [N,3] tensors.
Tensor cross_rows(const Tensor& a, const Tensor& b);
// Row-wise normalization with invalid rows (norm < eps) pinned to zero.
Tensor normalize_rows(const Tensor& v, std::vector<std::uint8_t>* valid_out = nullptr,
                      double eps = 1e-12);

}  // namespace diffslam
