#pragma once

#include "diffslam/frame.hpp"
#include "diffslam/geometry.hpp"
#include "diffslam/least_squares.hpp"

namespace diffslam {

struct IcpOptions {
    int iters = 10;
    GatingParams gating;
    double distance_gate = 0.1;    // meters; soft outlier gate midpoint
    double angle_gate_deg = 30.0;  // normal compatibility gate midpoint
    double gate_steepness = 50.0;
    Index min_points = 6;
    double degenerate_rcond = 1e-10;  // JtJ eigenvalue ratio below this throws
};

struct OdometryEstimate {
    RigidTransform transform;  // maps source-camera points into the target camera
    SolverTrace trace;
    double inlier_fraction = 0.0;
};

// Dense point-to-plane alignment with projective association: each source
// point is projected into the target view and compared against the
// bilinearly sampled target vertex/normal there. Outliers are attenuated by
// smooth logistic gates, never hard-rejected, and the solve is the unrolled
// smooth trust-region optimizer, so the estimate is differentiable w.r.t.
// both frames' tensors.
OdometryEstimate icp_point_to_plane(const VertexNormalMaps& source,
                                    const VertexNormalMaps& target, const CameraIntrinsics& K,
                                    const RigidTransform& T_init = RigidTransform(),
                                    const IcpOptions& options = {});

struct PhotometricOptions {
    int iters = 10;
    int pyramid_levels = 3;
    GatingParams gating;
    Index min_points = 32;
};

// Coarse-to-fine dense intensity alignment (depth-based warping of the source
// frame into the target image).
OdometryEstimate photometric_odometry(const RGBDFrame& source, const RGBDFrame& target,
                                      const RigidTransform& T_init = RigidTransform(),
                                      const PhotometricOptions& options = {});

}  // namespace diffslam
