#pragma once

#include <memory>
#include <vector>

#include "diffslam/dataset.hpp"
#include "diffslam/odometry.hpp"
#include "diffslam/surfel.hpp"
#include "diffslam/trajectory.hpp"
#include "diffslam/tsdf.hpp"

namespace diffslam {

struct PipelineOptions {
    IcpOptions icp;
    TSDFVolumeConfig volume;
    RaycastOptions raycast;
    AssociationOptions assoc;  // sigma <= 0 picks 2x the depth noise scale
    SurfelOptions surfel;
    double icp_slam_voxel = 0.01;  // model subsample cell (meters)
    std::uint64_t seed = 0;

    // When set, every frame's depth (and color unless depth_only) is
    // re-registered as a leaf of this tape before the run.
    Tape* tape = nullptr;
    bool depth_only_tape = true;

    // Mapping-only mode: skip tracking and take poses from `gt`.
    bool use_gt_poses = false;
    const Trajectory* gt = nullptr;

    // Recompute-instead-of-store for the per-frame mapping stage.
    bool checkpoint_mapping = false;

    PipelineOptions() { assoc.sigma = -1.0; }
};

struct PipelineResult {
    Trajectory trajectory;              // detached camera-to-world poses
    std::vector<RigidTransform> poses;  // same poses, on-tape
    SurfelMap map;                      // pointfusion map / icp-slam cloud
    std::shared_ptr<TSDFVolume> volume; // kinectfusion
    std::vector<double> inlier_fractions;
};

std::vector<RGBDFrame> load_frames(const SequenceLoader& loader);

// Frame-to-frame point-to-plane alignment chained into a trajectory.
PipelineResult run_icp_odometry(const std::vector<RGBDFrame>& frames,
                                const PipelineOptions& options = {});

// Frame-to-model alignment against the accumulated global pointcloud,
// subsampled on a voxel hash before association.
PipelineResult run_icp_slam(const std::vector<RGBDFrame>& frames,
                            const PipelineOptions& options = {});

// Surfel map building with confidence-weighted fusion; tracking is
// frame-to-model against the rendered surfel map.
PipelineResult run_pointfusion(const std::vector<RGBDFrame>& frames,
                               const PipelineOptions& options = {});

// Alternating raycast -> point-to-plane tracking -> volumetric fusion.
PipelineResult run_kinectfusion(const std::vector<RGBDFrame>& frames,
                                const PipelineOptions& options = {});

}  // namespace diffslam
