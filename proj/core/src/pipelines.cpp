#include "diffslam/pipelines.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "diffslam/mapping.hpp"

namespace diffslam {

namespace {

double median_valid_depth(const RGBDFrame& frame) {
    std::vector<double> depths;
    auto d = frame.depth.data();
    for (Index i = 0; i < frame.depth.numel(); ++i)
        if (frame.valid[static_cast<size_t>(i)]) depths.push_back(d[i]);
    if (depths.empty()) return 1.0;
    std::nth_element(depths.begin(), depths.begin() + static_cast<long>(depths.size() / 2),
                     depths.end());
    return depths[depths.size() / 2];
}

AssociationOptions resolve_assoc(const PipelineOptions& options, const RGBDFrame& first) {
    AssociationOptions a = options.assoc;
    if (a.sigma <= 0) a.sigma = 2.0 * depth_noise_sigma(median_valid_depth(first));
    return a;
}

std::vector<RGBDFrame> tape_frames(const std::vector<RGBDFrame>& frames,
                                   const PipelineOptions& options) {
    if (!options.tape) return frames;
    std::vector<RGBDFrame> out;
    out.reserve(frames.size());
    for (const RGBDFrame& f : frames) out.push_back(f.on_tape(*options.tape, options.depth_only_tape));
    return out;
}

RigidTransform gt_pose(const PipelineOptions& options, size_t k) {
    if (!options.gt || k >= options.gt->size())
        throw ContractError("pipeline: use_gt_poses set but ground truth is missing frame " +
                            std::to_string(k));
    return RigidTransform::from_eigen(options.gt->poses[k].pose);
}

void push_pose(PipelineResult& result, const RigidTransform& pose, double timestamp) {
    result.poses.push_back(pose);
    result.trajectory.poses.push_back({timestamp, pose.to_eigen()});
}

}  // namespace

std::vector<RGBDFrame> load_frames(const SequenceLoader& loader) {
    std::vector<RGBDFrame> frames;
    frames.reserve(loader.size());
    for (size_t i = 0; i < loader.size(); ++i) frames.push_back(loader.frame(i));
    return frames;
}

PipelineResult run_icp_odometry(const std::vector<RGBDFrame>& frames,
                                const PipelineOptions& options) {
    if (frames.size() < 2) throw ContractError("icp odometry: needs at least two frames");
    std::vector<RGBDFrame> seq = tape_frames(frames, options);

    PipelineResult result;
    RigidTransform world = options.use_gt_poses ? gt_pose(options, 0) : RigidTransform();
    push_pose(result, world, seq[0].timestamp);

    VertexNormalMaps prev_maps = compute_vertex_normal_maps(seq[0]);
    RigidTransform velocity;  // constant-velocity initial guess
    for (size_t k = 1; k < seq.size(); ++k) {
        VertexNormalMaps live = compute_vertex_normal_maps(seq[k]);
        if (options.use_gt_poses) {
            world = gt_pose(options, k);
        } else {
            try {
                OdometryEstimate est =
                    icp_point_to_plane(live, prev_maps, seq[k].intrinsics, velocity, options.icp);
                result.inlier_fractions.push_back(est.inlier_fraction);
                world = world * est.transform;
                velocity = est.transform;
            } catch (const Error& e) {
                throw InsufficientOverlapError("icp odometry failed at frame " +
                                               std::to_string(k) + ": " + e.what());
            }
        }
        push_pose(result, world, seq[k].timestamp);
        prev_maps = std::move(live);
    }
    return result;
}

namespace {

// deterministic voxel-hash subsample: first point per cell wins
std::vector<Index> voxel_subsample(const Tensor& positions, double cell) {
    std::map<std::tuple<long long, long long, long long>, Index> cells;
    std::vector<Index> keep;
    auto pd = positions.data();
    const Index n = positions.dim(0);
    for (Index i = 0; i < n; ++i) {
        const auto key = std::make_tuple(static_cast<long long>(std::floor(pd[3 * i] / cell)),
                                         static_cast<long long>(std::floor(pd[3 * i + 1] / cell)),
                                         static_cast<long long>(std::floor(pd[3 * i + 2] / cell)));
        if (cells.emplace(key, i).second) keep.push_back(i);
    }
    return keep;
}

SurfelMap as_point_model(const Tensor& positions, const Tensor& normals) {
    SurfelMap model;
    const Index n = positions.dim(0);
    model.positions = positions;
    model.normals = normals;
    model.colors = Tensor::full({n, 3}, 0.5);
    model.radii = Tensor::full({n}, 0.005);
    model.confidences = Tensor::full({n}, 1.0);
    model.last_seen.assign(static_cast<size_t>(n), 0);
    return model;
}

}  // namespace

PipelineResult run_icp_slam(const std::vector<RGBDFrame>& frames, const PipelineOptions& options) {
    if (frames.size() < 2) throw ContractError("icp slam: needs at least two frames");
    std::vector<RGBDFrame> seq = tape_frames(frames, options);

    PipelineResult result;
    RigidTransform world = options.use_gt_poses ? gt_pose(options, 0) : RigidTransform();
    push_pose(result, world, seq[0].timestamp);

    // global model: world-frame points + normals accumulated so far
    Tensor model_pts, model_nrm;
    auto append_frame = [&](const RGBDFrame& frame, const VertexNormalMaps& maps,
                            const RigidTransform& pose) {
        std::vector<Index> px = maps.valid_indices();
        if (px.empty()) return;
        const Index hw = static_cast<Index>(maps.height) * maps.width;
        Tensor pts = pose.apply(gather_rows(maps.vertices.reshape({hw, 3}), px));
        Tensor nrm = matmul(gather_rows(maps.normals.reshape({hw, 3}), px),
                            transpose(pose.rotation()));
        model_pts = model_pts.defined() ? concat({model_pts, pts}, 0) : pts;
        model_nrm = model_nrm.defined() ? concat({model_nrm, nrm}, 0) : nrm;
        std::vector<Index> keep = voxel_subsample(model_pts, options.icp_slam_voxel);
        model_pts = gather_rows(model_pts, keep);
        model_nrm = gather_rows(model_nrm, keep);
    };

    VertexNormalMaps first_maps = compute_vertex_normal_maps(seq[0]);
    append_frame(seq[0], first_maps, world);

    RigidTransform velocity;
    for (size_t k = 1; k < seq.size(); ++k) {
        VertexNormalMaps live = compute_vertex_normal_maps(seq[k]);
        if (options.use_gt_poses) {
            world = gt_pose(options, k);
        } else {
            SurfelMap model = as_point_model(model_pts, model_nrm);
            VertexNormalMaps target = render_surfel_maps(model, world, seq[k].intrinsics);
            try {
                OdometryEstimate est = icp_point_to_plane(live, target, seq[k].intrinsics,
                                                          velocity, options.icp);
                result.inlier_fractions.push_back(est.inlier_fraction);
                world = world * est.transform;
                velocity = est.transform;
            } catch (const Error& e) {
                throw InsufficientOverlapError("icp slam failed at frame " + std::to_string(k) +
                                               ": " + e.what());
            }
        }
        append_frame(seq[k], live, world);
        push_pose(result, world, seq[k].timestamp);
    }
    result.map = as_point_model(model_pts, model_nrm);
    return result;
}

PipelineResult run_pointfusion(const std::vector<RGBDFrame>& frames,
                               const PipelineOptions& options) {
    if (frames.empty()) throw ContractError("pointfusion: needs at least one frame");
    std::vector<RGBDFrame> seq = tape_frames(frames, options);
    AssociationOptions assoc_opt = resolve_assoc(options, seq[0]);

    PipelineResult result;
    SurfelMap map;
    RigidTransform world = options.use_gt_poses ? gt_pose(options, 0) : RigidTransform();
    RigidTransform velocity;

    for (size_t k = 0; k < seq.size(); ++k) {
        VertexNormalMaps live = compute_vertex_normal_maps(seq[k]);
        if (k > 0) {
            if (options.use_gt_poses) {
                world = gt_pose(options, k);
            } else {
                VertexNormalMaps target = render_surfel_maps(map, world, seq[k].intrinsics);
                try {
                    OdometryEstimate est = icp_point_to_plane(live, target, seq[k].intrinsics,
                                                              velocity, options.icp);
                    result.inlier_fractions.push_back(est.inlier_fraction);
                    world = world * est.transform;
                    velocity = est.transform;
                } catch (const Error& e) {
                    throw InsufficientOverlapError("pointfusion failed at frame " +
                                                   std::to_string(k) + ": " + e.what());
                }
            }
        }
        SurfelBatch batch = surfels_from_frame(seq[k], live, world, options.surfel);
        SoftAssociation assoc;
        if (!map.empty()) {
            ActiveSet active = frustum_cull(map.positions, world, seq[k].intrinsics, &live.valid);
            assoc = soft_associate(live, active, seq[k].intrinsics, assoc_opt);
        }
        map = surfel_fuse(map, batch, assoc, static_cast<int>(k));
        push_pose(result, world, seq[k].timestamp);
    }
    result.map = std::move(map);
    return result;
}

PipelineResult run_kinectfusion(const std::vector<RGBDFrame>& frames,
                                const PipelineOptions& options) {
    if (frames.empty()) throw ContractError("kinectfusion: needs at least one frame");
    std::vector<RGBDFrame> seq = tape_frames(frames, options);

    PipelineResult result;
    auto volume = std::make_shared<TSDFVolume>(options.volume);
    RigidTransform world = options.use_gt_poses ? gt_pose(options, 0) : RigidTransform();

    auto measure_and_fuse = [&](const RGBDFrame& frame, const RigidTransform& pose) {
        if (options.checkpoint_mapping) {
            const TSDFVolumeConfig cfg = volume->config();
            const CameraIntrinsics K = frame.intrinsics;
            RGBDFrame shell = frame;  // carries intrinsics/validity; depth re-bound below
            StageFn stage = [cfg, K, shell](const std::vector<Tensor>& in) {
                TSDFVolume scratch(cfg);
                scratch.set_fields(in[0], in[1]);
                RGBDFrame f = shell;
                f.depth = in[2];
                TSDFMeasurement m = tsdf_measure(scratch, f, RigidTransform(in[3].reshape({4, 4})));
                tsdf_fuse(scratch, m);
                return std::vector<Tensor>{scratch.tsdf(), scratch.weight()};
            };
            auto outs = checkpoint(
                stage, {volume->tsdf(), volume->weight(), frame.depth, pose.matrix()});
            volume->set_fields(outs[0], outs[1]);
        } else {
            TSDFMeasurement m = tsdf_measure(*volume, frame, pose);
            tsdf_fuse(*volume, m);
        }
    };

    RigidTransform velocity;
    for (size_t k = 0; k < seq.size(); ++k) {
        if (k > 0 && !options.use_gt_poses) {
            RaycastOptions rc_opt = options.raycast;
            RaycastResult rc = raycast(*volume, world, seq[k].intrinsics, rc_opt);
            VertexNormalMaps live = compute_vertex_normal_maps(seq[k]);
            try {
                OdometryEstimate est = icp_point_to_plane(live, rc.maps, seq[k].intrinsics,
                                                          velocity, options.icp);
                result.inlier_fractions.push_back(est.inlier_fraction);
                world = world * est.transform;
                velocity = est.transform;
            } catch (const Error& e) {
                // tracking failure: record the last good pose and abort
                throw InsufficientOverlapError("kinectfusion tracking failed at frame " +
                                               std::to_string(k) + " (last good pose kept): " +
                                               e.what());
            }
        } else if (options.use_gt_poses) {
            world = gt_pose(options, k);
        }
        measure_and_fuse(seq[k], world);
        push_pose(result, world, seq[k].timestamp);
    }
    result.volume = volume;
    return result;
}

}  // namespace diffslam
