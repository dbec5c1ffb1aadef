#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "diffslam/frame.hpp"
#include "diffslam/synthetic.hpp"
#include "diffslam/trajectory.hpp"

namespace diffslam {

enum class DatasetKind { tum, icl_nuim, synthetic };

struct SequenceSource {
    DatasetKind kind = DatasetKind::synthetic;
    // directory for tum/icl-nuim; builtin name or config path for synthetic
    std::string root;
    // meters per stored depth unit; <= 0 means the dataset default (1/5000)
    double depth_scale = -1.0;
    int max_frames = -1;  // -1: all
    int stride = 1;
    double association_max_dt = 0.02;  // seconds
    int synthetic_frames = 20;         // for builtin scenes
};

// Accepts "tum:<dir>", "icl:<dir>", "icl-nuim:<dir>",
// "synthetic:<builtin-name>" and "synthetic:<config.json>".
SequenceSource parse_dataset_spec(const std::string& spec);

// Resolves the association list (or synthetic trajectory) up front; frames
// decode lazily and loaders stay read-only afterwards.
class SequenceLoader {
public:
    explicit SequenceLoader(SequenceSource source);

    size_t size() const;
    double timestamp(size_t i) const;
    RGBDFrame frame(size_t i) const;
    const CameraIntrinsics& intrinsics() const { return intrinsics_; }
    // Ground truth camera-to-world poses when the dataset ships them.
    const std::optional<Trajectory>& ground_truth() const { return ground_truth_; }
    const SequenceSource& source() const { return source_; }
    // Non-null for synthetic sources.
    const SyntheticScene* scene() const { return scene_.get(); }

private:
    struct Entry {
        double timestamp;
        std::string color_path;
        std::string depth_path;
        size_t scene_index = 0;  // synthetic
    };
    SequenceSource source_;
    CameraIntrinsics intrinsics_;
    std::vector<Entry> entries_;
    std::optional<Trajectory> ground_truth_;
    std::shared_ptr<SyntheticScene> scene_;
};

// Writes frames as a TUM-layout directory: rgb/, depth/ (16-bit PNG),
// associations.txt, groundtruth.txt (when poses given), intrinsics.json.
void export_tum_layout(const std::string& out_dir, const std::vector<RGBDFrame>& frames,
                       const CameraIntrinsics& intrinsics,
                       const Trajectory* ground_truth = nullptr);

}  // namespace diffslam
