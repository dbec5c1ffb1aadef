#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace diffslam {

struct TimedPose {
    double timestamp = 0.0;
    Eigen::Matrix4d pose = Eigen::Matrix4d::Identity();  // camera-to-world
};

// Trajectory in the TUM text convention:
//   timestamp tx ty tz qx qy qz qw
struct Trajectory {
    std::vector<TimedPose> poses;

    size_t size() const { return poses.size(); }
    bool empty() const { return poses.empty(); }

    static Trajectory load_tum(const std::string& path);
    void save_tum(const std::string& path) const;
};

}  // namespace diffslam
