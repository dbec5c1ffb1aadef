#include "diffslam/trajectory.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "diffslam/error.hpp"

namespace diffslam {

Trajectory Trajectory::load_tum(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("trajectory: cannot open " + path);
    Trajectory traj;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream is(line);
        double ts, tx, ty, tz, qx, qy, qz, qw;
        if (!(is >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw))
            throw IoError("trajectory: malformed line " + std::to_string(lineno) + " in " + path);
        Eigen::Quaterniond q(qw, qx, qy, qz);
        if (q.norm() < 1e-9)
            throw IoError("trajectory: zero quaternion at line " + std::to_string(lineno) + " in " + path);
        q.normalize();
        TimedPose tp;
        tp.timestamp = ts;
        tp.pose.setIdentity();
        tp.pose.block<3, 3>(0, 0) = q.toRotationMatrix();
        tp.pose.block<3, 1>(0, 3) = Eigen::Vector3d(tx, ty, tz);
        traj.poses.push_back(tp);
    }
    return traj;
}

void Trajectory::save_tum(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("trajectory: cannot write " + path);
    out << "# timestamp tx ty tz qx qy qz qw\n";
    char buf[256];
    for (const TimedPose& tp : poses) {
        Eigen::Quaterniond q(Eigen::Matrix3d(tp.pose.block<3, 3>(0, 0)));
        q.normalize();
        std::snprintf(buf, sizeof(buf), "%.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f\n", tp.timestamp,
                      tp.pose(0, 3), tp.pose(1, 3), tp.pose(2, 3), q.x(), q.y(), q.z(), q.w());
        out << buf;
    }
}

}  // namespace diffslam
