#pragma once

#include <array>
#include <string>
#include <vector>

namespace diffslam {
struct SurfelMap;
}

namespace diffslam::io {

struct TriangleMesh {
    std::vector<std::array<double, 3>> vertices;
    std::vector<std::array<double, 3>> normals;  // optional, per vertex
    std::vector<std::array<int, 3>> faces;
};

void write_ply_mesh(const std::string& path, const TriangleMesh& mesh, bool binary = false);

// Vertex cloud with per-vertex normal, color, radius and confidence.
void write_ply_surfels(const std::string& path, const SurfelMap& map, bool binary = false);

}  // namespace diffslam::io
