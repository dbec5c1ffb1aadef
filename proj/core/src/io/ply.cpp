#include "diffslam/io/ply.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>

#include "diffslam/error.hpp"
#include "diffslam/surfel.hpp"

namespace diffslam::io {

namespace {

void write_le(std::ofstream& out, float v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_le(std::ofstream& out, std::uint8_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
void write_le(std::ofstream& out, std::int32_t v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

}  // namespace

void write_ply_mesh(const std::string& path, const TriangleMesh& mesh, bool binary) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw IoError("ply: cannot write " + path);
    const bool with_normals = mesh.normals.size() == mesh.vertices.size();

    out << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
    out << "element vertex " << mesh.vertices.size() << "\n";
    out << "property float x\nproperty float y\nproperty float z\n";
    if (with_normals) out << "property float nx\nproperty float ny\nproperty float nz\n";
    out << "element face " << mesh.faces.size() << "\n";
    out << "property list uchar int vertex_indices\n";
    out << "end_header\n";

    for (size_t i = 0; i < mesh.vertices.size(); ++i) {
        const auto& v = mesh.vertices[i];
        if (binary) {
            for (double c : v) write_le(out, static_cast<float>(c));
            if (with_normals)
                for (double c : mesh.normals[i]) write_le(out, static_cast<float>(c));
        } else {
            out << static_cast<float>(v[0]) << " " << static_cast<float>(v[1]) << " "
                << static_cast<float>(v[2]);
            if (with_normals) {
                const auto& n = mesh.normals[i];
                out << " " << static_cast<float>(n[0]) << " " << static_cast<float>(n[1]) << " "
                    << static_cast<float>(n[2]);
            }
            out << "\n";
        }
    }
    for (const auto& f : mesh.faces) {
        if (binary) {
            write_le(out, static_cast<std::uint8_t>(3));
            for (int idx : f) write_le(out, static_cast<std::int32_t>(idx));
        } else {
            out << "3 " << f[0] << " " << f[1] << " " << f[2] << "\n";
        }
    }
}

void write_ply_surfels(const std::string& path, const SurfelMap& map, bool binary) {
    std::ofstream out(path, binary ? std::ios::binary : std::ios::out);
    if (!out) throw IoError("ply: cannot write " + path);
    const Index m = map.size();

    out << "ply\nformat " << (binary ? "binary_little_endian" : "ascii") << " 1.0\n";
    out << "element vertex " << m << "\n";
    out << "property float x\nproperty float y\nproperty float z\n";
    out << "property float nx\nproperty float ny\nproperty float nz\n";
    out << "property uchar red\nproperty uchar green\nproperty uchar blue\n";
    out << "property float radius\nproperty float confidence\n";
    out << "end_header\n";

    auto pd = map.positions.data();
    auto nd = map.normals.data();
    auto cd = map.colors.data();
    auto rd = map.radii.data();
    auto kd = map.confidences.data();
    for (Index i = 0; i < m; ++i) {
        std::uint8_t rgb[3];
        for (int c = 0; c < 3; ++c) {
            double v = cd[3 * i + c];
            v = v < 0 ? 0 : (v > 1 ? 1 : v);
            rgb[c] = static_cast<std::uint8_t>(std::lround(v * 255.0));
        }
        if (binary) {
            for (int c = 0; c < 3; ++c) write_le(out, static_cast<float>(pd[3 * i + c]));
            for (int c = 0; c < 3; ++c) write_le(out, static_cast<float>(nd[3 * i + c]));
            for (int c = 0; c < 3; ++c) write_le(out, rgb[c]);
            write_le(out, static_cast<float>(rd[i]));
            write_le(out, static_cast<float>(kd[i]));
        } else {
            out << static_cast<float>(pd[3 * i]) << " " << static_cast<float>(pd[3 * i + 1]) << " "
                << static_cast<float>(pd[3 * i + 2]) << " " << static_cast<float>(nd[3 * i]) << " "
                << static_cast<float>(nd[3 * i + 1]) << " " << static_cast<float>(nd[3 * i + 2])
                << " " << static_cast<int>(rgb[0]) << " " << static_cast<int>(rgb[1]) << " "
                << static_cast<int>(rgb[2]) << " " << static_cast<float>(rd[i]) << " "
                << static_cast<float>(kd[i]) << "\n";
        }
    }
}

}  // namespace diffslam::io
