#pragma once

#include <cstdint>
#include <vector>

#include "diffslam/frame.hpp"
#include "diffslam/geometry.hpp"

namespace diffslam {

// Map elements surviving the frustum intersection with the live frame.
// Membership is a hard mask over forward values; the cached geometry of the
// surviving elements stays on-tape.
struct ActiveSet {
    std::vector<Index> map_indices;    // M_a: indices into the map arrays
    std::vector<Index> pixel_indices;  // P_a: valid live pixels (flat)
    Tensor cam_points;                 // [A,3] active elements, camera frame
    Tensor coords;                     // [A,2] their subpixel projections

    Index active_count() const { return static_cast<Index>(map_indices.size()); }
};

// Soft measurement-to-map association: per valid pixel, up to k_max candidate
// elements weighted by a Gaussian of the point-to-ray distance.
struct SoftAssociation {
    std::vector<Index> pair_pixel;    // [J] flat pixel index of each pair
    std::vector<Index> pair_element;  // [J] global map element index
    Tensor weights;                   // [J] normalized per pixel (sums to 1)
    Tensor mass;                      // [P] unnormalized Gaussian mass per associated pixel
    std::vector<Index> mass_pixel;    // [P] pixel of each mass entry
    // valid pixels whose unnormalized mass fell below the spawn gate
    std::vector<Index> new_element_pixels;
    double sigma = 0.0;
    int k_max = 4;
};

struct AssociationOptions {
    double sigma = 0.01;          // meters; falloff of the radial weight
    int k_max = 4;                // candidates kept per pixel
    double new_element_gate = 0.5;  // unnormalized mass below this spawns a new element
    int search_radius_px = 2;     // candidate window around each pixel
};

// Projects world-frame map element positions [M,3] into the camera at `pose`
// (camera-to-world) and keeps the elements that land inside the image with
// positive depth. `pixel_valid` (when given) fills the active pixel set.
ActiveSet frustum_cull(const Tensor& positions, const RigidTransform& pose,
                       const CameraIntrinsics& K,
                       const std::vector<std::uint8_t>* pixel_valid = nullptr);

// Associates the live measurement with the active elements. Candidate
// selection (bucketing, k nearest) runs on forward values; the weights are
// on-tape functions of both the measurement and the map positions.
SoftAssociation soft_associate(const VertexNormalMaps& measurement, const ActiveSet& active,
                               const CameraIntrinsics& K, const AssociationOptions& options);

// Kinect-style depth noise scale; the association sigma defaults to twice
// this at the scene's working depth.
double depth_noise_sigma(double depth_m);

}  // namespace diffslam
