#pragma once

#include <string>
#include <vector>

#include "diffslam/frame.hpp"
#include "diffslam/mapping.hpp"

namespace diffslam {

// Growable oriented-disc map. Attributes live in parallel per-element
// tensors so fusion stays a batched, differentiable update.
struct SurfelMap {
    Tensor positions;    // [M,3] world meters
    Tensor normals;      // [M,3] unit, world frame
    Tensor colors;       // [M,3] in [0,1]
    Tensor radii;        // [M] meters
    Tensor confidences;  // [M] nonnegative
    std::vector<int> last_seen;
    int frame_count = 0;

    Index size() const { return positions.defined() ? positions.dim(0) : 0; }
    bool empty() const { return size() == 0; }
    void validate() const;  // finite fields, unit normals, positive radii
};

// Per-pixel surfel candidates of one frame, world frame, on-tape.
struct SurfelBatch {
    Tensor positions;   // [N,3]
    Tensor normals;     // [N,3]
    Tensor colors;      // [N,3]
    Tensor radii;       // [N]
    Tensor confidences; // [N]
    std::vector<Index> pixel_index;  // source pixel per row
    Index size() const { return positions.defined() ? positions.dim(0) : 0; }
};

struct SurfelOptions {
    // Gaussian falloff (in normalized image radius) of the initial confidence
    double radial_sigma = 0.6;
    // smooth lower clamp on |n_z| in the radius formula
    double min_cos = 0.1;
};

// Builds one surfel per valid measurement pixel: position/normal through the
// camera pose, radius d / (f |n_z|) with a smooth clamp, confidence from
// the Gaussian radial falloff around the image center.
SurfelBatch surfels_from_frame(const RGBDFrame& frame, const VertexNormalMaps& maps,
                               const RigidTransform& pose, const SurfelOptions& options = {});

// Single-pixel convenience wrapper; throws if the pixel is invalid.
SurfelBatch surfel_from_pixel(const RGBDFrame& frame, const VertexNormalMaps& maps, Index pixel,
                              const RigidTransform& pose, const SurfelOptions& options = {});

// Confidence-weighted averaging of matched surfels + appending of the pixels
// the association routed to the new-element path. Fully on-tape.
SurfelMap surfel_fuse(const SurfelMap& map, const SurfelBatch& batch,
                      const SoftAssociation& assoc, int frame_index);

// Projects the map into the camera at `pose`, keeping the nearest surfel per
// pixel, and exposes vertex/normal images (camera frame, on-tape values) for
// frame-to-model alignment.
VertexNormalMaps render_surfel_maps(const SurfelMap& map, const RigidTransform& pose,
                                    const CameraIntrinsics& K);

// Non-differentiable cleanup: drops surfels with confidence below
// `min_confidence` that were last seen more than `window` frames ago.
SurfelMap remove_stale_surfels(const SurfelMap& map, double min_confidence, int window);

}  // namespace diffslam
