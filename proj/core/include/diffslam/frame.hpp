#pragma once

#include <cstdint>
#include <vector>

#include "diffslam/geometry.hpp"
#include "diffslam/tensor.hpp"

namespace diffslam {

// One registered color + depth measurement. Depth is metric; pixels with
// missing (zero/negative/non-finite) depth carry valid = 0 and contribute to
// no reduction downstream.
struct RGBDFrame {
    Tensor color;  // [H,W,3] in [0,1]
    Tensor depth;  // [H,W] meters
    double timestamp = 0.0;
    CameraIntrinsics intrinsics;
    std::vector<std::uint8_t> valid;  // H*W

    int height() const { return static_cast<int>(depth.dim(0)); }
    int width() const { return static_cast<int>(depth.dim(1)); }

    // Recomputes the validity mask from the current depth values.
    void refresh_valid();

    // Grayscale [H,W] as the channel mean.
    Tensor intensity() const;

    // Frame with color/depth re-registered as leaves of `tape`, so losses can
    // reach the raw pixels. Pass depth_only=true to keep color constant.
    RGBDFrame on_tape(Tape& tape, bool depth_only = false) const;
};

// Backprojects a frame into camera-space vertices and central-difference
// normals. Border pixels and pixels with invalid neighbours get valid = 0.
VertexNormalMaps compute_vertex_normal_maps(const RGBDFrame& frame);

// Gaussian-prefiltered 2x downsampling of the frame (intensity pyramid level).
RGBDFrame downsample_half(const RGBDFrame& frame);

}  // namespace diffslam
