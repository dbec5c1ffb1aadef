#include "diffslam/frame.hpp"

#include <cmath>

namespace diffslam {

namespace {

// Flattens [H,W] / [H,W,C] to rows, gathers pixel indices, restores shape.
Tensor gather_pixels(const Tensor& img, const std::vector<Index>& idx, Index out_h, Index out_w) {
    const bool has_c = img.ndim() == 3;
    const Index c = has_c ? img.dim(2) : 1;
    Tensor flat = img.reshape({img.dim(0) * img.dim(1), c});
    Tensor picked = gather_rows(flat, idx);
    return has_c ? picked.reshape({out_h, out_w, c}) : picked.reshape({out_h, out_w});
}

Tensor binomial_blur(const Tensor& img) {
    const Index h = img.dim(0), w = img.dim(1);
    static const double kW[3] = {1.0, 2.0, 1.0};
    Tensor acc;
    for (int di = -1; di <= 1; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
            std::vector<Index> idx(static_cast<size_t>(h * w));
            for (Index i = 0; i < h; ++i) {
                const Index si = std::clamp<Index>(i + di, 0, h - 1);
                for (Index j = 0; j < w; ++j) {
                    const Index sj = std::clamp<Index>(j + dj, 0, w - 1);
                    idx[static_cast<size_t>(i * w + j)] = si * w + sj;
                }
            }
            Tensor tap = gather_pixels(img, idx, h, w) * (kW[di + 1] * kW[dj + 1] / 16.0);
            acc = acc.defined() ? acc + tap : tap;
        }
    }
    return acc;
}

}  // namespace

void RGBDFrame::refresh_valid() {
    const Index n = depth.numel();
    valid.assign(static_cast<size_t>(n), 0);
    auto d = depth.data();
    for (Index i = 0; i < n; ++i)
        valid[static_cast<size_t>(i)] = std::isfinite(d[i]) && d[i] > 0.0;
}

Tensor RGBDFrame::intensity() const { return mean(color, {2}); }

RGBDFrame RGBDFrame::on_tape(Tape& tape, bool depth_only) const {
    RGBDFrame f = *this;
    f.depth = tape.leaf(depth);
    f.color = depth_only ? color : tape.leaf(color);
    return f;
}

VertexNormalMaps compute_vertex_normal_maps(const RGBDFrame& frame) {
    const Index h = frame.height(), w = frame.width();
    if (h < 3 || w < 3) throw ContractError("vertex/normal maps need at least a 3x3 frame");
    VertexNormalMaps maps;
    maps.height = static_cast<int>(h);
    maps.width = static_cast<int>(w);

    Tensor dirs = backproject_directions(frame.intrinsics);
    maps.vertices = dirs * frame.depth.reshape({h, w, 1});

    // central-difference tangents over the interior
    Tensor du = slice(slice(maps.vertices, 0, 1, h - 2), 1, 2, w - 2) -
                slice(slice(maps.vertices, 0, 1, h - 2), 1, 0, w - 2);
    Tensor dv = slice(slice(maps.vertices, 0, 2, h - 2), 1, 1, w - 2) -
                slice(slice(maps.vertices, 0, 0, h - 2), 1, 1, w - 2);
    const Index m = (h - 2) * (w - 2);
    // cross(dv, du) points toward the camera (-z for a frontal plane)
    Tensor n = cross_rows(dv.reshape({m, 3}), du.reshape({m, 3}));
    std::vector<std::uint8_t> norm_ok;
    Tensor unit = normalize_rows(n, &norm_ok).reshape({h - 2, w - 2, 3});

    Tensor row_border = Tensor::zeros({1, w, 3});
    Tensor col_border = Tensor::zeros({h - 2, 1, 3});
    maps.normals = concat({row_border, concat({col_border, unit, col_border}, 1), row_border}, 0);

    maps.valid.assign(static_cast<size_t>(h * w), 0);
    const auto& dvalid = frame.valid;
    for (Index i = 1; i < h - 1; ++i) {
        for (Index j = 1; j < w - 1; ++j) {
            const size_t p = static_cast<size_t>(i * w + j);
            const bool neighbours = dvalid[p] && dvalid[p - 1] && dvalid[p + 1] &&
                                    dvalid[p - static_cast<size_t>(w)] &&
                                    dvalid[p + static_cast<size_t>(w)];
            maps.valid[p] = neighbours && norm_ok[static_cast<size_t>((i - 1) * (w - 2) + (j - 1))];
        }
    }
    return maps;
}

RGBDFrame downsample_half(const RGBDFrame& frame) {
    const Index h = frame.height(), w = frame.width();
    const Index h2 = h / 2, w2 = w / 2;
    if (h2 < 2 || w2 < 2) throw ContractError("downsample_half: frame too small");

    std::vector<Index> idx(static_cast<size_t>(h2 * w2));
    for (Index i = 0; i < h2; ++i)
        for (Index j = 0; j < w2; ++j) idx[static_cast<size_t>(i * w2 + j)] = (2 * i) * w + 2 * j;

    RGBDFrame out;
    out.timestamp = frame.timestamp;
    out.intrinsics = frame.intrinsics.scaled(2);
    // intensity is anti-aliased; depth is decimated without mixing values
    // across object boundaries
    out.color = gather_pixels(binomial_blur(frame.color), idx, h2, w2);
    out.depth = gather_pixels(frame.depth, idx, h2, w2);
    out.valid.resize(static_cast<size_t>(h2 * w2));
    for (size_t i = 0; i < idx.size(); ++i)
        out.valid[i] = frame.valid[static_cast<size_t>(idx[i])];
    return out;
}

}  // namespace diffslam
