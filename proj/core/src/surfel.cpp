#include "diffslam/surfel.hpp"

#include <algorithm>
#include <cmath>

namespace diffslam {

void SurfelMap::validate() const {
    const Index m = size();
    auto pd = positions.data();
    auto nd = normals.data();
    auto rd = radii.data();
    auto cd = confidences.data();
    for (Index i = 0; i < m; ++i) {
        for (int c = 0; c < 3; ++c) {
            if (!std::isfinite(pd[3 * i + c]) || !std::isfinite(nd[3 * i + c]))
                throw ContractError("surfel map: non-finite field at element " + std::to_string(i));
        }
        const double nn = nd[3 * i] * nd[3 * i] + nd[3 * i + 1] * nd[3 * i + 1] +
                          nd[3 * i + 2] * nd[3 * i + 2];
        if (std::abs(nn - 1.0) > 2e-6)
            throw ContractError("surfel map: normal not unit at element " + std::to_string(i));
        if (!(rd[i] > 0)) throw ContractError("surfel map: nonpositive radius");
        if (!(cd[i] >= 0)) throw ContractError("surfel map: negative confidence");
    }
}

SurfelBatch surfels_from_frame(const RGBDFrame& frame, const VertexNormalMaps& maps,
                               const RigidTransform& pose, const SurfelOptions& options) {
    const Index h = frame.height(), w = frame.width();
    std::vector<Index> px;
    for (Index p = 0; p < h * w; ++p)
        if (maps.valid[static_cast<size_t>(p)]) px.push_back(p);

    SurfelBatch batch;
    batch.pixel_index = px;
    if (px.empty()) return batch;
    const Index n = static_cast<Index>(px.size());

    Tensor verts = gather_rows(maps.vertices.reshape({h * w, 3}), px);   // camera frame
    Tensor norms = gather_rows(maps.normals.reshape({h * w, 3}), px);
    batch.positions = pose.apply(verts);
    batch.normals = matmul(norms, transpose(pose.rotation()));
    batch.colors = gather_rows(frame.color.reshape({h * w, 3}), px);

    // radius = d / (f |n_z|), |n_z| smoothly clamped from below
    const double f = 0.5 * (frame.intrinsics.fx + frame.intrinsics.fy);
    Tensor depth = gather_rows(frame.depth.reshape({h * w}), px);
    Tensor nz = select(norms, 1, 2);
    Tensor nz_abs = sqrt(nz * nz + 1e-18);
    Tensor nz_clamped = smooth_max(nz_abs, Tensor::full({n}, options.min_cos), 50.0);
    batch.radii = depth / (f * nz_clamped);

    // confidence: Gaussian in the normalized radial distance from the center
    const double half_diag = 0.5 * std::sqrt(static_cast<double>(w - 1) * (w - 1) +
                                             static_cast<double>(h - 1) * (h - 1));
    std::vector<double> conf(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const Index p = px[static_cast<size_t>(i)];
        const double du = (p % w - (w - 1) * 0.5) / half_diag;
        const double dv = (p / w - (h - 1) * 0.5) / half_diag;
        const double g2 = du * du + dv * dv;
        conf[static_cast<size_t>(i)] =
            std::exp(-g2 / (2.0 * options.radial_sigma * options.radial_sigma));
    }
    batch.confidences = Tensor::constant({n}, std::move(conf));
    return batch;
}

SurfelBatch surfel_from_pixel(const RGBDFrame& frame, const VertexNormalMaps& maps, Index pixel,
                              const RigidTransform& pose, const SurfelOptions& options) {
    if (pixel < 0 || pixel >= static_cast<Index>(maps.valid.size()) ||
        !maps.valid[static_cast<size_t>(pixel)])
        throw ContractError("surfel_from_pixel: pixel " + std::to_string(pixel) + " is not valid");
    SurfelBatch all = surfels_from_frame(frame, maps, pose, options);
    const auto it = std::find(all.pixel_index.begin(), all.pixel_index.end(), pixel);
    const Index row = static_cast<Index>(it - all.pixel_index.begin());
    SurfelBatch one;
    one.pixel_index = {pixel};
    one.positions = gather_rows(all.positions, {row});
    one.normals = gather_rows(all.normals, {row});
    one.colors = gather_rows(all.colors, {row});
    one.radii = gather_rows(all.radii, {row});
    one.confidences = gather_rows(all.confidences, {row});
    return one;
}

namespace {

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (!a.defined() || a.numel() == 0) return b;
    if (!b.defined() || b.numel() == 0) return a;
    return concat({a, b}, 0);
}

}  // namespace

SurfelMap surfel_fuse(const SurfelMap& map, const SurfelBatch& batch,
                      const SoftAssociation& assoc, int frame_index) {
    // rows of the batch keyed by pixel
    std::vector<Index> row_of_pixel;
    if (!batch.pixel_index.empty()) {
        const Index max_pix =
            *std::max_element(batch.pixel_index.begin(), batch.pixel_index.end());
        row_of_pixel.assign(static_cast<size_t>(max_pix) + 1, -1);
        for (size_t i = 0; i < batch.pixel_index.size(); ++i)
            row_of_pixel[static_cast<size_t>(batch.pixel_index[i])] = static_cast<Index>(i);
    }
    auto batch_row = [&](Index pixel) -> Index {
        if (pixel < 0 || pixel >= static_cast<Index>(row_of_pixel.size())) return -1;
        return row_of_pixel[static_cast<size_t>(pixel)];
    };

    SurfelMap out = map;
    out.frame_count = std::max(map.frame_count, frame_index + 1);

    const Index m = map.size();
    if (m > 0 && !assoc.pair_pixel.empty()) {
        // (pair -> batch row, pair -> element) with pairs whose pixel carries
        // a measurement in this batch
        std::vector<Index> rows, elems, keep;
        for (size_t j = 0; j < assoc.pair_pixel.size(); ++j) {
            const Index r = batch_row(assoc.pair_pixel[j]);
            if (r < 0) continue;
            rows.push_back(r);
            elems.push_back(assoc.pair_element[j]);
            keep.push_back(static_cast<Index>(j));
        }
        if (!rows.empty()) {
            Tensor w_pair = gather_rows(assoc.weights, keep);          // [J]
            Tensor alpha = gather_rows(batch.confidences, rows);       // measurement confidence
            Tensor wj = (w_pair * alpha).reshape({static_cast<Index>(rows.size()), 1});

            Tensor meas_p = gather_rows(batch.positions, rows);
            Tensor meas_n = gather_rows(batch.normals, rows);
            Tensor meas_c = gather_rows(batch.colors, rows);
            Tensor meas_r = gather_rows(batch.radii, rows);

            Tensor num_p = scatter_add_rows(wj * meas_p, elems, m);
            Tensor num_n = scatter_add_rows(wj * meas_n, elems, m);
            Tensor num_c = scatter_add_rows(wj * meas_c, elems, m);
            Tensor num_r = scatter_add_rows(wj.reshape({static_cast<Index>(rows.size())}) * meas_r,
                                            elems, m);
            Tensor wsum = scatter_add_rows(wj.reshape({static_cast<Index>(rows.size())}), elems, m);

            Tensor c_old = map.confidences;
            Tensor c_new = c_old + wsum;
            Tensor denom = c_new.reshape({m, 1});
            out.positions = (c_old.reshape({m, 1}) * map.positions + num_p) / denom;
            out.normals = normalize_rows((c_old.reshape({m, 1}) * map.normals + num_n) / denom);
            out.colors = (c_old.reshape({m, 1}) * map.colors + num_c) / denom;
            out.radii = (c_old * map.radii + num_r) / c_new;
            out.confidences = c_new;

            auto ws = wsum.data();
            for (Index e = 0; e < m; ++e)
                if (ws[e] > 0) out.last_seen[static_cast<size_t>(e)] = frame_index;
        }
    }

    // spawn path: pixels below the gate (or with no candidates at all)
    std::vector<Index> spawn_rows;
    for (Index pixel : assoc.new_element_pixels) {
        const Index r = batch_row(pixel);
        if (r >= 0) spawn_rows.push_back(r);
    }
    if (map.size() == 0 && assoc.pair_pixel.empty() && assoc.new_element_pixels.empty()) {
        // empty map and no association at all: every measurement is new
        spawn_rows.resize(static_cast<size_t>(batch.size()));
        for (Index i = 0; i < batch.size(); ++i) spawn_rows[static_cast<size_t>(i)] = i;
    }
    if (!spawn_rows.empty()) {
        out.positions = concat_rows(out.positions, gather_rows(batch.positions, spawn_rows));
        out.normals = concat_rows(out.normals, gather_rows(batch.normals, spawn_rows));
        out.colors = concat_rows(out.colors, gather_rows(batch.colors, spawn_rows));
        out.radii = concat_rows(out.radii, gather_rows(batch.radii, spawn_rows));
        out.confidences = concat_rows(out.confidences, gather_rows(batch.confidences, spawn_rows));
        out.last_seen.resize(static_cast<size_t>(out.size()), frame_index);
    }
    return out;
}

VertexNormalMaps render_surfel_maps(const SurfelMap& map, const RigidTransform& pose,
                                    const CameraIntrinsics& K) {
    VertexNormalMaps maps;
    maps.width = K.width;
    maps.height = K.height;
    const Index hw = static_cast<Index>(K.width) * K.height;
    maps.valid.assign(static_cast<size_t>(hw), 0);
    if (map.empty()) {
        maps.vertices = Tensor::zeros({K.height, K.width, 3});
        maps.normals = Tensor::zeros({K.height, K.width, 3});
        return maps;
    }

    RigidTransform world_to_cam = pose.inverse();
    ProjectResult proj = transform_project(map.positions, world_to_cam, K);
    auto cd = proj.coords.data();
    auto dd = proj.depth.data();

    // nearest surfel per pixel (z-buffer on forward values)
    std::vector<Index> chosen(static_cast<size_t>(hw), -1);
    std::vector<double> best(static_cast<size_t>(hw), std::numeric_limits<double>::infinity());
    const Index m = map.size();
    for (Index i = 0; i < m; ++i) {
        if (!proj.valid[static_cast<size_t>(i)]) continue;
        const Index u = static_cast<Index>(std::lround(cd[2 * i]));
        const Index v = static_cast<Index>(std::lround(cd[2 * i + 1]));
        if (u < 0 || u >= K.width || v < 0 || v >= K.height) continue;
        const size_t p = static_cast<size_t>(v * K.width + u);
        if (dd[i] < best[p]) {
            best[p] = dd[i];
            chosen[p] = i;
        }
    }

    std::vector<Index> rows;
    std::vector<Index> pix;
    for (Index p = 0; p < hw; ++p) {
        if (chosen[static_cast<size_t>(p)] >= 0) {
            rows.push_back(chosen[static_cast<size_t>(p)]);
            pix.push_back(p);
            maps.valid[static_cast<size_t>(p)] = 1;
        }
    }
    Tensor cam_points = world_to_cam.apply(map.positions);
    Tensor cam_normals = matmul(map.normals, transpose(world_to_cam.rotation()));
    Tensor v_sel = gather_rows(cam_points, rows);
    Tensor n_sel = gather_rows(cam_normals, rows);
    maps.vertices = scatter_add_rows(v_sel, pix, hw).reshape({K.height, K.width, 3});
    maps.normals = scatter_add_rows(n_sel, pix, hw).reshape({K.height, K.width, 3});
    return maps;
}

SurfelMap remove_stale_surfels(const SurfelMap& map, double min_confidence, int window) {
    std::vector<Index> keep;
    auto cd = map.confidences.data();
    for (Index i = 0; i < map.size(); ++i) {
        const bool stale = map.last_seen[static_cast<size_t>(i)] < map.frame_count - window;
        if (!stale || cd[i] >= min_confidence) keep.push_back(i);
    }
    SurfelMap out;
    out.frame_count = map.frame_count;
    if (keep.empty()) return out;
    out.positions = gather_rows(map.positions, keep).detach();
    out.normals = gather_rows(map.normals, keep).detach();
    out.colors = gather_rows(map.colors, keep).detach();
    out.radii = gather_rows(map.radii, keep).detach();
    out.confidences = gather_rows(map.confidences, keep).detach();
    for (Index i : keep) out.last_seen.push_back(map.last_seen[static_cast<size_t>(i)]);
    return out;
}

}  // namespace diffslam
