#include "diffslam/mapping.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace diffslam {

double depth_noise_sigma(double depth_m) {
    const double d = depth_m - 0.4;
    return 0.0012 + 0.0019 * d * d;
}

ActiveSet frustum_cull(const Tensor& positions, const RigidTransform& pose,
                       const CameraIntrinsics& K, const std::vector<std::uint8_t>* pixel_valid) {
    if (positions.ndim() != 2 || positions.dim(1) != 3)
        throw ShapeError("frustum_cull: positions must be [M,3]");
    if (positions.dim(0) == 0) throw ContractError("frustum_cull: empty map");

    RigidTransform world_to_cam = pose.inverse();
    ProjectResult proj = transform_project(positions, world_to_cam, K);

    ActiveSet active;
    for (size_t i = 0; i < proj.valid.size(); ++i)
        if (proj.valid[i]) active.map_indices.push_back(static_cast<Index>(i));

    Tensor cam_all = world_to_cam.apply(positions);
    active.cam_points = gather_rows(cam_all, active.map_indices);
    active.coords = gather_rows(proj.coords, active.map_indices);
    if (pixel_valid) {
        for (size_t p = 0; p < pixel_valid->size(); ++p)
            if ((*pixel_valid)[p]) active.pixel_indices.push_back(static_cast<Index>(p));
    }
    return active;
}

SoftAssociation soft_associate(const VertexNormalMaps& measurement, const ActiveSet& active,
                               const CameraIntrinsics& K, const AssociationOptions& options) {
    if (options.sigma <= 0) throw ContractError("soft_associate: sigma must be positive");
    if (options.k_max < 1) throw ContractError("soft_associate: k_max must be >= 1");

    SoftAssociation assoc;
    assoc.sigma = options.sigma;
    assoc.k_max = options.k_max;

    const Index w = measurement.width, h = measurement.height;
    const Index a_count = active.active_count();

    // bucket active elements by their nearest pixel
    std::map<Index, std::vector<Index>> buckets;  // pixel -> local active ids
    if (a_count > 0) {
        auto cd = active.coords.data();
        for (Index a = 0; a < a_count; ++a) {
            const Index u = static_cast<Index>(std::lround(cd[2 * a]));
            const Index v = static_cast<Index>(std::lround(cd[2 * a + 1]));
            if (u < 0 || u >= w || v < 0 || v >= h) continue;
            buckets[v * w + u].push_back(a);
        }
    }

    // forward values for ranking candidates
    auto pc = active.cam_points.data();
    auto mv = measurement.vertices.data();

    struct Pair {
        Index pixel;
        Index local;  // into active arrays
    };
    std::vector<Pair> pairs;
    std::vector<Index> pixels_with_candidates;

    const int R = options.search_radius_px;
    for (Index p = 0; p < h * w; ++p) {
        if (!measurement.valid[static_cast<size_t>(p)]) continue;
        const Index pu = p % w, pv = p / w;
        // ray of this pixel (unit, camera frame)
        double dx = (static_cast<double>(pu) - K.cx) / K.fx;
        double dy = (static_cast<double>(pv) - K.cy) / K.fy;
        double dn = std::sqrt(dx * dx + dy * dy + 1.0);
        dx /= dn;
        dy /= dn;
        const double dz = 1.0 / dn;

        std::vector<std::pair<double, Index>> cands;  // (r^2, local id)
        for (Index dv = -R; dv <= R; ++dv) {
            for (Index du = -R; du <= R; ++du) {
                const Index qu = pu + du, qv = pv + dv;
                if (qu < 0 || qu >= w || qv < 0 || qv >= h) continue;
                auto it = buckets.find(qv * w + qu);
                if (it == buckets.end()) continue;
                for (Index local : it->second) {
                    const double x = pc[3 * local], y = pc[3 * local + 1], z = pc[3 * local + 2];
                    const double along = x * dx + y * dy + z * dz;
                    const double r2 = x * x + y * y + z * z - along * along;
                    cands.emplace_back(r2, local);
                }
            }
        }
        if (cands.empty()) {
            assoc.new_element_pixels.push_back(p);
            continue;
        }
        std::sort(cands.begin(), cands.end());
        const size_t keep = std::min<size_t>(cands.size(), static_cast<size_t>(options.k_max));
        for (size_t k = 0; k < keep; ++k) pairs.push_back({p, cands[k].second});
        pixels_with_candidates.push_back(p);
        (void)mv;
    }

    if (pairs.empty()) {
        assoc.weights = Tensor::zeros({0});
        assoc.mass = Tensor::zeros({0});
        return assoc;
    }

    // on-tape point-to-ray distance for the selected pairs
    std::vector<Index> sel(pairs.size());
    std::vector<double> dirs(pairs.size() * 3);
    for (size_t j = 0; j < pairs.size(); ++j) {
        sel[j] = pairs[j].local;
        const Index pu = pairs[j].pixel % w, pv = pairs[j].pixel / w;
        double dx = (static_cast<double>(pu) - K.cx) / K.fx;
        double dy = (static_cast<double>(pv) - K.cy) / K.fy;
        double dn = std::sqrt(dx * dx + dy * dy + 1.0);
        dirs[3 * j] = dx / dn;
        dirs[3 * j + 1] = dy / dn;
        dirs[3 * j + 2] = 1.0 / dn;
    }
    const Index J = static_cast<Index>(pairs.size());
    Tensor P = gather_rows(active.cam_points, sel);                   // [J,3]
    Tensor D = Tensor::constant({J, 3}, std::move(dirs));             // pixel rays
    Tensor along = sum(P * D, {1});                                   // [J]
    Tensor r2 = sum(P * P, {1}) - along * along;
    Tensor g = exp(neg(r2) / (2.0 * options.sigma * options.sigma));  // unnormalized

    // per-pixel normalization via compact pixel slots
    std::vector<Index> slot_of_pair(pairs.size());
    {
        std::map<Index, Index> slot;
        for (size_t j = 0; j < pairs.size(); ++j) {
            auto [it, inserted] = slot.emplace(pairs[j].pixel, static_cast<Index>(slot.size()));
            slot_of_pair[j] = it->second;
        }
        assoc.mass_pixel.resize(slot.size());
        for (const auto& [pix, s] : slot) assoc.mass_pixel[static_cast<size_t>(s)] = pix;
    }
    const Index n_slots = static_cast<Index>(assoc.mass_pixel.size());
    Tensor mass = scatter_add_rows(g, slot_of_pair, n_slots);  // [P]
    Tensor denom = gather_rows(mass, slot_of_pair);            // [J]
    assoc.weights = g / denom;
    assoc.mass = mass;

    assoc.pair_pixel.reserve(pairs.size());
    assoc.pair_element.reserve(pairs.size());
    for (const auto& pr : pairs) {
        assoc.pair_pixel.push_back(pr.pixel);
        assoc.pair_element.push_back(active.map_indices[static_cast<size_t>(pr.local)]);
    }

    // the spawn gate uses the unnormalized Gaussian mass
    auto md = assoc.mass.data();
    for (Index s = 0; s < n_slots; ++s) {
        if (md[s] < options.new_element_gate)
            assoc.new_element_pixels.push_back(assoc.mass_pixel[static_cast<size_t>(s)]);
    }
    std::sort(assoc.new_element_pixels.begin(), assoc.new_element_pixels.end());
    return assoc;
}

}  // namespace diffslam
