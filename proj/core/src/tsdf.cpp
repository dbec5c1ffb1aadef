#include "diffslam/tsdf.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace diffslam {

namespace {
// 2 sigma(beta s / mu) - 1 hits 0.95 at s = mu when beta = ln(39)
const double kTruncBeta = std::log(39.0);
}  // namespace

double trunc_smooth_beta() { return kTruncBeta; }

Tensor trunc_smooth(const Tensor& sdf_meters, double mu) {
    return 2.0 * sigmoid(sdf_meters * (kTruncBeta / mu)) - 1.0;
}

void TSDFVolumeConfig::validate() const {
    if (nx < 2 || ny < 2 || nz < 2) throw ContractError("tsdf volume: dims must be at least 2");
    if (voxel_size <= 0) throw ContractError("tsdf volume: voxel_size must be positive");
    if (mu < 2.0 * voxel_size)
        throw ContractError("tsdf volume: mu must be at least two voxels (" +
                            std::to_string(2.0 * voxel_size) + ")");
    if (weight_cap <= 0) throw ContractError("tsdf volume: weight_cap must be positive");
}

TSDFVolume::TSDFVolume(TSDFVolumeConfig config) : config_(std::move(config)) {
    config_.validate();
    const Index n = config_.voxel_count();
    tsdf_ = Tensor::zeros({config_.nx, config_.ny, config_.nz});
    weight_ = Tensor::zeros({config_.nx, config_.ny, config_.nz});
    std::vector<double> centers(static_cast<size_t>(n) * 3);
    Index i = 0;
    for (Index x = 0; x < config_.nx; ++x) {
        for (Index y = 0; y < config_.ny; ++y) {
            for (Index z = 0; z < config_.nz; ++z, ++i) {
                centers[3 * i + 0] = config_.origin.x() + (x + 0.5) * config_.voxel_size;
                centers[3 * i + 1] = config_.origin.y() + (y + 0.5) * config_.voxel_size;
                centers[3 * i + 2] = config_.origin.z() + (z + 0.5) * config_.voxel_size;
            }
        }
    }
    centers_ = Tensor::constant({n, 3}, std::move(centers));
}

void TSDFVolume::set_fields(Tensor tsdf, Tensor weight) {
    const Shape expect{config_.nx, config_.ny, config_.nz};
    if (tsdf.numel() != config_.voxel_count() || weight.numel() != config_.voxel_count())
        throw ShapeError("tsdf volume: field size mismatch");
    tsdf_ = tsdf.reshape(expect);
    weight_ = weight.reshape(expect);
}

Tensor TSDFVolume::world_to_voxel(const Tensor& points) const {
    Tensor org = Tensor::constant({3}, {config_.origin.x() + 0.5 * config_.voxel_size,
                                        config_.origin.y() + 0.5 * config_.voxel_size,
                                        config_.origin.z() + 0.5 * config_.voxel_size});
    return (points - org) / config_.voxel_size;
}

Index TSDFVolume::active_voxel_count(double weight_min) const {
    Index n = 0;
    for (double w : weight_.data())
        if (w > weight_min) ++n;
    return n;
}

void TSDFVolume::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("tsdf volume: cannot write " + path);
    std::ostringstream header;
    header.precision(17);
    header << "TSDF1 " << config_.nx << " " << config_.ny << " " << config_.nz << " "
           << config_.origin.x() << " " << config_.origin.y() << " " << config_.origin.z() << " "
           << config_.voxel_size << " " << config_.mu << " " << config_.weight_cap << "\n";
    out << header.str();
    auto td = tsdf_.data();
    auto wd = weight_.data();
    out.write(reinterpret_cast<const char*>(td.data()), static_cast<std::streamsize>(td.size() * 8));
    out.write(reinterpret_cast<const char*>(wd.data()), static_cast<std::streamsize>(wd.size() * 8));
}

TSDFVolume TSDFVolume::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("tsdf volume: cannot open " + path);
    std::string line;
    std::getline(in, line);
    std::istringstream hs(line);
    std::string magic;
    TSDFVolumeConfig cfg;
    if (!(hs >> magic >> cfg.nx >> cfg.ny >> cfg.nz >> cfg.origin.x() >> cfg.origin.y() >>
          cfg.origin.z() >> cfg.voxel_size >> cfg.mu >> cfg.weight_cap) ||
        magic != "TSDF1")
        throw IoError("tsdf volume: bad header in " + path);
    TSDFVolume vol(cfg);
    const size_t n = static_cast<size_t>(cfg.voxel_count());
    std::vector<double> tsdf(n), weight(n);
    in.read(reinterpret_cast<char*>(tsdf.data()), static_cast<std::streamsize>(n * 8));
    in.read(reinterpret_cast<char*>(weight.data()), static_cast<std::streamsize>(n * 8));
    if (!in) throw IoError("tsdf volume: truncated data in " + path);
    vol.set_fields(Tensor::constant({cfg.nx, cfg.ny, cfg.nz}, std::move(tsdf)),
                   Tensor::constant({cfg.nx, cfg.ny, cfg.nz}, std::move(weight)));
    return vol;
}

TSDFMeasurement tsdf_measure(const TSDFVolume& volume, const RGBDFrame& frame,
                             const RigidTransform& pose, const TSDFMeasureOptions& options) {
    const TSDFVolumeConfig& cfg = volume.config();
    const CameraIntrinsics& K = frame.intrinsics;
    const Index n = volume.voxel_count();
    const Index h = frame.height(), w = frame.width();

    RigidTransform world_to_cam = pose.inverse();
    Tensor p_cam = world_to_cam.apply(volume.centers());  // [N,3]
    ProjectResult proj = transform_project(volume.centers(), world_to_cam, K);

    // paper-style range-to-depth conversion at the exact subpixel projection
    Tensor u = select(proj.coords, 1, 0);
    Tensor v = select(proj.coords, 1, 1);
    Tensor dxn = (u - K.cx) / K.fx;
    Tensor dyn = (v - K.cy) / K.fy;
    Tensor lambda = sqrt(dxn * dxn + dyn * dyn + 1.0);
    Tensor range = sqrt(sum(p_cam * p_cam, {1}) + 1e-18);
    Tensor z_eq = range / lambda;

    GatherResult depth_g = gather_bilinear(frame.depth.reshape({h, w, 1}), proj.coords);
    Tensor depth_at = depth_g.values.reshape({n});

    // validity image sampled bilinearly: all four taps must be valid
    VertexNormalMaps maps = compute_vertex_normal_maps(frame);
    std::vector<double> valid_img(maps.valid.begin(), maps.valid.end());
    GatherResult valid_g =
        gather_bilinear(Tensor::constant({h, w, 1}, std::move(valid_img)), proj.coords);

    std::vector<std::uint8_t> ok(static_cast<size_t>(n), 0);
    auto vg = valid_g.values.data();
    auto dg = depth_at.data();
    for (Index i = 0; i < n; ++i) {
        ok[static_cast<size_t>(i)] =
            proj.valid[static_cast<size_t>(i)] && depth_g.valid[static_cast<size_t>(i)] &&
            vg[i] >= 0.999 && dg[i] > 1e-4;
    }

    // free space positive: measured depth minus the voxel's equivalent depth
    Tensor sdf_m = depth_at - z_eq;
    Tensor truncated = trunc_smooth(sdf_m, cfg.mu);

    // view-angle weight from the measured surface normal
    GatherResult normal_g = gather_bilinear(maps.normals, proj.coords);
    Tensor ray_dir = p_cam / range.reshape({n, 1});
    Tensor cos_view = neg(sum(normal_g.values * ray_dir, {1}));
    Tensor w_angle = clamp_smooth(cos_view, options.min_cos, 1.0, 1.0);

    // smooth occlusion cutoff: weight fades out beyond mu behind the surface
    Tensor w_occ = sigmoid((sdf_m + cfg.mu) * (kTruncBeta / cfg.mu));

    Tensor weight = where_mask(ok, w_angle * w_occ, Tensor::zeros({n}));
    TSDFMeasurement m;
    m.sdf = truncated;
    m.weight = weight;
    return m;
}

void tsdf_fuse(TSDFVolume& volume, const TSDFMeasurement& measurement) {
    const Index n = volume.voxel_count();
    Tensor W = volume.weight().reshape({n});
    Tensor T = volume.tsdf().reshape({n});
    Tensor w = measurement.weight.reshape({n});
    Tensor s = measurement.sdf.reshape({n});
    Tensor w_sum = W + w;
    Tensor fused = (W * T + w * s) / (w_sum + 1e-12);
    Tensor capped = smooth_min(w_sum, Tensor::full({n}, volume.config().weight_cap), 0.5);
    volume.set_fields(fused, capped);
}

RaycastResult raycast(const TSDFVolume& volume, const RigidTransform& pose,
                      const CameraIntrinsics& K, const RaycastOptions& options) {
    const TSDFVolumeConfig& cfg = volume.config();
    if (options.step_scale > 0.5 + 1e-12)
        throw ContractError("raycast: step must be at most half a voxel");
    const double step = cfg.voxel_size * options.step_scale;
    const double sigma = options.sigma > 0 ? options.sigma : 2.0 * cfg.voxel_size;
    const Index h = K.height, w = K.width, hw = h * w;

    // unit camera rays
    std::vector<double> dirs(static_cast<size_t>(hw) * 3);
    for (Index v = 0; v < h; ++v) {
        for (Index u = 0; u < w; ++u) {
            double dx = (u - K.cx) / K.fx, dy = (v - K.cy) / K.fy;
            const double nrm = std::sqrt(dx * dx + dy * dy + 1.0);
            const size_t base = static_cast<size_t>(v * w + u) * 3;
            dirs[base] = dx / nrm;
            dirs[base + 1] = dy / nrm;
            dirs[base + 2] = 1.0 / nrm;
        }
    }
    Tensor dirs_cam = Tensor::constant({hw, 3}, std::move(dirs));
    Tensor R = pose.rotation();
    Tensor dirs_world = matmul(dirs_cam, transpose(R));
    Tensor origin = pose.translation();  // [3]

    const int n_steps =
        static_cast<int>(std::ceil((options.max_depth - options.min_depth) / step));
    if (n_steps < 2) throw ContractError("raycast: empty depth range");

    Tensor weight_fwd = volume.weight().detach();  // sample validity is a hard mask

    std::vector<Tensor> samples;  // [hw] per step
    std::vector<std::vector<std::uint8_t>> sample_ok(static_cast<size_t>(n_steps));
    samples.reserve(static_cast<size_t>(n_steps));
    for (int k = 0; k < n_steps; ++k) {
        const double t = options.min_depth + k * step;
        Tensor pts = dirs_world * t + origin;
        Tensor vox = volume.world_to_voxel(pts);
        GatherResult g = gather_trilinear(volume.tsdf(), vox);
        GatherResult gw = gather_trilinear(weight_fwd, vox.detach());
        auto wv = gw.values.data();
        auto& ok = sample_ok[static_cast<size_t>(k)];
        ok.assign(static_cast<size_t>(hw), 0);
        for (Index p = 0; p < hw; ++p)
            ok[static_cast<size_t>(p)] = g.valid[static_cast<size_t>(p)] &&
                                         gw.valid[static_cast<size_t>(p)] &&
                                         wv[p] > options.weight_eps;
        samples.push_back(g.values);
    }

    // first + -> - crossing per ray (forward values)
    std::vector<int> cross_step(static_cast<size_t>(hw), -1);
    for (int k = 0; k + 1 < n_steps; ++k) {
        auto a = samples[static_cast<size_t>(k)].data();
        auto b = samples[static_cast<size_t>(k + 1)].data();
        const auto& ok_a = sample_ok[static_cast<size_t>(k)];
        const auto& ok_b = sample_ok[static_cast<size_t>(k + 1)];
        for (Index p = 0; p < hw; ++p) {
            if (cross_step[static_cast<size_t>(p)] >= 0) continue;
            if (ok_a[static_cast<size_t>(p)] && ok_b[static_cast<size_t>(p)] && a[p] > 0.0 &&
                b[p] <= 0.0)
                cross_step[static_cast<size_t>(p)] = k;
        }
    }

    RaycastResult result;
    result.maps.width = static_cast<int>(w);
    result.maps.height = static_cast<int>(h);
    result.maps.valid.assign(static_cast<size_t>(hw), 0);

    std::vector<Index> hit_pixels;
    for (Index p = 0; p < hw; ++p)
        if (cross_step[static_cast<size_t>(p)] >= 0) {
            hit_pixels.push_back(p);
            result.maps.valid[static_cast<size_t>(p)] = 1;
        }

    Tensor depth_full = Tensor::zeros({hw});
    if (!hit_pixels.empty()) {
        const Index m = static_cast<Index>(hit_pixels.size());
        // pick the bracketing samples of each hit ray out of the stacked steps
        std::vector<Tensor> stack_parts;
        stack_parts.reserve(samples.size());
        for (auto& s : samples) stack_parts.push_back(s.reshape({1, hw}));
        Tensor stacked = concat(stack_parts, 0).reshape({static_cast<Index>(n_steps) * hw});
        std::vector<Index> idx_a(static_cast<size_t>(m)), idx_b(static_cast<size_t>(m));
        std::vector<double> t_a(static_cast<size_t>(m));
        for (Index i = 0; i < m; ++i) {
            const Index p = hit_pixels[static_cast<size_t>(i)];
            const int k = cross_step[static_cast<size_t>(p)];
            idx_a[static_cast<size_t>(i)] = static_cast<Index>(k) * hw + p;
            idx_b[static_cast<size_t>(i)] = static_cast<Index>(k + 1) * hw + p;
            t_a[static_cast<size_t>(i)] = options.min_depth + k * step;
        }
        Tensor sa = gather_rows(stacked, idx_a);
        Tensor sb = gather_rows(stacked, idx_b);
        Tensor ta = Tensor::constant({m}, std::move(t_a));
        Tensor t_star = ta + step * sa / (sa - sb + 1e-12);
        depth_full = scatter_add_rows(t_star, hit_pixels, hw);

        // vertices in the camera frame
        Tensor dirs_hit = gather_rows(dirs_cam, hit_pixels);
        Tensor verts = dirs_hit * t_star.reshape({m, 1});
        result.maps.vertices = scatter_add_rows(verts, hit_pixels, hw).reshape({h, w, 3});

        // normals from the tsdf gradient at the crossing (world frame)
        Tensor dirs_w_hit = gather_rows(dirs_world, hit_pixels);
        Tensor pts_star = dirs_w_hit * t_star.reshape({m, 1}) + origin;
        Tensor vox_star = volume.world_to_voxel(pts_star);
        const double hoff = 1.0;  // one voxel
        std::vector<Tensor> grads;
        for (int axis = 0; axis < 3; ++axis) {
            std::vector<double> off(3, 0.0);
            off[static_cast<size_t>(axis)] = hoff;
            Tensor o = Tensor::constant({3}, off);
            GatherResult gp = gather_trilinear(volume.tsdf(), vox_star + o);
            GatherResult gm = gather_trilinear(volume.tsdf(), vox_star - o);
            grads.push_back(gp.values - gm.values);
        }
        // positive tsdf lies toward the camera, so the gradient faces it
        Tensor n_world = normalize_rows(stack(grads, 1));
        Tensor n_cam = matmul(n_world, R);
        result.maps.normals = scatter_add_rows(n_cam, hit_pixels, hw).reshape({h, w, 3});
    } else {
        result.maps.vertices = Tensor::zeros({h, w, 3});
        result.maps.normals = Tensor::zeros({h, w, 3});
    }
    result.depth = depth_full.reshape({h, w});

    // Gaussian-pooled ray value, centered on the reference depth
    std::vector<double> t_ref(static_cast<size_t>(hw));
    {
        auto df = depth_full.data();
        const double mid = 0.5 * (options.min_depth + options.max_depth);
        for (Index p = 0; p < hw; ++p) {
            double r = mid;
            if (options.reference_depth) {
                const double d = options.reference_depth->at(p);
                if (d > 0)
                    r = d;
                else if (df[p] > 0)
                    r = df[p];
            } else if (df[p] > 0) {
                r = df[p];
            }
            t_ref[static_cast<size_t>(p)] = r;
        }
    }
    Tensor num = Tensor::zeros({hw});
    Tensor den = Tensor::zeros({hw});
    for (int k = 0; k < n_steps; ++k) {
        const double t = options.min_depth + k * step;
        std::vector<double> g(static_cast<size_t>(hw));
        const auto& ok = sample_ok[static_cast<size_t>(k)];
        for (Index p = 0; p < hw; ++p) {
            const double dt = t - t_ref[static_cast<size_t>(p)];
            g[static_cast<size_t>(p)] =
                ok[static_cast<size_t>(p)] ? std::exp(-dt * dt / (2 * sigma * sigma)) : 0.0;
        }
        Tensor gk = Tensor::constant({hw}, std::move(g));
        num = num + gk * samples[static_cast<size_t>(k)];
        den = den + gk;
    }
    result.aggregated = (num / (den + 1e-12)).reshape({h, w});
    result.aggregated_valid.assign(static_cast<size_t>(hw), 0);
    auto dd = den.data();
    for (Index p = 0; p < hw; ++p)
        result.aggregated_valid[static_cast<size_t>(p)] = dd[p] > 1e-9;
    return result;
}

RayDifferentials ray_differential(const Tensor& v_c, const Tensor& v_l, const Tensor& v_r,
                                  const Tensor& v_u, const Tensor& v_d,
                                  const std::vector<std::uint8_t>* left_valid,
                                  const std::vector<std::uint8_t>* right_valid,
                                  const std::vector<std::uint8_t>* up_valid,
                                  const std::vector<std::uint8_t>* down_valid) {
    const Index n = v_c.numel();
    auto all_valid = [&](const std::vector<std::uint8_t>* v, Index i) {
        return v == nullptr || (*v)[static_cast<size_t>(i)] != 0;
    };
    RayDifferentials out;
    out.one_sided.assign(static_cast<size_t>(n), 0);

    std::vector<std::uint8_t> lr_both(static_cast<size_t>(n)), lr_left(static_cast<size_t>(n));
    std::vector<std::uint8_t> ud_both(static_cast<size_t>(n)), ud_up(static_cast<size_t>(n));
    for (Index i = 0; i < n; ++i) {
        const bool l = all_valid(left_valid, i), r = all_valid(right_valid, i);
        const bool u = all_valid(up_valid, i), d = all_valid(down_valid, i);
        lr_both[static_cast<size_t>(i)] = l && r;
        lr_left[static_cast<size_t>(i)] = l;  // fallback side when only one is usable
        ud_both[static_cast<size_t>(i)] = u && d;
        ud_up[static_cast<size_t>(i)] = u;
        if (!(l && r) || !(u && d)) out.one_sided[static_cast<size_t>(i)] = 1;
    }
    Tensor du_central = (v_r - v_l) * 0.5;
    Tensor du_one = where_mask(lr_left, v_c - v_l, v_r - v_c);
    Tensor du = where_mask(lr_both, du_central, du_one);
    Tensor dv_central = (v_u - v_d) * 0.5;
    Tensor dv_one = where_mask(ud_up, v_u - v_c, v_c - v_d);
    Tensor dv = where_mask(ud_both, dv_central, dv_one);
    out.d = stack({du, dv}, 1);
    return out;
}

Tensor sample_aggregated_with_ray_differential(const Tensor& aggregated, const Tensor& coords,
                                               const std::vector<std::uint8_t>& aggregated_valid) {
    if (aggregated.ndim() != 2) throw ShapeError("expected [H,W] aggregated image");
    if (coords.ndim() != 2 || coords.dim(1) != 2) throw ShapeError("expected [N,2] coords");
    const Index h = aggregated.dim(0), w = aggregated.dim(1), n = coords.dim(0);

    auto cd = coords.data();
    auto ad = aggregated.data();
    auto vvalid = [&](Index u, Index v) {
        return u >= 0 && u < w && v >= 0 && v < h && aggregated_valid[static_cast<size_t>(v * w + u)];
    };

    std::vector<double> y(static_cast<size_t>(n), 0.0);
    auto pix = std::make_shared<std::vector<Index>>(static_cast<size_t>(n), -1);
    // Eq.-style derivative per sample, from the neighbouring aggregated rays
    auto dudv = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * 2, 0.0);
    for (Index i = 0; i < n; ++i) {
        const Index u = static_cast<Index>(std::lround(cd[2 * i]));
        const Index v = static_cast<Index>(std::lround(cd[2 * i + 1]));
        if (!vvalid(u, v)) continue;
        (*pix)[static_cast<size_t>(i)] = v * w + u;
        y[static_cast<size_t>(i)] = ad[v * w + u];
        const double c = ad[v * w + u];
        double du = 0.0, dv = 0.0;
        const bool l = vvalid(u - 1, v), r = vvalid(u + 1, v);
        if (l && r)
            du = (ad[v * w + u + 1] - ad[v * w + u - 1]) * 0.5;
        else if (l)
            du = c - ad[v * w + u - 1];
        else if (r)
            du = ad[v * w + u + 1] - c;
        const bool up = vvalid(u, v + 1), dn = vvalid(u, v - 1);
        if (up && dn)
            dv = (ad[(v + 1) * w + u] - ad[(v - 1) * w + u]) * 0.5;
        else if (up)
            dv = ad[(v + 1) * w + u] - c;
        else if (dn)
            dv = c - ad[(v - 1) * w + u];
        (*dudv)[static_cast<size_t>(2 * i)] = du;
        (*dudv)[static_cast<size_t>(2 * i) + 1] = dv;
    }

    Tape* tape = common_tape({&aggregated, &coords});
    if (!tape) return Tensor::constant({n}, std::move(y));
    tape->store_all(y);
    const Index anode = aggregated.requires_grad() ? aggregated.node() : -1;
    const Index cnode = coords.requires_grad() ? coords.node() : -1;
    std::vector<Index> parents;
    if (anode >= 0) parents.push_back(anode);
    if (cnode >= 0) parents.push_back(cnode);
    auto backward = [n, pix, dudv, anode, cnode](std::span<const double> up, Tape& t) {
        double* ga = anode >= 0 ? t.grad_slot(anode) : nullptr;
        double* gc = cnode >= 0 ? t.grad_slot(cnode) : nullptr;
        for (Index i = 0; i < n; ++i) {
            const Index p = (*pix)[static_cast<size_t>(i)];
            if (p < 0) continue;
            const double g = up[static_cast<size_t>(i)];
            if (ga) ga[p] += g;
            if (gc) {
                gc[2 * i] += g * (*dudv)[static_cast<size_t>(2 * i)];
                gc[2 * i + 1] += g * (*dudv)[static_cast<size_t>(2 * i) + 1];
            }
        }
    };
    return tape->emit({n}, std::move(y), std::move(parents), std::move(backward));
}

}  // namespace diffslam
