#include "diffslam/odometry.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace diffslam {

namespace {

struct MaskedGather {
    Tensor values;
    std::vector<std::uint8_t> ok;
};

// Bilinear sample of an image plus a conservative validity check: the blend
// of the 0/1 validity image must be ~1, i.e. all four taps valid.
MaskedGather gather_with_validity(const Tensor& image, const std::vector<std::uint8_t>& valid,
                                  const Tensor& coords) {
    const Index h = image.dim(0), w = image.dim(1);
    GatherResult g = gather_bilinear(image.ndim() == 2 ? image.reshape({h, w, 1}) : image, coords);
    std::vector<double> vimg(valid.begin(), valid.end());
    GatherResult vg = gather_bilinear(Tensor::constant({h, w, 1}, std::move(vimg)), coords);
    MaskedGather out;
    out.values = g.values;
    out.ok.resize(static_cast<size_t>(coords.dim(0)));
    auto vv = vg.values.data();
    for (Index i = 0; i < coords.dim(0); ++i)
        out.ok[static_cast<size_t>(i)] = g.valid[static_cast<size_t>(i)] && vv[i] >= 0.999;
    return out;
}

void check_rank(const Tensor& J, const std::vector<std::uint8_t>& mask, Index min_points,
                double rcond) {
    Index n_ok = 0;
    for (auto v : mask) n_ok += v ? 1 : 0;
    if (n_ok < min_points)
        throw DegenerateGeometryError("alignment: only " + std::to_string(n_ok) +
                                      " valid associations");
    const Index m = J.dim(0);
    Eigen::Matrix<double, 6, 6> JtJ = Eigen::Matrix<double, 6, 6>::Zero();
    auto jd = J.data();
    for (Index i = 0; i < m; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        Eigen::Map<const Eigen::Matrix<double, 6, 1>> row(jd.data() + 6 * i);
        JtJ.noalias() += row * row.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 6, 6>> eig(JtJ);
    const double ev_min = eig.eigenvalues().minCoeff();
    const double ev_max = eig.eigenvalues().maxCoeff();
    if (!(ev_max > 0) || ev_min < rcond * ev_max)
        throw DegenerateGeometryError(
            "alignment: normal equations rank-deficient (eigenvalue ratio " +
            std::to_string(ev_min / std::max(ev_max, 1e-300)) + ")");
}

}  // namespace

OdometryEstimate icp_point_to_plane(const VertexNormalMaps& source,
                                    const VertexNormalMaps& target, const CameraIntrinsics& K,
                                    const RigidTransform& T_init, const IcpOptions& options) {
    std::vector<Index> src_px = source.valid_indices();
    if (static_cast<Index>(src_px.size()) < options.min_points)
        throw DegenerateGeometryError("icp: source has only " + std::to_string(src_px.size()) +
                                      " valid points");
    const Index hw = static_cast<Index>(source.height) * source.width;
    Tensor src_pts = gather_rows(source.vertices.reshape({hw, 3}), src_px);
    Tensor src_nrm = gather_rows(source.normals.reshape({hw, 3}), src_px);
    const Index n = static_cast<Index>(src_px.size());
    const double cos_gate = std::cos(options.angle_gate_deg * M_PI / 180.0);

    // shared forward chain of the residual and its jacobian. The validity
    // mask is frozen at the initial iterate: a mask that tracked the current
    // iterate would let the solver lower the cost by pushing points out of
    // the frame. Pairs that drift away mid-solve are attenuated smoothly by
    // the distance and angle gates instead.
    struct Eval {
        Tensor residual;
        Tensor jacobian;
        std::vector<std::uint8_t> mask;
        Tensor gates;
    };
    auto evaluate = [&, n](const Tensor& xi,
                           const std::vector<std::uint8_t>* frozen_mask) -> Eval {
        RigidTransform T = se3_exp(xi) * T_init;
        Tensor p = T.apply(src_pts);                                // target camera frame
        Tensor ns = matmul(src_nrm, transpose(T.rotation()));       // rotated source normals
        ProjectResult proj = transform_project(p, RigidTransform(), K);
        MaskedGather vt = gather_with_validity(target.vertices, target.valid, proj.coords);
        MaskedGather nt = gather_with_validity(target.normals, target.valid, proj.coords);

        std::vector<std::uint8_t> mask(static_cast<size_t>(n));
        std::vector<std::uint8_t> nrm_ok;
        Tensor nt_unit = normalize_rows(nt.values, &nrm_ok);
        if (frozen_mask) {
            mask = *frozen_mask;
        } else {
            for (Index i = 0; i < n; ++i)
                mask[static_cast<size_t>(i)] = proj.valid[static_cast<size_t>(i)] &&
                                               vt.ok[static_cast<size_t>(i)] &&
                                               nt.ok[static_cast<size_t>(i)] &&
                                               nrm_ok[static_cast<size_t>(i)];
        }

        Tensor diff = p - vt.values;
        Tensor dist = sqrt(sum(diff * diff, {1}) + 1e-16);
        Tensor w_dist = sigmoid((options.distance_gate - dist) * options.gate_steepness);
        Tensor cos_n = sum(ns * nt_unit, {1});
        Tensor w_angle = sigmoid((cos_n - cos_gate) * options.gate_steepness);
        Tensor gates = w_dist * w_angle;

        Tensor r = sum(diff * nt_unit, {1}) * gates;
        Eval e;
        e.residual = where_mask(mask, r, Tensor::zeros({n}));
        // point-to-plane linearization [(p x n)^T | n^T], gates held fixed
        Tensor J = concat({cross_rows(p, nt_unit), nt_unit}, 1) * gates.reshape({n, 1});
        e.jacobian = where_mask(mask, J, Tensor::zeros({n, 6}));
        e.mask = std::move(mask);
        e.gates = gates;
        return e;
    };

    auto mask0 = std::make_shared<const std::vector<std::uint8_t>>(
        evaluate(Tensor::zeros({6}), nullptr).mask);
    {
        Eval probe = evaluate(Tensor::zeros({6}), mask0.get());
        check_rank(probe.jacobian, probe.mask, options.min_points, options.degenerate_rcond);
    }

    LeastSquaresProblem problem;
    problem.x0 = Tensor::zeros({6});
    problem.residual = [evaluate, mask0](const Tensor& xi) {
        return evaluate(xi, mask0.get()).residual;
    };
    problem.jacobian = [evaluate, mask0](const Tensor& xi) {
        return evaluate(xi, mask0.get()).jacobian;
    };

    OdometryEstimate est;
    est.trace = solve_gradlm(problem, options.iters, options.gating);
    est.transform = se3_exp(est.trace.final_x()) * T_init;

    Eval fin = evaluate(est.trace.final_x(), mask0.get());
    Index inliers = 0, valid = 0;
    auto gd = fin.gates.data();
    for (Index i = 0; i < n; ++i) {
        if (!fin.mask[static_cast<size_t>(i)]) continue;
        ++valid;
        if (gd[i] > 0.5) ++inliers;
    }
    est.inlier_fraction = valid ? static_cast<double>(inliers) / valid : 0.0;
    return est;
}

namespace {

// central-difference image gradients with zero borders, on-tape
std::pair<Tensor, Tensor> image_gradients(const Tensor& img) {
    const Index h = img.dim(0), w = img.dim(1);
    Tensor gx_mid = (slice(img, 1, 2, w - 2) - slice(img, 1, 0, w - 2)) * 0.5;
    Tensor gx = concat({Tensor::zeros({h, 1}), gx_mid, Tensor::zeros({h, 1})}, 1);
    Tensor gy_mid = (slice(img, 0, 2, h - 2) - slice(img, 0, 0, h - 2)) * 0.5;
    Tensor gy = concat({Tensor::zeros({1, w}), gy_mid, Tensor::zeros({1, w})}, 0);
    return {gx, gy};
}

}  // namespace

OdometryEstimate photometric_odometry(const RGBDFrame& source, const RGBDFrame& target,
                                      const RigidTransform& T_init,
                                      const PhotometricOptions& options) {
    if (options.pyramid_levels < 1) throw ContractError("photometric: needs at least one level");

    std::vector<RGBDFrame> src_pyr{source}, tgt_pyr{target};
    for (int l = 1; l < options.pyramid_levels; ++l) {
        src_pyr.push_back(downsample_half(src_pyr.back()));
        tgt_pyr.push_back(downsample_half(tgt_pyr.back()));
    }

    Tensor xi = Tensor::zeros({6});
    SolverTrace last_trace;
    double inlier_fraction = 0.0;

    for (int l = options.pyramid_levels - 1; l >= 0; --l) {
        const RGBDFrame& src = src_pyr[static_cast<size_t>(l)];
        const RGBDFrame& tgt = tgt_pyr[static_cast<size_t>(l)];
        const CameraIntrinsics& K = tgt.intrinsics;
        const Index h = src.height(), w = src.width();

        std::vector<Index> px;
        for (Index p = 0; p < h * w; ++p)
            if (src.valid[static_cast<size_t>(p)]) px.push_back(p);
        if (px.empty())
            throw InsufficientOverlapError("photometric: no valid source pixels at level " +
                                           std::to_string(l));
        const Index n = static_cast<Index>(px.size());

        Tensor dirs = gather_rows(backproject_directions(src.intrinsics).reshape({h * w, 3}), px);
        Tensor depth = gather_rows(src.depth.reshape({h * w}), px);
        Tensor pts = dirs * depth.reshape({n, 1});
        Tensor i_src = gather_rows(src.intensity().reshape({h * w}), px);

        Tensor i_tgt = tgt.intensity();
        auto [gx_img, gy_img] = image_gradients(i_tgt);
        std::vector<std::uint8_t> tgt_valid = tgt.valid;

        // the warping mask is frozen at the level's initial iterate; a pixel
        // warped out of frame afterwards reads a zero target sample, so its
        // residual becomes -I_s, which penalizes escaping instead of
        // rewarding it
        std::shared_ptr<const std::vector<std::uint8_t>> frozen;
        auto evaluate = [&, n](const Tensor& x) {
            RigidTransform T = se3_exp(x) * T_init;
            Tensor p = T.apply(pts);
            ProjectResult proj = transform_project(p, RigidTransform(), K);
            MaskedGather it = gather_with_validity(i_tgt, tgt_valid, proj.coords);
            std::vector<std::uint8_t> mask;
            if (frozen) {
                mask = *frozen;
            } else {
                mask.resize(static_cast<size_t>(n));
                for (Index i = 0; i < n; ++i)
                    mask[static_cast<size_t>(i)] =
                        proj.valid[static_cast<size_t>(i)] && it.ok[static_cast<size_t>(i)];
            }
            Tensor r = it.values.reshape({n}) - i_src;
            return std::make_tuple(where_mask(mask, r, Tensor::zeros({n})), p, proj.coords, mask);
        };
        frozen = std::make_shared<const std::vector<std::uint8_t>>(std::get<3>(evaluate(xi)));

        LeastSquaresProblem problem;
        problem.x0 = xi;
        problem.residual = [evaluate](const Tensor& x) { return std::get<0>(evaluate(x)); };
        problem.jacobian = [&, evaluate](const Tensor& x) {
            auto [r, p, coords, mask] = evaluate(x);
            (void)r;
            Tensor gx = gather_bilinear(gx_img.reshape({tgt.depth.dim(0), tgt.depth.dim(1), 1}),
                                        coords)
                            .values.reshape({n});
            Tensor gy = gather_bilinear(gy_img.reshape({tgt.depth.dim(0), tgt.depth.dim(1), 1}),
                                        coords)
                            .values.reshape({n});
            Tensor x_c = select(p, 1, 0), y_c = select(p, 1, 1), z_c = select(p, 1, 2);
            std::vector<std::uint8_t> zok(static_cast<size_t>(n));
            auto zd = z_c.data();
            for (Index i = 0; i < n; ++i) zok[static_cast<size_t>(i)] = zd[i] > 1e-6;
            Tensor z = where_mask(zok, z_c, Tensor::full({n}, 1.0));
            Tensor inv_z = 1.0 / z;
            Tensor xz = x_c * inv_z, yz = y_c * inv_z;

            Tensor du_w0 = neg(K.fx * xz * yz);
            Tensor du_w1 = K.fx * (1.0 + xz * xz);
            Tensor du_w2 = neg(K.fx * yz);
            Tensor du_v0 = K.fx * inv_z;
            Tensor du_v2 = neg(K.fx * xz * inv_z);
            Tensor dv_w0 = neg(K.fy * (1.0 + yz * yz));
            Tensor dv_w1 = K.fy * xz * yz;
            Tensor dv_w2 = K.fy * xz;
            Tensor dv_v1 = K.fy * inv_z;
            Tensor dv_v2 = neg(K.fy * yz * inv_z);
            Tensor zero = Tensor::zeros({n});

            Tensor J = stack({gx * du_w0 + gy * dv_w0, gx * du_w1 + gy * dv_w1,
                              gx * du_w2 + gy * dv_w2, gx * du_v0 + gy * zero,
                              gy * dv_v1 + gx * zero, gx * du_v2 + gy * dv_v2},
                             1);
            return where_mask(mask, J, Tensor::zeros({n, 6}));
        };

        {
            Tensor probe_J = problem.jacobian(xi);
            auto [r0, p0, c0, mask0] = evaluate(xi);
            (void)r0;
            (void)p0;
            (void)c0;
            Index ok = 0;
            for (auto v : mask0) ok += v ? 1 : 0;
            if (ok < options.min_points)
                throw InsufficientOverlapError("photometric: only " + std::to_string(ok) +
                                               " overlapping pixels at level " + std::to_string(l));
            (void)probe_J;
        }

#ifdef DIFFSLAM_PHOTO_DEBUG
        {
            Tensor r0 = problem.residual(xi);
            Tensor J0 = problem.jacobian(xi);
            fprintf(stderr, "[photo] level=%d n=%lld cost0=%.5f Jnorm=%.4g\n", l,
                    (long long)r0.numel(), dot(r0, r0).value(), std::sqrt(dot(J0 * J0, Tensor::scalar(1.0)).value()));
            Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Je(
                J0.data().data(), J0.dim(0), 6);
            Eigen::Map<const Eigen::VectorXd> re(r0.data().data(), r0.numel());
            Eigen::Matrix<double, 6, 6> A = Je.transpose() * Je;
            A.diagonal() += 0.01 * A.diagonal();
            Eigen::Matrix<double, 6, 1> dx = A.ldlt().solve(-Je.transpose() * re);
            std::vector<double> dxv(dx.data(), dx.data() + 6);
            Tensor rtrial = problem.residual(xi + Tensor::constant({6}, dxv));
            fprintf(stderr, "[photo] |dx|=%.5g trial=%.5f\n", dx.norm(), dot(rtrial, rtrial).value());
        }
#endif
        last_trace = solve_gradlm(problem, options.iters, options.gating);
        xi = last_trace.final_x();

        auto [rf, pf, cf, maskf] = evaluate(xi);
        (void)pf;
        (void)cf;
        Index ok = 0, good = 0;
        auto rd = rf.data();
        for (Index i = 0; i < n; ++i) {
            if (!maskf[static_cast<size_t>(i)]) continue;
            ++ok;
            if (std::abs(rd[i]) < 0.05) ++good;
        }
        inlier_fraction = ok ? static_cast<double>(good) / ok : 0.0;
    }

    OdometryEstimate est;
    est.transform = se3_exp(xi) * T_init;
    est.trace = std::move(last_trace);
    est.inlier_fraction = inlier_fraction;
    return est;
}

}  // namespace diffslam
