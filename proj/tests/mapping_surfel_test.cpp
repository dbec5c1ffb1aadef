#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>

#include "diffslam/io/ply.hpp"
#include "diffslam/mapping.hpp"
#include "diffslam/surfel.hpp"
#include "diffslam/synthetic.hpp"
#include "support/gradcheck.hpp"

using namespace diffslam;

namespace {

CameraIntrinsics small_k() {
    CameraIntrinsics k;
    k.fx = k.fy = 30.0;
    k.cx = k.cy = 15.5;
    k.width = k.height = 32;
    return k;
}

RGBDFrame plane_frame(const CameraIntrinsics& k, double depth) {
    RGBDFrame f;
    f.intrinsics = k;
    f.depth = Tensor::full({k.height, k.width}, depth);
    f.color = Tensor::full({k.height, k.width, 3}, 0.6);
    f.refresh_valid();
    return f;
}

}  // namespace

TEST_CASE("frustum_cull: map behind the camera is empty, not fatal") {
    CameraIntrinsics k = small_k();
    Tensor pts = Tensor::constant({2, 3}, {0, 0, -1, 0.5, 0.5, -2});
    ActiveSet a = frustum_cull(pts, RigidTransform(), k);
    CHECK(a.map_indices.empty());
    CHECK(a.active_count() == 0);
    CHECK_THROWS_AS(frustum_cull(Tensor::zeros({0, 3}), RigidTransform(), k), ContractError);
}

TEST_CASE("frustum_cull: optical-axis point projects to the principal point") {
    CameraIntrinsics k = small_k();
    Tensor pts = Tensor::constant({1, 3}, {0, 0, 1});
    ActiveSet a = frustum_cull(pts, RigidTransform(), k);
    REQUIRE(a.map_indices == std::vector<Index>{0});
    CHECK(a.coords.at({0, 0}) == doctest::Approx(k.cx));
    CHECK(a.coords.at({0, 1}) == doctest::Approx(k.cy));
}

TEST_CASE("frustum_cull matches a brute-force projection test on a random map") {
    CameraIntrinsics k = small_k();
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> d(-3, 3);
    const Index m = 400;
    std::vector<double> pts(static_cast<size_t>(m) * 3);
    for (auto& v : pts) v = d(rng);
    Tensor map = Tensor::constant({m, 3}, pts);
    Eigen::Matrix4d pose_m = look_at(Eigen::Vector3d(0.3, -0.2, -2.5), Eigen::Vector3d::Zero());
    RigidTransform pose = RigidTransform::from_eigen(pose_m);

    ActiveSet a = frustum_cull(map, pose, k);

    // independent oracle: raw Eigen projection of every element
    Eigen::Matrix4d inv = pose_m.inverse();
    std::vector<Index> expected;
    for (Index i = 0; i < m; ++i) {
        Eigen::Vector4d p(pts[3 * i], pts[3 * i + 1], pts[3 * i + 2], 1.0);
        Eigen::Vector4d c = inv * p;
        if (c.z() <= 1e-6) continue;
        const double u = k.fx * c.x() / c.z() + k.cx;
        const double v = k.fy * c.y() / c.z() + k.cy;
        if (u >= 0 && u <= k.width - 1 && v >= 0 && v <= k.height - 1) expected.push_back(i);
    }
    CHECK(a.map_indices == expected);
}

TEST_CASE("soft_associate: sole on-ray candidate gets weight one") {
    CameraIntrinsics k = small_k();
    RGBDFrame f = plane_frame(k, 2.0);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);

    // single map element exactly on the ray of pixel (16,16)
    const double du = (16 - k.cx) / k.fx, dv = (16 - k.cy) / k.fy;
    Tensor map = Tensor::constant({1, 3}, {du * 2.0, dv * 2.0, 2.0});
    ActiveSet a = frustum_cull(map, RigidTransform(), k);
    AssociationOptions opt;
    opt.sigma = 0.01;
    SoftAssociation assoc = soft_associate(maps, a, k, opt);

    bool found = false;
    for (size_t j = 0; j < assoc.pair_pixel.size(); ++j) {
        if (assoc.pair_pixel[j] == 16 * k.width + 16) {
            found = true;
            CHECK(assoc.weights.at(static_cast<Index>(j)) == doctest::Approx(1.0));
        }
    }
    CHECK(found);
}

TEST_CASE("soft_associate: equidistant candidates split the weight") {
    CameraIntrinsics k = small_k();
    RGBDFrame f = plane_frame(k, 2.0);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    const double du = (16 - k.cx) / k.fx, dv = (16 - k.cy) / k.fy;
    const Eigen::Vector3d on_ray(du * 2.0, dv * 2.0, 2.0);
    // two elements offset symmetrically off the ray
    Tensor map = Tensor::constant({2, 3}, {on_ray.x() + 0.01, on_ray.y(), on_ray.z(),
                                           on_ray.x() - 0.01, on_ray.y(), on_ray.z()});
    ActiveSet a = frustum_cull(map, RigidTransform(), k);
    AssociationOptions opt;
    opt.sigma = 0.02;
    SoftAssociation assoc = soft_associate(maps, a, k, opt);
    int found = 0;
    for (size_t j = 0; j < assoc.pair_pixel.size(); ++j) {
        if (assoc.pair_pixel[j] == 16 * k.width + 16) {
            CHECK(assoc.weights.at(static_cast<Index>(j)) == doctest::Approx(0.5).epsilon(5e-3));
            ++found;
        }
    }
    CHECK(found == 2);
}

TEST_CASE("association weights are normalized and monotone in ray distance") {
    CameraIntrinsics k = small_k();
    SyntheticScene scene = SyntheticScene::builtin("sphere", 2);
    scene.intrinsics = k;
    RenderedFrame rf = render_synthetic(scene, 0);
    VertexNormalMaps maps = compute_vertex_normal_maps(rf.frame);
    RigidTransform pose = RigidTransform::from_eigen(rf.pose);

    SurfelBatch batch = surfels_from_frame(rf.frame, maps, pose);
    REQUIRE(batch.size() > 100);
    ActiveSet a = frustum_cull(batch.positions, pose, k);
    AssociationOptions opt;
    opt.sigma = 2.0 * depth_noise_sigma(2.5);
    SoftAssociation assoc = soft_associate(maps, a, k, opt);

    // per-pixel normalization: weights of each pixel sum to one
    std::map<Index, double> sums;
    for (size_t j = 0; j < assoc.pair_pixel.size(); ++j)
        sums[assoc.pair_pixel[j]] += assoc.weights.at(static_cast<Index>(j));
    for (const auto& [pix, s] : sums) CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("association weight gradients match finite differences") {
    CameraIntrinsics k = small_k();
    RGBDFrame f = plane_frame(k, 2.0);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    std::vector<double> p0 = {0.03, -0.05, 1.97, -0.02, 0.01, 2.05, 0.05, 0.04, 2.01};

    auto build = [&](const Tensor& leaf) {
        ActiveSet a = frustum_cull(leaf, RigidTransform(), k);
        AssociationOptions opt;
        opt.sigma = 0.05;
        SoftAssociation assoc = soft_associate(maps, a, k, opt);
        return sum(sin(assoc.weights * 3.0));
    };
    auto r = gradcheck::check_leaf_gradient({3, 3}, p0, build, 1e-6);
    CHECK(r.max_rel_err < 1e-4);
}

TEST_CASE("surfel batch: center pixel confidence is one, radius formula exact") {
    CameraIntrinsics k;
    k.fx = k.fy = 500.0;
    k.cx = k.cy = 16.0;  // integer center pixel
    k.width = k.height = 33;
    RGBDFrame f = plane_frame(k, 1.0);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    const Index center = 16 * k.width + 16;
    SurfelBatch one = surfel_from_pixel(f, maps, center, RigidTransform());
    CHECK(one.confidences.at(0) == doctest::Approx(1.0));
    // frontal plane: |n_z| = 1, depth 1 m, f = 500 px -> radius 2 mm
    CHECK(one.radii.at(0) == doctest::Approx(0.002).epsilon(1e-9));
    CHECK_THROWS_AS(surfel_from_pixel(f, maps, 0, RigidTransform()), ContractError);
}

TEST_CASE("surfel batch satisfies the type invariants on a random valid frame") {
    SyntheticScene scene = SyntheticScene::builtin("sphere", 3);
    scene.noise.base = 0.003;
    scene.seed = 3;
    RenderedFrame rf = render_synthetic(scene, 2);
    VertexNormalMaps maps = compute_vertex_normal_maps(rf.frame);
    SurfelBatch batch =
        surfels_from_frame(rf.frame, maps, RigidTransform::from_eigen(rf.pose));
    SurfelMap as_map;
    as_map.positions = batch.positions;
    as_map.normals = batch.normals;
    as_map.colors = batch.colors;
    as_map.radii = batch.radii;
    as_map.confidences = batch.confidences;
    as_map.last_seen.assign(static_cast<size_t>(batch.size()), 0);
    CHECK_NOTHROW(as_map.validate());
}

TEST_CASE("fusing a surfel with itself keeps position, doubles confidence") {
    CameraIntrinsics k = small_k();
    RGBDFrame f = plane_frame(k, 1.5);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    SurfelBatch batch = surfels_from_frame(f, maps, RigidTransform());

    SurfelMap map;
    map.positions = batch.positions.detach();
    map.normals = batch.normals.detach();
    map.colors = batch.colors.detach();
    map.radii = batch.radii.detach();
    map.confidences = batch.confidences.detach();
    map.last_seen.assign(static_cast<size_t>(batch.size()), 0);

    ActiveSet a = frustum_cull(map.positions, RigidTransform(), k);
    AssociationOptions opt;
    // tight falloff: the weight on any neighbouring element underflows to
    // zero, so each measurement fuses purely into its own element
    opt.sigma = 0.002;
    SoftAssociation assoc = soft_associate(maps, a, k, opt);
    SurfelMap fused = surfel_fuse(map, batch, assoc, 1);

    CHECK(fused.size() == map.size());  // nothing spawned
    for (Index i = 0; i < std::min<Index>(map.size(), 50); ++i) {
        for (int c = 0; c < 3; ++c)
            CHECK(fused.positions.at({i, c}) == doctest::Approx(map.positions.at({i, c})).epsilon(1e-9));
    }
    // each measurement distributes confidence alpha across candidates; total
    // map confidence grows by the total measurement confidence
    double before = 0, after = 0, meas = 0;
    for (Index i = 0; i < map.size(); ++i) before += map.confidences.at(i);
    for (Index i = 0; i < fused.size(); ++i) after += fused.confidences.at(i);
    for (Index i = 0; i < batch.size(); ++i) meas += batch.confidences.at(i);
    CHECK(after == doctest::Approx(before + meas).epsilon(1e-9));
}

TEST_CASE("fusing two equal-confidence surfels lands at the midpoint") {
    SurfelMap map;
    map.positions = Tensor::constant({1, 3}, {0, 0, 2});
    map.normals = Tensor::constant({1, 3}, {0, 0, -1});
    map.colors = Tensor::constant({1, 3}, {0.2, 0.2, 0.2});
    map.radii = Tensor::constant({1}, {0.01});
    map.confidences = Tensor::constant({1}, {1.0});
    map.last_seen = {0};

    SurfelBatch batch;
    batch.positions = Tensor::constant({1, 3}, {0.01, 0, 2});
    batch.normals = Tensor::constant({1, 3}, {0, 0, -1});
    batch.colors = Tensor::constant({1, 3}, {0.4, 0.4, 0.4});
    batch.radii = Tensor::constant({1}, {0.01});
    batch.confidences = Tensor::constant({1}, {1.0});
    batch.pixel_index = {5};

    SoftAssociation assoc;
    assoc.pair_pixel = {5};
    assoc.pair_element = {0};
    assoc.weights = Tensor::constant({1}, {1.0});
    SurfelMap fused = surfel_fuse(map, batch, assoc, 1);
    CHECK(fused.positions.at({0, 0}) == doctest::Approx(0.005));
    CHECK(fused.confidences.at(0) == doctest::Approx(2.0));
    CHECK(fused.colors.at({0, 0}) == doctest::Approx(0.3));
}

TEST_CASE("fusing into an empty map inserts exactly the valid measurements") {
    CameraIntrinsics k = small_k();
    RGBDFrame f = plane_frame(k, 1.2);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    SurfelBatch batch = surfels_from_frame(f, maps, RigidTransform());
    SurfelMap empty;
    SoftAssociation assoc;  // no candidates at all
    SurfelMap map = surfel_fuse(empty, batch, assoc, 0);
    CHECK(map.size() == batch.size());
    CHECK(map.size() == maps.valid_count());
}

TEST_CASE("repeated fusion of the same frame keeps the map compact") {
    CameraIntrinsics k = small_k();
    SyntheticScene scene = SyntheticScene::builtin("sphere", 1);
    scene.intrinsics = k;
    RenderedFrame rf = render_synthetic(scene, 0);
    VertexNormalMaps maps = compute_vertex_normal_maps(rf.frame);
    RigidTransform pose = RigidTransform::from_eigen(rf.pose);
    SurfelBatch batch = surfels_from_frame(rf.frame, maps, pose);

    AssociationOptions opt;
    opt.sigma = 2.0 * depth_noise_sigma(2.5);
    SurfelMap map = surfel_fuse(SurfelMap{}, batch, SoftAssociation{}, 0);
    const Index single = map.size();
    for (int rep = 1; rep <= 9; ++rep) {
        ActiveSet a = frustum_cull(map.positions, pose, k);
        SoftAssociation assoc = soft_associate(maps, a, k, opt);
        map = surfel_fuse(map, batch, assoc, rep);
    }
    CHECK(map.size() < static_cast<Index>(1.2 * static_cast<double>(single)));
    // confidence is monotone non-decreasing across fusions (spot check)
    CHECK(map.confidences.at(0) > 1.0);
}

TEST_CASE("gradient reaches pixels through fused map elements") {
    CameraIntrinsics k = small_k();
    SyntheticScene scene = SyntheticScene::builtin("plane", 1);
    scene.intrinsics = k;
    RenderedFrame rf = render_synthetic(scene, 0);

    Tape tape;
    RGBDFrame live = rf.frame.on_tape(tape, true);
    VertexNormalMaps maps = compute_vertex_normal_maps(live);
    SurfelBatch batch = surfels_from_frame(live, maps, RigidTransform());
    SurfelMap map = surfel_fuse(SurfelMap{}, batch, SoftAssociation{}, 0);

    ActiveSet a = frustum_cull(map.positions, RigidTransform(), k);
    AssociationOptions opt;
    opt.sigma = 0.02;
    SoftAssociation assoc = soft_associate(maps, a, k, opt);
    SurfelMap fused = surfel_fuse(map, batch, assoc, 1);

    Tensor loss = sum(fused.positions * fused.positions);
    tape.backward(loss);
    Tensor g = live.depth.grad();
    REQUIRE(g.defined());
    Index nonzero = 0;
    for (Index i = 0; i < g.numel(); ++i)
        if (g.at(i) != 0.0) ++nonzero;
    CHECK(nonzero > 100);
}

TEST_CASE("stale surfel cleanup is available off the differentiable path") {
    SurfelMap map;
    map.positions = Tensor::constant({2, 3}, {0, 0, 1, 0, 0, 2});
    map.normals = Tensor::constant({2, 3}, {0, 0, -1, 0, 0, -1});
    map.colors = Tensor::zeros({2, 3});
    map.radii = Tensor::constant({2}, {0.01, 0.01});
    map.confidences = Tensor::constant({2}, {5.0, 0.1});
    map.last_seen = {9, 0};
    map.frame_count = 10;
    SurfelMap cleaned = remove_stale_surfels(map, 1.0, 3);
    CHECK(cleaned.size() == 1);
    CHECK(cleaned.positions.at({0, 2}) == 1.0);
}

TEST_CASE("surfel ply export writes both ascii and binary") {
    namespace fs = std::filesystem;
    SurfelMap map;
    map.positions = Tensor::constant({2, 3}, {0, 0, 1, 1, 0, 2});
    map.normals = Tensor::constant({2, 3}, {0, 0, -1, 0, 0, -1});
    map.colors = Tensor::constant({2, 3}, {1, 0, 0, 0, 1, 0});
    map.radii = Tensor::constant({2}, {0.01, 0.02});
    map.confidences = Tensor::constant({2}, {1, 2});
    map.last_seen = {0, 0};
    const auto dir = fs::temp_directory_path();
    io::write_ply_surfels((dir / "diffslam_s.ply").string(), map, false);
    io::write_ply_surfels((dir / "diffslam_sb.ply").string(), map, true);
    std::ifstream in(dir / "diffslam_s.ply");
    std::string head;
    std::getline(in, head);
    CHECK(head == "ply");
    CHECK(fs::file_size(dir / "diffslam_sb.ply") > 0);
}
