#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <fstream>
#include <random>

#include "diffslam/frame.hpp"
#include "diffslam/geometry.hpp"
#include "support/gradcheck.hpp"

using namespace diffslam;
using gradcheck::check_leaf_gradient;

namespace {

CameraIntrinsics test_intrinsics(int w = 16, int h = 12) {
    CameraIntrinsics k;
    k.fx = 20.0;
    k.fy = 22.0;
    k.cx = (w - 1) / 2.0;
    k.cy = (h - 1) / 2.0;
    k.width = w;
    k.height = h;
    return k;
}

RGBDFrame constant_depth_frame(double d, const CameraIntrinsics& k) {
    RGBDFrame f;
    f.intrinsics = k;
    f.depth = Tensor::full({k.height, k.width}, d);
    f.color = Tensor::full({k.height, k.width, 3}, 0.5);
    f.refresh_valid();
    return f;
}

}  // namespace

TEST_CASE("so3_exp at zero is the identity") {
    Tensor R = so3_exp(Tensor::zeros({3}));
    for (Index i = 0; i < 3; ++i)
        for (Index j = 0; j < 3; ++j) CHECK(R.at({i, j}) == (i == j ? 1.0 : 0.0));
}

TEST_CASE("so3_exp quarter turn about x maps y to z") {
    Tensor R = so3_exp(Tensor::constant({3}, {M_PI / 2, 0, 0}));
    Tensor v = matmul(R, Tensor::constant({3, 1}, {0, 1, 0}));
    CHECK(std::abs(v.at(0)) < 1e-12);
    CHECK(std::abs(v.at(1)) < 1e-12);
    CHECK(std::abs(v.at(2) - 1.0) < 1e-12);
}

TEST_CASE("so3_exp gradient matches finite differences across magnitudes") {
    std::mt19937_64 rng(41);
    std::uniform_real_distribution<double> dir(-1, 1);
    for (double mag : {1e-8, 1e-5, 0.3, 1.5, 3.0}) {
        Eigen::Vector3d axis(dir(rng), dir(rng), dir(rng));
        axis.normalize();
        std::vector<double> w0 = {axis.x() * mag, axis.y() * mag, axis.z() * mag};
        Tensor probe = Tensor::constant({3, 3}, {0.3, -0.7, 0.2, 0.9, 0.1, -0.4, 0.5, 0.6, -0.2});
        auto r = check_leaf_gradient({3}, w0, [&](const Tensor& t) {
            return sum(so3_exp(t) * probe);
        });
        CAPTURE(mag);
        CHECK(r.max_rel_err < 1e-5);
    }
}

TEST_CASE("se3 exp/log fixed points") {
    RigidTransform T = se3_exp(Tensor::zeros({6}));
    Eigen::Matrix4d m = T.to_eigen();
    CHECK(m.isApprox(Eigen::Matrix4d::Identity(), 1e-15));
    Tensor xi = se3_log(RigidTransform());
    for (Index i = 0; i < 6; ++i) CHECK(xi.at(i) == 0.0);
}

TEST_CASE("pure translation twist keeps rotation identity") {
    RigidTransform T = se3_exp(Tensor::constant({6}, {0, 0, 0, 0.5, -0.25, 2.0}));
    Eigen::Matrix4d m = T.to_eigen();
    CHECK(m.block<3, 3>(0, 0).isApprox(Eigen::Matrix3d::Identity(), 1e-15));
    CHECK(m(0, 3) == doctest::Approx(0.5));
    CHECK(m(2, 3) == doctest::Approx(2.0));
}

TEST_CASE("se3 round trip over 1000 random twists") {
    std::mt19937_64 rng(97);
    std::uniform_real_distribution<double> rot(-1.0, 1.0), trans(-5.0, 5.0);
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
        std::vector<double> xi(6);
        // keep |omega| clear of pi
        Eigen::Vector3d w(rot(rng), rot(rng), rot(rng));
        if (w.norm() > 1e-12) w *= (rot(rng) * 0.5 + 0.5) * 3.0 / w.norm();
        xi[0] = w.x();
        xi[1] = w.y();
        xi[2] = w.z();
        for (int i = 3; i < 6; ++i) xi[static_cast<size_t>(i)] = trans(rng);
        Tensor twist = Tensor::constant({6}, xi);
        Tensor back = se3_log(se3_exp(twist));
        for (Index i = 0; i < 6; ++i) worst = std::max(worst, std::abs(back.at(i) - xi[static_cast<size_t>(i)]));
    }
    CHECK(worst < 1e-9);
}

TEST_CASE("se3_log near pi raises a singularity error") {
    Tensor twist = Tensor::constant({6}, {M_PI - 1e-9, 0, 0, 0, 0, 0});
    CHECK_THROWS_AS(se3_log(se3_exp(twist)), SingularityError);
}

TEST_CASE("rotation block stays orthonormal after exp") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> d(-2.5, 2.5);
    for (int k = 0; k < 50; ++k) {
        std::vector<double> xi(6);
        for (auto& x : xi) x = d(rng);
        Eigen::Matrix4d m = se3_exp(Tensor::constant({6}, xi)).to_eigen();
        Eigen::Matrix3d R = m.block<3, 3>(0, 0);
        CHECK((R * R.transpose() - Eigen::Matrix3d::Identity()).norm() < 1e-9);
        CHECK(R.determinant() == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(m(3, 0) == 0.0);
        CHECK(m(3, 3) == 1.0);
    }
}

TEST_CASE("transform_project: optical axis point hits the principal point") {
    CameraIntrinsics k = test_intrinsics();
    Tensor p = Tensor::constant({1, 3}, {0, 0, 1});
    auto r = transform_project(p, RigidTransform(), k);
    CHECK(r.valid[0] == 1);
    CHECK(r.coords.at({0, 0}) == doctest::Approx(k.cx));
    CHECK(r.coords.at({0, 1}) == doctest::Approx(k.cy));
    CHECK(r.depth.at(0) == doctest::Approx(1.0));
}

TEST_CASE("transform_project: +x camera shift moves pixels by -fx*dx/z") {
    CameraIntrinsics k = test_intrinsics();
    Tensor p = Tensor::constant({1, 3}, {0.1, -0.05, 2.0});
    auto base = transform_project(p, RigidTransform(), k);
    const double dx = 0.02;
    // moving the camera +x equals transforming points by -x
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m(0, 3) = -dx;
    auto shifted = transform_project(p, RigidTransform::from_eigen(m), k);
    const double expected = base.coords.at({0, 0}) - k.fx * dx / 2.0;
    CHECK(shifted.coords.at({0, 0}) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("points behind the camera are masked invalid") {
    CameraIntrinsics k = test_intrinsics();
    Tensor p = Tensor::constant({2, 3}, {0, 0, -1, 0, 0, 1});
    auto r = transform_project(p, RigidTransform(), k);
    CHECK(r.valid[0] == 0);
    CHECK(r.valid[1] == 1);
}

TEST_CASE("projected coords differentiate through the twist") {
    CameraIntrinsics k = test_intrinsics();
    Tensor pts = Tensor::constant({2, 3}, {0.2, 0.1, 1.5, -0.3, 0.05, 2.5});
    std::vector<double> xi0 = {0.02, -0.01, 0.03, 0.05, -0.02, 0.01};
    auto r = check_leaf_gradient({6}, xi0, [&](const Tensor& t) {
        auto pr = transform_project(pts, se3_exp(t), k);
        return sum(sin(pr.coords));
    });
    CHECK(r.max_rel_err < 1e-5);
}

TEST_CASE("backproject: principal point maps to the optical axis") {
    CameraIntrinsics k = test_intrinsics(17, 13);  // odd: principal point on a pixel
    RGBDFrame f = constant_depth_frame(2.0, k);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    const Index cy = static_cast<Index>(k.cy), cx = static_cast<Index>(k.cx);
    CHECK(maps.vertices.at({cy, cx, 0}) == doctest::Approx(0.0));
    CHECK(maps.vertices.at({cy, cx, 1}) == doctest::Approx(0.0));
    CHECK(maps.vertices.at({cy, cx, 2}) == doctest::Approx(2.0));
}

TEST_CASE("constant-depth plane has camera-facing normals") {
    CameraIntrinsics k = test_intrinsics();
    RGBDFrame f = constant_depth_frame(1.5, k);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    Index n_checked = 0;
    for (Index i = 0; i < k.height; ++i) {
        for (Index j = 0; j < k.width; ++j) {
            const bool border = i == 0 || j == 0 || i == k.height - 1 || j == k.width - 1;
            CHECK(maps.valid[static_cast<size_t>(i * k.width + j)] == (border ? 0 : 1));
            if (border) continue;
            CHECK(maps.normals.at({i, j, 2}) == doctest::Approx(-1.0));
            ++n_checked;
        }
    }
    CHECK(n_checked == (k.height - 2) * (k.width - 2));
}

TEST_CASE("backprojected synthetic sphere lies on the sphere") {
    CameraIntrinsics k = test_intrinsics(24, 20);
    const Eigen::Vector3d center(0.0, 0.0, 2.0);
    const double radius = 0.8;
    // depth(u,v): smallest z with || z*dir - center || = radius
    std::vector<double> depth(static_cast<size_t>(k.height * k.width), 0.0);
    for (Index v = 0; v < k.height; ++v) {
        for (Index u = 0; u < k.width; ++u) {
            Eigen::Vector3d dir((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            const double a = dir.squaredNorm();
            const double b = -2.0 * dir.dot(center);
            const double c = center.squaredNorm() - radius * radius;
            const double disc = b * b - 4 * a * c;
            if (disc < 0) continue;
            depth[static_cast<size_t>(v * k.width + u)] = (-b - std::sqrt(disc)) / (2 * a);
        }
    }
    RGBDFrame f;
    f.intrinsics = k;
    f.depth = Tensor::constant({k.height, k.width}, depth);
    f.color = Tensor::zeros({k.height, k.width, 3});
    f.refresh_valid();
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    Index n_on_sphere = 0;
    for (Index v = 0; v < k.height; ++v) {
        for (Index u = 0; u < k.width; ++u) {
            if (depth[static_cast<size_t>(v * k.width + u)] <= 0) continue;
            Eigen::Vector3d p(maps.vertices.at({v, u, 0}), maps.vertices.at({v, u, 1}),
                              maps.vertices.at({v, u, 2}));
            CHECK(std::abs((p - center).norm() - radius) < 1e-6);
            ++n_on_sphere;
        }
    }
    CHECK(n_on_sphere > 50);
}

TEST_CASE("projection of backprojection is the pixel identity") {
    CameraIntrinsics k = test_intrinsics();
    RGBDFrame f = constant_depth_frame(1.2, k);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    Tensor pts = maps.vertices.reshape({k.height * k.width, 3});
    auto r = transform_project(pts, RigidTransform(), k);
    for (Index v = 0; v < k.height; ++v) {
        for (Index u = 0; u < k.width; ++u) {
            const Index i = v * k.width + u;
            CHECK(std::abs(r.coords.at({i, 0}) - u) < 1e-6);
            CHECK(std::abs(r.coords.at({i, 1}) - v) < 1e-6);
        }
    }
}

TEST_CASE("geometry results stay on the active tape") {
    CameraIntrinsics k = test_intrinsics();
    Tape tape;
    RGBDFrame f = constant_depth_frame(1.0, k).on_tape(tape, true);
    VertexNormalMaps maps = compute_vertex_normal_maps(f);
    CHECK(maps.vertices.requires_grad());
    CHECK(maps.normals.requires_grad());
    Tensor loss = sum(maps.vertices * maps.vertices);
    tape.backward(loss);
    CHECK(f.depth.has_grad());
}

TEST_CASE("intrinsics sidecar round trips through text and json") {
    CameraIntrinsics k = test_intrinsics();
    k.depth_scale = 1.0 / 5000.0;
    k.save("/tmp/diffslam_intr.json");
    CameraIntrinsics j = CameraIntrinsics::load("/tmp/diffslam_intr.json");
    CHECK(j.fx == k.fx);
    CHECK(j.width == k.width);
    CHECK(j.depth_scale == doctest::Approx(k.depth_scale));
    {
        std::ofstream out("/tmp/diffslam_intr.txt");
        out << "20 22 7.5 5.5 16 12 0.0002\n";
    }
    CameraIntrinsics t = CameraIntrinsics::load("/tmp/diffslam_intr.txt");
    CHECK(t.fy == 22.0);
    CHECK(t.depth_scale == doctest::Approx(0.0002));
    CHECK_THROWS_AS(CameraIntrinsics::load("/tmp/does_not_exist_xyz"), IoError);
}

TEST_CASE("downsample_half halves intrinsics and keeps depth metric") {
    CameraIntrinsics k = test_intrinsics(16, 12);
    RGBDFrame f = constant_depth_frame(1.75, k);
    RGBDFrame h = downsample_half(f);
    CHECK(h.width() == 8);
    CHECK(h.height() == 6);
    CHECK(h.intrinsics.fx == doctest::Approx(k.fx / 2));
    CHECK(h.depth.at({3, 4}) == doctest::Approx(1.75));
    CHECK(h.color.at({3, 4, 1}) == doctest::Approx(0.5));
}
