#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "diffslam/dataset.hpp"
#include "diffslam/io/png_io.hpp"

using namespace diffslam;
namespace fs = std::filesystem;

namespace {
fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("diffslam_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}
}  // namespace

TEST_CASE("png round trip preserves 16-bit depth and 8-bit color") {
    auto dir = temp_dir("png");
    io::ImageU16 d;
    d.width = 5;
    d.height = 4;
    d.pixels = {0,     1,     5000,  65535, 12345, 1, 2, 3, 4, 5,
                40000, 30000, 20000, 10000, 999,   7, 8, 9, 10, 11};
    io::write_png_gray16((dir / "d.png").string(), d);
    io::ImageU16 d2 = io::read_png_gray16((dir / "d.png").string());
    CHECK(d2.width == 5);
    CHECK(d2.pixels == d.pixels);

    io::ImageU8 c;
    c.width = 3;
    c.height = 2;
    c.pixels = {0, 10, 20, 255, 127, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13};
    io::write_png_rgb8((dir / "c.png").string(), c);
    io::ImageU8 c2 = io::read_png_rgb8((dir / "c.png").string());
    CHECK(c2.pixels == c.pixels);

    CHECK_THROWS_AS(io::read_png_rgb8((dir / "missing.png").string()), IoError);
}

TEST_CASE("trajectory tum format round trip") {
    auto dir = temp_dir("traj");
    Trajectory t;
    for (int i = 0; i < 5; ++i) {
        TimedPose tp;
        tp.timestamp = 0.1 * i;
        tp.pose = look_at(Eigen::Vector3d(0.2 * i, -0.1, -2.0 + 0.05 * i), Eigen::Vector3d::Zero());
        t.poses.push_back(tp);
    }
    t.save_tum((dir / "traj.txt").string());
    Trajectory r = Trajectory::load_tum((dir / "traj.txt").string());
    REQUIRE(r.size() == 5);
    for (size_t i = 0; i < 5; ++i) {
        CHECK((r.poses[i].pose - t.poses[i].pose).norm() < 1e-7);
        CHECK(r.poses[i].timestamp == doctest::Approx(t.poses[i].timestamp));
    }

    std::ofstream bad((dir / "bad.txt").string());
    bad << "# ok\n1.0 0 0 0 garbage\n";
    bad.close();
    CHECK_THROWS_WITH_AS(Trajectory::load_tum((dir / "bad.txt").string()),
                         doctest::Contains("line 2"), IoError);
}

TEST_CASE("tum depth scale: png value 5000 reads as 1 meter") {
    auto dir = temp_dir("tumscale");
    fs::create_directories(dir / "rgb");
    fs::create_directories(dir / "depth");
    io::ImageU8 rgb;
    rgb.width = 4;
    rgb.height = 4;
    rgb.pixels.assign(4 * 4 * 3, 128);
    io::write_png_rgb8((dir / "rgb" / "0.png").string(), rgb);
    io::ImageU16 dep;
    dep.width = 4;
    dep.height = 4;
    dep.pixels.assign(16, 5000);
    dep.pixels[3] = 0;  // invalid pixel
    io::write_png_gray16((dir / "depth" / "0.png").string(), dep);
    std::ofstream assoc((dir / "associations.txt").string());
    assoc << "0.0 rgb/0.png 0.0 depth/0.png\n";
    assoc.close();

    SequenceLoader loader(parse_dataset_spec("tum:" + dir.string()));
    REQUIRE(loader.size() == 1);
    RGBDFrame f = loader.frame(0);
    CHECK(f.depth.at({0, 0}) == doctest::Approx(1.0));
    CHECK(f.valid[3] == 0);
    CHECK(f.valid[0] == 1);
    CHECK(f.color.at({0, 0, 0}) == doctest::Approx(128 / 255.0));
}

TEST_CASE("rgb/depth list association respects the 0.02 s gap") {
    auto dir = temp_dir("assoc");
    fs::create_directories(dir / "rgb");
    fs::create_directories(dir / "depth");
    io::ImageU8 rgb;
    rgb.width = 2;
    rgb.height = 2;
    rgb.pixels.assign(12, 10);
    io::ImageU16 dep;
    dep.width = 2;
    dep.height = 2;
    dep.pixels.assign(4, 1000);
    for (int i = 0; i < 3; ++i) {
        io::write_png_rgb8((dir / "rgb" / (std::to_string(i) + ".png")).string(), rgb);
        io::write_png_gray16((dir / "depth" / (std::to_string(i) + ".png")).string(), dep);
    }
    {
        std::ofstream r((dir / "rgb.txt").string());
        r << "1.00 rgb/0.png\n1.10 rgb/1.png\n1.20 rgb/2.png\n";
        std::ofstream d((dir / "depth.txt").string());
        // first matches within 5 ms, second is 80 ms away (dropped), third matches
        d << "1.005 depth/0.png\n1.18 depth/1.png\n1.201 depth/2.png\n";
    }
    SequenceLoader loader(parse_dataset_spec("tum:" + dir.string()));
    CHECK(loader.size() == 2);
}

TEST_CASE("camera 2 m from a unit sphere on axis: center pixel depth is 1 m") {
    SyntheticScene scene;
    scene.intrinsics.fx = scene.intrinsics.fy = 60.0;
    scene.intrinsics.cx = scene.intrinsics.cy = 32.0;  // integer principal point
    scene.intrinsics.width = scene.intrinsics.height = 65;
    scene.spheres.push_back({Eigen::Vector3d(0, 0, 2), 1.0, Eigen::Vector3d(1, 0, 0)});
    scene.trajectory.poses.push_back({0.0, Eigen::Matrix4d::Identity()});
    RenderedFrame rf = render_synthetic(scene, 0);
    CHECK(rf.frame.depth.at({32, 32}) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("builtin sphere orbit: backprojected sphere pixels lie on the unit sphere") {
    SyntheticScene scene = SyntheticScene::builtin("sphere", 3);
    for (size_t fi = 0; fi < 3; ++fi) {
        RenderedFrame rf = render_synthetic(scene, fi);
        VertexNormalMaps maps = compute_vertex_normal_maps(rf.frame);
        const Eigen::Matrix3d R = rf.pose.block<3, 3>(0, 0);
        const Eigen::Vector3d t = rf.pose.block<3, 1>(0, 3);
        Index on_sphere = 0;
        for (Index i = 0; i < scene.intrinsics.height; ++i) {
            for (Index j = 0; j < scene.intrinsics.width; ++j) {
                if (rf.frame.depth.at({i, j}) <= 0) continue;
                Eigen::Vector3d pc(maps.vertices.at({i, j, 0}), maps.vertices.at({i, j, 1}),
                                   maps.vertices.at({i, j, 2}));
                Eigen::Vector3d pw = R * pc + t;
                const double err = std::abs(pw.norm() - 1.0);
                if (err < 1e-9) ++on_sphere;
            }
        }
        CHECK(on_sphere > 200);  // the sphere dominates the middle of the frame
    }
}

TEST_CASE("noise-free plane render backprojects exactly planar") {
    SyntheticScene scene = SyntheticScene::builtin("plane", 2);
    RenderedFrame rf = render_synthetic(scene, 0);
    VertexNormalMaps maps = compute_vertex_normal_maps(rf.frame);
    // wall fills the frame at z=2.2 except where the box sits (z in [1.7,2.2])
    Index checked = 0;
    for (Index i = 0; i < scene.intrinsics.height; ++i) {
        for (Index j = 0; j < scene.intrinsics.width; ++j) {
            const double z = maps.vertices.at({i, j, 2});
            if (z <= 0) continue;
            const bool on_wall = std::abs(z - 2.2) < 1e-9;
            const bool on_box = z >= 1.7 - 1e-9 && z <= 2.2 + 1e-9;
            CHECK((on_wall || on_box));
            ++checked;
        }
    }
    CHECK(checked > 1000);
}

TEST_CASE("noisy render matches the configured depth noise model") {
    SyntheticScene scene = SyntheticScene::builtin("plane", 2);
    scene.noise.base = 0.004;
    scene.seed = 11;
    RenderedFrame noisy = render_synthetic(scene, 0);
    scene.noise.base = 0.0;
    RenderedFrame clean = render_synthetic(scene, 0);
    double sum = 0, sum2 = 0;
    Index n = 0;
    for (Index p = 0; p < clean.frame.depth.numel(); ++p) {
        if (clean.frame.depth.at(p) <= 0) continue;
        const double d = noisy.frame.depth.at(p) - clean.frame.depth.at(p);
        sum += d;
        sum2 += d * d;
        ++n;
    }
    const double std_emp = std::sqrt(sum2 / n - (sum / n) * (sum / n));
    CHECK(std_emp == doctest::Approx(0.004).epsilon(0.10));
}

TEST_CASE("renders are deterministic given scene and seed") {
    SyntheticScene scene = SyntheticScene::builtin("sphere", 2);
    scene.noise.base = 0.01;
    scene.seed = 99;
    RenderedFrame a = render_synthetic(scene, 1);
    RenderedFrame b = render_synthetic(scene, 1);
    CHECK(a.frame.depth.to_vector() == b.frame.depth.to_vector());
}

TEST_CASE("perturbations: occluder, reproducible noise, bounds") {
    SyntheticScene scene = SyntheticScene::builtin("plane", 1);
    RGBDFrame f = render_synthetic(scene, 0).frame;
    const Index w = f.width();

    PixelRegion r{12, 12, 40, 40};
    RGBDFrame occ = apply_perturbation(f, PerturbationKind::occluder, r, 0);
    Index modified = 0;
    for (Index i = 0; i < f.depth.numel(); ++i)
        if (occ.depth.at(i) != f.depth.at(i)) ++modified;
    CHECK(modified == 1600);
    CHECK(occ.depth.at({20, 20}) == 0.5);

    RGBDFrame empty = apply_perturbation(f, PerturbationKind::occluder, PixelRegion{0, 0, 0, 0}, 0);
    CHECK(empty.depth.to_vector() == f.depth.to_vector());

    RGBDFrame n1 = apply_perturbation(f, PerturbationKind::pixel_noise, r, 7, 0.02);
    RGBDFrame n2 = apply_perturbation(f, PerturbationKind::pixel_noise, r, 7, 0.02);
    CHECK(n1.depth.to_vector() == n2.depth.to_vector());
    RGBDFrame n3 = apply_perturbation(f, PerturbationKind::uniform_noise, r, 8);
    CHECK(n3.depth.at({13, 13}) >= 0.3);
    CHECK(n3.depth.at({13, 13}) <= 3.0);
    // outside the region untouched
    CHECK(n3.depth.at({5, 5}) == f.depth.at(5 * w + 5));

    CHECK_THROWS_AS(apply_perturbation(f, PerturbationKind::occluder, PixelRegion{60, 60, 20, 20}, 0),
                    ContractError);
}

TEST_CASE("synthetic -> tum export -> reload reaches a quantization fixed point") {
    auto dir1 = temp_dir("round1");
    auto dir2 = temp_dir("round2");
    SyntheticScene scene = SyntheticScene::builtin("sphere", 2);
    std::vector<RGBDFrame> frames;
    Trajectory gt;
    for (size_t i = 0; i < 2; ++i) {
        RenderedFrame rf = render_synthetic(scene, i);
        frames.push_back(rf.frame);
        gt.poses.push_back({rf.frame.timestamp, rf.pose});
    }
    export_tum_layout(dir1.string(), frames, scene.intrinsics, &gt);

    SequenceLoader first(parse_dataset_spec("tum:" + dir1.string()));
    REQUIRE(first.size() == 2);
    CHECK(first.ground_truth().has_value());
    std::vector<RGBDFrame> loaded1;
    for (size_t i = 0; i < first.size(); ++i) loaded1.push_back(first.frame(i));

    export_tum_layout(dir2.string(), loaded1, first.intrinsics(), nullptr);
    SequenceLoader second(parse_dataset_spec("tum:" + dir2.string()));
    for (size_t i = 0; i < second.size(); ++i) {
        RGBDFrame a = loaded1[i];
        RGBDFrame b = second.frame(i);
        CHECK(a.depth.to_vector() == b.depth.to_vector());  // bit-identical
        CHECK(a.color.to_vector() == b.color.to_vector());
        CHECK(a.valid == b.valid);
    }
}

TEST_CASE("loader never yields frames violating the frame invariants") {
    SyntheticScene scene = SyntheticScene::builtin("corner", 4);
    scene.noise.base = 0.01;
    SequenceSource src;
    src.kind = DatasetKind::synthetic;
    src.root = "corner";
    src.synthetic_frames = 4;
    SequenceLoader loader(src);
    for (size_t i = 0; i < loader.size(); ++i) {
        RGBDFrame f = loader.frame(i);
        auto d = f.depth.data();
        auto c = f.color.data();
        for (Index p = 0; p < f.depth.numel(); ++p) {
            if (f.valid[static_cast<size_t>(p)]) CHECK(d[p] > 0.0);
            CHECK(std::isfinite(d[p]));
        }
        for (Index p = 0; p < f.color.numel(); ++p) CHECK(std::isfinite(c[p]));
    }
}

TEST_CASE("dataset spec parsing and stride/max_frames") {
    CHECK_THROWS_AS(parse_dataset_spec("nonsense"), ContractError);
    CHECK_THROWS_AS(parse_dataset_spec("weird:/x"), ContractError);
    SequenceSource src = parse_dataset_spec("synthetic:sphere");
    src.synthetic_frames = 10;
    src.stride = 2;
    src.max_frames = 3;
    SequenceLoader loader(src);
    CHECK(loader.size() == 3);
    CHECK(loader.timestamp(1) > loader.timestamp(0));
    CHECK(loader.scene() != nullptr);
}
