#include "diffslam/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "diffslam/io/png_io.hpp"

namespace fs = std::filesystem;

namespace diffslam {

namespace {

const double kTumDepthScale = 1.0 / 5000.0;

struct StampedPath {
    double timestamp;
    std::string path;
};

std::vector<StampedPath> read_file_list(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("dataset: cannot open " + path);
    std::vector<StampedPath> out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream is(line);
        StampedPath sp;
        if (!(is >> sp.timestamp >> sp.path))
            throw IoError("dataset: malformed line " + std::to_string(lineno) + " in " + path);
        out.push_back(sp);
    }
    return out;
}

CameraIntrinsics default_intrinsics(DatasetKind kind) {
    CameraIntrinsics k;
    k.width = 640;
    k.height = 480;
    if (kind == DatasetKind::icl_nuim) {
        k.fx = 481.2;
        k.fy = 480.0;
        k.cx = 319.5;
        k.cy = 239.5;
    } else {
        // TUM Freiburg default calibration
        k.fx = 525.0;
        k.fy = 525.0;
        k.cx = 319.5;
        k.cy = 239.5;
    }
    k.depth_scale = kTumDepthScale;
    return k;
}

}  // namespace

SequenceSource parse_dataset_spec(const std::string& spec) {
    const auto colon = spec.find(':');
    if (colon == std::string::npos)
        throw ContractError("dataset spec '" + spec + "' must look like kind:path");
    const std::string kind = spec.substr(0, colon);
    SequenceSource src;
    src.root = spec.substr(colon + 1);
    if (src.root.empty()) throw ContractError("dataset spec '" + spec + "' has an empty path");
    if (kind == "tum") {
        src.kind = DatasetKind::tum;
    } else if (kind == "icl" || kind == "icl-nuim") {
        src.kind = DatasetKind::icl_nuim;
    } else if (kind == "synthetic") {
        src.kind = DatasetKind::synthetic;
    } else {
        throw ContractError("unknown dataset kind '" + kind + "'");
    }
    return src;
}

SequenceLoader::SequenceLoader(SequenceSource source) : source_(std::move(source)) {
    if (source_.stride < 1) throw ContractError("dataset: stride must be >= 1");

    if (source_.kind == DatasetKind::synthetic) {
        const bool is_file = source_.root.find('.') != std::string::npos && fs::exists(source_.root);
        scene_ = std::make_shared<SyntheticScene>(
            is_file ? SyntheticScene::load(source_.root)
                    : SyntheticScene::builtin(source_.root, source_.synthetic_frames));
        intrinsics_ = scene_->intrinsics;
        Trajectory gt;
        for (size_t i = 0; i < scene_->trajectory.size(); ++i) {
            if (static_cast<int>(entries_.size()) == source_.max_frames) break;
            if (i % static_cast<size_t>(source_.stride)) continue;
            Entry e;
            e.timestamp = scene_->trajectory.poses[i].timestamp;
            e.scene_index = i;
            entries_.push_back(e);
            gt.poses.push_back(scene_->trajectory.poses[i]);
        }
        ground_truth_ = std::move(gt);
        return;
    }

    const fs::path root(source_.root);
    if (!fs::exists(root)) throw IoError("dataset: directory " + source_.root + " does not exist");

    // intrinsics sidecar wins over the per-dataset default
    intrinsics_ = default_intrinsics(source_.kind);
    for (const char* name : {"intrinsics.json", "intrinsics.txt", "calibration.txt"}) {
        if (fs::exists(root / name)) {
            intrinsics_ = CameraIntrinsics::load((root / name).string());
            break;
        }
    }
    if (source_.depth_scale > 0) intrinsics_.depth_scale = source_.depth_scale;

    std::vector<std::array<std::string, 2>> pairs;  // color, depth
    std::vector<double> stamps;
    if (fs::exists(root / "associations.txt")) {
        std::ifstream in(root / "associations.txt");
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto first = line.find_first_not_of(" \t\r");
            if (first == std::string::npos || line[first] == '#') continue;
            std::istringstream is(line);
            double ts_a, ts_b;
            std::string path_a, path_b;
            if (!(is >> ts_a >> path_a >> ts_b >> path_b))
                throw IoError("dataset: malformed line " + std::to_string(lineno) +
                              " in associations.txt");
            // convention-agnostic: depth entries mention "depth"
            const bool a_is_depth = path_a.find("depth") != std::string::npos;
            stamps.push_back(a_is_depth ? ts_b : ts_a);
            pairs.push_back(a_is_depth ? std::array<std::string, 2>{path_b, path_a}
                                       : std::array<std::string, 2>{path_a, path_b});
        }
    } else if (fs::exists(root / "rgb.txt") && fs::exists(root / "depth.txt")) {
        auto rgb = read_file_list((root / "rgb.txt").string());
        auto dep = read_file_list((root / "depth.txt").string());
        // nearest-timestamp association within the allowed gap
        size_t j = 0;
        for (const auto& r : rgb) {
            while (j + 1 < dep.size() &&
                   std::abs(dep[j + 1].timestamp - r.timestamp) <=
                       std::abs(dep[j].timestamp - r.timestamp))
                ++j;
            if (j < dep.size() &&
                std::abs(dep[j].timestamp - r.timestamp) <= source_.association_max_dt) {
                stamps.push_back(r.timestamp);
                pairs.push_back({r.path, dep[j].path});
            }
        }
    } else {
        throw IoError("dataset: " + source_.root +
                      " has neither associations.txt nor rgb.txt/depth.txt");
    }

    for (size_t i = 0; i < pairs.size(); ++i) {
        if (static_cast<int>(entries_.size()) == source_.max_frames) break;
        if (i % static_cast<size_t>(source_.stride)) continue;
        Entry e;
        e.timestamp = stamps[i];
        e.color_path = (root / pairs[i][0]).string();
        e.depth_path = (root / pairs[i][1]).string();
        entries_.push_back(e);
    }
    if (fs::exists(root / "groundtruth.txt"))
        ground_truth_ = Trajectory::load_tum((root / "groundtruth.txt").string());
}

size_t SequenceLoader::size() const { return entries_.size(); }

double SequenceLoader::timestamp(size_t i) const {
    if (i >= entries_.size()) throw ContractError("dataset: frame index out of range");
    return entries_[i].timestamp;
}

RGBDFrame SequenceLoader::frame(size_t i) const {
    if (i >= entries_.size()) throw ContractError("dataset: frame index out of range");
    const Entry& e = entries_[i];
    if (scene_) return render_synthetic(*scene_, e.scene_index).frame;

    io::ImageU8 rgb = io::read_png_rgb8(e.color_path);
    io::ImageU16 dep = io::read_png_gray16(e.depth_path);
    if (rgb.width != dep.width || rgb.height != dep.height)
        throw IoError("dataset: color/depth size mismatch for " + e.color_path);

    const Index h = rgb.height, w = rgb.width;
    std::vector<double> color(static_cast<size_t>(h * w * 3));
    for (size_t p = 0; p < color.size(); ++p) color[p] = rgb.pixels[p] / 255.0;
    std::vector<double> depth(static_cast<size_t>(h * w));
    for (size_t p = 0; p < depth.size(); ++p)
        depth[p] = dep.pixels[p] * intrinsics_.depth_scale;  // zero stays zero -> invalid

    RGBDFrame f;
    f.timestamp = e.timestamp;
    f.intrinsics = intrinsics_;
    f.intrinsics.width = static_cast<int>(w);
    f.intrinsics.height = static_cast<int>(h);
    f.color = Tensor::constant({h, w, 3}, std::move(color));
    f.depth = Tensor::constant({h, w}, std::move(depth));
    f.refresh_valid();
    return f;
}

void export_tum_layout(const std::string& out_dir, const std::vector<RGBDFrame>& frames,
                       const CameraIntrinsics& intrinsics, const Trajectory* ground_truth) {
    const fs::path root(out_dir);
    fs::create_directories(root / "rgb");
    fs::create_directories(root / "depth");

    std::ofstream assoc(root / "associations.txt");
    if (!assoc) throw IoError("dataset: cannot write associations in " + out_dir);
    char name[64];
    for (size_t i = 0; i < frames.size(); ++i) {
        const RGBDFrame& f = frames[i];
        const Index h = f.height(), w = f.width();
        std::snprintf(name, sizeof(name), "%06zu.png", i);

        io::ImageU8 rgb;
        rgb.width = static_cast<int>(w);
        rgb.height = static_cast<int>(h);
        rgb.pixels.resize(static_cast<size_t>(h * w * 3));
        auto cd = f.color.data();
        for (size_t p = 0; p < rgb.pixels.size(); ++p)
            rgb.pixels[p] = static_cast<std::uint8_t>(
                std::lround(std::clamp(cd[static_cast<Index>(p)], 0.0, 1.0) * 255.0));
        io::write_png_rgb8((root / "rgb" / name).string(), rgb);

        io::ImageU16 dep;
        dep.width = static_cast<int>(w);
        dep.height = static_cast<int>(h);
        dep.pixels.resize(static_cast<size_t>(h * w));
        auto dd = f.depth.data();
        for (size_t p = 0; p < dep.pixels.size(); ++p) {
            const double units = dd[static_cast<Index>(p)] / intrinsics.depth_scale;
            dep.pixels[p] = (units > 0 && units <= 65535.0)
                                ? static_cast<std::uint16_t>(std::lround(units))
                                : 0;
        }
        io::write_png_gray16((root / "depth" / name).string(), dep);

        char line[160];
        std::snprintf(line, sizeof(line), "%.6f rgb/%s %.6f depth/%s\n", f.timestamp, name,
                      f.timestamp, name);
        assoc << line;
    }
    intrinsics.save((root / "intrinsics.json").string());
    if (ground_truth) ground_truth->save_tum((root / "groundtruth.txt").string());
}

}  // namespace diffslam
