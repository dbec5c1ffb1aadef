#include "diffslam/geometry.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace diffslam {

namespace {
const double kSmallAngle = 1e-6;  // rad; below this Rodrigues uses Taylor terms

Tensor identity3() {
    return Tensor::constant({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
}
}  // namespace

void CameraIntrinsics::validate() const {
    if (fx <= 0 || fy <= 0) throw ContractError("intrinsics: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ContractError("intrinsics: image size must be positive");
    if (cx < 0 || cx >= width || cy < 0 || cy >= height)
        throw ContractError("intrinsics: principal point outside image");
    if (depth_scale <= 0) throw ContractError("intrinsics: depth_scale must be positive");
}

CameraIntrinsics CameraIntrinsics::scaled(int factor) const {
    if (factor < 1) throw ContractError("intrinsics: scale factor must be >= 1");
    CameraIntrinsics k = *this;
    const double f = static_cast<double>(factor);
    k.fx = fx / f;
    k.fy = fy / f;
    // pixel centers sit at integer coordinates
    k.cx = (cx + 0.5) / f - 0.5;
    k.cy = (cy + 0.5) / f - 0.5;
    k.width = width / factor;
    k.height = height / factor;
    return k;
}

CameraIntrinsics CameraIntrinsics::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("intrinsics: cannot open " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    CameraIntrinsics k;
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '{') {
        nlohmann::json j = nlohmann::json::parse(text);
        k.fx = j.at("fx").get<double>();
        k.fy = j.at("fy").get<double>();
        k.cx = j.at("cx").get<double>();
        k.cy = j.at("cy").get<double>();
        k.width = j.at("width").get<int>();
        k.height = j.at("height").get<int>();
        if (j.contains("depth_scale")) k.depth_scale = j.at("depth_scale").get<double>();
    } else {
        std::istringstream is(text);
        if (!(is >> k.fx >> k.fy >> k.cx >> k.cy >> k.width >> k.height))
            throw IoError("intrinsics: malformed sidecar " + path);
        double ds;
        if (is >> ds) k.depth_scale = ds;
    }
    k.validate();
    return k;
}

void CameraIntrinsics::save(const std::string& path) const {
    nlohmann::json j{{"fx", fx},       {"fy", fy},         {"cx", cx},
                     {"cy", cy},       {"width", width},   {"height", height},
                     {"depth_scale", depth_scale}};
    std::ofstream out(path);
    if (!out) throw IoError("intrinsics: cannot write " + path);
    out << j.dump(2) << "\n";
}

RigidTransform::RigidTransform() {
    mat_ = Tensor::constant({4, 4}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
}

RigidTransform::RigidTransform(Tensor matrix4x4) : mat_(std::move(matrix4x4)) {
    if (mat_.shape() != Shape{4, 4})
        throw ShapeError("RigidTransform: expected [4,4], got " + shape_str(mat_.shape()));
}

RigidTransform RigidTransform::from_eigen(const Eigen::Matrix4d& m) {
    std::vector<double> d(16);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) d[static_cast<size_t>(r * 4 + c)] = m(r, c);
    return RigidTransform(Tensor::constant({4, 4}, std::move(d)));
}

Tensor RigidTransform::rotation() const {
    return slice(slice(mat_, 0, 0, 3), 1, 0, 3);
}

Tensor RigidTransform::translation() const {
    return select(slice(mat_, 0, 0, 3), 1, 3);
}

RigidTransform RigidTransform::inverse() const {
    Tensor Rt = transpose(rotation());
    Tensor t = translation().reshape({3, 1});
    Tensor tn = neg(matmul(Rt, t));
    Tensor top = concat({Rt, tn}, 1);
    Tensor bottom = Tensor::constant({1, 4}, {0, 0, 0, 1});
    return RigidTransform(concat({top, bottom}, 0));
}

RigidTransform RigidTransform::operator*(const RigidTransform& rhs) const {
    return RigidTransform(matmul(mat_, rhs.matrix()));
}

Tensor RigidTransform::apply(const Tensor& points) const {
    if (points.ndim() != 2 || points.dim(1) != 3)
        throw ShapeError("RigidTransform::apply: expected [N,3], got " + shape_str(points.shape()));
    return matmul(points, transpose(rotation())) + translation();
}

Eigen::Matrix4d RigidTransform::to_eigen() const {
    Eigen::Matrix4d m;
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) m(r, c) = mat_.at({r, c});
    return m;
}

Tensor so3_hat(const Tensor& omega) {
    if (omega.numel() != 3) throw ShapeError("so3_hat: expected 3-vector");
    Tensor w = omega.reshape({3});
    Tensor wx = select(w, 0, 0), wy = select(w, 0, 1), wz = select(w, 0, 2);
    Tensor z = Tensor::scalar(0.0);
    std::vector<Tensor> rows = {
        stack({z, neg(wz), wy}, 0).reshape({1, 3}),
        stack({wz, z, neg(wx)}, 0).reshape({1, 3}),
        stack({neg(wy), wx, z}, 0).reshape({1, 3}),
    };
    return concat(rows, 0);
}

namespace {

// sin(t)/t, (1-cos t)/t^2, (t - sin t)/t^3 with Taylor branches at small t.
// The branch is picked from the forward value; both agree to O(t^4) there.
struct RotCoeffs {
    Tensor A, B, C;
};

RotCoeffs rotation_coeffs(const Tensor& theta_sq) {
    RotCoeffs c;
    if (theta_sq.value() < kSmallAngle * kSmallAngle) {
        c.A = 1.0 - theta_sq / 6.0;
        c.B = 0.5 - theta_sq / 24.0;
        c.C = 1.0 / 6.0 - theta_sq / 120.0;
    } else {
        Tensor theta = sqrt(theta_sq);
        c.A = sin(theta) / theta;
        c.B = (1.0 - cos(theta)) / theta_sq;
        c.C = (theta - sin(theta)) / (theta_sq * theta);
    }
    return c;
}

}  // namespace

Tensor so3_exp(const Tensor& omega) {
    if (omega.numel() != 3) throw ShapeError("so3_exp: expected 3-vector");
    Tensor w = omega.reshape({3});
    Tensor theta_sq = dot(w, w);
    RotCoeffs c = rotation_coeffs(theta_sq);
    Tensor hat = so3_hat(w);
    Tensor hat2 = matmul(hat, hat);
    return identity3() + c.A * hat + c.B * hat2;
}

RigidTransform se3_exp(const Tensor& twist) {
    if (twist.numel() != 6) throw ShapeError("se3_exp: expected 6-vector (omega, v)");
    Tensor xi = twist.reshape({6});
    Tensor w = slice(xi, 0, 0, 3);
    Tensor v = slice(xi, 0, 3, 3);
    Tensor theta_sq = dot(w, w);
    RotCoeffs c = rotation_coeffs(theta_sq);
    Tensor hat = so3_hat(w);
    Tensor hat2 = matmul(hat, hat);
    Tensor R = identity3() + c.A * hat + c.B * hat2;
    Tensor V = identity3() + c.B * hat + c.C * hat2;
    Tensor t = matmul(V, v.reshape({3, 1}));
    Tensor top = concat({R, t}, 1);
    Tensor bottom = Tensor::constant({1, 4}, {0, 0, 0, 1});
    return RigidTransform(concat({top, bottom}, 0));
}

Tensor se3_log(const RigidTransform& T) {
    Tensor R = T.rotation();
    Tensor trace = select(select(R, 0, 0), 0, 0) + select(select(R, 0, 1), 0, 1) +
                   select(select(R, 0, 2), 0, 2);
    const double cos_theta_val = std::clamp((trace.value() - 1.0) * 0.5, -1.0, 1.0);
    const double theta_val = std::acos(cos_theta_val);
    if (theta_val > M_PI - 1e-6)
        throw SingularityError("se3_log: rotation angle " + std::to_string(theta_val) +
                               " too close to pi");

    // vee(R - R^T) = 2 sin(theta) * axis
    Tensor a0 = select(select(R, 0, 2), 0, 1) - select(select(R, 0, 1), 0, 2);
    Tensor a1 = select(select(R, 0, 0), 0, 2) - select(select(R, 0, 2), 0, 0);
    Tensor a2 = select(select(R, 0, 1), 0, 0) - select(select(R, 0, 0), 0, 1);
    Tensor vee = stack({a0, a1, a2}, 0);

    Tensor w, theta_sq;
    if (theta_val < kSmallAngle) {
        w = 0.5 * vee;
        theta_sq = dot(w, w);
    } else {
        Tensor cos_theta = (trace - 1.0) * 0.5;
        Tensor theta = acos(cos_theta);
        w = (theta / (2.0 * sin(theta))) * vee;
        theta_sq = theta * theta;
    }

    Tensor hat = so3_hat(w);
    Tensor hat2 = matmul(hat, hat);
    Tensor Vinv;
    if (theta_val < kSmallAngle) {
        Vinv = identity3() - 0.5 * hat + (1.0 / 12.0) * hat2;
    } else {
        Tensor theta = sqrt(theta_sq);
        Tensor k = (1.0 / theta_sq) - (1.0 + cos(theta)) / (2.0 * theta * sin(theta));
        Vinv = identity3() - 0.5 * hat + k * hat2;
    }
    Tensor v = matmul(Vinv, T.translation().reshape({3, 1})).reshape({3});
    return concat({w, v}, 0);
}

ProjectResult transform_project(const Tensor& points, const RigidTransform& T,
                                const CameraIntrinsics& K) {
    const Index n = points.dim(0);
    Tensor p = T.apply(points);
    Tensor x = select(p, 1, 0);
    Tensor y = select(p, 1, 1);
    Tensor z = select(p, 1, 2);

    std::vector<std::uint8_t> in_front(static_cast<size_t>(n));
    auto zd = z.data();
    for (Index i = 0; i < n; ++i) in_front[static_cast<size_t>(i)] = zd[i] > 1e-6;

    Tensor z_safe = where_mask(in_front, z, Tensor::full({n}, 1.0));
    Tensor u = K.fx * (x / z_safe) + K.cx;
    Tensor v = K.fy * (y / z_safe) + K.cy;
    Tensor coords = stack({u, v}, 1);

    ProjectResult out;
    out.valid.assign(static_cast<size_t>(n), 0);
    auto ud = u.data();
    auto vd = v.data();
    for (Index i = 0; i < n; ++i) {
        out.valid[static_cast<size_t>(i)] =
            in_front[static_cast<size_t>(i)] && ud[i] >= 0.0 && ud[i] <= K.width - 1.0 &&
            vd[i] >= 0.0 && vd[i] <= K.height - 1.0;
    }
    out.coords = std::move(coords);
    out.depth = z;
    return out;
}

Tensor backproject_directions(const CameraIntrinsics& K) {
    const Index h = K.height, w = K.width;
    std::vector<double> d(static_cast<size_t>(h * w * 3));
    for (Index v = 0; v < h; ++v) {
        for (Index u = 0; u < w; ++u) {
            const size_t base = static_cast<size_t>((v * w + u) * 3);
            d[base + 0] = (static_cast<double>(u) - K.cx) / K.fx;
            d[base + 1] = (static_cast<double>(v) - K.cy) / K.fy;
            d[base + 2] = 1.0;
        }
    }
    return Tensor::constant({h, w, 3}, std::move(d));
}

Tensor cross_rows(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || a.dim(1) != 3 || a.shape() != b.shape())
        throw ShapeError("cross_rows: expected matching [N,3] tensors");
    Tensor ax = select(a, 1, 0), ay = select(a, 1, 1), az = select(a, 1, 2);
    Tensor bx = select(b, 1, 0), by = select(b, 1, 1), bz = select(b, 1, 2);
    return stack({ay * bz - az * by, az * bx - ax * bz, ax * by - ay * bx}, 1);
}

Tensor normalize_rows(const Tensor& v, std::vector<std::uint8_t>* valid_out, double eps) {
    if (v.ndim() != 2) throw ShapeError("normalize_rows: expected [N,C]");
    const Index n = v.dim(0);
    Tensor norm_sq = sum(v * v, {1}, true);
    std::vector<std::uint8_t> ok(static_cast<size_t>(n));
    auto nd = norm_sq.data();
    for (Index i = 0; i < n; ++i) ok[static_cast<size_t>(i)] = nd[i] > eps;
    Tensor safe = where_mask(ok, norm_sq, Tensor::full({n, 1}, 1.0));
    Tensor unit = v / sqrt(safe);
    Tensor out = where_mask(ok, unit, Tensor::zeros(v.shape()));
    if (valid_out) *valid_out = std::move(ok);
    return out;
}

std::vector<Index> VertexNormalMaps::valid_indices() const {
    std::vector<Index> idx;
    for (size_t i = 0; i < valid.size(); ++i)
        if (valid[i]) idx.push_back(static_cast<Index>(i));
    return idx;
}

Index VertexNormalMaps::valid_count() const {
    Index n = 0;
    for (auto v : valid) n += v ? 1 : 0;
    return n;
}

}  // namespace diffslam
