// Copyright 2026 The visnir-fuse Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "visnir/geometry.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/LU>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>

#include "visnir/error.hpp"
#include "visnir/io.hpp"

namespace visnir {

void CameraIntrinsics::validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(cx) || !std::isfinite(cy)) {
        throw ValidationError(fmt::format("camera intrinsics need fx, fy > 0 (got fx={}, fy={})", fx, fy));
    }
}

Eigen::Matrix3d CameraIntrinsics::matrix() const {
    Eigen::Matrix3d k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
}

void RigGeometry::validate() const {
    if (std::abs(rotation.determinant() - 1.0) >= 1e-9) {
        throw ValidationError(fmt::format("rig rotation must have determinant 1, got {}", rotation.determinant()));
    }
    if ((rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() >= 1e-9) {
        throw ValidationError("rig rotation is not orthonormal");
    }
    if (std::abs(plane_normal.norm() - 1.0) >= 1e-9) {
        throw ValidationError(fmt::format("plane normal must be unit length, got norm {}", plane_normal.norm()));
    }
    if (!(plane_distance > 0.0)) {
        throw ValidationError(fmt::format("plane distance must be positive, got {}", plane_distance));
    }
    if (!translation.allFinite()) throw ValidationError("rig translation is not finite");
}

Homography::Homography(const Eigen::Matrix3d& m) : m_(m) {
    if (!m.allFinite() || std::abs(m.determinant()) <= 1e-12) {
        throw NumericError(fmt::format("homography is singular (det = {})", m.determinant()));
    }
}

Homography Homography::inverse() const {
    Eigen::Matrix3d inv = m_.inverse();
    if (inv(2, 2) != 0.0) inv /= inv(2, 2);
    return Homography(inv);
}

Eigen::Vector2d Homography::apply(double x, double y) const {
    const Eigen::Vector3d p = m_ * Eigen::Vector3d(x, y, 1.0);
    return {p.x() / p.z(), p.y() / p.z()};
}

Homography plane_homography(const CameraIntrinsics& k_vis, const CameraIntrinsics& k_nir, const RigGeometry& rig) {
    k_vis.validate();
    k_nir.validate();
    rig.validate();
    const Eigen::Matrix3d plane = rig.rotation + rig.translation * rig.plane_normal.transpose() / rig.plane_distance;
    Eigen::Matrix3d h = k_vis.matrix() * plane * k_nir.matrix().inverse();
    if (std::abs(h.determinant()) <= 1e-12) {
        throw NumericError("degenerate rig: plane-induced homography is singular");
    }
    if (h(2, 2) != 0.0) h /= h(2, 2);
    return Homography(h);
}

WarpResult warp_to_vis(const RasterImage& nir, const Homography& h, int out_width, int out_height,
                       const std::optional<BinaryMask>& source_valid) {
    if (out_width <= 0 || out_height <= 0) throw ValidationError("warp_to_vis: output size must be positive");
    if (source_valid && (source_valid->width() != nir.width() || source_valid->height() != nir.height())) {
        throw ValidationError("warp_to_vis: source mask does not match the source image");
    }
    const Homography inv = h.inverse();
    RasterImage out(out_width, out_height, nir.channels(), nir.depth());
    BinaryMask mask(out_width, out_height, false);
    const int w = nir.width();
    const int hgt = nir.height();
    const double max_x = w - 1;
    const double max_y = hgt - 1;
    // Tolerates rounding in H^-1 p for points that land exactly on the border.
    constexpr double kEdge = 1e-9;

    for (int y = 0; y < out_height; ++y) {
        for (int x = 0; x < out_width; ++x) {
            const Eigen::Vector3d q = inv.matrix() * Eigen::Vector3d(x, y, 1.0);
            if (!(q.z() > 0.0)) continue;
            double sx = q.x() / q.z();
            double sy = q.y() / q.z();
            if (sx < -kEdge || sy < -kEdge || sx > max_x + kEdge || sy > max_y + kEdge) continue;
            sx = std::clamp(sx, 0.0, max_x);
            sy = std::clamp(sy, 0.0, max_y);
            const int x0 = std::min(static_cast<int>(std::floor(sx)), std::max(w - 2, 0));
            const int y0 = std::min(static_cast<int>(std::floor(sy)), std::max(hgt - 2, 0));
            const int x1 = std::min(x0 + 1, w - 1);
            const int y1 = std::min(y0 + 1, hgt - 1);
            const double fx = sx - x0;
            const double fy = sy - y0;
            const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
            const int xs[4] = {x0, x1, x0, x1};
            const int ys[4] = {y0, y0, y1, y1};
            if (source_valid) {
                bool ok = true;
                for (int t = 0; t < 4; ++t) {
                    if (wts[t] > 0.0 && !source_valid->valid(ys[t], xs[t])) ok = false;
                }
                if (!ok) continue;
            }
            for (int c = 0; c < nir.channels(); ++c) {
                double v = 0.0;
                for (int t = 0; t < 4; ++t) v += wts[t] * nir.at(ys[t], xs[t], c);
                out.at(y, x, c) = static_cast<std::uint16_t>(std::clamp(std::lround(v), 0L, long{nir.max_value()}));
            }
            mask.set(y, x, true);
        }
    }
    return {std::move(out), std::move(mask)};
}

namespace {

std::vector<double> parse_numbers(const std::string& text, std::size_t expected, const std::string& key) {
    std::istringstream in(text);
    std::vector<double> out;
    std::string token;
    while (in >> token) {
        if (token.back() == ',') token.pop_back();
        if (token.empty()) continue;
        char* end = nullptr;
        const double v = std::strtod(token.c_str(), &end);
        if (*end != '\0' || !std::isfinite(v)) throw FormatError(fmt::format("'{}': invalid number '{}'", key, token));
        out.push_back(v);
    }
    if (out.size() != expected) {
        throw FormatError(fmt::format("'{}': expected {} numbers, got {}", key, expected, out.size()));
    }
    return out;
}

CameraIntrinsics read_camera(const boost::property_tree::ptree& tree, const std::string& section) {
    CameraIntrinsics k;
    auto get = [&](const char* key) {
        const auto v = tree.get_optional<std::string>(section + "." + key);
        if (!v) throw FormatError(fmt::format("calibration: missing {}.{}", section, key));
        return parse_numbers(*v, 1, section + "." + key)[0];
    };
    k.fx = get("fx");
    k.fy = get("fy");
    k.cx = get("cx");
    k.cy = get("cy");
    k.validate();
    return k;
}

}  // namespace

RigCalibration load_rig_calibration(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw IoError(fmt::format("calibration file not found: '{}'", path.string()));
    }
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw FormatError(fmt::format("calibration '{}': {}", path.string(), e.message()));
    }
    RigCalibration calib;
    calib.vis = read_camera(tree, "vis");
    calib.nir = read_camera(tree, "nir");
    auto get = [&](const char* key, std::size_t n) {
        const auto v = tree.get_optional<std::string>(std::string("rig.") + key);
        if (!v) throw FormatError(fmt::format("calibration: missing rig.{}", key));
        return parse_numbers(*v, n, std::string("rig.") + key);
    };
    const auto r = get("rotation", 9);
    for (int i = 0; i < 9; ++i) calib.rig.rotation(i / 3, i % 3) = r[i];
    const auto t = get("translation", 3);
    calib.rig.translation = Eigen::Vector3d(t[0], t[1], t[2]);
    const auto n = get("plane_normal", 3);
    calib.rig.plane_normal = Eigen::Vector3d(n[0], n[1], n[2]);
    calib.rig.plane_distance = get("plane_distance", 1)[0];
    calib.rig.validate();
    return calib;
}

void save_rig_calibration(const RigCalibration& calib, const std::filesystem::path& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    auto cam = [&](const char* name, const CameraIntrinsics& k) {
        out << fmt::format("[{}]\nfx = {}\nfy = {}\ncx = {}\ncy = {}\n\n", name, k.fx, k.fy, k.cx, k.cy);
    };
    cam("vis", calib.vis);
    cam("nir", calib.nir);
    const auto& g = calib.rig;
    out << "[rig]\nrotation =";
    for (int i = 0; i < 9; ++i) out << ' ' << fmt::format("{}", g.rotation(i / 3, i % 3));
    out << fmt::format("\ntranslation = {} {} {}\n", g.translation.x(), g.translation.y(), g.translation.z());
    out << fmt::format("plane_normal = {} {} {}\n", g.plane_normal.x(), g.plane_normal.y(), g.plane_normal.z());
    out << fmt::format("plane_distance = {}\n", g.plane_distance);
}

}  // namespace visnir
