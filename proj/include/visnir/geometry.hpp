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

// Ground-plane homography between the NIR and VIS cameras and the inverse
// mapping warp that brings NIR rasters into the VIS frame.

#pragma once

#include <filesystem>
#include <optional>

#include <Eigen/Core>

#include "visnir/types.hpp"

namespace visnir {

struct CameraIntrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;

    /// Throws ValidationError unless fx > 0 and fy > 0.
    void validate() const;
    Eigen::Matrix3d matrix() const;
};

/// Pose of the NIR camera relative to the VIS camera plus the ground plane in
/// NIR coordinates (n^T X = d).
struct RigGeometry {
    Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
    Eigen::Vector3d translation = Eigen::Vector3d::Zero();
    Eigen::Vector3d plane_normal{0.0, -1.0, 0.0};
    double plane_distance = 1.0;

    /// Checks |det R - 1| < 1e-9, |n| = 1 within 1e-9 and d > 0.
    void validate() const;
};

class Homography {
public:
    Homography() = default;
    /// Throws NumericError when |det| <= 1e-12.
    explicit Homography(const Eigen::Matrix3d& m);

    static Homography identity() { return Homography(Eigen::Matrix3d::Identity()); }

    const Eigen::Matrix3d& matrix() const { return m_; }
    Homography inverse() const;
    /// Maps a pixel position (x, y) through the homography.
    Eigen::Vector2d apply(double x, double y) const;

private:
    Eigen::Matrix3d m_ = Eigen::Matrix3d::Identity();
};

/// H = K_vis (R + t n^T / d) K_nir^-1, scaled so H(2,2) = 1 when nonzero.
Homography plane_homography(const CameraIntrinsics& k_vis, const CameraIntrinsics& k_nir, const RigGeometry& rig);

struct WarpResult {
    RasterImage image;
    BinaryMask valid;
};

/// Inverse-mapping warp: destination pixel p receives the bilinear sample of
/// the source at H^-1 p, rounded to the nearest integer sample. Pixels whose
/// preimage falls outside the source, or whose contributing source pixels are
/// invalid in source_valid, are set to 0 and flagged invalid.
WarpResult warp_to_vis(const RasterImage& nir, const Homography& h, int out_width, int out_height,
                       const std::optional<BinaryMask>& source_valid = std::nullopt);

/// Rig calibration file (INI):
///   [vis]  fx, fy, cx, cy
///   [nir]  fx, fy, cx, cy
///   [rig]  rotation = 9 numbers (row-major), translation = 3 numbers,
///          plane_normal = 3 numbers, plane_distance = 1 number
struct RigCalibration {
    CameraIntrinsics vis;
    CameraIntrinsics nir;
    RigGeometry rig;

    Homography homography() const { return plane_homography(vis, nir, rig); }
};

RigCalibration load_rig_calibration(const std::filesystem::path& path);
void save_rig_calibration(const RigCalibration& calib, const std::filesystem::path& path);

}  // namespace visnir
