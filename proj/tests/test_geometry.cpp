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

#include <array>
#include <cmath>
#include <random>

#include <Eigen/Geometry>
#include <gtest/gtest.h>

#include "test_support.hpp"
#include "visnir/error.hpp"
#include "visnir/geometry.hpp"

namespace visnir {
namespace {

using Mat = std::array<std::array<double, 3>, 3>;

Mat mul(const Mat& a, const Mat& b) {
    Mat c{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
        }
    }
    return c;
}

// K^-1 of an upper-triangular intrinsic matrix written out by hand.
Mat k_inverse(const CameraIntrinsics& k) {
    return {{{1.0 / k.fx, 0.0, -k.cx / k.fx}, {0.0, 1.0 / k.fy, -k.cy / k.fy}, {0.0, 0.0, 1.0}}};
}

Mat k_matrix(const CameraIntrinsics& k) { return {{{k.fx, 0.0, k.cx}, {0.0, k.fy, k.cy}, {0.0, 0.0, 1.0}}}; }

Mat oracle_homography(const CameraIntrinsics& kv, const CameraIntrinsics& kn, const RigGeometry& rig) {
    Mat plane{};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            plane[i][j] = rig.rotation(i, j) + rig.translation(i) * rig.plane_normal(j) / rig.plane_distance;
        }
    }
    Mat h = mul(mul(k_matrix(kv), plane), k_inverse(kn));
    const double s = h[2][2];
    for (auto& row : h) {
        for (auto& v : row) v /= s;
    }
    return h;
}

RigCalibration random_rig(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    RigCalibration c;
    c.vis = {800.0 + 100 * u(rng), 780.0 + 100 * u(rng), 600.0 + 20 * u(rng), 240.0 + 20 * u(rng)};
    c.nir = {700.0 + 100 * u(rng), 710.0 + 100 * u(rng), 320.0 + 20 * u(rng), 256.0 + 20 * u(rng)};
    const Eigen::Vector3d axis = Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized();
    c.rig.rotation = Eigen::AngleAxisd(0.05 * u(rng), axis).toRotationMatrix();
    c.rig.translation = Eigen::Vector3d(0.1 * u(rng), 0.05 * u(rng), 0.02 * u(rng));
    c.rig.plane_normal = Eigen::Vector3d(0.1 * u(rng), -1.0, 0.1 * u(rng)).normalized();
    c.rig.plane_distance = 1.5 + 0.5 * u(rng);
    return c;
}

TEST(Homography, MatchesMatrixProductOracle) {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        const RigCalibration c = random_rig(rng);
        const Homography h = plane_homography(c.vis, c.nir, c.rig);
        const Mat o = oracle_homography(c.vis, c.nir, c.rig);
        for (int i = 0; i < 3; ++i) {
            for (int j = 0; j < 3; ++j) {
                EXPECT_NEAR(h.matrix()(i, j), o[i][j], 1e-9 * std::max(1.0, std::abs(o[i][j])));
            }
        }
    }
}

TEST(Homography, PurePlaneTranslationCase) {
    // Identical cameras, no rotation: H = I + K t n^T K^-1 / d.
    CameraIntrinsics k{100.0, 100.0, 50.0, 40.0};
    RigGeometry rig;
    rig.translation = Eigen::Vector3d(0.2, 0.0, 0.0);
    rig.plane_normal = Eigen::Vector3d(0.0, 0.0, 1.0);
    rig.plane_distance = 2.0;
    const Homography h = plane_homography(k, k, rig);
    // A point on the plane shifts by fx * tx / d = 10 pixels horizontally.
    const auto p = h.apply(17.0, 23.0);
    EXPECT_NEAR(p.x(), 27.0, 1e-12);
    EXPECT_NEAR(p.y(), 23.0, 1e-12);
}

TEST(Homography, InverseComposesToIdentity) {
    std::mt19937_64 rng(5);
    const RigCalibration c = random_rig(rng);
    const Homography h = c.homography();
    const auto p = h.apply(123.5, 77.25);
    const auto q = h.inverse().apply(p.x(), p.y());
    EXPECT_NEAR(q.x(), 123.5, 1e-9);
    EXPECT_NEAR(q.y(), 77.25, 1e-9);
}

TEST(Homography, RejectsInvalidGeometry) {
    CameraIntrinsics bad{0.0, 1.0, 0.0, 0.0};
    EXPECT_THROW(bad.validate(), ValidationError);
    RigGeometry rig;
    rig.plane_distance = 0.0;
    EXPECT_THROW(rig.validate(), ValidationError);
    rig.plane_distance = 1.0;
    rig.plane_normal = Eigen::Vector3d(0.0, 2.0, 0.0);
    EXPECT_THROW(rig.validate(), ValidationError);
    rig.plane_normal = Eigen::Vector3d(0.0, 1.0, 0.0);
    rig.rotation = 2.0 * Eigen::Matrix3d::Identity();
    EXPECT_THROW(rig.validate(), ValidationError);
    EXPECT_THROW(Homography(Eigen::Matrix3d::Zero()), NumericError);
}

RasterImage smooth_image(int w, int h) {
    RasterImage img(w, h, 1, 8);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double v = 127.5 + 60.0 * std::sin(0.07 * x) * std::cos(0.05 * y) + 0.5 * (x - w / 2.0);
            img.at(y, x) = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 255.0)));
        }
    }
    return img;
}

TEST(Warp, IdentityIsExact) {
    const RasterImage img = smooth_image(40, 30);
    const WarpResult r = warp_to_vis(img, Homography::identity(), 40, 30);
    EXPECT_EQ(r.image, img);
    EXPECT_EQ(r.valid.count_valid(), 40u * 30u);
}

TEST(Warp, IntegerShiftMovesPixels) {
    const RasterImage img = smooth_image(20, 10);
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    m(0, 2) = 3.0;
    const WarpResult r = warp_to_vis(img, Homography(m), 20, 10);
    for (int y = 0; y < 10; ++y) {
        for (int x = 0; x < 20; ++x) {
            if (x < 3) {
                EXPECT_FALSE(r.valid.valid(y, x));
                EXPECT_EQ(r.image.at(y, x), 0);
            } else {
                EXPECT_EQ(r.image.at(y, x), img.at(y, x - 3));
            }
        }
    }
}

TEST(Warp, RoundTripErrorSmall) {
    const RasterImage img = smooth_image(96, 64);
    Eigen::Matrix3d m;
    m << 1.02, 0.01, 2.3, -0.015, 0.99, 1.7, 1e-5, -2e-5, 1.0;
    const Homography h(m);
    const WarpResult fwd = warp_to_vis(img, h, 96, 64);
    const WarpResult back = warp_to_vis(fwd.image, h.inverse(), 96, 64, fwd.valid);
    double err = 0.0;
    std::size_t n = 0;
    for (int y = 0; y < 64; ++y) {
        for (int x = 0; x < 96; ++x) {
            if (!back.valid.valid(y, x)) continue;
            err += std::abs(back.image.at(y, x) - img.at(y, x)) / 255.0;
            ++n;
        }
    }
    ASSERT_GT(n, 96u * 64u / 2);
    EXPECT_LT(err / n, 2.0 / 255.0);
}

TEST(Warp, SourceMaskPropagates) {
    const RasterImage img = smooth_image(10, 10);
    BinaryMask src(10, 10, true);
    src.set(4, 4, false);
    const WarpResult r = warp_to_vis(img, Homography::identity(), 10, 10, src);
    EXPECT_FALSE(r.valid.valid(4, 4));
    EXPECT_TRUE(r.valid.valid(4, 5));
    EXPECT_EQ(r.image.at(4, 4), 0);
}

TEST(Warp, SixteenBitPreservesDepth) {
    RasterImage img(8, 8, 1, 16);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) img.at(y, x) = static_cast<std::uint16_t>(8000 * x + y);
    }
    const WarpResult r = warp_to_vis(img, Homography::identity(), 8, 8);
    EXPECT_EQ(r.image.depth(), 16);
    EXPECT_EQ(r.image, img);
}

TEST(RigFile, RoundTrip) {
    testing::TempDir dir;
    std::mt19937_64 rng(2);
    RigCalibration c = random_rig(rng);
    save_rig_calibration(c, dir / "rig.ini");
    const RigCalibration back = load_rig_calibration(dir / "rig.ini");
    EXPECT_NEAR((back.homography().matrix() - c.homography().matrix()).cwiseAbs().maxCoeff(), 0.0, 1e-9);
    testing::write_text(dir / "bad.ini", "[vis]\nfx = 1\n");
    EXPECT_ANY_THROW(load_rig_calibration(dir / "bad.ini"));
}

}  // namespace
}  // namespace visnir
