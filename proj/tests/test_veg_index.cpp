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

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "visnir/error.hpp"
#include "visnir/veg_index.hpp"

namespace visnir {
namespace {

struct Bands {
    RasterImage nir;
    RasterImage vis;
};

Bands random_bands(int w, int h, int depth, std::mt19937_64& rng) {
    Bands b{RasterImage(w, h, 1, depth), RasterImage(w, h, 3, depth)};
    std::uniform_int_distribution<int> u(0, (1 << depth) - 1);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            b.nir.at(y, x) = static_cast<std::uint16_t>(u(rng));
            for (int c = 0; c < 3; ++c) b.vis.at(y, x, c) = static_cast<std::uint16_t>(u(rng));
        }
    }
    return b;
}

TEST(Ndvi, ScalarOracle) {
    std::mt19937_64 rng(1);
    const Bands b = random_bands(40, 25, 8, rng);
    const IndexImage idx = ndvi(b.nir, b.vis);
    for (int y = 0; y < 25; ++y) {
        for (int x = 0; x < 40; ++x) {
            const double n = b.nir.at(y, x) / 255.0;
            const double r = b.vis.at(y, x, 0) / 255.0;
            const double expect = (n == 0.0 && r == 0.0) ? 0.0 : (n - r) / (n + r);
            EXPECT_NEAR(idx.grid.at(y, x), expect, 1e-12);
            EXPECT_TRUE(idx.valid.valid(y, x));
        }
    }
}

TEST(Evi, ScalarOracle) {
    std::mt19937_64 rng(2);
    const Bands b = random_bands(40, 25, 16, rng);
    const EviCoefficients k{6.0, 7.5};
    const IndexImage idx = evi(b.nir, b.vis, k);
    for (int y = 0; y < 25; ++y) {
        for (int x = 0; x < 40; ++x) {
            const double n = b.nir.at(y, x) / 65535.0;
            const double r = b.vis.at(y, x, 0) / 65535.0;
            const double bl = b.vis.at(y, x, 2) / 65535.0;
            double expect = (n == 0 && r == 0 && bl == 0) ? 0.0 : 2.0 * (n - r) / (n + 6.0 * r + 7.5 * bl);
            expect = std::clamp(expect, -1.0 / 3.0, 2.0);
            EXPECT_NEAR(idx.grid.at(y, x), expect, 1e-12);
        }
    }
    EXPECT_EQ(idx.clamped, 0u);
}

TEST(Index, ZeroCasesAreExactlyZero) {
    EXPECT_EQ(ndvi_value(0.0, 0.0), 0.0);
    EXPECT_EQ(evi_value(0.0, 0.0, 0.0), 0.0);
    RasterImage nir(1, 1, 1, 8);
    RasterImage vis(1, 1, 3, 8);
    EXPECT_EQ(ndvi(nir, vis).grid.at(0, 0), 0.0);
    EXPECT_EQ(evi(nir, vis).grid.at(0, 0), 0.0);
}

TEST(Index, HandValues) {
    EXPECT_DOUBLE_EQ(*ndvi_value(0.6, 0.2), 0.5);
    EXPECT_DOUBLE_EQ(*ndvi_value(0.0, 0.4), -1.0);
    // 2 (0.5 - 0.1) / (0.5 + 0.6 + 0.75) = 0.8 / 1.85
    EXPECT_NEAR(*evi_value(0.5, 0.1, 0.1), 0.8 / 1.85, 1e-15);
    // Only NIR: 2n / n = 2, the upper bound.
    EXPECT_DOUBLE_EQ(*evi_value(0.3, 0.0, 0.0), 2.0);
}

TEST(Index, RangeInvariantsOnNonNegativeInputs) {
    std::mt19937_64 rng(3);
    const Bands b = random_bands(64, 64, 8, rng);
    const IndexImage nd = ndvi(b.nir, b.vis);
    const IndexImage ev = evi(b.nir, b.vis);
    for (double v : nd.grid.values()) {
        EXPECT_GE(v, -1.0);
        EXPECT_LE(v, 1.0);
    }
    for (double v : ev.grid.values()) {
        EXPECT_GE(v, -1.0 / 3.0);
        EXPECT_LE(v, 2.0);
    }
    EXPECT_EQ(nd.clamped, 0u);
    EXPECT_EQ(ev.clamped, 0u);
}

TEST(Index, SignedInputsAreClampedAndCounted) {
    // Negative reflectance (e.g. after dark-frame subtraction) can leave the
    // nominal range.
    FloatGrid nir(2, 1, std::vector<double>{0.5, 0.5});
    FloatGrid red(2, 1, std::vector<double>{-0.4, 0.1});
    FloatGrid blue(2, 1, std::vector<double>{0.0, 0.0});
    const IndexImage nd = ndvi(nir, red);
    EXPECT_DOUBLE_EQ(nd.grid[0], 1.0);
    EXPECT_EQ(nd.clamped, 1u);
    const IndexImage ev = evi(nir, red, blue);
    // 1.8 / -1.9 falls below -2 / c1.
    EXPECT_DOUBLE_EQ(ev.grid[0], -1.0 / 3.0);
    EXPECT_GE(ev.clamped, 1u);
}

TEST(Index, MaskedPixelsStayInvalid) {
    std::mt19937_64 rng(4);
    const Bands b = random_bands(5, 4, 8, rng);
    BinaryMask mask(5, 4, true);
    mask.set(2, 3, false);
    const IndexImage idx = ndvi(b.nir, b.vis, mask);
    EXPECT_FALSE(idx.valid.valid(2, 3));
    EXPECT_EQ(idx.valid.count_valid(), 19u);
}

TEST(Index, ZeroDenominatorAwayFromOriginIsInvalid) {
    FloatGrid nir(1, 1, std::vector<double>{0.2});
    FloatGrid red(1, 1, std::vector<double>{-0.2});
    const IndexImage idx = ndvi(nir, red);
    EXPECT_FALSE(idx.valid.valid(0, 0));
}

TEST(Index, RejectsMismatchedInputs) {
    RasterImage nir(4, 4, 1, 8);
    EXPECT_THROW(ndvi(nir, RasterImage(4, 3, 3, 8)), ValidationError);
    EXPECT_THROW(ndvi(nir, RasterImage(4, 4, 3, 16)), ValidationError);
    EXPECT_THROW(ndvi(nir, RasterImage(4, 4, 1, 8)), ValidationError);
    EXPECT_THROW(evi(nir, RasterImage(4, 4, 3, 8), EviCoefficients{0.0, 7.5}), ValidationError);
    EXPECT_THROW(parse_index_kind("savi"), ValidationError);
    EXPECT_EQ(parse_index_kind("NDVI"), IndexKind::ndvi);
}

TEST(Index, GrayRenderingMapsRange) {
    FloatGrid nir(3, 1, std::vector<double>{0.0, 0.5, 1.0});
    FloatGrid red(3, 1, std::vector<double>{1.0, 0.5, 0.0});
    const RasterImage g = index_to_gray(ndvi(nir, red));
    EXPECT_EQ(g.at(0, 0), 0);
    EXPECT_EQ(g.at(0, 1), 128);
    EXPECT_EQ(g.at(0, 2), 255);
}

}  // namespace
}  // namespace visnir
