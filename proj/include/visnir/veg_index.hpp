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

// NDVI and EVI from co-registered NIR and VIS rasters.

#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "visnir/types.hpp"

namespace visnir {

enum class IndexKind { ndvi, evi };

std::string to_string(IndexKind kind);
/// Accepts "ndvi"/"evi" in any letter case.
IndexKind parse_index_kind(const std::string& text);

struct EviCoefficients {
    double c1 = 6.0;
    double c2 = 7.5;

    void validate() const;
    /// Nominal EVI range [-2/c1, 2].
    double lower_bound() const { return -2.0 / c1; }
    double upper_bound() const { return 2.0; }
};

struct IndexImage {
    IndexKind kind = IndexKind::ndvi;
    FloatGrid grid;
    BinaryMask valid;
    /// Number of valid pixels whose raw value fell outside the nominal range
    /// and was clamped (EVI only).
    std::size_t clamped = 0;
    /// Nominal value range of the grid.
    double lower = -1.0;
    double upper = 1.0;
};

/// Scalar NDVI on reflectances; 0 when both inputs are 0. Returns nullopt
/// when the denominator vanishes with a nonzero numerator.
std::optional<double> ndvi_value(double nir, double red);
/// Scalar EVI on reflectances (unclamped); 0 when all inputs are 0.
std::optional<double> evi_value(double nir, double red, double blue, const EviCoefficients& coeffs = {});

/// Rasters are converted to reflectances by dividing by 2^depth - 1. The VIS
/// raster must be RGB (red = channel 0, blue = channel 2); the NIR raster must
/// be single-channel with the same size and bit depth.
IndexImage ndvi(const RasterImage& nir, const RasterImage& vis, const std::optional<BinaryMask>& mask = std::nullopt);
IndexImage evi(const RasterImage& nir, const RasterImage& vis, const EviCoefficients& coeffs = {},
               const std::optional<BinaryMask>& mask = std::nullopt);

/// Reflectance-grid variants; inputs may be signed.
IndexImage ndvi(const FloatGrid& nir, const FloatGrid& red, const std::optional<BinaryMask>& mask = std::nullopt);
IndexImage evi(const FloatGrid& nir, const FloatGrid& red, const FloatGrid& blue, const EviCoefficients& coeffs = {},
               const std::optional<BinaryMask>& mask = std::nullopt);

IndexImage compute_index(IndexKind kind, const RasterImage& nir, const RasterImage& vis,
                         const EviCoefficients& coeffs = {}, const std::optional<BinaryMask>& mask = std::nullopt);

/// Affine map of [lower, upper] onto [0, 255]; invalid pixels are 0.
RasterImage index_to_gray(const IndexImage& index);

}  // namespace visnir
