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

#include "visnir/veg_index.hpp"

#include <algorithm>
#include <cmath>

#include <boost/algorithm/string/case_conv.hpp>
#include <fmt/format.h>

#include "visnir/error.hpp"

namespace visnir {

std::string to_string(IndexKind kind) { return kind == IndexKind::ndvi ? "ndvi" : "evi"; }

IndexKind parse_index_kind(const std::string& text) {
    const auto lower = boost::algorithm::to_lower_copy(text);
    if (lower == "ndvi") return IndexKind::ndvi;
    if (lower == "evi") return IndexKind::evi;
    throw ValidationError(fmt::format("unknown index kind '{}' (expected ndvi or evi)", text));
}

void EviCoefficients::validate() const {
    if (!(c1 > 0.0) || !(c2 >= 0.0) || !std::isfinite(c1) || !std::isfinite(c2)) {
        throw ValidationError(fmt::format("EVI coefficients need c1 > 0 and c2 >= 0 (got {}, {})", c1, c2));
    }
}

std::optional<double> ndvi_value(double nir, double red) {
    if (nir == 0.0 && red == 0.0) return 0.0;
    const double den = nir + red;
    if (den == 0.0) return std::nullopt;
    return (nir - red) / den;
}

std::optional<double> evi_value(double nir, double red, double blue, const EviCoefficients& coeffs) {
    if (nir == 0.0 && red == 0.0 && blue == 0.0) return 0.0;
    const double num = 2.0 * (nir - red);
    const double den = nir + coeffs.c1 * red + coeffs.c2 * blue;
    if (den == 0.0) {
        // 0/0 away from the origin needs signed inputs; no vegetation signal.
        if (num == 0.0) return 0.0;
        return std::nullopt;
    }
    return num / den;
}

namespace {

void check_same_size(int w1, int h1, int w2, int h2, const char* what) {
    if (w1 != w2 || h1 != h2) {
        throw ValidationError(fmt::format("{}: dimension mismatch ({}x{} vs {}x{})", what, w1, h1, w2, h2));
    }
}

BinaryMask resolve_mask(const std::optional<BinaryMask>& mask, int width, int height) {
    if (!mask) return BinaryMask(width, height, true);
    check_same_size(mask->width(), mask->height(), width, height, "index mask");
    return *mask;
}

void check_rasters(const RasterImage& nir, const RasterImage& vis) {
    check_same_size(nir.width(), nir.height(), vis.width(), vis.height(), "NIR/VIS");
    if (nir.depth() != vis.depth()) {
        throw ValidationError(
            fmt::format("NIR and VIS rasters need the same bit depth ({} vs {} bits)", nir.depth(), vis.depth()));
    }
    if (nir.channels() != 1) throw ValidationError("NIR raster must be single-channel");
    if (vis.channels() != 3) throw ValidationError("VIS raster must be RGB");
}

FloatGrid reflectance(const RasterImage& r, int channel) {
    const double scale = 1.0 / r.max_value();
    FloatGrid g(r.width(), r.height());
    for (int y = 0; y < r.height(); ++y) {
        for (int x = 0; x < r.width(); ++x) g.at(y, x) = r.at(y, x, channel) * scale;
    }
    return g;
}

}  // namespace

IndexImage ndvi(const FloatGrid& nir, const FloatGrid& red, const std::optional<BinaryMask>& mask) {
    check_same_size(nir.width(), nir.height(), red.width(), red.height(), "NDVI inputs");
    IndexImage out;
    out.kind = IndexKind::ndvi;
    out.lower = -1.0;
    out.upper = 1.0;
    out.grid = FloatGrid(nir.width(), nir.height());
    out.valid = resolve_mask(mask, nir.width(), nir.height());
    for (std::size_t i = 0; i < nir.size(); ++i) {
        if (!out.valid.valid(i)) continue;
        const auto v = ndvi_value(nir[i], red[i]);
        if (!v) {
            out.valid.set(static_cast<int>(i) / nir.width(), static_cast<int>(i) % nir.width(), false);
            continue;
        }
        // Signed inputs can produce |NDVI| > 1; the nominal range is kept.
        out.grid[i] = std::clamp(*v, -1.0, 1.0);
        if (*v != out.grid[i]) ++out.clamped;
    }
    return out;
}

IndexImage evi(const FloatGrid& nir, const FloatGrid& red, const FloatGrid& blue, const EviCoefficients& coeffs,
               const std::optional<BinaryMask>& mask) {
    coeffs.validate();
    check_same_size(nir.width(), nir.height(), red.width(), red.height(), "EVI inputs");
    check_same_size(nir.width(), nir.height(), blue.width(), blue.height(), "EVI inputs");
    IndexImage out;
    out.kind = IndexKind::evi;
    out.lower = coeffs.lower_bound();
    out.upper = coeffs.upper_bound();
    out.grid = FloatGrid(nir.width(), nir.height());
    out.valid = resolve_mask(mask, nir.width(), nir.height());
    for (std::size_t i = 0; i < nir.size(); ++i) {
        if (!out.valid.valid(i)) continue;
        const auto v = evi_value(nir[i], red[i], blue[i], coeffs);
        if (!v) {
            out.valid.set(static_cast<int>(i) / nir.width(), static_cast<int>(i) % nir.width(), false);
            continue;
        }
        out.grid[i] = std::clamp(*v, out.lower, out.upper);
        if (*v != out.grid[i]) ++out.clamped;
    }
    return out;
}

IndexImage ndvi(const RasterImage& nir, const RasterImage& vis, const std::optional<BinaryMask>& mask) {
    check_rasters(nir, vis);
    return ndvi(reflectance(nir, 0), reflectance(vis, 0), mask);
}

IndexImage evi(const RasterImage& nir, const RasterImage& vis, const EviCoefficients& coeffs,
               const std::optional<BinaryMask>& mask) {
    check_rasters(nir, vis);
    return evi(reflectance(nir, 0), reflectance(vis, 0), reflectance(vis, 2), coeffs, mask);
}

IndexImage compute_index(IndexKind kind, const RasterImage& nir, const RasterImage& vis,
                         const EviCoefficients& coeffs, const std::optional<BinaryMask>& mask) {
    return kind == IndexKind::ndvi ? ndvi(nir, vis, mask) : evi(nir, vis, coeffs, mask);
}

RasterImage index_to_gray(const IndexImage& index) {
    RasterImage out(index.grid.width(), index.grid.height(), 1, 8);
    const double span = index.upper - index.lower;
    for (int y = 0; y < out.height(); ++y) {
        for (int x = 0; x < out.width(); ++x) {
            if (!index.valid.valid(y, x)) continue;
            const double t = (index.grid.at(y, x) - index.lower) / span;
            out.at(y, x) = static_cast<std::uint16_t>(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
        }
    }
    return out;
}

}  // namespace visnir
