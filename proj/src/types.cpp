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

#include "visnir/types.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "visnir/error.hpp"

namespace visnir {

namespace {

void check_dims(int width, int height, const char* what) {
    if (width <= 0 || height <= 0) {
        throw ValidationError(fmt::format("{}: dimensions must be positive, got {}x{}", what, width, height));
    }
}

void check_finite(std::span<const double> values, const char* what) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw ValidationError(fmt::format("{}: non-finite value at flat index {}", what, i));
        }
    }
}

}  // namespace

RasterImage::RasterImage(int width, int height, int channels, int depth)
    : RasterImage(width, height, channels, depth,
                  std::vector<std::uint16_t>(static_cast<std::size_t>(std::max(width, 0)) *
                                             std::max(height, 0) * std::max(channels, 0))) {}

RasterImage::RasterImage(int width, int height, int channels, int depth, std::vector<std::uint16_t> samples)
    : width_(width), height_(height), channels_(channels), depth_(depth), samples_(std::move(samples)) {
    check_dims(width, height, "RasterImage");
    if (channels != 1 && channels != 3) {
        throw ValidationError(fmt::format("RasterImage: channels must be 1 or 3, got {}", channels));
    }
    if (depth != 8 && depth != 16) {
        throw ValidationError(fmt::format("RasterImage: depth must be 8 or 16, got {}", depth));
    }
    if (samples_.size() != static_cast<std::size_t>(width) * height * channels) {
        throw ValidationError("RasterImage: sample buffer size does not match dimensions");
    }
    const auto max = static_cast<std::uint16_t>(max_value());
    if (std::any_of(samples_.begin(), samples_.end(), [max](std::uint16_t s) { return s > max; })) {
        throw ValidationError(fmt::format("RasterImage: sample exceeds {}-bit range", depth));
    }
}

BinaryMask::BinaryMask(int width, int height, bool value)
    : BinaryMask(width, height,
                 std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0),
                                           value ? 1 : 0)) {}

BinaryMask::BinaryMask(int width, int height, std::vector<std::uint8_t> flags)
    : width_(width), height_(height), flags_(std::move(flags)) {
    check_dims(width, height, "BinaryMask");
    if (flags_.size() != static_cast<std::size_t>(width) * height) {
        throw ValidationError("BinaryMask: flag buffer size does not match dimensions");
    }
    for (auto& f : flags_) f = f ? 1 : 0;
}

std::size_t BinaryMask::count_valid() const {
    return static_cast<std::size_t>(std::count(flags_.begin(), flags_.end(), std::uint8_t{1}));
}

FloatGrid::FloatGrid(int width, int height, double fill)
    : FloatGrid(width, height,
                std::vector<double>(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0), fill)) {}

FloatGrid::FloatGrid(int width, int height, std::vector<double> values)
    : width_(width), height_(height), values_(std::move(values)) {
    check_dims(width, height, "FloatGrid");
    if (values_.size() != static_cast<std::size_t>(width) * height) {
        throw ValidationError("FloatGrid: value buffer size does not match dimensions");
    }
    check_finite(values_, "FloatGrid");
}

Volume::Volume(int width, int height, int channels, double fill)
    : Volume(width, height, channels,
             std::vector<double>(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0) *
                                     std::max(channels, 0),
                                 fill)) {}

Volume::Volume(int width, int height, int channels, std::vector<double> values)
    : width_(width), height_(height), channels_(channels), values_(std::move(values)) {
    check_dims(width, height, "Volume");
    if (channels <= 0) {
        throw ValidationError(fmt::format("Volume: channel count must be positive, got {}", channels));
    }
    if (values_.size() != static_cast<std::size_t>(width) * height * channels) {
        throw ValidationError("Volume: value buffer size does not match shape");
    }
}

LogitVolume::LogitVolume(Volume v) : Volume(std::move(v)) { check_finite(values_, "LogitVolume"); }

LogitVolume::LogitVolume(int width, int height, int classes, std::vector<double> values)
    : LogitVolume(Volume(width, height, classes, std::move(values))) {}

ProbabilityVolume::ProbabilityVolume(Volume v) : Volume(std::move(v)) {
    check_finite(values_, "ProbabilityVolume");
    for (std::size_t i = 0; i < pixel_count(); ++i) {
        double sum = 0.0;
        for (double p : pixel(i)) {
            if (p < 0.0 || p > 1.0) {
                throw ValidationError(fmt::format("ProbabilityVolume: value {} outside [0,1] at pixel {}", p, i));
            }
            sum += p;
        }
        if (std::abs(sum - 1.0) > kSumTolerance) {
            throw ValidationError(fmt::format("ProbabilityVolume: pixel {} sums to {}", i, sum));
        }
    }
}

ProbabilityVolume::ProbabilityVolume(int width, int height, int classes, std::vector<double> values)
    : ProbabilityVolume(Volume(width, height, classes, std::move(values))) {}

LabelPalette::LabelPalette(std::vector<Entry> entries) : entries_(std::move(entries)) {
    if (entries_.empty()) throw ValidationError("LabelPalette: no classes");
    if (entries_.size() >= kIgnoreLabel) {
        throw ValidationError(fmt::format("LabelPalette: at most {} classes supported", kIgnoreLabel - 1));
    }
    std::set<std::string> seen;
    for (const auto& e : entries_) {
        if (e.name.empty()) throw ValidationError("LabelPalette: empty class name");
        if (!seen.insert(e.name).second) {
            throw ValidationError(fmt::format("LabelPalette: duplicate class name '{}'", e.name));
        }
    }
}

LabelPalette LabelPalette::tas_nir() {
    return LabelPalette({
        {"asphalt", {128, 64, 128}},   {"gravel", {190, 153, 153}},     {"soil", {140, 90, 40}},
        {"low grass", {150, 240, 80}}, {"high grass", {60, 160, 20}},   {"bush", {0, 110, 60}},
        {"tree crown", {0, 190, 120}}, {"tree trunk", {110, 70, 20}},   {"forest", {20, 60, 20}},
        {"pole", {255, 220, 0}},       {"obstacle", {220, 20, 60}},
    });
}

int LabelPalette::find(const std::string& name) const {
    for (std::size_t k = 0; k < entries_.size(); ++k) {
        if (entries_[k].name == name) return static_cast<int>(k);
    }
    return -1;
}

LabelMap::LabelMap(int width, int height, std::uint8_t fill)
    : LabelMap(width, height,
               std::vector<std::uint8_t>(static_cast<std::size_t>(std::max(width, 0)) * std::max(height, 0), fill)) {}

LabelMap::LabelMap(int width, int height, std::vector<std::uint8_t> labels)
    : width_(width), height_(height), labels_(std::move(labels)) {
    check_dims(width, height, "LabelMap");
    if (labels_.size() != static_cast<std::size_t>(width) * height) {
        throw ValidationError("LabelMap: label buffer size does not match dimensions");
    }
}

void LabelMap::validate(int classes) const {
    for (std::size_t i = 0; i < labels_.size(); ++i) {
        const auto l = labels_[i];
        if (l != kIgnoreLabel && l >= classes) {
            throw ValidationError(
                fmt::format("label {} at pixel {} is not below class count {} and is not ignore", l, i, classes));
        }
    }
}

LabelMap argmax_labels(const Volume& scores) {
    LabelMap out(scores.width(), scores.height(), std::uint8_t{0});
    for (std::size_t i = 0; i < scores.pixel_count(); ++i) {
        const auto px = scores.pixel(i);
        // max_element returns the first maximum, which is the lowest index.
        out[i] = static_cast<std::uint8_t>(std::max_element(px.begin(), px.end()) - px.begin());
    }
    return out;
}

ProbabilityVolume normalize_pixels(const Volume& scores) {
    Volume out = scores;
    for (std::size_t i = 0; i < out.pixel_count(); ++i) {
        auto px = out.pixel(i);
        double sum = 0.0;
        for (double v : px) {
            if (v < 0.0) throw ValidationError("normalize_pixels: negative score");
            sum += v;
        }
        for (double& v : px) v = sum > 0.0 ? v / sum : 1.0 / static_cast<double>(px.size());
    }
    return ProbabilityVolume(std::move(out));
}

}  // namespace visnir
