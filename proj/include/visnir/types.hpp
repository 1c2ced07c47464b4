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

// Raster and tensor value types shared by every stage of the pipeline.
// All containers are row-major; volumes are indexed (y, x, k) with the class
// axis fastest.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace visnir {

/// Label reserved for pixels excluded from training, histograms and metrics.
inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Integer image as read from disk. 16-bit samples keep their native range.
class RasterImage {
public:
    RasterImage() = default;
    RasterImage(int width, int height, int channels, int depth);
    RasterImage(int width, int height, int channels, int depth, std::vector<std::uint16_t> samples);

    int width() const { return width_; }
    int height() const { return height_; }
    int channels() const { return channels_; }
    int depth() const { return depth_; }
    /// Largest representable sample, 2^depth - 1.
    int max_value() const { return (1 << depth_) - 1; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

    std::uint16_t at(int y, int x, int c = 0) const {
        return samples_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
    }
    std::uint16_t& at(int y, int x, int c = 0) {
        return samples_[(static_cast<std::size_t>(y) * width_ + x) * channels_ + c];
    }
    std::span<const std::uint16_t> samples() const { return samples_; }

    bool same_shape(const RasterImage& other) const {
        return width_ == other.width_ && height_ == other.height_;
    }

    friend bool operator==(const RasterImage&, const RasterImage&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    int channels_ = 1;
    int depth_ = 8;
    std::vector<std::uint16_t> samples_;
};

/// Per-pixel validity flags (1 = valid).
class BinaryMask {
public:
    BinaryMask() = default;
    BinaryMask(int width, int height, bool value = true);
    BinaryMask(int width, int height, std::vector<std::uint8_t> flags);

    int width() const { return width_; }
    int height() const { return height_; }
    bool valid(int y, int x) const { return flags_[static_cast<std::size_t>(y) * width_ + x] != 0; }
    void set(int y, int x, bool v) { flags_[static_cast<std::size_t>(y) * width_ + x] = v ? 1 : 0; }
    bool valid(std::size_t i) const { return flags_[i] != 0; }
    std::size_t count_valid() const;
    std::span<const std::uint8_t> flags() const { return flags_; }

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> flags_;
};

/// Single-channel real-valued image. Values are always finite.
class FloatGrid {
public:
    FloatGrid() = default;
    FloatGrid(int width, int height, double fill = 0.0);
    FloatGrid(int width, int height, std::vector<double> values);

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return values_.size(); }
    double at(int y, int x) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
    double& at(int y, int x) { return values_[static_cast<std::size_t>(y) * width_ + x]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }
    std::span<const double> values() const { return values_; }

    friend bool operator==(const FloatGrid&, const FloatGrid&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<double> values_;
};

/// Dense (height, width, channels) tensor of reals without further invariants.
/// Used directly for un-normalized score volumes.
class Volume {
public:
    Volume() = default;
    Volume(int width, int height, int channels, double fill = 0.0);
    Volume(int width, int height, int channels, std::vector<double> values);

    int width() const { return width_; }
    int height() const { return height_; }
    int channels() const { return channels_; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }
    std::size_t size() const { return values_.size(); }

    double at(int y, int x, int k) const { return values_[offset(y, x) + k]; }
    double& at(int y, int x, int k) { return values_[offset(y, x) + k]; }

    std::span<const double> pixel(std::size_t i) const {
        return {values_.data() + i * channels_, static_cast<std::size_t>(channels_)};
    }
    std::span<double> pixel(std::size_t i) {
        return {values_.data() + i * channels_, static_cast<std::size_t>(channels_)};
    }
    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }

    bool same_shape(const Volume& other) const {
        return width_ == other.width_ && height_ == other.height_ && channels_ == other.channels_;
    }

    friend bool operator==(const Volume&, const Volume&) = default;

protected:
    std::size_t offset(int y, int x) const {
        return (static_cast<std::size_t>(y) * width_ + x) * channels_;
    }

    int width_ = 0;
    int height_ = 0;
    int channels_ = 0;
    std::vector<double> values_;
};

/// Raw pre-softmax network outputs. Construction rejects non-finite values.
class LogitVolume : public Volume {
public:
    LogitVolume() = default;
    explicit LogitVolume(Volume v);
    LogitVolume(int width, int height, int classes, std::vector<double> values);

    int classes() const { return channels_; }
};

/// Per-pixel categorical distributions. Construction rejects values outside
/// [0, 1] and pixels whose sum deviates from 1 by more than 1e-5.
class ProbabilityVolume : public Volume {
public:
    static constexpr double kSumTolerance = 1e-5;

    ProbabilityVolume() = default;
    explicit ProbabilityVolume(Volume v);
    ProbabilityVolume(int width, int height, int classes, std::vector<double> values);

    int classes() const { return channels_; }
};

struct Rgb {
    std::uint8_t r = 0;
    std::uint8_t g = 0;
    std::uint8_t b = 0;
    friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// Ordered class names with display colors; index = label value.
class LabelPalette {
public:
    struct Entry {
        std::string name;
        Rgb color;
    };

    LabelPalette() = default;
    explicit LabelPalette(std::vector<Entry> entries);

    /// The eleven TAS-NIR classes: the nine evaluated surface and vegetation
    /// classes followed by pole and obstacle.
    static LabelPalette tas_nir();

    int size() const { return static_cast<int>(entries_.size()); }
    const Entry& operator[](int k) const { return entries_[k]; }
    const std::vector<Entry>& entries() const { return entries_; }
    /// Index of the named class, or -1.
    int find(const std::string& name) const;

private:
    std::vector<Entry> entries_;
};

/// Per-pixel class indices; kIgnoreLabel marks unlabeled pixels.
class LabelMap {
public:
    LabelMap() = default;
    LabelMap(int width, int height, std::uint8_t fill = kIgnoreLabel);
    LabelMap(int width, int height, std::vector<std::uint8_t> labels);

    int width() const { return width_; }
    int height() const { return height_; }
    std::size_t size() const { return labels_.size(); }
    std::uint8_t at(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
    std::uint8_t& at(int y, int x) { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
    std::uint8_t operator[](std::size_t i) const { return labels_[i]; }
    std::uint8_t& operator[](std::size_t i) { return labels_[i]; }
    std::span<const std::uint8_t> labels() const { return labels_; }

    /// Throws ValidationError when a label is >= classes and not ignore.
    void validate(int classes) const;
    void validate(const LabelPalette& palette) const { validate(palette.size()); }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    std::vector<std::uint8_t> labels_;
};

/// Arg-max over the class axis, ties resolved to the lowest index.
LabelMap argmax_labels(const Volume& scores);

/// Divides every pixel by its channel sum. Pixels summing to zero become
/// uniform.
ProbabilityVolume normalize_pixels(const Volume& scores);

}  // namespace visnir
