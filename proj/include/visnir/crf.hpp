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

// Fully connected CRF with a Potts model and two Gaussian kernels:
//   smoothness  exp(-|p_i - p_j|^2 / 2 theta_gamma^2)
//   appearance  exp(-|p_i - p_j|^2 / 2 theta_alpha^2 - |I_i - I_j|^2 / 2 theta_beta^2)
// Inference is the usual parallel mean-field update
//   Q_i(l) ~ u_i(l) exp(sum_m w_m sum_{j != i} k_m(i, j) Q_j(l)).

#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "visnir/types.hpp"
#include "visnir/veg_index.hpp"

namespace visnir {

/// How the pairwise sums are computed inside mean_field.
enum class CrfFilter {
    /// Exact Gaussians, truncated where the spatial factor drops below
    /// CrfConfig::truncation. Cost O(N r^2) for the appearance kernel.
    truncated,
    /// Permutohedral lattice, O(N d^2) but only approximately Gaussian.
    lattice,
};

std::string to_string(CrfFilter filter);
CrfFilter parse_crf_filter(const std::string& text);

struct CrfConfig {
    double theta_alpha = 10.0;
    double theta_beta = 13.0;
    double theta_gamma = 3.0;
    double w_appearance = 10.0;
    double w_smoothness = 3.0;
    int iterations = 10;
    /// Unaries are clamped to at least this before the log.
    double unary_floor = 1e-8;
    CrfFilter filter = CrfFilter::truncated;
    /// Spatial kernel values below this are dropped by the truncated filter.
    double truncation = 1e-9;

    void validate() const;
};

/// Per-pixel intensities (1 or 3 channels) on the 0..255 scale the
/// appearance kernel's theta_beta refers to. Pixel coordinates are implicit.
class GuidanceImage {
public:
    GuidanceImage() = default;
    GuidanceImage(int width, int height, int channels, std::vector<double> intensities);

    /// Samples scaled by 255 / (2^depth - 1).
    static GuidanceImage from_raster(const RasterImage& image);
    /// Nominal index range mapped onto [0, 255]; invalid pixels get 0.
    static GuidanceImage from_index(const IndexImage& index);

    int width() const { return width_; }
    int height() const { return height_; }
    int channels() const { return channels_; }
    std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }
    double at(std::size_t i, int c) const { return intensities_[i * channels_ + c]; }
    std::span<const double> intensities() const { return intensities_; }

private:
    int width_ = 0;
    int height_ = 0;
    int channels_ = 1;
    std::vector<double> intensities_;
};

/// Permutohedral lattice for Gaussian filtering in a d-dimensional feature
/// space; filter() approximates out_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j.
class PermutohedralLattice {
public:
    /// features: N x dims, row-major, already divided by the kernel widths.
    PermutohedralLattice(std::span<const double> features, int dims);
    ~PermutohedralLattice();
    PermutohedralLattice(PermutohedralLattice&&) noexcept;
    PermutohedralLattice& operator=(PermutohedralLattice&&) noexcept;

    std::size_t points() const;
    std::size_t lattice_points() const;
    /// values, out: N x channels.
    void filter(std::span<const double> values, int channels, std::span<double> out) const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// out_i = sum_j exp(-|f_i - f_j|^2 / 2) v_j (self term included) for
/// features already divided by the kernel widths. `truncated` drops pairs
/// whose kernel value is below `truncation` and finds the rest through a
/// uniform cell grid; `lattice` uses PermutohedralLattice.
std::vector<double> gaussian_filter_bank(std::span<const double> features, int dims, std::span<const double> values,
                                         int channels, CrfFilter method = CrfFilter::truncated,
                                         double truncation = 1e-9);
/// The same sum by explicit double loop.
std::vector<double> exact_gaussian_filter(std::span<const double> features, int dims, std::span<const double> values,
                                          int channels);

struct CrfResult {
    ProbabilityVolume marginals;
    LabelMap labels;
};

/// Called after every iteration with the current marginals (1-based).
using IterationObserver = std::function<void(int iteration, const ProbabilityVolume& marginals)>;

CrfResult mean_field(const ProbabilityVolume& unaries, const GuidanceImage& guide, const CrfConfig& config = {},
                     const IterationObserver& observer = {});

/// Reference inference with pairwise sums over all pixel pairs. Refuses
/// images with more than 4096 pixels.
ProbabilityVolume naive_mean_field(const ProbabilityVolume& unaries, const GuidanceImage& guide,
                                   const CrfConfig& config = {});

inline constexpr std::size_t kNaivePixelLimit = 4096;

}  // namespace visnir
