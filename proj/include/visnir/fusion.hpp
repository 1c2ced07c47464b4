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

// Per-class vegetation-index histograms and their fusion with calibrated
// class probabilities: fused_k = beta * w_k(index) + p_k.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "visnir/types.hpp"
#include "visnir/veg_index.hpp"

namespace visnir {

/// 16 bins for NDVI, 20 for EVI.
int default_bins(IndexKind kind);

/// Bin counts per class over a fixed index range. Weights are derived from
/// the counts, so merging two models is exact.
class ClassHistogramModel {
public:
    ClassHistogramModel() = default;
    ClassHistogramModel(IndexKind kind, int classes, int n_bins, double lower, double upper);
    /// Nominal range of the index kind: [-1, 1] for NDVI, [-2/c1, 2] for EVI.
    static ClassHistogramModel for_kind(IndexKind kind, int classes, int n_bins,
                                        const EviCoefficients& coeffs = {});

    IndexKind kind() const { return kind_; }
    int classes() const { return classes_; }
    int bins() const { return bins_; }
    double lower() const { return lower_; }
    double upper() const { return upper_; }
    double bin_low(int b) const;
    double bin_high(int b) const;

    /// Values outside the range land in the edge bins.
    int bin_index(double value) const;

    /// Counts every valid, non-ignored pixel.
    void add(const IndexImage& index, const LabelMap& labels);
    void add(int label, double value, std::uint64_t n = 1);
    /// Throws ValidationError when kind, range, bins or classes differ.
    void merge(const ClassHistogramModel& other);

    std::uint64_t count(int k, int b) const { return counts_[index(k, b)]; }
    std::uint64_t support(int k) const { return support_[static_cast<std::size_t>(k)]; }
    /// count / support, or 0 for unseen classes.
    double weight(int k, int b) const;

    friend bool operator==(const ClassHistogramModel&, const ClassHistogramModel&) = default;

private:
    std::size_t index(int k, int b) const { return static_cast<std::size_t>(k) * bins_ + b; }

    IndexKind kind_ = IndexKind::ndvi;
    int classes_ = 0;
    int bins_ = 0;
    double lower_ = -1.0;
    double upper_ = 1.0;
    std::vector<std::uint64_t> counts_;
    std::vector<std::uint64_t> support_;
};

struct HistogramSample {
    const IndexImage* index = nullptr;
    const LabelMap* labels = nullptr;
};

ClassHistogramModel accumulate_histograms(std::span<const HistogramSample> samples, IndexKind kind, int classes,
                                          int n_bins, const EviCoefficients& coeffs = {});

/// K-vector of bin weights at one index value.
std::vector<double> histogram_weights(double value, const ClassHistogramModel& model);

struct FusionConfig {
    double beta = 0.75;

    void validate() const;
};

struct FusionResult {
    LabelMap labels;
    /// beta * w + p, un-normalized.
    Volume scores;
    /// scores divided by their per-pixel sum.
    ProbabilityVolume normalized;
};

/// Pixels where the index is invalid get w = 0, so their fused score is the
/// calibrated probability.
FusionResult fuse(const ProbabilityVolume& calibrated, const IndexImage& index, const ClassHistogramModel& model,
                  const FusionConfig& config = {});

struct IndexEvidence {
    const IndexImage* index = nullptr;
    const ClassHistogramModel* model = nullptr;
};

/// Experimental: sums beta * w over several index kinds.
FusionResult fuse_multi(const ProbabilityVolume& calibrated, std::span<const IndexEvidence> evidence,
                        const FusionConfig& config = {});

/// CSV with a "# kind=...;lower=...;upper=...;bins=...;classes=..." line,
/// then class,bin_low,bin_high,weight,support rows.
void save_histogram_csv(const ClassHistogramModel& model, const std::filesystem::path& path);
ClassHistogramModel load_histogram_csv(const std::filesystem::path& path);

}  // namespace visnir
