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

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "visnir/types.hpp"

namespace visnir {

/// Rows are ground truth, columns are predictions.
class ConfusionMatrix {
public:
    ConfusionMatrix() = default;
    explicit ConfusionMatrix(int classes);

    int classes() const { return classes_; }
    std::uint64_t at(int truth, int predicted) const {
        return counts_[static_cast<std::size_t>(truth) * classes_ + predicted];
    }
    std::uint64_t total() const { return total_; }

    void add(int truth, int predicted, std::uint64_t n = 1);
    void merge(const ConfusionMatrix& other);

    std::uint64_t true_positives(int k) const { return at(k, k); }
    std::uint64_t false_positives(int k) const;
    std::uint64_t false_negatives(int k) const;

    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

private:
    int classes_ = 0;
    std::vector<std::uint64_t> counts_;
    std::uint64_t total_ = 0;
};

/// Adds every pixel whose ground truth is not ignore and that is valid in
/// `mask`. Predictions must be class indices below K.
ConfusionMatrix accumulate_confusion(const LabelMap& predicted, const LabelMap& truth, ConfusionMatrix existing,
                                     const BinaryMask* mask = nullptr);

enum class AbsentClassPolicy {
    /// Classes with TP + FP + FN = 0 are left out of the mean.
    exclude,
    /// ... or they count as IoU 0.
    zero,
};

std::string to_string(AbsentClassPolicy policy);
AbsentClassPolicy parse_absent_class_policy(const std::string& text);

struct ClassIou {
    int label = 0;
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    /// Empty when the class never occurs in truth or prediction.
    std::optional<double> iou;
};

struct IouReport {
    std::vector<ClassIou> classes;
    /// Empty when no class in the subset is defined.
    std::optional<double> mean;
    AbsentClassPolicy policy = AbsentClassPolicy::exclude;
};

IouReport iou(const ConfusionMatrix& matrix, std::span<const int> subset,
              AbsentClassPolicy policy = AbsentClassPolicy::exclude);

/// The nine evaluated surface and vegetation classes, looked up by name.
std::vector<int> default_class_subset(const LabelPalette& palette);
/// Class names to indices; throws ValidationError on unknown names.
std::vector<int> resolve_class_subset(const LabelPalette& palette, std::span<const std::string> names);

/// "class,iou_percent" rows (2 decimals, "undefined" for absent classes)
/// followed by a mIoU row.
std::string format_metrics_csv(const IouReport& report, const LabelPalette& palette);
void save_metrics_csv(const IouReport& report, const LabelPalette& palette, const std::filesystem::path& path);

}  // namespace visnir
