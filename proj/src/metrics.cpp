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

#include "visnir/metrics.hpp"

#include <fstream>

#include <fmt/format.h>

#include "visnir/error.hpp"
#include "visnir/io.hpp"

namespace visnir {

ConfusionMatrix::ConfusionMatrix(int classes) : classes_(classes) {
    if (classes <= 0) throw ValidationError("confusion matrix needs at least one class");
    counts_.assign(static_cast<std::size_t>(classes) * classes, 0);
}

void ConfusionMatrix::add(int truth, int predicted, std::uint64_t n) {
    if (truth < 0 || truth >= classes_ || predicted < 0 || predicted >= classes_) {
        throw ValidationError(
            fmt::format("confusion entry ({}, {}) outside a {}-class matrix", truth, predicted, classes_));
    }
    counts_[static_cast<std::size_t>(truth) * classes_ + predicted] += n;
    total_ += n;
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) {
        throw ValidationError(fmt::format("cannot merge {}-class and {}-class matrices", classes_, other.classes_));
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    total_ += other.total_;
}

std::uint64_t ConfusionMatrix::false_positives(int k) const {
    std::uint64_t s = 0;
    for (int t = 0; t < classes_; ++t) {
        if (t != k) s += at(t, k);
    }
    return s;
}

std::uint64_t ConfusionMatrix::false_negatives(int k) const {
    std::uint64_t s = 0;
    for (int p = 0; p < classes_; ++p) {
        if (p != k) s += at(k, p);
    }
    return s;
}

ConfusionMatrix accumulate_confusion(const LabelMap& predicted, const LabelMap& truth, ConfusionMatrix existing,
                                     const BinaryMask* mask) {
    if (predicted.width() != truth.width() || predicted.height() != truth.height()) {
        throw ValidationError(fmt::format("prediction ({}x{}) and ground truth ({}x{}) differ in size",
                                          predicted.width(), predicted.height(), truth.width(), truth.height()));
    }
    if (mask && (mask->width() != truth.width() || mask->height() != truth.height())) {
        throw ValidationError("evaluation mask and ground truth differ in size");
    }
    truth.validate(existing.classes());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] == kIgnoreLabel || (mask && !mask->valid(i))) continue;
        existing.add(truth[i], predicted[i]);
    }
    return existing;
}

std::string to_string(AbsentClassPolicy policy) { return policy == AbsentClassPolicy::exclude ? "exclude" : "zero"; }

AbsentClassPolicy parse_absent_class_policy(const std::string& text) {
    if (text == "exclude") return AbsentClassPolicy::exclude;
    if (text == "zero") return AbsentClassPolicy::zero;
    throw ValidationError(fmt::format("unknown absent-class policy '{}' (expected exclude or zero)", text));
}

IouReport iou(const ConfusionMatrix& matrix, std::span<const int> subset, AbsentClassPolicy policy) {
    if (subset.empty()) throw ValidationError("IoU over an empty class subset");
    IouReport report;
    report.policy = policy;
    double sum = 0.0;
    int counted = 0;
    for (int k : subset) {
        if (k < 0 || k >= matrix.classes()) {
            throw ValidationError(fmt::format("class {} outside the {}-class matrix", k, matrix.classes()));
        }
        ClassIou c;
        c.label = k;
        c.tp = matrix.true_positives(k);
        c.fp = matrix.false_positives(k);
        c.fn = matrix.false_negatives(k);
        const auto den = c.tp + c.fp + c.fn;
        if (den > 0) {
            c.iou = static_cast<double>(c.tp) / static_cast<double>(den);
            sum += *c.iou;
            ++counted;
        } else if (policy == AbsentClassPolicy::zero) {
            ++counted;
        }
        report.classes.push_back(c);
    }
    if (counted > 0) report.mean = sum / counted;
    return report;
}

std::vector<int> default_class_subset(const LabelPalette& palette) {
    static const std::vector<std::string> names = {"asphalt", "gravel",     "soil",       "low grass", "high grass",
                                                   "bush",    "tree crown", "tree trunk", "forest"};
    return resolve_class_subset(palette, names);
}

std::vector<int> resolve_class_subset(const LabelPalette& palette, std::span<const std::string> names) {
    std::vector<int> out;
    for (const auto& n : names) {
        const int k = palette.find(n);
        if (k < 0) throw ValidationError(fmt::format("class '{}' is not in the palette", n));
        out.push_back(k);
    }
    return out;
}

std::string format_metrics_csv(const IouReport& report, const LabelPalette& palette) {
    const auto pct = [](const std::optional<double>& v) {
        return v ? fmt::format("{:.2f}", 100.0 * *v) : std::string("undefined");
    };
    std::string out = "class,iou_percent\n";
    for (const auto& c : report.classes) {
        const std::string name = c.label < palette.size() ? palette[c.label].name : fmt::format("class{}", c.label);
        out += fmt::format("{},{}\n", name, pct(c.iou));
    }
    out += fmt::format("mIoU,{}\n", pct(report.mean));
    return out;
}

void save_metrics_csv(const IouReport& report, const LabelPalette& palette, const std::filesystem::path& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc | std::ios::binary);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    out << format_metrics_csv(report, palette);
    if (!out) throw IoError(fmt::format("'{}': write failed", path.string()));
}

}  // namespace visnir
