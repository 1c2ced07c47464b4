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

#include "visnir/fusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include <boost/algorithm/string.hpp>
#include <fmt/format.h>

#include "visnir/error.hpp"
#include "visnir/io.hpp"

namespace visnir {

int default_bins(IndexKind kind) { return kind == IndexKind::ndvi ? 16 : 20; }

ClassHistogramModel::ClassHistogramModel(IndexKind kind, int classes, int n_bins, double lower, double upper)
    : kind_(kind), classes_(classes), bins_(n_bins), lower_(lower), upper_(upper) {
    if (n_bins <= 0) throw ValidationError("histogram needs at least one bin");
    if (classes <= 0) throw ValidationError("histogram needs at least one class");
    if (!(upper > lower) || !std::isfinite(lower) || !std::isfinite(upper)) {
        throw ValidationError(fmt::format("invalid histogram range [{}, {}]", lower, upper));
    }
    counts_.assign(static_cast<std::size_t>(classes) * n_bins, 0);
    support_.assign(static_cast<std::size_t>(classes), 0);
}

ClassHistogramModel ClassHistogramModel::for_kind(IndexKind kind, int classes, int n_bins,
                                                  const EviCoefficients& coeffs) {
    if (kind == IndexKind::ndvi) return ClassHistogramModel(kind, classes, n_bins, -1.0, 1.0);
    coeffs.validate();
    return ClassHistogramModel(kind, classes, n_bins, coeffs.lower_bound(), coeffs.upper_bound());
}

double ClassHistogramModel::bin_low(int b) const { return lower_ + (upper_ - lower_) * b / bins_; }
double ClassHistogramModel::bin_high(int b) const { return lower_ + (upper_ - lower_) * (b + 1) / bins_; }

int ClassHistogramModel::bin_index(double value) const {
    if (!(value > lower_)) return 0;
    if (!(value < upper_)) return bins_ - 1;
    const int b = static_cast<int>(std::floor((value - lower_) / (upper_ - lower_) * bins_));
    return std::clamp(b, 0, bins_ - 1);
}

void ClassHistogramModel::add(int label, double value, std::uint64_t n) {
    if (label < 0 || label >= classes_) {
        throw ValidationError(fmt::format("histogram label {} outside [0, {})", label, classes_));
    }
    counts_[index(label, bin_index(value))] += n;
    support_[static_cast<std::size_t>(label)] += n;
}

void ClassHistogramModel::add(const IndexImage& index, const LabelMap& labels) {
    if (index.kind != kind_) {
        throw ValidationError(
            fmt::format("histogram is {} but index image is {}", to_string(kind_), to_string(index.kind)));
    }
    if (index.grid.width() != labels.width() || index.grid.height() != labels.height()) {
        throw ValidationError("index image and labels differ in size");
    }
    labels.validate(classes_);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kIgnoreLabel || !index.valid.valid(i)) continue;
        add(labels[i], index.grid[i]);
    }
}

void ClassHistogramModel::merge(const ClassHistogramModel& other) {
    if (other.kind_ != kind_ || other.classes_ != classes_ || other.bins_ != bins_ || other.lower_ != lower_ ||
        other.upper_ != upper_) {
        throw ValidationError("cannot merge histograms with different layouts");
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    for (std::size_t k = 0; k < support_.size(); ++k) support_[k] += other.support_[k];
}

double ClassHistogramModel::weight(int k, int b) const {
    const auto s = support(k);
    if (s == 0) return 0.0;
    return static_cast<double>(count(k, b)) / static_cast<double>(s);
}

ClassHistogramModel accumulate_histograms(std::span<const HistogramSample> samples, IndexKind kind, int classes,
                                          int n_bins, const EviCoefficients& coeffs) {
    if (samples.empty()) throw ValidationError("histogram accumulation over an empty sample list");
    auto model = ClassHistogramModel::for_kind(kind, classes, n_bins, coeffs);
    for (const auto& s : samples) {
        if (!s.index || !s.labels) throw ValidationError("histogram sample without index or labels");
        model.add(*s.index, *s.labels);
    }
    return model;
}

std::vector<double> histogram_weights(double value, const ClassHistogramModel& model) {
    const int b = model.bin_index(value);
    std::vector<double> w(static_cast<std::size_t>(model.classes()));
    for (int k = 0; k < model.classes(); ++k) w[static_cast<std::size_t>(k)] = model.weight(k, b);
    return w;
}

void FusionConfig::validate() const {
    if (!(beta >= 0.0) || !std::isfinite(beta)) {
        throw ValidationError(fmt::format("fusion beta must be finite and >= 0, got {}", beta));
    }
}

FusionResult fuse_multi(const ProbabilityVolume& calibrated, std::span<const IndexEvidence> evidence,
                        const FusionConfig& config) {
    config.validate();
    const int classes = calibrated.classes();
    for (const auto& e : evidence) {
        if (!e.index || !e.model) throw ValidationError("fusion evidence without index or model");
        if (e.index->kind != e.model->kind()) {
            throw ValidationError(fmt::format("histogram model is {} but index image is {}", to_string(e.model->kind()),
                                              to_string(e.index->kind)));
        }
        if (e.model->classes() != classes) {
            throw ValidationError(fmt::format("histogram model has {} classes, probabilities have {}",
                                              e.model->classes(), classes));
        }
        if (e.index->grid.width() != calibrated.width() || e.index->grid.height() != calibrated.height()) {
            throw ValidationError("index image and probabilities differ in size");
        }
    }
    Volume scores(calibrated.width(), calibrated.height(), classes);
    for (std::size_t i = 0; i < calibrated.pixel_count(); ++i) {
        auto out = scores.pixel(i);
        const auto p = calibrated.pixel(i);
        std::copy(p.begin(), p.end(), out.begin());
        for (const auto& e : evidence) {
            if (!e.index->valid.valid(i)) continue;
            const int b = e.model->bin_index(e.index->grid[i]);
            for (int k = 0; k < classes; ++k) out[static_cast<std::size_t>(k)] += config.beta * e.model->weight(k, b);
        }
    }
    LabelMap labels = argmax_labels(scores);
    ProbabilityVolume normalized = normalize_pixels(scores);
    return {std::move(labels), std::move(scores), std::move(normalized)};
}

FusionResult fuse(const ProbabilityVolume& calibrated, const IndexImage& index, const ClassHistogramModel& model,
                  const FusionConfig& config) {
    const IndexEvidence e{&index, &model};
    return fuse_multi(calibrated, std::span<const IndexEvidence>(&e, 1), config);
}

void save_histogram_csv(const ClassHistogramModel& model, const std::filesystem::path& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    out << fmt::format("# kind={};lower={:.17g};upper={:.17g};bins={};classes={}\n", to_string(model.kind()),
                       model.lower(), model.upper(), model.bins(), model.classes());
    out << "class,bin_low,bin_high,weight,support\n";
    for (int k = 0; k < model.classes(); ++k) {
        for (int b = 0; b < model.bins(); ++b) {
            out << fmt::format("{},{:.17g},{:.17g},{:.17g},{}\n", k, model.bin_low(b), model.bin_high(b),
                               model.weight(k, b), model.support(k));
        }
    }
    if (!out) throw IoError(fmt::format("'{}': write failed", path.string()));
}

ClassHistogramModel load_histogram_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open histogram model '{}'", path.string()));
    const auto fail = [&](const std::string& what) {
        return FormatError(fmt::format("histogram model '{}': {}", path.string(), what));
    };
    std::string line;
    if (!std::getline(in, line) || !boost::starts_with(line, "# ")) throw fail("missing '# kind=...' line");
    std::map<std::string, std::string> header;
    std::vector<std::string> fields;
    boost::split(fields, line.substr(2), boost::is_any_of(";"));
    for (const auto& f : fields) {
        const auto eq = f.find('=');
        if (eq == std::string::npos) throw fail(fmt::format("bad header field '{}'", f));
        header[boost::trim_copy(f.substr(0, eq))] = boost::trim_copy(f.substr(eq + 1));
    }
    ClassHistogramModel model;
    try {
        model = ClassHistogramModel(parse_index_kind(header.at("kind")), std::stoi(header.at("classes")),
                                    std::stoi(header.at("bins")), std::stod(header.at("lower")),
                                    std::stod(header.at("upper")));
    } catch (const std::out_of_range&) {
        throw fail("header needs kind, lower, upper, bins and classes");
    } catch (const std::invalid_argument&) {
        throw fail("unparseable header value");
    }
    if (!std::getline(in, line) || boost::trim_copy(line) != "class,bin_low,bin_high,weight,support") {
        throw fail("missing column header");
    }
    std::size_t rows = 0;
    std::vector<std::uint64_t> stated(static_cast<std::size_t>(model.classes()), 0);
    while (std::getline(in, line)) {
        if (boost::trim_copy(line).empty()) continue;
        boost::split(fields, line, boost::is_any_of(","));
        if (fields.size() != 5) throw fail(fmt::format("expected 5 columns in '{}'", line));
        try {
            const int k = std::stoi(fields[0]);
            const double low = std::stod(fields[1]);
            const double weight = std::stod(fields[3]);
            const auto support = std::stoull(fields[4]);
            if (k < 0 || k >= model.classes()) throw fail(fmt::format("class {} out of range", k));
            const long long n = std::llround(weight * static_cast<double>(support));
            if (n < 0) throw fail("negative weight");
            stated[static_cast<std::size_t>(k)] = support;
            // Bin located by its lower edge; the midpoint avoids edge rounding.
            const int b = model.bin_index(low + 0.5 * (model.upper() - model.lower()) / model.bins());
            model.add(k, model.bin_low(b) + 0.5 * (model.upper() - model.lower()) / model.bins(),
                      static_cast<std::uint64_t>(n));
        } catch (const std::logic_error&) {
            throw fail(fmt::format("unparseable row '{}'", line));
        }
        ++rows;
    }
    if (rows != static_cast<std::size_t>(model.classes()) * model.bins()) {
        throw fail(fmt::format("expected {} rows, found {}", model.classes() * model.bins(), rows));
    }
    for (int k = 0; k < model.classes(); ++k) {
        if (model.support(k) != stated[static_cast<std::size_t>(k)]) {
            throw fail(fmt::format("class {} weights do not add up to its support", k));
        }
    }
    return model;
}

}  // namespace visnir
