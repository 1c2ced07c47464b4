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

// Softmax, temperature scaling (one global temperature or a per-pixel
// temperature map) and reliability statistics.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <variant>
#include <vector>

#include "visnir/temperature_net.hpp"
#include "visnir/types.hpp"

namespace visnir {

/// Numerically stable softmax over the class axis.
ProbabilityVolume softmax(const LogitVolume& logits);
/// softmax(z(x) / T(x)) with a per-pixel temperature.
ProbabilityVolume softmax(const LogitVolume& logits, const FloatGrid& temperature);
/// Single-pixel softmax, used by tests and oracles alike.
std::vector<double> softmax(std::span<const double> logits, double temperature = 1.0);

struct ConfidenceMap {
    FloatGrid confidence;
    LabelMap argmax;
};

/// Per-pixel maximum probability and its class (lowest index on ties).
ConfidenceMap confidence(const ProbabilityVolume& probs);

class TemperatureModel {
public:
    /// T = 1 everywhere.
    TemperatureModel() = default;

    static TemperatureModel global(double temperature);
    static TemperatureModel local(TempNetParams net);

    bool is_global() const { return std::holds_alternative<double>(model_); }
    bool needs_image() const { return !is_global(); }
    /// Throws ValidationError for local models.
    double global_temperature() const;
    /// Throws ValidationError for global models.
    const TempNetParams& net() const;
    int image_channels() const { return is_global() ? 0 : net().image_channels; }

    /// T(x) for every pixel. `image` (features in [0,1]) is required for local
    /// models and ignored for global ones.
    FloatGrid temperature_map(const LogitVolume& logits, const Volume* image = nullptr) const;

private:
    std::variant<double, TempNetParams> model_ = 1.0;
};

/// Non-owning view of one calibration sample.
struct CalibrationSample {
    const LogitVolume* logits = nullptr;
    const LabelMap* labels = nullptr;
    /// Image features; required for local temperature models.
    const Volume* image = nullptr;
};

/// Mean over non-ignored pixels of -log softmax(z / T)[true class].
/// Throws ValidationError when every pixel is ignored.
double nll(const LogitVolume& logits, const LabelMap& labels, const TemperatureModel& model,
           const Volume* image = nullptr);
double nll(std::span<const CalibrationSample> samples, const TemperatureModel& model);

struct GlobalFitResult {
    double temperature = 1.0;
    double nll = 0.0;
    double nll_at_one = 0.0;
    /// The optimum sits at (within tolerance of) a search bound.
    bool at_bound = false;
    int evaluations = 0;

    TemperatureModel model() const { return TemperatureModel::global(temperature); }
};

struct GlobalFitOptions {
    double min_temperature = 0.05;
    double max_temperature = 20.0;
    /// Bracket width at termination, in log T.
    double log_tolerance = 1e-4;
};

/// Golden-section search for the NLL-minimizing temperature in log space.
GlobalFitResult fit_global_temperature(std::span<const CalibrationSample> samples, const GlobalFitOptions& options = {});

struct LocalFitOptions {
    double learning_rate = 1e-3;
    int patch_size = 64;
    int max_epochs = 100;
    int patience = 5;
    double min_delta = 1e-5;
    int hidden = 16;
    std::uint64_t seed = 0;
};

struct LocalFitResult {
    TempNetParams net;
    double initial_nll = 0.0;
    double best_nll = 0.0;
    int epochs = 0;
    bool early_stopped = false;
    bool diverged = false;
    /// Validation NLL after each epoch; entry 0 is the initialization.
    std::vector<double> history;

    TemperatureModel model() const { return TemperatureModel::local(net); }
};

/// Trains the temperature network with Adam on patch mini-batches. The best
/// validation checkpoint is returned, so best_nll <= initial_nll. Patches are
/// shuffled with options.seed.
LocalFitResult fit_local_temperature(std::span<const CalibrationSample> samples, const LocalFitOptions& options = {});

struct CalibratedPrediction {
    ProbabilityVolume probabilities;
    FloatGrid temperature;
};

CalibratedPrediction apply_temperature(const LogitVolume& logits, const TemperatureModel& model,
                                       const Volume* image = nullptr);

/// Confidence histogram over equal-width bins partitioning (0, 1]; bin b
/// covers (b/n, (b+1)/n].
class ReliabilityBins {
public:
    struct Bin {
        double low = 0.0;
        double high = 0.0;
        double mean_confidence = 0.0;
        double accuracy = 0.0;
        std::size_t count = 0;
    };

    explicit ReliabilityBins(int n_bins = 10);

    /// Adds every pixel whose label is not ignore (and that is valid in mask).
    void add(const FloatGrid& confidence, const LabelMap& predicted, const LabelMap& truth,
             const BinaryMask* mask = nullptr);
    void add(double confidence, bool correct);
    void merge(const ReliabilityBins& other);

    int size() const { return static_cast<int>(count_.size()); }
    std::size_t total() const;
    int bin_index(double confidence) const;
    std::vector<Bin> bins() const;

private:
    std::vector<double> confidence_sum_;
    std::vector<std::size_t> correct_;
    std::vector<std::size_t> count_;
};

ReliabilityBins reliability(const ProbabilityVolume& probs, const LabelMap& argmax, const LabelMap& labels,
                            int n_bins = 10);
/// sum_b (count_b / total) |accuracy_b - mean_confidence_b|; 0 for no pixels.
double expected_calibration_error(const ReliabilityBins& bins);

/// CSV with header bin_low,bin_high,mean_conf,accuracy,count.
void save_reliability_csv(const ReliabilityBins& bins, const std::filesystem::path& path);

/// JSON file tagged "global" (scalar) or "local" (layer blobs).
void save_temperature_model(const TemperatureModel& model, const std::filesystem::path& path);
TemperatureModel load_temperature_model(const std::filesystem::path& path);

}  // namespace visnir
