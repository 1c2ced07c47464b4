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

#include "visnir/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "visnir/error.hpp"
#include "visnir/io.hpp"

namespace visnir {

namespace {

// Writes softmax(z / t) for one pixel; returns log-sum-exp of z / t.
double softmax_pixel(std::span<const double> z, double t, std::span<double> out) {
    double zmax = -std::numeric_limits<double>::infinity();
    for (double v : z) zmax = std::max(zmax, v / t);
    double sum = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) {
        out[k] = std::exp(z[k] / t - zmax);
        sum += out[k];
    }
    for (double& p : out) p /= sum;
    return zmax + std::log(sum);
}

double pixel_nll(std::span<const double> z, double t, int label) {
    double zmax = -std::numeric_limits<double>::infinity();
    for (double v : z) zmax = std::max(zmax, v / t);
    double sum = 0.0;
    for (double v : z) sum += std::exp(v / t - zmax);
    return zmax + std::log(sum) - z[static_cast<std::size_t>(label)] / t;
}

void check_labels(const LogitVolume& logits, const LabelMap& labels) {
    if (labels.width() != logits.width() || labels.height() != logits.height()) {
        throw ValidationError(fmt::format("labels ({}x{}) and logits ({}x{}) differ in size", labels.width(),
                                          labels.height(), logits.width(), logits.height()));
    }
    labels.validate(logits.classes());
}

struct NllSum {
    double sum = 0.0;
    std::size_t pixels = 0;
};

NllSum nll_sum(const LogitVolume& logits, const LabelMap& labels, const FloatGrid& t) {
    NllSum acc;
    for (std::size_t i = 0; i < logits.pixel_count(); ++i) {
        const auto label = labels[i];
        if (label == kIgnoreLabel) continue;
        acc.sum += pixel_nll(logits.pixel(i), t[i], label);
        ++acc.pixels;
    }
    return acc;
}

// Global-temperature NLL without materializing a temperature grid.
NllSum nll_sum(const LogitVolume& logits, const LabelMap& labels, double t) {
    NllSum acc;
    for (std::size_t i = 0; i < logits.pixel_count(); ++i) {
        const auto label = labels[i];
        if (label == kIgnoreLabel) continue;
        acc.sum += pixel_nll(logits.pixel(i), t, label);
        ++acc.pixels;
    }
    return acc;
}

void check_sample(const CalibrationSample& s) {
    if (!s.logits || !s.labels) throw ValidationError("calibration sample without logits or labels");
    check_labels(*s.logits, *s.labels);
}

}  // namespace

ProbabilityVolume softmax(const LogitVolume& logits) {
    Volume out(logits.width(), logits.height(), logits.classes());
    for (std::size_t i = 0; i < logits.pixel_count(); ++i) softmax_pixel(logits.pixel(i), 1.0, out.pixel(i));
    return ProbabilityVolume(std::move(out));
}

ProbabilityVolume softmax(const LogitVolume& logits, const FloatGrid& temperature) {
    if (temperature.width() != logits.width() || temperature.height() != logits.height()) {
        throw ValidationError("temperature map and logits differ in size");
    }
    Volume out(logits.width(), logits.height(), logits.classes());
    for (std::size_t i = 0; i < logits.pixel_count(); ++i) {
        if (!(temperature[i] > 0.0)) {
            throw ValidationError(fmt::format("non-positive temperature {} at pixel {}", temperature[i], i));
        }
        softmax_pixel(logits.pixel(i), temperature[i], out.pixel(i));
    }
    return ProbabilityVolume(std::move(out));
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
    std::vector<double> out(logits.size());
    softmax_pixel(logits, temperature, out);
    return out;
}

ConfidenceMap confidence(const ProbabilityVolume& probs) {
    ConfidenceMap out{FloatGrid(probs.width(), probs.height()), argmax_labels(probs)};
    for (std::size_t i = 0; i < probs.pixel_count(); ++i) out.confidence[i] = probs.pixel(i)[out.argmax[i]];
    return out;
}

TemperatureModel TemperatureModel::global(double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ValidationError(fmt::format("global temperature must be positive, got {}", temperature));
    }
    TemperatureModel m;
    m.model_ = temperature;
    return m;
}

TemperatureModel TemperatureModel::local(TempNetParams net) {
    net.validate();
    TemperatureModel m;
    m.model_ = std::move(net);
    return m;
}

double TemperatureModel::global_temperature() const {
    if (!is_global()) throw ValidationError("temperature model is local");
    return std::get<double>(model_);
}

const TempNetParams& TemperatureModel::net() const {
    if (is_global()) throw ValidationError("temperature model is global");
    return std::get<TempNetParams>(model_);
}

FloatGrid TemperatureModel::temperature_map(const LogitVolume& logits, const Volume* image) const {
    if (is_global()) return FloatGrid(logits.width(), logits.height(), global_temperature());
    if (!image) throw ValidationError("local temperature model requires the input image");
    return visnir::temperature_map(net(), *image, logits);
}

double nll(const LogitVolume& logits, const LabelMap& labels, const TemperatureModel& model, const Volume* image) {
    const CalibrationSample s{&logits, &labels, image};
    return nll(std::span<const CalibrationSample>(&s, 1), model);
}

double nll(std::span<const CalibrationSample> samples, const TemperatureModel& model) {
    NllSum total;
    for (const auto& s : samples) {
        check_sample(s);
        const NllSum part = model.is_global() ? nll_sum(*s.logits, *s.labels, model.global_temperature())
                                              : nll_sum(*s.logits, *s.labels, model.temperature_map(*s.logits, s.image));
        total.sum += part.sum;
        total.pixels += part.pixels;
    }
    if (total.pixels == 0) throw ValidationError("NLL undefined: every pixel is ignored");
    return total.sum / static_cast<double>(total.pixels);
}

GlobalFitResult fit_global_temperature(std::span<const CalibrationSample> samples, const GlobalFitOptions& options) {
    if (samples.empty()) throw ValidationError("global temperature fit: empty validation set");
    if (!(options.min_temperature > 0.0) || !(options.max_temperature > options.min_temperature)) {
        throw ValidationError("global temperature fit: invalid search interval");
    }
    GlobalFitResult result;
    auto objective = [&](double log_t) {
        ++result.evaluations;
        return nll(samples, TemperatureModel::global(std::exp(log_t)));
    };
    result.nll_at_one = objective(0.0);

    const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = std::log(options.min_temperature);
    double b = std::log(options.max_temperature);
    double c = b - inv_phi * (b - a);
    double d = a + inv_phi * (b - a);
    double fc = objective(c);
    double fd = objective(d);
    while (b - a > options.log_tolerance) {
        if (fc < fd) {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = objective(d);
        }
    }
    const double log_t = 0.5 * (a + b);
    result.temperature = std::exp(log_t);
    result.nll = objective(log_t);
    if (result.nll_at_one < result.nll) {
        result.temperature = 1.0;
        result.nll = result.nll_at_one;
    }
    const double lt = std::log(result.temperature);
    result.at_bound = lt - std::log(options.min_temperature) <= options.log_tolerance ||
                      std::log(options.max_temperature) - lt <= options.log_tolerance;
    return result;
}

LocalFitResult fit_local_temperature(std::span<const CalibrationSample> samples, const LocalFitOptions& options) {
    if (samples.empty()) throw ValidationError("local temperature fit: empty validation set");
    if (options.patch_size <= 0 || options.max_epochs < 0 || options.patience <= 0 || !(options.learning_rate > 0.0)) {
        throw ValidationError("local temperature fit: invalid options");
    }
    const int classes = samples[0].logits ? samples[0].logits->classes() : 0;
    const int image_channels = samples[0].image ? samples[0].image->channels() : -1;
    double sq_sum = 0.0;
    std::size_t n_values = 0;
    for (const auto& s : samples) {
        check_sample(s);
        if (!s.image) throw ValidationError("local temperature fit: every sample needs an image");
        if (s.logits->classes() != classes || s.image->channels() != image_channels) {
            throw ValidationError("local temperature fit: inconsistent class or image channel counts");
        }
        if (s.image->width() != s.logits->width() || s.image->height() != s.logits->height()) {
            throw ValidationError("local temperature fit: image and logits differ in size");
        }
        for (double v : s.logits->values()) sq_sum += v * v;
        n_values += s.logits->size();
    }
    const double rms = std::sqrt(sq_sum / static_cast<double>(n_values));
    TempNetParams net = make_temperature_net(image_channels, classes, rms > 1e-12 ? rms : 1.0, options.seed,
                                             options.hidden);

    struct Tile {
        std::size_t sample;
        PixelRect rect;
    };
    std::vector<Tile> tiles;
    for (std::size_t s = 0; s < samples.size(); ++s) {
        const int w = samples[s].logits->width();
        const int h = samples[s].logits->height();
        for (int y = 0; y < h; y += options.patch_size) {
            for (int x = 0; x < w; x += options.patch_size) {
                tiles.push_back({s, {x, y, std::min(options.patch_size, w - x), std::min(options.patch_size, h - y)}});
            }
        }
    }

    LocalFitResult result;
    result.initial_nll = nll(samples, TemperatureModel::local(net));
    result.best_nll = result.initial_nll;
    result.history.push_back(result.initial_nll);
    result.net = net;

    // Adam state.
    std::vector<double> params = net.parameters();
    std::vector<double> m(params.size(), 0.0);
    std::vector<double> v(params.size(), 0.0);
    constexpr double kBeta1 = 0.9;
    constexpr double kBeta2 = 0.999;
    constexpr double kEps = 1e-8;
    std::uint64_t step = 0;
    std::mt19937_64 rng(options.seed);
    int stale = 0;

    for (int epoch = 0; epoch < options.max_epochs; ++epoch) {
        std::shuffle(tiles.begin(), tiles.end(), rng);
        bool finite = true;
        for (const Tile& tile : tiles) {
            const auto& s = samples[tile.sample];
            const NllGradient g = temperature_nll_gradient(net, *s.image, *s.logits, *s.labels, tile.rect);
            if (g.pixels == 0) continue;
            if (!std::isfinite(g.loss_sum)) {
                finite = false;
                break;
            }
            ++step;
            const double inv_n = 1.0 / static_cast<double>(g.pixels);
            const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
            const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
            for (std::size_t p = 0; p < params.size(); ++p) {
                const double grad = g.gradient[p] * inv_n;
                m[p] = kBeta1 * m[p] + (1.0 - kBeta1) * grad;
                v[p] = kBeta2 * v[p] + (1.0 - kBeta2) * grad * grad;
                params[p] -= options.learning_rate * (m[p] / bc1) / (std::sqrt(v[p] / bc2) + kEps);
            }
            if (!std::all_of(params.begin(), params.end(), [](double x) { return std::isfinite(x); })) {
                finite = false;
                break;
            }
            net.set_parameters(params);
        }
        result.epochs = epoch + 1;
        if (!finite) {
            result.diverged = true;
            break;
        }
        const double val = nll(samples, TemperatureModel::local(net));
        result.history.push_back(val);
        if (!std::isfinite(val)) {
            result.diverged = true;
            break;
        }
        stale = val < result.best_nll - options.min_delta ? 0 : stale + 1;
        if (val < result.best_nll) {
            result.best_nll = val;
            result.net = net;
        }
        if (stale >= options.patience) {
            result.early_stopped = true;
            break;
        }
    }
    return result;
}

CalibratedPrediction apply_temperature(const LogitVolume& logits, const TemperatureModel& model, const Volume* image) {
    FloatGrid t = model.temperature_map(logits, image);
    ProbabilityVolume p = softmax(logits, t);
    return {std::move(p), std::move(t)};
}

ReliabilityBins::ReliabilityBins(int n_bins)
    : confidence_sum_(static_cast<std::size_t>(n_bins > 0 ? n_bins : 0), 0.0),
      correct_(confidence_sum_.size(), 0),
      count_(confidence_sum_.size(), 0) {
    if (n_bins <= 0) throw ValidationError("reliability diagram needs at least one bin");
}

int ReliabilityBins::bin_index(double confidence) const {
    const int n = size();
    const int b = static_cast<int>(std::ceil(confidence * n)) - 1;
    return std::clamp(b, 0, n - 1);
}

void ReliabilityBins::add(double confidence, bool correct) {
    const auto b = static_cast<std::size_t>(bin_index(confidence));
    confidence_sum_[b] += confidence;
    correct_[b] += correct ? 1 : 0;
    ++count_[b];
}

void ReliabilityBins::add(const FloatGrid& confidence, const LabelMap& predicted, const LabelMap& truth,
                          const BinaryMask* mask) {
    if (confidence.size() != predicted.size() || confidence.size() != truth.size()) {
        throw ValidationError("reliability: confidence, prediction and labels differ in size");
    }
    for (std::size_t i = 0; i < confidence.size(); ++i) {
        if (truth[i] == kIgnoreLabel) continue;
        if (mask && !mask->valid(i)) continue;
        add(confidence[i], predicted[i] == truth[i]);
    }
}

void ReliabilityBins::merge(const ReliabilityBins& other) {
    if (other.size() != size()) throw ValidationError("reliability: bin counts differ");
    for (std::size_t b = 0; b < count_.size(); ++b) {
        confidence_sum_[b] += other.confidence_sum_[b];
        correct_[b] += other.correct_[b];
        count_[b] += other.count_[b];
    }
}

std::size_t ReliabilityBins::total() const { return std::accumulate(count_.begin(), count_.end(), std::size_t{0}); }

std::vector<ReliabilityBins::Bin> ReliabilityBins::bins() const {
    std::vector<Bin> out(count_.size());
    const double n = static_cast<double>(count_.size());
    for (std::size_t b = 0; b < count_.size(); ++b) {
        out[b].low = static_cast<double>(b) / n;
        out[b].high = static_cast<double>(b + 1) / n;
        out[b].count = count_[b];
        if (count_[b] > 0) {
            out[b].mean_confidence = confidence_sum_[b] / static_cast<double>(count_[b]);
            out[b].accuracy = static_cast<double>(correct_[b]) / static_cast<double>(count_[b]);
        }
    }
    return out;
}

ReliabilityBins reliability(const ProbabilityVolume& probs, const LabelMap& argmax, const LabelMap& labels,
                            int n_bins) {
    ReliabilityBins bins(n_bins);
    FloatGrid conf(probs.width(), probs.height());
    for (std::size_t i = 0; i < probs.pixel_count(); ++i) conf[i] = probs.pixel(i)[argmax[i]];
    bins.add(conf, argmax, labels);
    return bins;
}

double expected_calibration_error(const ReliabilityBins& bins) {
    const std::size_t total = bins.total();
    if (total == 0) return 0.0;
    double ece = 0.0;
    for (const auto& b : bins.bins()) {
        if (b.count == 0) continue;
        ece += static_cast<double>(b.count) / static_cast<double>(total) * std::abs(b.accuracy - b.mean_confidence);
    }
    return ece;
}

void save_reliability_csv(const ReliabilityBins& bins, const std::filesystem::path& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    out << "bin_low,bin_high,mean_conf,accuracy,count\n";
    for (const auto& b : bins.bins()) {
        out << fmt::format("{:.4f},{:.4f},{:.6f},{:.6f},{}\n", b.low, b.high, b.mean_confidence, b.accuracy, b.count);
    }
    if (!out) throw IoError(fmt::format("'{}': write failed", path.string()));
}

void save_temperature_model(const TemperatureModel& model, const std::filesystem::path& path) {
    nlohmann::json j;
    j["format"] = "visnir-temperature-model";
    j["version"] = 1;
    if (model.is_global()) {
        j["type"] = "global";
        j["temperature"] = model.global_temperature();
    } else {
        const auto& net = model.net();
        j["type"] = "local";
        j["image_channels"] = net.image_channels;
        j["classes"] = net.classes;
        j["logit_scale"] = net.logit_scale;
        j["min_temperature"] = net.min_temperature;
        j["hidden_activation"] = "tanh";
        j["output_transform"] = "softplus";
        for (const auto& l : net.layers) {
            j["layers"].push_back({{"in", l.in_channels},
                                   {"out", l.out_channels},
                                   {"kernel", l.kernel},
                                   {"weights", l.weights},
                                   {"bias", l.bias}});
        }
    }
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    out << j.dump(1) << '\n';
    if (!out) throw IoError(fmt::format("'{}': write failed", path.string()));
}

TemperatureModel load_temperature_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open temperature model '{}'", path.string()));
    try {
        const auto j = nlohmann::json::parse(in);
        if (j.value("format", "") != "visnir-temperature-model") {
            throw FormatError(fmt::format("'{}': not a temperature model file", path.string()));
        }
        const auto type = j.at("type").get<std::string>();
        if (type == "global") return TemperatureModel::global(j.at("temperature").get<double>());
        if (type != "local") throw FormatError(fmt::format("'{}': unknown model type '{}'", path.string(), type));
        TempNetParams net;
        net.image_channels = j.at("image_channels").get<int>();
        net.classes = j.at("classes").get<int>();
        net.logit_scale = j.at("logit_scale").get<double>();
        net.min_temperature = j.at("min_temperature").get<double>();
        for (const auto& l : j.at("layers")) {
            ConvLayer layer;
            layer.in_channels = l.at("in").get<int>();
            layer.out_channels = l.at("out").get<int>();
            layer.kernel = l.at("kernel").get<int>();
            layer.weights = l.at("weights").get<std::vector<double>>();
            layer.bias = l.at("bias").get<std::vector<double>>();
            net.layers.push_back(std::move(layer));
        }
        return TemperatureModel::local(std::move(net));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(fmt::format("'{}': {}", path.string(), e.what()));
    }
}

}  // namespace visnir
