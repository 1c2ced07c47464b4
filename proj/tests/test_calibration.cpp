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

#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "visnir/calibration.hpp"
#include "visnir/error.hpp"
#include "visnir/synth.hpp"

namespace visnir {
namespace {

TEST(Softmax, HandCase) {
    const std::vector<double> z = {1.0, 2.0, 3.0};
    const auto p = softmax(z);
    const double s = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    EXPECT_NEAR(p[0], std::exp(1.0) / s, 1e-15);
    EXPECT_NEAR(p[2], std::exp(3.0) / s, 1e-15);
    const auto q = softmax(z, 2.0);
    const double s2 = std::exp(0.5) + std::exp(1.0) + std::exp(1.5);
    EXPECT_NEAR(q[1], std::exp(1.0) / s2, 1e-15);
}

TEST(Softmax, StableForHugeLogits) {
    const std::vector<double> z = {1000.0, 999.0, -1000.0};
    const auto p = softmax(z);
    EXPECT_NEAR(p[0], 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
    EXPECT_EQ(p[2], 0.0);
}

TEST(Softmax, VolumeRowsSumToOne) {
    std::mt19937_64 rng(1);
    const LogitVolume z = testing::random_logits(8, 8, 5, rng, 20.0);
    const ProbabilityVolume p = softmax(z);
    for (std::size_t i = 0; i < p.pixel_count(); ++i) {
        double s = 0.0;
        for (double v : p.pixel(i)) s += v;
        EXPECT_NEAR(s, 1.0, 1e-12);
    }
}

TEST(Temperature, ArgmaxInvariantUnderScaling) {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> t(0.05, 20.0);
    const LogitVolume z = testing::random_logits(50, 40, 6, rng);
    const LabelMap before = argmax_labels(z);
    for (int trial = 0; trial < 5; ++trial) {
        const auto out = apply_temperature(z, TemperatureModel::global(t(rng)));
        EXPECT_EQ(confidence(out.probabilities).argmax, before);
    }
}

TEST(Temperature, LocalModelKeepsArgmax) {
    std::mt19937_64 rng(3);
    const LogitVolume z = testing::random_logits(20, 20, 4, rng);
    TempNetParams net = make_temperature_net(3, 4, 3.0, 4, 4);
    std::normal_distribution<double> n(0.0, 0.5);
    auto params = net.parameters();
    for (auto& v : params) v = n(rng);
    net.set_parameters(params);
    Volume image(20, 20, 3, 0.3);
    const auto out = apply_temperature(z, TemperatureModel::local(net), &image);
    EXPECT_EQ(confidence(out.probabilities).argmax, argmax_labels(z));
    EXPECT_THROW(apply_temperature(z, TemperatureModel::local(net)), ValidationError);
}

TEST(GlobalFit, RecoversGeneratorScale) {
    for (double s : {0.5, 2.0, 3.0, 5.0}) {
        const auto f = synth::calibrated_logits(128, 128, 5, s, 42);
        const CalibrationSample sample{&f.logits, &f.labels, nullptr};
        const auto fit = fit_global_temperature(std::span(&sample, 1));
        EXPECT_NEAR(fit.temperature, s, 0.05 * s) << "scale " << s;
        EXPECT_LE(fit.nll, fit.nll_at_one);
        EXPECT_FALSE(fit.at_bound);
    }
}

TEST(GlobalFit, MinimumIsStationary) {
    const auto f = synth::calibrated_logits(64, 64, 4, 2.5, 8);
    const CalibrationSample sample{&f.logits, &f.labels, nullptr};
    const auto fit = fit_global_temperature(std::span(&sample, 1));
    const double lo = nll(f.logits, f.labels, TemperatureModel::global(fit.temperature * 0.99));
    const double hi = nll(f.logits, f.labels, TemperatureModel::global(fit.temperature * 1.01));
    EXPECT_LE(fit.nll, lo);
    EXPECT_LE(fit.nll, hi);
}

TEST(GlobalFit, ReportsBoundHit) {
    // Perfectly separable, labels always the arg-max: NLL keeps falling as T shrinks.
    LogitVolume z(2, 1, 2, {0.5, 0.0, 0.0, 0.5});
    LabelMap y(2, 1, {0, 1});
    const CalibrationSample sample{&z, &y, nullptr};
    const auto fit = fit_global_temperature(std::span(&sample, 1));
    EXPECT_TRUE(fit.at_bound);
    EXPECT_NEAR(fit.temperature, 0.05, 1e-3);
}

TEST(GlobalFit, AllIgnoredIsAnError) {
    LogitVolume z(1, 1, 2, {0.0, 1.0});
    LabelMap y(1, 1, kIgnoreLabel);
    const CalibrationSample sample{&z, &y, nullptr};
    EXPECT_THROW(fit_global_temperature(std::span(&sample, 1)), ValidationError);
}

TEST(GlobalFit, ReducesNllAndEce) {
    const auto f = synth::calibrated_logits(96, 96, 4, 3.0, 77);
    const CalibrationSample sample{&f.logits, &f.labels, nullptr};
    const auto fit = fit_global_temperature(std::span(&sample, 1));
    const auto raw = confidence(softmax(f.logits));
    const auto cal = confidence(apply_temperature(f.logits, fit.model()).probabilities);
    ReliabilityBins before(15), after(15);
    before.add(raw.confidence, raw.argmax, f.labels);
    after.add(cal.confidence, cal.argmax, f.labels);
    EXPECT_LT(fit.nll, fit.nll_at_one);
    EXPECT_LT(expected_calibration_error(after), expected_calibration_error(before));
}

TEST(LocalFit, NeverWorseThanInitialAndDeterministic) {
    const auto f = synth::calibrated_logits(24, 24, 3, 2.0, 5);
    std::mt19937_64 rng(6);
    Volume image(24, 24, 3);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& v : image.values()) v = u(rng);
    const CalibrationSample sample{&f.logits, &f.labels, &image};
    LocalFitOptions o;
    o.max_epochs = 6;
    o.patch_size = 12;
    o.hidden = 4;
    o.learning_rate = 1e-2;
    o.seed = 3;
    const auto a = fit_local_temperature(std::span(&sample, 1), o);
    const auto b = fit_local_temperature(std::span(&sample, 1), o);
    EXPECT_LE(a.best_nll, a.initial_nll);
    EXPECT_LT(a.best_nll, a.initial_nll);  // 2x overconfident: training must help
    EXPECT_EQ(a.net.parameters(), b.net.parameters());
    EXPECT_EQ(a.history, b.history);
    EXPECT_FALSE(a.diverged);
    EXPECT_NEAR(nll(std::span(&sample, 1), a.model()), a.best_nll, 1e-12);
}

TEST(LocalFit, EarlyStopsOnPlateau) {
    const auto f = synth::calibrated_logits(16, 16, 3, 1.0, 9);
    Volume image(16, 16, 3, 0.5);
    const CalibrationSample sample{&f.logits, &f.labels, &image};
    LocalFitOptions o;
    o.max_epochs = 50;
    o.patience = 2;
    o.min_delta = 1.0;  // nothing counts as progress
    o.hidden = 2;
    const auto r = fit_local_temperature(std::span(&sample, 1), o);
    EXPECT_TRUE(r.early_stopped);
    EXPECT_EQ(r.epochs, 2);
}

TEST(Reliability, BinEdges) {
    ReliabilityBins b(10);
    EXPECT_EQ(b.bin_index(0.1), 0);
    EXPECT_EQ(b.bin_index(0.1000001), 1);
    EXPECT_EQ(b.bin_index(1.0), 9);
    EXPECT_EQ(b.bin_index(0.0), 0);
    EXPECT_THROW(ReliabilityBins(0), ValidationError);
}

TEST(Reliability, EceHandCase) {
    ReliabilityBins b(2);
    // Bin 0 (0, 0.5]: confidences 0.4, 0.4 with one correct -> |0.5 - 0.4|.
    b.add(0.4, true);
    b.add(0.4, false);
    // Bin 1: 0.9, 0.7 both correct -> |1 - 0.8|.
    b.add(0.9, true);
    b.add(0.7, true);
    EXPECT_NEAR(expected_calibration_error(b), 0.5 * 0.1 + 0.5 * 0.2, 1e-15);
    const auto bins = b.bins();
    EXPECT_EQ(bins[1].count, 2u);
    EXPECT_DOUBLE_EQ(bins[1].accuracy, 1.0);
    EXPECT_EQ(expected_calibration_error(ReliabilityBins(5)), 0.0);
}

TEST(Reliability, MergeEqualsJointAccumulation) {
    ReliabilityBins a(10), b(10), joint(10);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 500; ++i) {
        const double c = u(rng);
        const bool ok = u(rng) < c;
        (i % 2 ? a : b).add(c, ok);
        joint.add(c, ok);
    }
    a.merge(b);
    EXPECT_EQ(a.total(), joint.total());
    EXPECT_NEAR(expected_calibration_error(a), expected_calibration_error(joint), 1e-12);
}

TEST(Reliability, IgnoresIgnoreLabelAndMask) {
    FloatGrid conf(3, 1, std::vector<double>{0.9, 0.9, 0.9});
    LabelMap pred(3, 1, {0, 0, 0});
    LabelMap truth(3, 1, {0, kIgnoreLabel, 1});
    BinaryMask mask(3, 1, std::vector<std::uint8_t>{1, 1, 0});
    ReliabilityBins b(10);
    b.add(conf, pred, truth, &mask);
    EXPECT_EQ(b.total(), 1u);
}

TEST(Reliability, CsvHasHeaderAndRows) {
    testing::TempDir dir;
    ReliabilityBins b(4);
    b.add(0.8, true);
    save_reliability_csv(b, dir / "r.csv");
    const std::string text = testing::read_bytes(dir / "r.csv");
    EXPECT_EQ(text.substr(0, text.find('\n')), "bin_low,bin_high,mean_conf,accuracy,count");
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
    EXPECT_NE(text.find("0.7500,1.0000,0.800000,1.000000,1"), std::string::npos);
}

TEST(ModelFile, GlobalAndLocalRoundTrip) {
    testing::TempDir dir;
    save_temperature_model(TemperatureModel::global(2.375), dir / "g.json");
    const auto g = load_temperature_model(dir / "g.json");
    ASSERT_TRUE(g.is_global());
    EXPECT_EQ(g.global_temperature(), 2.375);

    save_temperature_model(TemperatureModel(), dir / "id.json");
    EXPECT_EQ(load_temperature_model(dir / "id.json").global_temperature(), 1.0);

    TempNetParams net = make_temperature_net(6, 3, 1.7, 12, 5);
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 1.0);
    auto p = net.parameters();
    for (auto& v : p) v = n(rng);
    net.set_parameters(p);
    save_temperature_model(TemperatureModel::local(net), dir / "l.json");
    const auto l = load_temperature_model(dir / "l.json");
    ASSERT_FALSE(l.is_global());
    EXPECT_EQ(l.net().parameters(), p);
    EXPECT_EQ(l.net().image_channels, 6);
    EXPECT_EQ(l.net().logit_scale, 1.7);

    testing::write_text(dir / "bad.json", "{\"format\": \"other\"}");
    EXPECT_ANY_THROW(load_temperature_model(dir / "bad.json"));
}

}  // namespace
}  // namespace visnir
