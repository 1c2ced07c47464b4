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
#include "visnir/temperature_net.hpp"

namespace visnir {
namespace {

struct Instance {
    TempNetParams net;
    Volume image;
    LogitVolume logits;
    LabelMap labels;
};

Instance random_instance(int w, int h, int classes, int hidden, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Instance in;
    in.net = make_temperature_net(3, classes, 2.0, seed, hidden);
    // Every parameter random so no gradient is structurally zero.
    std::normal_distribution<double> n(0.0, 0.3);
    auto p = in.net.parameters();
    for (auto& v : p) v = n(rng);
    in.net.set_parameters(p);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    in.image = Volume(w, h, 3);
    for (auto& v : in.image.values()) v = u(rng);
    in.logits = testing::random_logits(w, h, classes, rng, 2.0);
    in.labels = LabelMap(w, h, 0);
    std::uniform_int_distribution<int> lab(0, classes - 1);
    for (std::size_t i = 0; i < in.labels.size(); ++i) in.labels[i] = static_cast<std::uint8_t>(lab(rng));
    in.labels[3] = kIgnoreLabel;
    return in;
}

double loss(const Instance& in, const std::vector<double>& params) {
    TempNetParams net = in.net;
    net.set_parameters(params);
    return temperature_nll_gradient(net, in.image, in.logits, in.labels).loss_sum;
}

TEST(TemperatureNet, StartsAtUnitTemperature) {
    const TempNetParams net = make_temperature_net(3, 4, 1.5, 9);
    std::mt19937_64 rng(1);
    const LogitVolume z = testing::random_logits(6, 5, 4, rng);
    const FloatGrid t = temperature_map(net, Volume(6, 5, 3, 0.5), z);
    for (double v : t.values()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(TemperatureNet, TemperatureIsPositiveAndFloored) {
    Instance in = random_instance(7, 6, 3, 4, 5);
    auto p = in.net.parameters();
    for (auto& v : p) v *= 20.0;
    in.net.set_parameters(p);
    const FloatGrid t = temperature_map(in.net, in.image, in.logits);
    for (double v : t.values()) {
        EXPECT_TRUE(std::isfinite(v));
        EXPECT_GE(v, in.net.min_temperature);
    }
}

TEST(TemperatureNet, GradientMatchesCentralDifferences) {
    const Instance in = random_instance(4, 4, 3, 4, 17);
    const auto g = temperature_nll_gradient(in.net, in.image, in.logits, in.labels);
    const auto params = in.net.parameters();
    ASSERT_EQ(g.gradient.size(), params.size());
    EXPECT_EQ(g.pixels, 15u);
    const double h = 1e-5;
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto plus = params;
        auto minus = params;
        plus[i] += h;
        minus[i] -= h;
        const double numeric = (loss(in, plus) - loss(in, minus)) / (2 * h);
        const double denom = std::max({std::abs(numeric), std::abs(g.gradient[i]), 1e-6});
        worst = std::max(worst, std::abs(numeric - g.gradient[i]) / denom);
    }
    EXPECT_LT(worst, 1e-3);
}

TEST(TemperatureNet, TilesSumToWholeImage) {
    const Instance in = random_instance(9, 7, 3, 4, 23);
    const auto whole = temperature_nll_gradient(in.net, in.image, in.logits, in.labels);
    double loss_sum = 0.0;
    std::vector<double> grad(whole.gradient.size(), 0.0);
    std::size_t pixels = 0;
    for (int y0 = 0; y0 < 7; y0 += 4) {
        for (int x0 = 0; x0 < 9; x0 += 4) {
            const PixelRect r{x0, y0, std::min(4, 9 - x0), std::min(4, 7 - y0)};
            const auto part = temperature_nll_gradient(in.net, in.image, in.logits, in.labels, r);
            loss_sum += part.loss_sum;
            pixels += part.pixels;
            for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += part.gradient[i];
        }
    }
    EXPECT_EQ(pixels, whole.pixels);
    EXPECT_NEAR(loss_sum, whole.loss_sum, 1e-9 * std::abs(whole.loss_sum));
    for (std::size_t i = 0; i < grad.size(); ++i) EXPECT_NEAR(grad[i], whole.gradient[i], 1e-9);
}

TEST(TemperatureNet, LossMatchesDirectNll) {
    const Instance in = random_instance(5, 5, 4, 3, 31);
    const FloatGrid t = temperature_map(in.net, in.image, in.logits);
    double expect = 0.0;
    for (std::size_t i = 0; i < in.labels.size(); ++i) {
        if (in.labels[i] == kIgnoreLabel) continue;
        const auto p = softmax(in.logits.pixel(i), t[i]);
        expect -= std::log(p[in.labels[i]]);
    }
    EXPECT_NEAR(temperature_nll_gradient(in.net, in.image, in.logits, in.labels).loss_sum, expect, 1e-9);
}

TEST(TemperatureNet, ValidateCatchesBrokenStacks) {
    TempNetParams net = make_temperature_net(3, 2, 1.0, 0, 4);
    EXPECT_NO_THROW(net.validate());
    net.layers[1].in_channels = 5;
    EXPECT_THROW(net.validate(), ValidationError);
    net = make_temperature_net(3, 2, 1.0, 0, 4);
    net.layers[0].weights[0] = std::nan("");
    EXPECT_THROW(net.validate(), ValidationError);
}

TEST(TemperatureNet, ReceptiveRadiusIsThree) {
    EXPECT_EQ(receptive_radius(make_temperature_net(1, 2, 1.0, 0)), 3);
}

}  // namespace
}  // namespace visnir
