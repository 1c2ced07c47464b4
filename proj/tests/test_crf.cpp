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
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "test_support.hpp"
#include "visnir/crf.hpp"
#include "visnir/error.hpp"

namespace visnir {
namespace {

GuidanceImage random_guide(int w, int h, int channels, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 255.0);
    std::vector<double> v(static_cast<std::size_t>(w) * h * channels);
    for (auto& x : v) x = u(rng);
    return GuidanceImage(w, h, channels, std::move(v));
}

double max_abs_diff(const Volume& a, const Volume& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

std::vector<double> exact_sum(const std::vector<double>& f, int d, const std::vector<double>& v) {
    const std::size_t n = f.size() / d;
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double e = 0.0;
            for (int c = 0; c < d; ++c) e += (f[i * d + c] - f[j * d + c]) * (f[i * d + c] - f[j * d + c]);
            out[i] += std::exp(-0.5 * e) * v[j];
        }
    }
    return out;
}

double relative_l2(const std::vector<double>& a, const std::vector<double>& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num / den);
}

TEST(FilterBank, MatchesExactSummationOnRandom5d) {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.0, 4.0);
    std::vector<double> f(500 * 5), v(500);
    for (auto& x : f) x = u(rng);
    for (auto& x : v) x = u(rng);
    const auto fast = gaussian_filter_bank(f, 5, v, 1);
    EXPECT_LT(relative_l2(fast, exact_sum(f, 5, v)), 1e-2);
    EXPECT_LT(relative_l2(exact_gaussian_filter(f, 5, v, 1), exact_sum(f, 5, v)), 1e-12);
}

TEST(FilterBank, ConstantFeatures) {
    std::vector<double> f(100 * 3, 0.7), v(100);
    std::iota(v.begin(), v.end(), 1.0);
    const double total = std::accumulate(v.begin(), v.end(), 0.0);
    for (auto method : {CrfFilter::truncated, CrfFilter::lattice}) {
        const auto out = gaussian_filter_bank(f, 3, v, 1, method);
        for (double x : out) EXPECT_NEAR(x, total, 1e-2 * total) << to_string(method);
    }
}

TEST(FilterBank, FarClustersDoNotInteract) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> n(0.0, 0.3);
    std::vector<double> f, v;
    for (int i = 0; i < 60; ++i) {
        const double base = i < 30 ? 0.0 : 50.0;
        for (int c = 0; c < 2; ++c) f.push_back(base + n(rng));
        v.push_back(i < 30 ? 1.0 : 0.0);
    }
    for (auto method : {CrfFilter::truncated, CrfFilter::lattice}) {
        const auto out = gaussian_filter_bank(f, 2, v, 1, method);
        double within = 0.0, cross = 0.0;
        for (int i = 0; i < 30; ++i) within += out[i];
        for (int i = 30; i < 60; ++i) cross += std::abs(out[i]);
        EXPECT_LT(cross, 1e-6 * within) << to_string(method);
    }
}

TEST(FilterBank, MultiChannelIsPerChannel) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    std::vector<double> f(80 * 2), v(80 * 3);
    for (auto& x : f) x = u(rng);
    for (auto& x : v) x = u(rng);
    const auto all = gaussian_filter_bank(f, 2, v, 3);
    for (int c = 0; c < 3; ++c) {
        std::vector<double> one(80);
        for (int i = 0; i < 80; ++i) one[i] = v[i * 3 + c];
        const auto single = gaussian_filter_bank(f, 2, one, 1);
        for (int i = 0; i < 80; ++i) EXPECT_NEAR(all[i * 3 + c], single[i], 1e-12);
    }
}

TEST(Lattice, CoarseApproximationOfExactSum) {
    // The lattice kernel is a truncated tent, not a Gaussian; it is only a
    // coarse approximation and is kept as an opt-in speed path.
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 4.0);
    std::vector<double> f(500 * 5), v(500);
    for (auto& x : f) x = u(rng);
    for (auto& x : v) x = u(rng);
    const PermutohedralLattice lattice(f, 5);
    EXPECT_EQ(lattice.points(), 500u);
    EXPECT_GT(lattice.lattice_points(), 0u);
    std::vector<double> out(500);
    lattice.filter(v, 1, out);
    EXPECT_LT(relative_l2(out, exact_sum(f, 5, v)), 0.5);
}

TEST(MeanField, ZeroWeightsReturnUnaries) {
    std::mt19937_64 rng(5);
    const auto u = testing::random_probabilities(6, 5, 3, rng);
    CrfConfig c;
    c.w_appearance = 0.0;
    c.w_smoothness = 0.0;
    const auto r = mean_field(u, random_guide(6, 5, 3, rng), c);
    EXPECT_EQ(r.marginals, u);
    EXPECT_EQ(r.labels, argmax_labels(u));
    EXPECT_EQ(naive_mean_field(u, random_guide(6, 5, 1, rng), c), u);
}

TEST(MeanField, ZeroIterationsIsIdentity) {
    std::mt19937_64 rng(6);
    const auto u = testing::random_probabilities(4, 4, 2, rng);
    CrfConfig c;
    c.iterations = 0;
    EXPECT_EQ(mean_field(u, random_guide(4, 4, 1, rng), c).marginals, u);
}

TEST(MeanField, TwoPixelHandUpdate) {
    // Smoothness kernel only: Q_i(l) ~ u_i(l) exp(w k Q_j(l)), k = exp(-1 / (2 gamma^2)).
    const ProbabilityVolume u(2, 1, 2, {0.7, 0.3, 0.2, 0.8});
    CrfConfig c;
    c.w_appearance = 0.0;
    c.w_smoothness = 1.5;
    c.theta_gamma = 3.0;
    c.iterations = 1;
    const GuidanceImage g(2, 1, 1, {0.0, 0.0});
    const double k = std::exp(-1.0 / 18.0);
    const auto update = [&](double a0, double a1, double q0, double q1) {
        const double e0 = a0 * std::exp(1.5 * k * q0);
        const double e1 = a1 * std::exp(1.5 * k * q1);
        return std::pair{e0 / (e0 + e1), e1 / (e0 + e1)};
    };
    const auto [p00, p01] = update(0.7, 0.3, 0.2, 0.8);
    const auto [p10, p11] = update(0.2, 0.8, 0.7, 0.3);
    const auto naive = naive_mean_field(u, g, c);
    const auto fast = mean_field(u, g, c).marginals;
    for (const Volume* q : {static_cast<const Volume*>(&naive), static_cast<const Volume*>(&fast)}) {
        EXPECT_NEAR(q->at(0, 0, 0), p00, 1e-12);
        EXPECT_NEAR(q->at(0, 0, 1), p01, 1e-12);
        EXPECT_NEAR(q->at(0, 1, 0), p10, 1e-12);
        EXPECT_NEAR(q->at(0, 1, 1), p11, 1e-12);
    }
}

TEST(MeanField, FastMatchesNaiveOnRandomInstances) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> side(1, 6), classes(2, 5), iters(1, 10), chans(0, 1);
    std::uniform_real_distribution<double> weight(0.0, 1.0);
    double worst = 0.0;
    for (int trial = 0; trial < 60; ++trial) {
        const int w = side(rng), h = side(rng), k = classes(rng);
        const auto u = testing::random_probabilities(w, h, k, rng, 0.05);
        CrfConfig c;
        c.w_appearance = weight(rng);
        c.w_smoothness = weight(rng);
        c.iterations = iters(rng);
        const auto g = random_guide(w, h, chans(rng) ? 3 : 1, rng);
        worst = std::max(worst, max_abs_diff(mean_field(u, g, c).marginals, naive_mean_field(u, g, c)));
    }
    EXPECT_LT(worst, 1e-4);
}

TEST(MeanField, FastMatchesNaiveWithDefaultWeightsOnLargerImage) {
    std::mt19937_64 rng(8);
    const auto u = testing::random_probabilities(40, 30, 3, rng);
    const auto g = random_guide(40, 30, 3, rng);
    CrfConfig c;
    c.iterations = 3;
    c.w_appearance = 0.8;
    c.w_smoothness = 0.5;
    EXPECT_LT(max_abs_diff(mean_field(u, g, c).marginals, naive_mean_field(u, g, c)), 1e-4);
}

TEST(MeanField, EveryIterationIsADistribution) {
    std::mt19937_64 rng(9);
    const auto u = testing::random_probabilities(12, 9, 4, rng);
    int seen = 0;
    for (auto filter : {CrfFilter::truncated, CrfFilter::lattice}) {
        CrfConfig c;
        c.filter = filter;
        mean_field(u, random_guide(12, 9, 3, rng), c, [&](int, const ProbabilityVolume& q) {
            ++seen;
            for (std::size_t i = 0; i < q.pixel_count(); ++i) {
                double s = 0.0;
                for (double v : q.pixel(i)) {
                    EXPECT_GE(v, 0.0);
                    s += v;
                }
                EXPECT_NEAR(s, 1.0, 1e-6);
            }
        });
    }
    EXPECT_EQ(seen, 20);
}

TEST(MeanField, PermutationEquivariant) {
    std::mt19937_64 rng(10);
    const int k = 4;
    const auto u = testing::random_probabilities(7, 6, k, rng);
    const auto g = random_guide(7, 6, 1, rng);
    const std::vector<int> perm = {2, 0, 3, 1};
    Volume pu(7, 6, k);
    for (std::size_t i = 0; i < u.pixel_count(); ++i) {
        for (int l = 0; l < k; ++l) pu.pixel(i)[perm[l]] = u.pixel(i)[l];
    }
    CrfConfig c;
    c.w_appearance = 0.7;
    c.w_smoothness = 0.4;
    const auto a = mean_field(u, g, c).marginals;
    const auto b = mean_field(ProbabilityVolume(pu), g, c).marginals;
    for (std::size_t i = 0; i < a.pixel_count(); ++i) {
        for (int l = 0; l < k; ++l) EXPECT_NEAR(b.pixel(i)[perm[l]], a.pixel(i)[l], 1e-12);
    }
}

TEST(MeanField, RemovesIsolatedLabelNoise) {
    // Two constant-intensity halves; unaries favour the right label with 10%
    // of pixels flipped.
    const int w = 32, h = 24;
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    Volume uv(w, h, 2);
    std::vector<double> intensity(static_cast<std::size_t>(w) * h);
    LabelMap truth(w, h, 0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int t = x < w / 2 ? 0 : 1;
            truth.at(y, x) = t;
            intensity[static_cast<std::size_t>(y) * w + x] = t ? 200.0 : 50.0;
            const int shown = coin(rng) < 0.1 ? 1 - t : t;
            uv.at(y, x, shown) = 0.7;
            uv.at(y, x, 1 - shown) = 0.3;
        }
    }
    const ProbabilityVolume u(std::move(uv));
    const auto r = mean_field(u, GuidanceImage(w, h, 1, intensity));
    const LabelMap before = argmax_labels(u);
    std::size_t err_before = 0, err_after = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        err_before += before[i] != truth[i];
        err_after += r.labels[i] != truth[i];
    }
    EXPECT_GT(err_before, 0u);
    EXPECT_LT(err_after, err_before);
}

TEST(MeanField, ConfigAndShapeErrors) {
    std::mt19937_64 rng(12);
    const auto u = testing::random_probabilities(4, 4, 2, rng);
    CrfConfig c;
    c.theta_beta = 0.0;
    EXPECT_THROW(mean_field(u, random_guide(4, 4, 1, rng), c), ValidationError);
    EXPECT_THROW(mean_field(u, random_guide(5, 4, 1, rng)), ValidationError);
    const auto big = testing::random_probabilities(65, 64, 2, rng);
    EXPECT_THROW(naive_mean_field(big, random_guide(65, 64, 1, rng)), ValidationError);
    EXPECT_THROW(GuidanceImage(2, 2, 2, std::vector<double>(8, 0.0)), ValidationError);
    EXPECT_THROW(GuidanceImage(1, 1, 1, {std::nan("")}), ValidationError);
    EXPECT_EQ(parse_crf_filter("Lattice"), CrfFilter::lattice);
    EXPECT_THROW(parse_crf_filter("fft"), ValidationError);
}

TEST(Guidance, IndexAndRasterScaling) {
    IndexImage idx;
    idx.grid = FloatGrid(3, 1, std::vector<double>{-1.0, 0.0, 1.0});
    idx.valid = BinaryMask(3, 1, true);
    idx.valid.set(0, 1, false);
    const auto g = GuidanceImage::from_index(idx);
    EXPECT_DOUBLE_EQ(g.at(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(g.at(1, 0), 0.0);
    EXPECT_DOUBLE_EQ(g.at(2, 0), 255.0);
    RasterImage r(1, 1, 1, 16);
    r.at(0, 0) = 65535;
    EXPECT_DOUBLE_EQ(GuidanceImage::from_raster(r).at(0, 0), 255.0);
}

}  // namespace
}  // namespace visnir
