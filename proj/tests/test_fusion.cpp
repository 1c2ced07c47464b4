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
#include "visnir/error.hpp"
#include "visnir/fusion.hpp"

namespace visnir {
namespace {

IndexImage random_index(int w, int h, IndexKind kind, std::mt19937_64& rng, double invalid_rate = 0.0) {
    IndexImage idx;
    idx.kind = kind;
    idx.lower = kind == IndexKind::ndvi ? -1.0 : -1.0 / 3.0;
    idx.upper = kind == IndexKind::ndvi ? 1.0 : 2.0;
    idx.grid = FloatGrid(w, h);
    idx.valid = BinaryMask(w, h, true);
    std::uniform_real_distribution<double> u(idx.lower, idx.upper);
    std::uniform_real_distribution<double> c(0.0, 1.0);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            idx.grid.at(y, x) = u(rng);
            if (c(rng) < invalid_rate) idx.valid.set(y, x, false);
        }
    }
    return idx;
}

LabelMap random_labels(int w, int h, int classes, std::mt19937_64& rng, double ignore_rate = 0.05) {
    LabelMap m(w, h, 0);
    std::uniform_int_distribution<int> k(0, classes - 1);
    std::uniform_real_distribution<double> c(0.0, 1.0);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = c(rng) < ignore_rate ? kIgnoreLabel : k(rng);
    return m;
}

TEST(Histogram, DefaultBins) {
    EXPECT_EQ(default_bins(IndexKind::ndvi), 16);
    EXPECT_EQ(default_bins(IndexKind::evi), 20);
    const auto m = ClassHistogramModel::for_kind(IndexKind::evi, 3, 20, EviCoefficients{6.0, 7.5});
    EXPECT_DOUBLE_EQ(m.lower(), -1.0 / 3.0);
    EXPECT_DOUBLE_EQ(m.upper(), 2.0);
}

TEST(Histogram, BinIndexEdges) {
    const ClassHistogramModel m(IndexKind::ndvi, 2, 16, -1.0, 1.0);
    EXPECT_EQ(m.bin_index(-1.0), 0);
    EXPECT_EQ(m.bin_index(1.0), 15);
    EXPECT_EQ(m.bin_index(-5.0), 0);
    EXPECT_EQ(m.bin_index(5.0), 15);
    EXPECT_EQ(m.bin_index(0.0), 8);
    EXPECT_EQ(m.bin_index(-0.875), 1);  // exactly on an edge goes up
    EXPECT_DOUBLE_EQ(m.bin_low(1), -0.875);
    EXPECT_DOUBLE_EQ(m.bin_high(15), 1.0);
}

TEST(Histogram, CountsMatchDirectBinning) {
    std::mt19937_64 rng(1);
    const int classes = 4;
    const IndexImage idx = random_index(30, 20, IndexKind::ndvi, rng, 0.1);
    const LabelMap labels = random_labels(30, 20, classes, rng);
    ClassHistogramModel m(IndexKind::ndvi, classes, 16, -1.0, 1.0);
    m.add(idx, labels);
    std::vector<std::vector<std::uint64_t>> expect(classes, std::vector<std::uint64_t>(16, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] == kIgnoreLabel || !idx.valid.valid(i)) continue;
        int b = static_cast<int>(std::floor((idx.grid[i] + 1.0) / 2.0 * 16));
        b = std::clamp(b, 0, 15);
        ++expect[labels[i]][b];
    }
    for (int k = 0; k < classes; ++k) {
        std::uint64_t support = 0;
        double row = 0.0;
        for (int b = 0; b < 16; ++b) {
            EXPECT_EQ(m.count(k, b), expect[k][b]);
            support += expect[k][b];
            row += m.weight(k, b);
        }
        EXPECT_EQ(m.support(k), support);
        EXPECT_NEAR(row, 1.0, 1e-9);
    }
}

TEST(Histogram, UnseenClassHasZeroWeights) {
    ClassHistogramModel m(IndexKind::ndvi, 3, 4, -1.0, 1.0);
    m.add(0, 0.5, 3);
    for (int b = 0; b < 4; ++b) EXPECT_EQ(m.weight(2, b), 0.0);
    EXPECT_DOUBLE_EQ(m.weight(0, 3), 1.0);
}

TEST(Histogram, MergeEqualsJointAccumulation) {
    std::mt19937_64 rng(2);
    const IndexImage a = random_index(10, 10, IndexKind::evi, rng);
    const IndexImage b = random_index(10, 10, IndexKind::evi, rng);
    const LabelMap la = random_labels(10, 10, 3, rng);
    const LabelMap lb = random_labels(10, 10, 3, rng);
    const std::vector<HistogramSample> both = {{&a, &la}, {&b, &lb}};
    const auto joint = accumulate_histograms(both, IndexKind::evi, 3, 20);
    auto left = accumulate_histograms(std::span(both).subspan(0, 1), IndexKind::evi, 3, 20);
    const auto right = accumulate_histograms(std::span(both).subspan(1, 1), IndexKind::evi, 3, 20);
    left.merge(right);
    EXPECT_EQ(left, joint);
    EXPECT_THROW(left.merge(ClassHistogramModel(IndexKind::evi, 3, 16, -1.0 / 3, 2.0)), ValidationError);
}

TEST(Histogram, CsvRoundTrip) {
    testing::TempDir dir;
    std::mt19937_64 rng(3);
    const IndexImage idx = random_index(16, 16, IndexKind::ndvi, rng);
    const LabelMap labels = random_labels(16, 16, 5, rng);
    ClassHistogramModel m(IndexKind::ndvi, 5, 16, -1.0, 1.0);
    m.add(idx, labels);
    save_histogram_csv(m, dir / "h.csv");
    EXPECT_EQ(load_histogram_csv(dir / "h.csv"), m);
    testing::write_text(dir / "bad.csv", "class,bin_low\n");
    EXPECT_ANY_THROW(load_histogram_csv(dir / "bad.csv"));
}

class FuseTest : public ::testing::Test {
protected:
    void SetUp() override {
        std::mt19937_64 rng(4);
        probs = testing::random_probabilities(10, 10, classes, rng);
        index = random_index(10, 10, IndexKind::ndvi, rng, 0.1);
        const IndexImage train = random_index(40, 40, IndexKind::ndvi, rng);
        const LabelMap labels = random_labels(40, 40, classes, rng);
        model = ClassHistogramModel(IndexKind::ndvi, classes, 16, -1.0, 1.0);
        model.add(train, labels);
    }
    const int classes = 4;
    ProbabilityVolume probs;
    IndexImage index;
    ClassHistogramModel model;
};

TEST_F(FuseTest, BetaZeroIsCalibratedArgmax) {
    const FusionResult r = fuse(probs, index, model, FusionConfig{0.0});
    EXPECT_EQ(r.labels, argmax_labels(probs));
    EXPECT_EQ(r.scores, static_cast<const Volume&>(probs));
}

TEST_F(FuseTest, MatchesDirectArithmetic) {
    const double beta = 0.75;
    const FusionResult r = fuse(probs, index, model, FusionConfig{beta});
    for (std::size_t i = 0; i < probs.pixel_count(); ++i) {
        const double v = index.grid[i];
        int b = std::clamp(static_cast<int>(std::floor((v + 1.0) / 2.0 * 16)), 0, 15);
        double sum = 0.0;
        int best = 0;
        std::vector<double> s(classes);
        for (int k = 0; k < classes; ++k) {
            const double w = index.valid.valid(i) ? static_cast<double>(model.count(k, b)) / model.support(k) : 0.0;
            s[k] = probs.pixel(i)[k] + beta * w;
            sum += s[k];
            if (s[k] > s[best]) best = k;
        }
        for (int k = 0; k < classes; ++k) {
            EXPECT_NEAR(r.scores.pixel(i)[k], s[k], 1e-12);
            EXPECT_NEAR(r.normalized.pixel(i)[k], s[k] / sum, 1e-12);
        }
        EXPECT_EQ(r.labels[i], best);
    }
}

TEST_F(FuseTest, InvalidPixelsKeepProbabilities) {
    const FusionResult r = fuse(probs, index, model);
    for (std::size_t i = 0; i < probs.pixel_count(); ++i) {
        if (index.valid.valid(i)) continue;
        for (int k = 0; k < classes; ++k) EXPECT_EQ(r.scores.pixel(i)[k], probs.pixel(i)[k]);
    }
}

TEST_F(FuseTest, HistogramWeightsLookup) {
    const auto w = histogram_weights(0.3, model);
    ASSERT_EQ(w.size(), static_cast<std::size_t>(classes));
    for (int k = 0; k < classes; ++k) EXPECT_EQ(w[k], model.weight(k, model.bin_index(0.3)));
}

TEST_F(FuseTest, MultiIndexAddsEvidence) {
    std::mt19937_64 rng(5);
    const IndexImage evi_index = random_index(10, 10, IndexKind::evi, rng);
    ClassHistogramModel evi_model(IndexKind::evi, classes, 20, -1.0 / 3.0, 2.0);
    evi_model.add(random_index(30, 30, IndexKind::evi, rng), random_labels(30, 30, classes, rng));
    const std::vector<IndexEvidence> ev = {{&index, &model}, {&evi_index, &evi_model}};
    const FusionResult multi = fuse_multi(probs, ev, FusionConfig{0.5});
    const FusionResult single = fuse(probs, index, model, FusionConfig{0.5});
    for (std::size_t i = 0; i < probs.pixel_count(); ++i) {
        const int b = evi_model.bin_index(evi_index.grid[i]);
        for (int k = 0; k < classes; ++k) {
            EXPECT_NEAR(multi.scores.pixel(i)[k], single.scores.pixel(i)[k] + 0.5 * evi_model.weight(k, b), 1e-12);
        }
    }
}

TEST_F(FuseTest, RejectsInconsistentInputs) {
    EXPECT_THROW(fuse(probs, index, model, FusionConfig{-1.0}), ValidationError);
    const ClassHistogramModel wrong_classes(IndexKind::ndvi, 3, 16, -1.0, 1.0);
    EXPECT_THROW(fuse(probs, index, wrong_classes), ValidationError);
    const ClassHistogramModel wrong_kind(IndexKind::evi, classes, 20, -1.0 / 3.0, 2.0);
    EXPECT_THROW(fuse(probs, index, wrong_kind), ValidationError);
    IndexImage small = index;
    small.grid = FloatGrid(3, 3);
    small.valid = BinaryMask(3, 3);
    EXPECT_THROW(fuse(probs, small, model), ValidationError);
}

}  // namespace
}  // namespace visnir
