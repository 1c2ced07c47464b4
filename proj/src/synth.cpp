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

#include "visnir/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include <fmt/format.h>

#include "visnir/calibration.hpp"
#include "visnir/error.hpp"
#include "visnir/io.hpp"

namespace visnir::synth {

namespace fs = std::filesystem;

LabelledLogits calibrated_logits(int width, int height, int classes, double scale, std::uint64_t seed,
                                 double spread) {
    if (width <= 0 || height <= 0 || classes < 2) throw ValidationError("calibrated_logits: bad shape");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, spread);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    LogitVolume logits(Volume(width, height, classes));
    LabelMap labels(width, height, 0);
    std::vector<double> z(static_cast<std::size_t>(classes));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (auto& v : z) v = normal(rng);
        const auto p = softmax(z);
        double u = uniform(rng);
        int label = classes - 1;
        for (int k = 0; k < classes; ++k) {
            u -= p[static_cast<std::size_t>(k)];
            if (u < 0.0) {
                label = k;
                break;
            }
        }
        labels[i] = static_cast<std::uint8_t>(label);
        auto out = logits.pixel(i);
        for (int k = 0; k < classes; ++k) out[static_cast<std::size_t>(k)] = scale * z[static_cast<std::size_t>(k)];
    }
    return {std::move(logits), std::move(labels)};
}

LabelPalette ablation_palette() {
    return LabelPalette({{"road", {128, 64, 128}},
                         {"lawn", {0, 200, 0}},
                         {"dirt", {150, 110, 60}},
                         {"tree", {0, 100, 0}}});
}

namespace {

enum Class : int { road = 0, lawn = 1, dirt = 2, tree = 3 };

struct Reflectance {
    double r, g, b, nir;
};

// Lawn and dirt share a VIS appearance; only NIR tells them apart.
constexpr Reflectance kSurface[] = {
    {0.32, 0.32, 0.34, 0.22},  // road
    {0.20, 0.26, 0.12, 0.50},  // lawn
    {0.20, 0.24, 0.13, 0.26},  // dirt
    {0.08, 0.20, 0.06, 0.55},  // tree
};

// Random rectangles painted over a lawn/dirt background give piecewise
// constant regions of varied size.
LabelMap scene(int size, std::mt19937_64& rng) {
    LabelMap labels(size, size, 0);
    std::uniform_int_distribution<int> cls(0, 3);
    const int cells = 4;
    const int step = size / cells;
    for (int cy = 0; cy < cells; ++cy) {
        for (int cx = 0; cx < cells; ++cx) {
            const auto c = static_cast<std::uint8_t>(cls(rng));
            for (int y = cy * step; y < (cy + 1) * step; ++y) {
                for (int x = cx * step; x < (cx + 1) * step; ++x) labels.at(y, x) = c;
            }
        }
    }
    std::uniform_int_distribution<int> pos(0, size - 1);
    std::uniform_int_distribution<int> len(6, size / 3);
    for (int r = 0; r < 5; ++r) {
        const int x0 = pos(rng), y0 = pos(rng), w = len(rng), h = len(rng);
        const auto c = static_cast<std::uint8_t>(cls(rng));
        for (int y = y0; y < std::min(size, y0 + h); ++y) {
            for (int x = x0; x < std::min(size, x0 + w); ++x) labels.at(y, x) = c;
        }
    }
    // A thin unlabelled seam exercises the ignore label.
    for (int x = 0; x < size; x += 7) labels.at(size / 2, x) = kIgnoreLabel;
    return labels;
}

std::uint16_t quantize(double v) { return static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

void write_sample(const fs::path& dir, const std::string& id, const AblationOptions& o, std::mt19937_64& rng) {
    const LabelMap labels = scene(o.size, rng);
    std::normal_distribution<double> vis_noise(0.0, 0.02);
    std::normal_distribution<double> nir_noise(0.0, o.nir_noise);
    std::normal_distribution<double> logit_noise(0.0, 0.6);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::uniform_int_distribution<int> any_class(0, 3);

    RasterImage vis(o.size, o.size, 3, 8);
    RasterImage nir(o.size, o.size, 1, 8);
    LogitVolume logits(Volume(o.size, o.size, 4));
    for (int y = 0; y < o.size; ++y) {
        for (int x = 0; x < o.size; ++x) {
            const std::uint8_t raw = labels.at(y, x);
            const int c = raw == kIgnoreLabel ? static_cast<int>(road) : static_cast<int>(raw);
            const Reflectance& s = kSurface[c];
            vis.at(y, x, 0) = quantize(s.r + vis_noise(rng));
            vis.at(y, x, 1) = quantize(s.g + vis_noise(rng));
            vis.at(y, x, 2) = quantize(s.b + vis_noise(rng));
            nir.at(y, x) = quantize(s.nir + nir_noise(rng));

            // The "network" sees VIS only: lawn and dirt get equal evidence.
            double z[4] = {0.0, 0.0, 0.0, 0.0};
            int shown = c;
            if (uniform(rng) < o.flip_rate) shown = any_class(rng);
            if (shown == lawn || shown == dirt) {
                z[lawn] = z[dirt] = 1.0;
            } else {
                z[shown] = 1.0;
            }
            for (int k = 0; k < 4; ++k) logits.at(y, x, k) = o.logit_scale * (2.0 * z[k] + logit_noise(rng));
        }
    }
    save_raster(vis, dir / "vis" / (id + ".png"));
    save_raster(nir, dir / "nir" / (id + ".png"));
    save_labelmap_png(labels, ablation_palette(), dir / "labels" / (id + ".png"));
    save_tensor(logits, dir / "logits" / (id + ".vnf"));
}

}  // namespace

void write_ablation_dataset(const fs::path& dir, const AblationOptions& options) {
    if (options.size < 16 || options.val_samples < 1 || options.test_samples < 1) {
        throw ValidationError("ablation dataset needs size >= 16 and at least one val and one test sample");
    }
    for (const char* sub : {"vis", "nir", "labels", "logits"}) fs::create_directories(dir / sub);
    std::mt19937_64 rng(options.seed);
    std::vector<SampleRecord> records;
    const int total = options.val_samples + options.test_samples;
    for (int n = 0; n < total; ++n) {
        const std::string id = fmt::format("s{:03d}", n);
        write_sample(dir, id, options, rng);
        SampleRecord r;
        r.id = id;
        r.vis = dir / "vis" / (id + ".png");
        r.nir = dir / "nir" / (id + ".png");
        r.label = dir / "labels" / (id + ".png");
        r.logits = dir / "logits" / (id + ".vnf");
        r.split = n < options.val_samples ? Split::val : Split::test;
        records.push_back(r);
    }
    save_palette(ablation_palette(), dir / "palette.csv");
    save_manifest(DatasetManifest(records), dir / "manifest.ini");
}

std::vector<AblationRun> table_runs() {
    return {
        {"baseline", "global", "off", "off"},  {"NDVI-hist", "global", "ndvi", "off"},
        {"EVI-hist", "global", "evi", "off"},  {"CRF_NDVI", "global", "ndvi", "ndvi"},
        {"CRF_EVI", "global", "evi", "evi"},   {"CRF_VIS", "global", "off", "vis"},
    };
}

std::string ablation_config(const AblationRun& run, const fs::path& dataset, const fs::path& runs, int seed) {
    return fmt::format(
        "[paths]\n"
        "manifest = {}\n"
        "palette = {}\n"
        "calibration = identity\n"
        "output = {}\n"
        "runs = {}\n"
        "\n"
        "[stages]\n"
        "calibrate = {}\n"
        "histogram = {}\n"
        "crf = {}\n"
        "crf_unaries = fused\n"
        "\n"
        "[calibration]\n"
        "seed = {}\n"
        "\n"
        "[eval]\n"
        "classes = road, lawn, dirt, tree\n",
        fs::absolute(dataset / "manifest.ini").string(), fs::absolute(dataset / "palette.csv").string(),
        fs::absolute(runs / run.name).string(), fs::absolute(runs).string(), run.calibrate, run.histogram, run.crf,
        seed);
}

std::vector<fs::path> write_ablation_configs(const fs::path& dataset, const fs::path& runs,
                                             const fs::path& config_dir) {
    fs::create_directories(config_dir);
    std::vector<fs::path> out;
    for (const auto& run : table_runs()) {
        const fs::path p = config_dir / (run.name + ".ini");
        std::ofstream f(p, std::ios::trunc);
        if (!f) throw IoError(fmt::format("cannot write '{}'", p.string()));
        f << ablation_config(run, dataset, runs);
        out.push_back(p);
    }
    return out;
}

}  // namespace visnir::synth
