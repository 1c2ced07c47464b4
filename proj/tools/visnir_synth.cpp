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

// Fixture generator.
//   visnir-synth ablation --out DIR [--seed N]
//   visnir-synth logits --scale S --out FILE --labels FILE [--size N] [--classes K]

#include <cstdint>
#include <exception>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "visnir/io.hpp"
#include "visnir/synth.hpp"

int main(int argc, char** argv) {
    CLI::App app{"synthetic fixtures for visnir-fuse", "visnir-synth"};
    app.require_subcommand(1);

    std::string out;
    visnir::synth::AblationOptions ablation;
    auto* abl = app.add_subcommand("ablation", "4-class VIS/NIR dataset plus one config per ablation row");
    abl->add_option("-o,--out", out, "output directory")->required();
    abl->add_option("--seed", ablation.seed, "generator seed");
    abl->add_option("--size", ablation.size, "image side in pixels")->check(CLI::Range(16, 4096));
    abl->add_option("--val", ablation.val_samples, "val samples")->check(CLI::PositiveNumber);
    abl->add_option("--test", ablation.test_samples, "test samples")->check(CLI::PositiveNumber);

    double scale = 2.0;
    int size = 64;
    int classes = 4;
    std::uint64_t seed = 0;
    std::string labels;
    auto* lg = app.add_subcommand("logits", "calibrated logits scaled by --scale, with sampled labels");
    lg->add_option("-o,--out", out, "logit tensor")->required();
    lg->add_option("--labels", labels, "label PNG")->required();
    lg->add_option("--scale", scale, "logit scale")->check(CLI::PositiveNumber);
    lg->add_option("--size", size, "image side in pixels")->check(CLI::Range(1, 4096));
    lg->add_option("--classes", classes, "classes")->check(CLI::Range(2, 255));
    lg->add_option("--seed", seed, "generator seed");

    CLI11_PARSE(app, argc, argv);
    try {
        if (abl->parsed()) {
            visnir::synth::write_ablation_dataset(out, ablation);
            const auto configs = visnir::synth::write_ablation_configs(out, std::filesystem::path(out) / "runs",
                                                                      std::filesystem::path(out) / "configs");
            fmt::print("wrote dataset and {} configs under {}\n", configs.size(), out);
        } else {
            const auto fixture = visnir::synth::calibrated_logits(size, size, classes, scale, seed);
            visnir::save_tensor(fixture.logits, out);
            std::vector<visnir::LabelPalette::Entry> entries;
            for (int k = 0; k < classes; ++k) {
                entries.push_back({fmt::format("c{}", k), {static_cast<std::uint8_t>(k), 0, 0}});
            }
            visnir::save_labelmap_png(fixture.labels, visnir::LabelPalette(entries), labels);
        }
    } catch (const std::exception& e) {
        fmt::print(stderr, "visnir-synth: error: {}\n", e.what());
        return 1;
    }
    return 0;
}
