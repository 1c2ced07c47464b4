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

// Synthetic fixtures: calibrated logit generators and a small VIS/NIR
// segmentation dataset for exercising the pipeline without a trained model.

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "visnir/types.hpp"

namespace visnir::synth {

struct LabelledLogits {
    LogitVolume logits;
    LabelMap labels;
};

/// Base logits z ~ N(0, spread^2) per class and pixel, labels drawn from
/// softmax(z), returned logits scale * z. The NLL-optimal temperature of the
/// returned logits is therefore close to `scale`.
LabelledLogits calibrated_logits(int width, int height, int classes, double scale, std::uint64_t seed,
                                 double spread = 2.0);

struct AblationOptions {
    int size = 64;
    int val_samples = 4;
    int test_samples = 4;
    std::uint64_t seed = 7;
    /// Logit magnitude; larger values make the raw logits overconfident.
    double logit_scale = 2.0;
    /// Std of per-pixel noise on NIR reflectance.
    double nir_noise = 0.06;
    /// Fraction of pixels whose logits favour a random class.
    double flip_rate = 0.15;
};

/// The four classes of the ablation dataset: road, lawn, dirt, tree. Lawn and
/// dirt look alike in the logits; their NIR response differs.
LabelPalette ablation_palette();

/// Writes vis/, nir/, labels/, logits/, palette.csv and manifest.ini under
/// `dir`.
void write_ablation_dataset(const std::filesystem::path& dir, const AblationOptions& options = {});

struct AblationRun {
    std::string name;
    std::string calibrate = "global";
    std::string histogram = "off";
    std::string crf = "off";
};

/// baseline, NDVI-hist, EVI-hist, CRF_NDVI, CRF_EVI, CRF_VIS.
std::vector<AblationRun> table_runs();

/// Config text for one run of the ablation with outputs under runs/<name>.
std::string ablation_config(const AblationRun& run, const std::filesystem::path& dataset,
                            const std::filesystem::path& runs, int seed = 0);

/// Writes configs/<name>.ini for every run in table_runs(); returns the paths.
std::vector<std::filesystem::path> write_ablation_configs(const std::filesystem::path& dataset,
                                                          const std::filesystem::path& runs,
                                                          const std::filesystem::path& config_dir);

}  // namespace visnir::synth
