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

// File-based experiment pipeline. Every stage reads the artifacts of earlier
// stages from <output>/<stage>/ and writes its own there, together with a
// stage.json run manifest used to skip unchanged re-runs.
//
// Layout under <output>:
//   align/<id>_nir.png, align/<id>_mask.png
//   index/<kind>/<id>.vnf, <id>_valid.png, <id>.png
//   calibrate/temperature.json, reliability_{before,after}.csv, summary.json,
//             probs/<id>.vnf, temperature/<id>.vnf
//   fuse/histogram_<kind>.csv, labels/<id>.png, labels/<id>_color.png,
//        scores/<id>.vnf, unaries/<id>.vnf
//   crf/labels/<id>.png, crf/labels/<id>_color.png, crf/marginals/<id>.vnf
//   eval/metrics.csv, eval/run.json
//   report/ablation.csv, report/ablation.txt

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "visnir/calibration.hpp"
#include "visnir/crf.hpp"
#include "visnir/fusion.hpp"
#include "visnir/metrics.hpp"
#include "visnir/veg_index.hpp"

namespace visnir {

enum class CalibrationMode { off, global, local };
/// `both` sums NDVI and EVI evidence and needs fusion.experimental_multi_index.
enum class HistogramMode { off, ndvi, evi, both };
enum class CrfGuide { off, vis, nir, ndvi, evi };
enum class UnarySource { fused, calibrated };
/// Image features the local temperature network sees.
enum class LtsImage { vis, vis_nir };

std::string to_string(CalibrationMode m);
std::string to_string(HistogramMode m);
std::string to_string(CrfGuide g);
std::string to_string(UnarySource s);
std::string to_string(LtsImage i);

struct PipelineConfig {
    std::filesystem::path manifest;
    /// Rig calibration file; empty means the pairs are already aligned.
    std::filesystem::path calibration;
    std::filesystem::path output;
    /// Palette CSV; empty selects the built-in TAS-NIR palette.
    std::filesystem::path palette;
    /// Directory scanned by the report stage; defaults to output's parent.
    std::filesystem::path runs;

    CalibrationMode calibrate = CalibrationMode::global;
    HistogramMode histogram = HistogramMode::off;
    CrfGuide crf = CrfGuide::off;
    UnarySource crf_unaries = UnarySource::fused;

    FusionConfig fusion;
    bool experimental_multi_index = false;
    int ndvi_bins = 16;
    int evi_bins = 20;
    CrfConfig crf_config;
    bool dump_crf_iterations = false;
    EviCoefficients evi;

    int reliability_bins = 10;
    LtsImage lts_image = LtsImage::vis;
    LocalFitOptions lts;

    /// Class names; empty selects the nine evaluated TAS-NIR classes.
    std::vector<std::string> classes;
    AbsentClassPolicy absent_classes = AbsentClassPolicy::exclude;

    /// Relative paths resolve against the config file's directory.
    static PipelineConfig load(const std::filesystem::path& path);
    /// Throws ValidationError on inconsistent toggles.
    void validate() const;
    /// Sorted "section.key = value" lines covering every setting.
    std::string canonical() const;
    /// Ablation row name: baseline, NDVI-hist, EVI-hist, CRF_NDVI, ...
    std::string row_name() const;
    std::vector<IndexKind> required_indices() const;
};

struct StageOptions {
    bool force = false;
    int workers = 1;
    /// index stage only; empty computes what the config needs.
    std::vector<IndexKind> index_kinds;
};

struct StageResult {
    std::string stage;
    /// Outputs were current and nothing was recomputed.
    bool skipped = false;
    std::size_t samples = 0;
    std::string summary;
};

StageResult run_align(const PipelineConfig& config, const StageOptions& options = {});
StageResult run_index(const PipelineConfig& config, const StageOptions& options = {});
StageResult run_calibrate(const PipelineConfig& config, const StageOptions& options = {});
StageResult run_fuse(const PipelineConfig& config, const StageOptions& options = {});
StageResult run_crf(const PipelineConfig& config, const StageOptions& options = {});
StageResult run_eval(const PipelineConfig& config, const StageOptions& options = {});
StageResult run_report(const PipelineConfig& config, const StageOptions& options = {});

/// Dispatches by stage name; throws ValidationError for unknown names.
StageResult run_stage(const std::string& stage, const PipelineConfig& config, const StageOptions& options = {});
/// align, index, calibrate, fuse, crf, eval in order.
std::vector<StageResult> run_all(const PipelineConfig& config, const StageOptions& options = {});

/// Lower-case hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_text(const std::string& text);

}  // namespace visnir
