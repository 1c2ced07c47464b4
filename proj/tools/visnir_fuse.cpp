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

// visnir-fuse <align|index|calibrate|fuse|crf|eval|report|run> --config FILE
//             [--force] [--workers N]

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "visnir/error.hpp"
#include "visnir/pipeline.hpp"
#include "visnir/veg_index.hpp"

namespace {

struct Common {
    std::string config;
    bool force = false;
    int workers = 1;
};

CLI::App* add_stage(CLI::App& app, const std::string& name, const std::string& help, Common& common) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("-c,--config", common.config, "pipeline config file")->required()->check(CLI::ExistingFile);
    sub->add_flag("-f,--force", common.force, "re-run even when outputs are current");
    sub->add_option("-j,--workers", common.workers, "samples processed in parallel")
        ->check(CLI::PositiveNumber)
        ->default_val(1);
    return sub;
}

void print(const visnir::StageResult& r) {
    fmt::print("{}: {}{}\n", r.stage, r.skipped ? "skipped, " : "", r.summary);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"VIS/NIR fusion pipeline for semantic segmentation outputs", "visnir-fuse"};
    app.set_version_flag("--version", std::string(VISNIR_VERSION));
    app.require_subcommand(1);

    Common common;
    std::string kind = "all";
    for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
             {"align", "warp NIR images into the VIS frame"},
             {"calibrate", "fit and apply temperature scaling"},
             {"fuse", "fuse calibrated probabilities with index histograms"},
             {"crf", "dense CRF refinement"},
             {"eval", "per-class IoU and mIoU on the test split"},
             {"report", "ablation table across completed runs"},
             {"run", "align through eval in one go"}}) {
        add_stage(app, name, help, common);
    }
    add_stage(app, "index", "NDVI/EVI images", common)
        ->add_option("-k,--kind", kind, "index to compute")
        ->check(CLI::IsMember({"ndvi", "evi", "all"}))
        ->default_val("all");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const std::string stage = app.get_subcommands().front()->get_name();
        const auto config = visnir::PipelineConfig::load(common.config);
        visnir::StageOptions options;
        options.force = common.force;
        options.workers = common.workers;
        if (stage == "index") {
            if (kind == "all") {
                options.index_kinds = {visnir::IndexKind::ndvi, visnir::IndexKind::evi};
            } else {
                options.index_kinds = {visnir::parse_index_kind(kind)};
            }
        }
        if (stage == "run") {
            for (const auto& r : visnir::run_all(config, options)) print(r);
        } else {
            print(visnir::run_stage(stage, config, options));
        }
    } catch (const std::exception& e) {
        std::string message = e.what();
        for (auto& ch : message) {
            if (ch == '\n') ch = ' ';
        }
        fmt::print(stderr, "visnir-fuse: error: {}\n", message);
        return 1;
    }
    return 0;
}
