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

#include "visnir/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <map>
#include <thread>

#include <boost/algorithm/string.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "visnir/error.hpp"
#include "visnir/geometry.hpp"
#include "visnir/io.hpp"

namespace visnir {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kTool = "visnir-fuse";

// ---------------------------------------------------------------------------
// Artifact locations

struct Layout {
    fs::path out;

    fs::path stage(const std::string& name) const { return out / name; }
    fs::path aligned_nir(const std::string& id) const { return out / "align" / (id + "_nir.png"); }
    fs::path aligned_mask(const std::string& id) const { return out / "align" / (id + "_mask.png"); }
    fs::path index_dir(IndexKind k) const { return out / "index" / to_string(k); }
    fs::path index_grid(IndexKind k, const std::string& id) const { return index_dir(k) / (id + ".vnf"); }
    fs::path index_valid(IndexKind k, const std::string& id) const { return index_dir(k) / (id + "_valid.png"); }
    fs::path index_gray(IndexKind k, const std::string& id) const { return index_dir(k) / (id + ".png"); }
    fs::path temperature_model() const { return out / "calibrate" / "temperature.json"; }
    fs::path probs(const std::string& id) const { return out / "calibrate" / "probs" / (id + ".vnf"); }
    fs::path temperature(const std::string& id) const { return out / "calibrate" / "temperature" / (id + ".vnf"); }
    fs::path histogram(IndexKind k) const { return out / "fuse" / fmt::format("histogram_{}.csv", to_string(k)); }
    fs::path fused_labels(const std::string& id) const { return out / "fuse" / "labels" / (id + ".png"); }
    fs::path fused_color(const std::string& id) const { return out / "fuse" / "labels" / (id + "_color.png"); }
    fs::path fused_scores(const std::string& id) const { return out / "fuse" / "scores" / (id + ".vnf"); }
    fs::path unaries(const std::string& id) const { return out / "fuse" / "unaries" / (id + ".vnf"); }
    fs::path crf_labels(const std::string& id) const { return out / "crf" / "labels" / (id + ".png"); }
    fs::path crf_color(const std::string& id) const { return out / "crf" / "labels" / (id + "_color.png"); }
    fs::path marginals(const std::string& id) const { return out / "crf" / "marginals" / (id + ".vnf"); }
    fs::path crf_iteration(const std::string& id, int it) const {
        return out / "crf" / "iterations" / fmt::format("{}_{:03d}.vnf", id, it);
    }
    fs::path metrics() const { return out / "eval" / "metrics.csv"; }
    fs::path run_manifest() const { return out / "eval" / "run.json"; }
};

void require(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p)) throw ValidationError(fmt::format("missing artifact '{}': {}", p.string(), hint));
}

// ---------------------------------------------------------------------------
// Run manifests

class StageRecord {
public:
    StageRecord(const PipelineConfig& config, std::string stage, fs::path dir)
        : stage_(std::move(stage)), dir_(std::move(dir)), config_hash_(sha256_text(config.canonical())) {}

    void input(const fs::path& p) { inputs_.push_back(p); }
    void output(const fs::path& p) { outputs_.push_back(p); }
    void note(const std::string& key, json value) { extra_[key] = std::move(value); }
    const fs::path& dir() const { return dir_; }

    /// True when stage.json records the same config and inputs and every
    /// recorded output is still present with its recorded hash.
    bool current() {
        const fs::path manifest = dir_ / "stage.json";
        if (!fs::exists(manifest)) return false;
        json previous;
        try {
            std::ifstream in(manifest);
            previous = json::parse(in);
        } catch (const json::exception&) {
            return false;
        }
        if (previous.value("config_hash", "") != config_hash_ || previous.value("version", "") != VISNIR_VERSION) {
            return false;
        }
        if (previous.value("inputs", json::object()) != input_hashes()) return false;
        const auto outputs = previous.value("outputs", json::object());
        if (outputs.empty()) return false;
        for (const auto& [rel, hash] : outputs.items()) {
            const fs::path p = dir_ / rel;
            if (!fs::exists(p) || sha256_file(p) != hash.get<std::string>()) return false;
        }
        return true;
    }

    void write() {
        json j;
        j["tool"] = kTool;
        j["version"] = VISNIR_VERSION;
        j["stage"] = stage_;
        j["config_hash"] = config_hash_;
        j["inputs"] = input_hashes();
        json outs = json::object();
        for (const auto& p : outputs_) outs[p.lexically_relative(dir_).generic_string()] = sha256_file(p);
        j["outputs"] = outs;
        for (const auto& [k, v] : extra_.items()) j[k] = v;
        std::ofstream out(dir_ / "stage.json", std::ios::trunc | std::ios::binary);
        if (!out) throw IoError(fmt::format("cannot write '{}'", (dir_ / "stage.json").string()));
        out << j.dump(1) << '\n';
    }

private:
    const json& input_hashes() {
        if (!hashed_) {
            hashes_ = json::object();
            for (const auto& p : inputs_) hashes_[p.generic_string()] = sha256_file(p);
            hashed_ = true;
        }
        return hashes_;
    }

    std::string stage_;
    fs::path dir_;
    std::string config_hash_;
    std::vector<fs::path> inputs_;
    std::vector<fs::path> outputs_;
    json extra_ = json::object();
    json hashes_;
    bool hashed_ = false;
};

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first failure
// in sample order is rethrown.
template <typename Fn>
void for_each_sample(std::size_t n, int workers, Fn&& fn) {
    const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(workers, 1)));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void make_dirs(std::initializer_list<fs::path> dirs) {
    for (const auto& d : dirs) fs::create_directories(d);
}

LabelPalette palette_for(const PipelineConfig& config) {
    return config.palette.empty() ? LabelPalette::tas_nir() : load_palette(config.palette);
}

std::vector<int> class_subset(const PipelineConfig& config, const LabelPalette& palette) {
    if (!config.classes.empty()) return resolve_class_subset(palette, config.classes);
    if (config.palette.empty()) return default_class_subset(palette);
    std::vector<int> all(static_cast<std::size_t>(palette.size()));
    for (int k = 0; k < palette.size(); ++k) all[static_cast<std::size_t>(k)] = k;
    return all;
}

std::vector<SampleRecord> eval_samples(const DatasetManifest& manifest) {
    auto test = manifest.split(Split::test);
    if (test.empty()) throw ValidationError("manifest has no test samples to evaluate");
    return test;
}

LogitVolume load_logits_checked(const SampleRecord& s, const LabelPalette& palette) {
    LogitVolume z = load_tensor(s.logits);
    if (z.classes() != palette.size()) {
        throw ValidationError(fmt::format("sample '{}': logits have {} classes but the palette has {}", s.id,
                                          z.classes(), palette.size()));
    }
    return z;
}

LabelMap load_labels_checked(const SampleRecord& s, const LabelPalette& palette) {
    LabelMap labels = load_labelmap_png(s.label);
    labels.validate(palette);
    return labels;
}

ProbabilityVolume load_probabilities(const fs::path& p) { return ProbabilityVolume(load_volume(p)); }

IndexImage load_index(const Layout& layout, IndexKind kind, const std::string& id, const EviCoefficients& evi) {
    IndexImage index;
    index.kind = kind;
    index.grid = load_grid(layout.index_grid(kind, id));
    index.valid = load_mask_png(layout.index_valid(kind, id));
    index.lower = kind == IndexKind::ndvi ? -1.0 : evi.lower_bound();
    index.upper = kind == IndexKind::ndvi ? 1.0 : evi.upper_bound();
    return index;
}

std::string index_hint(IndexKind kind) {
    return fmt::format("run 'visnir-fuse index --kind {}' first", to_string(kind));
}

StageResult finish(StageRecord& record, std::string stage, std::size_t samples, std::string summary) {
    record.write();
    return {std::move(stage), false, samples, std::move(summary)};
}

StageResult up_to_date(std::string stage, std::size_t samples) {
    return {std::move(stage), true, samples, "outputs up to date"};
}

Volume lts_features(const PipelineConfig& config, const Layout& layout, const SampleRecord& s) {
    Volume vis = image_features(load_raster(s.vis));
    if (config.lts_image == LtsImage::vis) return vis;
    return stack_features(vis, image_features(load_raster(layout.aligned_nir(s.id))));
}

}  // namespace

// ---------------------------------------------------------------------------

StageResult run_align(const PipelineConfig& config, const StageOptions& options) {
    const Layout layout{config.output};
    const auto manifest = load_manifest(config.manifest);
    StageRecord record(config, "align", layout.stage("align"));
    record.input(config.manifest);
    std::optional<Homography> h;
    if (!config.calibration.empty()) {
        if (!fs::exists(config.calibration)) {
            throw IoError(fmt::format("calibration file not found: '{}' (use 'identity' for pre-aligned pairs)",
                                      config.calibration.string()));
        }
        h = load_rig_calibration(config.calibration).homography();
        record.input(config.calibration);
    }
    for (const auto& s : manifest.samples()) {
        record.input(s.nir);
        record.input(s.vis);
    }
    const auto& samples = manifest.samples();
    if (!options.force && record.current()) return up_to_date("align", samples.size());

    make_dirs({record.dir()});
    for_each_sample(samples.size(), options.workers, [&](std::size_t i) {
        const auto& s = samples[i];
        const RasterImage nir = load_raster(s.nir);
        const RasterImage vis = load_raster(s.vis);
        if (!h && nir.same_shape(vis)) {
            fs::copy_file(s.nir, layout.aligned_nir(s.id), fs::copy_options::overwrite_existing);
            save_mask_png(BinaryMask(vis.width(), vis.height(), true), layout.aligned_mask(s.id));
            return;
        }
        const WarpResult warped = warp_to_vis(nir, h.value_or(Homography::identity()), vis.width(), vis.height());
        save_raster(warped.image, layout.aligned_nir(s.id));
        save_mask_png(warped.valid, layout.aligned_mask(s.id));
    });
    for (const auto& s : samples) {
        record.output(layout.aligned_nir(s.id));
        record.output(layout.aligned_mask(s.id));
    }
    record.note("homography", h ? "plane" : "identity");
    return finish(record, "align", samples.size(),
                  fmt::format("{} NIR images aligned ({})", samples.size(), h ? "plane homography" : "identity"));
}

StageResult run_index(const PipelineConfig& config, const StageOptions& options) {
    const Layout layout{config.output};
    const auto manifest = load_manifest(config.manifest);
    auto kinds = options.index_kinds.empty() ? config.required_indices() : options.index_kinds;
    if (kinds.empty()) kinds = {IndexKind::ndvi, IndexKind::evi};
    const auto& samples = manifest.samples();

    StageResult result{"index", true, samples.size(), ""};
    std::vector<std::string> parts;
    for (IndexKind kind : kinds) {
        StageRecord record(config, "index", layout.index_dir(kind));
        for (const auto& s : samples) {
            require(layout.aligned_nir(s.id), "run 'visnir-fuse align' first");
            record.input(layout.aligned_nir(s.id));
            record.input(layout.aligned_mask(s.id));
            record.input(s.vis);
        }
        record.note("kind", to_string(kind));
        if (!options.force && record.current()) {
            parts.push_back(fmt::format("{} up to date", to_string(kind)));
            continue;
        }
        make_dirs({record.dir()});
        std::vector<std::size_t> clamped(samples.size(), 0);
        for_each_sample(samples.size(), options.workers, [&](std::size_t i) {
            const auto& s = samples[i];
            const IndexImage index = compute_index(kind, load_raster(layout.aligned_nir(s.id)), load_raster(s.vis),
                                                   config.evi, load_mask_png(layout.aligned_mask(s.id)));
            save_tensor(index.grid, layout.index_grid(kind, s.id), TensorDtype::f64);
            save_mask_png(index.valid, layout.index_valid(kind, s.id));
            save_raster(index_to_gray(index), layout.index_gray(kind, s.id));
            clamped[i] = index.clamped;
        });
        std::size_t total_clamped = 0;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            const auto& s = samples[i];
            record.output(layout.index_grid(kind, s.id));
            record.output(layout.index_valid(kind, s.id));
            record.output(layout.index_gray(kind, s.id));
            total_clamped += clamped[i];
        }
        record.note("clamped_pixels", total_clamped);
        record.write();
        result.skipped = false;
        parts.push_back(fmt::format("{} computed ({} clamped pixels)", to_string(kind), total_clamped));
    }
    result.summary = boost::join(parts, "; ");
    return result;
}

StageResult run_calibrate(const PipelineConfig& config, const StageOptions& options) {
    const Layout layout{config.output};
    const auto manifest = load_manifest(config.manifest);
    const LabelPalette palette = palette_for(config);
    const auto& samples = manifest.samples();
    const auto val = manifest.split(Split::val);
    const bool local = config.calibrate == CalibrationMode::local;

    StageRecord record(config, "calibrate", layout.stage("calibrate"));
    for (const auto& s : samples) {
        record.input(s.logits);
        record.input(s.label);
        if (local) {
            record.input(s.vis);
            if (config.lts_image == LtsImage::vis_nir) {
                require(layout.aligned_nir(s.id), "run 'visnir-fuse align' first");
                record.input(layout.aligned_nir(s.id));
            }
        }
    }
    record.note("seed", config.lts.seed);
    if (!options.force && record.current()) return up_to_date("calibrate", samples.size());
    make_dirs({record.dir(), record.dir() / "probs", record.dir() / "temperature"});

    json summary;
    summary["mode"] = to_string(config.calibrate);
    TemperatureModel model;
    if (config.calibrate != CalibrationMode::off) {
        if (val.empty()) throw ValidationError("calibration needs val samples in the manifest");
        std::vector<LogitVolume> logits;
        std::vector<LabelMap> labels;
        std::vector<Volume> images;
        for (const auto& s : val) {
            logits.push_back(load_logits_checked(s, palette));
            labels.push_back(load_labels_checked(s, palette));
            if (local) images.push_back(lts_features(config, layout, s));
        }
        std::vector<CalibrationSample> cal;
        for (std::size_t i = 0; i < val.size(); ++i) {
            cal.push_back({&logits[i], &labels[i], local ? &images[i] : nullptr});
        }
        if (local) {
            const LocalFitResult fit = fit_local_temperature(cal, config.lts);
            model = fit.model();
            summary["val_nll_initial"] = fit.initial_nll;
            summary["val_nll_best"] = fit.best_nll;
            summary["epochs"] = fit.epochs;
            summary["early_stopped"] = fit.early_stopped;
            summary["diverged"] = fit.diverged;
        } else {
            const GlobalFitResult fit = fit_global_temperature(cal);
            model = fit.model();
            summary["temperature"] = fit.temperature;
            summary["val_nll_at_one"] = fit.nll_at_one;
            summary["val_nll"] = fit.nll;
            summary["at_bound"] = fit.at_bound;
        }
    }
    save_temperature_model(model, layout.temperature_model());

    // Reliability over the evaluated split (val when there is no test split).
    const auto test = manifest.split(Split::test);
    const auto& rel_split = test.empty() ? val : test;
    std::map<std::string, bool> in_rel;
    for (const auto& s : rel_split) in_rel[s.id] = true;

    std::vector<ReliabilityBins> before(samples.size(), ReliabilityBins(config.reliability_bins));
    std::vector<ReliabilityBins> after(samples.size(), ReliabilityBins(config.reliability_bins));
    std::vector<double> nll_before(samples.size(), 0.0);
    std::vector<double> nll_after(samples.size(), 0.0);
    std::vector<std::size_t> labelled(samples.size(), 0);
    for_each_sample(samples.size(), options.workers, [&](std::size_t i) {
        const auto& s = samples[i];
        const LogitVolume z = load_logits_checked(s, palette);
        std::optional<Volume> image;
        if (model.needs_image()) image = lts_features(config, layout, s);
        const CalibratedPrediction pred = apply_temperature(z, model, image ? &*image : nullptr);
        save_tensor(pred.probabilities, layout.probs(s.id), TensorDtype::f64);
        save_tensor(pred.temperature, layout.temperature(s.id), TensorDtype::f64);
        if (!in_rel.count(s.id)) return;
        const LabelMap labels = load_labels_checked(s, palette);
        const ConfidenceMap raw = confidence(softmax(z));
        const ConfidenceMap cal = confidence(pred.probabilities);
        before[i].add(raw.confidence, raw.argmax, labels);
        after[i].add(cal.confidence, cal.argmax, labels);
        for (std::size_t p = 0; p < labels.size(); ++p) {
            if (labels[p] == kIgnoreLabel) continue;
            nll_before[i] -= std::log(std::max(softmax(z.pixel(p))[labels[p]], 1e-300));
            nll_after[i] -= std::log(std::max(pred.probabilities.pixel(p)[labels[p]], 1e-300));
            ++labelled[i];
        }
    });
    ReliabilityBins total_before(config.reliability_bins);
    ReliabilityBins total_after(config.reliability_bins);
    double sum_before = 0.0;
    double sum_after = 0.0;
    std::size_t n_labelled = 0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        total_before.merge(before[i]);
        total_after.merge(after[i]);
        sum_before += nll_before[i];
        sum_after += nll_after[i];
        n_labelled += labelled[i];
        record.output(layout.probs(samples[i].id));
        record.output(layout.temperature(samples[i].id));
    }
    save_reliability_csv(total_before, record.dir() / "reliability_before.csv");
    save_reliability_csv(total_after, record.dir() / "reliability_after.csv");
    summary["reliability_split"] = test.empty() ? "val" : "test";
    summary["ece_before"] = expected_calibration_error(total_before);
    summary["ece_after"] = expected_calibration_error(total_after);
    if (n_labelled > 0) {
        summary["nll_before"] = sum_before / static_cast<double>(n_labelled);
        summary["nll_after"] = sum_after / static_cast<double>(n_labelled);
    }
    {
        std::ofstream out(record.dir() / "summary.json", std::ios::trunc | std::ios::binary);
        out << summary.dump(1) << '\n';
    }
    record.output(layout.temperature_model());
    record.output(record.dir() / "reliability_before.csv");
    record.output(record.dir() / "reliability_after.csv");
    record.output(record.dir() / "summary.json");
    std::string text = fmt::format("mode {}, ECE {:.4f} -> {:.4f}", to_string(config.calibrate),
                                   summary["ece_before"].get<double>(), summary["ece_after"].get<double>());
    if (summary.contains("temperature")) text += fmt::format(", T = {:.4f}", summary["temperature"].get<double>());
    return finish(record, "calibrate", samples.size(), text);
}

StageResult run_fuse(const PipelineConfig& config, const StageOptions& options) {
    const Layout layout{config.output};
    const auto manifest = load_manifest(config.manifest);
    const LabelPalette palette = palette_for(config);
    const auto test = eval_samples(manifest);
    const auto val = manifest.split(Split::val);
    std::vector<IndexKind> kinds;
    if (config.histogram == HistogramMode::ndvi || config.histogram == HistogramMode::both) {
        kinds.push_back(IndexKind::ndvi);
    }
    if (config.histogram == HistogramMode::evi || config.histogram == HistogramMode::both) {
        kinds.push_back(IndexKind::evi);
    }

    StageRecord record(config, "fuse", layout.stage("fuse"));
    require(layout.temperature_model(), "run 'visnir-fuse calibrate' first");
    for (const auto& s : test) {
        require(layout.probs(s.id), "run 'visnir-fuse calibrate' first");
        record.input(layout.probs(s.id));
    }
    if (!kinds.empty() && val.empty()) throw ValidationError("histogram fusion needs val samples in the manifest");
    for (IndexKind kind : kinds) {
        for (const auto& s : val) {
            require(layout.index_grid(kind, s.id), index_hint(kind));
            record.input(layout.index_grid(kind, s.id));
            record.input(layout.index_valid(kind, s.id));
            record.input(s.label);
        }
        for (const auto& s : test) {
            require(layout.index_grid(kind, s.id), index_hint(kind));
            record.input(layout.index_grid(kind, s.id));
            record.input(layout.index_valid(kind, s.id));
        }
    }
    if (!options.force && record.current()) return up_to_date("fuse", test.size());
    make_dirs({record.dir() / "labels", record.dir() / "scores", record.dir() / "unaries"});

    std::vector<ClassHistogramModel> models;
    for (IndexKind kind : kinds) {
        std::vector<IndexImage> indices;
        std::vector<LabelMap> labels;
        for (const auto& s : val) {
            indices.push_back(load_index(layout, kind, s.id, config.evi));
            labels.push_back(load_labels_checked(s, palette));
        }
        std::vector<HistogramSample> hs;
        for (std::size_t i = 0; i < val.size(); ++i) hs.push_back({&indices[i], &labels[i]});
        models.push_back(accumulate_histograms(hs, kind, palette.size(),
                                               kind == IndexKind::ndvi ? config.ndvi_bins : config.evi_bins,
                                               config.evi));
        save_histogram_csv(models.back(), layout.histogram(kind));
        record.output(layout.histogram(kind));
    }

    for_each_sample(test.size(), options.workers, [&](std::size_t i) {
        const auto& s = test[i];
        ProbabilityVolume p = load_probabilities(layout.probs(s.id));
        if (p.classes() != palette.size()) {
            throw ValidationError(fmt::format("sample '{}': calibrated probabilities have {} classes, palette {}",
                                              s.id, p.classes(), palette.size()));
        }
        FusionResult fused;
        if (models.empty()) {
            fused = {argmax_labels(p), p, p};
        } else {
            std::vector<IndexImage> indices;
            for (IndexKind kind : kinds) indices.push_back(load_index(layout, kind, s.id, config.evi));
            std::vector<IndexEvidence> evidence;
            for (std::size_t k = 0; k < kinds.size(); ++k) evidence.push_back({&indices[k], &models[k]});
            fused = fuse_multi(p, evidence, config.fusion);
        }
        save_labelmap_png(fused.labels, palette, layout.fused_labels(s.id), layout.fused_color(s.id));
        save_tensor(fused.scores, layout.fused_scores(s.id), TensorDtype::f64);
        save_tensor(fused.normalized, layout.unaries(s.id), TensorDtype::f64);
    });
    for (const auto& s : test) {
        record.output(layout.fused_labels(s.id));
        record.output(layout.fused_color(s.id));
        record.output(layout.fused_scores(s.id));
        record.output(layout.unaries(s.id));
    }
    return finish(record, "fuse", test.size(),
                  kinds.empty() ? std::string("histogram off, calibrated arg-max")
                                : fmt::format("histogram {} with beta {}", to_string(config.histogram),
                                              config.fusion.beta));
}

StageResult run_crf(const PipelineConfig& config, const StageOptions& options) {
    const Layout layout{config.output};
    if (config.crf == CrfGuide::off) return {"crf", true, 0, "disabled (stages.crf = off)"};
    const auto manifest = load_manifest(config.manifest);
    const LabelPalette palette = palette_for(config);
    const auto test = eval_samples(manifest);

    StageRecord record(config, "crf", layout.stage("crf"));
    for (const auto& s : test) {
        if (config.crf_unaries == UnarySource::fused) {
            require(layout.unaries(s.id), "run 'visnir-fuse fuse' first");
            record.input(layout.unaries(s.id));
        } else {
            require(layout.probs(s.id), "run 'visnir-fuse calibrate' first");
            record.input(layout.probs(s.id));
        }
        switch (config.crf) {
            case CrfGuide::vis: record.input(s.vis); break;
            case CrfGuide::nir:
                require(layout.aligned_nir(s.id), "run 'visnir-fuse align' first");
                record.input(layout.aligned_nir(s.id));
                break;
            case CrfGuide::ndvi:
            case CrfGuide::evi: {
                const IndexKind kind = config.crf == CrfGuide::ndvi ? IndexKind::ndvi : IndexKind::evi;
                require(layout.index_grid(kind, s.id), index_hint(kind));
                record.input(layout.index_grid(kind, s.id));
                record.input(layout.index_valid(kind, s.id));
                break;
            }
            case CrfGuide::off: break;
        }
    }
    if (!options.force && record.current()) return up_to_date("crf", test.size());
    make_dirs({record.dir() / "labels", record.dir() / "marginals"});
    if (config.dump_crf_iterations) make_dirs({record.dir() / "iterations"});

    for_each_sample(test.size(), options.workers, [&](std::size_t i) {
        const auto& s = test[i];
        const ProbabilityVolume unaries = load_probabilities(
            config.crf_unaries == UnarySource::fused ? layout.unaries(s.id) : layout.probs(s.id));
        GuidanceImage guide;
        switch (config.crf) {
            case CrfGuide::vis: guide = GuidanceImage::from_raster(load_raster(s.vis)); break;
            case CrfGuide::nir: guide = GuidanceImage::from_raster(load_raster(layout.aligned_nir(s.id))); break;
            case CrfGuide::ndvi:
                guide = GuidanceImage::from_index(load_index(layout, IndexKind::ndvi, s.id, config.evi));
                break;
            case CrfGuide::evi:
                guide = GuidanceImage::from_index(load_index(layout, IndexKind::evi, s.id, config.evi));
                break;
            case CrfGuide::off: break;
        }
        IterationObserver observer;
        if (config.dump_crf_iterations) {
            observer = [&](int it, const ProbabilityVolume& q) {
                save_tensor(q, layout.crf_iteration(s.id, it), TensorDtype::f64);
            };
        }
        const CrfResult result = mean_field(unaries, guide, config.crf_config, observer);
        save_labelmap_png(result.labels, palette, layout.crf_labels(s.id), layout.crf_color(s.id));
        save_tensor(result.marginals, layout.marginals(s.id), TensorDtype::f64);
    });
    for (const auto& s : test) {
        record.output(layout.crf_labels(s.id));
        record.output(layout.crf_color(s.id));
        record.output(layout.marginals(s.id));
        if (config.dump_crf_iterations) {
            for (int it = 1; it <= config.crf_config.iterations; ++it) record.output(layout.crf_iteration(s.id, it));
        }
    }
    return finish(record, "crf", test.size(),
                  fmt::format("guide {}, unaries {}, {} iterations ({} filter)", to_string(config.crf),
                              to_string(config.crf_unaries), config.crf_config.iterations,
                              to_string(config.crf_config.filter)));
}

StageResult run_eval(const PipelineConfig& config, const StageOptions& options) {
    const Layout layout{config.output};
    const auto manifest = load_manifest(config.manifest);
    const LabelPalette palette = palette_for(config);
    const auto test = eval_samples(manifest);
    const auto subset = class_subset(config, palette);
    const bool crf = config.crf != CrfGuide::off;
    const auto prediction = [&](const std::string& id) { return crf ? layout.crf_labels(id) : layout.fused_labels(id); };

    StageRecord record(config, "eval", layout.stage("eval"));
    record.input(config.manifest);
    for (const auto& s : test) {
        require(prediction(s.id), crf ? "run 'visnir-fuse crf' first" : "run 'visnir-fuse fuse' first");
        record.input(prediction(s.id));
        record.input(s.label);
        if (fs::exists(layout.aligned_mask(s.id))) record.input(layout.aligned_mask(s.id));
    }
    if (!options.force && record.current()) return up_to_date("eval", test.size());
    make_dirs({record.dir()});

    std::vector<ConfusionMatrix> parts(test.size(), ConfusionMatrix(palette.size()));
    for_each_sample(test.size(), options.workers, [&](std::size_t i) {
        const auto& s = test[i];
        const LabelMap pred = load_labelmap_png(prediction(s.id));
        const LabelMap truth = load_labels_checked(s, palette);
        std::optional<BinaryMask> mask;
        if (fs::exists(layout.aligned_mask(s.id))) mask = load_mask_png(layout.aligned_mask(s.id));
        parts[i] = accumulate_confusion(pred, truth, ConfusionMatrix(palette.size()), mask ? &*mask : nullptr);
    });
    ConfusionMatrix total(palette.size());
    for (const auto& m : parts) total.merge(m);
    const IouReport report = iou(total, subset, config.absent_classes);
    save_metrics_csv(report, palette, layout.metrics());

    json run;
    run["tool"] = kTool;
    run["version"] = VISNIR_VERSION;
    run["row"] = config.row_name();
    run["calibrate"] = to_string(config.calibrate);
    run["histogram"] = to_string(config.histogram);
    run["crf"] = to_string(config.crf);
    run["crf_unaries"] = to_string(config.crf_unaries);
    run["seed"] = config.lts.seed;
    run["config_hash"] = sha256_text(config.canonical());
    {
        std::vector<std::string> lines;
        const std::string canonical = config.canonical();
        boost::split(lines, boost::trim_copy(canonical), boost::is_any_of("\n"));
        run["config"] = lines;
    }
    json inputs = json::object();
    for (const auto& s : manifest.samples()) {
        for (const fs::path& p : {s.vis, s.nir, s.label, s.logits}) inputs[p.generic_string()] = sha256_file(p);
    }
    run["inputs"] = inputs;
    run["absent_classes"] = to_string(config.absent_classes);
    json classes = json::array();
    for (const auto& c : report.classes) {
        classes.push_back({{"name", palette[c.label].name},
                           {"iou", c.iou ? json(*c.iou) : json(nullptr)},
                           {"tp", c.tp},
                           {"fp", c.fp},
                           {"fn", c.fn}});
    }
    run["classes"] = classes;
    run["miou"] = report.mean ? json(*report.mean) : json(nullptr);
    run["pixels"] = total.total();
    {
        std::ofstream out(layout.run_manifest(), std::ios::trunc | std::ios::binary);
        if (!out) throw IoError(fmt::format("cannot write '{}'", layout.run_manifest().string()));
        out << run.dump(1) << '\n';
    }
    record.output(layout.metrics());
    record.output(layout.run_manifest());
    return finish(record, "eval", test.size(),
                  fmt::format("{}: mIoU {}", config.row_name(),
                              report.mean ? fmt::format("{:.2f}%", 100.0 * *report.mean) : "undefined"));
}

namespace {

int row_rank(const std::string& row) {
    static const std::vector<std::string> order = {"baseline", "NDVI-hist", "EVI-hist", "CRF_NDVI",
                                                   "CRF_EVI",  "CRF_VIS"};
    const auto it = std::find(order.begin(), order.end(), row);
    return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

std::string percent(const json& v) { return v.is_null() ? "undefined" : fmt::format("{:.2f}", 100.0 * v.get<double>()); }

}  // namespace

StageResult run_report(const PipelineConfig& config, const StageOptions& /*options*/) {
    const Layout layout{config.output};
    struct Row {
        fs::path dir;
        json run;
    };
    std::vector<Row> rows;
    if (fs::is_directory(config.runs)) {
        for (const auto& entry : fs::directory_iterator(config.runs)) {
            const fs::path run_json = entry.path() / "eval" / "run.json";
            if (!entry.is_directory() || !fs::exists(run_json)) continue;
            std::ifstream in(run_json);
            try {
                rows.push_back({entry.path(), json::parse(in)});
            } catch (const json::exception& e) {
                throw FormatError(fmt::format("'{}': {}", run_json.string(), e.what()));
            }
        }
    }
    if (rows.empty()) return {"report", true, 0, fmt::format("no runs found in '{}'", config.runs.string())};
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        const auto ra = a.run.value("row", "");
        const auto rb = b.run.value("row", "");
        if (row_rank(ra) != row_rank(rb)) return row_rank(ra) < row_rank(rb);
        if (ra != rb) return ra < rb;
        return a.dir.filename() < b.dir.filename();
    });

    std::vector<std::string> class_names;
    for (const auto& r : rows) {
        for (const auto& c : r.run.value("classes", json::array())) {
            const auto name = c.value("name", "");
            if (std::find(class_names.begin(), class_names.end(), name) == class_names.end()) {
                class_names.push_back(name);
            }
        }
    }
    std::vector<std::string> header = {"row", "run", "calibration", "histogram", "crf"};
    header.insert(header.end(), class_names.begin(), class_names.end());
    header.push_back("mIoU");
    std::vector<std::vector<std::string>> table;
    for (const auto& r : rows) {
        std::vector<std::string> line = {r.run.value("row", ""), r.dir.filename().string(),
                                         r.run.value("calibrate", ""), r.run.value("histogram", ""),
                                         r.run.value("crf", "")};
        for (const auto& name : class_names) {
            std::string cell = "-";
            for (const auto& c : r.run.value("classes", json::array())) {
                if (c.value("name", "") == name) cell = percent(c.at("iou"));
            }
            line.push_back(cell);
        }
        line.push_back(percent(r.run.value("miou", json(nullptr))));
        table.push_back(std::move(line));
    }

    const fs::path dir = layout.stage("report");
    make_dirs({dir});
    {
        std::ofstream csv(dir / "ablation.csv", std::ios::trunc | std::ios::binary);
        csv << boost::join(header, ",") << '\n';
        for (const auto& line : table) csv << boost::join(line, ",") << '\n';
        if (!csv) throw IoError(fmt::format("cannot write '{}'", (dir / "ablation.csv").string()));
    }
    std::vector<std::size_t> width(header.size());
    for (std::size_t c = 0; c < header.size(); ++c) {
        width[c] = header[c].size();
        for (const auto& line : table) width[c] = std::max(width[c], line[c].size());
    }
    const auto format_line = [&](const std::vector<std::string>& line) {
        std::string out;
        for (std::size_t c = 0; c < line.size(); ++c) {
            if (c > 0) out += "  ";
            out += c < 5 ? fmt::format("{:<{}}", line[c], width[c]) : fmt::format("{:>{}}", line[c], width[c]);
        }
        return boost::trim_right_copy(out) + "\n";
    };
    std::string text = format_line(header);
    std::size_t rule = 0;
    for (auto w : width) rule += w + 2;
    text += std::string(rule - 2, '-') + "\n";
    for (const auto& line : table) text += format_line(line);
    {
        std::ofstream txt(dir / "ablation.txt", std::ios::trunc | std::ios::binary);
        txt << text;
    }
    return {"report", false, rows.size(), fmt::format("{} run{}\n{}", rows.size(), rows.size() == 1 ? "" : "s", text)};
}

StageResult run_stage(const std::string& stage, const PipelineConfig& config, const StageOptions& options) {
    if (stage == "align") return run_align(config, options);
    if (stage == "index") return run_index(config, options);
    if (stage == "calibrate") return run_calibrate(config, options);
    if (stage == "fuse") return run_fuse(config, options);
    if (stage == "crf") return run_crf(config, options);
    if (stage == "eval") return run_eval(config, options);
    if (stage == "report") return run_report(config, options);
    throw ValidationError(fmt::format("unknown stage '{}'", stage));
}

std::vector<StageResult> run_all(const PipelineConfig& config, const StageOptions& options) {
    std::vector<StageResult> out;
    for (const char* stage : {"align", "index", "calibrate", "fuse", "crf", "eval"}) {
        if (std::string(stage) == "index" && config.required_indices().empty()) continue;
        out.push_back(run_stage(stage, config, options));
    }
    return out;
}

}  // namespace visnir
