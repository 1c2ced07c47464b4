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

#include <charconv>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <openssl/evp.h>

#include "visnir/error.hpp"
#include "visnir/pipeline.hpp"

namespace visnir {

namespace fs = std::filesystem;

std::string to_string(CalibrationMode m) {
    switch (m) {
        case CalibrationMode::off: return "off";
        case CalibrationMode::global: return "global";
        case CalibrationMode::local: return "local";
    }
    return "?";
}

std::string to_string(HistogramMode m) {
    switch (m) {
        case HistogramMode::off: return "off";
        case HistogramMode::ndvi: return "ndvi";
        case HistogramMode::evi: return "evi";
        case HistogramMode::both: return "both";
    }
    return "?";
}

std::string to_string(CrfGuide g) {
    switch (g) {
        case CrfGuide::off: return "off";
        case CrfGuide::vis: return "vis";
        case CrfGuide::nir: return "nir";
        case CrfGuide::ndvi: return "ndvi";
        case CrfGuide::evi: return "evi";
    }
    return "?";
}

std::string to_string(UnarySource s) { return s == UnarySource::fused ? "fused" : "calibrated"; }
std::string to_string(LtsImage i) { return i == LtsImage::vis ? "vis" : "vis+nir"; }

namespace {

template <typename Enum>
Enum parse_choice(const std::string& key, const std::string& value, const std::map<std::string, Enum>& choices) {
    const auto it = choices.find(boost::algorithm::to_lower_copy(value));
    if (it != choices.end()) return it->second;
    std::vector<std::string> names;
    for (const auto& [name, e] : choices) names.push_back(name);
    throw ValidationError(fmt::format("config: {} = '{}' is not one of {}", key, value, boost::join(names, ", ")));
}

// Reads typed values out of the INI tree and remembers which keys were
// consumed, so that leftovers can be reported as typos.
class IniReader {
public:
    IniReader(const boost::property_tree::ptree& tree, fs::path base) : tree_(tree), base_(std::move(base)) {}

    std::optional<std::string> text(const std::string& section, const std::string& key) {
        used_.insert(section + "." + key);
        const auto sec = tree_.get_child_optional(section);
        if (!sec) return std::nullopt;
        const auto v = sec->get_optional<std::string>(key);
        if (!v) return std::nullopt;
        return boost::trim_copy(*v);
    }

    void path(const std::string& section, const std::string& key, fs::path& out) {
        if (const auto v = text(section, key)) {
            if (v->empty()) {
                out.clear();
                return;
            }
            fs::path p(*v);
            out = p.is_relative() ? (base_ / p).lexically_normal() : p;
        }
    }

    void number(const std::string& section, const std::string& key, double& out) {
        if (const auto v = text(section, key)) {
            double parsed = 0.0;
            const auto res = std::from_chars(v->data(), v->data() + v->size(), parsed);
            if (res.ec != std::errc() || res.ptr != v->data() + v->size()) {
                throw ValidationError(fmt::format("config: {}.{} = '{}' is not a number", section, key, *v));
            }
            out = parsed;
        }
    }

    template <typename Int>
    void integer(const std::string& section, const std::string& key, Int& out) {
        if (const auto v = text(section, key)) {
            Int parsed{};
            const auto res = std::from_chars(v->data(), v->data() + v->size(), parsed);
            if (res.ec != std::errc() || res.ptr != v->data() + v->size()) {
                throw ValidationError(fmt::format("config: {}.{} = '{}' is not an integer", section, key, *v));
            }
            out = parsed;
        }
    }

    void boolean(const std::string& section, const std::string& key, bool& out) {
        if (const auto v = text(section, key)) {
            out = parse_choice<bool>(section + "." + key, *v,
                                     {{"true", true}, {"false", false}, {"1", true}, {"0", false},
                                      {"yes", true}, {"no", false}, {"on", true}, {"off", false}});
        }
    }

    void check_unused() const {
        for (const auto& [section, keys] : tree_) {
            if (keys.empty()) throw ValidationError(fmt::format("config: key '{}' outside a section", section));
            for (const auto& [key, value] : keys) {
                if (!used_.count(section + "." + key)) {
                    throw ValidationError(fmt::format("config: unknown key '{}.{}'", section, key));
                }
            }
        }
    }

private:
    const boost::property_tree::ptree& tree_;
    fs::path base_;
    std::set<std::string> used_;
};

std::string hex(const unsigned char* bytes, unsigned n) {
    std::string out;
    out.reserve(n * 2);
    for (unsigned i = 0; i < n; ++i) out += fmt::format("{:02x}", bytes[i]);
    return out;
}

class Sha256 {
public:
    Sha256() : ctx_(EVP_MD_CTX_new()) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_, EVP_sha256(), nullptr) != 1) throw Error("SHA-256 initialisation failed");
    }
    ~Sha256() { EVP_MD_CTX_free(ctx_); }
    Sha256(const Sha256&) = delete;
    Sha256& operator=(const Sha256&) = delete;

    void update(const void* data, std::size_t n) {
        if (EVP_DigestUpdate(ctx_, data, n) != 1) throw Error("SHA-256 update failed");
    }
    std::string hex_digest() {
        unsigned char md[EVP_MAX_MD_SIZE];
        unsigned n = 0;
        if (EVP_DigestFinal_ex(ctx_, md, &n) != 1) throw Error("SHA-256 finalisation failed");
        return hex(md, n);
    }

private:
    EVP_MD_CTX* ctx_;
};

}  // namespace

std::string sha256_text(const std::string& text) {
    Sha256 h;
    h.update(text.data(), text.size());
    return h.hex_digest();
}

std::string sha256_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot read '{}' for hashing", path.string()));
    Sha256 h;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
    return h.hex_digest();
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
    if (!fs::exists(path)) throw IoError(fmt::format("config file not found: '{}'", path.string()));
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw FormatError(fmt::format("config '{}': {}", path.string(), e.message()));
    }
    PipelineConfig c;
    IniReader r(tree, path.parent_path());

    r.path("paths", "manifest", c.manifest);
    if (const auto cal = r.text("paths", "calibration"); cal && boost::algorithm::to_lower_copy(*cal) != "identity") {
        r.path("paths", "calibration", c.calibration);
    }
    r.path("paths", "output", c.output);
    r.path("paths", "palette", c.palette);
    r.path("paths", "runs", c.runs);

    if (auto v = r.text("stages", "calibrate")) {
        c.calibrate = parse_choice<CalibrationMode>(
            "stages.calibrate", *v,
            {{"off", CalibrationMode::off}, {"global", CalibrationMode::global}, {"local", CalibrationMode::local}});
    }
    if (auto v = r.text("stages", "histogram")) {
        c.histogram = parse_choice<HistogramMode>("stages.histogram", *v,
                                                  {{"off", HistogramMode::off},
                                                   {"ndvi", HistogramMode::ndvi},
                                                   {"evi", HistogramMode::evi},
                                                   {"both", HistogramMode::both}});
    }
    if (auto v = r.text("stages", "crf")) {
        c.crf = parse_choice<CrfGuide>("stages.crf", *v,
                                       {{"off", CrfGuide::off},
                                        {"vis", CrfGuide::vis},
                                        {"nir", CrfGuide::nir},
                                        {"ndvi", CrfGuide::ndvi},
                                        {"evi", CrfGuide::evi}});
    }
    if (auto v = r.text("stages", "crf_unaries")) {
        c.crf_unaries = parse_choice<UnarySource>("stages.crf_unaries", *v,
                                                  {{"fused", UnarySource::fused},
                                                   {"calibrated", UnarySource::calibrated}});
    }

    r.number("fusion", "beta", c.fusion.beta);
    r.integer("fusion", "ndvi_bins", c.ndvi_bins);
    r.integer("fusion", "evi_bins", c.evi_bins);
    r.boolean("fusion", "experimental_multi_index", c.experimental_multi_index);

    r.number("crf", "theta_alpha", c.crf_config.theta_alpha);
    r.number("crf", "theta_beta", c.crf_config.theta_beta);
    r.number("crf", "theta_gamma", c.crf_config.theta_gamma);
    r.number("crf", "w_appearance", c.crf_config.w_appearance);
    r.number("crf", "w_smoothness", c.crf_config.w_smoothness);
    r.integer("crf", "iterations", c.crf_config.iterations);
    r.number("crf", "unary_floor", c.crf_config.unary_floor);
    if (auto v = r.text("crf", "filter")) c.crf_config.filter = parse_crf_filter(*v);
    r.boolean("crf", "dump_iterations", c.dump_crf_iterations);

    r.number("evi", "c1", c.evi.c1);
    r.number("evi", "c2", c.evi.c2);

    r.integer("calibration", "reliability_bins", c.reliability_bins);
    if (auto v = r.text("calibration", "lts_image")) {
        c.lts_image = parse_choice<LtsImage>("calibration.lts_image", *v,
                                             {{"vis", LtsImage::vis}, {"vis+nir", LtsImage::vis_nir}});
    }
    r.integer("calibration", "seed", c.lts.seed);
    r.number("calibration", "learning_rate", c.lts.learning_rate);
    r.integer("calibration", "patch_size", c.lts.patch_size);
    r.integer("calibration", "max_epochs", c.lts.max_epochs);
    r.integer("calibration", "patience", c.lts.patience);
    r.number("calibration", "min_delta", c.lts.min_delta);
    r.integer("calibration", "hidden", c.lts.hidden);

    if (auto v = r.text("eval", "classes"); v && !v->empty()) {
        boost::split(c.classes, *v, boost::is_any_of(","));
        for (auto& name : c.classes) boost::trim(name);
    }
    if (auto v = r.text("eval", "absent_classes")) c.absent_classes = parse_absent_class_policy(*v);

    r.check_unused();
    if (c.manifest.empty()) throw ValidationError("config: paths.manifest is required");
    if (c.output.empty()) throw ValidationError("config: paths.output is required");
    if (c.runs.empty()) c.runs = c.output.parent_path();
    c.validate();
    return c;
}

void PipelineConfig::validate() const {
    fusion.validate();
    crf_config.validate();
    evi.validate();
    if (ndvi_bins <= 0 || evi_bins <= 0) throw ValidationError("config: histogram bin counts must be positive");
    if (reliability_bins <= 0) throw ValidationError("config: calibration.reliability_bins must be positive");
    if (histogram == HistogramMode::both && !experimental_multi_index) {
        throw ValidationError(
            "config: histogram = both needs fusion.experimental_multi_index = true");
    }
    if (lts.patch_size <= 0 || lts.max_epochs < 0 || lts.patience <= 0 || !(lts.learning_rate > 0.0) ||
        lts.hidden <= 0) {
        throw ValidationError("config: invalid local calibration options");
    }
}

std::string PipelineConfig::canonical() const {
    std::map<std::string, std::string> kv;
    const auto num = [](double v) { return fmt::format("{:.17g}", v); };
    kv["paths.manifest"] = manifest.generic_string();
    kv["paths.calibration"] = calibration.empty() ? "identity" : calibration.generic_string();
    kv["paths.palette"] = palette.generic_string();
    kv["stages.calibrate"] = to_string(calibrate);
    kv["stages.histogram"] = to_string(histogram);
    kv["stages.crf"] = to_string(crf);
    kv["stages.crf_unaries"] = to_string(crf_unaries);
    kv["fusion.beta"] = num(fusion.beta);
    kv["fusion.ndvi_bins"] = std::to_string(ndvi_bins);
    kv["fusion.evi_bins"] = std::to_string(evi_bins);
    kv["fusion.experimental_multi_index"] = experimental_multi_index ? "true" : "false";
    kv["crf.theta_alpha"] = num(crf_config.theta_alpha);
    kv["crf.theta_beta"] = num(crf_config.theta_beta);
    kv["crf.theta_gamma"] = num(crf_config.theta_gamma);
    kv["crf.w_appearance"] = num(crf_config.w_appearance);
    kv["crf.w_smoothness"] = num(crf_config.w_smoothness);
    kv["crf.iterations"] = std::to_string(crf_config.iterations);
    kv["crf.unary_floor"] = num(crf_config.unary_floor);
    kv["crf.filter"] = to_string(crf_config.filter);
    kv["crf.dump_iterations"] = dump_crf_iterations ? "true" : "false";
    kv["evi.c1"] = num(evi.c1);
    kv["evi.c2"] = num(evi.c2);
    kv["calibration.reliability_bins"] = std::to_string(reliability_bins);
    kv["calibration.lts_image"] = to_string(lts_image);
    kv["calibration.seed"] = std::to_string(lts.seed);
    kv["calibration.learning_rate"] = num(lts.learning_rate);
    kv["calibration.patch_size"] = std::to_string(lts.patch_size);
    kv["calibration.max_epochs"] = std::to_string(lts.max_epochs);
    kv["calibration.patience"] = std::to_string(lts.patience);
    kv["calibration.min_delta"] = num(lts.min_delta);
    kv["calibration.hidden"] = std::to_string(lts.hidden);
    kv["eval.classes"] = boost::join(classes, ",");
    kv["eval.absent_classes"] = to_string(absent_classes);
    std::string out;
    for (const auto& [k, v] : kv) out += fmt::format("{} = {}\n", k, v);
    return out;
}

std::string PipelineConfig::row_name() const {
    if (crf != CrfGuide::off) return "CRF_" + boost::algorithm::to_upper_copy(to_string(crf));
    switch (histogram) {
        case HistogramMode::off: return "baseline";
        case HistogramMode::ndvi: return "NDVI-hist";
        case HistogramMode::evi: return "EVI-hist";
        case HistogramMode::both: return "NDVI+EVI-hist";
    }
    return "?";
}

std::vector<IndexKind> PipelineConfig::required_indices() const {
    std::set<IndexKind> kinds;
    if (histogram == HistogramMode::ndvi || histogram == HistogramMode::both) kinds.insert(IndexKind::ndvi);
    if (histogram == HistogramMode::evi || histogram == HistogramMode::both) kinds.insert(IndexKind::evi);
    if (crf == CrfGuide::ndvi) kinds.insert(IndexKind::ndvi);
    if (crf == CrfGuide::evi) kinds.insert(IndexKind::evi);
    return {kinds.begin(), kinds.end()};
}

}  // namespace visnir
