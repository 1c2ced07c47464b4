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

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "visnir/types.hpp"

namespace visnir {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// PNG rasters

/// Reads an 8/16-bit grayscale or 8-bit RGB PNG. Anything else (palette,
/// alpha, 16-bit color, non-PNG files) raises FormatError naming the path.
RasterImage load_raster(const fs::path& path);
void save_raster(const RasterImage& image, const fs::path& path);

BinaryMask load_mask_png(const fs::path& path);
/// Writes valid pixels as 255, invalid as 0.
void save_mask_png(const BinaryMask& mask, const fs::path& path);

LabelMap load_labelmap_png(const fs::path& path);
/// Writes the raw label PNG and, when colorized_path is given, an RGB
/// companion using the palette colors (ignore pixels are black).
void save_labelmap_png(const LabelMap& map, const LabelPalette& palette, const fs::path& path,
                       const std::optional<fs::path>& colorized_path = std::nullopt);
RasterImage colorize(const LabelMap& map, const LabelPalette& palette);

// ---------------------------------------------------------------------------
// Tensor files
//
// Layout: the 4 magic bytes "VNF1", an ASCII header line
// "dtype=f32;order=le;shape=H,W,K\n", then H*W*K little-endian samples in
// row-major (y, x, k) order. dtype=f64 is accepted and written on request
// for lossless storage of doubles.

enum class TensorDtype { f32, f64 };

Volume load_volume(const fs::path& path);
/// load_volume plus the finiteness contract of LogitVolume; the error names
/// the first non-finite flat index.
LogitVolume load_tensor(const fs::path& path);
/// Loads a (H, W, 1) tensor.
FloatGrid load_grid(const fs::path& path);

void save_tensor(const Volume& volume, const fs::path& path, TensorDtype dtype = TensorDtype::f32);
void save_tensor(const FloatGrid& grid, const fs::path& path, TensorDtype dtype = TensorDtype::f32);

// ---------------------------------------------------------------------------
// Dataset manifest
//
// INI text, one section per sample:
//   [sample-id]
//   vis = vis/0001.png
//   nir = nir/0001.png
//   label = labels/0001.png
//   logits = logits/0001.vnf
//   split = val
// Relative paths resolve against the manifest's directory.

enum class Split { train, val, test };

std::string to_string(Split split);
Split parse_split(const std::string& text);

struct SampleRecord {
    std::string id;
    fs::path vis;
    fs::path nir;
    fs::path label;
    fs::path logits;
    Split split = Split::test;
};

class DatasetManifest {
public:
    DatasetManifest() = default;
    /// Throws ValidationError on duplicate ids.
    explicit DatasetManifest(std::vector<SampleRecord> samples);

    const std::vector<SampleRecord>& samples() const { return samples_; }
    std::size_t size() const { return samples_.size(); }
    std::vector<SampleRecord> split(Split which) const;
    std::map<Split, std::size_t> split_counts() const;

private:
    std::vector<SampleRecord> samples_;
};

/// Parses and validates a manifest; every referenced file must exist.
DatasetManifest load_manifest(const fs::path& path);
void save_manifest(const DatasetManifest& manifest, const fs::path& path);

// ---------------------------------------------------------------------------
// Palette files: CSV rows "name,r,g,b", optional header "name,r,g,b".

LabelPalette load_palette(const fs::path& path);
void save_palette(const LabelPalette& palette, const fs::path& path);

/// Creates parent directories and throws IoError when the file cannot be
/// opened for writing.
void ensure_parent_dir(const fs::path& path);

}  // namespace visnir
