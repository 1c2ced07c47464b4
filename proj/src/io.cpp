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

#include "visnir/io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <png.h>

#include "visnir/error.hpp"

namespace visnir {

static_assert(std::endian::native == std::endian::little, "tensor I/O assumes a little-endian host");

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_handler(png_structp png, png_const_charp msg) {
    auto* buffer = static_cast<std::string*>(png_get_error_ptr(png));
    if (buffer) *buffer = msg;
    png_longjmp(png, 1);
}

void png_warning_handler(png_structp, png_const_charp) {}

struct PngData {
    int width = 0;
    int height = 0;
    int channels = 0;
    int depth = 0;
    std::vector<std::uint16_t> samples;
};

// libpng uses setjmp for errors, so no object with a non-trivial destructor may
// live in the frame that calls setjmp. The wrappers below keep all C++ state in
// the caller.
bool read_png_raw(std::FILE* fp, PngData& out, std::string& error) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_error_handler, png_warning_handler);
    if (!png) {
        error = "cannot allocate PNG reader";
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        error = "cannot allocate PNG info";
        return false;
    }
    png_bytep image = nullptr;
    png_bytepp rows = nullptr;
    if (setjmp(png_jmpbuf(png))) {
        std::free(rows);
        std::free(image);
        png_destroy_read_struct(&png, &info, nullptr);
        return false;
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const png_uint_32 width = png_get_image_width(png, info);
    const png_uint_32 height = png_get_image_height(png, info);
    const int color_type = png_get_color_type(png, info);
    const int bit_depth = png_get_bit_depth(png, info);
    int channels = 0;
    if (color_type == PNG_COLOR_TYPE_GRAY && (bit_depth == 8 || bit_depth == 16)) {
        channels = 1;
    } else if (color_type == PNG_COLOR_TYPE_RGB && bit_depth == 8) {
        channels = 3;
    } else {
        error = fmt::format("unsupported PNG layout (color type {}, bit depth {}); expected 8/16-bit gray or 8-bit RGB",
                            color_type, bit_depth);
        png_destroy_read_struct(&png, &info, nullptr);
        return false;
    }
    if (png_get_valid(png, info, PNG_INFO_tRNS)) {
        error = "PNG transparency chunks are not supported";
        png_destroy_read_struct(&png, &info, nullptr);
        return false;
    }
    if (bit_depth == 16) png_set_swap(png);
    png_set_interlace_handling(png);
    png_read_update_info(png, info);
    const std::size_t row_bytes = png_get_rowbytes(png, info);
    image = static_cast<png_bytep>(std::malloc(row_bytes * height));
    rows = static_cast<png_bytepp>(std::malloc(sizeof(png_bytep) * height));
    for (png_uint_32 y = 0; y < height; ++y) rows[y] = image + y * row_bytes;
    png_read_image(png, rows);
    out.width = static_cast<int>(width);
    out.height = static_cast<int>(height);
    out.channels = channels;
    out.depth = bit_depth;
    out.samples.resize(static_cast<std::size_t>(width) * height * channels);
    for (png_uint_32 y = 0; y < height; ++y) {
        std::uint16_t* dst = out.samples.data() + static_cast<std::size_t>(y) * width * channels;
        for (std::size_t i = 0; i < static_cast<std::size_t>(width) * channels; ++i) {
            if (bit_depth == 16) {
                std::uint16_t v;
                std::memcpy(&v, rows[y] + 2 * i, 2);
                dst[i] = v;
            } else {
                dst[i] = rows[y][i];
            }
        }
    }
    png_read_end(png, nullptr);
    std::free(rows);
    std::free(image);
    png_destroy_read_struct(&png, &info, nullptr);
    return true;
}

bool write_png_raw(std::FILE* fp, const PngData& in, std::string& error) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_error_handler, png_warning_handler);
    if (!png) {
        error = "cannot allocate PNG writer";
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        error = "cannot allocate PNG info";
        return false;
    }
    png_bytep row_buffer = nullptr;
    if (setjmp(png_jmpbuf(png))) {
        std::free(row_buffer);
        png_destroy_write_struct(&png, &info);
        return false;
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(in.width), static_cast<png_uint_32>(in.height), in.depth,
                 in.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    if (in.depth == 16) png_set_swap(png);
    const std::size_t row_samples = static_cast<std::size_t>(in.width) * in.channels;
    row_buffer = static_cast<png_bytep>(std::malloc(row_samples * (in.depth == 16 ? 2 : 1)));
    for (int y = 0; y < in.height; ++y) {
        const std::uint16_t* src = in.samples.data() + static_cast<std::size_t>(y) * row_samples;
        for (std::size_t i = 0; i < row_samples; ++i) {
            if (in.depth == 16) {
                std::memcpy(row_buffer + 2 * i, &src[i], 2);
            } else {
                row_buffer[i] = static_cast<png_byte>(src[i]);
            }
        }
        png_write_row(png, row_buffer);
    }
    png_write_end(png, nullptr);
    std::free(row_buffer);
    png_destroy_write_struct(&png, &info);
    return true;
}

FilePtr open_file(const fs::path& path, const char* mode) {
    FilePtr fp(std::fopen(path.c_str(), mode));
    if (!fp) {
        throw IoError(fmt::format("cannot open '{}' for {}: {}", path.string(), mode[0] == 'r' ? "reading" : "writing",
                                  std::strerror(errno)));
    }
    return fp;
}

PngData read_png(const fs::path& path) {
    if (!fs::exists(path)) throw IoError(fmt::format("file not found: '{}'", path.string()));
    auto fp = open_file(path, "rb");
    unsigned char signature[8] = {};
    if (std::fread(signature, 1, 8, fp.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0) {
        throw FormatError(fmt::format("'{}': unsupported format (not a PNG file)", path.string()));
    }
    std::rewind(fp.get());
    PngData data;
    std::string error;
    if (!read_png_raw(fp.get(), data, error)) {
        throw FormatError(fmt::format("'{}': {}", path.string(), error));
    }
    return data;
}

void write_png(const PngData& data, const fs::path& path) {
    ensure_parent_dir(path);
    auto fp = open_file(path, "wb");
    std::string error;
    if (!write_png_raw(fp.get(), data, error)) {
        throw IoError(fmt::format("'{}': PNG write failed: {}", path.string(), error));
    }
    if (std::fflush(fp.get()) != 0) throw IoError(fmt::format("'{}': write failed", path.string()));
}

const char* dtype_name(TensorDtype dtype) { return dtype == TensorDtype::f32 ? "f32" : "f64"; }

}  // namespace

void ensure_parent_dir(const fs::path& path) {
    const auto parent = path.parent_path();
    if (parent.empty()) return;
    std::error_code ec;
    fs::create_directories(parent, ec);
    if (ec) throw IoError(fmt::format("cannot create directory '{}': {}", parent.string(), ec.message()));
}

RasterImage load_raster(const fs::path& path) {
    auto data = read_png(path);
    return RasterImage(data.width, data.height, data.channels, data.depth, std::move(data.samples));
}

void save_raster(const RasterImage& image, const fs::path& path) {
    PngData data{image.width(), image.height(), image.channels(), image.depth(),
                 std::vector<std::uint16_t>(image.samples().begin(), image.samples().end())};
    if (image.channels() == 3 && image.depth() == 16) {
        throw FormatError(fmt::format("'{}': 16-bit RGB output is not supported", path.string()));
    }
    write_png(data, path);
}

BinaryMask load_mask_png(const fs::path& path) {
    const auto r = load_raster(path);
    if (r.channels() != 1) throw FormatError(fmt::format("'{}': mask must be single-channel", path.string()));
    std::vector<std::uint8_t> flags(r.pixel_count());
    for (std::size_t i = 0; i < flags.size(); ++i) flags[i] = r.samples()[i] != 0 ? 1 : 0;
    return BinaryMask(r.width(), r.height(), std::move(flags));
}

void save_mask_png(const BinaryMask& mask, const fs::path& path) {
    std::vector<std::uint16_t> samples(mask.flags().size());
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = mask.flags()[i] ? 255 : 0;
    save_raster(RasterImage(mask.width(), mask.height(), 1, 8, std::move(samples)), path);
}

LabelMap load_labelmap_png(const fs::path& path) {
    const auto r = load_raster(path);
    if (r.channels() != 1 || r.depth() != 8) {
        throw FormatError(fmt::format("'{}': label maps must be 8-bit single-channel PNGs", path.string()));
    }
    std::vector<std::uint8_t> labels(r.samples().begin(), r.samples().end());
    return LabelMap(r.width(), r.height(), std::move(labels));
}

RasterImage colorize(const LabelMap& map, const LabelPalette& palette) {
    map.validate(palette);
    RasterImage out(map.width(), map.height(), 3, 8);
    for (int y = 0; y < map.height(); ++y) {
        for (int x = 0; x < map.width(); ++x) {
            const auto l = map.at(y, x);
            if (l == kIgnoreLabel) continue;
            const Rgb c = palette[l].color;
            out.at(y, x, 0) = c.r;
            out.at(y, x, 1) = c.g;
            out.at(y, x, 2) = c.b;
        }
    }
    return out;
}

void save_labelmap_png(const LabelMap& map, const LabelPalette& palette, const fs::path& path,
                       const std::optional<fs::path>& colorized_path) {
    map.validate(palette);
    std::vector<std::uint16_t> samples(map.labels().begin(), map.labels().end());
    save_raster(RasterImage(map.width(), map.height(), 1, 8, std::move(samples)), path);
    if (colorized_path) save_raster(colorize(map, palette), *colorized_path);
}

Volume load_volume(const fs::path& path) {
    if (!fs::exists(path)) throw IoError(fmt::format("file not found: '{}'", path.string()));
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path.string()));
    char magic[4] = {};
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "VNF1", 4) != 0) {
        throw FormatError(fmt::format("'{}': missing VNF1 magic", path.string()));
    }
    std::string header;
    if (!std::getline(in, header) || header.size() > 256) {
        throw FormatError(fmt::format("'{}': malformed tensor header", path.string()));
    }
    std::map<std::string, std::string> fields;
    std::vector<std::string> parts;
    boost::split(parts, header, boost::is_any_of(";"));
    for (const auto& part : parts) {
        const auto eq = part.find('=');
        if (eq == std::string::npos) {
            throw FormatError(fmt::format("'{}': malformed header field '{}'", path.string(), part));
        }
        fields[part.substr(0, eq)] = part.substr(eq + 1);
    }
    if (!fields.count("dtype") || !fields.count("order") || !fields.count("shape")) {
        throw FormatError(fmt::format("'{}': header must carry dtype, order and shape", path.string()));
    }
    TensorDtype dtype;
    if (fields["dtype"] == "f32") {
        dtype = TensorDtype::f32;
    } else if (fields["dtype"] == "f64") {
        dtype = TensorDtype::f64;
    } else {
        throw FormatError(fmt::format("'{}': unsupported dtype '{}'", path.string(), fields["dtype"]));
    }
    if (fields["order"] != "le") {
        throw FormatError(fmt::format("'{}': unsupported byte order '{}'", path.string(), fields["order"]));
    }
    std::vector<std::string> dims;
    boost::split(dims, fields["shape"], boost::is_any_of(","));
    if (dims.size() != 3) {
        throw FormatError(fmt::format("'{}': expected rank 3 tensor, got rank {}", path.string(), dims.size()));
    }
    std::array<long, 3> shape{};
    for (int i = 0; i < 3; ++i) {
        char* end = nullptr;
        shape[i] = std::strtol(dims[i].c_str(), &end, 10);
        if (dims[i].empty() || *end != '\0' || shape[i] <= 0 || shape[i] > (1L << 24)) {
            throw FormatError(fmt::format("'{}': invalid shape '{}'", path.string(), fields["shape"]));
        }
    }
    const std::size_t count = static_cast<std::size_t>(shape[0]) * shape[1] * shape[2];
    std::vector<double> values(count);
    if (dtype == TensorDtype::f32) {
        std::vector<float> raw(count);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(count * sizeof(float)));
        if (!in) throw FormatError(fmt::format("'{}': truncated payload", path.string()));
        std::copy(raw.begin(), raw.end(), values.begin());
    } else {
        in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(count * sizeof(double)));
        if (!in) throw FormatError(fmt::format("'{}': truncated payload", path.string()));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError(fmt::format("'{}': trailing bytes after payload", path.string()));
    }
    return Volume(static_cast<int>(shape[1]), static_cast<int>(shape[0]), static_cast<int>(shape[2]),
                  std::move(values));
}

LogitVolume load_tensor(const fs::path& path) {
    Volume v = load_volume(path);
    const auto values = v.values();
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw FormatError(fmt::format("'{}': non-finite value at flat index {}", path.string(), i));
        }
    }
    return LogitVolume(std::move(v));
}

FloatGrid load_grid(const fs::path& path) {
    Volume v = load_volume(path);
    if (v.channels() != 1) {
        throw FormatError(fmt::format("'{}': expected a single-channel grid, got {} channels", path.string(),
                                      v.channels()));
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v.values()[i])) {
            throw FormatError(fmt::format("'{}': non-finite value at flat index {}", path.string(), i));
        }
    }
    return FloatGrid(v.width(), v.height(), std::vector<double>(v.values().begin(), v.values().end()));
}

void save_tensor(const Volume& volume, const fs::path& path, TensorDtype dtype) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    const std::string header = fmt::format("VNF1dtype={};order=le;shape={},{},{}\n", dtype_name(dtype),
                                           volume.height(), volume.width(), volume.channels());
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    const auto values = volume.values();
    if (dtype == TensorDtype::f32) {
        std::vector<float> raw(values.begin(), values.end());
        out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * sizeof(float)));
    } else {
        out.write(reinterpret_cast<const char*>(values.data()),
                  static_cast<std::streamsize>(values.size() * sizeof(double)));
    }
    out.flush();
    if (!out) throw IoError(fmt::format("'{}': write failed", path.string()));
}

void save_tensor(const FloatGrid& grid, const fs::path& path, TensorDtype dtype) {
    save_tensor(Volume(grid.width(), grid.height(), 1, std::vector<double>(grid.values().begin(), grid.values().end())),
                path, dtype);
}

std::string to_string(Split split) {
    switch (split) {
        case Split::train: return "train";
        case Split::val: return "val";
        case Split::test: return "test";
    }
    return "test";
}

Split parse_split(const std::string& text) {
    if (text == "train") return Split::train;
    if (text == "val") return Split::val;
    if (text == "test") return Split::test;
    throw ValidationError(fmt::format("unknown split '{}' (expected train, val or test)", text));
}

DatasetManifest::DatasetManifest(std::vector<SampleRecord> samples) : samples_(std::move(samples)) {
    std::set<std::string> ids;
    for (const auto& s : samples_) {
        if (s.id.empty()) throw ValidationError("manifest: empty sample id");
        if (!ids.insert(s.id).second) throw ValidationError(fmt::format("manifest: duplicate sample id '{}'", s.id));
    }
}

std::vector<SampleRecord> DatasetManifest::split(Split which) const {
    std::vector<SampleRecord> out;
    for (const auto& s : samples_) {
        if (s.split == which) out.push_back(s);
    }
    return out;
}

std::map<Split, std::size_t> DatasetManifest::split_counts() const {
    std::map<Split, std::size_t> counts;
    for (const auto& s : samples_) ++counts[s.split];
    return counts;
}

DatasetManifest load_manifest(const fs::path& path) {
    if (!fs::exists(path)) throw IoError(fmt::format("manifest not found: '{}'", path.string()));
    boost::property_tree::ptree tree;
    try {
        boost::property_tree::ini_parser::read_ini(path.string(), tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        // Duplicate sections surface here as well.
        throw ValidationError(fmt::format("manifest '{}': {}", path.string(), e.message()));
    }
    const fs::path base = path.parent_path();
    std::vector<SampleRecord> samples;
    for (const auto& [id, section] : tree) {
        if (section.empty()) {
            throw FormatError(fmt::format("manifest '{}': key '{}' outside a sample section", path.string(), id));
        }
        SampleRecord rec;
        rec.id = id;
        auto field = [&](const char* key) -> fs::path {
            const auto value = section.get_optional<std::string>(key);
            if (!value || value->empty()) {
                throw ValidationError(fmt::format("manifest sample '{}': missing field '{}'", id, key));
            }
            fs::path p(*value);
            if (p.is_relative()) p = base / p;
            if (!fs::exists(p)) {
                throw ValidationError(
                    fmt::format("manifest sample '{}': {} file '{}' does not exist", id, key, p.string()));
            }
            return p;
        };
        rec.vis = field("vis");
        rec.nir = field("nir");
        rec.label = field("label");
        rec.logits = field("logits");
        rec.split = parse_split(section.get<std::string>("split", "test"));
        samples.push_back(std::move(rec));
    }
    return DatasetManifest(std::move(samples));
}

void save_manifest(const DatasetManifest& manifest, const fs::path& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    const fs::path base = fs::absolute(path).parent_path();
    auto rel = [&](const fs::path& p) { return fs::absolute(p).lexically_relative(base).generic_string(); };
    for (const auto& s : manifest.samples()) {
        out << '[' << s.id << "]\n"
            << "vis = " << rel(s.vis) << '\n'
            << "nir = " << rel(s.nir) << '\n'
            << "label = " << rel(s.label) << '\n'
            << "logits = " << rel(s.logits) << '\n'
            << "split = " << to_string(s.split) << "\n\n";
    }
    if (!out) throw IoError(fmt::format("'{}': write failed", path.string()));
}

LabelPalette load_palette(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot open palette '{}'", path.string()));
    std::vector<LabelPalette::Entry> entries;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        boost::trim(line);
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cols;
        boost::split(cols, line, boost::is_any_of(","));
        for (auto& c : cols) boost::trim(c);
        if (line_no == 1 && cols.size() == 4 && cols[0] == "name") continue;
        if (cols.size() != 4) {
            throw FormatError(fmt::format("palette '{}' line {}: expected name,r,g,b", path.string(), line_no));
        }
        auto channel = [&](const std::string& s) {
            char* end = nullptr;
            const long v = std::strtol(s.c_str(), &end, 10);
            if (s.empty() || *end != '\0' || v < 0 || v > 255) {
                throw FormatError(
                    fmt::format("palette '{}' line {}: invalid color component '{}'", path.string(), line_no, s));
            }
            return static_cast<std::uint8_t>(v);
        };
        entries.push_back({cols[0], {channel(cols[1]), channel(cols[2]), channel(cols[3])}});
    }
    return LabelPalette(std::move(entries));
}

void save_palette(const LabelPalette& palette, const fs::path& path) {
    ensure_parent_dir(path);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path.string()));
    out << "name,r,g,b\n";
    for (const auto& e : palette.entries()) {
        out << e.name << ',' << int(e.color.r) << ',' << int(e.color.g) << ',' << int(e.color.b) << '\n';
    }
}

}  // namespace visnir
