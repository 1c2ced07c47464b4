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

#include "visnir/crf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <unordered_map>

#include <boost/algorithm/string/case_conv.hpp>
#include <boost/functional/hash.hpp>
#include <fmt/format.h>

#include "visnir/error.hpp"

namespace visnir {

std::string to_string(CrfFilter filter) { return filter == CrfFilter::truncated ? "truncated" : "lattice"; }

CrfFilter parse_crf_filter(const std::string& text) {
    const auto lower = boost::algorithm::to_lower_copy(text);
    if (lower == "truncated") return CrfFilter::truncated;
    if (lower == "lattice") return CrfFilter::lattice;
    throw ValidationError(fmt::format("unknown CRF filter '{}' (expected truncated or lattice)", text));
}

void CrfConfig::validate() const {
    const auto positive = [](double v) { return v > 0.0 && std::isfinite(v); };
    if (!positive(theta_alpha) || !positive(theta_beta) || !positive(theta_gamma)) {
        throw ValidationError(fmt::format("CRF kernel widths must be positive (alpha={}, beta={}, gamma={})",
                                          theta_alpha, theta_beta, theta_gamma));
    }
    if (!(w_appearance >= 0.0) || !(w_smoothness >= 0.0) || !std::isfinite(w_appearance) ||
        !std::isfinite(w_smoothness)) {
        throw ValidationError(fmt::format("CRF kernel weights must be finite and >= 0 (appearance={}, smoothness={})",
                                          w_appearance, w_smoothness));
    }
    if (iterations < 0) throw ValidationError(fmt::format("CRF iterations must be >= 0, got {}", iterations));
    if (!(unary_floor > 0.0) || !(unary_floor < 1.0)) throw ValidationError("CRF unary floor must lie in (0, 1)");
    if (!(truncation > 0.0) || !(truncation < 1.0)) throw ValidationError("CRF truncation must lie in (0, 1)");
}

GuidanceImage::GuidanceImage(int width, int height, int channels, std::vector<double> intensities)
    : width_(width), height_(height), channels_(channels), intensities_(std::move(intensities)) {
    if (width < 0 || height < 0 || (channels != 1 && channels != 3)) {
        throw ValidationError(fmt::format("guidance image needs 1 or 3 channels, got {}", channels));
    }
    if (intensities_.size() != pixel_count() * static_cast<std::size_t>(channels)) {
        throw ValidationError("guidance image buffer size does not match its shape");
    }
    if (!std::all_of(intensities_.begin(), intensities_.end(), [](double v) { return std::isfinite(v); })) {
        throw ValidationError("guidance image contains non-finite values");
    }
}

GuidanceImage GuidanceImage::from_raster(const RasterImage& image) {
    const double scale = 255.0 / image.max_value();
    std::vector<double> v(image.samples().size());
    std::transform(image.samples().begin(), image.samples().end(), v.begin(),
                   [scale](std::uint16_t s) { return s * scale; });
    return GuidanceImage(image.width(), image.height(), image.channels(), std::move(v));
}

GuidanceImage GuidanceImage::from_index(const IndexImage& index) {
    const double scale = 255.0 / (index.upper - index.lower);
    std::vector<double> v(index.grid.size(), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (index.valid.valid(i)) v[i] = std::clamp((index.grid[i] - index.lower) * scale, 0.0, 255.0);
    }
    return GuidanceImage(index.grid.width(), index.grid.height(), 1, std::move(v));
}

// ---------------------------------------------------------------------------
// Permutohedral lattice

namespace {

// Open-addressing table from integer lattice keys (d coordinates; the last
// of the d + 1 elevated coordinates is implied) to dense vertex indices.
class LatticeTable {
public:
    explicit LatticeTable(int dims) : dims_(dims) { table_.assign(1024, -1); }

    int size() const { return static_cast<int>(keys_.size() / dims_); }
    const int* key(int i) const { return keys_.data() + static_cast<std::size_t>(i) * dims_; }

    int find(const int* k) const {
        std::size_t h = hash(k) & (table_.size() - 1);
        while (true) {
            const int e = table_[h];
            if (e < 0) return -1;
            if (std::equal(k, k + dims_, key(e))) return e;
            h = (h + 1) & (table_.size() - 1);
        }
    }

    int insert(const int* k) {
        if (2 * (size() + 1) > static_cast<int>(table_.size())) grow();
        std::size_t h = hash(k) & (table_.size() - 1);
        while (true) {
            const int e = table_[h];
            if (e < 0) {
                table_[h] = size();
                keys_.insert(keys_.end(), k, k + dims_);
                return table_[h];
            }
            if (std::equal(k, k + dims_, key(e))) return e;
            h = (h + 1) & (table_.size() - 1);
        }
    }

private:
    std::size_t hash(const int* k) const {
        std::size_t h = 0;
        for (int i = 0; i < dims_; ++i) {
            h += static_cast<std::size_t>(static_cast<std::uint32_t>(k[i]));
            h *= 2531011u;
        }
        return h ^ (h >> 29);
    }

    void grow() {
        std::vector<int> bigger(table_.size() * 2, -1);
        for (int e = 0; e < size(); ++e) {
            std::size_t h = hash(key(e)) & (bigger.size() - 1);
            while (bigger[h] >= 0) h = (h + 1) & (bigger.size() - 1);
            bigger[h] = e;
        }
        table_.swap(bigger);
    }

    int dims_;
    std::vector<int> keys_;
    std::vector<int> table_;
};

}  // namespace

struct PermutohedralLattice::Impl {
    int dims = 0;
    std::size_t n = 0;
    int vertices = 0;
    // Per point, d + 1 enclosing vertices and barycentric weights.
    std::vector<int> offset;
    std::vector<double> weight;
    // Per direction and vertex, the two neighbours along that direction (-1 if absent).
    std::vector<int> neighbours;
    double gain = 1.0;

    void splat_blur_slice(std::span<const double> values, std::size_t channels, std::span<double> out) const;
    std::vector<double> blur(std::vector<double> cur, std::size_t channels) const;
    double self_response(std::size_t p) const;
};

PermutohedralLattice::PermutohedralLattice(std::span<const double> features, int dims)
    : impl_(std::make_unique<Impl>()) {
    if (dims <= 0) throw ValidationError("lattice needs at least one feature dimension");
    if (features.size() % static_cast<std::size_t>(dims) != 0) {
        throw ValidationError("feature buffer is not a multiple of the dimension");
    }
    const int d = dims;
    const std::size_t n = features.size() / d;
    auto& m = *impl_;
    m.dims = d;
    m.n = n;
    m.offset.resize(n * (d + 1));
    m.weight.resize(n * (d + 1));

    // Scaling so that the lattice blur matches a unit-variance Gaussian.
    std::vector<double> scale(d);
    const double inv_std = std::sqrt(2.0 / 3.0) * (d + 1);
    for (int i = 0; i < d; ++i) scale[i] = inv_std / std::sqrt((i + 1.0) * (i + 2.0));

    std::vector<int> canonical((d + 1) * (d + 1));
    for (int i = 0; i <= d; ++i) {
        for (int j = 0; j <= d - i; ++j) canonical[i * (d + 1) + j] = i;
        for (int j = d - i + 1; j <= d; ++j) canonical[i * (d + 1) + j] = i - (d + 1);
    }

    LatticeTable table(d);
    std::vector<double> elevated(d + 1);
    std::vector<int> rem0(d + 1);
    std::vector<int> rank(d + 1);
    std::vector<double> bary(d + 2);
    std::vector<int> key(d);
    const double down = 1.0 / (d + 1);

    for (std::size_t p = 0; p < n; ++p) {
        const double* f = features.data() + p * d;
        double sm = 0.0;
        for (int j = d; j > 0; --j) {
            const double cf = f[j - 1] * scale[j - 1];
            elevated[j] = sm - j * cf;
            sm += cf;
        }
        elevated[0] = sm;

        // Nearest remainder-0 point.
        int sum = 0;
        for (int i = 0; i <= d; ++i) {
            const double v = down * elevated[i];
            const double up = std::ceil(v) * (d + 1);
            const double dn = std::floor(v) * (d + 1);
            rem0[i] = static_cast<int>(up - elevated[i] < elevated[i] - dn ? up : dn);
            sum += rem0[i];
        }
        sum /= d + 1;

        std::fill(rank.begin(), rank.end(), 0);
        for (int i = 0; i < d; ++i) {
            const double di = elevated[i] - rem0[i];
            for (int j = i + 1; j <= d; ++j) {
                if (di < elevated[j] - rem0[j]) {
                    ++rank[i];
                } else {
                    ++rank[j];
                }
            }
        }
        if (sum > 0) {
            for (int i = 0; i <= d; ++i) {
                if (rank[i] >= d + 1 - sum) {
                    rem0[i] -= d + 1;
                    rank[i] += sum - (d + 1);
                } else {
                    rank[i] += sum;
                }
            }
        } else if (sum < 0) {
            for (int i = 0; i <= d; ++i) {
                if (rank[i] < -sum) {
                    rem0[i] += d + 1;
                    rank[i] += (d + 1) + sum;
                } else {
                    rank[i] += sum;
                }
            }
        }

        std::fill(bary.begin(), bary.end(), 0.0);
        for (int i = 0; i <= d; ++i) {
            const double v = (elevated[i] - rem0[i]) * down;
            bary[d - rank[i]] += v;
            bary[d + 1 - rank[i]] -= v;
        }
        bary[0] += 1.0 + bary[d + 1];

        for (int r = 0; r <= d; ++r) {
            for (int i = 0; i < d; ++i) key[i] = rem0[i] + canonical[r * (d + 1) + rank[i]];
            m.offset[p * (d + 1) + r] = table.insert(key.data());
            m.weight[p * (d + 1) + r] = bary[r];
        }
    }

    m.vertices = table.size();
    m.neighbours.resize(static_cast<std::size_t>(d + 1) * m.vertices * 2);
    std::vector<int> n1(d);
    std::vector<int> n2(d);
    for (int j = 0; j <= d; ++j) {
        for (int v = 0; v < m.vertices; ++v) {
            const int* k = table.key(v);
            for (int i = 0; i < d; ++i) {
                n1[i] = k[i] - 1;
                n2[i] = k[i] + 1;
            }
            if (j < d) {
                n1[j] = k[j] + d;
                n2[j] = k[j] - d;
            }
            const std::size_t at = (static_cast<std::size_t>(j) * m.vertices + v) * 2;
            m.neighbours[at] = table.find(n1.data());
            m.neighbours[at + 1] = table.find(n2.data());
        }
    }

    // The raw splat-blur-slice response at zero distance is well below 1 and
    // depends on d. Rescale so that evenly spaced probe impulses see a mean
    // self-response of 1.
    const std::size_t probes = std::min<std::size_t>(n, 64);
    double self = 0.0;
    for (std::size_t q = 0; q < probes; ++q) self += m.self_response(q * n / probes);
    if (self > 0.0) m.gain = static_cast<double>(probes) / self;
}

PermutohedralLattice::~PermutohedralLattice() = default;
PermutohedralLattice::PermutohedralLattice(PermutohedralLattice&&) noexcept = default;
PermutohedralLattice& PermutohedralLattice::operator=(PermutohedralLattice&&) noexcept = default;

std::size_t PermutohedralLattice::points() const { return impl_->n; }
std::size_t PermutohedralLattice::lattice_points() const { return static_cast<std::size_t>(impl_->vertices); }

void PermutohedralLattice::filter(std::span<const double> values, int channels, std::span<double> out) const {
    const auto& m = *impl_;
    const std::size_t c = static_cast<std::size_t>(channels);
    if (channels <= 0 || values.size() != m.n * c || out.size() != m.n * c) {
        throw ValidationError("lattice filter: value buffer does not match the point count");
    }
    m.splat_blur_slice(values, c, out);
    for (double& v : out) v *= m.gain;
}

std::vector<double> PermutohedralLattice::Impl::blur(std::vector<double> cur, std::size_t c) const {
    std::vector<double> next(cur.size(), 0.0);
    for (int j = 0; j <= dims; ++j) {
        for (int v = 0; v < vertices; ++v) {
            const std::size_t at = (static_cast<std::size_t>(j) * vertices + v) * 2;
            const std::size_t o = (static_cast<std::size_t>(v) + 1) * c;
            const std::size_t a = static_cast<std::size_t>(neighbours[at] + 1) * c;
            const std::size_t b = static_cast<std::size_t>(neighbours[at + 1] + 1) * c;
            for (std::size_t k = 0; k < c; ++k) next[o + k] = cur[o + k] + 0.5 * (cur[a + k] + cur[b + k]);
        }
        cur.swap(next);
    }
    return cur;
}

void PermutohedralLattice::Impl::splat_blur_slice(std::span<const double> values, std::size_t c,
                                                 std::span<double> out) const {
    const std::size_t r1 = static_cast<std::size_t>(dims) + 1;
    // Slot 0 is a zero vertex standing in for absent neighbours.
    std::vector<double> cur((static_cast<std::size_t>(vertices) + 1) * c, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t r = 0; r < r1; ++r) {
            const std::size_t o = (static_cast<std::size_t>(offset[p * r1 + r]) + 1) * c;
            for (std::size_t k = 0; k < c; ++k) cur[o + k] += weight[p * r1 + r] * values[p * c + k];
        }
    }
    cur = blur(std::move(cur), c);
    const double alpha = 1.0 / (1.0 + std::pow(2.0, -dims));
    for (std::size_t p = 0; p < n; ++p) {
        for (std::size_t k = 0; k < c; ++k) out[p * c + k] = 0.0;
        for (std::size_t r = 0; r < r1; ++r) {
            const std::size_t o = (static_cast<std::size_t>(offset[p * r1 + r]) + 1) * c;
            for (std::size_t k = 0; k < c; ++k) out[p * c + k] += weight[p * r1 + r] * alpha * cur[o + k];
        }
    }
}

double PermutohedralLattice::Impl::self_response(std::size_t p) const {
    const std::size_t r1 = static_cast<std::size_t>(dims) + 1;
    std::vector<double> cur(static_cast<std::size_t>(vertices) + 1, 0.0);
    for (std::size_t r = 0; r < r1; ++r) cur[static_cast<std::size_t>(offset[p * r1 + r]) + 1] += weight[p * r1 + r];
    cur = blur(std::move(cur), 1);
    const double alpha = 1.0 / (1.0 + std::pow(2.0, -dims));
    double out = 0.0;
    for (std::size_t r = 0; r < r1; ++r) {
        out += weight[p * r1 + r] * alpha * cur[static_cast<std::size_t>(offset[p * r1 + r]) + 1];
    }
    return out;
}

namespace {

std::vector<double> truncated_gaussian_filter(std::span<const double> features, std::size_t d,
                                              std::span<const double> values, std::size_t c, double truncation) {
    const std::size_t n = features.size() / d;
    const double cutoff2 = -2.0 * std::log(truncation);
    const double cell = std::sqrt(cutoff2);
    using Key = std::vector<long long>;
    std::unordered_map<Key, std::vector<std::size_t>, boost::hash<Key>> cells;
    std::vector<Key> keys(n, Key(d));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t t = 0; t < d; ++t) {
            keys[i][t] = static_cast<long long>(std::floor(features[i * d + t] / cell));
        }
        cells[keys[i]].push_back(i);
    }
    // Neighbouring cells by offset enumeration, unless there are fewer
    // occupied cells than offsets.
    std::size_t offsets = 1;
    for (std::size_t t = 0; t < d && offsets <= cells.size(); ++t) offsets *= 3;
    const bool scan_all = offsets > cells.size();

    std::vector<double> out(n * c, 0.0);
    auto accumulate = [&](std::size_t i, const std::vector<std::size_t>& members) {
        for (std::size_t j : members) {
            double dist = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                const double diff = features[i * d + t] - features[j * d + t];
                dist += diff * diff;
            }
            if (dist > cutoff2) continue;
            const double w = std::exp(-0.5 * dist);
            for (std::size_t k = 0; k < c; ++k) out[i * c + k] += w * values[j * c + k];
        }
    };
    Key probe(d);
    for (std::size_t i = 0; i < n; ++i) {
        if (scan_all) {
            for (const auto& [key, members] : cells) {
                bool near = true;
                for (std::size_t t = 0; t < d && near; ++t) near = std::llabs(key[t] - keys[i][t]) <= 1;
                if (near) accumulate(i, members);
            }
            continue;
        }
        for (std::size_t o = 0; o < offsets; ++o) {
            std::size_t rest = o;
            for (std::size_t t = 0; t < d; ++t) {
                probe[t] = keys[i][t] + static_cast<long long>(rest % 3) - 1;
                rest /= 3;
            }
            const auto it = cells.find(probe);
            if (it != cells.end()) accumulate(i, it->second);
        }
    }
    return out;
}

}  // namespace

std::vector<double> gaussian_filter_bank(std::span<const double> features, int dims, std::span<const double> values,
                                         int channels, CrfFilter method, double truncation) {
    if (dims <= 0 || channels <= 0 || features.size() % static_cast<std::size_t>(dims) != 0 ||
        values.size() != features.size() / static_cast<std::size_t>(dims) * static_cast<std::size_t>(channels)) {
        throw ValidationError("Gaussian filter: feature and value buffers do not match");
    }
    if (method == CrfFilter::truncated) {
        if (!(truncation > 0.0) || !(truncation < 1.0)) throw ValidationError("truncation must lie in (0, 1)");
        return truncated_gaussian_filter(features, static_cast<std::size_t>(dims), values,
                                         static_cast<std::size_t>(channels), truncation);
    }
    PermutohedralLattice lattice(features, dims);
    std::vector<double> out(values.size());
    lattice.filter(values, channels, out);
    return out;
}

std::vector<double> exact_gaussian_filter(std::span<const double> features, int dims, std::span<const double> values,
                                          int channels) {
    const std::size_t d = static_cast<std::size_t>(dims);
    const std::size_t c = static_cast<std::size_t>(channels);
    if (dims <= 0 || channels <= 0 || features.size() % d != 0 || values.size() != features.size() / d * c) {
        throw ValidationError("exact filter: feature and value buffers do not match");
    }
    const std::size_t n = features.size() / d;
    std::vector<double> out(n * c, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double dist = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                const double diff = features[i * d + t] - features[j * d + t];
                dist += diff * diff;
            }
            const double w = std::exp(-0.5 * dist);
            for (std::size_t k = 0; k < c; ++k) out[i * c + k] += w * values[j * c + k];
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mean field

namespace {

void check_inputs(const ProbabilityVolume& unaries, const GuidanceImage& guide, const CrfConfig& config) {
    config.validate();
    if (guide.width() != unaries.width() || guide.height() != unaries.height()) {
        throw ValidationError(fmt::format("guidance image ({}x{}) and unaries ({}x{}) differ in size", guide.width(),
                                          guide.height(), unaries.width(), unaries.height()));
    }
}

bool is_identity(const CrfConfig& config) {
    return config.iterations == 0 || (config.w_appearance == 0.0 && config.w_smoothness == 0.0);
}

int truncation_radius(double theta, double eps) {
    return static_cast<int>(std::floor(theta * std::sqrt(-2.0 * std::log(eps))));
}

// Pairwise sums for one kernel, self term included: out = sum_j k(i, j) Q_j.
class KernelSum {
public:
    virtual ~KernelSum() = default;
    virtual void apply(std::span<const double> q, std::span<double> out) const = 0;
};

// Spatial Gaussian as two truncated 1-D passes.
class SeparableSpatial final : public KernelSum {
public:
    SeparableSpatial(int width, int height, int classes, double theta, double eps)
        : w_(width), h_(height), k_(classes) {
        const int r = truncation_radius(theta, eps);
        taps_.resize(static_cast<std::size_t>(r) + 1);
        for (int t = 0; t <= r; ++t) taps_[t] = std::exp(-0.5 * (t * t) / (theta * theta));
    }

    void apply(std::span<const double> q, std::span<double> out) const override {
        const int r = static_cast<int>(taps_.size()) - 1;
        std::vector<double> tmp(q.size(), 0.0);
        for (int y = 0; y < h_; ++y) {
            for (int x = 0; x < w_; ++x) {
                double* dst = tmp.data() + idx(y, x);
                for (int xx = std::max(0, x - r); xx <= std::min(w_ - 1, x + r); ++xx) {
                    const double g = taps_[static_cast<std::size_t>(std::abs(xx - x))];
                    const double* src = q.data() + idx(y, xx);
                    for (int k = 0; k < k_; ++k) dst[k] += g * src[k];
                }
            }
        }
        std::fill(out.begin(), out.end(), 0.0);
        for (int y = 0; y < h_; ++y) {
            for (int yy = std::max(0, y - r); yy <= std::min(h_ - 1, y + r); ++yy) {
                const double g = taps_[static_cast<std::size_t>(std::abs(yy - y))];
                for (int x = 0; x < w_; ++x) {
                    double* dst = out.data() + idx(y, x);
                    const double* src = tmp.data() + idx(yy, x);
                    for (int k = 0; k < k_; ++k) dst[k] += g * src[k];
                }
            }
        }
    }

private:
    std::size_t idx(int y, int x) const { return (static_cast<std::size_t>(y) * w_ + x) * k_; }

    int w_, h_, k_;
    std::vector<double> taps_;
};

// Bilateral Gaussian summed exactly inside the window where the spatial
// factor is above eps.
class WindowedBilateral final : public KernelSum {
public:
    WindowedBilateral(const GuidanceImage& guide, int classes, double theta_s, double theta_r, double eps)
        : guide_(guide), k_(classes), inv_2r2_(0.5 / (theta_r * theta_r)) {
        r_ = truncation_radius(theta_s, eps);
        cutoff_ = -std::log(eps);
        // Half the window; the kernel is symmetric so each pair is visited once.
        for (int dy = 0; dy <= r_; ++dy) {
            for (int dx = dy == 0 ? 1 : -r_; dx <= r_; ++dx) {
                const double e = 0.5 * (dx * dx + dy * dy) / (theta_s * theta_s);
                if (e <= cutoff_) offsets_.push_back({dx, dy, e});
            }
        }
    }

    void apply(std::span<const double> q, std::span<double> out) const override {
        const int w = guide_.width();
        const int h = guide_.height();
        const int c = guide_.channels();
        // Self term.
        std::copy(q.begin(), q.end(), out.begin());
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * w + x;
                double* dst_i = out.data() + i * k_;
                const double* src_i = q.data() + i * k_;
                for (const auto& o : offsets_) {
                    const int xx = x + o.dx;
                    const int yy = y + o.dy;
                    if (xx < 0 || yy >= h || xx >= w) continue;
                    const std::size_t j = static_cast<std::size_t>(yy) * w + xx;
                    double e = o.spatial;
                    for (int ch = 0; ch < c; ++ch) {
                        const double diff = guide_.at(i, ch) - guide_.at(j, ch);
                        e += diff * diff * inv_2r2_;
                    }
                    if (e > cutoff_) continue;
                    const double g = std::exp(-e);
                    double* dst_j = out.data() + j * k_;
                    const double* src_j = q.data() + j * k_;
                    for (int k = 0; k < k_; ++k) {
                        dst_i[k] += g * src_j[k];
                        dst_j[k] += g * src_i[k];
                    }
                }
            }
        }
    }

private:
    struct Offset {
        int dx;
        int dy;
        double spatial;
    };

    const GuidanceImage& guide_;
    int k_;
    int r_ = 0;
    double inv_2r2_;
    double cutoff_ = 0.0;
    std::vector<Offset> offsets_;
};

class LatticeKernel final : public KernelSum {
public:
    LatticeKernel(std::span<const double> features, int dims, int classes)
        : lattice_(features, dims), k_(classes) {}

    void apply(std::span<const double> q, std::span<double> out) const override { lattice_.filter(q, k_, out); }

private:
    PermutohedralLattice lattice_;
    int k_;
};

std::vector<double> spatial_features(int w, int h, double theta, const GuidanceImage* guide = nullptr,
                                     double theta_r = 1.0) {
    const int extra = guide ? guide->channels() : 0;
    const std::size_t d = 2 + static_cast<std::size_t>(extra);
    std::vector<double> f(static_cast<std::size_t>(w) * h * d);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * w + x;
            f[i * d] = x / theta;
            f[i * d + 1] = y / theta;
            for (int c = 0; c < extra; ++c) f[i * d + 2 + c] = guide->at(i, c) / theta_r;
        }
    }
    return f;
}

// Softmax over classes of log(max(u, floor)) + message, in place into q.
void update_pixel(std::span<const double> u, std::span<const double> message, double floor, std::span<double> q) {
    const std::size_t k = u.size();
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < k; ++l) {
        q[l] = std::log(std::max(u[l], floor)) + message[l];
        mx = std::max(mx, q[l]);
    }
    double sum = 0.0;
    for (std::size_t l = 0; l < k; ++l) {
        q[l] = std::exp(q[l] - mx);
        sum += q[l];
    }
    for (std::size_t l = 0; l < k; ++l) q[l] /= sum;
}

void check_finite(std::span<const double> v, int iteration) {
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericError(fmt::format("mean field: non-finite marginal at flat index {} in iteration {}", i,
                                           iteration));
        }
    }
}

}  // namespace

CrfResult mean_field(const ProbabilityVolume& unaries, const GuidanceImage& guide, const CrfConfig& config,
                     const IterationObserver& observer) {
    check_inputs(unaries, guide, config);
    if (is_identity(config)) return {unaries, argmax_labels(unaries)};

    const int w = unaries.width();
    const int h = unaries.height();
    const int k = unaries.classes();
    std::unique_ptr<KernelSum> smooth;
    std::unique_ptr<KernelSum> appear;
    std::vector<double> smooth_features;
    std::vector<double> appear_features;
    if (config.filter == CrfFilter::truncated) {
        if (config.w_smoothness > 0.0) {
            smooth = std::make_unique<SeparableSpatial>(w, h, k, config.theta_gamma, config.truncation);
        }
        if (config.w_appearance > 0.0) {
            appear = std::make_unique<WindowedBilateral>(guide, k, config.theta_alpha, config.theta_beta,
                                                         config.truncation);
        }
    } else {
        if (config.w_smoothness > 0.0) {
            smooth_features = spatial_features(w, h, config.theta_gamma);
            smooth = std::make_unique<LatticeKernel>(smooth_features, 2, k);
        }
        if (config.w_appearance > 0.0) {
            appear_features = spatial_features(w, h, config.theta_alpha, &guide, config.theta_beta);
            appear = std::make_unique<LatticeKernel>(appear_features, 2 + guide.channels(), k);
        }
    }

    Volume q = unaries;
    std::vector<double> fs(q.size(), 0.0);
    std::vector<double> fa(q.size(), 0.0);
    std::vector<double> message(static_cast<std::size_t>(k));
    for (int it = 1; it <= config.iterations; ++it) {
        const auto qv = q.values();
        if (smooth) smooth->apply(qv, fs);
        if (appear) appear->apply(qv, fa);
        Volume next(w, h, k);
        for (std::size_t i = 0; i < q.pixel_count(); ++i) {
            const auto qi = q.pixel(i);
            for (int l = 0; l < k; ++l) {
                const std::size_t o = i * k + l;
                // k(i, i) = 1 for both kernels.
                message[l] = config.w_smoothness * (smooth ? fs[o] - qi[l] : 0.0) +
                             config.w_appearance * (appear ? fa[o] - qi[l] : 0.0);
            }
            update_pixel(unaries.pixel(i), message, config.unary_floor, next.pixel(i));
        }
        check_finite(next.values(), it);
        q = std::move(next);
        if (observer) observer(it, ProbabilityVolume(q));
    }
    ProbabilityVolume marginals(std::move(q));
    LabelMap labels = argmax_labels(marginals);
    return {std::move(marginals), std::move(labels)};
}

ProbabilityVolume naive_mean_field(const ProbabilityVolume& unaries, const GuidanceImage& guide,
                                   const CrfConfig& config) {
    check_inputs(unaries, guide, config);
    const std::size_t n = unaries.pixel_count();
    if (n > kNaivePixelLimit) {
        throw ValidationError(fmt::format("naive mean field is limited to {} pixels, got {}", kNaivePixelLimit, n));
    }
    if (is_identity(config)) return unaries;

    const int w = unaries.width();
    const int k = unaries.classes();
    const int c = guide.channels();
    const double ga = 2.0 * config.theta_gamma * config.theta_gamma;
    const double aa = 2.0 * config.theta_alpha * config.theta_alpha;
    const double ab = 2.0 * config.theta_beta * config.theta_beta;

    Volume q = unaries;
    std::vector<double> message(static_cast<std::size_t>(k));
    for (int it = 1; it <= config.iterations; ++it) {
        Volume next(unaries.width(), unaries.height(), k);
        for (std::size_t i = 0; i < n; ++i) {
            const double xi = static_cast<double>(i % w);
            const double yi = static_cast<double>(i / w);
            std::fill(message.begin(), message.end(), 0.0);
            for (std::size_t j = 0; j < n; ++j) {
                if (j == i) continue;
                const double dx = xi - static_cast<double>(j % w);
                const double dy = yi - static_cast<double>(j / w);
                const double p2 = dx * dx + dy * dy;
                double i2 = 0.0;
                for (int ch = 0; ch < c; ++ch) {
                    const double di = guide.at(i, ch) - guide.at(j, ch);
                    i2 += di * di;
                }
                const double kernel = config.w_smoothness * std::exp(-p2 / ga) +
                                      config.w_appearance * std::exp(-p2 / aa - i2 / ab);
                const auto qj = q.pixel(j);
                for (int l = 0; l < k; ++l) message[l] += kernel * qj[l];
            }
            update_pixel(unaries.pixel(i), message, config.unary_floor, next.pixel(i));
        }
        check_finite(next.values(), it);
        q = std::move(next);
    }
    return ProbabilityVolume(std::move(q));
}

}  // namespace visnir
