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

#include "visnir/temperature_net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <fmt/format.h>

#include "visnir/error.hpp"

namespace visnir {

namespace {

double softplus(double a) { return std::max(a, 0.0) + std::log1p(std::exp(-std::abs(a))); }

double sigmoid(double a) {
    if (a >= 0.0) return 1.0 / (1.0 + std::exp(-a));
    const double e = std::exp(a);
    return e / (1.0 + e);
}

// softplus^-1(y) = log(exp(y) - 1)
double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

// Channel-major activation planes for one window.
struct Planes {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<double> data;

    Planes() = default;
    Planes(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c) * h * w, 0.0) {}

    double* plane(int c) { return data.data() + static_cast<std::size_t>(c) * height * width; }
    const double* plane(int c) const { return data.data() + static_cast<std::size_t>(c) * height * width; }
};

void conv_forward(const ConvLayer& layer, const Planes& in, Planes& out) {
    out = Planes(layer.out_channels, in.height, in.width);
    const int r = layer.kernel / 2;
    const int h = in.height;
    const int w = in.width;
    for (int o = 0; o < layer.out_channels; ++o) {
        double* dst = out.plane(o);
        std::fill(dst, dst + static_cast<std::size_t>(h) * w, layer.bias[o]);
        for (int i = 0; i < layer.in_channels; ++i) {
            const double* src = in.plane(i);
            for (int ky = 0; ky < layer.kernel; ++ky) {
                const int dy = ky - r;
                for (int kx = 0; kx < layer.kernel; ++kx) {
                    const int dx = kx - r;
                    const double wt = layer.weights[((static_cast<std::size_t>(o) * layer.in_channels + i) *
                                                         layer.kernel + ky) * layer.kernel + kx];
                    const int y_lo = std::max(0, -dy);
                    const int y_hi = std::min(h, h - dy);
                    const int x_lo = std::max(0, -dx);
                    const int x_hi = std::min(w, w - dx);
                    for (int y = y_lo; y < y_hi; ++y) {
                        double* drow = dst + static_cast<std::size_t>(y) * w;
                        const double* srow = src + static_cast<std::size_t>(y + dy) * w + dx;
                        for (int x = x_lo; x < x_hi; ++x) drow[x] += wt * srow[x];
                    }
                }
            }
        }
    }
}

// Accumulates weight/bias gradients into grad_w/grad_b and, when grad_in is
// non-null, the gradient with respect to the layer input.
void conv_backward(const ConvLayer& layer, const Planes& in, const Planes& grad_out, double* grad_w, double* grad_b,
                   Planes* grad_in) {
    const int r = layer.kernel / 2;
    const int h = in.height;
    const int w = in.width;
    if (grad_in) *grad_in = Planes(layer.in_channels, h, w);
    for (int o = 0; o < layer.out_channels; ++o) {
        const double* g = grad_out.plane(o);
        double sum = 0.0;
        for (std::size_t p = 0; p < static_cast<std::size_t>(h) * w; ++p) sum += g[p];
        grad_b[o] += sum;
        for (int i = 0; i < layer.in_channels; ++i) {
            const double* src = in.plane(i);
            double* gin = grad_in ? grad_in->plane(i) : nullptr;
            for (int ky = 0; ky < layer.kernel; ++ky) {
                const int dy = ky - r;
                for (int kx = 0; kx < layer.kernel; ++kx) {
                    const int dx = kx - r;
                    const std::size_t widx =
                        ((static_cast<std::size_t>(o) * layer.in_channels + i) * layer.kernel + ky) * layer.kernel + kx;
                    const double wt = layer.weights[widx];
                    const int y_lo = std::max(0, -dy);
                    const int y_hi = std::min(h, h - dy);
                    const int x_lo = std::max(0, -dx);
                    const int x_hi = std::min(w, w - dx);
                    double acc = 0.0;
                    for (int y = y_lo; y < y_hi; ++y) {
                        const double* grow = g + static_cast<std::size_t>(y) * w;
                        const double* srow = src + static_cast<std::size_t>(y + dy) * w + dx;
                        for (int x = x_lo; x < x_hi; ++x) acc += grow[x] * srow[x];
                        if (gin) {
                            double* girow = gin + static_cast<std::size_t>(y + dy) * w + dx;
                            for (int x = x_lo; x < x_hi; ++x) girow[x] += wt * grow[x];
                        }
                    }
                    grad_w[widx] += acc;
                }
            }
        }
    }
}

Planes window_features(const TempNetParams& net, const Volume& image, const LogitVolume& logits, const PixelRect& win) {
    Planes f(net.input_channels(), win.height, win.width);
    const double inv_scale = 1.0 / net.logit_scale;
    for (int y = 0; y < win.height; ++y) {
        for (int x = 0; x < win.width; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * win.width + x;
            for (int c = 0; c < net.image_channels; ++c) {
                f.plane(c)[p] = image.at(win.y0 + y, win.x0 + x, c);
            }
            for (int k = 0; k < net.classes; ++k) {
                f.plane(net.image_channels + k)[p] = logits.at(win.y0 + y, win.x0 + x, k) * inv_scale;
            }
        }
    }
    return f;
}

void check_inputs(const TempNetParams& net, const Volume& image, const LogitVolume& logits) {
    if (image.width() != logits.width() || image.height() != logits.height()) {
        throw ValidationError("temperature net: image and logits differ in size");
    }
    if (image.channels() != net.image_channels) {
        throw ValidationError(fmt::format("temperature net expects {} image channels, got {}", net.image_channels,
                                          image.channels()));
    }
    if (logits.classes() != net.classes) {
        throw ValidationError(
            fmt::format("temperature net expects {} classes, got {}", net.classes, logits.classes()));
    }
}

struct ForwardPass {
    std::vector<Planes> activations;  // activations[0] = input features
    Planes pre_output;                // final layer output before softplus
};

ForwardPass forward(const TempNetParams& net, Planes input) {
    ForwardPass pass;
    pass.activations.push_back(std::move(input));
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        Planes out;
        conv_forward(net.layers[l], pass.activations.back(), out);
        if (l + 1 == net.layers.size()) {
            pass.pre_output = std::move(out);
        } else {
            for (double& v : out.data) v = std::tanh(v);
            pass.activations.push_back(std::move(out));
        }
    }
    return pass;
}

}  // namespace

std::size_t TempNetParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
}

std::vector<double> TempNetParams::parameters() const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const auto& l : layers) {
        flat.insert(flat.end(), l.weights.begin(), l.weights.end());
        flat.insert(flat.end(), l.bias.begin(), l.bias.end());
    }
    return flat;
}

void TempNetParams::set_parameters(const std::vector<double>& flat) {
    if (flat.size() != parameter_count()) {
        throw ValidationError(fmt::format("expected {} parameters, got {}", parameter_count(), flat.size()));
    }
    std::size_t at = 0;
    for (auto& l : layers) {
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), l.weights.size(), l.weights.begin());
        at += l.weights.size();
        std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(at), l.bias.size(), l.bias.begin());
        at += l.bias.size();
    }
}

void TempNetParams::validate() const {
    if (image_channels < 0 || classes <= 0) throw ValidationError("temperature net: invalid channel counts");
    if (!(logit_scale > 0.0) || !std::isfinite(logit_scale)) {
        throw ValidationError("temperature net: logit scale must be positive");
    }
    if (!(min_temperature > 0.0)) throw ValidationError("temperature net: minimum temperature must be positive");
    if (layers.empty()) throw ValidationError("temperature net: no layers");
    int expected_in = input_channels();
    for (const auto& l : layers) {
        if (l.in_channels != expected_in || l.out_channels <= 0 || l.kernel <= 0 || l.kernel % 2 == 0) {
            throw ValidationError("temperature net: inconsistent layer shapes");
        }
        if (l.weights.size() != static_cast<std::size_t>(l.out_channels) * l.in_channels * l.kernel * l.kernel ||
            l.bias.size() != static_cast<std::size_t>(l.out_channels)) {
            throw ValidationError("temperature net: parameter buffer size mismatch");
        }
        for (double v : l.weights) {
            if (!std::isfinite(v)) throw ValidationError("temperature net: non-finite weight");
        }
        for (double v : l.bias) {
            if (!std::isfinite(v)) throw ValidationError("temperature net: non-finite bias");
        }
        expected_in = l.out_channels;
    }
    if (expected_in != 1) throw ValidationError("temperature net: final layer must have one output channel");
}

TempNetParams make_temperature_net(int image_channels, int classes, double logit_scale, std::uint64_t seed,
                                   int hidden) {
    TempNetParams net;
    net.image_channels = image_channels;
    net.classes = classes;
    net.logit_scale = logit_scale;
    std::mt19937_64 rng(seed);
    const int widths[4] = {net.input_channels(), hidden, hidden, 1};
    for (int l = 0; l < 3; ++l) {
        ConvLayer layer;
        layer.in_channels = widths[l];
        layer.out_channels = widths[l + 1];
        layer.kernel = 3;
        layer.weights.assign(static_cast<std::size_t>(layer.out_channels) * layer.in_channels * 9, 0.0);
        layer.bias.assign(static_cast<std::size_t>(layer.out_channels), 0.0);
        if (l < 2) {
            // Glorot-uniform for the tanh layers.
            const double fan = 9.0 * (layer.in_channels + layer.out_channels);
            std::uniform_real_distribution<double> dist(-std::sqrt(6.0 / fan), std::sqrt(6.0 / fan));
            for (double& w : layer.weights) w = dist(rng);
        } else {
            layer.bias[0] = inverse_softplus(1.0 - net.min_temperature);
        }
        net.layers.push_back(std::move(layer));
    }
    net.validate();
    return net;
}

Volume image_features(const RasterImage& image) {
    Volume out(image.width(), image.height(), image.channels());
    const double scale = 1.0 / image.max_value();
    const auto samples = image.samples();
    for (std::size_t i = 0; i < samples.size(); ++i) out.values()[i] = samples[i] * scale;
    return out;
}

Volume stack_features(const Volume& a, const Volume& b) {
    if (a.width() != b.width() || a.height() != b.height()) {
        throw ValidationError("stack_features: volumes differ in size");
    }
    Volume out(a.width(), a.height(), a.channels() + b.channels());
    for (std::size_t i = 0; i < a.pixel_count(); ++i) {
        auto dst = out.pixel(i);
        std::copy(a.pixel(i).begin(), a.pixel(i).end(), dst.begin());
        std::copy(b.pixel(i).begin(), b.pixel(i).end(), dst.begin() + a.channels());
    }
    return out;
}

int receptive_radius(const TempNetParams& net) {
    int r = 0;
    for (const auto& l : net.layers) r += l.kernel / 2;
    return r;
}

FloatGrid temperature_map(const TempNetParams& net, const Volume& image, const LogitVolume& logits) {
    check_inputs(net, image, logits);
    const PixelRect full{0, 0, logits.width(), logits.height()};
    const ForwardPass pass = forward(net, window_features(net, image, logits, full));
    FloatGrid t(logits.width(), logits.height());
    for (std::size_t p = 0; p < t.size(); ++p) t[p] = softplus(pass.pre_output.data[p]) + net.min_temperature;
    return t;
}

NllGradient temperature_nll_gradient(const TempNetParams& net, const Volume& image, const LogitVolume& logits,
                                     const LabelMap& labels, const PixelRect& region) {
    check_inputs(net, image, logits);
    if (labels.width() != logits.width() || labels.height() != logits.height()) {
        throw ValidationError("temperature net: labels and logits differ in size");
    }
    const int radius = receptive_radius(net);
    PixelRect win;
    win.x0 = std::max(0, region.x0 - radius);
    win.y0 = std::max(0, region.y0 - radius);
    const int x1 = std::min(logits.width(), region.x0 + region.width + radius);
    const int y1 = std::min(logits.height(), region.y0 + region.height + radius);
    win.width = x1 - win.x0;
    win.height = y1 - win.y0;

    const ForwardPass pass = forward(net, window_features(net, image, logits, win));

    NllGradient result;
    result.gradient.assign(net.parameter_count(), 0.0);
    Planes grad(1, win.height, win.width);
    const int k_count = net.classes;
    std::vector<double> scaled(static_cast<std::size_t>(k_count));
    for (int y = region.y0; y < region.y0 + region.height; ++y) {
        for (int x = region.x0; x < region.x0 + region.width; ++x) {
            const auto label = labels.at(y, x);
            if (label == kIgnoreLabel) continue;
            const std::size_t wp = static_cast<std::size_t>(y - win.y0) * win.width + (x - win.x0);
            const double a = pass.pre_output.data[wp];
            const double t = softplus(a) + net.min_temperature;
            double zmax = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < k_count; ++k) {
                scaled[k] = logits.at(y, x, k) / t;
                zmax = std::max(zmax, scaled[k]);
            }
            double denom = 0.0;
            for (int k = 0; k < k_count; ++k) denom += std::exp(scaled[k] - zmax);
            const double lse = zmax + std::log(denom);
            result.loss_sum += lse - scaled[label];
            ++result.pixels;
            // dL/dT = -(E_p[z] - z_y) / T^2
            double expected_z = 0.0;
            for (int k = 0; k < k_count; ++k) expected_z += std::exp(scaled[k] - lse) * logits.at(y, x, k);
            const double dl_dt = -(expected_z - logits.at(y, x, label)) / (t * t);
            grad.data[wp] = dl_dt * sigmoid(a);
        }
    }

    // Parameter offsets in the flat gradient.
    std::vector<std::size_t> offset(net.layers.size());
    std::size_t at = 0;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        offset[l] = at;
        at += net.layers[l].parameter_count();
    }
    for (std::size_t l = net.layers.size(); l-- > 0;) {
        const ConvLayer& layer = net.layers[l];
        double* gw = result.gradient.data() + offset[l];
        double* gb = gw + layer.weights.size();
        Planes grad_in;
        conv_backward(layer, pass.activations[l], grad, gw, gb, l > 0 ? &grad_in : nullptr);
        if (l > 0) {
            const Planes& act = pass.activations[l];
            for (std::size_t p = 0; p < grad_in.data.size(); ++p) grad_in.data[p] *= 1.0 - act.data[p] * act.data[p];
            grad = std::move(grad_in);
        }
    }
    return result;
}

NllGradient temperature_nll_gradient(const TempNetParams& net, const Volume& image, const LogitVolume& logits,
                                     const LabelMap& labels) {
    return temperature_nll_gradient(net, image, logits, labels, PixelRect{0, 0, logits.width(), logits.height()});
}

}  // namespace visnir
