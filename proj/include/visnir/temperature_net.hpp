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

// Small fully-convolutional network mapping (image, logits) to a strictly
// positive per-pixel temperature, with hand-written backpropagation of the
// temperature-scaled negative log-likelihood.
//
// Architecture: 3x3 conv (C_in -> H) tanh, 3x3 conv (H -> H) tanh,
// 3x3 conv (H -> 1), then T = softplus(a) + min_temperature. Convolutions use
// zero padding so the output has the input's spatial size. C_in is the number
// of image feature channels plus the number of classes.

#pragma once

#include <cstdint>
#include <vector>

#include "visnir/types.hpp"

namespace visnir {

struct ConvLayer {
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 3;
    /// Layout [out][in][ky][kx].
    std::vector<double> weights;
    std::vector<double> bias;

    std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

struct TempNetParams {
    int image_channels = 0;
    int classes = 0;
    /// Logits are divided by this before entering the network.
    double logit_scale = 1.0;
    double min_temperature = 0.05;
    std::vector<ConvLayer> layers;

    int input_channels() const { return image_channels + classes; }
    std::size_t parameter_count() const;
    /// Flattened parameters, layer by layer, weights before biases.
    std::vector<double> parameters() const;
    void set_parameters(const std::vector<double>& flat);
    /// Throws ValidationError when the layer stack is inconsistent or a
    /// parameter is not finite.
    void validate() const;
};

/// Randomly initialized hidden layers and a zero final layer whose bias gives
/// T = 1 everywhere.
TempNetParams make_temperature_net(int image_channels, int classes, double logit_scale, std::uint64_t seed,
                                   int hidden = 16);

/// Image intensities scaled to [0, 1], shape (H, W, channels).
Volume image_features(const RasterImage& image);
/// Channel-wise concatenation of feature volumes of equal size.
Volume stack_features(const Volume& a, const Volume& b);

/// Per-pixel temperature for a whole image.
FloatGrid temperature_map(const TempNetParams& net, const Volume& image, const LogitVolume& logits);

/// Rectangle [x0, x0 + width) x [y0, y0 + height).
struct PixelRect {
    int x0 = 0;
    int y0 = 0;
    int width = 0;
    int height = 0;
};

struct NllGradient {
    /// Sum of per-pixel NLL over the evaluated, non-ignored pixels.
    double loss_sum = 0.0;
    std::size_t pixels = 0;
    /// Gradient of loss_sum, ordered as TempNetParams::parameters().
    std::vector<double> gradient;
};

/// NLL of softmax(z / T) over the non-ignored pixels of `region`. The network
/// sees `region` grown by the receptive-field radius (clipped to the image),
/// so summing over a tiling of the image equals the whole-image objective.
NllGradient temperature_nll_gradient(const TempNetParams& net, const Volume& image, const LogitVolume& logits,
                                     const LabelMap& labels, const PixelRect& region);
NllGradient temperature_nll_gradient(const TempNetParams& net, const Volume& image, const LogitVolume& logits,
                                     const LabelMap& labels);

/// Receptive-field radius in pixels (1 per 3x3 layer).
int receptive_radius(const TempNetParams& net);

}  // namespace visnir
