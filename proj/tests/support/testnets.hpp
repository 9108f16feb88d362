#pragma once

// Random small networks and inputs shared by unit and acceptance tests.

#include <cstdint>
#include <vector>

#include "misa/nnet.hpp"
#include "misa/rng.hpp"
#include "misa/tensor.hpp"

namespace testnets {

// Randomize every parameter, including biases and batchnorm statistics, so
// that relu inputs are generically nonzero and pool maxima are untied.
inline void randomize_params(misa::NetworkModel& model, misa::Rng& rng, float scale = 0.6f) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const misa::LayerSpec& s = model.layers[i];
        if (s.kind == misa::LayerKind::dense || s.kind == misa::LayerKind::conv2d) {
            const int fan_in = (s.kind == misa::LayerKind::dense)
                                   ? s.units_in
                                   : s.in_channels * s.kernel * s.kernel;
            const float bound = scale / std::sqrt(static_cast<float>(fan_in));
            for (float& w : model.params[i].w) w = rng.uniform_f(-bound, bound);
            for (float& b : model.params[i].b) b = rng.uniform_f(-0.15f, 0.15f);
        } else if (s.kind == misa::LayerKind::batchnorm) {
            for (float& g : model.params[i].w) g = rng.uniform_f(0.5f, 1.5f);
            for (float& b : model.params[i].b) b = rng.uniform_f(-0.3f, 0.3f);
            for (float& m : model.params[i].rm) m = rng.uniform_f(-0.2f, 0.2f);
            for (float& v : model.params[i].rv) v = rng.uniform_f(0.5f, 1.5f);
        }
    }
}

// A random small architecture drawing from all layer kinds.
inline misa::NetworkModel random_small_net(misa::Rng& rng) {
    using namespace misa;
    const int channels = 1 + static_cast<int>(rng.below(2));
    const int hw = (rng.below(2) == 0) ? 6 : 8;
    const int classes = 3 + static_cast<int>(rng.below(3));
    const std::vector<int> input_shape = {channels, hw, hw};

    std::vector<LayerSpec> ls;
    const int flavor = static_cast<int>(rng.below(4));
    const auto flat_after = [&]() {
        std::vector<int> shp = input_shape;
        for (const LayerSpec& l : ls) shp = layer_output_shape(l, shp);
        return static_cast<int>(Tensor::numel(shp));
    };
    if (flavor == 0) {  // mlp
        const int h1 = 8 + static_cast<int>(rng.below(9));
        ls.push_back(flatten_layer());
        ls.push_back(dense_layer(channels * hw * hw, h1));
        ls.push_back(relu_layer());
        if (rng.below(2) == 0) ls.push_back(dropout_layer(0.3f));
        ls.push_back(dense_layer(h1, classes));
    } else if (flavor == 1) {  // conv + pool
        const int f = 2 + static_cast<int>(rng.below(3));
        ls.push_back(conv2d_layer(channels, f, 3));
        ls.push_back(relu_layer());
        if ((hw - 2) % 2 == 0) ls.push_back(maxpool2d_layer(2));
        ls.push_back(flatten_layer());
        ls.push_back(dense_layer(flat_after(), 10));
        ls.push_back(relu_layer());
        ls.push_back(dense_layer(10, classes));
    } else if (flavor == 2) {  // conv + batchnorm
        const int f = 2 + static_cast<int>(rng.below(3));
        ls.push_back(conv2d_layer(channels, f, 3, 1 + static_cast<int>(rng.below(2))));
        ls.push_back(batchnorm_layer(f));
        ls.push_back(relu_layer());
        ls.push_back(flatten_layer());
        ls.push_back(dense_layer(flat_after(), classes));
    } else {  // deeper mlp with batchnorm
        ls.push_back(flatten_layer());
        ls.push_back(dense_layer(channels * hw * hw, 12));
        ls.push_back(batchnorm_layer(12));
        ls.push_back(relu_layer());
        ls.push_back(dense_layer(12, 8));
        ls.push_back(relu_layer());
        ls.push_back(dense_layer(8, classes));
    }
    ls.push_back(softmax_layer());
    NetworkModel model = make_network(input_shape, classes, std::move(ls));
    randomize_params(model, rng);
    return model;
}

inline misa::Tensor random_input(const misa::NetworkModel& model, misa::Rng& rng) {
    misa::Tensor x(model.input_shape);
    for (float& v : x.data) v = rng.uniform_f(0.0f, 1.0f);
    return x;
}

}  // namespace testnets
