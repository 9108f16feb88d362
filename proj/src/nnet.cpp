#include "misa/nnet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "misa/io.hpp"
#include "misa/rng.hpp"

namespace misa {

std::string layer_kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::dense: return "dense";
        case LayerKind::conv2d: return "conv2d";
        case LayerKind::relu: return "relu";
        case LayerKind::maxpool2d: return "maxpool2d";
        case LayerKind::batchnorm: return "batchnorm";
        case LayerKind::dropout: return "dropout";
        case LayerKind::flatten: return "flatten";
        case LayerKind::softmax: return "softmax";
    }
    throw std::logic_error("layer_kind_name: unreachable");
}

LayerKind layer_kind_from_name(const std::string& name) {
    if (name == "dense") return LayerKind::dense;
    if (name == "conv2d") return LayerKind::conv2d;
    if (name == "relu") return LayerKind::relu;
    if (name == "maxpool2d") return LayerKind::maxpool2d;
    if (name == "batchnorm") return LayerKind::batchnorm;
    if (name == "dropout") return LayerKind::dropout;
    if (name == "flatten") return LayerKind::flatten;
    if (name == "softmax") return LayerKind::softmax;
    throw std::invalid_argument("unknown layer kind: " + name);
}

LayerSpec dense_layer(int units_in, int units_out) {
    if (units_in < 1 || units_out < 1) throw std::invalid_argument("dense: units must be positive");
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.units_in = units_in;
    s.units_out = units_out;
    return s;
}

LayerSpec conv2d_layer(int in_channels, int out_channels, int kernel, int stride) {
    if (in_channels < 1 || out_channels < 1 || kernel < 1 || stride < 1)
        throw std::invalid_argument("conv2d: channels/kernel/stride must be positive");
    LayerSpec s;
    s.kind = LayerKind::conv2d;
    s.in_channels = in_channels;
    s.out_channels = out_channels;
    s.kernel = kernel;
    s.stride = stride;
    return s;
}

LayerSpec relu_layer() {
    LayerSpec s;
    s.kind = LayerKind::relu;
    return s;
}

LayerSpec maxpool2d_layer(int pool) {
    if (pool < 1) throw std::invalid_argument("maxpool2d: pool must be positive");
    LayerSpec s;
    s.kind = LayerKind::maxpool2d;
    s.pool = pool;
    return s;
}

LayerSpec batchnorm_layer(int features, float momentum, float eps) {
    if (features < 1) throw std::invalid_argument("batchnorm: features must be positive");
    if (momentum <= 0.0f || momentum > 1.0f) throw std::invalid_argument("batchnorm: momentum in (0,1]");
    LayerSpec s;
    s.kind = LayerKind::batchnorm;
    s.features = features;
    s.momentum = momentum;
    s.eps = eps;
    return s;
}

LayerSpec dropout_layer(float rate) {
    if (rate < 0.0f || rate >= 1.0f) throw std::invalid_argument("dropout: rate in [0,1)");
    LayerSpec s;
    s.kind = LayerKind::dropout;
    s.rate = rate;
    return s;
}

LayerSpec flatten_layer() {
    LayerSpec s;
    s.kind = LayerKind::flatten;
    return s;
}

LayerSpec softmax_layer() {
    LayerSpec s;
    s.kind = LayerKind::softmax;
    return s;
}

std::vector<int> layer_output_shape(const LayerSpec& spec, const std::vector<int>& in_shape) {
    const auto bad = [&](const std::string& why) {
        return std::invalid_argument(layer_kind_name(spec.kind) + ": incompatible input shape " +
                                     shape_to_string(in_shape) + " (" + why + ")");
    };
    switch (spec.kind) {
        case LayerKind::dense:
            if (in_shape.size() != 1) throw bad("expects a flat vector");
            if (in_shape[0] != spec.units_in)
                throw bad("expects " + std::to_string(spec.units_in) + " features");
            return {spec.units_out};
        case LayerKind::conv2d: {
            if (in_shape.size() != 3) throw bad("expects {C,H,W}");
            if (in_shape[0] != spec.in_channels)
                throw bad("expects " + std::to_string(spec.in_channels) + " channels");
            if (in_shape[1] < spec.kernel || in_shape[2] < spec.kernel)
                throw bad("smaller than kernel " + std::to_string(spec.kernel));
            const int oh = (in_shape[1] - spec.kernel) / spec.stride + 1;
            const int ow = (in_shape[2] - spec.kernel) / spec.stride + 1;
            return {spec.out_channels, oh, ow};
        }
        case LayerKind::relu:
        case LayerKind::dropout:
        case LayerKind::softmax:
            if (spec.kind == LayerKind::softmax && in_shape.size() != 1)
                throw bad("expects a flat vector");
            return in_shape;
        case LayerKind::maxpool2d: {
            if (in_shape.size() != 3) throw bad("expects {C,H,W}");
            if (in_shape[1] % spec.pool != 0 || in_shape[2] % spec.pool != 0)
                throw bad("extent not divisible by pool " + std::to_string(spec.pool));
            return {in_shape[0], in_shape[1] / spec.pool, in_shape[2] / spec.pool};
        }
        case LayerKind::batchnorm:
            if (in_shape.empty() || in_shape[0] != spec.features)
                throw bad("expects " + std::to_string(spec.features) + " leading features");
            return in_shape;
        case LayerKind::flatten: {
            return {static_cast<int>(Tensor::numel(in_shape))};
        }
    }
    throw std::logic_error("layer_output_shape: unreachable");
}

namespace {

std::size_t weight_count(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::dense: return static_cast<std::size_t>(s.units_in) * s.units_out;
        case LayerKind::conv2d:
            return static_cast<std::size_t>(s.out_channels) * s.in_channels * s.kernel * s.kernel;
        case LayerKind::batchnorm: return static_cast<std::size_t>(s.features);
        default: return 0;
    }
}

std::size_t bias_count(const LayerSpec& s) {
    switch (s.kind) {
        case LayerKind::dense: return static_cast<std::size_t>(s.units_out);
        case LayerKind::conv2d: return static_cast<std::size_t>(s.out_channels);
        case LayerKind::batchnorm: return static_cast<std::size_t>(s.features);
        default: return 0;
    }
}

}  // namespace

bool NetworkModel::is_monitored(int boundary) const {
    return std::find(monitored.begin(), monitored.end(), boundary) != monitored.end();
}

NetworkModel make_network(std::vector<int> input_shape, int class_count,
                          std::vector<LayerSpec> layers) {
    if (layers.empty()) throw std::invalid_argument("make_network: no layers");
    if (class_count < 2) throw std::invalid_argument("make_network: class_count must be >= 2");
    for (std::size_t i = 0; i + 1 < layers.size(); ++i)
        if (layers[i].kind == LayerKind::softmax)
            throw std::invalid_argument("make_network: softmax allowed only as the final layer");
    if (layers.back().kind != LayerKind::softmax)
        throw std::invalid_argument("make_network: final layer must be softmax");

    NetworkModel m;
    m.input_shape = std::move(input_shape);
    m.class_count = class_count;
    m.layers = std::move(layers);
    m.boundary_shapes.push_back(m.input_shape);
    for (const LayerSpec& s : m.layers)
        m.boundary_shapes.push_back(layer_output_shape(s, m.boundary_shapes.back()));
    const std::vector<int>& out = m.boundary_shapes.back();
    if (out.size() != 1 || out[0] != class_count)
        throw std::invalid_argument("make_network: output shape " + shape_to_string(out) +
                                    " does not match class_count " + std::to_string(class_count));

    m.monitored.push_back(0);
    for (int i = 0; i < m.layer_count(); ++i)
        if (m.layers[i].kind == LayerKind::relu) m.monitored.push_back(i + 1);

    m.params.resize(m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        const LayerSpec& s = m.layers[i];
        m.params[i].w.assign(weight_count(s), 0.0f);
        m.params[i].b.assign(bias_count(s), 0.0f);
        if (s.kind == LayerKind::batchnorm) {
            m.params[i].w.assign(static_cast<std::size_t>(s.features), 1.0f);
            m.params[i].rm.assign(static_cast<std::size_t>(s.features), 0.0f);
            m.params[i].rv.assign(static_cast<std::size_t>(s.features), 1.0f);
        }
    }
    return m;
}

NetworkModel make_architecture(const std::string& name, const std::vector<int>& input_shape,
                               int class_count) {
    if (input_shape.size() != 3)
        throw std::invalid_argument("make_architecture: input shape must be {C,H,W}");
    const int c = input_shape[0];
    const auto flat = [](const std::vector<int>& s) { return static_cast<int>(Tensor::numel(s)); };
    const auto after = [&](const std::vector<LayerSpec>& ls) {
        std::vector<int> shp = input_shape;
        for (const LayerSpec& l : ls) shp = layer_output_shape(l, shp);
        return shp;
    };

    std::vector<LayerSpec> ls;
    if (name == "mlp_small") {
        ls = {flatten_layer(), dense_layer(flat(input_shape), 128), relu_layer()};
        ls.push_back(dense_layer(128, class_count));
    } else if (name == "cnn_small") {
        ls = {conv2d_layer(c, 8, 3), relu_layer(), maxpool2d_layer(2),
              conv2d_layer(8, 16, 3, 2), relu_layer(), flatten_layer()};
        ls.push_back(dense_layer(flat(after(ls)), 64));
        ls.push_back(relu_layer());
        ls.push_back(dense_layer(64, class_count));
    } else if (name == "cnn_bn") {
        ls = {conv2d_layer(c, 8, 3), batchnorm_layer(8), relu_layer(), maxpool2d_layer(2),
              conv2d_layer(8, 16, 3, 2), batchnorm_layer(16), relu_layer(), flatten_layer()};
        ls.push_back(dense_layer(flat(after(ls)), 64));
        ls.push_back(relu_layer());
        ls.push_back(dense_layer(64, class_count));
    } else if (name == "cnn_mnist") {
        ls = {conv2d_layer(c, 32, 3), relu_layer(), conv2d_layer(32, 64, 3), relu_layer(),
              maxpool2d_layer(2), dropout_layer(0.25f), flatten_layer()};
        ls.push_back(dense_layer(flat(after(ls)), 128));
        ls.push_back(relu_layer());
        ls.push_back(dropout_layer(0.5f));
        ls.push_back(dense_layer(128, class_count));
    } else {
        throw std::invalid_argument("make_architecture: unknown architecture '" + name + "'");
    }
    ls.push_back(softmax_layer());
    return make_network(input_shape, class_count, std::move(ls));
}

void init_params(NetworkModel& model, std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        const LayerSpec& s = model.layers[i];
        if (s.kind == LayerKind::dense || s.kind == LayerKind::conv2d) {
            const int fan_in = (s.kind == LayerKind::dense) ? s.units_in
                                                            : s.in_channels * s.kernel * s.kernel;
            const float bound = std::sqrt(1.0f / static_cast<float>(fan_in));
            for (float& w : model.params[i].w) w = rng.uniform_f(-bound, bound);
            std::fill(model.params[i].b.begin(), model.params[i].b.end(), 0.0f);
        } else if (s.kind == LayerKind::batchnorm) {
            std::fill(model.params[i].w.begin(), model.params[i].w.end(), 1.0f);
            std::fill(model.params[i].b.begin(), model.params[i].b.end(), 0.0f);
            std::fill(model.params[i].rm.begin(), model.params[i].rm.end(), 0.0f);
            std::fill(model.params[i].rv.begin(), model.params[i].rv.end(), 1.0f);
        }
    }
}

namespace {

// Spatial extent per leading feature: 1 for flat vectors, H*W for {C,H,W}.
std::size_t feature_span(const std::vector<int>& shape) {
    std::size_t span = 1;
    for (std::size_t d = 1; d < shape.size(); ++d) span *= static_cast<std::size_t>(shape[d]);
    return span;
}

void apply_dense(const LayerSpec& s, const LayerParams& p, const Tensor& x, Tensor& y) {
    for (int o = 0; o < s.units_out; ++o) {
        float acc = p.b[static_cast<std::size_t>(o)];
        const float* wrow = p.w.data() + static_cast<std::size_t>(o) * s.units_in;
        for (int i = 0; i < s.units_in; ++i) acc += wrow[i] * x.data[static_cast<std::size_t>(i)];
        y.data[static_cast<std::size_t>(o)] = acc;
    }
}

void apply_conv2d(const LayerSpec& s, const LayerParams& p, const Tensor& x, Tensor& y) {
    const int ih = x.shape[1], iw = x.shape[2];
    const int oh = y.shape[1], ow = y.shape[2];
    const int k = s.kernel, stride = s.stride;
    for (int o = 0; o < s.out_channels; ++o) {
        const float bias = p.b[static_cast<std::size_t>(o)];
        for (int r = 0; r < oh; ++r) {
            for (int cc = 0; cc < ow; ++cc) {
                float acc = bias;
                for (int i = 0; i < s.in_channels; ++i) {
                    const float* wk = p.w.data() +
                                      ((static_cast<std::size_t>(o) * s.in_channels + i) * k) * k;
                    const float* xin = x.data.data() + (static_cast<std::size_t>(i) * ih) * iw;
                    for (int u = 0; u < k; ++u) {
                        const float* xrow = xin + static_cast<std::size_t>(r * stride + u) * iw + cc * stride;
                        const float* wrow = wk + static_cast<std::size_t>(u) * k;
                        for (int v = 0; v < k; ++v) acc += wrow[v] * xrow[v];
                    }
                }
                y.data[(static_cast<std::size_t>(o) * oh + r) * ow + cc] = acc;
            }
        }
    }
}

void apply_maxpool(const LayerSpec& s, const Tensor& x, Tensor& y, std::vector<int>* argmax) {
    const int ch = x.shape[0], ih = x.shape[1], iw = x.shape[2];
    const int oh = y.shape[1], ow = y.shape[2], pl = s.pool;
    if (argmax) argmax->assign(y.size(), -1);
    for (int c = 0; c < ch; ++c) {
        for (int r = 0; r < oh; ++r) {
            for (int cc = 0; cc < ow; ++cc) {
                float best = -std::numeric_limits<float>::infinity();
                int best_idx = -1;
                for (int u = 0; u < pl; ++u) {
                    for (int v = 0; v < pl; ++v) {
                        const int idx = (c * ih + r * pl + u) * iw + cc * pl + v;
                        const float val = x.data[static_cast<std::size_t>(idx)];
                        if (val > best) {
                            best = val;
                            best_idx = idx;
                        }
                    }
                }
                const std::size_t oidx = (static_cast<std::size_t>(c) * oh + r) * ow + cc;
                y.data[oidx] = best;
                if (argmax) (*argmax)[oidx] = best_idx;
            }
        }
    }
}

void apply_batchnorm_inference(const LayerSpec& s, const LayerParams& p, const Tensor& x, Tensor& y) {
    const std::size_t span = feature_span(x.shape);
    for (int f = 0; f < s.features; ++f) {
        const std::size_t fi = static_cast<std::size_t>(f);
        const float scale = p.w[fi] / std::sqrt(p.rv[fi] + s.eps);
        const float shift = p.b[fi] - p.rm[fi] * scale;
        const float* xi = x.data.data() + fi * span;
        float* yi = y.data.data() + fi * span;
        for (std::size_t j = 0; j < span; ++j) yi[j] = xi[j] * scale + shift;
    }
}

void apply_softmax(const Tensor& x, Tensor& y) {
    float mx = x.data[0];
    for (float v : x.data) mx = std::max(mx, v);
    float sum = 0.0f;
    for (std::size_t i = 0; i < x.size(); ++i) {
        y.data[i] = std::exp(x.data[i] - mx);
        sum += y.data[i];
    }
    for (float& v : y.data) v /= sum;
}

// Inference-mode layer application. Pool argmax is recorded when requested so
// a later backward pass can route gradients without recomputing.
Tensor apply_layer_inference(const NetworkModel& model, int li, const Tensor& x,
                             std::vector<int>* pool_argmax = nullptr) {
    const LayerSpec& s = model.layers[static_cast<std::size_t>(li)];
    Tensor y(model.boundary_shapes[static_cast<std::size_t>(li) + 1]);
    switch (s.kind) {
        case LayerKind::dense: apply_dense(s, model.params[static_cast<std::size_t>(li)], x, y); break;
        case LayerKind::conv2d: apply_conv2d(s, model.params[static_cast<std::size_t>(li)], x, y); break;
        case LayerKind::relu:
            for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = x.data[i] > 0.0f ? x.data[i] : 0.0f;
            break;
        case LayerKind::maxpool2d: apply_maxpool(s, x, y, pool_argmax); break;
        case LayerKind::batchnorm:
            apply_batchnorm_inference(s, model.params[static_cast<std::size_t>(li)], x, y);
            break;
        case LayerKind::dropout:
        case LayerKind::flatten: y.data = x.data; break;
        case LayerKind::softmax: apply_softmax(x, y); break;
    }
    return y;
}

// Gradient of one layer under inference semantics: given activations on both
// sides and the gradient at the output boundary, produce the input gradient.
Tensor backward_layer_inference(const NetworkModel& model, int li, const Tensor& x, const Tensor& y,
                                const Tensor& gy, const std::vector<int>* pool_argmax) {
    const LayerSpec& s = model.layers[static_cast<std::size_t>(li)];
    const LayerParams& p = model.params[static_cast<std::size_t>(li)];
    Tensor gx(model.boundary_shapes[static_cast<std::size_t>(li)]);
    switch (s.kind) {
        case LayerKind::dense:
            for (int o = 0; o < s.units_out; ++o) {
                const float g = gy.data[static_cast<std::size_t>(o)];
                if (g == 0.0f) continue;
                const float* wrow = p.w.data() + static_cast<std::size_t>(o) * s.units_in;
                for (int i = 0; i < s.units_in; ++i) gx.data[static_cast<std::size_t>(i)] += g * wrow[i];
            }
            break;
        case LayerKind::conv2d: {
            const int ih = x.shape[1], iw = x.shape[2];
            const int oh = y.shape[1], ow = y.shape[2];
            const int k = s.kernel, stride = s.stride;
            for (int o = 0; o < s.out_channels; ++o) {
                for (int r = 0; r < oh; ++r) {
                    for (int cc = 0; cc < ow; ++cc) {
                        const float g = gy.data[(static_cast<std::size_t>(o) * oh + r) * ow + cc];
                        if (g == 0.0f) continue;
                        for (int i = 0; i < s.in_channels; ++i) {
                            const float* wk = p.w.data() +
                                              ((static_cast<std::size_t>(o) * s.in_channels + i) * k) * k;
                            float* gxi = gx.data.data() + (static_cast<std::size_t>(i) * ih) * iw;
                            for (int u = 0; u < k; ++u) {
                                float* gxrow = gxi + static_cast<std::size_t>(r * stride + u) * iw +
                                               cc * stride;
                                const float* wrow = wk + static_cast<std::size_t>(u) * k;
                                for (int v = 0; v < k; ++v) gxrow[v] += g * wrow[v];
                            }
                        }
                    }
                }
            }
            break;
        }
        case LayerKind::relu:
            for (std::size_t i = 0; i < x.size(); ++i)
                gx.data[i] = x.data[i] > 0.0f ? gy.data[i] : 0.0f;
            break;
        case LayerKind::maxpool2d:
            if (!pool_argmax) throw std::logic_error("maxpool backward without argmax trace");
            for (std::size_t oidx = 0; oidx < gy.size(); ++oidx)
                gx.data[static_cast<std::size_t>((*pool_argmax)[oidx])] += gy.data[oidx];
            break;
        case LayerKind::batchnorm: {
            const std::size_t span = feature_span(x.shape);
            for (int f = 0; f < s.features; ++f) {
                const std::size_t fi = static_cast<std::size_t>(f);
                const float scale = p.w[fi] / std::sqrt(p.rv[fi] + s.eps);
                const float* gyi = gy.data.data() + fi * span;
                float* gxi = gx.data.data() + fi * span;
                for (std::size_t j = 0; j < span; ++j) gxi[j] = gyi[j] * scale;
            }
            break;
        }
        case LayerKind::dropout:
        case LayerKind::flatten: gx.data = gy.data; break;
        case LayerKind::softmax:
            throw std::logic_error("softmax layer has no inference backward (gradients stop at logits)");
    }
    return gx;
}

void check_input_shape(const NetworkModel& model, const Tensor& input, const char* op) {
    if (input.shape != model.input_shape)
        throw std::invalid_argument(std::string(op) + ": input shape " +
                                    shape_to_string(input.shape) + " does not match model input " +
                                    shape_to_string(model.input_shape));
}

int argmax_index(const Tensor& t) {
    int best = 0;
    for (std::size_t i = 1; i < t.size(); ++i)
        if (t.data[i] > t.data[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
    return best;
}

}  // namespace

ForwardResult forward_with_taps(const NetworkModel& model, const Tensor& input,
                                const std::vector<int>& taps) {
    check_input_shape(model, input, "forward_with_taps");
    for (int t : taps)
        if (!model.is_monitored(t))
            throw std::invalid_argument("forward_with_taps: tap " + std::to_string(t) +
                                        " is not a monitored boundary");
    ForwardResult res;
    Tensor cur = input;
    if (std::find(taps.begin(), taps.end(), 0) != taps.end()) res.tapped[0] = cur;
    for (int li = 0; li < model.layer_count(); ++li) {
        Tensor next = apply_layer_inference(model, li, cur);
        if (model.layers[static_cast<std::size_t>(li)].kind == LayerKind::softmax) {
            res.logits = cur;
            res.probs = next;
        }
        cur = std::move(next);
        const int boundary = li + 1;
        if (std::find(taps.begin(), taps.end(), boundary) != taps.end()) res.tapped[boundary] = cur;
    }
    res.predicted = argmax_index(res.probs);
    return res;
}

int predict(const NetworkModel& model, const Tensor& input) {
    check_input_shape(model, input, "predict");
    Tensor cur = input;
    for (int li = 0; li < model.layer_count(); ++li) cur = apply_layer_inference(model, li, cur);
    return argmax_index(cur);
}

Tensor boundary_activation(const NetworkModel& model, const Tensor& input, int boundary) {
    check_input_shape(model, input, "boundary_activation");
    if (boundary < 0 || boundary > model.layer_count())
        throw std::invalid_argument("boundary_activation: boundary " + std::to_string(boundary) +
                                    " out of range");
    Tensor cur = input;
    for (int li = 0; li < boundary; ++li) cur = apply_layer_inference(model, li, cur);
    return cur;
}

Tensor suffix_logits(const NetworkModel& model, int boundary, const Tensor& activation) {
    if (boundary < 0 || boundary > model.logits_boundary())
        throw std::invalid_argument("suffix_logits: boundary " + std::to_string(boundary) +
                                    " out of range");
    if (activation.shape != model.boundary_shapes[static_cast<std::size_t>(boundary)])
        throw std::invalid_argument("suffix_logits: activation shape " +
                                    shape_to_string(activation.shape) + " does not match boundary " +
                                    std::to_string(boundary) + " shape " +
                                    shape_to_string(model.boundary_shapes[static_cast<std::size_t>(boundary)]));
    Tensor cur = activation;
    for (int li = boundary; li < model.logits_boundary(); ++li)
        cur = apply_layer_inference(model, li, cur);
    return cur;
}

int suffix_predict(const NetworkModel& model, int boundary, const Tensor& activation) {
    return argmax_index(suffix_logits(model, boundary, activation));
}

Tensor suffix_logit_grad(const NetworkModel& model, int boundary, const Tensor& activation,
                         int target, Tensor* logits_out) {
    if (boundary < 0 || boundary > model.logits_boundary())
        throw std::invalid_argument("suffix_logit_grad: boundary " + std::to_string(boundary) +
                                    " out of range");
    if (target < 0 || target >= model.class_count)
        throw std::invalid_argument("suffix_logit_grad: class " + std::to_string(target) +
                                    " out of range");
    if (activation.shape != model.boundary_shapes[static_cast<std::size_t>(boundary)])
        throw std::invalid_argument("suffix_logit_grad: activation shape " +
                                    shape_to_string(activation.shape) + " does not match boundary " +
                                    std::to_string(boundary));

    const int lb = model.logits_boundary();
    std::vector<Tensor> acts;  // boundaries boundary..lb
    std::map<int, std::vector<int>> pool_arg;
    acts.push_back(activation);
    for (int li = boundary; li < lb; ++li) {
        std::vector<int>* arg = nullptr;
        if (model.layers[static_cast<std::size_t>(li)].kind == LayerKind::maxpool2d)
            arg = &pool_arg[li];
        acts.push_back(apply_layer_inference(model, li, acts.back(), arg));
    }
    if (logits_out) *logits_out = acts.back();

    Tensor grad(model.boundary_shapes[static_cast<std::size_t>(lb)]);
    grad.data[static_cast<std::size_t>(target)] = 1.0f;
    for (int li = lb - 1; li >= boundary; --li) {
        const std::vector<int>* arg = nullptr;
        if (auto it = pool_arg.find(li); it != pool_arg.end()) arg = &it->second;
        grad = backward_layer_inference(model, li, acts[static_cast<std::size_t>(li - boundary)],
                                        acts[static_cast<std::size_t>(li - boundary) + 1], grad, arg);
    }
    return grad;
}

Tensor grad_of_logit(const NetworkModel& model, const Tensor& input, int target, int boundary) {
    if (!model.is_monitored(boundary))
        throw std::invalid_argument("grad_of_logit: boundary " + std::to_string(boundary) +
                                    " is not monitored");
    const Tensor act = boundary_activation(model, input, boundary);
    return suffix_logit_grad(model, boundary, act, target);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct OptState {
    std::vector<float> mw, mb;  // first moment / momentum buffer
    std::vector<float> vw, vb;  // second moment (adam)
};

struct BatchCaches {
    // bounds[b][s]: boundary-b activation of sample s.
    std::vector<std::vector<Tensor>> bounds;
    std::map<int, std::vector<std::vector<int>>> pool_arg;
    std::map<int, std::vector<std::vector<float>>> drop_mask;
    std::map<int, std::vector<float>> bn_mu, bn_var;
};

void forward_batch_train(NetworkModel& model, const std::vector<const Tensor*>& batch,
                         BatchCaches& cache, Rng& rng) {
    const std::size_t n = batch.size();
    cache.bounds.assign(static_cast<std::size_t>(model.layer_count()) + 1, {});
    cache.bounds[0].reserve(n);
    for (const Tensor* t : batch) cache.bounds[0].push_back(*t);

    for (int li = 0; li < model.layer_count(); ++li) {
        const LayerSpec& s = model.layers[static_cast<std::size_t>(li)];
        auto& in = cache.bounds[static_cast<std::size_t>(li)];
        auto& out = cache.bounds[static_cast<std::size_t>(li) + 1];
        out.reserve(n);
        if (s.kind == LayerKind::batchnorm) {
            LayerParams& p = model.params[static_cast<std::size_t>(li)];
            const std::size_t span = feature_span(in[0].shape);
            const double count = static_cast<double>(n) * static_cast<double>(span);
            std::vector<float>& mu = cache.bn_mu[li];
            std::vector<float>& var = cache.bn_var[li];
            mu.assign(static_cast<std::size_t>(s.features), 0.0f);
            var.assign(static_cast<std::size_t>(s.features), 0.0f);
            for (int f = 0; f < s.features; ++f) {
                const std::size_t fi = static_cast<std::size_t>(f);
                double acc = 0.0;
                for (const Tensor& x : in) {
                    const float* xi = x.data.data() + fi * span;
                    for (std::size_t j = 0; j < span; ++j) acc += xi[j];
                }
                const double m = acc / count;
                double vacc = 0.0;
                for (const Tensor& x : in) {
                    const float* xi = x.data.data() + fi * span;
                    for (std::size_t j = 0; j < span; ++j) {
                        const double d = xi[j] - m;
                        vacc += d * d;
                    }
                }
                mu[fi] = static_cast<float>(m);
                var[fi] = static_cast<float>(vacc / count);
                p.rm[fi] += s.momentum * (mu[fi] - p.rm[fi]);
                p.rv[fi] += s.momentum * (var[fi] - p.rv[fi]);
            }
            for (const Tensor& x : in) {
                Tensor y(x.shape);
                for (int f = 0; f < s.features; ++f) {
                    const std::size_t fi = static_cast<std::size_t>(f);
                    const float scale = p.w[fi] / std::sqrt(var[fi] + s.eps);
                    const float shift = p.b[fi] - mu[fi] * scale;
                    const float* xi = x.data.data() + fi * span;
                    float* yi = y.data.data() + fi * span;
                    for (std::size_t j = 0; j < span; ++j) yi[j] = xi[j] * scale + shift;
                }
                out.push_back(std::move(y));
            }
        } else if (s.kind == LayerKind::dropout) {
            auto& masks = cache.drop_mask[li];
            masks.assign(n, {});
            const float keep_scale = 1.0f / (1.0f - s.rate);
            for (std::size_t si = 0; si < n; ++si) {
                const Tensor& x = in[si];
                Tensor y(x.shape);
                masks[si].resize(x.size());
                for (std::size_t j = 0; j < x.size(); ++j) {
                    const float m = (rng.uniform() < static_cast<double>(s.rate)) ? 0.0f : keep_scale;
                    masks[si][j] = m;
                    y.data[j] = x.data[j] * m;
                }
                out.push_back(std::move(y));
            }
        } else {
            std::vector<std::vector<int>>* args = nullptr;
            if (s.kind == LayerKind::maxpool2d) {
                args = &cache.pool_arg[li];
                args->assign(n, {});
            }
            for (std::size_t si = 0; si < n; ++si)
                out.push_back(apply_layer_inference(model, li, in[si],
                                                    args ? &(*args)[si] : nullptr));
        }
    }
}

struct LayerGrads {
    std::vector<float> gw, gb;
};

void backward_batch_train(const NetworkModel& model, const BatchCaches& cache,
                          std::vector<Tensor> grads,  // per-sample gradient at the logits boundary
                          std::vector<LayerGrads>& acc) {
    const std::size_t n = grads.size();
    for (int li = model.logits_boundary() - 1; li >= 0; --li) {
        const LayerSpec& s = model.layers[static_cast<std::size_t>(li)];
        const LayerParams& p = model.params[static_cast<std::size_t>(li)];
        const auto& xin = cache.bounds[static_cast<std::size_t>(li)];
        const auto& yout = cache.bounds[static_cast<std::size_t>(li) + 1];
        LayerGrads& lg = acc[static_cast<std::size_t>(li)];

        if (s.kind == LayerKind::dense) {
            std::vector<Tensor> gx(n, Tensor(model.boundary_shapes[static_cast<std::size_t>(li)]));
            for (std::size_t si = 0; si < n; ++si) {
                for (int o = 0; o < s.units_out; ++o) {
                    const float g = grads[si].data[static_cast<std::size_t>(o)];
                    if (g == 0.0f) continue;
                    lg.gb[static_cast<std::size_t>(o)] += g;
                    float* gwrow = lg.gw.data() + static_cast<std::size_t>(o) * s.units_in;
                    const float* xi = xin[si].data.data();
                    const float* wrow = p.w.data() + static_cast<std::size_t>(o) * s.units_in;
                    float* gxi = gx[si].data.data();
                    for (int i = 0; i < s.units_in; ++i) {
                        gwrow[i] += g * xi[i];
                        gxi[i] += g * wrow[i];
                    }
                }
            }
            grads = std::move(gx);
        } else if (s.kind == LayerKind::conv2d) {
            const int ih = xin[0].shape[1], iw = xin[0].shape[2];
            const int oh = yout[0].shape[1], ow = yout[0].shape[2];
            const int k = s.kernel, stride = s.stride;
            std::vector<Tensor> gx(n, Tensor(model.boundary_shapes[static_cast<std::size_t>(li)]));
            for (std::size_t si = 0; si < n; ++si) {
                for (int o = 0; o < s.out_channels; ++o) {
                    for (int r = 0; r < oh; ++r) {
                        for (int cc = 0; cc < ow; ++cc) {
                            const float g =
                                grads[si].data[(static_cast<std::size_t>(o) * oh + r) * ow + cc];
                            if (g == 0.0f) continue;
                            lg.gb[static_cast<std::size_t>(o)] += g;
                            for (int i = 0; i < s.in_channels; ++i) {
                                const std::size_t wbase =
                                    ((static_cast<std::size_t>(o) * s.in_channels + i) * k) * k;
                                const float* xi =
                                    xin[si].data.data() + (static_cast<std::size_t>(i) * ih) * iw;
                                float* gxi =
                                    gx[si].data.data() + (static_cast<std::size_t>(i) * ih) * iw;
                                for (int u = 0; u < k; ++u) {
                                    const std::size_t xoff =
                                        static_cast<std::size_t>(r * stride + u) * iw + cc * stride;
                                    for (int v = 0; v < k; ++v) {
                                        lg.gw[wbase + static_cast<std::size_t>(u) * k + v] +=
                                            g * xi[xoff + v];
                                        gxi[xoff + v] += g * p.w[wbase + static_cast<std::size_t>(u) * k + v];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            grads = std::move(gx);
        } else if (s.kind == LayerKind::batchnorm) {
            const std::size_t span = feature_span(xin[0].shape);
            const float count = static_cast<float>(n) * static_cast<float>(span);
            const std::vector<float>& mu = cache.bn_mu.at(li);
            const std::vector<float>& var = cache.bn_var.at(li);
            std::vector<Tensor> gx(n, Tensor(model.boundary_shapes[static_cast<std::size_t>(li)]));
            for (int f = 0; f < s.features; ++f) {
                const std::size_t fi = static_cast<std::size_t>(f);
                const float inv_sd = 1.0f / std::sqrt(var[fi] + s.eps);
                float sum_g = 0.0f, sum_gx = 0.0f;
                for (std::size_t si = 0; si < n; ++si) {
                    const float* gyi = grads[si].data.data() + fi * span;
                    const float* xi = xin[si].data.data() + fi * span;
                    for (std::size_t j = 0; j < span; ++j) {
                        const float xhat = (xi[j] - mu[fi]) * inv_sd;
                        sum_g += gyi[j];
                        sum_gx += gyi[j] * xhat;
                    }
                }
                lg.gb[fi] += sum_g;
                lg.gw[fi] += sum_gx;
                const float gscale = p.w[fi] * inv_sd;
                for (std::size_t si = 0; si < n; ++si) {
                    const float* gyi = grads[si].data.data() + fi * span;
                    const float* xi = xin[si].data.data() + fi * span;
                    float* gxi = gx[si].data.data() + fi * span;
                    for (std::size_t j = 0; j < span; ++j) {
                        const float xhat = (xi[j] - mu[fi]) * inv_sd;
                        gxi[j] = gscale * (gyi[j] - sum_g / count - xhat * sum_gx / count);
                    }
                }
            }
            grads = std::move(gx);
        } else if (s.kind == LayerKind::dropout) {
            const auto& masks = cache.drop_mask.at(li);
            for (std::size_t si = 0; si < n; ++si) {
                Tensor gx(model.boundary_shapes[static_cast<std::size_t>(li)]);
                for (std::size_t j = 0; j < gx.size(); ++j)
                    gx.data[j] = grads[si].data[j] * masks[si][j];
                grads[si] = std::move(gx);
            }
        } else {
            for (std::size_t si = 0; si < n; ++si) {
                const std::vector<int>* arg = nullptr;
                if (auto it = cache.pool_arg.find(li); it != cache.pool_arg.end())
                    arg = &it->second[si];
                grads[si] =
                    backward_layer_inference(model, li, xin[si], yout[si], grads[si], arg);
            }
        }
    }
}

void apply_update(std::vector<float>& p, const std::vector<float>& g, std::vector<float>& m,
                  std::vector<float>& v, const TrainConfig& cfg, float inv_batch, long step) {
    if (p.empty()) return;
    if (cfg.optimizer == "sgd") {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= cfg.learning_rate * g[i] * inv_batch;
    } else if (cfg.optimizer == "sgd_momentum") {
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = cfg.momentum * m[i] + g[i] * inv_batch;
            p[i] -= cfg.learning_rate * m[i];
        }
    } else {  // adam
        const float bc1 = 1.0f - std::pow(cfg.beta1, static_cast<float>(step));
        const float bc2 = 1.0f - std::pow(cfg.beta2, static_cast<float>(step));
        for (std::size_t i = 0; i < p.size(); ++i) {
            const float gi = g[i] * inv_batch;
            m[i] = cfg.beta1 * m[i] + (1.0f - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0f - cfg.beta2) * gi * gi;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            p[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

}  // namespace

std::vector<EpochStats> train_classifier(NetworkModel& model, const LabeledDataset& train_set,
                                         const TrainConfig& config) {
    if (train_set.size() == 0) throw std::invalid_argument("train_classifier: empty dataset");
    if (config.epochs < 0) throw std::invalid_argument("train_classifier: epochs must be >= 0");
    if (config.batch_size < 1) throw std::invalid_argument("train_classifier: batch_size must be >= 1");
    if (!(config.learning_rate > 0.0f))
        throw std::invalid_argument("train_classifier: learning_rate must be positive");
    if (config.optimizer != "sgd" && config.optimizer != "sgd_momentum" && config.optimizer != "adam")
        throw std::invalid_argument("train_classifier: unknown optimizer '" + config.optimizer + "'");
    for (int y : train_set.labels)
        if (y < 0 || y >= model.class_count)
            throw std::invalid_argument("train_classifier: label " + std::to_string(y) +
                                        " outside model classes");

    Rng rng(config.rng_seed);
    std::vector<OptState> opt(model.layers.size());
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        opt[i].mw.assign(model.params[i].w.size(), 0.0f);
        opt[i].mb.assign(model.params[i].b.size(), 0.0f);
        opt[i].vw.assign(model.params[i].w.size(), 0.0f);
        opt[i].vb.assign(model.params[i].b.size(), 0.0f);
    }

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<EpochStats> history;
    long step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        std::size_t correct = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            const std::size_t bn = end - start;
            std::vector<const Tensor*> batch(bn);
            for (std::size_t i = 0; i < bn; ++i) batch[i] = &train_set.images[order[start + i]];

            BatchCaches cache;
            forward_batch_train(model, batch, cache, rng);

            std::vector<Tensor> grads;
            grads.reserve(bn);
            double batch_loss = 0.0;
            const auto& probs = cache.bounds.back();
            const auto& logits = cache.bounds[cache.bounds.size() - 2];
            for (std::size_t i = 0; i < bn; ++i) {
                const int y = train_set.labels[order[start + i]];
                const float py = std::max(probs[i].data[static_cast<std::size_t>(y)], 1e-12f);
                batch_loss += -std::log(static_cast<double>(py));
                if (argmax_index(probs[i]) == y) ++correct;
                Tensor g(logits[i].shape);
                for (std::size_t c = 0; c < g.size(); ++c) g.data[c] = probs[i].data[c];
                g.data[static_cast<std::size_t>(y)] -= 1.0f;
                grads.push_back(std::move(g));
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_classifier: non-finite loss at epoch " +
                                         std::to_string(epoch) + ", batch " +
                                         std::to_string(start / static_cast<std::size_t>(config.batch_size)));
            epoch_loss += batch_loss;

            std::vector<LayerGrads> acc(model.layers.size());
            for (std::size_t i = 0; i < model.layers.size(); ++i) {
                acc[i].gw.assign(model.params[i].w.size(), 0.0f);
                acc[i].gb.assign(model.params[i].b.size(), 0.0f);
            }
            backward_batch_train(model, cache, std::move(grads), acc);

            ++step;
            const float inv_batch = 1.0f / static_cast<float>(bn);
            for (std::size_t i = 0; i < model.layers.size(); ++i) {
                const LayerKind kind = model.layers[i].kind;
                if (kind != LayerKind::dense && kind != LayerKind::conv2d &&
                    kind != LayerKind::batchnorm)
                    continue;
                apply_update(model.params[i].w, acc[i].gw, opt[i].mw, opt[i].vw, config, inv_batch, step);
                apply_update(model.params[i].b, acc[i].gb, opt[i].mb, opt[i].vb, config, inv_batch, step);
            }
        }
        history.push_back({epoch_loss / static_cast<double>(order.size()),
                           static_cast<double>(correct) / static_cast<double>(order.size())});
    }
    return history;
}

double evaluate_accuracy(const NetworkModel& model, const LabeledDataset& dataset) {
    if (dataset.size() == 0) throw std::invalid_argument("evaluate_accuracy: empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (predict(model, dataset.images[i]) == dataset.labels[i]) ++correct;
    return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

namespace {

json layer_to_json(const LayerSpec& s) {
    json j;
    j["kind"] = layer_kind_name(s.kind);
    switch (s.kind) {
        case LayerKind::dense:
            j["units_in"] = s.units_in;
            j["units_out"] = s.units_out;
            break;
        case LayerKind::conv2d:
            j["in_channels"] = s.in_channels;
            j["out_channels"] = s.out_channels;
            j["kernel"] = s.kernel;
            j["stride"] = s.stride;
            break;
        case LayerKind::maxpool2d: j["pool"] = s.pool; break;
        case LayerKind::batchnorm:
            j["features"] = s.features;
            j["momentum"] = s.momentum;
            j["eps"] = s.eps;
            break;
        case LayerKind::dropout: j["rate"] = s.rate; break;
        default: break;
    }
    return j;
}

LayerSpec layer_from_json(const json& j) {
    const LayerKind kind = layer_kind_from_name(j.at("kind").get<std::string>());
    switch (kind) {
        case LayerKind::dense:
            return dense_layer(j.at("units_in").get<int>(), j.at("units_out").get<int>());
        case LayerKind::conv2d:
            return conv2d_layer(j.at("in_channels").get<int>(), j.at("out_channels").get<int>(),
                                j.at("kernel").get<int>(), j.at("stride").get<int>());
        case LayerKind::relu: return relu_layer();
        case LayerKind::maxpool2d: return maxpool2d_layer(j.at("pool").get<int>());
        case LayerKind::batchnorm:
            return batchnorm_layer(j.at("features").get<int>(), j.at("momentum").get<float>(),
                                   j.at("eps").get<float>());
        case LayerKind::dropout: return dropout_layer(j.at("rate").get<float>());
        case LayerKind::flatten: return flatten_layer();
        case LayerKind::softmax: return softmax_layer();
    }
    throw std::logic_error("layer_from_json: unreachable");
}

std::vector<std::uint8_t> param_blob(const NetworkModel& model) {
    std::vector<std::uint8_t> blob;
    for (const LayerParams& p : model.params) {
        append_f32_span_le(blob, p.w.data(), p.w.size());
        append_f32_span_le(blob, p.b.data(), p.b.size());
        append_f32_span_le(blob, p.rm.data(), p.rm.size());
        append_f32_span_le(blob, p.rv.data(), p.rv.size());
    }
    return blob;
}

}  // namespace

std::uint64_t model_param_hash(const NetworkModel& model) {
    const std::vector<std::uint8_t> blob = param_blob(model);
    return fnv1a64(blob.data(), blob.size());
}

void save_model(const NetworkModel& model, const std::string& path) {
    json header;
    header["arch"] = json::array();
    for (const LayerSpec& s : model.layers) header["arch"].push_back(layer_to_json(s));
    header["class_count"] = model.class_count;
    header["input_shape"] = model.input_shape;
    header["kind"] = "model";
    header["monitored_layers"] = model.monitored;
    const std::vector<std::uint8_t> blob = param_blob(model);
    header["param_hash"] = hash_hex(fnv1a64(blob.data(), blob.size()));
    header["version"] = 1;
    write_blob_file(path, header, blob);
}

NetworkModel load_model(const std::string& path) {
    const BlobFile file = read_blob_file(path);
    if (file.header.value("kind", "") != "model")
        throw std::runtime_error(path + ": not a model file");
    std::vector<LayerSpec> layers;
    for (const json& lj : file.header.at("arch")) layers.push_back(layer_from_json(lj));
    NetworkModel model = make_network(file.header.at("input_shape").get<std::vector<int>>(),
                                      file.header.at("class_count").get<int>(), std::move(layers));
    BlobReader reader(file.blob.data(), file.blob.size());
    for (LayerParams& p : model.params) {
        reader.f32_array(p.w.data(), p.w.size());
        reader.f32_array(p.b.data(), p.b.size());
        reader.f32_array(p.rm.data(), p.rm.size());
        reader.f32_array(p.rv.data(), p.rv.size());
    }
    reader.expect_exhausted(path);
    const std::string expect = file.header.at("param_hash").get<std::string>();
    const std::string got = hash_hex(model_param_hash(model));
    if (expect != got)
        throw std::runtime_error(path + ": parameter hash mismatch (header " + expect +
                                 ", blob " + got + ")");
    return model;
}

}  // namespace misa
