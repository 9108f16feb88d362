#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "misa/datakit.hpp"
#include "misa/tensor.hpp"

namespace misa {

enum class LayerKind { dense, conv2d, relu, maxpool2d, batchnorm, dropout, flatten, softmax };

std::string layer_kind_name(LayerKind kind);
LayerKind layer_kind_from_name(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int units_in = 0, units_out = 0;        // dense
    int in_channels = 0, out_channels = 0;  // conv2d
    int kernel = 0, stride = 1;             // conv2d
    int pool = 0;                           // maxpool2d
    int features = 0;                       // batchnorm
    float rate = 0.0f;                      // dropout
    float momentum = 0.1f, eps = 1e-5f;     // batchnorm
};

LayerSpec dense_layer(int units_in, int units_out);
LayerSpec conv2d_layer(int in_channels, int out_channels, int kernel, int stride = 1);
LayerSpec relu_layer();
LayerSpec maxpool2d_layer(int pool);
LayerSpec batchnorm_layer(int features, float momentum = 0.1f, float eps = 1e-5f);
LayerSpec dropout_layer(float rate);
LayerSpec flatten_layer();
LayerSpec softmax_layer();

// Static output-shape function; throws on any incompatible input shape.
std::vector<int> layer_output_shape(const LayerSpec& spec, const std::vector<int>& in_shape);

struct LayerParams {
    std::vector<float> w, b;    // dense/conv weight+bias; batchnorm gamma/beta
    std::vector<float> rm, rv;  // batchnorm running mean/variance
};

// Boundary b is the activation flowing into layer b (boundary 0 = network
// input, boundary L = softmax output). Monitored boundaries are 0 plus the
// output of every relu; the logits boundary is the softmax layer's input.
struct NetworkModel {
    std::vector<int> input_shape;  // {C,H,W}
    int class_count = 0;
    std::vector<LayerSpec> layers;
    std::vector<LayerParams> params;
    std::vector<std::vector<int>> boundary_shapes;
    std::vector<int> monitored;

    int layer_count() const { return static_cast<int>(layers.size()); }
    int logits_boundary() const { return layer_count() - 1; }
    bool is_monitored(int boundary) const;
};

NetworkModel make_network(std::vector<int> input_shape, int class_count,
                          std::vector<LayerSpec> layers);

// Named presets: mlp_small, cnn_small, cnn_bn (16x16-class scale), cnn_mnist.
NetworkModel make_architecture(const std::string& name, const std::vector<int>& input_shape,
                               int class_count);

// Fan-in-scaled uniform weights, zero biases, identity batchnorm. Seeded.
void init_params(NetworkModel& model, std::uint64_t seed);

struct ForwardResult {
    Tensor logits;
    Tensor probs;
    int predicted = 0;
    std::map<int, Tensor> tapped;  // boundary index -> activation
};

// Inference-mode forward (dropout off, batchnorm running stats).
ForwardResult forward_with_taps(const NetworkModel& model, const Tensor& input,
                                const std::vector<int>& taps);
int predict(const NetworkModel& model, const Tensor& input);
Tensor boundary_activation(const NetworkModel& model, const Tensor& input, int boundary);

// Forward from a boundary's activation through the remaining layers.
Tensor suffix_logits(const NetworkModel& model, int boundary, const Tensor& activation);
int suffix_predict(const NetworkModel& model, int boundary, const Tensor& activation);

// d logit[target] / d activation(boundary), evaluated at the given activation.
// Optionally reports the logits of the same pass.
Tensor suffix_logit_grad(const NetworkModel& model, int boundary, const Tensor& activation,
                         int target, Tensor* logits_out = nullptr);

// Same gradient for the activations induced by a concrete input image.
Tensor grad_of_logit(const NetworkModel& model, const Tensor& input, int target, int boundary);

struct TrainConfig {
    int epochs = 10;
    int batch_size = 64;
    float learning_rate = 1e-3f;
    std::string optimizer = "adam";  // sgd | sgd_momentum | adam
    float momentum = 0.9f;
    float beta1 = 0.9f, beta2 = 0.999f;
    float adam_eps = 1e-8f;
    std::uint64_t rng_seed = 1;
};

struct EpochStats {
    double loss = 0.0;
    double accuracy = 0.0;
};

// In-place minibatch training with cross-entropy loss. Deterministic under
// (config, data, seed). Throws on non-finite loss with epoch/batch context.
std::vector<EpochStats> train_classifier(NetworkModel& model, const LabeledDataset& train_set,
                                         const TrainConfig& config);

double evaluate_accuracy(const NetworkModel& model, const LabeledDataset& dataset);

void save_model(const NetworkModel& model, const std::string& path);
NetworkModel load_model(const std::string& path);

// FNV-1a fingerprint of the serialized parameter blob.
std::uint64_t model_param_hash(const NetworkModel& model);

}  // namespace misa
