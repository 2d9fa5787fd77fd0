#pragma once

#include "bnnoise/tensor.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace bnnoise {

enum class LayerKind : std::uint8_t {
    Dense = 0,
    Conv2d = 1,
    BatchNorm = 2,
    Relu = 3,
    MaxPool = 4,
    AvgPool = 5,
    Flatten = 6,
    ResidualEntry = 7,
    ResidualExit = 8,
};

std::string to_string(LayerKind kind);
bool has_weights(LayerKind kind);

/// One layer of a sequential network description.
///
/// Field meaning depends on the kind:
///   Dense      in = fan-in, out = fan-out
///   Conv2d     in = input channels, out = filters, kernel/stride/padding
///   BatchNorm  in = channels, eps, momentum
///   MaxPool    kernel, stride
///   AvgPool    kernel, stride (kernel 0 pools the whole feature map)
/// ResidualEntry saves the current activation; the matching ResidualExit adds
/// it back through an identity shortcut, subsampled and zero-padded in
/// channels when the main path changed shape.
struct LayerSpec {
    LayerKind kind = LayerKind::Relu;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    double eps = 1e-5;
    double momentum = 0.9;

    static LayerSpec dense(std::size_t in, std::size_t out);
    static LayerSpec conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride = 1,
                          std::size_t padding = 0);
    static LayerSpec batchnorm(std::size_t channels, double eps = 1e-5, double momentum = 0.9);
    static LayerSpec relu();
    static LayerSpec maxpool(std::size_t kernel, std::size_t stride);
    static LayerSpec avgpool(std::size_t kernel, std::size_t stride);
    static LayerSpec global_avgpool();
    static LayerSpec flatten();
    static LayerSpec residual_entry();
    static LayerSpec residual_exit();

    friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

enum class ParamRole : std::uint8_t { Kernel = 0, Bias = 1, BnGamma = 2, BnBeta = 3 };
enum class BufferRole : std::uint8_t { RunningMean = 0, RunningVar = 1 };

struct Layer {
    LayerSpec spec;
    /// Trainable tensors: {kernel, bias} for dense/conv, {gamma, beta} for BN.
    std::vector<Tensor> params;
    /// Non-trainable BN buffers: {running_mean, running_var}.
    std::vector<Tensor> buffers;

    ParamRole role(std::size_t param_index) const;
};

/// Architecture template before BatchNorm insertion.
struct ModelSpec {
    std::string name;
    Shape input_shape;  // per sample, e.g. {3, 32, 32}
    std::size_t classes = 0;
    std::vector<LayerSpec> layers;
    /// Order in which weighted-layer positions receive BatchNorm when a
    /// partial mask is built from a BN count.
    std::vector<std::size_t> bn_policy_order;
    double bn_eps = 1e-5;
    double bn_momentum = 0.9;

    std::size_t weighted_layer_count() const;
};

struct Model {
    std::string name;
    Shape input_shape;
    std::size_t classes = 0;
    std::vector<Layer> layers;
    /// One entry per dense/conv layer: true when a BatchNorm follows it.
    std::vector<bool> bn_mask;

    std::size_t parameter_count() const;
    std::size_t buffer_count() const;
    std::size_t batchnorm_count() const;
};

/// Materializes a template with BatchNorm after every masked weighted layer.
/// Weights start at zero; BN starts at gamma=1, beta=0, mean=0, var=1.
Model build_model(const ModelSpec& spec, const std::vector<bool>& bn_mask);

std::vector<bool> full_bn_mask(const ModelSpec& spec);
std::vector<bool> no_bn_mask(const ModelSpec& spec);
/// Mask with the first `count` positions of the template's policy order set.
std::vector<bool> policy_mask(const ModelSpec& spec, std::size_t count);

std::string bn_mode_string(const std::vector<bool>& mask);
/// Parses "full", "none" or "partial:<bits>" against a template.
std::vector<bool> parse_bn_mode(const std::string& text, const ModelSpec& spec);

/// Output shapes of each layer for a per-sample input shape; throws ShapeError
/// when adjacent layers do not compose.
std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Shape& input_shape);

// ---------------------------------------------------------------------------
// Architectures

ModelSpec mlp_spec(const Shape& input_shape, const std::vector<std::size_t>& hidden, std::size_t classes);
/// CIFAR-style ResNet with 3 stages of `blocks_per_stage` basic blocks;
/// depth = 6 * blocks_per_stage + 2. One block per stage gives MicroResNet-8.
ModelSpec resnet_spec(const Shape& input_shape, std::size_t blocks_per_stage, std::size_t classes,
                      std::size_t base_width = 16);
/// MicroVGG-6: 4 conv layers in two pooled stages and 2 dense layers.
ModelSpec micro_vgg_spec(const Shape& input_shape, std::size_t classes, std::size_t base_width = 16);
ModelSpec vgg16_spec(const Shape& input_shape, std::size_t classes);

// ---------------------------------------------------------------------------
// BatchNorm

struct BatchNormState {
    Tensor gamma;
    Tensor beta;
    Tensor running_mean;
    Tensor running_var;
    double eps = 1e-5;
    double momentum = 0.9;

    static BatchNormState fresh(std::size_t channels, double eps = 1e-5, double momentum = 0.9);
    std::size_t channels() const { return gamma.size(); }
};

BatchNormState bn_state_of(const Layer& layer);

/// Per-channel statistics kept from a forward pass.
struct BNCache {
    Tensor input;        // y_j
    Tensor normalized;   // y-hat_j
    std::vector<double> batch_mean;
    std::vector<double> batch_var;  // biased
    std::vector<double> sigma;      // sqrt(var + eps) used by the forward map
    std::size_t per_channel = 0;    // m: samples x spatial positions
    bool training = true;
};

struct BNForward {
    Tensor output;
    BNCache cache;
    BatchNormState state;  // with running statistics updated
};

struct BNGrads {
    Tensor dx;
    Tensor dgamma;
    Tensor dbeta;
};

BNForward batchnorm_forward_train(const Tensor& x, const BatchNormState& state);
Tensor batchnorm_forward_infer(const Tensor& x, const BatchNormState& state);
BNCache batchnorm_infer_cache(const Tensor& x, const BatchNormState& state);
BNGrads batchnorm_backward(const Tensor& dy, const BNCache& cache, const BatchNormState& state);

// ---------------------------------------------------------------------------
// Other layer kernels (batched; first axis is the sample axis)

Tensor dense_forward(const Tensor& x, const Tensor& kernel, const Tensor& bias);
struct DenseGrads {
    Tensor dx;
    Tensor dkernel;
    Tensor dbias;
};
DenseGrads dense_backward(const Tensor& dy, const Tensor& x, const Tensor& kernel);

Tensor conv_forward(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                    std::size_t padding);
struct ConvGrads {
    Tensor dx;
    Tensor dkernel;
    Tensor dbias;
};
ConvGrads conv_backward(const Tensor& dy, const Tensor& x, const Tensor& kernel, std::size_t stride,
                        std::size_t padding);

Tensor relu_forward(const Tensor& x);
Tensor relu_backward(const Tensor& dy, const Tensor& x);

struct PoolForward {
    Tensor output;
    std::vector<std::size_t> argmax;  // flat input index per output element
};
PoolForward maxpool_forward(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor maxpool_backward(const Tensor& dy, const std::vector<std::size_t>& argmax, const Shape& input_shape);
Tensor avgpool_forward(const Tensor& x, std::size_t kernel, std::size_t stride);
Tensor avgpool_backward(const Tensor& dy, const Shape& input_shape, std::size_t kernel, std::size_t stride);

Tensor shortcut_forward(const Tensor& x, const Shape& out_shape);
Tensor shortcut_backward(const Tensor& dy, const Shape& in_shape);

// ---------------------------------------------------------------------------
// Loss

Tensor softmax(const Tensor& logits);
struct LossResult {
    double loss = 0.0;
    Tensor dlogits;  // gradient of the mean loss
};
/// Mean categorical cross-entropy of softmax(logits); throws DomainError on a
/// label outside [0, classes).
LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels);

// ---------------------------------------------------------------------------
// Whole-model passes

enum class Mode { Train, Infer };

struct LayerCache {
    Tensor input;        // dense, conv, relu
    Shape input_shape;   // every layer
    Shape shortcut_shape;
    std::vector<std::size_t> argmax;
    BNCache bn;
};

struct ForwardCache {
    Mode mode = Mode::Train;
    std::vector<LayerCache> layers;
};

struct ForwardResult {
    Tensor logits;
    std::optional<ForwardCache> cache;
};

/// Per-parameter gradients laid out like Model::layers[i].params.
using Gradients = std::vector<std::vector<Tensor>>;

/// Runs the network. Train mode normalizes with batch statistics and keeps the
/// cache; infer mode uses running statistics and keeps the cache only when
/// `retain_cache` is set. The model is never modified.
ForwardResult model_forward(const Model& model, const Tensor& batch, Mode mode, bool retain_cache = false);

/// Folds the batch statistics of a train-mode pass into the running buffers.
void update_running_stats(Model& model, const ForwardCache& cache);

Gradients backward_from_logits(const Model& model, const ForwardCache& cache, const Tensor& dlogits);

struct BackwardResult {
    double loss = 0.0;
    Gradients grads;
};
BackwardResult model_backward(const Model& model, const ForwardCache& cache, const Tensor& logits,
                              std::span<const int> labels);

Gradients zeros_like_params(const Model& model);
/// Concatenation in layer order, kernels before biases (BN gamma before beta).
std::vector<double> flatten_gradients(const Gradients& grads);

}  // namespace bnnoise
