#pragma once

#include "bnnoise/data_io.hpp"
#include "bnnoise/nn.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bnnoise {

enum class OptimizerKind { Sgd, Adam };

struct AugmentPolicy {
    bool flip = false;
    double flip_probability = 0.5;
    bool crop = false;
    std::size_t crop_padding = 4;
};

struct Hyperparams {
    double learning_rate = 1e-3;
    std::size_t batch_size = 128;
    std::size_t epochs = 30;
    OptimizerKind optimizer = OptimizerKind::Adam;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-7;
    AugmentPolicy augment;
    /// Multiply the learning rate by 0.1 at 50% and 75% of the epochs.
    bool step_decay = false;
    /// Absolute train accuracy that counts as convergence.
    double convergence_threshold = 0.95;
    /// Fraction of a reference (full-BN) train accuracy that also counts.
    double relative_threshold = 0.99;
    std::uint64_t seed = 0;
};

void validate(const Hyperparams& hyper);

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double train_accuracy = 0.0;
    std::optional<double> test_accuracy;
};

struct TrainReport {
    std::vector<EpochStats> epochs;
    double final_train_accuracy = 0.0;
    std::optional<double> test_accuracy;  // a0 when a test set was given
    bool converged = false;
    bool diverged = false;
    std::string diagnostic;
    double wall_seconds = 0.0;
};

/// Uniform(-L, L) with L = sqrt(6 / (fan_in + fan_out)).
Tensor init_glorot_uniform(std::size_t fan_in, std::size_t fan_out, const Shape& shape, RngStream& rng);
/// Glorot kernels (conv fans include the receptive field), zero biases.
void initialize_model(Model& model, RngStream& rng);

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::size_t step = 0;
};

/// One Adam update with bias correction on a flat list of tensors.
void adam_step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads, AdamState& state,
               double learning_rate, double beta1, double beta2, double eps);

class Optimizer {
public:
    Optimizer(const Model& model, const Hyperparams& hyper);
    void step(Model& model, const Gradients& grads, double learning_rate);

private:
    OptimizerKind kind_;
    double beta1_, beta2_, eps_;
    AdamState adam_;
};

Tensor flip_horizontal(const Tensor& images, std::size_t index);
/// Random horizontal flip and padded random crop, applied per image.
Tensor augment_batch(const Tensor& images, RngStream& rng, const AugmentPolicy& policy);

struct TrainResult {
    Model model;
    TrainReport report;
};

/// Trains a model built from `spec` with the given BN mask. Deterministic for
/// a fixed seed. A NaN/Inf loss or chance-level accuracy past half the budget
/// is reported as divergence, not thrown.
TrainResult train(const ModelSpec& spec, const std::vector<bool>& bn_mask, const Dataset& train_set,
                  const Hyperparams& hyper, const Dataset* test_set = nullptr,
                  std::optional<double> reference_accuracy = std::nullopt);

struct SearchCandidate {
    std::size_t bn_count = 0;
    std::vector<bool> mask;
    TrainReport report;
};

struct SearchResult {
    std::vector<bool> mask;
    std::size_t bn_count = 0;
    TrainReport full_bn;
    std::vector<SearchCandidate> candidates;  // in evaluation order
};

class SearchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Smallest BN count, in the template's insertion order, that converges
/// within `budget` epochs.
SearchResult search_min_batchnorm(const ModelSpec& spec, const Dataset& data, const Hyperparams& hyper,
                                  std::size_t budget);

void write_training_curve(const TrainReport& report, const std::filesystem::path& path,
                          const std::string& config_digest);

}  // namespace bnnoise
