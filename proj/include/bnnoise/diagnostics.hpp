#pragma once

#include "bnnoise/data_io.hpp"
#include "bnnoise/nn.hpp"
#include "bnnoise/trainer.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace bnnoise {

using GradientRows = std::vector<std::vector<double>>;

/// Flattened gradient of each sample's loss (layer order, kernel before bias).
/// BatchNorm layers run in inference mode so single-sample passes are defined.
GradientRows per_sample_gradients(const Model& model, const Dataset& data);

/// C = (1/N) sum_i ||g_i - g_mean||^2.
double gradient_noise_C(const GradientRows& grads);
double estimate_gradient_noise_C(const Model& model, const Dataset& data);

struct NoiseBoundCheck {
    std::size_t samples = 0;      // N
    std::size_t batch = 0;        // B
    std::size_t subsets = 0;      // C(N, B)
    double alpha = 0.0;
    double noise_c = 0.0;
    double lhs = 0.0;             // E over all size-B subsets of ||alpha g_B - alpha g||^2
    double rhs = 0.0;             // alpha^2 C / B
    double exact = 0.0;           // alpha^2 C (N - B) / (B (N - 1))
    double mean_deviation_norm = 0.0;  // ||E[g_B - g]||, zero by symmetry
    bool verdict = false;         // lhs <= rhs, up to 1e-12 relative
};

/// Exhaustive enumeration over every size-B subset (sampling without replacement).
NoiseBoundCheck verify_sgd_noise_bound(const GradientRows& grads, double alpha, std::size_t batch);
NoiseBoundCheck verify_sgd_noise_bound(const Model& model, const Dataset& data, double alpha, std::size_t batch);

using ScalarField = std::function<double(std::span<const double>)>;

/// max over probe pairs of |f(x1) - f(x2)| / ||x1 - x2||; coincident pairs are skipped.
double empirical_lipschitz(const ScalarField& f, const std::vector<std::vector<double>>& probes);

struct LipschitzProbe {
    double loss_ratio = 0.0;
    double gradient_norm_ratio = 0.0;
};

/// Probes the train-mode loss and loss-gradient norm along one random unit
/// direction in parameter space, at `points` evenly spaced offsets in [-radius, radius].
LipschitzProbe probe_lipschitz(const Model& model, const Dataset& data, RngStream& rng, double radius,
                               std::size_t points);

struct BnInequalityResult {
    std::vector<double> lhs;  // per channel ||dL/dx||^2 from batchnorm_backward
    std::vector<double> rhs;
    std::vector<bool> verdict;
    bool all_hold = true;
};

/// Per-channel check of
///   ||dx||^2 <= gamma^2 / sigma^2 (||g||^2 - <1,g>^2 / m - <g,y_hat>^2 / m)
/// for the upstream gradient g of one batch-normalized layer.
BnInequalityResult bn_gradient_inequality_check(const BNCache* cache, const BatchNormState& state,
                                                const Tensor& upstream);

struct BnAuditResult {
    std::size_t instances = 0;
    std::size_t failures = 0;
    double max_lhs_over_rhs = 0.0;  // over instances with rhs > 0
};

/// Randomized audit of the inequality on single-layer BN instances with
/// m in {4, 8, 16}, random gamma, input scale and upstream gradient.
BnAuditResult audit_bn_inequality(std::size_t instances, std::uint64_t seed);

struct SmoothnessSeries {
    std::vector<double> distances;
    bool truncated = false;
};

struct SmoothnessProbe {
    SmoothnessSeries with_bn;
    SmoothnessSeries without_bn;
};

/// For each step t: g_t = grad of the batch loss at theta_t, take the
/// optimizer step, and record ||g_t - grad at theta_{t+1}|| on the same batch.
/// Only dense/conv kernels and biases enter the distance so both variants are
/// measured over the same parameters.
SmoothnessSeries gradient_smoothness_series(const ModelSpec& spec, const std::vector<bool>& mask,
                                            const Dataset& data, const Hyperparams& hyper, std::size_t steps);
SmoothnessProbe gradient_smoothness_probe(const ModelSpec& spec, const std::vector<bool>& with_bn,
                                          const std::vector<bool>& without_bn, const Dataset& data,
                                          const Hyperparams& hyper, std::size_t steps);

double median(std::vector<double> values);

/// Ordered key-value report.
struct DiagnosticsReport {
    std::vector<std::pair<std::string, std::string>> entries;

    void add(const std::string& key, const std::string& value);
    void add(const std::string& key, double value);
    void add(const std::string& key, std::size_t value);
    void add(const std::string& key, bool value);
    std::string text() const;
    void write(const std::filesystem::path& path) const;
};

}  // namespace bnnoise
