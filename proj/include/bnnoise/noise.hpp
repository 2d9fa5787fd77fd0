#pragma once

#include "bnnoise/data_io.hpp"
#include "bnnoise/nn.hpp"

#include <cstdint>
#include <vector>

namespace bnnoise {

/// Parameter groups that receive additive weight noise.
enum ParamGroup : unsigned {
    kKernels = 1u << 0,
    kBiases = 1u << 1,
    kBnParams = 1u << 2,
};

struct NoiseSpec {
    /// Noise form factor: sigma_noise = eta * sigma_w. eta = 1 / SNR.
    double eta = 0.0;
    unsigned groups = kKernels;
    std::size_t trials = 25;
    std::uint64_t master_seed = 0;
};

void validate(const NoiseSpec& spec);

double eta_from_snr(double snr);
double snr_from_eta(double eta);

bool targets(const NoiseSpec& spec, ParamRole role);

/// Population standard deviation of one parameter group.
double layer_sigma_w(const Tensor& group);

struct GroupPerturbation {
    std::size_t layer = 0;
    ParamRole role = ParamRole::Kernel;
    double sigma_w = 0.0;
    double sigma_noise = 0.0;
    std::size_t count = 0;
};

struct PerturbationRecord {
    std::vector<GroupPerturbation> groups;
};

struct PerturbedModel {
    Model model;
    PerturbationRecord record;
};

/// Copy of `model` with w' = w + N(0, (eta * sigma_w)^2) added to every
/// targeted group; sigma_w is taken from the clean group. Groups are visited
/// in layer order, params in storage order, drawing from `rng`.
PerturbedModel perturb_model(const Model& model, const NoiseSpec& spec, RngStream& rng);

/// Accuracy of trial `trial`: perturbation drawn from RngStream(master_seed, trial).
double evaluate_trial(const Model& model, const Dataset& test, const NoiseSpec& spec, std::size_t trial);

struct MonteCarloResult {
    double mean = 0.0;
    double stddev = 0.0;  // sample std over trials; 0 for a single trial
    std::vector<double> accuracies;
};

MonteCarloResult monte_carlo_eval(const Model& model, const Dataset& test, const NoiseSpec& spec);

}  // namespace bnnoise
