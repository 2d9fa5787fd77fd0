#include "bnnoise/noise.hpp"

#include "bnnoise/metrics.hpp"

#include <cmath>

namespace bnnoise {

void validate(const NoiseSpec& spec)
{
    if (!(spec.eta >= 0.0) || !std::isfinite(spec.eta)) throw DomainError("eta must be a finite value >= 0");
    if (spec.trials == 0) throw DomainError("trials must be at least 1");
}

double eta_from_snr(double snr)
{
    if (!(snr > 0.0)) throw DomainError("SNR must be positive");
    return 1.0 / snr;
}

double snr_from_eta(double eta)
{
    if (!(eta > 0.0)) throw DomainError("SNR is defined only for eta > 0");
    return 1.0 / eta;
}

bool targets(const NoiseSpec& spec, ParamRole role)
{
    switch (role) {
    case ParamRole::Kernel: return (spec.groups & kKernels) != 0;
    case ParamRole::Bias: return (spec.groups & kBiases) != 0;
    case ParamRole::BnGamma:
    case ParamRole::BnBeta: return (spec.groups & kBnParams) != 0;
    }
    return false;
}

double layer_sigma_w(const Tensor& group)
{
    if (group.empty()) throw DomainError("sigma_w of an empty parameter group");
    return population_std(group);
}

PerturbedModel perturb_model(const Model& model, const NoiseSpec& spec, RngStream& rng)
{
    validate(spec);
    PerturbedModel out{model, {}};
    for (std::size_t li = 0; li < out.model.layers.size(); ++li) {
        Layer& layer = out.model.layers[li];
        for (std::size_t pi = 0; pi < layer.params.size(); ++pi) {
            const ParamRole role = layer.role(pi);
            if (!targets(spec, role)) continue;
            Tensor& w = layer.params[pi];
            GroupPerturbation g;
            g.layer = li;
            g.role = role;
            g.sigma_w = layer_sigma_w(w);
            g.sigma_noise = spec.eta * g.sigma_w;
            g.count = w.size();
            out.record.groups.push_back(g);
            if (g.sigma_noise == 0.0) continue;
            for (double& v : w.data()) v += g.sigma_noise * rng.normal();
        }
    }
    return out;
}

double evaluate_trial(const Model& model, const Dataset& test, const NoiseSpec& spec, std::size_t trial)
{
    if (test.size() == 0) throw DomainError("test set is empty");
    RngStream rng(spec.master_seed, trial);
    if (spec.eta == 0.0) return evaluate_accuracy(model, test);
    const auto noisy = perturb_model(model, spec, rng);
    return evaluate_accuracy(noisy.model, test);
}

MonteCarloResult monte_carlo_eval(const Model& model, const Dataset& test, const NoiseSpec& spec)
{
    validate(spec);
    if (test.size() == 0) throw DomainError("test set is empty");
    MonteCarloResult r;
    r.accuracies.reserve(spec.trials);
    for (std::size_t t = 0; t < spec.trials; ++t) r.accuracies.push_back(evaluate_trial(model, test, spec, t));
    // offsets from the first trial keep the mean exact when every trial agrees
    const double base = r.accuracies.front();
    double s = 0.0;
    for (double a : r.accuracies) s += a - base;
    r.mean = base + s / static_cast<double>(spec.trials);
    if (spec.trials > 1) {
        double ss = 0.0;
        for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
        r.stddev = std::sqrt(ss / static_cast<double>(spec.trials - 1));
    }
    return r;
}

}  // namespace bnnoise
