#pragma once

#include "bnnoise/data_io.hpp"
#include "bnnoise/nn.hpp"
#include "bnnoise/noise.hpp"

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bnnoise {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Index of the largest logit in a row; ties go to the lowest index.
std::size_t argmax_row(const Tensor& logits, std::size_t row);
/// Fraction of rows whose argmax equals the label.
double accuracy(const Tensor& logits, std::span<const int> labels);
/// Inference-mode accuracy over a dataset, evaluated in fixed-size chunks.
double evaluate_accuracy(const Model& model, const Dataset& data, std::size_t chunk = 250);

/// A = a1 / a0.
double normalized_accuracy(double a1, double a0);
/// Arithmetic mean of normalized accuracies over the non-baseline grid.
double average_normalized_accuracy(std::span<const double> normalized);

struct MetricsRecord {
    std::string model;
    std::string dataset;
    std::string bn_mode;
    double eta = 0.0;
    std::size_t trials = 0;
    double acc_mean = 0.0;
    double acc_std = 0.0;
    double acc_baseline = 0.0;
    double acc_norm = 0.0;
};

struct ModelSummary {
    std::string model;
    std::string dataset;
    std::string bn_mode;
    std::optional<double> a_avr;  // empty when the grid has no non-baseline point
};

struct SweepResult {
    std::vector<MetricsRecord> records;  // ordered by (model, eta)
    std::vector<ModelSummary> summaries;
    std::string config_digest;
};

struct SweepModel {
    std::string id;
    Model model;
};

/// Baseline (eta = 0) is a single clean evaluation; every other grid point is
/// a Monte-Carlo cell with `noise.trials` trials. All cells of all models use
/// the same trial streams (master_seed, trial).
SweepResult run_sweep(const std::vector<SweepModel>& models, const Dataset& test, const std::string& dataset_id,
                      std::vector<double> eta_grid, const NoiseSpec& noise, const std::string& config_digest = "");

/// Loads each checkpoint and sweeps it; the model id is the file stem.
SweepResult run_sweep(const std::vector<std::filesystem::path>& checkpoints, const Dataset& test,
                      const std::string& dataset_id, std::vector<double> eta_grid, const NoiseSpec& noise,
                      const std::string& config_digest = "");

std::string format_csv(const SweepResult& result);
std::string format_summary(const SweepResult& result);
std::vector<MetricsRecord> parse_csv(const std::string& text);
/// Writes the results CSV and the companion A_avr summary.
void emit_csv(const SweepResult& result, const std::filesystem::path& csv_path,
              const std::filesystem::path& summary_path);

}  // namespace bnnoise
