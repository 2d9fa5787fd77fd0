#pragma once

#include "bnnoise/data_io.hpp"
#include "bnnoise/metrics.hpp"
#include "bnnoise/nn.hpp"
#include "bnnoise/noise.hpp"
#include "bnnoise/trainer.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace bnnoise {

/// One documented config key. Keys are addressed as "section.key".
struct ConfigKey {
    std::string name;
    std::string default_value;
    std::string help;
};

/// Every accepted key with its default, in reference-page order.
const std::vector<ConfigKey>& config_reference();
/// Plain-text reference page listing every key and default.
std::string config_reference_text();

/// Raw key -> value table. Only keys from config_reference() are accepted.
class ConfigTable {
public:
    /// Sets a value; throws ConfigError naming the key if it is unknown.
    void set(const std::string& name, const std::string& value);
    /// The explicit value, or the documented default.
    std::string get(const std::string& name) const;
    bool is_set(const std::string& name) const { return values_.count(name) != 0; }

private:
    std::map<std::string, std::string> values_;
};

/// Parses "[section]" / "key = value" text. '#' and ';' start comment lines.
ConfigTable parse_config_text(const std::string& text);
ConfigTable load_config_file(const std::filesystem::path& path);

struct DatasetConfig {
    std::string kind = "synthetic";  // synthetic | cifar10 | cifar100
    std::filesystem::path path;
    std::size_t train_size = 0;  // 0 keeps every record
    std::size_t test_size = 0;
    bool standardize = false;
    SyntheticOptions synthetic;
    std::size_t synthetic_test_per_class = 20;
};

struct ModelConfig {
    std::string arch = "resnet";  // mlp | resnet | micro_vgg | vgg16
    std::size_t depth = 8;
    std::size_t width = 16;
    std::vector<std::size_t> hidden;
    std::string bn_mode = "full";
    double bn_eps = 1e-5;
    double bn_momentum = 0.9;
};

struct OutputConfig {
    std::filesystem::path dir;
    std::string checkpoint;
    std::string curve;
    std::string results;
    std::string summary;
    std::string mask;
    std::string report;
    std::string inject;

    std::filesystem::path file(const std::string& name) const { return dir / name; }
};

struct DiagnoseConfig {
    std::string checkpoint;  // empty: freshly initialized model
    std::size_t samples = 6;
    std::size_t batch = 2;
    double alpha = 0.01;
    std::size_t bn_instances = 1000;
    std::size_t lipschitz_points = 9;
    double lipschitz_radius = 0.5;
    std::size_t smoothness_steps = 20;
    std::size_t smoothness_samples = 64;
    double probe_learning_rate = 1e-3;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    DatasetConfig dataset;
    ModelConfig model;
    Hyperparams train;
    std::optional<double> reference_accuracy;
    NoiseSpec noise;
    std::vector<double> eta_grid;
    std::vector<std::string> sweep_checkpoints;
    std::size_t search_budget = 0;  // 0: train.epochs
    DiagnoseConfig diagnose;
    OutputConfig output;
    /// SHA-256 over the canonical resolved values (output paths excluded).
    std::string digest;
};

/// Resolves and validates every field. Errors name the offending key.
/// BNNOISE_OUTPUT_DIR, when set, replaces output.dir.
ExperimentConfig resolve_config(const ConfigTable& table);

/// Input shape and class count implied by the dataset section.
Shape config_input_shape(const ExperimentConfig& config);
std::size_t config_classes(const ExperimentConfig& config);
ModelSpec config_model_spec(const ExperimentConfig& config);
std::vector<bool> config_bn_mask(const ExperimentConfig& config);

/// Loads (or generates) the configured train and test sets.
TrainTest load_config_data(const ExperimentConfig& config);

}  // namespace bnnoise
