#include "bnnoise/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace bnnoise {

std::size_t argmax_row(const Tensor& logits, std::size_t row)
{
    const std::size_t k = logits.dim(1);
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
        if (logits.at(row, j) > logits.at(row, best)) best = j;
    return best;
}

double accuracy(const Tensor& logits, std::span<const int> labels)
{
    if (labels.empty()) throw DomainError("accuracy of an empty batch");
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("accuracy: logits " + shape_to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (argmax_row(logits, i) == static_cast<std::size_t>(labels[i])) ++hits;
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double evaluate_accuracy(const Model& model, const Dataset& data, std::size_t chunk)
{
    if (data.size() == 0) throw DomainError("cannot evaluate on an empty dataset");
    std::size_t hits = 0;
    for (std::size_t first = 0; first < data.size(); first += chunk) {
        const std::size_t count = std::min(chunk, data.size() - first);
        const Dataset part = data.slice(first, count);
        const auto fw = model_forward(model, part.images, Mode::Infer);
        for (std::size_t i = 0; i < count; ++i)
            if (argmax_row(fw.logits, i) == static_cast<std::size_t>(part.labels[i])) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(data.size());
}

double normalized_accuracy(double a1, double a0)
{
    if (!(a0 > 0.0)) throw DomainError("baseline accuracy must be positive");
    return a1 / a0;
}

double average_normalized_accuracy(std::span<const double> normalized)
{
    if (normalized.empty()) throw DomainError("average of an empty list");
    double s = 0.0;
    for (double a : normalized) s += a;
    return s / static_cast<double>(normalized.size());
}

// ---------------------------------------------------------------------------

namespace {

std::vector<double> checked_grid(std::vector<double> grid)
{
    if (grid.empty()) throw ConfigError("eta grid is empty");
    for (double e : grid)
        if (!(e >= 0.0) || !std::isfinite(e)) throw ConfigError("eta grid values must be finite and >= 0");
    std::sort(grid.begin(), grid.end());
    if (std::adjacent_find(grid.begin(), grid.end()) != grid.end()) throw ConfigError("eta grid has duplicates");
    if (grid.front() != 0.0) throw ConfigError("eta grid must include the baseline 0");
    return grid;
}

}  // namespace

SweepResult run_sweep(const std::vector<SweepModel>& models, const Dataset& test, const std::string& dataset_id,
                      std::vector<double> eta_grid, const NoiseSpec& noise, const std::string& config_digest)
{
    const auto grid = checked_grid(std::move(eta_grid));
    validate(noise);
    if (test.size() == 0) throw ConfigError("test set is empty");
    SweepResult result;
    result.config_digest = config_digest;
    for (const auto& sm : models) {
        const Model& m = sm.model;
        if (m.input_shape != test.sample_shape() || m.classes != test.classes) {
            throw ConfigError("model '" + sm.id + "' expects " + shape_to_string(m.input_shape) + " with " +
                              std::to_string(m.classes) + " classes; dataset has " +
                              shape_to_string(test.sample_shape()) + " with " + std::to_string(test.classes));
        }
        const std::string mode = bn_mode_string(m.bn_mask);
        const double a0 = evaluate_accuracy(m, test);
        std::vector<double> normalized;
        for (double eta : grid) {
            MetricsRecord r{sm.id, dataset_id, mode, eta, 1, a0, 0.0, a0, 0.0};
            if (eta > 0.0) {
                NoiseSpec cell = noise;
                cell.eta = eta;
                const auto mc = monte_carlo_eval(m, test, cell);
                r.trials = cell.trials;
                r.acc_mean = mc.mean;
                r.acc_std = mc.stddev;
            }
            r.acc_norm = normalized_accuracy(r.acc_mean, a0);
            if (eta > 0.0) normalized.push_back(r.acc_norm);
            result.records.push_back(r);
        }
        ModelSummary s{sm.id, dataset_id, mode, std::nullopt};
        if (!normalized.empty()) s.a_avr = average_normalized_accuracy(normalized);
        result.summaries.push_back(s);
    }
    return result;
}

SweepResult run_sweep(const std::vector<std::filesystem::path>& checkpoints, const Dataset& test,
                      const std::string& dataset_id, std::vector<double> eta_grid, const NoiseSpec& noise,
                      const std::string& config_digest)
{
    std::vector<SweepModel> models;
    for (const auto& p : checkpoints) {
        if (!std::filesystem::exists(p)) throw ConfigError("checkpoint not found: " + p.string());
        models.push_back({p.stem().string(), load_checkpoint(p).model});
    }
    return run_sweep(models, test, dataset_id, std::move(eta_grid), noise, config_digest);
}

namespace {

std::string fixed6(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

constexpr const char* kCsvHeader = "model,dataset,bn_mode,eta,trials,acc_mean,acc_std,acc_baseline,acc_norm";

}  // namespace

std::string format_csv(const SweepResult& result)
{
    std::ostringstream os;
    os << "# config_digest=" << result.config_digest << '\n' << kCsvHeader << '\n';
    for (const auto& r : result.records) {
        os << r.model << ',' << r.dataset << ',' << r.bn_mode << ',' << fixed6(r.eta) << ',' << r.trials << ','
           << fixed6(r.acc_mean) << ',' << fixed6(r.acc_std) << ',' << fixed6(r.acc_baseline) << ','
           << fixed6(r.acc_norm) << '\n';
    }
    return os.str();
}

std::string format_summary(const SweepResult& result)
{
    std::ostringstream os;
    os << "# config_digest=" << result.config_digest << '\n' << "model,dataset,bn_mode,a_avr\n";
    for (const auto& s : result.summaries) {
        os << s.model << ',' << s.dataset << ',' << s.bn_mode << ',';
        if (s.a_avr) os << fixed6(*s.a_avr);
        os << '\n';
    }
    return os.str();
}

std::vector<MetricsRecord> parse_csv(const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    bool header = false;
    std::vector<MetricsRecord> out;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        if (!header) {
            if (line != kCsvHeader) throw ConfigError("unexpected CSV header: " + line);
            header = true;
            continue;
        }
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (f.size() != 9) throw ConfigError("CSV line " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields");
        try {
            out.push_back({f[0], f[1], f[2], std::stod(f[3]), static_cast<std::size_t>(std::stoull(f[4])),
                           std::stod(f[5]), std::stod(f[6]), std::stod(f[7]), std::stod(f[8])});
        } catch (const std::logic_error&) {
            throw ConfigError("CSV line " + std::to_string(line_no) + " has a malformed number");
        }
    }
    if (!header) throw ConfigError("CSV has no header");
    return out;
}

void emit_csv(const SweepResult& result, const std::filesystem::path& csv_path,
              const std::filesystem::path& summary_path)
{
    if (result.records.empty()) throw ConfigError("sweep result has no records");
    auto write = [](const std::filesystem::path& p, const std::string& text) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + p.string());
        out << text;
        if (!out) throw std::runtime_error("write failed for " + p.string());
    };
    write(csv_path, format_csv(result));
    write(summary_path, format_summary(result));
}

}  // namespace bnnoise
