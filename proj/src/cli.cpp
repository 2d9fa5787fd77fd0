#include "bnnoise/cli.hpp"

#include "bnnoise/diagnostics.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace bnnoise {

namespace {

std::string fixed6(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

void ensure_output_dir(const ExperimentConfig& c)
{
    std::error_code ec;
    std::filesystem::create_directories(c.output.dir, ec);
    if (ec) throw ConfigError("config key 'output.dir': cannot create " + c.output.dir.string() + ": " + ec.message());
}

std::filesystem::path under_output(const ExperimentConfig& c, const std::string& name)
{
    const std::filesystem::path p(name);
    return p.is_absolute() ? p : c.output.dir / p;
}

Model load_matching(const ExperimentConfig& c, const std::filesystem::path& path, const char* key)
{
    if (!std::filesystem::exists(path))
        throw ConfigError(std::string("config key '") + key + "': checkpoint not found: " + path.string());
    Model m = load_checkpoint(path).model;
    if (m.input_shape != config_input_shape(c) || m.classes != config_classes(c)) {
        throw ConfigError(std::string("config key '") + key + "': checkpoint " + path.string() + " expects " +
                          shape_to_string(m.input_shape) + " with " + std::to_string(m.classes) +
                          " classes, dataset provides " + shape_to_string(config_input_shape(c)) + " with " +
                          std::to_string(config_classes(c)));
    }
    return m;
}

}  // namespace

int cmd_train(const ExperimentConfig& c, std::ostream& log)
{
    const ModelSpec spec = config_model_spec(c);
    const auto mask = config_bn_mask(c);
    const TrainTest data = load_config_data(c);
    ensure_output_dir(c);

    const auto result = train(spec, mask, data.train, c.train, &data.test, c.reference_accuracy);
    const auto& r = result.report;
    save_checkpoint(result.model, c.output.file(c.output.checkpoint), {c.seed, c.digest, r.converged});
    write_training_curve(r, c.output.file(c.output.curve), c.digest);

    log << "model " << spec.name << " bn_mode=" << bn_mode_string(mask) << " epochs=" << r.epochs.size()
        << " train_acc=" << fixed6(r.final_train_accuracy);
    if (r.test_accuracy) log << " test_acc=" << fixed6(*r.test_accuracy);
    log << " wall=" << fixed6(r.wall_seconds) << "s\n";
    if (!r.converged) {
        log << "not converged: " << r.diagnostic << '\n';
        return kExitNotConverged;
    }
    return kExitOk;
}

int cmd_inject(const ExperimentConfig& c, std::ostream& log)
{
    const auto path = c.output.file(c.output.checkpoint);
    const Model model = load_matching(c, path, "output.checkpoint");
    const TrainTest data = load_config_data(c);
    ensure_output_dir(c);

    NoiseSpec spec = c.noise;
    const double a0 = evaluate_accuracy(model, data.test);
    const auto mc = monte_carlo_eval(model, data.test, spec);
    std::ostringstream os;
    os << "# config_digest=" << c.digest << '\n'
       << "# model=" << path.stem().string() << " bn_mode=" << bn_mode_string(model.bn_mask) << '\n'
       << "# acc_baseline=" << fixed6(a0) << " acc_mean=" << fixed6(mc.mean) << " acc_std=" << fixed6(mc.stddev)
       << '\n'
       << "trial,eta,accuracy\n";
    for (std::size_t t = 0; t < mc.accuracies.size(); ++t)
        os << t << ',' << fixed6(spec.eta) << ',' << fixed6(mc.accuracies[t]) << '\n';
    write_text(c.output.file(c.output.inject), os.str());
    log << "eta=" << fixed6(spec.eta) << " trials=" << spec.trials << " baseline=" << fixed6(a0)
        << " mean=" << fixed6(mc.mean) << " std=" << fixed6(mc.stddev) << " normalized="
        << fixed6(normalized_accuracy(mc.mean, a0)) << '\n';
    return kExitOk;
}

int cmd_sweep(const ExperimentConfig& c, std::ostream& log)
{
    std::vector<std::string> names = c.sweep_checkpoints;
    if (names.empty()) names.push_back(c.output.checkpoint);
    std::vector<SweepModel> models;
    for (const auto& n : names) {
        const auto p = under_output(c, n);
        models.push_back({p.stem().string(), load_matching(c, p, "sweep.checkpoints")});
    }
    const TrainTest data = load_config_data(c);
    ensure_output_dir(c);

    const auto result = run_sweep(models, data.test, c.dataset.kind, c.eta_grid, c.noise, c.digest);
    emit_csv(result, c.output.file(c.output.results), c.output.file(c.output.summary));
    for (const auto& s : result.summaries) {
        log << s.model << " bn_mode=" << s.bn_mode << " a_avr=";
        if (s.a_avr) log << fixed6(*s.a_avr);
        else log << "n/a";
        log << '\n';
    }
    log << result.records.size() << " rows written to " << c.output.file(c.output.results).string() << '\n';
    return kExitOk;
}

int cmd_search_bn(const ExperimentConfig& c, std::ostream& log)
{
    const ModelSpec spec = config_model_spec(c);
    const TrainTest data = load_config_data(c);
    ensure_output_dir(c);
    const std::size_t budget = c.search_budget == 0 ? c.train.epochs : c.search_budget;

    std::ostringstream os;
    os << "# config_digest=" << c.digest << '\n' << "model=" << spec.name << '\n'
       << "weighted_layers=" << spec.weighted_layer_count() << '\n' << "budget=" << budget << '\n';
    SearchResult result;
    try {
        result = search_min_batchnorm(spec, data.train, c.train, budget);
    } catch (const SearchError& e) {
        os << "status=full_bn_not_converged\n";
        write_text(c.output.file(c.output.mask), os.str());
        log << e.what() << '\n';
        return kExitNotConverged;
    }
    os << "status=found\n"
       << "bn_mode=" << bn_mode_string(result.mask) << '\n'
       << "bn_count=" << result.bn_count << '\n'
       << "full_bn_train_accuracy=" << fixed6(result.full_bn.final_train_accuracy) << '\n'
       << "# candidate=bn_count,bn_mode,converged,diverged,final_train_accuracy\n";
    for (const auto& cand : result.candidates) {
        os << "candidate=" << cand.bn_count << ',' << bn_mode_string(cand.mask) << ','
           << (cand.report.converged ? "true" : "false") << ',' << (cand.report.diverged ? "true" : "false") << ','
           << fixed6(cand.report.final_train_accuracy) << '\n';
    }
    write_text(c.output.file(c.output.mask), os.str());
    log << spec.name << ": minimum bn_count=" << result.bn_count << " of " << spec.weighted_layer_count()
        << " (bn_mode=" << bn_mode_string(result.mask) << ")\n";
    return kExitOk;
}

int cmd_diagnose(const ExperimentConfig& c, std::ostream& log)
{
    const auto& g = c.diagnose;
    const ModelSpec spec = config_model_spec(c);
    Model model;
    if (g.checkpoint.empty()) {
        model = build_model(spec, config_bn_mask(c));
        RngStream rng(c.seed, 1);
        initialize_model(model, rng);
    } else {
        model = load_matching(c, under_output(c, g.checkpoint), "diagnose.checkpoint");
    }
    const TrainTest data = load_config_data(c);
    if (g.samples > data.train.size()) throw ConfigError("config key 'diagnose.samples' exceeds the training set");
    if (g.smoothness_samples > data.train.size())
        throw ConfigError("config key 'diagnose.smoothness_samples' exceeds the training set");
    ensure_output_dir(c);

    DiagnosticsReport report;
    report.add("config_digest", c.digest);
    report.add("model", model.name);
    report.add("bn_mode", bn_mode_string(model.bn_mask));

    const Dataset probe = data.train.slice(0, g.samples);
    const auto bound = verify_sgd_noise_bound(model, probe, g.alpha, g.batch);
    report.add("sgd_bound.samples", bound.samples);
    report.add("sgd_bound.batch", bound.batch);
    report.add("sgd_bound.subsets", bound.subsets);
    report.add("sgd_bound.alpha", bound.alpha);
    report.add("sgd_bound.noise_c", bound.noise_c);
    report.add("sgd_bound.lhs", bound.lhs);
    report.add("sgd_bound.rhs", bound.rhs);
    report.add("sgd_bound.exact", bound.exact);
    report.add("sgd_bound.mean_deviation_norm", bound.mean_deviation_norm);
    report.add("sgd_bound.verdict", bound.verdict);

    const auto audit = audit_bn_inequality(g.bn_instances, c.seed);
    report.add("bn_inequality.instances", audit.instances);
    report.add("bn_inequality.failures", audit.failures);
    report.add("bn_inequality.max_lhs_over_rhs", audit.max_lhs_over_rhs);
    report.add("bn_inequality.verdict", audit.failures == 0);

    RngStream dir_rng(c.seed, 4);
    const auto lip = probe_lipschitz(model, probe, dir_rng, g.lipschitz_radius, g.lipschitz_points);
    report.add("lipschitz.radius", g.lipschitz_radius);
    report.add("lipschitz.points", g.lipschitz_points);
    report.add("lipschitz.loss_ratio", lip.loss_ratio);
    report.add("lipschitz.gradient_norm_ratio", lip.gradient_norm_ratio);

    Hyperparams h = c.train;
    h.learning_rate = g.probe_learning_rate;
    h.batch_size = std::min(h.batch_size, g.smoothness_samples);
    const Dataset smooth_data = data.train.slice(0, g.smoothness_samples);
    const auto sm = gradient_smoothness_probe(spec, full_bn_mask(spec), no_bn_mask(spec), smooth_data, h,
                                              g.smoothness_steps);
    auto add_series = [&](const std::string& prefix, const SmoothnessSeries& s) {
        report.add(prefix + ".steps", s.distances.size());
        report.add(prefix + ".truncated", s.truncated);
        if (!s.distances.empty()) report.add(prefix + ".median", median(s.distances));
        std::ostringstream os;
        for (std::size_t i = 0; i < s.distances.size(); ++i) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", s.distances[i]);
            os << (i ? "," : "") << buf;
        }
        report.add(prefix + ".series", os.str());
    };
    add_series("smoothness.with_bn", sm.with_bn);
    add_series("smoothness.without_bn", sm.without_bn);

    report.write(c.output.file(c.output.report));
    log << "sgd bound " << (bound.verdict ? "holds" : "FAILS") << " over " << bound.subsets
        << " subsets; bn inequality failures " << audit.failures << '/' << audit.instances << '\n';
    return kExitOk;
}

// ---------------------------------------------------------------------------

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err)
{
    CLI::App app{"BatchNorm noise-robustness toolkit: train, inject, sweep, search-bn, diagnose"};
    app.require_subcommand(1);
    app.footer("Config file keys and defaults:\n\n" + config_reference_text());

    struct Options {
        std::string config;
        std::vector<std::string> sets;
        std::string eta_grid, bn_mode;
        std::size_t trials = 0;
        std::uint64_t seed = 0;
        double eta = 0.0;
        bool include_bias = false, include_bn_params = false;
    } opt;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "config file ([section] key = value)");
        sub->add_option("--set", opt.sets, "override one key, section.key=value (repeatable)");
        sub->add_option("--seed", opt.seed, "master seed (run.seed)");
        sub->add_option("--bn-mode", opt.bn_mode, "full | none | partial:<bits> (model.bn_mode)");
        sub->add_option("--eta-grid", opt.eta_grid, "comma-separated noise form factors (noise.eta_grid)");
        sub->add_option("--trials", opt.trials, "Monte-Carlo trials per cell (noise.trials)");
        sub->add_flag("--include-bias", opt.include_bias, "also perturb biases (noise.include_bias)");
        sub->add_flag("--include-bn-params", opt.include_bn_params, "also perturb BN gamma/beta (noise.include_bn_params)");
    };
    struct Command {
        const char* name;
        const char* help;
        int (*run)(const ExperimentConfig&, std::ostream&);
    };
    const Command commands[] = {
        {"train", "train one model; writes a checkpoint and a training curve", cmd_train},
        {"inject", "Monte-Carlo noise injection at one eta on the trained checkpoint", cmd_inject},
        {"sweep", "eta-grid sweep over checkpoints; writes results and summary CSVs", cmd_sweep},
        {"search-bn", "search the minimum BatchNorm count that still converges", cmd_search_bn},
        {"diagnose", "gradient-noise and BatchNorm diagnostics report", cmd_diagnose},
    };
    std::vector<CLI::App*> subs;
    for (const auto& cmd : commands) {
        auto* sub = app.add_subcommand(cmd.name, cmd.help);
        add_common(sub);
        if (std::string(cmd.name) == "inject") sub->add_option("--eta", opt.eta, "noise form factor (noise.eta)");
        subs.push_back(sub);
    }
    app.add_subcommand("reference", "print every config key with its default");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        return kExitConfigError;
    }

    if (app.got_subcommand("reference")) {
        out << config_reference_text();
        return kExitOk;
    }

    for (std::size_t i = 0; i < subs.size(); ++i) {
        CLI::App* sub = subs[i];
        if (!sub->parsed()) continue;
        try {
            ConfigTable table;
            if (!opt.config.empty()) table = load_config_file(opt.config);
            for (const auto& kv : opt.sets) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + kv + "'");
                table.set(kv.substr(0, eq), kv.substr(eq + 1));
            }
            if (sub->count("--seed")) table.set("run.seed", std::to_string(opt.seed));
            if (sub->count("--bn-mode")) table.set("model.bn_mode", opt.bn_mode);
            if (sub->count("--eta-grid")) table.set("noise.eta_grid", opt.eta_grid);
            if (sub->count("--trials")) table.set("noise.trials", std::to_string(opt.trials));
            if (opt.include_bias) table.set("noise.include_bias", "true");
            if (opt.include_bn_params) table.set("noise.include_bn_params", "true");
            if (sub->get_option_no_throw("--eta") && sub->count("--eta")) {
                char buf[64];
                std::snprintf(buf, sizeof buf, "%.17g", opt.eta);
                table.set("noise.eta", buf);
            }
            const ExperimentConfig config = resolve_config(table);
            return commands[i].run(config, out);
        } catch (const ConfigError& e) {
            err << "config error: " << e.what() << '\n';
        } catch (const FormatError& e) {
            err << "input error: " << e.what() << '\n';
        } catch (const std::exception& e) {
            err << "error: " << e.what() << '\n';
        }
        return kExitConfigError;
    }
    return kExitConfigError;
}

}  // namespace bnnoise
