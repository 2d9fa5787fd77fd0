#include "bnnoise/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <sstream>

namespace bnnoise {

const std::vector<ConfigKey>& config_reference()
{
    static const std::vector<ConfigKey> keys = {
        {"run.seed", "0", "master seed for initialization, shuffling, augmentation and noise trials"},
        {"dataset.kind", "synthetic", "synthetic | cifar10 | cifar100"},
        {"dataset.path", "", "directory holding the binary CIFAR batches (required for cifar kinds)"},
        {"dataset.train_size", "0", "keep the first N training records (0 keeps all)"},
        {"dataset.test_size", "0", "keep the first N test records (0 keeps all)"},
        {"dataset.standardize", "false", "per-channel mean/std standardization using training statistics"},
        {"dataset.seed", "0", "seed of the synthetic class patterns and pixel noise"},
        {"dataset.classes", "10", "synthetic: number of classes"},
        {"dataset.image_side", "32", "synthetic: image height and width"},
        {"dataset.channels", "3", "synthetic: image channels"},
        {"dataset.train_per_class", "100", "synthetic: training samples per class"},
        {"dataset.test_per_class", "20", "synthetic: test samples per class"},
        {"dataset.relative_noise", "0.1", "synthetic: pixel noise std relative to the closest pair of class means"},
        {"model.arch", "resnet", "mlp | resnet | micro_vgg | vgg16"},
        {"model.depth", "8", "resnet depth, 6n+2 (8 gives MicroResNet-8, 20 gives ResNet-20)"},
        {"model.width", "16", "base channel width for resnet and micro_vgg"},
        {"model.hidden", "64", "mlp hidden widths, comma separated"},
        {"model.bn_mode", "full", "full | none | partial:<bits>, one bit per conv/dense layer"},
        {"model.bn_eps", "1e-05", "BatchNorm epsilon"},
        {"model.bn_momentum", "0.9", "BatchNorm running-statistics momentum"},
        {"train.optimizer", "adam", "adam | sgd"},
        {"train.learning_rate", "0.001", "step size"},
        {"train.batch_size", "128", "minibatch size"},
        {"train.epochs", "30", "epoch budget"},
        {"train.beta1", "0.9", "Adam first-moment decay"},
        {"train.beta2", "0.999", "Adam second-moment decay"},
        {"train.adam_eps", "1e-07", "Adam epsilon"},
        {"train.augment_flip", "false", "random horizontal flips"},
        {"train.augment_crop", "false", "random crops with 4-pixel zero padding"},
        {"train.step_decay", "false", "multiply the learning rate by 0.1 at 50% and 75% of the epochs"},
        {"train.convergence_threshold", "0.95", "train accuracy that counts as converged"},
        {"train.relative_threshold", "0.99", "fraction of the reference accuracy that also counts"},
        {"train.reference_accuracy", "", "full-BN reference train accuracy (empty: none)"},
        {"noise.eta_grid", "0,0.01,0.1,0.2,0.3,0.4", "noise form factors as fractions; must include 0"},
        {"noise.eta", "0.1", "inject: single noise form factor"},
        {"noise.trials", "25", "Monte-Carlo trials per (model, eta) cell"},
        {"noise.include_bias", "false", "also perturb conv/dense biases"},
        {"noise.include_bn_params", "false", "also perturb BatchNorm gamma and beta"},
        {"sweep.checkpoints", "", "checkpoints to sweep, comma separated, relative to output.dir (empty: output.checkpoint)"},
        {"search.budget", "0", "epoch budget per search candidate (0: train.epochs)"},
        {"diagnose.checkpoint", "", "model to diagnose, relative to output.dir (empty: freshly initialized)"},
        {"diagnose.samples", "6", "N for the exhaustive SGD-noise bound check"},
        {"diagnose.batch", "2", "B for the exhaustive SGD-noise bound check"},
        {"diagnose.alpha", "0.01", "step size in the SGD-noise bound"},
        {"diagnose.bn_instances", "1000", "random single-layer BatchNorm inequality instances"},
        {"diagnose.lipschitz_points", "9", "probe points along the random direction"},
        {"diagnose.lipschitz_radius", "0.5", "probe radius in parameter space"},
        {"diagnose.smoothness_steps", "20", "optimizer steps for the gradient-smoothness probe"},
        {"diagnose.smoothness_samples", "64", "training samples used by the smoothness probe"},
        {"diagnose.probe_learning_rate", "0.001", "learning rate of the smoothness probe"},
        {"output.dir", "out", "artifact directory (the BNNOISE_OUTPUT_DIR environment variable overrides it)"},
        {"output.checkpoint", "model.ckpt", "train: checkpoint file"},
        {"output.curve", "train_curve.csv", "train: per-epoch curve"},
        {"output.results", "sweep.csv", "sweep: results CSV"},
        {"output.summary", "sweep_summary.csv", "sweep: A_avr summary CSV"},
        {"output.mask", "bn_mask.txt", "search-bn: mask file"},
        {"output.report", "diagnostics.txt", "diagnose: report file"},
        {"output.inject", "inject.csv", "inject: per-trial accuracies"},
    };
    return keys;
}

std::string config_reference_text()
{
    std::ostringstream os;
    std::string section;
    for (const auto& k : config_reference()) {
        const auto dot = k.name.find('.');
        const std::string s = k.name.substr(0, dot);
        if (s != section) {
            if (!section.empty()) os << '\n';
            os << '[' << s << "]\n";
            section = s;
        }
        os << "  " << k.name.substr(dot + 1) << " = " << k.default_value << "\n      " << k.help << '\n';
    }
    return os.str();
}

namespace {

const ConfigKey* find_key(const std::string& name)
{
    for (const auto& k : config_reference())
        if (k.name == name) return &k;
    return nullptr;
}

}  // namespace

void ConfigTable::set(const std::string& name, const std::string& value)
{
    if (find_key(name) == nullptr) throw ConfigError("unknown config key '" + name + "'");
    values_[name] = value;
}

std::string ConfigTable::get(const std::string& name) const
{
    const ConfigKey* k = find_key(name);
    if (k == nullptr) throw ConfigError("unknown config key '" + name + "'");
    auto it = values_.find(name);
    return it == values_.end() ? k->default_value : it->second;
}

ConfigTable parse_config_text(const std::string& text)
{
    // boost's ini parser only knows ';' comments
    std::istringstream lines(text);
    std::ostringstream cleaned;
    std::string line;
    while (std::getline(lines, line)) {
        const auto first = line.find_first_not_of(" \t");
        if (first != std::string::npos && line[first] == '#') line = ";";
        cleaned << line << '\n';
    }
    boost::property_tree::ptree tree;
    std::istringstream in(cleaned.str());
    try {
        boost::property_tree::ini_parser::read_ini(in, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ConfigError("config parse error at line " + std::to_string(e.line()) + ": " + e.message());
    }
    ConfigTable table;
    for (const auto& [section, body] : tree) {
        if (body.empty()) throw ConfigError("config key '" + section + "' must sit inside a [section]");
        for (const auto& [key, value] : body) table.set(section + "." + key, value.data());
    }
    return table;
}

ConfigTable load_config_file(const std::filesystem::path& path)
{
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    const auto bytes = read_file(path);
    return parse_config_text(std::string(bytes.begin(), bytes.end()));
}

// ---------------------------------------------------------------------------

namespace {

class Resolver {
public:
    explicit Resolver(const ConfigTable& t) : table_(t) {}

    std::string text(const std::string& key)
    {
        std::string v = table_.get(key);
        canonical_ << key << '=' << v << '\n';
        return v;
    }

    std::uint64_t u64(const std::string& key)
    {
        const std::string v = table_.get(key);
        std::uint64_t out = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size() || v.empty())
            throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + v + "'");
        canonical_ << key << '=' << out << '\n';
        return out;
    }

    std::size_t size(const std::string& key) { return static_cast<std::size_t>(u64(key)); }

    std::size_t positive(const std::string& key)
    {
        const auto v = size(key);
        if (v == 0) throw ConfigError("config key '" + key + "' must be positive");
        return v;
    }

    double real(const std::string& key)
    {
        const std::string v = table_.get(key);
        const double out = parse_real(key, v);
        canonical_ << key << '=' << fmt(out) << '\n';
        return out;
    }

    bool flag(const std::string& key)
    {
        std::string v = table_.get(key);
        std::transform(v.begin(), v.end(), v.begin(), [](unsigned char c) { return std::tolower(c); });
        bool out;
        if (v == "true" || v == "1" || v == "yes" || v == "on") out = true;
        else if (v == "false" || v == "0" || v == "no" || v == "off") out = false;
        else throw ConfigError("config key '" + key + "' expects true or false, got '" + v + "'");
        canonical_ << key << '=' << (out ? "true" : "false") << '\n';
        return out;
    }

    std::vector<std::string> list(const std::string& key)
    {
        const std::string v = table_.get(key);
        std::vector<std::string> out;
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            const auto a = item.find_first_not_of(" \t");
            if (a == std::string::npos) throw ConfigError("config key '" + key + "' has an empty list item");
            const auto b = item.find_last_not_of(" \t");
            out.push_back(item.substr(a, b - a + 1));
        }
        return out;
    }

    std::vector<double> reals(const std::string& key)
    {
        std::vector<double> out;
        canonical_ << key << '=';
        for (const auto& item : list(key)) {
            out.push_back(parse_real(key, item));
            canonical_ << fmt(out.back()) << ';';
        }
        canonical_ << '\n';
        return out;
    }

    std::vector<std::size_t> sizes(const std::string& key)
    {
        std::vector<std::size_t> out;
        canonical_ << key << '=';
        for (const auto& item : list(key)) {
            std::size_t n = 0;
            const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), n);
            if (ec != std::errc() || p != item.data() + item.size() || n == 0)
                throw ConfigError("config key '" + key + "' expects positive integers, got '" + item + "'");
            out.push_back(n);
            canonical_ << n << ';';
        }
        canonical_ << '\n';
        return out;
    }

    /// Read without entering the digest.
    std::string untracked(const std::string& key) const { return table_.get(key); }

    std::string canonical() const { return canonical_.str(); }

private:
    static double parse_real(const std::string& key, const std::string& v)
    {
        double out = 0.0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out))
            throw ConfigError("config key '" + key + "' expects a number, got '" + v + "'");
        return out;
    }

    static std::string fmt(double v)
    {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return buf;
    }

    const ConfigTable& table_;
    std::ostringstream canonical_;
};

}  // namespace

ExperimentConfig resolve_config(const ConfigTable& table)
{
    Resolver r(table);
    ExperimentConfig c;
    c.seed = r.u64("run.seed");

    auto& d = c.dataset;
    d.kind = r.text("dataset.kind");
    if (d.kind != "synthetic" && d.kind != "cifar10" && d.kind != "cifar100")
        throw ConfigError("config key 'dataset.kind' must be synthetic, cifar10 or cifar100, got '" + d.kind + "'");
    d.path = r.text("dataset.path");
    if (d.kind != "synthetic" && d.path.empty())
        throw ConfigError("config key 'dataset.path' is required for dataset.kind=" + d.kind);
    d.train_size = r.size("dataset.train_size");
    d.test_size = r.size("dataset.test_size");
    d.standardize = r.flag("dataset.standardize");
    d.synthetic.seed = r.u64("dataset.seed");
    d.synthetic.classes = r.size("dataset.classes");
    if (d.synthetic.classes < 2) throw ConfigError("config key 'dataset.classes' must be at least 2");
    d.synthetic.image_side = r.positive("dataset.image_side");
    d.synthetic.channels = r.positive("dataset.channels");
    d.synthetic.n_per_class = r.positive("dataset.train_per_class");
    d.synthetic_test_per_class = r.positive("dataset.test_per_class");
    d.synthetic.relative_noise = r.real("dataset.relative_noise");
    if (d.synthetic.relative_noise < 0.0) throw ConfigError("config key 'dataset.relative_noise' must be >= 0");

    auto& m = c.model;
    m.arch = r.text("model.arch");
    if (m.arch != "mlp" && m.arch != "resnet" && m.arch != "micro_vgg" && m.arch != "vgg16")
        throw ConfigError("config key 'model.arch' must be mlp, resnet, micro_vgg or vgg16, got '" + m.arch + "'");
    m.depth = r.size("model.depth");
    if (m.arch == "resnet" && (m.depth < 8 || (m.depth - 2) % 6 != 0))
        throw ConfigError("config key 'model.depth' must be 6n+2 with n >= 1, got " + std::to_string(m.depth));
    m.width = r.positive("model.width");
    m.hidden = r.sizes("model.hidden");
    m.bn_mode = r.text("model.bn_mode");

    auto& h = c.train;
    m.bn_eps = r.real("model.bn_eps");
    m.bn_momentum = r.real("model.bn_momentum");
    if (!(m.bn_eps > 0.0)) throw ConfigError("config key 'model.bn_eps' must be positive");
    if (!(m.bn_momentum >= 0.0 && m.bn_momentum < 1.0)) throw ConfigError("config key 'model.bn_momentum' must lie in [0, 1)");
    const std::string opt = r.text("train.optimizer");
    if (opt == "adam") h.optimizer = OptimizerKind::Adam;
    else if (opt == "sgd") h.optimizer = OptimizerKind::Sgd;
    else throw ConfigError("config key 'train.optimizer' must be adam or sgd, got '" + opt + "'");
    h.learning_rate = r.real("train.learning_rate");
    if (h.learning_rate < 0.0) throw ConfigError("config key 'train.learning_rate' must be >= 0");
    h.batch_size = r.positive("train.batch_size");
    h.epochs = r.size("train.epochs");
    h.beta1 = r.real("train.beta1");
    h.beta2 = r.real("train.beta2");
    if (!(h.beta1 >= 0.0 && h.beta1 < 1.0)) throw ConfigError("config key 'train.beta1' must lie in [0, 1)");
    if (!(h.beta2 >= 0.0 && h.beta2 < 1.0)) throw ConfigError("config key 'train.beta2' must lie in [0, 1)");
    h.adam_eps = r.real("train.adam_eps");
    if (!(h.adam_eps > 0.0)) throw ConfigError("config key 'train.adam_eps' must be positive");
    h.augment.flip = r.flag("train.augment_flip");
    h.augment.crop = r.flag("train.augment_crop");
    h.step_decay = r.flag("train.step_decay");
    h.convergence_threshold = r.real("train.convergence_threshold");
    h.relative_threshold = r.real("train.relative_threshold");
    h.seed = c.seed;
    if (!r.untracked("train.reference_accuracy").empty()) {
        c.reference_accuracy = r.real("train.reference_accuracy");
        if (*c.reference_accuracy < 0.0 || *c.reference_accuracy > 1.0)
            throw ConfigError("config key 'train.reference_accuracy' must lie in [0, 1]");
    }

    c.eta_grid = r.reals("noise.eta_grid");
    if (c.eta_grid.empty()) throw ConfigError("config key 'noise.eta_grid' is empty");
    for (double e : c.eta_grid)
        if (e < 0.0) throw ConfigError("config key 'noise.eta_grid' has a negative value");
    c.noise.eta = r.real("noise.eta");
    if (c.noise.eta < 0.0) throw ConfigError("config key 'noise.eta' must be >= 0");
    c.noise.trials = r.positive("noise.trials");
    c.noise.groups = kKernels;
    if (r.flag("noise.include_bias")) c.noise.groups |= kBiases;
    if (r.flag("noise.include_bn_params")) c.noise.groups |= kBnParams;
    c.noise.master_seed = c.seed;

    if (!r.untracked("sweep.checkpoints").empty()) c.sweep_checkpoints = r.list("sweep.checkpoints");
    r.text("sweep.checkpoints");
    c.search_budget = r.size("search.budget");

    auto& g = c.diagnose;
    g.checkpoint = r.text("diagnose.checkpoint");
    g.samples = r.size("diagnose.samples");
    if (g.samples < 2) throw ConfigError("config key 'diagnose.samples' must be at least 2");
    g.batch = r.positive("diagnose.batch");
    if (g.batch > g.samples) throw ConfigError("config key 'diagnose.batch' exceeds diagnose.samples");
    g.alpha = r.real("diagnose.alpha");
    g.bn_instances = r.size("diagnose.bn_instances");
    g.lipschitz_points = r.size("diagnose.lipschitz_points");
    if (g.lipschitz_points < 2) throw ConfigError("config key 'diagnose.lipschitz_points' must be at least 2");
    g.lipschitz_radius = r.real("diagnose.lipschitz_radius");
    if (!(g.lipschitz_radius > 0.0)) throw ConfigError("config key 'diagnose.lipschitz_radius' must be positive");
    g.smoothness_steps = r.size("diagnose.smoothness_steps");
    g.smoothness_samples = r.positive("diagnose.smoothness_samples");
    g.probe_learning_rate = r.real("diagnose.probe_learning_rate");

    // Output locations do not change results and stay out of the digest.
    auto& o = c.output;
    o.dir = r.untracked("output.dir");
    if (const char* env = std::getenv("BNNOISE_OUTPUT_DIR"); env != nullptr && *env != '\0') o.dir = env;
    o.checkpoint = r.untracked("output.checkpoint");
    o.curve = r.untracked("output.curve");
    o.results = r.untracked("output.results");
    o.summary = r.untracked("output.summary");
    o.mask = r.untracked("output.mask");
    o.report = r.untracked("output.report");
    o.inject = r.untracked("output.inject");

    const std::string canonical = r.canonical();
    const auto* bytes = reinterpret_cast<const std::uint8_t*>(canonical.data());
    c.digest = to_hex(sha256({bytes, canonical.size()}));

    (void)config_bn_mask(c);
    return c;
}

Shape config_input_shape(const ExperimentConfig& c)
{
    if (c.dataset.kind == "synthetic") {
        const auto& s = c.dataset.synthetic;
        return {s.channels, s.image_side, s.image_side};
    }
    return {3, 32, 32};
}

std::size_t config_classes(const ExperimentConfig& c)
{
    if (c.dataset.kind == "cifar10") return 10;
    if (c.dataset.kind == "cifar100") return 100;
    return c.dataset.synthetic.classes;
}

ModelSpec config_model_spec(const ExperimentConfig& c)
{
    const Shape input = config_input_shape(c);
    const std::size_t classes = config_classes(c);
    ModelSpec spec;
    try {
        if (c.model.arch == "mlp") spec = mlp_spec(input, c.model.hidden, classes);
        else if (c.model.arch == "resnet") spec = resnet_spec(input, (c.model.depth - 2) / 6, classes, c.model.width);
        else if (c.model.arch == "micro_vgg") spec = micro_vgg_spec(input, classes, c.model.width);
        else spec = vgg16_spec(input, classes);
    } catch (const ShapeError& e) {
        throw ConfigError("config key 'model.arch': " + c.model.arch + " does not fit input " +
                          shape_to_string(input) + ": " + e.what());
    }
    spec.bn_eps = c.model.bn_eps;
    spec.bn_momentum = c.model.bn_momentum;
    return spec;
}

std::vector<bool> config_bn_mask(const ExperimentConfig& c)
{
    try {
        return parse_bn_mode(c.model.bn_mode, config_model_spec(c));
    } catch (const std::exception& e) {
        throw ConfigError("config key 'model.bn_mode': " + std::string(e.what()));
    }
}

TrainTest load_config_data(const ExperimentConfig& c)
{
    const auto& d = c.dataset;
    TrainTest tt;
    if (d.kind == "synthetic") {
        SyntheticOptions o = d.synthetic;
        o.split = Split::Train;
        tt.train = synthetic_dataset(o);
        o.n_per_class = d.synthetic_test_per_class;
        o.split = Split::Test;
        tt.test = synthetic_dataset(o);
    } else {
        if (!std::filesystem::is_directory(d.path))
            throw ConfigError("config key 'dataset.path': directory not found: " + d.path.string());
        tt = d.kind == "cifar10" ? load_cifar10(d.path) : load_cifar100(d.path);
    }
    auto trim = [](Dataset& ds, std::size_t n, const char* key) {
        if (n == 0) return;
        if (n > ds.size())
            throw ConfigError(std::string("config key '") + key + "' asks for " + std::to_string(n) +
                              " records but only " + std::to_string(ds.size()) + " exist");
        ds = ds.slice(0, n);
    };
    trim(tt.train, d.train_size, "dataset.train_size");
    trim(tt.test, d.test_size, "dataset.test_size");
    if (d.standardize) {
        standardize_channels(tt.test, tt.train);
        const Dataset reference = tt.train;
        standardize_channels(tt.train, reference);
    }
    return tt;
}

}  // namespace bnnoise
