// Acceptance runner: one PASS/FAIL/SKIP line per criterion.
//   acceptance            run all criteria
//   acceptance --only N   run criterion N; exit 77 when it is skipped
#include "bnnoise/cli.hpp"
#include "bnnoise/diagnostics.hpp"
#include "bnnoise/metrics.hpp"
#include "bnnoise/noise.hpp"
#include "bnnoise/trainer.hpp"
#include "gradcheck.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

using namespace bnnoise;
namespace fs = std::filesystem;

namespace {

enum class Status { Pass, Fail, Skip };

struct Outcome {
    Status status = Status::Pass;
    std::string detail;
    std::vector<std::string> failures;

    void check(bool ok, const std::string& what)
    {
        if (!ok) {
            status = Status::Fail;
            failures.push_back(what);
        }
    }
    void note(const std::string& s) { detail = s; }
};

std::string fmt(double v, int precision = 4)
{
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(precision);
    os << v;
    return os.str();
}

// Published ResNet-20 CIFAR-10 accuracies (%) at eta = 0, 1, 10, 20, 30, 40 %.
const std::vector<double> kResNet20Bn{92.16, 91.48, 87.20, 66.16, 26.47, 13.83};
const std::vector<double> kResNet20NoBn{89.62, 89.60, 88.49, 84.90, 76.65, 61.37};
const std::vector<double> kStandardGrid{0.0, 0.01, 0.1, 0.2, 0.3, 0.4};

double a_avr_from_row(const std::vector<double>& row)
{
    std::vector<double> norm;
    for (std::size_t i = 1; i < row.size(); ++i) norm.push_back(normalized_accuracy(row[i], row[0]));
    return 100.0 * average_normalized_accuracy(norm);
}

Outcome metric_arithmetic()
{
    Outcome o;
    const double n10 = 100.0 * normalized_accuracy(kResNet20Bn[2], kResNet20Bn[0]);
    const double bn = a_avr_from_row(kResNet20Bn);
    const double plain = a_avr_from_row(kResNet20NoBn);
    o.check(std::abs(n10 - 94.62) <= 0.01, "normalized accuracy at eta=10%: " + fmt(n10));
    o.check(std::abs(bn - 61.88) <= 0.01, "A_avr with BN: " + fmt(bn));
    o.check(std::abs(plain - 89.49) <= 0.01, "A_avr without BN: " + fmt(plain));
    o.note("A(10%)=" + fmt(n10, 2) + " A_avr bn=" + fmt(bn, 2) + " no-bn=" + fmt(plain, 2));
    return o;
}

fs::path cifar_dir()
{
    if (const char* env = std::getenv("BNNOISE_CIFAR10_DIR"); env != nullptr && *env != '\0') return env;
    return fs::path(BNNOISE_SOURCE_DIR) / "data" / "cifar-10-batches-bin";
}

Outcome cifar_trend()
{
    Outcome o;
    const fs::path dir = cifar_dir();
    if (!fs::exists(dir / "data_batch_1.bin")) {
        o.status = Status::Skip;
        o.note("CIFAR-10 binary batches not found at " + dir.string() + " (set BNNOISE_CIFAR10_DIR)");
        return o;
    }
    TrainTest data = load_cifar10(dir);
    data.train = data.train.slice(0, 5000);
    data.test = data.test.slice(0, 1000);
    standardize_channels(data.test, data.train);
    standardize_channels(data.train, data.train);

    const ModelSpec spec = resnet_spec(data.train.sample_shape(), 1, 10);
    Hyperparams h;
    h.epochs = 30;
    const auto with_bn = train(spec, full_bn_mask(spec), data.train, h);
    const auto without_bn = train(spec, no_bn_mask(spec), data.train, h);
    NoiseSpec noise;
    noise.trials = 25;
    const SweepResult sweep =
        run_sweep({{"bn", with_bn.model}, {"no_bn", without_bn.model}}, data.test, "cifar10", kStandardGrid, noise);

    std::vector<double> a_bn, a_plain;
    double base_bn = 0.0, base_plain = 0.0;
    for (const auto& r : sweep.records) {
        if (r.model == "bn") {
            a_bn.push_back(r.acc_norm);
            base_bn = r.acc_baseline;
        } else {
            a_plain.push_back(r.acc_norm);
            base_plain = r.acc_baseline;
        }
    }
    o.check(base_bn >= base_plain, "(a) baseline bn " + fmt(base_bn) + " < no-bn " + fmt(base_plain));
    for (std::size_t i : {4u, 5u}) {
        o.check(a_plain[i] - a_bn[i] >= 0.10,
                "(b) eta=" + fmt(kStandardGrid[i], 2) + " no-bn " + fmt(a_plain[i]) + " vs bn " + fmt(a_bn[i]));
    }
    for (std::size_t i = 1; i < kStandardGrid.size(); ++i) {
        o.check(a_bn[i] <= a_bn[i - 1] + 0.02, "(c) bn curve rises at eta=" + fmt(kStandardGrid[i], 2));
        o.check(a_plain[i] <= a_plain[i - 1] + 0.02, "(c) no-bn curve rises at eta=" + fmt(kStandardGrid[i], 2));
    }
    std::string bn_curve, plain_curve;
    for (std::size_t i = 0; i < a_bn.size(); ++i) {
        bn_curve += (i ? "," : "") + fmt(a_bn[i], 3);
        plain_curve += (i ? "," : "") + fmt(a_plain[i], 3);
    }
    o.note("a0 bn=" + fmt(base_bn) + " no-bn=" + fmt(base_plain) + "; A bn=[" + bn_curve + "] no-bn=[" + plain_curve +
           "]");
    return o;
}

Outcome noise_statistics()
{
    Outcome o;
    const ModelSpec spec = mlp_spec({1000}, {}, 100);
    Model m = build_model(spec, no_bn_mask(spec));
    RngStream init(4, 0);
    for (auto& p : m.layers[0].params) p = gaussian_sample(p.shape(), 0.3, 1.7, init);
    const Tensor& w = m.layers[0].params[0];
    const double sigma_w = layer_sigma_w(w);
    std::string detail;
    for (double eta : {0.01, 0.1, 0.2, 0.4}) {
        NoiseSpec s;
        s.eta = eta;
        RngStream rng(21, static_cast<std::uint64_t>(std::lround(eta * 100)));
        const Tensor d = subtract(perturb_model(m, s, rng).model.layers[0].params[0], w);
        const double ratio = population_std(d) / (eta * sigma_w);
        const double offset = mean(d) / sigma_w;
        o.check(std::abs(ratio - 1.0) <= 0.02, "std ratio at eta=" + fmt(eta, 2) + ": " + fmt(ratio));
        o.check(std::abs(offset) <= 0.02, "mean/sigma_w at eta=" + fmt(eta, 2) + ": " + fmt(offset, 6));
        detail += " eta=" + fmt(eta, 2) + ":" + fmt(ratio);
    }
    NoiseSpec zero;
    zero.eta = 0.0;
    zero.groups = kKernels | kBiases | kBnParams;
    RngStream rng(22, 0);
    o.check(encode_checkpoint(perturb_model(m, zero, rng).model) == encode_checkpoint(m), "eta=0 bit identity");
    o.note(std::to_string(w.size()) + " weights, std/(eta sigma_w)" + detail + "; eta=0 bit-identical");
    return o;
}

Outcome gradient_suite()
{
    Outcome o;
    constexpr std::uint64_t kInstances = 20;
    double worst = 0.0;
    std::size_t checked = 0;
    auto absorb = [&](const std::string& where, const std::vector<gradcheck::Result>& results) {
        for (const auto& r : results) {
            ++checked;
            worst = std::max(worst, r.error);
            o.check(r.error < 1e-5, where + " " + r.what + " error " + std::to_string(r.error));
        }
    };
    for (auto kind : gradcheck::kAllKernels)
        for (std::uint64_t seed = 0; seed < kInstances; ++seed)
            absorb(std::string(gradcheck::name(kind)) + " seed " + std::to_string(seed),
                   gradcheck::check_layer_instance(kind, 1000 + seed));
    for (std::uint64_t seed = 0; seed < kInstances; ++seed)
        absorb("model seed " + std::to_string(seed), gradcheck::check_model_instance(2000 + seed));
    std::ostringstream os;
    os << std::size(gradcheck::kAllKernels) << " layer kinds + full model, " << kInstances << " instances each, "
       << checked << " tensors, worst error " << worst;
    o.note(os.str());
    return o;
}

Outcome theory_audits()
{
    Outcome o;
    RngStream rng(31, 0);
    double worst_identity = 0.0, worst_mean = 0.0;
    for (int k = 0; k < 100; ++k) {
        const std::size_t n = 2 + rng.below(7);
        const std::size_t b = 1 + rng.below(n);
        const std::size_t dim = 1 + rng.below(6);
        const double alpha = rng.uniform(1e-3, 1.0);
        GradientRows g;
        const double scale = std::exp(rng.uniform(-2.0, 2.0));
        for (std::size_t i = 0; i < n; ++i) g.push_back(gaussian_sample({dim}, 0.0, scale, rng).values());
        const auto r = verify_sgd_noise_bound(g, alpha, b);
        const std::string id = "instance " + std::to_string(k) + " (N=" + std::to_string(n) + ", B=" + std::to_string(b) + ")";
        const double rel = std::abs(r.lhs - r.exact) / (r.exact == 0.0 ? 1.0 : r.exact);
        if (r.exact != 0.0) worst_identity = std::max(worst_identity, rel);
        worst_mean = std::max(worst_mean, r.mean_deviation_norm);
        o.check(r.verdict, id + " lhs > rhs");
        o.check(r.exact == 0.0 ? r.lhs == 0.0 : rel <= 1e-10, id + " exact identity off by " + std::to_string(rel));
        o.check(r.mean_deviation_norm <= 1e-12, id + " zero-mean deviation " + std::to_string(r.mean_deviation_norm));
    }
    const auto bn = audit_bn_inequality(1000, 32);
    o.check(bn.failures == 0, "BN inequality failed on " + std::to_string(bn.failures) + " of 1000");
    std::ostringstream os;
    os << "100 exhaustive SGD instances, identity rel err <= " << worst_identity << ", mean dev <= " << worst_mean
       << "; BN 1000 instances, max lhs/rhs " << bn.max_lhs_over_rhs;
    o.note(os.str());
    return o;
}

std::string slurp(const fs::path& p)
{
    const auto bytes = read_file(p);
    return std::string(bytes.begin(), bytes.end());
}

Outcome determinism_and_formats()
{
    Outcome o;
    const fs::path root = fs::temp_directory_path() / "bnnoise_acceptance_6";
    fs::remove_all(root);
    auto run = [&](const std::string& cmd, const fs::path& dir) {
        std::ostringstream out, err;
        const std::vector<std::string> args{cmd,
                                            "--seed", "5",
                                            "--set", "output.dir=" + dir.string(),
                                            "--set", "dataset.classes=4",
                                            "--set", "dataset.image_side=8",
                                            "--set", "dataset.train_per_class=40",
                                            "--set", "dataset.test_per_class=20",
                                            "--set", "model.arch=micro_vgg",
                                            "--set", "model.width=4",
                                            "--set", "train.epochs=3",
                                            "--set", "train.batch_size=32",
                                            "--set", "noise.trials=5"};
        const int code = run_cli(args, out, err);
        if (code != kExitOk && code != kExitNotConverged) o.check(false, cmd + " exited " + std::to_string(code) + ": " + err.str());
    };
    for (const char* leg : {"a", "b"}) {
        run("train", root / leg);
        run("sweep", root / leg);
    }
    const std::string first = slurp(root / "a" / "sweep.csv");
    o.check(!first.empty() && first == slurp(root / "b" / "sweep.csv"), "sweep CSV differs between identical runs");
    o.check(slurp(root / "a" / "sweep_summary.csv") == slurp(root / "b" / "sweep_summary.csv"), "summary CSV differs");

    const Checkpoint ck = load_checkpoint(root / "a" / "model.ckpt");
    const auto bytes = encode_checkpoint(ck.model, ck.meta);
    o.check(bytes == read_file(root / "a" / "model.ckpt"), "checkpoint re-encode is not byte-identical");
    const Checkpoint again = decode_checkpoint(bytes);
    o.check(encode_checkpoint(again.model, again.meta) == bytes && model_digest(again.model) == model_digest(ck.model),
            "checkpoint round trip is not bit-exact");

    std::vector<std::uint8_t> cifar(2 * kCifar10Record, 0);
    cifar[0] = 3;
    cifar[kCifar10Record] = 7;
    cifar[kCifar10Record + 1] = 255;                 // R(0,0) of record 2
    cifar[kCifar10Record + 1 + 1024 + 33] = 51;      // G(1,1)
    cifar[kCifar10Record + 1 + 2048 + 1023] = 102;   // B(31,31)
    const Dataset d = parse_cifar10(cifar, Split::Train);
    o.check(d.size() == 2 && d.labels == std::vector<int>{3, 7}, "CIFAR labels");
    o.check(d.images.shape() == Shape{2, 3, 32, 32}, "CIFAR shape");
    o.check(d.images.at(1, 0, 0, 0) == 1.0 && d.images.at(1, 1, 1, 1) == 0.2 && d.images.at(1, 2, 31, 31) == 0.4 &&
                d.images.at(0, 2, 31, 31) == 0.0,
            "CIFAR pixel layout");
    bool rejected = false;
    try {
        parse_cifar10(std::span<const std::uint8_t>(cifar).first(cifar.size() - 1), Split::Train);
    } catch (const FormatError&) {
        rejected = true;
    }
    o.check(rejected, "truncated CIFAR file accepted");
    fs::remove_all(root);
    o.note("sweep CSV byte-identical across runs (" + std::to_string(first.size()) +
           " bytes), checkpoint bit-exact, CIFAR 2-record parse and truncation rejection");
    return o;
}

Outcome partial_bn_search()
{
    Outcome o;
    // Deep plain MLP with a high SGD learning rate: without BN it stalls at chance.
    SyntheticOptions s;
    s.classes = 4;
    s.channels = 1;
    s.image_side = 4;
    s.n_per_class = 50;
    const Dataset data = synthetic_dataset(s);
    const ModelSpec spec = mlp_spec(data.sample_shape(), std::vector<std::size_t>(8, 32), 4);
    Hyperparams h;
    h.optimizer = OptimizerKind::Sgd;
    h.learning_rate = 0.5;
    h.batch_size = 32;
    constexpr std::size_t kBudget = 20;
    h.epochs = kBudget;

    const auto plain = train(spec, no_bn_mask(spec), data, h).report;
    o.check(plain.diverged, "no-BN run did not diverge (train acc " + fmt(plain.final_train_accuracy) + ")");

    const SearchResult result = search_min_batchnorm(spec, data, h, kBudget);
    const double reference = result.full_bn.final_train_accuracy;
    const auto chosen = train(spec, result.mask, data, h, nullptr, reference).report;
    o.check(chosen.converged, "returned mask " + bn_mode_string(result.mask) + " does not converge");
    for (std::size_t count = 0; count < result.bn_count; ++count) {
        const auto r = train(spec, policy_mask(spec, count), data, h, nullptr, reference).report;
        o.check(!r.converged, "smaller mask " + bn_mode_string(policy_mask(spec, count)) + " converges");
    }
    o.note(spec.name + ": no-BN " + (plain.diverged ? "diverges" : "trains") + "; minimum bn_count=" +
           std::to_string(result.bn_count) + " of " + std::to_string(spec.weighted_layer_count()) + " (" +
           bn_mode_string(result.mask) + ", train acc " + fmt(chosen.final_train_accuracy, 3) + " vs full " +
           fmt(reference, 3) + "); all " + std::to_string(result.bn_count) + " smaller masks retrained, none converge");
    return o;
}

struct Criterion {
    int id;
    const char* title;
    std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv)
{
    const std::vector<Criterion> criteria{
        {1, "metric arithmetic", metric_arithmetic},
        {2, "CIFAR-10 desk-scale trend", cifar_trend},
        {3, "noise-model statistics", noise_statistics},
        {4, "gradient correctness", gradient_suite},
        {5, "theory audits", theory_audits},
        {6, "determinism and formats", determinism_and_formats},
        {7, "partial-BN search", partial_bn_search},
    };
    int only = 0;
    if (argc == 3 && std::string(argv[1]) == "--only") only = std::atoi(argv[2]);
    else if (argc != 1) {
        std::cerr << "usage: acceptance [--only N]\n";
        return 2;
    }

    bool failed = false, skipped = false;
    for (const auto& c : criteria) {
        if (only != 0 && c.id != only) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o.check(false, std::string("exception: ") + e.what());
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const char* tag = o.status == Status::Pass ? "PASS" : o.status == Status::Skip ? "SKIP" : "FAIL";
        std::cout << "criterion " << c.id << " [" << c.title << "]: " << tag << " (" << fmt(secs, 1) << "s)";
        if (!o.detail.empty()) std::cout << " - " << o.detail;
        std::cout << '\n';
        for (const auto& f : o.failures) std::cout << "    failed: " << f << '\n';
        failed |= o.status == Status::Fail;
        skipped |= o.status == Status::Skip;
    }
    if (failed) return 1;
    if (only != 0 && skipped) return 77;
    return 0;
}
