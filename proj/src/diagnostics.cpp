#include "bnnoise/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace bnnoise {

GradientRows per_sample_gradients(const Model& model, const Dataset& data)
{
    GradientRows rows;
    rows.reserve(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        const Dataset one = data.slice(i, 1);
        auto fw = model_forward(model, one.images, Mode::Infer, true);
        auto bw = model_backward(model, *fw.cache, fw.logits, one.labels);
        rows.push_back(flatten_gradients(bw.grads));
    }
    return rows;
}

namespace {

std::vector<double> mean_row(const GradientRows& grads)
{
    std::vector<double> m(grads.front().size(), 0.0);
    for (const auto& g : grads) {
        if (g.size() != m.size()) throw ShapeError("gradient rows differ in length");
        for (std::size_t k = 0; k < m.size(); ++k) m[k] += g[k];
    }
    for (double& v : m) v /= static_cast<double>(grads.size());
    return m;
}

std::uint64_t binomial(std::size_t n, std::size_t k)
{
    std::uint64_t r = 1;
    for (std::size_t i = 1; i <= k; ++i) r = r * (n - k + i) / i;
    return r;
}

}  // namespace

double gradient_noise_C(const GradientRows& grads)
{
    if (grads.size() < 2) throw DomainError("gradient noise needs at least 2 samples");
    const auto m = mean_row(grads);
    double c = 0.0;
    for (const auto& g : grads)
        for (std::size_t k = 0; k < m.size(); ++k) c += (g[k] - m[k]) * (g[k] - m[k]);
    return c / static_cast<double>(grads.size());
}

double estimate_gradient_noise_C(const Model& model, const Dataset& data)
{
    if (data.size() < 2) throw DomainError("gradient noise needs at least 2 samples");
    return gradient_noise_C(per_sample_gradients(model, data));
}

NoiseBoundCheck verify_sgd_noise_bound(const GradientRows& grads, double alpha, std::size_t batch)
{
    const std::size_t n = grads.size();
    if (n < 2) throw DomainError("noise bound needs at least 2 samples");
    if (batch == 0 || batch > n) throw DomainError("batch size must lie in [1, N]");
    if (binomial(n, batch) > 5'000'000) throw DomainError("too many subsets to enumerate");

    NoiseBoundCheck r;
    r.samples = n;
    r.batch = batch;
    r.alpha = alpha;
    r.noise_c = gradient_noise_C(grads);
    const auto full = mean_row(grads);
    const std::size_t dim = full.size();

    std::vector<std::size_t> idx(batch);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::vector<double> dev_sum(dim, 0.0);
    std::vector<double> gb(dim);
    double lhs = 0.0;
    std::size_t subsets = 0;
    // Same summation order and division as mean_row, so B = N deviates by exactly 0.
    const double b_count = static_cast<double>(batch);
    while (true) {
        std::fill(gb.begin(), gb.end(), 0.0);
        for (auto i : idx)
            for (std::size_t k = 0; k < dim; ++k) gb[k] += grads[i][k];
        double sq = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            const double d = gb[k] / b_count - full[k];
            dev_sum[k] += d;
            sq += (alpha * d) * (alpha * d);
        }
        lhs += sq;
        ++subsets;
        // next combination in lexicographic order
        std::size_t pos = batch;
        while (pos > 0 && idx[pos - 1] == n - batch + pos - 1) --pos;
        if (pos == 0) break;
        ++idx[pos - 1];
        for (std::size_t j = pos; j < batch; ++j) idx[j] = idx[j - 1] + 1;
    }
    r.subsets = subsets;
    r.lhs = lhs / static_cast<double>(subsets);
    r.rhs = alpha * alpha * r.noise_c / static_cast<double>(batch);
    r.exact = alpha * alpha * r.noise_c * static_cast<double>(n - batch) /
              (static_cast<double>(batch) * static_cast<double>(n - 1));
    double dn = 0.0;
    for (double v : dev_sum) dn += (v / static_cast<double>(subsets)) * (v / static_cast<double>(subsets));
    r.mean_deviation_norm = std::sqrt(dn);
    // B = 1 is an exact equality, so allow a few ulps of accumulated rounding.
    r.verdict = r.lhs <= r.rhs * (1.0 + 1e-12);
    return r;
}

NoiseBoundCheck verify_sgd_noise_bound(const Model& model, const Dataset& data, double alpha, std::size_t batch)
{
    if (batch > data.size()) throw DomainError("batch size exceeds dataset size");
    return verify_sgd_noise_bound(per_sample_gradients(model, data), alpha, batch);
}

double empirical_lipschitz(const ScalarField& f, const std::vector<std::vector<double>>& probes)
{
    if (probes.size() < 2) throw DomainError("Lipschitz probing needs at least 2 points");
    std::vector<double> values;
    values.reserve(probes.size());
    for (const auto& p : probes) values.push_back(f(p));
    double best = 0.0;
    bool any = false;
    for (std::size_t i = 0; i < probes.size(); ++i)
        for (std::size_t j = i + 1; j < probes.size(); ++j) {
            if (probes[i].size() != probes[j].size()) throw ShapeError("probe points differ in dimension");
            double d2 = 0.0;
            for (std::size_t k = 0; k < probes[i].size(); ++k) {
                const double d = probes[i][k] - probes[j][k];
                d2 += d * d;
            }
            if (d2 == 0.0) continue;
            any = true;
            best = std::max(best, std::abs(values[i] - values[j]) / std::sqrt(d2));
        }
    if (!any) throw DomainError("all probe points coincide");
    return best;
}

namespace {

Model shifted(const Model& base, const std::vector<double>& direction, double t)
{
    Model m = base;
    std::size_t k = 0;
    for (auto& layer : m.layers)
        for (auto& p : layer.params)
            for (double& v : p.data()) v += t * direction[k++];
    return m;
}

}  // namespace

LipschitzProbe probe_lipschitz(const Model& model, const Dataset& data, RngStream& rng, double radius,
                               std::size_t points)
{
    if (points < 2) throw DomainError("Lipschitz probing needs at least 2 points");
    std::vector<double> dir(model.parameter_count());
    double norm = 0.0;
    for (double& v : dir) {
        v = rng.normal();
        norm += v * v;
    }
    norm = std::sqrt(norm);
    for (double& v : dir) v /= norm;

    const Mode mode = data.size() >= 2 ? Mode::Train : Mode::Infer;
    std::vector<std::vector<double>> probes;
    for (std::size_t i = 0; i < points; ++i) {
        const double t = -radius + 2.0 * radius * static_cast<double>(i) / static_cast<double>(points - 1);
        probes.push_back({t});
    }
    auto loss_at = [&](std::span<const double> x) {
        const Model m = shifted(model, dir, x[0]);
        auto fw = model_forward(m, data.images, mode, true);
        return softmax_cross_entropy(fw.logits, data.labels).loss;
    };
    auto grad_norm_at = [&](std::span<const double> x) {
        const Model m = shifted(model, dir, x[0]);
        auto fw = model_forward(m, data.images, mode, true);
        auto bw = model_backward(m, *fw.cache, fw.logits, data.labels);
        double s = 0.0;
        for (double v : flatten_gradients(bw.grads)) s += v * v;
        return std::sqrt(s);
    };
    return {empirical_lipschitz(loss_at, probes), empirical_lipschitz(grad_norm_at, probes)};
}

BnInequalityResult bn_gradient_inequality_check(const BNCache* cache, const BatchNormState& state,
                                                const Tensor& upstream)
{
    if (cache == nullptr) throw std::logic_error("bn inequality check needs a forward cache");
    const BNGrads g = batchnorm_backward(upstream, *cache, state);
    const Shape& s = upstream.shape();
    const std::size_t N = s[0], C = s[1];
    const std::size_t spatial = s.size() == 4 ? s[2] * s[3] : 1;
    const double m = static_cast<double>(cache->per_channel);

    BnInequalityResult r;
    for (std::size_t c = 0; c < C; ++c) {
        double dx2 = 0.0, g2 = 0.0, g1 = 0.0, gy = 0.0;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t k = 0; k < spatial; ++k) {
                const std::size_t i = (n * C + c) * spatial + k;
                dx2 += g.dx[i] * g.dx[i];
                g2 += upstream[i] * upstream[i];
                g1 += upstream[i];
                gy += upstream[i] * cache->normalized[i];
            }
        const double scale = state.gamma[c] * state.gamma[c] / (cache->sigma[c] * cache->sigma[c]);
        const double rhs = scale * (g2 - g1 * g1 / m - gy * gy / m);
        const bool ok = dx2 <= rhs + 1e-9;
        r.lhs.push_back(dx2);
        r.rhs.push_back(rhs);
        r.verdict.push_back(ok);
        r.all_hold = r.all_hold && ok;
    }
    return r;
}

BnAuditResult audit_bn_inequality(std::size_t instances, std::uint64_t seed)
{
    static constexpr std::size_t kBatchSizes[] = {4, 8, 16};
    BnAuditResult r;
    for (std::size_t k = 0; k < instances; ++k) {
        RngStream rng(seed, k);
        const std::size_t m = kBatchSizes[rng.below(3)];
        const std::size_t channels = 1 + rng.below(4);
        auto state = BatchNormState::fresh(channels);
        for (std::size_t c = 0; c < channels; ++c) {
            state.gamma[c] = rng.uniform(-3.0, 3.0);
            state.beta[c] = rng.uniform(-1.0, 1.0);
        }
        const double scale = std::exp(rng.uniform(-3.0, 3.0));
        Tensor x = gaussian_sample({m, channels}, rng.uniform(-2.0, 2.0), scale, rng);
        const auto fw = batchnorm_forward_train(x, state);
        const Tensor upstream = gaussian_sample({m, channels}, 0.0, std::exp(rng.uniform(-2.0, 2.0)), rng);
        const auto res = bn_gradient_inequality_check(&fw.cache, state, upstream);
        ++r.instances;
        if (!res.all_hold) ++r.failures;
        for (std::size_t c = 0; c < channels; ++c)
            if (res.rhs[c] > 0.0) r.max_lhs_over_rhs = std::max(r.max_lhs_over_rhs, res.lhs[c] / res.rhs[c]);
    }
    return r;
}

namespace {

std::vector<double> weight_gradient(const Model& model, const Gradients& grads)
{
    std::vector<double> flat;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        if (!has_weights(model.layers[li].spec.kind)) continue;
        for (const auto& t : grads[li]) flat.insert(flat.end(), t.data().begin(), t.data().end());
    }
    return flat;
}

}  // namespace

SmoothnessSeries gradient_smoothness_series(const ModelSpec& spec, const std::vector<bool>& mask,
                                            const Dataset& data, const Hyperparams& hyper, std::size_t steps)
{
    validate(hyper);
    SmoothnessSeries series;
    if (steps == 0) return series;
    if (hyper.batch_size < 2 || hyper.batch_size > data.size())
        throw DomainError("probe batch size must lie in [2, dataset size]");

    Model model = build_model(spec, mask);
    RngStream init_rng(hyper.seed, 1);
    initialize_model(model, init_rng);
    Optimizer opt(model, hyper);
    const RngStream shuffle_root(hyper.seed, 2);

    const std::size_t n = data.size();
    const std::size_t per_epoch = n / hyper.batch_size;
    std::vector<std::size_t> order(n);
    for (std::size_t t = 0; t < steps; ++t) {
        const std::size_t epoch = t / per_epoch;
        const std::size_t slot = t % per_epoch;
        if (slot == 0) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            RngStream shuffle = shuffle_root.child(epoch);
            for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        }
        const Dataset batch = data.gather(std::span(order).subspan(slot * hyper.batch_size, hyper.batch_size));

        auto fw = model_forward(model, batch.images, Mode::Train);
        auto bw = model_backward(model, *fw.cache, fw.logits, batch.labels);
        if (!std::isfinite(bw.loss)) {
            series.truncated = true;
            break;
        }
        const auto before = weight_gradient(model, bw.grads);
        update_running_stats(model, *fw.cache);
        opt.step(model, bw.grads, hyper.learning_rate);

        auto fw2 = model_forward(model, batch.images, Mode::Train);
        auto bw2 = model_backward(model, *fw2.cache, fw2.logits, batch.labels);
        if (!std::isfinite(bw2.loss)) {
            series.truncated = true;
            break;
        }
        const auto after = weight_gradient(model, bw2.grads);
        double d2 = 0.0;
        for (std::size_t k = 0; k < before.size(); ++k) d2 += (before[k] - after[k]) * (before[k] - after[k]);
        if (!std::isfinite(d2)) {
            series.truncated = true;
            break;
        }
        series.distances.push_back(std::sqrt(d2));
    }
    return series;
}

SmoothnessProbe gradient_smoothness_probe(const ModelSpec& spec, const std::vector<bool>& with_bn,
                                          const std::vector<bool>& without_bn, const Dataset& data,
                                          const Hyperparams& hyper, std::size_t steps)
{
    return {gradient_smoothness_series(spec, with_bn, data, hyper, steps),
            gradient_smoothness_series(spec, without_bn, data, hyper, steps)};
}

double median(std::vector<double> values)
{
    if (values.empty()) throw DomainError("median of an empty series");
    std::sort(values.begin(), values.end());
    const std::size_t h = values.size() / 2;
    return values.size() % 2 ? values[h] : 0.5 * (values[h - 1] + values[h]);
}

// ---------------------------------------------------------------------------

void DiagnosticsReport::add(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }

void DiagnosticsReport::add(const std::string& key, double value)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    add(key, std::string(buf));
}

void DiagnosticsReport::add(const std::string& key, std::size_t value) { add(key, std::to_string(value)); }

void DiagnosticsReport::add(const std::string& key, bool value) { add(key, std::string(value ? "true" : "false")); }

std::string DiagnosticsReport::text() const
{
    std::ostringstream os;
    for (const auto& [k, v] : entries) os << k << " = " << v << '\n';
    return os.str();
}

void DiagnosticsReport::write(const std::filesystem::path& path) const
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text();
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace bnnoise
