#include "bnnoise/trainer.hpp"

#include "bnnoise/metrics.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>

namespace bnnoise {

void validate(const Hyperparams& h)
{
    if (!(h.learning_rate >= 0.0) || !std::isfinite(h.learning_rate)) throw DomainError("learning_rate must be >= 0");
    if (h.batch_size == 0) throw DomainError("batch_size must be positive");
    if (!(h.beta1 >= 0.0 && h.beta1 < 1.0) || !(h.beta2 >= 0.0 && h.beta2 < 1.0))
        throw DomainError("adam betas must lie in [0, 1)");
    if (!(h.adam_eps > 0.0)) throw DomainError("adam epsilon must be positive");
    if (h.augment.flip_probability < 0.0 || h.augment.flip_probability > 1.0)
        throw DomainError("flip probability must lie in [0, 1]");
}

Tensor init_glorot_uniform(std::size_t fan_in, std::size_t fan_out, const Shape& shape, RngStream& rng)
{
    if (fan_in == 0 || fan_out == 0) throw DomainError("glorot init needs positive fans");
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    return uniform_sample(shape, -limit, limit, rng);
}

void initialize_model(Model& model, RngStream& rng)
{
    for (auto& layer : model.layers) {
        const auto& s = layer.spec;
        if (s.kind == LayerKind::Dense) {
            layer.params[0] = init_glorot_uniform(s.in, s.out, layer.params[0].shape(), rng);
            layer.params[1].fill(0.0);
        } else if (s.kind == LayerKind::Conv2d) {
            const std::size_t field = s.kernel * s.kernel;
            layer.params[0] = init_glorot_uniform(s.in * field, s.out * field, layer.params[0].shape(), rng);
            layer.params[1].fill(0.0);
        }
    }
}

// ---------------------------------------------------------------------------

void adam_step(std::vector<Tensor*> params, const std::vector<const Tensor*>& grads, AdamState& state,
               double learning_rate, double beta1, double beta2, double eps)
{
    if (params.size() != grads.size()) throw ShapeError("adam: parameter/gradient count mismatch");
    if (state.m.empty()) {
        for (auto* p : params) {
            state.m.emplace_back(p->shape());
            state.v.emplace_back(p->shape());
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam: state does not match parameters");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(beta1, t);
    const double c2 = 1.0 - std::pow(beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        if (p.shape() != g.shape() || state.m[i].shape() != p.shape()) {
            throw ShapeError("adam: shape mismatch at tensor " + std::to_string(i));
        }
        auto pd = p.data();
        auto gd = g.data();
        auto md = state.m[i].data();
        auto vd = state.v[i].data();
        for (std::size_t k = 0; k < pd.size(); ++k) {
            md[k] = beta1 * md[k] + (1.0 - beta1) * gd[k];
            vd[k] = beta2 * vd[k] + (1.0 - beta2) * gd[k] * gd[k];
            const double mhat = md[k] / c1;
            const double vhat = vd[k] / c2;
            pd[k] -= learning_rate * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

Optimizer::Optimizer(const Model&, const Hyperparams& hyper)
    : kind_(hyper.optimizer), beta1_(hyper.beta1), beta2_(hyper.beta2), eps_(hyper.adam_eps)
{
}

void Optimizer::step(Model& model, const Gradients& grads, double learning_rate)
{
    if (kind_ == OptimizerKind::Sgd) {
        for (std::size_t li = 0; li < model.layers.size(); ++li)
            for (std::size_t i = 0; i < model.layers[li].params.size(); ++i)
                axpy_inplace(model.layers[li].params[i], -learning_rate, grads[li][i]);
        return;
    }
    std::vector<Tensor*> params;
    std::vector<const Tensor*> gs;
    for (std::size_t li = 0; li < model.layers.size(); ++li)
        for (std::size_t i = 0; i < model.layers[li].params.size(); ++i) {
            params.push_back(&model.layers[li].params[i]);
            gs.push_back(&grads[li][i]);
        }
    adam_step(std::move(params), gs, adam_, learning_rate, beta1_, beta2_, eps_);
}

// ---------------------------------------------------------------------------

Tensor flip_horizontal(const Tensor& images, std::size_t index)
{
    if (images.rank() != 4) throw ShapeError("flip expects [N,C,H,W]");
    Tensor out = images;
    const std::size_t C = images.dim(1), H = images.dim(2), W = images.dim(3);
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) out.at(index, c, y, x) = images.at(index, c, y, W - 1 - x);
    return out;
}

Tensor augment_batch(const Tensor& images, RngStream& rng, const AugmentPolicy& policy)
{
    if (!policy.flip && !policy.crop) return images;
    if (images.rank() != 4) throw ShapeError("augment expects [N,C,H,W]");
    const std::size_t N = images.dim(0), C = images.dim(1), H = images.dim(2), W = images.dim(3);
    const std::size_t pad = policy.crop_padding;
    Tensor out(images.shape());
    for (std::size_t n = 0; n < N; ++n) {
        const bool flip = policy.flip && rng.uniform() < policy.flip_probability;
        long long dy = 0, dx = 0;
        if (policy.crop) {
            dy = static_cast<long long>(rng.below(2 * pad + 1)) - static_cast<long long>(pad);
            dx = static_cast<long long>(rng.below(2 * pad + 1)) - static_cast<long long>(pad);
        }
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x) {
                    const long long sy = static_cast<long long>(y) + dy;
                    const long long sxc = static_cast<long long>(x) + dx;
                    if (sy < 0 || sy >= static_cast<long long>(H) || sxc < 0 || sxc >= static_cast<long long>(W))
                        continue;
                    const std::size_t sx = flip ? W - 1 - static_cast<std::size_t>(sxc) : static_cast<std::size_t>(sxc);
                    out.at(n, c, y, x) = images.at(n, c, static_cast<std::size_t>(sy), sx);
                }
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

std::size_t correct_count(const Tensor& logits, std::span<const int> labels)
{
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (argmax_row(logits, i) == static_cast<std::size_t>(labels[i])) ++hits;
    return hits;
}

}  // namespace

TrainResult train(const ModelSpec& spec, const std::vector<bool>& bn_mask, const Dataset& train_set,
                  const Hyperparams& hyper, const Dataset* test_set, std::optional<double> reference_accuracy)
{
    validate(hyper);
    if (train_set.size() == 0) throw DomainError("training set is empty");
    if (hyper.batch_size > train_set.size()) throw DomainError("batch_size exceeds dataset size");
    if (train_set.classes != spec.classes) throw DomainError("dataset classes do not match the model");

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult out{build_model(spec, bn_mask), {}};
    RngStream init_rng(hyper.seed, 1);
    initialize_model(out.model, init_rng);
    const RngStream shuffle_root(hyper.seed, 2);
    const RngStream augment_root(hyper.seed, 3);

    Optimizer opt(out.model, hyper);
    TrainReport& report = out.report;
    const std::size_t n = train_set.size();
    const double chance = 1.0 / static_cast<double>(spec.classes);
    std::vector<std::size_t> order(n);

    for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
        double lr = hyper.learning_rate;
        if (hyper.step_decay) {
            if (2 * epoch >= hyper.epochs) lr *= 0.1;
            if (4 * epoch >= 3 * hyper.epochs) lr *= 0.1;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        RngStream shuffle = shuffle_root.child(epoch);
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
        RngStream augment = augment_root.child(epoch);

        double loss_sum = 0.0;
        std::size_t seen = 0, hits = 0;
        bool bad = false;
        for (std::size_t first = 0; first < n; first += hyper.batch_size) {
            const std::size_t count = std::min(hyper.batch_size, n - first);
            if (count < 2) break;
            Dataset batch = train_set.gather(std::span(order).subspan(first, count));
            Tensor images = augment_batch(batch.images, augment, hyper.augment);
            auto fw = model_forward(out.model, images, Mode::Train);
            auto bw = model_backward(out.model, *fw.cache, fw.logits, batch.labels);
            if (!std::isfinite(bw.loss)) {
                bad = true;
                break;
            }
            update_running_stats(out.model, *fw.cache);
            opt.step(out.model, bw.grads, lr);
            loss_sum += bw.loss * static_cast<double>(count);
            hits += correct_count(fw.logits, batch.labels);
            seen += count;
        }
        if (bad) {
            report.diverged = true;
            report.diagnostic = "non-finite loss in epoch " + std::to_string(epoch + 1);
            break;
        }
        EpochStats st;
        st.epoch = epoch + 1;
        st.train_loss = loss_sum / static_cast<double>(seen);
        st.train_accuracy = static_cast<double>(hits) / static_cast<double>(seen);
        if (test_set) st.test_accuracy = evaluate_accuracy(out.model, *test_set);
        report.epochs.push_back(st);
        report.final_train_accuracy = st.train_accuracy;
        if (2 * (epoch + 1) >= hyper.epochs && st.train_accuracy <= chance + 0.05) {
            report.diverged = true;
            report.diagnostic = "train accuracy " + std::to_string(st.train_accuracy) +
                                " at chance level after epoch " + std::to_string(epoch + 1);
            break;
        }
    }

    if (test_set && !report.diverged) report.test_accuracy = evaluate_accuracy(out.model, *test_set);
    if (hyper.epochs == 0) {
        report.diagnostic = "no epochs run";
    } else if (!report.diverged) {
        double threshold = hyper.convergence_threshold;
        if (reference_accuracy) threshold = std::min(threshold, hyper.relative_threshold * *reference_accuracy);
        report.converged = report.final_train_accuracy >= threshold;
        if (!report.converged) {
            report.diagnostic = "final train accuracy " + std::to_string(report.final_train_accuracy) +
                                " below threshold " + std::to_string(threshold);
        }
    }
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

SearchResult search_min_batchnorm(const ModelSpec& spec, const Dataset& data, const Hyperparams& hyper,
                                  std::size_t budget)
{
    if (budget == 0) throw DomainError("search budget must be at least one epoch");
    Hyperparams h = hyper;
    h.epochs = budget;

    SearchResult result;
    const auto full = train(spec, full_bn_mask(spec), data, h);
    result.full_bn = full.report;
    if (full.report.diverged) {
        throw SearchError("full-BN variant does not converge: " + full.report.diagnostic);
    }
    const double reference = full.report.final_train_accuracy;

    const std::size_t positions = spec.bn_policy_order.size();
    for (std::size_t count = 0; count < positions; ++count) {
        SearchCandidate cand{count, policy_mask(spec, count), {}};
        cand.report = train(spec, cand.mask, data, h, nullptr, reference).report;
        const bool ok = cand.report.converged;
        result.candidates.push_back(cand);
        if (ok) {
            result.mask = cand.mask;
            result.bn_count = count;
            return result;
        }
    }
    result.mask = policy_mask(spec, positions);
    result.bn_count = positions;
    return result;
}

void write_training_curve(const TrainReport& report, const std::filesystem::path& path,
                          const std::string& config_digest)
{
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "# config_digest=" << config_digest << '\n';
    out << "epoch,train_loss,train_acc,test_acc\n";
    out << std::fixed << std::setprecision(6);
    for (const auto& e : report.epochs) {
        out << e.epoch << ',' << e.train_loss << ',' << e.train_accuracy << ',';
        if (e.test_accuracy) out << *e.test_accuracy;
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace bnnoise
