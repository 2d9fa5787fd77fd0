#include "bnnoise/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bnnoise {

namespace {

struct ChannelLayout {
    std::size_t batch = 0;
    std::size_t channels = 0;
    std::size_t spatial = 1;

    std::size_t index(std::size_t n, std::size_t c, std::size_t s) const
    {
        return (n * channels + c) * spatial + s;
    }
    std::size_t per_channel() const { return batch * spatial; }
};

ChannelLayout channel_layout(const Shape& shape)
{
    if (shape.size() == 2) return {shape[0], shape[1], 1};
    if (shape.size() == 4) return {shape[0], shape[1], shape[2] * shape[3]};
    throw ShapeError("batchnorm expects [N,C] or [N,C,H,W] input, got " + shape_to_string(shape));
}

void require_channels(const ChannelLayout& layout, const BatchNormState& state)
{
    if (layout.channels != state.channels()) {
        throw ShapeError("batchnorm channel mismatch: input has " + std::to_string(layout.channels) +
                         ", state has " + std::to_string(state.channels()));
    }
}

Shape per_sample(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace

// ---------------------------------------------------------------------------
// Specs

std::string to_string(LayerKind kind)
{
    switch (kind) {
    case LayerKind::Dense: return "dense";
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Relu: return "relu";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::ResidualEntry: return "residual-entry";
    case LayerKind::ResidualExit: return "residual-exit";
    }
    return "unknown";
}

bool has_weights(LayerKind kind) { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out)
{
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in = in;
    s.out = out;
    return s;
}

LayerSpec LayerSpec::conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                          std::size_t padding)
{
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in = in;
    s.out = out;
    s.kernel = kernel;
    s.stride = stride;
    s.padding = padding;
    return s;
}

LayerSpec LayerSpec::batchnorm(std::size_t channels, double eps, double momentum)
{
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.in = channels;
    s.out = channels;
    s.eps = eps;
    s.momentum = momentum;
    return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::maxpool(std::size_t kernel, std::size_t stride)
{
    LayerSpec s;
    s.kind = LayerKind::MaxPool;
    s.kernel = kernel;
    s.stride = stride;
    return s;
}

LayerSpec LayerSpec::avgpool(std::size_t kernel, std::size_t stride)
{
    LayerSpec s;
    s.kind = LayerKind::AvgPool;
    s.kernel = kernel;
    s.stride = stride;
    return s;
}

LayerSpec LayerSpec::global_avgpool() { return avgpool(0, 1); }

LayerSpec LayerSpec::flatten()
{
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    return s;
}

LayerSpec LayerSpec::residual_entry()
{
    LayerSpec s;
    s.kind = LayerKind::ResidualEntry;
    return s;
}

LayerSpec LayerSpec::residual_exit()
{
    LayerSpec s;
    s.kind = LayerKind::ResidualExit;
    return s;
}

ParamRole Layer::role(std::size_t param_index) const
{
    if (spec.kind == LayerKind::BatchNorm) return param_index == 0 ? ParamRole::BnGamma : ParamRole::BnBeta;
    return param_index == 0 ? ParamRole::Kernel : ParamRole::Bias;
}

std::size_t ModelSpec::weighted_layer_count() const
{
    return static_cast<std::size_t>(
        std::count_if(layers.begin(), layers.end(), [](const LayerSpec& l) { return has_weights(l.kind); }));
}

std::size_t Model::parameter_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers)
        for (const auto& p : l.params) n += p.size();
    return n;
}

std::size_t Model::buffer_count() const
{
    std::size_t n = 0;
    for (const auto& l : layers)
        for (const auto& b : l.buffers) n += b.size();
    return n;
}

std::size_t Model::batchnorm_count() const
{
    return static_cast<std::size_t>(std::count_if(
        layers.begin(), layers.end(), [](const Layer& l) { return l.spec.kind == LayerKind::BatchNorm; }));
}

std::vector<Shape> infer_shapes(const std::vector<LayerSpec>& layers, const Shape& input_shape)
{
    std::vector<Shape> shapes;
    std::vector<Shape> saved;
    Shape cur = input_shape;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        const std::string where = "layer " + std::to_string(i) + " (" + to_string(l.kind) + "): ";
        switch (l.kind) {
        case LayerKind::Dense:
            if (cur.size() != 1 || cur[0] != l.in) {
                throw ShapeError(where + "expects [" + std::to_string(l.in) + "], got " + shape_to_string(cur));
            }
            cur = {l.out};
            break;
        case LayerKind::Conv2d:
            if (cur.size() != 3 || cur[0] != l.in) {
                throw ShapeError(where + "expects " + std::to_string(l.in) + " channels, got " +
                                 shape_to_string(cur));
            }
            cur = {l.out, conv_output_extent(cur[1], l.kernel, l.stride, l.padding),
                   conv_output_extent(cur[2], l.kernel, l.stride, l.padding)};
            break;
        case LayerKind::BatchNorm:
            if ((cur.size() != 1 && cur.size() != 3) || cur[0] != l.in) {
                throw ShapeError(where + "expects " + std::to_string(l.in) + " channels, got " +
                                 shape_to_string(cur));
            }
            break;
        case LayerKind::Relu: break;
        case LayerKind::MaxPool:
        case LayerKind::AvgPool:
            if (cur.size() != 3) throw ShapeError(where + "expects [C,H,W], got " + shape_to_string(cur));
            if (l.kind == LayerKind::AvgPool && l.kernel == 0) {
                cur = {cur[0], 1, 1};
            } else {
                cur = {cur[0], conv_output_extent(cur[1], l.kernel, l.stride, 0),
                       conv_output_extent(cur[2], l.kernel, l.stride, 0)};
            }
            break;
        case LayerKind::Flatten: cur = {shape_numel(cur)}; break;
        case LayerKind::ResidualEntry: saved.push_back(cur); break;
        case LayerKind::ResidualExit: {
            if (saved.empty()) throw ShapeError(where + "no matching residual entry");
            const Shape src = saved.back();
            saved.pop_back();
            if (src.size() != cur.size()) throw ShapeError(where + "shortcut rank mismatch");
            if (src.size() == 3) {
                const std::size_t stride = cur[1] == 0 ? 0 : src[1] / cur[1];
                if (cur[0] < src[0] || stride == 0 || (src[1] + stride - 1) / stride != cur[1] ||
                    (src[2] + stride - 1) / stride != cur[2]) {
                    throw ShapeError(where + "cannot map shortcut " + shape_to_string(src) + " onto " +
                                     shape_to_string(cur));
                }
            } else if (src != cur) {
                throw ShapeError(where + "shortcut shape mismatch");
            }
            break;
        }
        }
        shapes.push_back(cur);
    }
    if (!saved.empty()) throw ShapeError("unterminated residual block");
    return shapes;
}

Model build_model(const ModelSpec& spec, const std::vector<bool>& bn_mask)
{
    const std::size_t weighted = spec.weighted_layer_count();
    if (bn_mask.size() != weighted) {
        throw ShapeError("bn_mask has " + std::to_string(bn_mask.size()) + " entries, template has " +
                         std::to_string(weighted) + " dense/conv layers");
    }
    Model model;
    model.name = spec.name;
    model.input_shape = spec.input_shape;
    model.classes = spec.classes;
    model.bn_mask = bn_mask;

    std::size_t w = 0;
    std::vector<LayerSpec> expanded;
    for (const auto& ls : spec.layers) {
        Layer layer{ls, {}, {}};
        if (ls.kind == LayerKind::Dense) {
            layer.params = {Tensor({ls.in, ls.out}), Tensor({ls.out})};
        } else if (ls.kind == LayerKind::Conv2d) {
            layer.params = {Tensor({ls.out, ls.in, ls.kernel, ls.kernel}), Tensor({ls.out})};
        } else if (ls.kind == LayerKind::BatchNorm) {
            throw ShapeError("templates must not contain batchnorm layers; use the mask");
        }
        expanded.push_back(ls);
        model.layers.push_back(std::move(layer));
        if (has_weights(ls.kind) && bn_mask[w++]) {
            const auto bn = LayerSpec::batchnorm(ls.out, spec.bn_eps, spec.bn_momentum);
            const auto st = BatchNormState::fresh(ls.out, spec.bn_eps, spec.bn_momentum);
            model.layers.push_back(Layer{bn, {st.gamma, st.beta}, {st.running_mean, st.running_var}});
            expanded.push_back(bn);
        }
    }
    const auto shapes = infer_shapes(expanded, spec.input_shape);
    if (shapes.empty() || shapes.back() != Shape{spec.classes}) {
        throw ShapeError("model output must be [" + std::to_string(spec.classes) + "]");
    }
    return model;
}

std::vector<bool> full_bn_mask(const ModelSpec& spec) { return std::vector<bool>(spec.weighted_layer_count(), true); }

std::vector<bool> no_bn_mask(const ModelSpec& spec) { return std::vector<bool>(spec.weighted_layer_count(), false); }

std::vector<bool> policy_mask(const ModelSpec& spec, std::size_t count)
{
    if (count > spec.bn_policy_order.size()) {
        throw DomainError("BN count " + std::to_string(count) + " exceeds policy length " +
                          std::to_string(spec.bn_policy_order.size()));
    }
    auto mask = no_bn_mask(spec);
    for (std::size_t i = 0; i < count; ++i) mask.at(spec.bn_policy_order[i]) = true;
    return mask;
}

std::string bn_mode_string(const std::vector<bool>& mask)
{
    if (!mask.empty() && std::all_of(mask.begin(), mask.end(), [](bool b) { return b; })) return "full";
    if (std::none_of(mask.begin(), mask.end(), [](bool b) { return b; })) return "none";
    std::string bits = "partial:";
    for (bool b : mask) bits += b ? '1' : '0';
    return bits;
}

std::vector<bool> parse_bn_mode(const std::string& text, const ModelSpec& spec)
{
    if (text == "full") return full_bn_mask(spec);
    if (text == "none") return no_bn_mask(spec);
    const std::string prefix = "partial:";
    if (text.rfind(prefix, 0) == 0) {
        const std::string bits = text.substr(prefix.size());
        if (bits.size() != spec.weighted_layer_count()) {
            throw DomainError("bn mask '" + bits + "' must have " + std::to_string(spec.weighted_layer_count()) +
                              " digits");
        }
        std::vector<bool> mask;
        for (char c : bits) {
            if (c != '0' && c != '1') throw DomainError("bn mask digits must be 0 or 1: '" + bits + "'");
            mask.push_back(c == '1');
        }
        return mask;
    }
    throw DomainError("bn mode must be full, none or partial:<mask>, got '" + text + "'");
}

// ---------------------------------------------------------------------------
// Architectures

ModelSpec mlp_spec(const Shape& input_shape, const std::vector<std::size_t>& hidden, std::size_t classes)
{
    ModelSpec spec;
    spec.name = "mlp";
    spec.input_shape = input_shape;
    spec.classes = classes;
    std::size_t width = shape_numel(input_shape);
    if (input_shape.size() != 1) spec.layers.push_back(LayerSpec::flatten());
    for (auto h : hidden) {
        spec.layers.push_back(LayerSpec::dense(width, h));
        spec.layers.push_back(LayerSpec::relu());
        width = h;
    }
    spec.layers.push_back(LayerSpec::dense(width, classes));
    for (std::size_t i = 0; i <= hidden.size(); ++i) spec.bn_policy_order.push_back(i);
    return spec;
}

ModelSpec resnet_spec(const Shape& input_shape, std::size_t blocks_per_stage, std::size_t classes,
                      std::size_t base_width)
{
    if (input_shape.size() != 3) throw ShapeError("resnet expects a [C,H,W] input shape");
    if (blocks_per_stage == 0) throw DomainError("resnet needs at least one block per stage");
    ModelSpec spec;
    spec.name = "resnet" + std::to_string(6 * blocks_per_stage + 2);
    spec.input_shape = input_shape;
    spec.classes = classes;
    spec.layers.push_back(LayerSpec::conv(input_shape[0], base_width, 3, 1, 1));
    spec.layers.push_back(LayerSpec::relu());
    std::size_t in = base_width;
    std::size_t weighted = 1;
    std::vector<std::size_t> stage_fronts;
    for (std::size_t stage = 0; stage < 3; ++stage) {
        const std::size_t width = base_width << stage;
        for (std::size_t b = 0; b < blocks_per_stage; ++b) {
            const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
            if (b == 0) stage_fronts.push_back(weighted);
            spec.layers.push_back(LayerSpec::residual_entry());
            spec.layers.push_back(LayerSpec::conv(in, width, 3, stride, 1));
            spec.layers.push_back(LayerSpec::relu());
            spec.layers.push_back(LayerSpec::conv(width, width, 3, 1, 1));
            spec.layers.push_back(LayerSpec::residual_exit());
            spec.layers.push_back(LayerSpec::relu());
            weighted += 2;
            in = width;
        }
    }
    spec.layers.push_back(LayerSpec::global_avgpool());
    spec.layers.push_back(LayerSpec::flatten());
    spec.layers.push_back(LayerSpec::dense(in, classes));
    ++weighted;

    spec.bn_policy_order.push_back(0);
    spec.bn_policy_order.insert(spec.bn_policy_order.end(), stage_fronts.begin(), stage_fronts.end());
    for (std::size_t i = 0; i < weighted; ++i) {
        if (std::find(spec.bn_policy_order.begin(), spec.bn_policy_order.end(), i) == spec.bn_policy_order.end())
            spec.bn_policy_order.push_back(i);
    }
    return spec;
}

ModelSpec micro_vgg_spec(const Shape& input_shape, std::size_t classes, std::size_t base_width)
{
    if (input_shape.size() != 3) throw ShapeError("vgg expects a [C,H,W] input shape");
    ModelSpec spec;
    spec.name = "microvgg6";
    spec.input_shape = input_shape;
    spec.classes = classes;
    const std::size_t w1 = base_width;
    const std::size_t w2 = 2 * base_width;
    spec.layers = {
        LayerSpec::conv(input_shape[0], w1, 3, 1, 1), LayerSpec::relu(),
        LayerSpec::conv(w1, w1, 3, 1, 1),             LayerSpec::relu(),
        LayerSpec::maxpool(2, 2),
        LayerSpec::conv(w1, w2, 3, 1, 1),             LayerSpec::relu(),
        LayerSpec::conv(w2, w2, 3, 1, 1),             LayerSpec::relu(),
        LayerSpec::maxpool(2, 2),
        LayerSpec::flatten(),
    };
    const std::size_t flat = w2 * (input_shape[1] / 4) * (input_shape[2] / 4);
    spec.layers.push_back(LayerSpec::dense(flat, 4 * base_width));
    spec.layers.push_back(LayerSpec::relu());
    spec.layers.push_back(LayerSpec::dense(4 * base_width, classes));
    spec.bn_policy_order = {0, 1, 2, 3, 4, 5};
    return spec;
}

ModelSpec vgg16_spec(const Shape& input_shape, std::size_t classes)
{
    if (input_shape.size() != 3) throw ShapeError("vgg expects a [C,H,W] input shape");
    ModelSpec spec;
    spec.name = "vgg16";
    spec.input_shape = input_shape;
    spec.classes = classes;
    const std::vector<std::size_t> plan = {64, 64, 0, 128, 128, 0, 256, 256, 256, 0,
                                           512, 512, 512, 0, 512, 512, 512, 0};
    std::size_t in = input_shape[0];
    std::size_t side_h = input_shape[1];
    std::size_t side_w = input_shape[2];
    for (auto w : plan) {
        if (w == 0) {
            spec.layers.push_back(LayerSpec::maxpool(2, 2));
            side_h /= 2;
            side_w /= 2;
        } else {
            spec.layers.push_back(LayerSpec::conv(in, w, 3, 1, 1));
            spec.layers.push_back(LayerSpec::relu());
            in = w;
        }
    }
    spec.layers.push_back(LayerSpec::flatten());
    spec.layers.push_back(LayerSpec::dense(in * side_h * side_w, 512));
    spec.layers.push_back(LayerSpec::relu());
    spec.layers.push_back(LayerSpec::dense(512, 512));
    spec.layers.push_back(LayerSpec::relu());
    spec.layers.push_back(LayerSpec::dense(512, classes));
    for (std::size_t i = 0; i < 16; ++i) spec.bn_policy_order.push_back(i);
    return spec;
}

// ---------------------------------------------------------------------------
// BatchNorm

BatchNormState BatchNormState::fresh(std::size_t channels, double eps, double momentum)
{
    if (!(eps >= 0.0)) throw DomainError("batchnorm eps must be >= 0");
    if (!(momentum > 0.0 && momentum < 1.0)) throw DomainError("batchnorm momentum must lie in (0, 1)");
    return BatchNormState{Tensor({channels}, 1.0), Tensor({channels}, 0.0), Tensor({channels}, 0.0),
                          Tensor({channels}, 1.0), eps, momentum};
}

BatchNormState bn_state_of(const Layer& layer)
{
    if (layer.spec.kind != LayerKind::BatchNorm) throw ShapeError("layer is not a batchnorm");
    return BatchNormState{layer.params[0], layer.params[1], layer.buffers[0], layer.buffers[1], layer.spec.eps,
                          layer.spec.momentum};
}

BNForward batchnorm_forward_train(const Tensor& x, const BatchNormState& state)
{
    const auto L = channel_layout(x.shape());
    require_channels(L, state);
    if (L.batch < 2) throw DomainError("batchnorm training needs a batch of at least 2");
    const std::size_t m = L.per_channel();

    BNForward out{Tensor(x.shape()), BNCache{}, state};
    BNCache& cache = out.cache;
    cache.input = x;
    cache.normalized = Tensor(x.shape());
    cache.batch_mean.assign(L.channels, 0.0);
    cache.batch_var.assign(L.channels, 0.0);
    cache.sigma.assign(L.channels, 0.0);
    cache.per_channel = m;
    cache.training = true;

    for (std::size_t c = 0; c < L.channels; ++c) {
        double mu = 0.0;
        for (std::size_t n = 0; n < L.batch; ++n)
            for (std::size_t s = 0; s < L.spatial; ++s) mu += x[L.index(n, c, s)];
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t n = 0; n < L.batch; ++n)
            for (std::size_t s = 0; s < L.spatial; ++s) {
                const double d = x[L.index(n, c, s)] - mu;
                var += d * d;
            }
        var /= static_cast<double>(m);
        const double sigma = std::sqrt(var + state.eps);
        if (sigma == 0.0) throw DomainError("batchnorm channel has zero variance and eps = 0");
        const double g = state.gamma[c];
        const double b = state.beta[c];
        for (std::size_t n = 0; n < L.batch; ++n)
            for (std::size_t s = 0; s < L.spatial; ++s) {
                const std::size_t i = L.index(n, c, s);
                const double xh = (x[i] - mu) / sigma;
                cache.normalized[i] = xh;
                out.output[i] = g * xh + b;
            }
        cache.batch_mean[c] = mu;
        cache.batch_var[c] = var;
        cache.sigma[c] = sigma;
        out.state.running_mean[c] = state.momentum * state.running_mean[c] + (1.0 - state.momentum) * mu;
        out.state.running_var[c] = state.momentum * state.running_var[c] + (1.0 - state.momentum) * var;
    }
    return out;
}

BNCache batchnorm_infer_cache(const Tensor& x, const BatchNormState& state)
{
    const auto L = channel_layout(x.shape());
    require_channels(L, state);
    BNCache cache;
    cache.input = x;
    cache.normalized = Tensor(x.shape());
    cache.batch_mean.assign(state.running_mean.values().begin(), state.running_mean.values().end());
    cache.batch_var.assign(state.running_var.values().begin(), state.running_var.values().end());
    cache.sigma.resize(L.channels);
    cache.per_channel = L.per_channel();
    cache.training = false;
    for (std::size_t c = 0; c < L.channels; ++c) {
        cache.sigma[c] = std::sqrt(state.running_var[c] + state.eps);
        for (std::size_t n = 0; n < L.batch; ++n)
            for (std::size_t s = 0; s < L.spatial; ++s) {
                const std::size_t i = L.index(n, c, s);
                cache.normalized[i] = (x[i] - state.running_mean[c]) / cache.sigma[c];
            }
    }
    return cache;
}

Tensor batchnorm_forward_infer(const Tensor& x, const BatchNormState& state)
{
    const auto L = channel_layout(x.shape());
    require_channels(L, state);
    Tensor y(x.shape());
    for (std::size_t c = 0; c < L.channels; ++c) {
        const double sigma = std::sqrt(state.running_var[c] + state.eps);
        if (!(sigma > 0.0)) throw DomainError("batchnorm running variance + eps must be positive");
        const double mu = state.running_mean[c], g = state.gamma[c], b = state.beta[c];
        for (std::size_t n = 0; n < L.batch; ++n)
            for (std::size_t s = 0; s < L.spatial; ++s) {
                const std::size_t i = L.index(n, c, s);
                y[i] = g * ((x[i] - mu) / sigma) + b;
            }
    }
    return y;
}

BNGrads batchnorm_backward(const Tensor& dy, const BNCache& cache, const BatchNormState& state)
{
    if (dy.shape() != cache.normalized.shape()) {
        throw ShapeError("batchnorm backward: gradient " + shape_to_string(dy.shape()) + " vs cached " +
                         shape_to_string(cache.normalized.shape()));
    }
    const auto L = channel_layout(dy.shape());
    require_channels(L, state);
    BNGrads g{Tensor(dy.shape()), Tensor({L.channels}), Tensor({L.channels})};
    const double m = static_cast<double>(L.per_channel());
    for (std::size_t c = 0; c < L.channels; ++c) {
        double sum_dy = 0.0;
        double sum_dy_xh = 0.0;
        for (std::size_t n = 0; n < L.batch; ++n)
            for (std::size_t s = 0; s < L.spatial; ++s) {
                const std::size_t i = L.index(n, c, s);
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * cache.normalized[i];
            }
        g.dbeta[c] = sum_dy;
        g.dgamma[c] = sum_dy_xh;
        const double k = state.gamma[c] / cache.sigma[c];
        const double mean_dy = sum_dy / m;
        const double mean_dy_xh = sum_dy_xh / m;
        for (std::size_t n = 0; n < L.batch; ++n)
            for (std::size_t s = 0; s < L.spatial; ++s) {
                const std::size_t i = L.index(n, c, s);
                g.dx[i] = cache.training ? k * (dy[i] - mean_dy - cache.normalized[i] * mean_dy_xh) : k * dy[i];
            }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Dense / conv / activations / pooling

Tensor dense_forward(const Tensor& x, const Tensor& kernel, const Tensor& bias)
{
    if (x.rank() != 2 || x.dim(1) != kernel.dim(0)) {
        throw ShapeError("dense: input " + shape_to_string(x.shape()) + " vs kernel " +
                         shape_to_string(kernel.shape()));
    }
    Tensor y = matmul(x, kernel);
    const std::size_t out = kernel.dim(1);
    for (std::size_t n = 0; n < x.dim(0); ++n)
        for (std::size_t j = 0; j < out; ++j) y.at(n, j) += bias[j];
    return y;
}

DenseGrads dense_backward(const Tensor& dy, const Tensor& x, const Tensor& kernel)
{
    const std::size_t n = x.dim(0);
    const std::size_t in = kernel.dim(0);
    const std::size_t out = kernel.dim(1);
    if (dy.shape() != Shape{n, out}) throw ShapeError("dense backward: gradient " + shape_to_string(dy.shape()));
    DenseGrads g{Tensor({n, in}), Tensor({in, out}), Tensor({out})};
    gemm(false, true, n, in, out, 1.0, dy.data().data(), kernel.data().data(), 0.0, g.dx.data().data());
    gemm(true, false, in, out, n, 1.0, x.data().data(), dy.data().data(), 0.0, g.dkernel.data().data());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out; ++j) g.dbias[j] += dy.at(i, j);
    return g;
}

Tensor conv_forward(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                    std::size_t padding)
{
    Tensor y = conv2d(x, kernel, stride, padding);
    const std::size_t f = y.dim(1);
    const std::size_t spatial = y.dim(2) * y.dim(3);
    for (std::size_t n = 0; n < y.dim(0); ++n)
        for (std::size_t c = 0; c < f; ++c) {
            double* p = y.data().data() + (n * f + c) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) p[s] += bias[c];
        }
    return y;
}

ConvGrads conv_backward(const Tensor& dy, const Tensor& x, const Tensor& kernel, std::size_t stride,
                        std::size_t padding)
{
    ConvGrads g;
    g.dx = conv2d_backward_input(dy, kernel, x.shape(), stride, padding);
    g.dkernel = conv2d_backward_kernel(dy, x, kernel.shape(), stride, padding);
    const std::size_t f = dy.dim(1);
    const std::size_t spatial = dy.dim(2) * dy.dim(3);
    g.dbias = Tensor({f});
    for (std::size_t n = 0; n < dy.dim(0); ++n)
        for (std::size_t c = 0; c < f; ++c) {
            const double* p = dy.data().data() + (n * f + c) * spatial;
            double s = 0.0;
            for (std::size_t k = 0; k < spatial; ++k) s += p[k];
            g.dbias[c] += s;
        }
    return g;
}

Tensor relu_forward(const Tensor& x)
{
    Tensor y = x;
    for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
    return y;
}

Tensor relu_backward(const Tensor& dy, const Tensor& x)
{
    if (dy.shape() != x.shape()) throw ShapeError("relu backward: shape mismatch");
    Tensor dx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > 0.0 ? dy[i] : 0.0;
    return dx;
}

PoolForward maxpool_forward(const Tensor& x, std::size_t kernel, std::size_t stride)
{
    if (x.rank() != 4) throw ShapeError("maxpool expects [N,C,H,W]");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t oh = conv_output_extent(H, kernel, stride, 0);
    const std::size_t ow = conv_output_extent(W, kernel, stride, 0);
    PoolForward out{Tensor({N, C, oh, ow}), std::vector<std::size_t>(N * C * oh * ow)};
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const std::size_t base = nc * H * W;
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx, ++o) {
                std::size_t best = base + (y * stride) * W + xx * stride;
                for (std::size_t i = 0; i < kernel; ++i)
                    for (std::size_t j = 0; j < kernel; ++j) {
                        const std::size_t idx = base + (y * stride + i) * W + xx * stride + j;
                        if (x[idx] > x[best]) best = idx;
                    }
                out.output[o] = x[best];
                out.argmax[o] = best;
            }
    }
    return out;
}

Tensor maxpool_backward(const Tensor& dy, const std::vector<std::size_t>& argmax, const Shape& input_shape)
{
    if (dy.size() != argmax.size()) throw ShapeError("maxpool backward: gradient size mismatch");
    Tensor dx(input_shape);
    for (std::size_t o = 0; o < argmax.size(); ++o) dx[argmax[o]] += dy[o];
    return dx;
}

namespace {

struct PoolWindow {
    std::size_t kh, kw, stride, oh, ow;
};

PoolWindow avg_window(const Shape& in, std::size_t kernel, std::size_t stride)
{
    if (in.size() != 4) throw ShapeError("avgpool expects [N,C,H,W]");
    if (kernel == 0) return {in[2], in[3], 1, 1, 1};
    return {kernel, kernel, stride, conv_output_extent(in[2], kernel, stride, 0),
            conv_output_extent(in[3], kernel, stride, 0)};
}

}  // namespace

Tensor avgpool_forward(const Tensor& x, std::size_t kernel, std::size_t stride)
{
    const auto w = avg_window(x.shape(), kernel, stride);
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor y({N, C, w.oh, w.ow});
    const double inv = 1.0 / static_cast<double>(w.kh * w.kw);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        const double* plane = x.data().data() + nc * H * W;
        for (std::size_t i = 0; i < w.oh; ++i)
            for (std::size_t j = 0; j < w.ow; ++j, ++o) {
                double s = 0.0;
                for (std::size_t a = 0; a < w.kh; ++a)
                    for (std::size_t b = 0; b < w.kw; ++b) s += plane[(i * w.stride + a) * W + j * w.stride + b];
                y[o] = s * inv;
            }
    }
    return y;
}

Tensor avgpool_backward(const Tensor& dy, const Shape& input_shape, std::size_t kernel, std::size_t stride)
{
    const auto w = avg_window(input_shape, kernel, stride);
    const std::size_t N = input_shape[0], C = input_shape[1], H = input_shape[2], W = input_shape[3];
    if (dy.shape() != Shape{N, C, w.oh, w.ow}) throw ShapeError("avgpool backward: gradient shape mismatch");
    Tensor dx(input_shape);
    const double inv = 1.0 / static_cast<double>(w.kh * w.kw);
    std::size_t o = 0;
    for (std::size_t nc = 0; nc < N * C; ++nc) {
        double* plane = dx.data().data() + nc * H * W;
        for (std::size_t i = 0; i < w.oh; ++i)
            for (std::size_t j = 0; j < w.ow; ++j, ++o)
                for (std::size_t a = 0; a < w.kh; ++a)
                    for (std::size_t b = 0; b < w.kw; ++b) plane[(i * w.stride + a) * W + j * w.stride + b] += dy[o] * inv;
    }
    return dx;
}

Tensor shortcut_forward(const Tensor& x, const Shape& out_shape)
{
    if (x.shape() == out_shape) return x;
    if (x.rank() != 4 || out_shape.size() != 4) throw ShapeError("shortcut: rank mismatch");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t stride = H / out_shape[2];
    Tensor y(out_shape);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < out_shape[2]; ++i)
                for (std::size_t j = 0; j < out_shape[3]; ++j) {
                    const std::size_t src = ((n * C + c) * H + i * stride) * W + j * stride;
                    y.at(n, c, i, j) = x[src];
                }
    return y;
}

Tensor shortcut_backward(const Tensor& dy, const Shape& in_shape)
{
    if (dy.shape() == in_shape) return dy;
    const std::size_t N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3];
    const std::size_t stride = H / dy.dim(2);
    Tensor dx(in_shape);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < dy.dim(2); ++i)
                for (std::size_t j = 0; j < dy.dim(3); ++j) {
                    const std::size_t dst = ((n * C + c) * H + i * stride) * W + j * stride;
                    dx[dst] += dy.at(n, c, i, j);
                }
    return dx;
}

// ---------------------------------------------------------------------------
// Loss

Tensor softmax(const Tensor& logits)
{
    if (logits.rank() != 2) throw ShapeError("softmax expects [N, classes]");
    Tensor p(logits.shape());
    const std::size_t k = logits.dim(1);
    for (std::size_t n = 0; n < logits.dim(0); ++n) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.at(n, j));
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            p.at(n, j) = std::exp(logits.at(n, j) - mx);
            z += p.at(n, j);
        }
        for (std::size_t j = 0; j < k; ++j) p.at(n, j) /= z;
    }
    return p;
}

LossResult softmax_cross_entropy(const Tensor& logits, std::span<const int> labels)
{
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("cross-entropy: logits " + shape_to_string(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
    }
    const std::size_t n = logits.dim(0);
    const std::size_t k = logits.dim(1);
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= k) {
            throw DomainError("label " + std::to_string(y) + " outside [0, " + std::to_string(k) + ")");
        }
    }
    LossResult r{0.0, softmax(logits)};
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < k; ++j) mx = std::max(mx, logits.at(i, j));
        double z = 0.0;
        for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.at(i, j) - mx);
        r.loss += (mx + std::log(z) - logits.at(i, y)) * inv_n;
        r.dlogits.at(i, y) -= 1.0;
    }
    scale_inplace(r.dlogits, inv_n);
    return r;
}

// ---------------------------------------------------------------------------
// Whole model

ForwardResult model_forward(const Model& model, const Tensor& batch, Mode mode, bool retain_cache)
{
    if (batch.rank() != model.input_shape.size() + 1 || per_sample(batch.shape()) != model.input_shape) {
        throw ShapeError("model '" + model.name + "' expects samples of shape " +
                         shape_to_string(model.input_shape) + ", got batch " + shape_to_string(batch.shape()));
    }
    const bool keep = mode == Mode::Train || retain_cache;
    ForwardResult result;
    ForwardCache cache;
    cache.mode = mode;
    if (keep) cache.layers.resize(model.layers.size());

    std::vector<Tensor> saved;
    Tensor x = batch;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        const Layer& layer = model.layers[li];
        const LayerSpec& s = layer.spec;
        LayerCache* lc = keep ? &cache.layers[li] : nullptr;
        if (lc) lc->input_shape = x.shape();
        switch (s.kind) {
        case LayerKind::Dense: {
            Tensor y = dense_forward(x, layer.params[0], layer.params[1]);
            if (lc) lc->input = std::move(x);
            x = std::move(y);
            break;
        }
        case LayerKind::Conv2d: {
            Tensor y = conv_forward(x, layer.params[0], layer.params[1], s.stride, s.padding);
            if (lc) lc->input = std::move(x);
            x = std::move(y);
            break;
        }
        case LayerKind::BatchNorm: {
            const auto state = bn_state_of(layer);
            if (mode == Mode::Train) {
                auto fw = batchnorm_forward_train(x, state);
                lc->bn = std::move(fw.cache);
                x = std::move(fw.output);
            } else {
                if (lc) lc->bn = batchnorm_infer_cache(x, state);
                x = batchnorm_forward_infer(x, state);
            }
            break;
        }
        case LayerKind::Relu: {
            Tensor y = relu_forward(x);
            if (lc) lc->input = std::move(x);
            x = std::move(y);
            break;
        }
        case LayerKind::MaxPool: {
            auto fw = maxpool_forward(x, s.kernel, s.stride);
            if (lc) lc->argmax = std::move(fw.argmax);
            x = std::move(fw.output);
            break;
        }
        case LayerKind::AvgPool: x = avgpool_forward(x, s.kernel, s.stride); break;
        case LayerKind::Flatten: {
            const std::size_t n = x.dim(0);
            x = x.reshaped({n, x.size() / n});
            break;
        }
        case LayerKind::ResidualEntry: saved.push_back(x); break;
        case LayerKind::ResidualExit: {
            if (saved.empty()) throw ShapeError("residual exit without entry");
            Tensor shortcut = std::move(saved.back());
            saved.pop_back();
            if (lc) lc->shortcut_shape = shortcut.shape();
            add_inplace(x, shortcut_forward(shortcut, x.shape()));
            break;
        }
        }
    }
    result.logits = std::move(x);
    if (keep) result.cache = std::move(cache);
    return result;
}

void update_running_stats(Model& model, const ForwardCache& cache)
{
    if (cache.mode != Mode::Train) return;
    for (std::size_t li = 0; li < model.layers.size(); ++li) {
        Layer& layer = model.layers[li];
        if (layer.spec.kind != LayerKind::BatchNorm) continue;
        const BNCache& bn = cache.layers.at(li).bn;
        const double mom = layer.spec.momentum;
        for (std::size_t c = 0; c < bn.batch_mean.size(); ++c) {
            layer.buffers[0][c] = mom * layer.buffers[0][c] + (1.0 - mom) * bn.batch_mean[c];
            layer.buffers[1][c] = mom * layer.buffers[1][c] + (1.0 - mom) * bn.batch_var[c];
        }
    }
}

Gradients zeros_like_params(const Model& model)
{
    Gradients g(model.layers.size());
    for (std::size_t li = 0; li < model.layers.size(); ++li)
        for (const auto& p : model.layers[li].params) g[li].emplace_back(p.shape());
    return g;
}

Gradients backward_from_logits(const Model& model, const ForwardCache& cache, const Tensor& dlogits)
{
    if (cache.layers.size() != model.layers.size()) throw ShapeError("cache does not belong to this model");
    Gradients grads(model.layers.size());
    std::vector<Tensor> shortcut_grads;
    Tensor g = dlogits;
    for (std::size_t k = model.layers.size(); k-- > 0;) {
        const Layer& layer = model.layers[k];
        const LayerSpec& s = layer.spec;
        const LayerCache& lc = cache.layers[k];
        switch (s.kind) {
        case LayerKind::Dense: {
            auto d = dense_backward(g, lc.input, layer.params[0]);
            grads[k] = {std::move(d.dkernel), std::move(d.dbias)};
            g = std::move(d.dx);
            break;
        }
        case LayerKind::Conv2d: {
            auto d = conv_backward(g, lc.input, layer.params[0], s.stride, s.padding);
            grads[k] = {std::move(d.dkernel), std::move(d.dbias)};
            g = std::move(d.dx);
            break;
        }
        case LayerKind::BatchNorm: {
            auto d = batchnorm_backward(g, lc.bn, bn_state_of(layer));
            grads[k] = {std::move(d.dgamma), std::move(d.dbeta)};
            g = std::move(d.dx);
            break;
        }
        case LayerKind::Relu: g = relu_backward(g, lc.input); break;
        case LayerKind::MaxPool: g = maxpool_backward(g, lc.argmax, lc.input_shape); break;
        case LayerKind::AvgPool: g = avgpool_backward(g, lc.input_shape, s.kernel, s.stride); break;
        case LayerKind::Flatten: g = g.reshaped(lc.input_shape); break;
        case LayerKind::ResidualExit: shortcut_grads.push_back(shortcut_backward(g, lc.shortcut_shape)); break;
        case LayerKind::ResidualEntry:
            if (shortcut_grads.empty()) throw ShapeError("residual entry without exit in backward pass");
            add_inplace(g, shortcut_grads.back());
            shortcut_grads.pop_back();
            break;
        }
    }
    return grads;
}

BackwardResult model_backward(const Model& model, const ForwardCache& cache, const Tensor& logits,
                              std::span<const int> labels)
{
    auto loss = softmax_cross_entropy(logits, labels);
    return {loss.loss, backward_from_logits(model, cache, loss.dlogits)};
}

std::vector<double> flatten_gradients(const Gradients& grads)
{
    std::vector<double> flat;
    for (const auto& layer : grads)
        for (const auto& t : layer) flat.insert(flat.end(), t.data().begin(), t.data().end());
    return flat;
}

}  // namespace bnnoise
