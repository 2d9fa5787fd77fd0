#include "bnnoise/nn.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace bnnoise;

namespace {

double channel_mean(const Tensor& y, std::size_t c)
{
    const std::size_t C = y.dim(1);
    double s = 0.0;
    for (std::size_t n = 0; n < y.dim(0); ++n) s += y.at(n, c);
    (void)C;
    return s / static_cast<double>(y.dim(0));
}

double channel_std(const Tensor& y, std::size_t c)
{
    const double mu = channel_mean(y, c);
    double s = 0.0;
    for (std::size_t n = 0; n < y.dim(0); ++n) s += (y.at(n, c) - mu) * (y.at(n, c) - mu);
    return std::sqrt(s / static_cast<double>(y.dim(0)));
}

}  // namespace

TEST(BatchNormTrain, AlreadyNormalizedInputPassesThrough)
{
    Tensor x({4, 2}, {1, -1, -1, 1, 1, -1, -1, 1});  // each channel: mean 0, variance 1
    auto st = BatchNormState::fresh(2, 1e-8);
    const auto fw = batchnorm_forward_train(x, st);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(fw.output[i], x[i], 1e-6);
}

TEST(BatchNormTrain, ConstantChannelCollapsesToBeta)
{
    Tensor x({5, 1}, 3.25);
    auto st = BatchNormState::fresh(1, 1e-5);
    st.beta[0] = 5.0;
    const auto fw = batchnorm_forward_train(x, st);
    for (double v : fw.output.data()) EXPECT_DOUBLE_EQ(v, 5.0);
}

TEST(BatchNormTrain, OutputMoments)
{
    RngStream rng(4, 0);
    Tensor x = gaussian_sample({64, 3}, 0.0, 1.0, rng);
    for (std::size_t n = 0; n < 64; ++n) x.at(n, 1) = 3.0 + 0.01 * x.at(n, 1);  // small variance: eps matters
    auto st = BatchNormState::fresh(3, 1e-5);
    st.gamma = Tensor({3}, {1.5, 0.7, -2.0});
    st.beta = Tensor({3}, {0.1, -0.4, 2.0});
    const auto fw = batchnorm_forward_train(x, st);
    for (std::size_t c = 0; c < 3; ++c) {
        const double var = fw.cache.batch_var[c];
        EXPECT_NEAR(channel_mean(fw.output, c), st.beta[c], 1e-9);
        EXPECT_NEAR(channel_std(fw.output, c), std::abs(st.gamma[c]) * std::sqrt(var / (var + 1e-5)), 1e-9);
    }
}

TEST(BatchNormTrain, RunningStatisticsUseMomentum)
{
    Tensor x({4, 1}, {1, 2, 3, 6});
    auto st = BatchNormState::fresh(1, 1e-5, 0.9);
    const auto fw = batchnorm_forward_train(x, st);
    EXPECT_NEAR(fw.state.running_mean[0], 0.1 * 3.0, 1e-15);
    EXPECT_NEAR(fw.state.running_var[0], 0.9 + 0.1 * 3.5, 1e-15);  // biased variance 3.5
}

TEST(BatchNormTrain, SingleSampleRejected)
{
    auto st = BatchNormState::fresh(2);
    EXPECT_THROW(batchnorm_forward_train(Tensor({1, 2}, 1.0), st), DomainError);
}

TEST(BatchNormInfer, HandExamples)
{
    RngStream rng(5, 0);
    const Tensor x = gaussian_sample({3, 2, 2, 2}, 0.0, 1.0, rng);
    auto st = BatchNormState::fresh(2, 0.0);
    EXPECT_EQ(batchnorm_forward_infer(x, st), x);

    st = BatchNormState::fresh(2, 1e-5);
    st.running_mean = Tensor({2}, {0.3, -1.2});
    st.running_var = Tensor({2}, {2.0, 0.5});
    st.beta = Tensor({2}, {0.7, -0.25});
    Tensor at_mean({2, 2}, {0.3, -1.2, 0.3, -1.2});
    const Tensor y = batchnorm_forward_infer(at_mean, st);
    EXPECT_EQ(y, Tensor({2, 2}, {0.7, -0.25, 0.7, -0.25}));
    EXPECT_EQ(batchnorm_forward_infer(x, st), batchnorm_forward_infer(x, st));
}

TEST(BatchNormBackward, ZeroUpstream)
{
    RngStream rng(6, 0);
    const Tensor x = gaussian_sample({4, 3}, 0.0, 1.0, rng);
    auto st = BatchNormState::fresh(3);
    const auto fw = batchnorm_forward_train(x, st);
    const auto g = batchnorm_backward(Tensor({4, 3}, 0.0), fw.cache, st);
    EXPECT_EQ(g.dx, Tensor({4, 3}, 0.0));
    EXPECT_EQ(g.dgamma, Tensor({3}, 0.0));
    EXPECT_EQ(g.dbeta, Tensor({3}, 0.0));
}

TEST(BatchNormBackward, DbetaIsUpstreamSum)
{
    RngStream rng(7, 0);
    const Tensor x = gaussian_sample({3, 2, 2, 2}, 0.0, 1.0, rng);
    const Tensor dy = gaussian_sample({3, 2, 2, 2}, 0.0, 1.0, rng);
    auto st = BatchNormState::fresh(2);
    const auto g = batchnorm_backward(dy, batchnorm_forward_train(x, st).cache, st);
    for (std::size_t c = 0; c < 2; ++c) {
        double s = 0.0;
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t i = 0; i < 4; ++i) s += dy.at(n, c, i / 2, i % 2);
        EXPECT_NEAR(g.dbeta[c], s, 1e-12);
    }
}

TEST(BatchNormBackward, FiniteDifferencesSmallInstance)
{
    RngStream rng(8, 0);
    Tensor x = gaussian_sample({4, 3}, 0.5, 2.0, rng);
    auto st = BatchNormState::fresh(3);
    st.gamma = Tensor({3}, {1.3, -0.6, 0.9});
    const Tensor r = gaussian_sample({4, 3}, 0.0, 1.0, rng);
    const auto g = batchnorm_backward(r, batchnorm_forward_train(x, st).cache, st);
    auto f = [&] { return gradcheck::project(r, batchnorm_forward_train(x, st).output); };
    EXPECT_LT(gradcheck::relative_error(g.dx.values(), gradcheck::numeric_gradient(f, x)), 1e-6);
}

TEST(BatchNormBackward, InferModeIsDiagonal)
{
    RngStream rng(9, 0);
    const Tensor x = gaussian_sample({2, 2}, 0.0, 1.0, rng);
    auto st = BatchNormState::fresh(2);
    st.running_var = Tensor({2}, {4.0, 0.25});
    st.gamma = Tensor({2}, {2.0, 3.0});
    const Tensor dy({2, 2}, 1.0);
    const auto g = batchnorm_backward(dy, batchnorm_infer_cache(x, st), st);
    EXPECT_NEAR(g.dx.at(0, 0), 2.0 / std::sqrt(4.0 + 1e-5), 1e-12);
    EXPECT_NEAR(g.dx.at(1, 1), 3.0 / std::sqrt(0.25 + 1e-5), 1e-12);
}

class LayerGradients : public ::testing::TestWithParam<gradcheck::Kernel> {};

TEST_P(LayerGradients, MatchCentralDifferences)
{
    for (std::uint64_t seed = 0; seed < 5; ++seed)
        for (const auto& r : gradcheck::check_layer_instance(GetParam(), seed))
            EXPECT_LT(r.error, 1e-5) << r.what << " seed " << seed;
}

INSTANTIATE_TEST_SUITE_P(Kernels, LayerGradients, ::testing::ValuesIn(gradcheck::kAllKernels),
                         [](const auto& info) { return std::string(gradcheck::name(info.param)); });

TEST(ModelGradients, ConvBatchNormDenseMatchesFiniteDifferences)
{
    for (const auto& r : gradcheck::check_model_instance(1)) EXPECT_LT(r.error, 1e-5) << r.what;
}

TEST(Loss, LogitGradientClosedForm)
{
    const Tensor z({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
    const std::vector<int> labels{1, 0};
    const auto res = softmax_cross_entropy(z, labels);
    const Tensor p = softmax(z);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            const double onehot = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
            EXPECT_NEAR(res.dlogits.at(i, j), (p.at(i, j) - onehot) / 2.0, 1e-15);
        }
    EXPECT_THROW(softmax_cross_entropy(z, std::vector<int>{3, 0}), DomainError);
}

TEST(Loss, SoftmaxStableForLargeLogits)
{
    const Tensor p = softmax(Tensor({1, 2}, {1000.0, 1000.0}));
    EXPECT_DOUBLE_EQ(p[0], 0.5);
}

TEST(ModelForward, IdentityDenseOnOneHot)
{
    const ModelSpec spec = mlp_spec({3}, {}, 3);
    Model m = build_model(spec, no_bn_mask(spec));
    ASSERT_EQ(m.layers.size(), 1u);
    m.layers[0].params[0] = identity(3);
    const Tensor x({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    EXPECT_EQ(model_forward(m, x, Mode::Infer).logits, x);
}

TEST(ModelForward, TwoLayerMlpMatchesHandRolled)
{
    RngStream rng(12, 0);
    const ModelSpec spec = mlp_spec({4}, {5}, 3);
    Model m = build_model(spec, no_bn_mask(spec));
    for (auto& layer : m.layers)
        for (auto& p : layer.params) p = gaussian_sample(p.shape(), 0.0, 1.0, rng);
    const Tensor x = gaussian_sample({6, 4}, 0.0, 1.0, rng);
    const Tensor logits = model_forward(m, x, Mode::Infer).logits;

    const Tensor& w1 = m.layers[0].params[0];
    const Tensor& b1 = m.layers[0].params[1];
    const Tensor& w2 = m.layers[2].params[0];
    const Tensor& b2 = m.layers[2].params[1];
    for (std::size_t n = 0; n < 6; ++n) {
        double h[5];
        for (std::size_t j = 0; j < 5; ++j) {
            double s = b1[j];
            for (std::size_t i = 0; i < 4; ++i) s += x.at(n, i) * w1.at(i, j);
            h[j] = s > 0.0 ? s : 0.0;
        }
        for (std::size_t k = 0; k < 3; ++k) {
            double s = b2[k];
            for (std::size_t j = 0; j < 5; ++j) s += h[j] * w2.at(j, k);
            EXPECT_NEAR(logits.at(n, k), s, 1e-12);
        }
    }
    EXPECT_EQ(model_forward(m, x, Mode::Infer).logits, logits);
}

TEST(ModelBackward, DuplicatedBatchLeavesGradientsUnchanged)
{
    RngStream rng(13, 0);
    const ModelSpec spec = mlp_spec({4}, {6}, 3);
    Model m = build_model(spec, full_bn_mask(spec));
    for (auto& layer : m.layers)
        if (layer.spec.kind != LayerKind::BatchNorm)
            for (auto& p : layer.params) p = gaussian_sample(p.shape(), 0.0, 1.0, rng);
    const Tensor x = gaussian_sample({3, 4}, 0.0, 1.0, rng);
    Tensor xx({6, 4});
    for (std::size_t i = 0; i < 12; ++i) {
        xx[i] = x[i];
        xx[12 + i] = x[i];
    }
    const std::vector<int> y{0, 2, 1}, yy{0, 2, 1, 0, 2, 1};
    auto f1 = model_forward(m, x, Mode::Train);
    auto f2 = model_forward(m, xx, Mode::Train);
    const auto g1 = flatten_gradients(model_backward(m, *f1.cache, f1.logits, y).grads);
    const auto g2 = flatten_gradients(model_backward(m, *f2.cache, f2.logits, yy).grads);
    ASSERT_EQ(g1.size(), g2.size());
    for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_NEAR(g1[i], g2[i], 1e-12);
}

TEST(Architectures, ResNetDepthAndShapes)
{
    const ModelSpec r8 = resnet_spec({3, 32, 32}, 1, 10);
    EXPECT_EQ(r8.name, "resnet8");
    EXPECT_EQ(r8.weighted_layer_count(), 8u);
    const ModelSpec r20 = resnet_spec({3, 32, 32}, 3, 10);
    EXPECT_EQ(r20.weighted_layer_count(), 20u);
    const Model m = build_model(r8, full_bn_mask(r8));
    EXPECT_EQ(m.batchnorm_count(), 8u);
    const Tensor logits = model_forward(m, Tensor({2, 3, 32, 32}, 0.1), Mode::Infer).logits;
    EXPECT_EQ(logits.shape(), (Shape{2, 10}));
}

TEST(Architectures, VggVariantsCompose)
{
    const ModelSpec v = micro_vgg_spec({3, 32, 32}, 10);
    EXPECT_NO_THROW(infer_shapes(v.layers, v.input_shape));
    const ModelSpec v16 = vgg16_spec({3, 32, 32}, 10);
    EXPECT_EQ(v16.weighted_layer_count(), 16u);
}

TEST(BnMode, ParseAndFormat)
{
    const ModelSpec spec = resnet_spec({3, 8, 8}, 1, 4, 4);
    EXPECT_EQ(parse_bn_mode("full", spec), full_bn_mask(spec));
    EXPECT_EQ(parse_bn_mode("none", spec), no_bn_mask(spec));
    const auto mask = parse_bn_mode("partial:10000001", spec);
    EXPECT_EQ(bn_mode_string(mask), "partial:10000001");
    EXPECT_THROW(parse_bn_mode("partial:101", spec), std::exception);
    EXPECT_THROW(parse_bn_mode("some", spec), std::exception);
}

TEST(BnMode, PolicyMaskOrder)
{
    const ModelSpec spec = resnet_spec({3, 8, 8}, 1, 4, 4);
    EXPECT_EQ(policy_mask(spec, 0), no_bn_mask(spec));
    EXPECT_EQ(policy_mask(spec, spec.weighted_layer_count()), full_bn_mask(spec));
    const auto one = policy_mask(spec, 1);
    EXPECT_TRUE(one[0]);
    EXPECT_EQ(std::count(one.begin(), one.end(), true), 1);
}
