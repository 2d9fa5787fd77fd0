#include "bnnoise/metrics.hpp"
#include "bnnoise/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

using namespace bnnoise;

namespace {

Dataset blobs(std::size_t classes, std::size_t per_class, std::uint64_t seed)
{
    SyntheticOptions o;
    o.classes = classes;
    o.n_per_class = per_class;
    o.channels = 1;
    o.image_side = 4;
    o.relative_noise = 0.1;
    o.seed = seed;
    return synthetic_dataset(o);
}

Hyperparams quick(std::size_t epochs)
{
    Hyperparams h;
    h.learning_rate = 0.01;
    h.batch_size = 16;
    h.epochs = epochs;
    h.seed = 3;
    return h;
}

}  // namespace

TEST(Glorot, BoundForEqualFans)
{
    RngStream rng(0, 0);
    const Tensor t = init_glorot_uniform(3, 3, {1000}, rng);
    for (double v : t.data()) {
        EXPECT_GT(v, -1.0);
        EXPECT_LT(v, 1.0);
    }
    EXPECT_GT(*std::max_element(t.values().begin(), t.values().end()), 0.95);
    EXPECT_THROW(init_glorot_uniform(600, 0, {4}, rng), DomainError);
}

TEST(Glorot, UniformMomentOracle)
{
    RngStream rng(1, 0);
    const Tensor t = init_glorot_uniform(48, 48, {100000}, rng);
    const double expected = std::sqrt(2.0 / 96.0);  // L / sqrt(3) with L = sqrt(6/96)
    EXPECT_NEAR(population_std(t), expected, 0.02 * expected);
}

TEST(Glorot, InitializeModelZeroesBiases)
{
    const ModelSpec spec = mlp_spec({4}, {5}, 3);
    Model m = build_model(spec, full_bn_mask(spec));
    RngStream rng(2, 0);
    initialize_model(m, rng);
    for (const auto& layer : m.layers) {
        if (layer.params.empty()) continue;
        if (layer.spec.kind == LayerKind::BatchNorm) {
            EXPECT_EQ(layer.params[0], Tensor(layer.params[0].shape(), 1.0));
            continue;
        }
        EXPECT_EQ(layer.params[1], Tensor(layer.params[1].shape(), 0.0));
        EXPECT_GT(squared_norm(layer.params[0]), 0.0);
    }
}

TEST(Adam, ZeroGradientLeavesParameters)
{
    Tensor p({3}, {1.0, -2.0, 3.0});
    const Tensor before = p;
    const Tensor g({3}, 0.0);
    AdamState st;
    adam_step({&p}, {&g}, st, 1e-3, 0.9, 0.999, 1e-7);
    EXPECT_EQ(p, before);
}

TEST(Adam, ConstantGradientStepApproachesLearningRate)
{
    Tensor p({2}, {0.0, 0.0});
    const Tensor g({2}, {0.3, -5.0});
    AdamState st;
    Tensor prev = p;
    for (int i = 0; i < 1000; ++i) {
        prev = p;
        adam_step({&p}, {&g}, st, 1e-3, 0.9, 0.999, 1e-7);
    }
    EXPECT_NEAR(p[0] - prev[0], -1e-3, 1e-8);
    EXPECT_NEAR(p[1] - prev[1], 1e-3, 1e-8);
}

TEST(Adam, JointUpdateEqualsSeparate)
{
    RngStream rng(4, 0);
    Tensor a = gaussian_sample({5}, 0.0, 1.0, rng), b = gaussian_sample({2, 3}, 0.0, 1.0, rng);
    Tensor a2 = a, b2 = b;
    AdamState joint, sa, sb;
    for (int i = 0; i < 10; ++i) {
        const Tensor ga = gaussian_sample({5}, 0.0, 1.0, rng), gb = gaussian_sample({2, 3}, 0.0, 1.0, rng);
        adam_step({&a, &b}, {&ga, &gb}, joint, 1e-2, 0.9, 0.999, 1e-7);
        adam_step({&a2}, {&ga}, sa, 1e-2, 0.9, 0.999, 1e-7);
        adam_step({&b2}, {&gb}, sb, 1e-2, 0.9, 0.999, 1e-7);
    }
    EXPECT_EQ(a, a2);
    EXPECT_EQ(b, b2);
}

TEST(Augment, NonePolicyIsIdentity)
{
    RngStream rng(5, 0);
    const Tensor x = gaussian_sample({3, 2, 4, 4}, 0.0, 1.0, rng);
    EXPECT_EQ(augment_batch(x, rng, AugmentPolicy{}), x);
}

TEST(Augment, ForcedFlipTwiceIsIdentity)
{
    RngStream rng(6, 0);
    const Tensor x = gaussian_sample({3, 2, 4, 5}, 0.0, 1.0, rng);
    AugmentPolicy p;
    p.flip = true;
    p.flip_probability = 1.0;
    const Tensor once = augment_batch(x, rng, p);
    EXPECT_FALSE(once == x);
    EXPECT_EQ(augment_batch(once, rng, p), x);
    EXPECT_EQ(flip_horizontal(flip_horizontal(x, 1), 1), x);
}

TEST(Augment, FlipPreservesPixelMultiset)
{
    RngStream rng(7, 0);
    const Tensor x = gaussian_sample({4, 3, 5, 5}, 0.0, 1.0, rng);
    AugmentPolicy p;
    p.flip = true;
    auto a = augment_batch(x, rng, p).values();
    auto b = x.values();
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    EXPECT_EQ(a, b);
}

TEST(Augment, CropKeepsShape)
{
    RngStream rng(8, 0);
    const Tensor x = gaussian_sample({2, 3, 8, 8}, 0.0, 1.0, rng);
    AugmentPolicy p;
    p.crop = true;
    p.crop_padding = 2;
    EXPECT_EQ(augment_batch(x, rng, p).shape(), x.shape());
}

TEST(Train, SeparableBlobsReachFullTrainAccuracy)
{
    const Dataset d = blobs(2, 64, 1);
    const ModelSpec spec = mlp_spec(d.sample_shape(), {8}, 2);
    const auto r = train(spec, no_bn_mask(spec), d, quick(50));
    EXPECT_DOUBLE_EQ(r.report.final_train_accuracy, 1.0);
    EXPECT_TRUE(r.report.converged);
    EXPECT_DOUBLE_EQ(evaluate_accuracy(r.model, d), 1.0);
}

TEST(Train, ZeroEpochsReturnsInitialization)
{
    const Dataset d = blobs(2, 16, 2);
    const ModelSpec spec = mlp_spec(d.sample_shape(), {8}, 2);
    const auto r = train(spec, full_bn_mask(spec), d, quick(0));
    Model init = build_model(spec, full_bn_mask(spec));
    RngStream rng(quick(0).seed, 1);
    initialize_model(init, rng);
    EXPECT_EQ(encode_checkpoint(r.model), encode_checkpoint(init));
    EXPECT_FALSE(r.report.converged);
    EXPECT_TRUE(r.report.epochs.empty());
}

TEST(Train, SameSeedBitIdentical)
{
    const Dataset d = blobs(3, 20, 3);
    const ModelSpec spec = mlp_spec(d.sample_shape(), {8}, 3);
    Hyperparams h = quick(3);
    h.augment.flip = true;
    const auto a = train(spec, full_bn_mask(spec), d, h);
    const auto b = train(spec, full_bn_mask(spec), d, h);
    EXPECT_EQ(encode_checkpoint(a.model), encode_checkpoint(b.model));
    h.seed = 4;
    const auto c = train(spec, full_bn_mask(spec), d, h);
    EXPECT_NE(encode_checkpoint(a.model), encode_checkpoint(c.model));
}

TEST(Train, NonFiniteLossIsReportedAsDivergence)
{
    Dataset d = blobs(2, 16, 4);
    for (double& v : d.images.data()) v *= 1e6;
    const ModelSpec spec = mlp_spec(d.sample_shape(), {16, 16, 16}, 2);
    Hyperparams h = quick(5);
    h.optimizer = OptimizerKind::Sgd;
    h.learning_rate = 1e3;
    const auto r = train(spec, no_bn_mask(spec), d, h);
    EXPECT_TRUE(r.report.diverged);
    EXPECT_FALSE(r.report.converged);
    EXPECT_FALSE(r.report.diagnostic.empty());
}

TEST(Train, ReferenceAccuracyRelaxesThreshold)
{
    const Dataset d = blobs(2, 16, 5);
    const ModelSpec spec = mlp_spec(d.sample_shape(), {8}, 2);
    Hyperparams h = quick(10);
    h.convergence_threshold = 1.01;  // unreachable on its own
    const auto alone = train(spec, no_bn_mask(spec), d, h);
    ASSERT_FALSE(alone.report.diverged);
    EXPECT_FALSE(alone.report.converged);
    const auto with_ref = train(spec, no_bn_mask(spec), d, h, nullptr, alone.report.final_train_accuracy);
    EXPECT_TRUE(with_ref.report.converged);
}

TEST(Train, RejectsBadInputs)
{
    const Dataset d = blobs(2, 8, 6);
    const ModelSpec spec = mlp_spec(d.sample_shape(), {8}, 2);
    Hyperparams h = quick(1);
    h.batch_size = 100;
    EXPECT_THROW(train(spec, no_bn_mask(spec), d, h), DomainError);
    h.batch_size = 0;
    EXPECT_THROW(train(spec, no_bn_mask(spec), d, h), DomainError);
    const ModelSpec wrong = mlp_spec(d.sample_shape(), {8}, 3);
    EXPECT_THROW(train(wrong, no_bn_mask(wrong), d, quick(1)), DomainError);
}

TEST(TrainingCurve, WritesDigestAndRows)
{
    const Dataset d = blobs(2, 16, 7);
    const ModelSpec spec = mlp_spec(d.sample_shape(), {8}, 2);
    const auto r = train(spec, no_bn_mask(spec), d, quick(2), &d);
    const auto path = std::filesystem::temp_directory_path() / "bnnoise_curve.csv";
    write_training_curve(r.report, path, "feed");
    const auto bytes = read_file(path);
    const std::string text(bytes.begin(), bytes.end());
    EXPECT_EQ(text.rfind("# config_digest=feed\nepoch,train_loss,train_acc,test_acc\n1,", 0), 0u);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 4);
}

TEST(Search, ConvergingTemplateNeedsNoBatchNorm)
{
    const Dataset d = blobs(2, 32, 8);
    const ModelSpec spec = mlp_spec(d.sample_shape(), {8}, 2);
    const auto r = search_min_batchnorm(spec, d, quick(1), 30);
    EXPECT_EQ(r.mask, no_bn_mask(spec));
    EXPECT_EQ(r.bn_count, 0u);
    ASSERT_EQ(r.candidates.size(), 1u);
    EXPECT_TRUE(r.candidates[0].report.converged);
}

TEST(Search, ZeroBudgetRejected)
{
    const Dataset d = blobs(2, 8, 9);
    const ModelSpec spec = mlp_spec(d.sample_shape(), {8}, 2);
    EXPECT_THROW(search_min_batchnorm(spec, d, quick(1), 0), DomainError);
}
