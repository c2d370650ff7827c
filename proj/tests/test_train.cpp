#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "shampoo/error.hpp"
#include "shampoo/train.hpp"
#include "test_support.hpp"

using namespace shampoo;

namespace {

Matrix random_inputs(std::size_t rows, std::size_t cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Matrix m(rows, cols);
    for (double& v : m.data()) v = n(rng);
    return m;
}

// Per-sample evaluation with explicit loops and no shared helpers.
std::vector<double> naive_eval(const Mlp& m, const std::vector<double>& x) {
    std::vector<double> a = x;
    for (std::size_t l = 0; l < m.weights.size(); ++l) {
        const std::size_t out = m.widths[l + 1], in = m.widths[l];
        std::vector<double> z(out, 0.0);
        for (std::size_t o = 0; o < out; ++o)
            for (std::size_t i = 0; i < in; ++i) z[o] += m.weights[l][o * in + i] * a[i];
        if (l + 1 < m.weights.size() && m.activation == Activation::ReLU)
            for (double& v : z) v = std::max(v, 0.0);
        a = z;
    }
    return a;
}

double batch_loss(const Mlp& m, const Matrix& x, const std::vector<std::size_t>& y, LossKind kind) {
    return compute_loss(kind, forward(m, x), y).value;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> y(n);
    for (auto& v : y) v = rng() % k;
    return y;
}

ShampooConfig plain_sgd(double lr) {
    ShampooConfig cfg;
    cfg.lr = LrSchedule::constant(lr);
    cfg.momentum = 0.0;
    cfg.use_nesterov = false;
    cfg.weight_decay = 0.0;
    cfg.start_preconditioning_step = kNeverPrecondition;
    return cfg;
}

}  // namespace

TEST(Forward, ScalarIdentityChain) {
    Mlp m = make_mlp({1, 1}, Activation::Identity, 0);
    m.weights[0][0] = 2.0;
    EXPECT_EQ(forward(m, Matrix(1, 1, 3.0))(0, 0), 6.0);
}

TEST(Forward, DeadReluUnitPropagatesZero) {
    Mlp m = make_mlp({1, 1, 1}, Activation::ReLU, 0);
    m.weights[0][0] = -1.0;
    m.weights[1][0] = 5.0;
    ForwardCache cache;
    EXPECT_EQ(forward(m, Matrix(1, 1, 1.0), &cache)(0, 0), 0.0);
    EXPECT_EQ(cache.pre[0](0, 0), -1.0);
}

TEST(Forward, MatchesNaiveEvaluator) {
    for (Activation act : {Activation::ReLU, Activation::Identity}) {
        const Mlp m = make_mlp({7, 12, 9, 4}, act, 11);
        const Matrix x = random_inputs(13, 7, 12);
        const Matrix logits = forward(m, x);
        for (std::size_t b = 0; b < 13; ++b) {
            const std::vector<double> row(x.data().begin() + b * 7, x.data().begin() + (b + 1) * 7);
            const std::vector<double> ref = naive_eval(m, row);
            for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(logits(b, c), ref[c], 1e-12);
        }
    }
}

TEST(Forward, WidthMismatch) {
    const Mlp m = make_mlp({3, 2}, Activation::ReLU, 0);
    try {
        forward(m, Matrix(2, 4));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
}

TEST(Init, GlorotBoundsAndDeterminism) {
    const Mlp a = make_mlp({32, 64, 10}, Activation::ReLU, 5), b = make_mlp({32, 64, 10}, Activation::ReLU, 5);
    EXPECT_EQ(a.weights, b.weights);
    const double s0 = std::sqrt(6.0 / 96.0), s1 = std::sqrt(6.0 / 74.0);
    EXPECT_LE(max_abs(a.weights[0].data()), s0);
    EXPECT_LE(max_abs(a.weights[1].data()), s1);
    EXPECT_EQ(a.weights[0].shape(), (Shape{64, 32}));
}

TEST(Backward, SingleSampleIsOuterProduct) {
    const Mlp m = make_mlp({3, 4, 2}, Activation::Identity, 3);
    const Matrix x = random_inputs(1, 3, 4);
    ForwardCache cache;
    forward(m, x, &cache);
    Matrix delta(1, 2, std::vector<double>{0.7, -1.3});
    const std::vector<Tensor> g = backward(m, cache, delta);
    for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(g[1][o * 4 + i], delta(0, o) * cache.inputs[1](0, i));
}

TEST(Backward, PerSampleGradientsAreRankOne) {
    const Mlp m = make_mlp({6, 8, 5, 3}, Activation::ReLU, 21);
    for (int s = 0; s < 10; ++s) {
        const Matrix x = random_inputs(1, 6, 100 + s);
        ForwardCache cache;
        const LossValue lv = compute_loss(LossKind::SoftmaxCrossEntropy, forward(m, x, &cache), {std::size_t(s % 3)});
        for (const Tensor& g : backward(m, cache, lv.grad)) {
            const Eigen::VectorXd sv = shampoo::testing::to_eigen(to_matrix(g)).jacobiSvd().singularValues();
            if (sv(0) == 0.0) continue;
            EXPECT_LE(sv(1), 1e-10 * sv(0));
        }
    }
}

TEST(Backward, IdenticalSamplesAverageToOne) {
    const Mlp m = make_mlp({4, 5, 3}, Activation::ReLU, 8);
    const Matrix one = random_inputs(1, 4, 9);
    Matrix many(6, 4);
    for (std::size_t b = 0; b < 6; ++b)
        for (std::size_t j = 0; j < 4; ++j) many(b, j) = one(0, j);
    ForwardCache c1, c6;
    const LossValue l1 = compute_loss(LossKind::SoftmaxCrossEntropy, forward(m, one, &c1), {1});
    const LossValue l6 = compute_loss(LossKind::SoftmaxCrossEntropy, forward(m, many, &c6), std::vector<std::size_t>(6, 1));
    const auto g1 = backward(m, c1, l1.grad), g6 = backward(m, c6, l6.grad);
    for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_LE(max_abs_diff(g1[i].data(), g6[i].data()), 1e-15);
}

TEST(Backward, FiniteDifferences) {
    for (LossKind kind : {LossKind::SoftmaxCrossEntropy, LossKind::Mse}) {
        Mlp m = make_mlp({5, 16, 12, 4}, Activation::ReLU, 33);
        const Matrix x = random_inputs(8, 5, 34);
        const std::vector<std::size_t> y = random_labels(8, 4, 35);
        ForwardCache cache;
        const LossValue lv = compute_loss(kind, forward(m, x, &cache), y);
        const std::vector<Tensor> g = backward(m, cache, lv.grad);
        const double h = 1e-5;
        for (std::size_t l = 0; l < m.layers(); ++l) {
            for (std::size_t e = 0; e < m.weights[l].numel(); ++e) {
                const double w0 = m.weights[l][e];
                m.weights[l][e] = w0 + h;
                const double up = batch_loss(m, x, y, kind);
                m.weights[l][e] = w0 - h;
                const double down = batch_loss(m, x, y, kind);
                m.weights[l][e] = w0;
                const double fd = (up - down) / (2 * h);
                EXPECT_LE(std::abs(fd - g[l][e]), 1e-6 * std::max(1.0, std::abs(fd))) << "layer " << l << " entry " << e;
            }
        }
    }
}

TEST(Loss, UniformLogitsGiveLogK) {
    const LossValue lv = compute_loss(LossKind::SoftmaxCrossEntropy, Matrix(3, 7, 0.25), {0, 3, 6});
    EXPECT_NEAR(lv.value, std::log(7.0), 1e-15);
}

TEST(Loss, MseAtTargetIsZero) {
    Matrix logits(2, 3);
    logits(0, 2) = 1.0;
    logits(1, 0) = 1.0;
    const LossValue lv = compute_loss(LossKind::Mse, logits, {2, 0});
    EXPECT_EQ(lv.value, 0.0);
    EXPECT_EQ(max_abs(lv.grad.data()), 0.0);
}

TEST(Loss, StableForHugeLogits) {
    Matrix logits(1, 2, std::vector<double>{1000.0, 0.0});
    const LossValue lv = compute_loss(LossKind::SoftmaxCrossEntropy, logits, {1});
    EXPECT_NEAR(lv.value, 1000.0, 1e-9);
    EXPECT_TRUE(all_finite(lv.grad.data()));
}

TEST(Loss, GradientMatchesFiniteDifferences) {
    for (LossKind kind : {LossKind::SoftmaxCrossEntropy, LossKind::Mse}) {
        Matrix z = random_inputs(5, 6, 40);
        const std::vector<std::size_t> y = random_labels(5, 6, 41);
        const LossValue lv = compute_loss(kind, z, y);
        const double h = 1e-6;
        for (std::size_t e = 0; e < z.data().size(); ++e) {
            const double z0 = z.data()[e];
            z.data()[e] = z0 + h;
            const double up = compute_loss(kind, z, y).value;
            z.data()[e] = z0 - h;
            const double down = compute_loss(kind, z, y).value;
            z.data()[e] = z0;
            EXPECT_NEAR((up - down) / (2 * h), lv.grad.data()[e], 1e-7);
        }
    }
}

TEST(Loss, LabelOutOfRange) {
    try {
        compute_loss(LossKind::SoftmaxCrossEntropy, Matrix(1, 3), {3});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::LabelOutOfRange);
    }
}

TEST(Data, SyntheticIsDeterministicAndSharesMeans) {
    SyntheticSpec spec{.seed = 4, .classes = 3, .dim = 5, .count = 30};
    const Dataset a = make_synthetic(spec, 1), b = make_synthetic(spec, 1), c = make_synthetic(spec, 2);
    EXPECT_EQ(a.features, b.features);
    EXPECT_NE(a.features, c.features);
    EXPECT_EQ(a.labels, c.labels);
    spec.noise = 0.0;
    const Dataset d = make_synthetic(spec, 1), e = make_synthetic(spec, 9);
    EXPECT_EQ(d.features, e.features);
    EXPECT_EQ(a.classes, 3u);
}

TEST(Data, BatchIsPureFunctionOfSeedAndStep) {
    const Dataset d = make_synthetic({.seed = 1, .classes = 4, .dim = 3, .count = 50}, 2);
    const Batch a = sample_batch(d, 16, 7, 3), b = sample_batch(d, 16, 7, 3), c = sample_batch(d, 16, 7, 4);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(a.labels, b.labels);
    EXPECT_NE(a.features, c.features);
}

TEST(Data, CsvRoundTrip) {
    const auto path = std::filesystem::temp_directory_path() / "shampoo_test_data.csv";
    {
        std::ofstream out(path);
        out << "x1, label ,x2\n1.5,0,2\n-3,2,4e-1\n\n0,1,0\n";
    }
    const Dataset d = load_csv(path, "label");
    EXPECT_EQ(d.size(), 3u);
    EXPECT_EQ(d.dim(), 2u);
    EXPECT_EQ(d.classes, 3u);
    EXPECT_EQ(d.labels, (std::vector<std::size_t>{0, 2, 1}));
    EXPECT_EQ(d.features(1, 1), 0.4);
    EXPECT_THROW(load_csv(path, "missing"), Error);
    {
        std::ofstream out(path);
        out << "a,y\n1,0.5\n";
    }
    try {
        load_csv(path, "y");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::LabelOutOfRange);
    }
    std::filesystem::remove(path);
    try {
        load_csv(path, "y");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::IoError);
    }
}

TEST(Data, Normalization) {
    Dataset d = make_synthetic({.seed = 3, .classes = 2, .dim = 4, .count = 200, .separation = 3.0}, 4);
    apply_normalization(d, fit_normalization(d));
    const Normalization after = fit_normalization(d);
    for (std::size_t j = 0; j < 4; ++j) {
        EXPECT_NEAR(after.mean[j], 0.0, 1e-12);
        EXPECT_NEAR(after.stddev[j], 1.0, 1e-12);
    }
}

TEST(Training, ZeroStepsLeaveModelUntouched) {
    const Dataset d = make_synthetic({.seed = 1, .classes = 3, .dim = 4, .count = 30}, 2);
    Mlp m = make_mlp({4, 5, 3}, Activation::ReLU, 1);
    const Mlp before = m;
    EXPECT_TRUE(run_training(d, d, m, ShampooConfig{}, {}, 0).empty());
    EXPECT_EQ(m.weights, before.weights);
}

TEST(Training, SgdReductionMatchesHandRolledLoop) {
    const SyntheticSpec spec{.seed = 10, .classes = 4, .dim = 6, .count = 400};
    const Dataset train = make_synthetic(spec, 11), val = make_synthetic(spec, 12);
    Mlp m = make_mlp({6, 8, 4}, Activation::ReLU, 13);
    Mlp hand = m;
    TrainOptions opts;
    opts.batch_size = 16;
    opts.batch_seed = 14;
    const double lr = 0.05;
    const std::vector<MetricsRow> rows = run_training(train, val, m, plain_sgd(lr), opts, 300);
    ASSERT_EQ(rows.size(), 300u);
    for (std::int64_t t = 0; t < 300; ++t) {
        const Batch b = sample_batch(train, 16, 14, t);
        ForwardCache cache;
        const LossValue lv = compute_loss(LossKind::SoftmaxCrossEntropy, forward(hand, b.features, &cache), b.labels);
        ASSERT_EQ(rows[t].loss, lv.value) << "t=" << t;
        const std::vector<Tensor> g = backward(hand, cache, lv.grad);
        for (std::size_t l = 0; l < g.size(); ++l)
            for (std::size_t e = 0; e < g[l].numel(); ++e) hand.weights[l][e] += -lr * g[l][e];
    }
    EXPECT_EQ(m.weights, hand.weights);
    EXPECT_LT(rows.back().val_loss, rows.front().val_loss);
}

TEST(Training, WorldSizeInvariantMetrics) {
    const SyntheticSpec spec{.seed = 20, .classes = 5, .dim = 8, .count = 300};
    const Dataset train = make_synthetic(spec, 21), val = make_synthetic(spec, 22);
    ShampooConfig cfg;
    cfg.precondition_frequency = 5;
    cfg.use_merge_dims = false;
    TrainOptions opts;
    opts.batch_size = 32;
    Mlp m1 = make_mlp({8, 12, 6, 5}, Activation::ReLU, 23), m2 = m1;
    const auto r1 = run_training(train, val, m1, cfg, opts, 30);
    opts.world_size = opts.group_size = 2;
    const auto r2 = run_training(train, val, m2, cfg, opts, 30);
    for (std::size_t t = 0; t < r1.size(); ++t) EXPECT_TRUE(r1[t].same_values(r2[t], 1e-12)) << "t=" << t;
}

TEST(Training, EqualSeedsGiveEqualLogs) {
    const Dataset d = make_synthetic({.seed = 30, .classes = 3, .dim = 5, .count = 100}, 31);
    ShampooConfig cfg;
    cfg.precondition_frequency = 3;
    Mlp a = make_mlp({5, 7, 3}, Activation::ReLU, 32), b = a;
    const auto ra = run_training(d, d, a, cfg, {}, 15), rb = run_training(d, d, b, cfg, {}, 15);
    for (std::size_t t = 0; t < ra.size(); ++t) {
        EXPECT_TRUE(ra[t].same_values(rb[t]));
        EXPECT_EQ(ra[t].gathered_bytes, rb[t].gathered_bytes);
    }
}

TEST(Training, ResumeMatchesUninterruptedRun) {
    const Dataset d = make_synthetic({.seed = 40, .classes = 3, .dim = 5, .count = 100}, 41);
    ShampooConfig cfg;
    cfg.precondition_frequency = 4;
    cfg.beta1 = 0.9;
    cfg.grafting = GraftingKind::Adam;
    const Mlp m = make_mlp({5, 7, 3}, Activation::ReLU, 42);
    Trainer full(m, cfg, {}, d, d);
    const auto all = full.run(12);

    Trainer first(m, cfg, {}, d, d);
    first.run(7);
    Trainer second(m, cfg, {}, d, d);
    second.restore(first.model().weights, first.optimizer().export_state(), first.step_count());
    const auto rest = second.run(5);
    for (std::size_t i = 0; i < rest.size(); ++i) EXPECT_TRUE(rest[i].same_values(all[7 + i]));
    EXPECT_EQ(second.model().weights, full.model().weights);
}
