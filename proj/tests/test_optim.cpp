#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "shampoo/error.hpp"
#include "shampoo/optim.hpp"
#include "shampoo/oracles.hpp"
#include "test_support.hpp"

using namespace shampoo;
using shampoo::testing::random_tensor;
using shampoo::testing::to_eigen;

namespace {

ShampooConfig plain_sgd(double lr) {
    ShampooConfig cfg;
    cfg.lr = LrSchedule::constant(lr);
    cfg.momentum = 0.0;
    cfg.use_nesterov = false;
    cfg.weight_decay = 0.0;
    cfg.grafting = GraftingKind::SGD;
    cfg.start_preconditioning_step = kNeverPrecondition;
    cfg.use_merge_dims = false;  // keep matrices as matrices
    return cfg;
}

Eigen::MatrixXd eigen_root_inverse(const Eigen::MatrixXd& a, double p, double eps) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a);
    Eigen::VectorXd lam = es.eigenvalues();
    const double shift = std::min(lam.minCoeff(), 0.0);
    for (Eigen::Index i = 0; i < lam.size(); ++i) lam(i) = std::pow(lam(i) - shift + eps, -1.0 / p);
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd as_eigen(const Tensor& t) {
    Eigen::MatrixXd m(t.shape()[0], t.shape()[1]);
    for (std::size_t i = 0; i < t.shape()[0]; ++i)
        for (std::size_t j = 0; j < t.shape()[1]; ++j) m(i, j) = t[i * t.shape()[1] + j];
    return m;
}

}  // namespace

TEST(LrSchedule, WarmupEndpoint) {
    const LrSchedule s = LrSchedule::warmup_cosine(0.1, 5, 90);
    EXPECT_DOUBLE_EQ(lr_at(s, 5), 0.1);
}

TEST(LrSchedule, CosineEndpoint) {
    const LrSchedule s = LrSchedule::warmup_cosine(0.1, 5, 90);
    EXPECT_NEAR(lr_at(s, 89), 0.1 * 0.5 * (1.0 + std::cos(M_PI * 84.0 / 85.0)), 1e-17);
    EXPECT_LT(lr_at(s, 89), 1e-4);
}

TEST(LrSchedule, HandTable) {
    const LrSchedule s = LrSchedule::warmup_cosine(0.1, 5, 90);
    const std::pair<std::int64_t, double> table[] = {
        {0, 0.02}, {1, 0.04}, {4, 0.1}, {5, 0.1}, {47, 0.050923945247956494}, {89, 3.41469928488547e-05},
    };
    for (auto [t, lr] : table) EXPECT_NEAR(lr_at(s, t), lr, 1e-15) << "t=" << t;
}

TEST(LrSchedule, OutOfRange) {
    const LrSchedule s = LrSchedule::warmup_cosine(0.1, 5, 90);
    EXPECT_THROW(lr_at(s, 90), Error);
    EXPECT_THROW(lr_at(s, -1), Error);
    EXPECT_DOUBLE_EQ(lr_at(LrSchedule::constant(0.3), 1'000'000), 0.3);
}

TEST(ShampooConfig, DefaultsMatchGenericSettings) {
    const ShampooConfig cfg;
    EXPECT_EQ(cfg.lr.initial_lr, 0.1);
    EXPECT_EQ(cfg.beta1, 0.0);
    EXPECT_EQ(cfg.beta2, 0.999);
    EXPECT_EQ(cfg.momentum, 0.9);
    EXPECT_TRUE(cfg.use_nesterov);
    EXPECT_TRUE(cfg.use_bias_correction);
    EXPECT_EQ(cfg.weight_decay, 1e-4);
    EXPECT_TRUE(cfg.use_decoupled_weight_decay);
    EXPECT_EQ(cfg.max_preconditioner_dim, 2048u);
    EXPECT_EQ(cfg.precondition_frequency, 50);
    EXPECT_EQ(cfg.start_preconditioning_step, 0);
    EXPECT_EQ(cfg.exponent_override, 0);
    EXPECT_EQ(cfg.exponent_multiplier, 1.0);
    EXPECT_EQ(cfg.grafting, GraftingKind::SGD);
    EXPECT_EQ(cfg.grafting_epsilon, 1e-8);
    EXPECT_EQ(cfg.grafting_beta2, 0.999);
    EXPECT_EQ(cfg.epsilon, 1e-12);
    EXPECT_EQ(cfg.large_dim_method, LargeDimMethod::Blocking);
    EXPECT_TRUE(cfg.use_merge_dims);
    EXPECT_EQ(cfg.solver, RootSolver::Eigh);
    EXPECT_NO_THROW(cfg.validate());
}

TEST(ShampooConfig, RejectsInvalid) {
    auto expect_invalid = [](auto mutate) {
        ShampooConfig cfg;
        mutate(cfg);
        try {
            cfg.validate();
            FAIL();
        } catch (const Error& e) {
            EXPECT_EQ(e.code(), ErrorCode::ConfigInvalid);
        }
    };
    expect_invalid([](ShampooConfig& c) { c.beta1 = 1.0; });
    expect_invalid([](ShampooConfig& c) { c.beta2 = 0.0; });
    expect_invalid([](ShampooConfig& c) { c.momentum = -0.1; });
    expect_invalid([](ShampooConfig& c) { c.weight_decay = -1.0; });
    expect_invalid([](ShampooConfig& c) { c.exponent_multiplier = 0.0; });
    expect_invalid([](ShampooConfig& c) { c.precondition_frequency = 0; });
    expect_invalid([](ShampooConfig& c) { c.lr = LrSchedule::warmup_cosine(0.1, 10, 10); });
    expect_invalid([](ShampooConfig& c) {
        c.solver = RootSolver::CoupledNewton;
        c.exponent_multiplier = 1.82;
    });
}

TEST(Step, FeatureOffIsSgdBitwise) {
    std::mt19937_64 rng(1);
    const std::vector<Shape> shapes{{5, 3}, {4}, {2, 2, 3}};
    ShampooConfig cfg = plain_sgd(0.05);
    cfg.max_preconditioner_dim = 2;
    ShampooOptimizer opt(shapes, cfg);
    std::vector<Tensor> w, ref;
    for (const Shape& s : shapes) w.push_back(random_tensor(s, rng));
    ref = w;
    for (int t = 0; t < 5; ++t) {
        std::vector<Tensor> g;
        for (const Shape& s : shapes) g.push_back(random_tensor(s, rng));
        opt.step(w, g);
        for (std::size_t i = 0; i < ref.size(); ++i)
            for (std::size_t k = 0; k < ref[i].numel(); ++k) ref[i][k] = ref[i][k] - 0.05 * g[i][k];
    }
    EXPECT_EQ(w, ref);
}

TEST(Step, AdaGradGraftingStepLengthWithShampooDirection) {
    std::mt19937_64 rng(2);
    ShampooConfig cfg = plain_sgd(0.1);
    cfg.start_preconditioning_step = 0;
    cfg.precondition_frequency = 1;
    cfg.grafting = GraftingKind::AdaGrad;
    cfg.grafting_epsilon = 0.0;
    cfg.beta2 = 1.0;
    cfg.epsilon = 1e-10;
    ShampooOptimizer opt({{2, 2}}, cfg);
    const Tensor w0 = random_tensor({2, 2}, rng);
    const Tensor g = random_tensor({2, 2}, rng);
    std::vector<Tensor> w{w0};
    opt.step(w, {g});

    const Eigen::MatrixXd ge = as_eigen(g);
    const Eigen::MatrixXd dir =
        eigen_root_inverse(ge * ge.transpose(), 4, 1e-10) * ge * eigen_root_inverse(ge.transpose() * ge, 4, 1e-10);
    const Eigen::MatrixXd delta = as_eigen(w[0]) - as_eigen(w0);
    // AdaGrad's first step is α·sign(G), of norm α·2.
    EXPECT_NEAR(delta.norm(), 0.1 * 2.0, 1e-12);
    EXPECT_NEAR((delta.array() * dir.array()).sum() / (delta.norm() * dir.norm()), -1.0, 1e-10);
}

TEST(Step, MatchesExplicitSubtractionForm) {
    // Overlap configuration: AdaGrad grafting, no momentum, no decay, sum factors.
    std::mt19937_64 rng(3);
    const double alpha = 0.03, eps = 1e-6, eps_graft = 1e-8;
    ShampooConfig cfg = plain_sgd(alpha);
    cfg.start_preconditioning_step = 0;
    cfg.precondition_frequency = 1;
    cfg.grafting = GraftingKind::AdaGrad;
    cfg.grafting_epsilon = eps_graft;
    cfg.beta2 = 1.0;
    cfg.epsilon = eps;
    ShampooOptimizer opt({{3, 4}}, cfg);
    std::vector<Tensor> w{random_tensor({3, 4}, rng)};
    Eigen::MatrixXd we = as_eigen(w[0]);
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(3, 3), r = Eigen::MatrixXd::Zero(4, 4), acc = Eigen::MatrixXd::Zero(3, 4);
    for (int t = 0; t < 15; ++t) {
        const Tensor g = random_tensor({3, 4}, rng);
        opt.step(w, {g});
        const Eigen::MatrixXd ge = as_eigen(g);
        l += ge * ge.transpose();
        r += ge.transpose() * ge;
        acc += ge.cwiseProduct(ge);
        const Eigen::MatrixXd graft = ge.array() / (acc.array().sqrt() + eps_graft);
        const Eigen::MatrixXd sh = eigen_root_inverse(l, 4, eps) * ge * eigen_root_inverse(r, 4, eps);
        we -= alpha * graft.norm() * sh / sh.norm();
        EXPECT_LE((as_eigen(w[0]) - we).cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(Step, MergedVectorMatchesFullMatrixAdaGrad) {
    const CheckResult r = full_matrix_check(10, 6, 1e-3, 7);
    EXPECT_LE(r.deviation, 1e-10);
}

TEST(Step, WrongExponentIsCaughtByFullMatrixCheck) {
    EXPECT_GT(full_matrix_check(10, 6, 1e-3, 7, 1).deviation, 1e-3);
}

TEST(Step, DescentOnQuadratic) {
    std::mt19937_64 rng(4);
    const std::size_t m = 4, n = 3;
    const Eigen::MatrixXd b = to_eigen(shampoo::testing::random_matrix(m, m, rng));
    const Eigen::MatrixXd a = b.transpose() * b + 0.1 * Eigen::MatrixXd::Identity(m, m);
    const Eigen::MatrixXd target = to_eigen(shampoo::testing::random_matrix(m, n, rng));
    auto loss = [&](const Eigen::MatrixXd& w) { return 0.5 * ((w - target).transpose() * a * (w - target)).trace(); };

    ShampooConfig cfg = plain_sgd(0.01);
    cfg.start_preconditioning_step = 0;
    cfg.precondition_frequency = 1;
    cfg.grafting = GraftingKind::AdaGrad;
    ShampooOptimizer opt({{m, n}}, cfg);
    std::vector<Tensor> w{Tensor({m, n})};
    double prev = loss(as_eigen(w[0]));
    for (int t = 0; t < 100; ++t) {
        const Eigen::MatrixXd ge = a * (as_eigen(w[0]) - target);
        Tensor g({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] = ge(i, j);
        opt.step(w, {g});
        const double now = loss(as_eigen(w[0]));
        EXPECT_LE(now, prev + 1e-15) << "t=" << t;
        prev = now;
    }
}

TEST(Step, DecoupledEqualsL2UnderSgd) {
    std::mt19937_64 rng(5);
    ShampooConfig decoupled = plain_sgd(0.1);
    decoupled.weight_decay = 0.01;
    ShampooConfig l2 = decoupled;
    l2.use_decoupled_weight_decay = false;
    ShampooOptimizer a({{3, 3}}, decoupled), b({{3, 3}}, l2);
    std::vector<Tensor> wa{random_tensor({3, 3}, rng)};
    std::vector<Tensor> wb = wa;
    for (int t = 0; t < 10; ++t) {
        const Tensor g = random_tensor({3, 3}, rng);
        a.step(wa, {g});
        b.step(wb, {g});
    }
    EXPECT_EQ(wa, wb);
}

TEST(Step, DecoupledDiffersFromL2UnderAdaGrad) {
    std::mt19937_64 rng(6);
    ShampooConfig decoupled = plain_sgd(0.1);
    decoupled.weight_decay = 0.01;
    decoupled.grafting = GraftingKind::AdaGrad;
    ShampooConfig l2 = decoupled;
    l2.use_decoupled_weight_decay = false;
    ShampooOptimizer a({{3, 3}}, decoupled), b({{3, 3}}, l2);
    std::vector<Tensor> wa{random_tensor({3, 3}, rng)};
    std::vector<Tensor> wb = wa;
    for (int t = 0; t < 10; ++t) {
        const Tensor g = random_tensor({3, 3}, rng);
        a.step(wa, {g});
        b.step(wb, {g});
    }
    EXPECT_GT(max_abs_diff(wa[0].data(), wb[0].data()), 1e-6);
}

TEST(Step, BiasCorrectedFilterStartsAtGradient) {
    std::mt19937_64 rng(7);
    ShampooConfig cfg = plain_sgd(1.0);
    cfg.beta1 = 0.9;
    ShampooOptimizer opt({{4}}, cfg);
    std::vector<Tensor> w{Tensor({4})};
    const Tensor g = random_tensor({4}, rng);
    opt.step(w, {g});
    for (std::size_t i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(-w[0][i], g[i]);
}

TEST(Step, WarmupUsesGraftDirectionWithSharedMomentum) {
    std::mt19937_64 rng(8);
    ShampooConfig cfg = plain_sgd(0.1);
    cfg.momentum = 0.5;
    cfg.use_nesterov = false;
    cfg.start_preconditioning_step = 3;
    cfg.precondition_frequency = 10;
    ShampooOptimizer opt({{2, 3}}, cfg);
    std::vector<Tensor> w{Tensor({2, 3})};
    Tensor ref({2, 3}), m({2, 3});
    for (int t = 0; t < 3; ++t) {
        const Tensor g = random_tensor({2, 3}, rng);
        opt.step(w, {g});
        for (std::size_t i = 0; i < 6; ++i) {
            m[i] = 0.5 * m[i] + g[i];
            ref[i] -= 0.1 * m[i];
        }
    }
    EXPECT_EQ(w[0], ref);
    const BlockSlot& slot = opt.params()[0].blocks[0];
    EXPECT_FALSE(slot.shampoo.preconditioned());
    EXPECT_EQ(slot.momentum, m);

    opt.step(w, {random_tensor({2, 3}, rng)});
    EXPECT_TRUE(opt.params()[0].blocks[0].shampoo.preconditioned());
    EXPECT_EQ(opt.params()[0].blocks[0].shampoo.last_inverse_step, 3);
}

TEST(Step, NonFiniteGradientLeavesStateUntouched) {
    std::mt19937_64 rng(9);
    ShampooOptimizer opt({{2, 2}, {3}}, ShampooConfig{});
    std::vector<Tensor> w{random_tensor({2, 2}, rng), random_tensor({3}, rng)};
    opt.step(w, {random_tensor({2, 2}, rng), random_tensor({3}, rng)});
    const std::vector<Tensor> w_before = w;
    const auto factors_before = opt.params()[0].blocks[0].shampoo.factors;
    Tensor bad = random_tensor({3}, rng);
    bad[1] = std::nan("");
    try {
        opt.step(w, {random_tensor({2, 2}, rng), bad});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonFiniteGradient);
    }
    EXPECT_EQ(w, w_before);
    EXPECT_EQ(opt.step_count(), 1);
    EXPECT_EQ(opt.params()[0].blocks[0].shampoo.factors, factors_before);
}

TEST(Step, ShapeMismatch) {
    ShampooOptimizer opt({{2, 2}}, ShampooConfig{});
    std::vector<Tensor> w{Tensor({2, 2})};
    try {
        opt.step(w, {Tensor({4})});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
}

TEST(Step, FallbackDirectionsAreGrafted) {
    std::mt19937_64 rng(10);
    for (LargeDimMethod method : {LargeDimMethod::AdaGradFallback, LargeDimMethod::DiagonalShampoo}) {
        ShampooConfig cfg = plain_sgd(0.1);
        cfg.start_preconditioning_step = 0;
        cfg.max_preconditioner_dim = 4;
        cfg.large_dim_method = method;
        cfg.epsilon = 1e-8;
        ShampooOptimizer opt({{6, 3}}, cfg);
        EXPECT_NE(opt.params()[0].plan.kind, PreconditionerKind::Shampoo);
        std::vector<Tensor> w{Tensor({6, 3})};
        for (int t = 0; t < 3; ++t) {
            const Tensor before = w[0];
            const Tensor g = random_tensor({6, 3}, rng);
            opt.step(w, {g});
            Tensor delta = w[0];
            for (std::size_t i = 0; i < delta.numel(); ++i) delta[i] -= before[i];
            EXPECT_NEAR(frobenius_norm(delta.data()), 0.1 * frobenius_norm(g.data()), 1e-12);
        }
    }
}

TEST(Step, BlockedParameterPreconditionsEachBlock) {
    std::mt19937_64 rng(11);
    ShampooConfig cfg = plain_sgd(0.1);
    cfg.start_preconditioning_step = 0;
    cfg.precondition_frequency = 1;
    cfg.max_preconditioner_dim = 2;
    ShampooOptimizer opt({{5, 3}}, cfg);
    ASSERT_EQ(opt.params()[0].blocks.size(), 6u);
    std::vector<Tensor> w{Tensor({5, 3})};
    const Tensor g = random_tensor({5, 3}, rng);
    opt.step(w, {g});
    // SGD grafting per block: each block moves by α times its own gradient norm.
    for (const BlockSlot& slot : opt.params()[0].blocks) {
        const Tensor moved = extract_block(w[0], slot.block);
        EXPECT_NEAR(frobenius_norm(moved.data()), 0.1 * frobenius_norm(extract_block(g, slot.block).data()), 1e-12);
        EXPECT_TRUE(slot.shampoo.preconditioned());
    }
}

TEST(Oracle, HeavyBallWithoutMomentumIsGradientDescent) {
    std::mt19937_64 rng(12);
    OracleHyper hp;
    hp.alpha = 0.1;
    hp.delta = 0.0;
    const Tensor w0 = random_tensor({5}, rng);
    OracleState s = make_oracle(OracleKind::HeavyBall, w0, hp);
    Tensor ref = w0;
    for (int t = 0; t < 5; ++t) {
        const Tensor g = random_tensor({5}, rng);
        oracle_step(s, g, hp);
        for (std::size_t i = 0; i < 5; ++i) ref[i] -= 0.1 * g[i];
    }
    EXPECT_LE(max_abs_diff(s.w.data(), ref.data()), 1e-15);
}

TEST(Oracle, AveragingWithZeroWeightTracksZ) {
    std::mt19937_64 rng(13);
    OracleHyper hp;
    hp.eta = 0.2;
    hp.c = 0.0;
    OracleState s = make_oracle(OracleKind::PrimalAveraging, random_tensor({4}, rng), hp);
    for (int t = 0; t < 5; ++t) {
        oracle_step(s, random_tensor({4}, rng), hp);
        EXPECT_EQ(s.w, s.z);
    }
}

TEST(Oracle, RowWiseHandExample) {
    OracleHyper hp;
    hp.alpha = 1.0;
    hp.epsilon = 0.0;
    OracleState s = make_oracle(OracleKind::RowWiseAdaGrad, Tensor({2, 2}), hp);
    oracle_step(s, Tensor({2, 2}, {1, 1, 2, 2}), hp);
    EXPECT_EQ(s.v, (std::vector<double>{1, 4}));
    EXPECT_EQ(s.w, Tensor({2, 2}, {-1, -1, -1, -1}));
}

TEST(Oracle, DiagonalAdaGradFirstStepIsSign) {
    OracleHyper hp;
    hp.alpha = 0.5;
    OracleState s = make_oracle(OracleKind::DiagonalAdaGrad, Tensor({3}), hp);
    oracle_step(s, Tensor({3}, {-2, 3, 0.5}), hp);
    EXPECT_EQ(s.w, Tensor({3}, {0.5, -0.5, -0.5}));
}

TEST(Oracle, UnknownKind) {
    try {
        oracle_kind_from_string("lion");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::UnknownKind);
    }
    EXPECT_EQ(oracle_kind_from_string("adafactor"), OracleKind::AdaFactor);
}

TEST(Equivalence, MomentumWithoutMomentumIsExact) {
    EXPECT_EQ(momentum_equivalence_check(50, 0.01, 0.0, false, 1).deviation, 0.0);
}

TEST(Equivalence, MomentumAndNesterovAcrossSeeds) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        EXPECT_LE(momentum_equivalence_check(200, 0.01, 0.9, false, seed).deviation, 1e-10);
        EXPECT_LE(momentum_equivalence_check(200, 0.01, 0.9, true, seed).deviation, 1e-10);
    }
}

TEST(Equivalence, RowWiseCorrectedMapping) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        EXPECT_LE(rowwise_equivalence_check(50, 4, 3, 0.1, 1e-3, RowWiseMapping::Corrected, seed).deviation, 1e-12);
    }
}

TEST(Equivalence, RowWiseStatedMappingOnlyHoldsForSingleColumn) {
    EXPECT_LE(rowwise_equivalence_check(50, 1, 1, 0.1, 1e-3, RowWiseMapping::Stated, 3).deviation, 1e-15);
    EXPECT_LE(rowwise_equivalence_check(50, 4, 1, 0.1, 1e-3, RowWiseMapping::Stated, 3).deviation, 1e-12);
    EXPECT_GT(rowwise_equivalence_check(50, 4, 3, 0.1, 1e-3, RowWiseMapping::Stated, 3).deviation, 1e-3);
}

TEST(Equivalence, AdaFactorRelation) {
    EXPECT_LE(adafactor_relation_check(50, 1, 1, 0.999, 1).deviation, 1e-13);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        EXPECT_LE(adafactor_relation_check(50, 4, 3, 0.999, seed).deviation, 1e-10);
    }
}

TEST(Equivalence, SolverAgreement) { EXPECT_LE(solver_agreement_check(50, 5).deviation, 1e-6); }
