#include <gtest/gtest.h>

#include <Eigen/Dense>

#include <cmath>
#include <random>

#include "shampoo/error.hpp"
#include "shampoo/graft.hpp"
#include "shampoo/precond.hpp"
#include "test_support.hpp"

using namespace shampoo;
using shampoo::testing::random_tensor;
using shampoo::testing::to_eigen;

namespace {

double cosine(const Tensor& a, const Tensor& b) {
    double dot = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) dot += a[i] * b[i];
    return dot / (frobenius_norm(a.data()) * frobenius_norm(b.data()));
}

}  // namespace

TEST(GraftState, AdaGradAccumulates) {
    GraftState s = make_graft_state(GraftingKind::AdaGrad, {1, 1}, 0.999, 1e-8);
    update_graft_state(s, Tensor({1, 1}, {3}));
    EXPECT_EQ(s.accumulator, Tensor({1, 1}, {9}));
}

TEST(GraftState, RmsPropTwoSteps) {
    GraftState s = make_graft_state(GraftingKind::RMSProp, {1, 1}, 0.5, 1e-8);
    update_graft_state(s, Tensor({1, 1}, {2}));
    update_graft_state(s, Tensor({1, 1}, {2}));
    EXPECT_DOUBLE_EQ(s.accumulator[0], 3.0);
}

TEST(GraftState, NormalizedAdaGradUsesUnitGradient) {
    GraftState s = make_graft_state(GraftingKind::NormalizedAdaGrad, {1, 2}, 0.999, 1e-8);
    update_graft_state(s, Tensor({1, 2}, {3, 4}));
    EXPECT_NEAR(s.accumulator[0], 0.36, 1e-15);
    EXPECT_NEAR(s.accumulator[1], 0.64, 1e-15);
}

TEST(GraftState, NormalizedZeroGradientUnchanged) {
    GraftState s = make_graft_state(GraftingKind::NormalizedRMSProp, {2}, 0.9, 1e-8);
    update_graft_state(s, Tensor({2}));
    EXPECT_EQ(s.accumulator, Tensor({2}));
}

TEST(GraftState, SgdHasNoAccumulator) {
    GraftState s = make_graft_state(GraftingKind::SGD, {3, 3}, 0.999, 1e-8);
    EXPECT_TRUE(s.accumulator.values().empty());
    update_graft_state(s, Tensor({3, 3}, 1.0));
    EXPECT_EQ(s.step, 1);
}

TEST(GraftState, ShapeMismatch) {
    GraftState s = make_graft_state(GraftingKind::Adam, {2, 2}, 0.999, 1e-8);
    try {
        update_graft_state(s, Tensor({4}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ShapeMismatch);
    }
}

TEST(GraftDirection, SgdIsIdentity) {
    std::mt19937_64 rng(1);
    const Tensor g = random_tensor({3, 2}, rng);
    const GraftState s = make_graft_state(GraftingKind::SGD, g.shape(), 0.999, 1e-8);
    EXPECT_EQ(graft_direction(s, g, 0, true), g);
}

TEST(GraftDirection, AdaGradScalar) {
    GraftState s = make_graft_state(GraftingKind::AdaGrad, {1, 1}, 0.999, 0.0);
    s.accumulator = Tensor({1, 1}, {4});
    EXPECT_EQ(graft_direction(s, Tensor({1, 1}, {2}), 0, false), Tensor({1, 1}, {1}));
}

TEST(GraftDirection, AdamBiasCorrectionAtFirstStep) {
    std::mt19937_64 rng(2);
    const Tensor g = random_tensor({4, 3}, rng);
    GraftState s = make_graft_state(GraftingKind::Adam, g.shape(), 0.999, 1e-8);
    update_graft_state(s, g);
    const Tensor p = graft_direction(s, g, 0, true);
    for (std::size_t i = 0; i < g.numel(); ++i) EXPECT_NEAR(p[i], g[i] / (std::abs(g[i]) + 1e-8), 1e-12);
    // Without the correction the step is inflated by 1/sqrt(1 − β2).
    const Tensor raw = graft_direction(s, g, 0, false);
    EXPECT_NEAR(raw[0] / p[0], std::sqrt(1.0 / 0.001), 1e-3);
}

TEST(GraftDirection, RmsPropIgnoresBiasCorrection) {
    GraftState s = make_graft_state(GraftingKind::RMSProp, {1}, 0.75, 0.0);
    update_graft_state(s, Tensor({1}, {2}));
    EXPECT_DOUBLE_EQ(graft_direction(s, Tensor({1}, {2}), 0, true)[0], 2.0 / std::sqrt(1.0));
}

TEST(Rescale, EqualNormsNegate) {
    const Tensor a({2}, {3, 4});
    const Tensor b({2}, {0, 5});
    EXPECT_EQ(rescale_to_graft(a, b), Tensor({2}, {-3, -4}));
}

TEST(Rescale, OntoUnitDirection) {
    EXPECT_EQ(rescale_to_graft(Tensor({1, 2}, {2, 0}), Tensor({1, 2}, {0, 3})), Tensor({1, 2}, {-3, 0}));
}

TEST(Rescale, ZeroShampooFallsBackToGraft) {
    EXPECT_EQ(rescale_to_graft(Tensor({2}), Tensor({2}, {1, -2})), Tensor({2}, {-1, 2}));
}

TEST(Rescale, NormTransferAndAntiparallel) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> logscale(-6.0, 6.0);
    for (int trial = 0; trial < 500; ++trial) {
        const Shape shape{std::size_t(1 + trial % 5), std::size_t(1 + trial % 3)};
        const Tensor a = random_tensor(shape, rng, std::pow(10.0, logscale(rng)));
        const Tensor b = random_tensor(shape, rng, std::pow(10.0, logscale(rng)));
        const Tensor p = rescale_to_graft(a, b);
        const double nb = frobenius_norm(b.data());
        EXPECT_LE(std::abs(frobenius_norm(p.data()) - nb), 1e-12 * nb);
        EXPECT_NEAR(cosine(p, a), -1.0, 1e-12);
    }
}

TEST(Rescale, BlockRescalingView) {
    // Two-parameter toy net: grafting per layer equals one global step with the
    // block-diagonal norm-ratio matrix D applied to the Shampoo direction.
    std::mt19937_64 rng(7);
    const std::vector<Shape> shapes{{3, 2}, {2, 4}};
    RootConfig cfg;
    cfg.epsilon = 1e-3;
    const double alpha = 0.05;

    std::vector<Tensor> w, g, stepped;
    std::vector<ShampooBlockState> states;
    std::vector<GraftState> grafts;
    for (const Shape& s : shapes) {
        w.push_back(random_tensor(s, rng));
        g.push_back(random_tensor(s, rng));
        states.push_back(make_shampoo_state(s, 1.0, cfg.epsilon, false));
        grafts.push_back(make_graft_state(GraftingKind::AdaGrad, s, 1.0, 1e-8));
        update_factors(states.back(), g.back());
        update_graft_state(grafts.back(), g.back());
        refresh_inverses(states.back(), 0, {1, 0}, cfg);
        const Tensor p = rescale_to_graft(precondition(states.back(), g.back()),
                                          graft_direction(grafts.back(), g.back(), 0, false));
        Tensor next = w.back();
        for (std::size_t i = 0; i < next.numel(); ++i) next[i] += alpha * p[i];
        stepped.push_back(next);
    }

    const Eigen::Index n = 6 + 8;
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n, n);
    Eigen::MatrixXd a_inv = Eigen::MatrixXd::Zero(n, n);
    Eigen::VectorXd wv(n), gv(n);
    Eigen::Index off = 0;
    for (std::size_t k = 0; k < 2; ++k) {
        const Eigen::Index m = static_cast<Eigen::Index>(g[k].numel());
        const Eigen::MatrixXd kr = to_eigen(kron(states[k].inv_factors[0], states[k].inv_factors[1]));
        const Eigen::VectorXd gk = Eigen::Map<const Eigen::VectorXd>(g[k].data().data(), m);
        const Eigen::VectorXd pg = gk.array() / (gk.array().abs() + 1e-8);
        a_inv.block(off, off, m, m) = kr;
        d.block(off, off, m, m) = (pg.norm() / (kr * gk).norm()) * Eigen::MatrixXd::Identity(m, m);
        wv.segment(off, m) = Eigen::Map<const Eigen::VectorXd>(w[k].data().data(), m);
        gv.segment(off, m) = gk;
        off += m;
    }
    const Eigen::VectorXd expected = wv - alpha * d * a_inv * gv;
    off = 0;
    for (std::size_t k = 0; k < 2; ++k) {
        for (std::size_t i = 0; i < stepped[k].numel(); ++i) EXPECT_NEAR(stepped[k][i], expected(off + i), 1e-12);
        off += static_cast<Eigen::Index>(stepped[k].numel());
    }
}

TEST(GraftKindNames, RoundTrip) {
    for (GraftingKind k : {GraftingKind::None, GraftingKind::SGD, GraftingKind::Adam, GraftingKind::NormalizedAdam}) {
        EXPECT_EQ(grafting_kind_from_string(to_string(k)), k);
    }
    EXPECT_THROW(grafting_kind_from_string("lamb"), Error);
}
