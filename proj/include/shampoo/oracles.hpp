#pragma once

// Reference optimizers written straight from their textbook recurrences, and
// the equivalence checks that compare them against the Shampoo code paths.

#include <cstdint>
#include <string_view>

#include "shampoo/matfun.hpp"
#include "shampoo/tensor.hpp"

namespace shampoo {

enum class OracleKind {
    HeavyBall,
    PrimalAveraging,
    NesterovHeavyBall,
    NesterovAveraging,
    RowWiseAdaGrad,
    AdaFactor,
    FullMatrixAdaGrad,
    DiagonalAdaGrad,
};

std::string_view to_string(OracleKind kind);
OracleKind oracle_kind_from_string(std::string_view name);

struct OracleHyper {
    double alpha = 0.01;    // step size (heavy ball, adaptive methods)
    double delta = 0.0;     // heavy-ball coefficient
    double eta = 0.01;      // averaging step size
    double c = 0.0;         // averaging weight: w ← c·w + (1 − c)·z
    double mu = 0.0;        // Nesterov correction weight
    double epsilon = 0.0;
    double beta2 = 0.999;   // AdaFactor
};

struct OracleState {
    OracleKind kind = OracleKind::HeavyBall;
    Tensor w;
    Tensor w_prev;       // heavy ball
    Tensor z;            // averaging
    Tensor p_prev;       // Nesterov variants, p_{-1} = 0
    std::vector<double> v;   // row-wise AdaGrad, v_{-1} = ε·1
    std::vector<double> r;   // AdaFactor row sums
    std::vector<double> c;   // AdaFactor column sums
    std::vector<double> acc; // diagonal AdaGrad
    Matrix h;                // full-matrix AdaGrad, sum of g gᵀ over vec(G)
    std::int64_t step = 0;
};

OracleState make_oracle(OracleKind kind, const Tensor& w0, const OracleHyper& hp);

/// Advances the oracle by one step given p_t (a gradient for the adaptive
/// kinds, a search direction for the averaging kinds) evaluated at state.w.
void oracle_step(OracleState& state, const Tensor& p, const OracleHyper& hp);

/// The step the AdaFactor oracle would take per unit learning rate:
/// G / (sqrt(r cᵀ / 1ᵀr) + ε) using the state's current r and c.
Tensor adafactor_direction(const OracleState& state, const Tensor& g, double epsilon);

// Equivalence checks. Each returns the largest deviation observed.

struct CheckResult {
    double deviation = 0.0;
    double tolerance = 0.0;
    bool passed() const { return deviation <= tolerance; }
};

/// Momentum (or Nesterov) through ShampooOptimizer with every preconditioning
/// feature off, against heavy ball and primal averaging with c = μ,
/// η = α/(1 − c), δ = μ on a seeded convex quadratic.
CheckResult momentum_equivalence_check(int steps, double alpha, double mu, bool nesterov, std::uint64_t seed,
                                       std::size_t dim = 8);

/// How ε and α are rescaled when row-wise AdaGrad is expressed as left-only
/// diagonal Shampoo at exponent −1/2.
enum class RowWiseMapping {
    Stated,     // ε̄ = ε/n, ᾱ = α/n
    Corrected,  // ε̄ = n·ε, ᾱ = √n·α
};

CheckResult rowwise_equivalence_check(int steps, std::size_t m, std::size_t n, double alpha, double epsilon,
                                      RowWiseMapping mapping, std::uint64_t seed);

/// Per-step comparison of the AdaFactor direction (ε = 0) with √(1ᵀr) times
/// the diagonal Shampoo direction at exponent −1/2 per factor.
CheckResult adafactor_relation_check(int steps, std::size_t m, std::size_t n, double beta2, std::uint64_t seed);

/// Fully merged Shampoo on a 1×n parameter against full-matrix AdaGrad.
/// root_override forces the factor root p (0 keeps the default 2ω).
CheckResult full_matrix_check(int steps, std::size_t n, double epsilon, std::uint64_t seed, int root_override = 0);

/// Largest relative Frobenius gap between the eigendecomposition and coupled
/// Newton root inverses over seeded SPD matrices.
CheckResult solver_agreement_check(int trials, std::uint64_t seed);

}  // namespace shampoo
