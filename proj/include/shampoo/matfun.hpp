#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "shampoo/tensor.hpp"

namespace shampoo {

enum class Precision { Single, Double };
enum class RootSolver { Eigh, CoupledNewton };

/// Symmetric eigendecomposition A = Q diag(λ) Q^T, eigenvalues ascending and
/// eigenvector columns ordered to match.
struct EighResult {
    std::vector<double> eigenvalues;
    Matrix eigenvectors;
    int sweeps = 0;
};

/// Cyclic Jacobi. Throws NonFinite for NaN/Inf input (including overflow
/// when narrowing to single precision) and NoConvergence after 100 sweeps.
EighResult sym_eigh(const Matrix& a, Precision precision = Precision::Double);

struct RootInverseRequest {
    Matrix matrix;
    int root_p = 2;
    double exponent_multiplier = 1.0;
    double epsilon = 0.0;
    RootSolver solver = RootSolver::Eigh;
    double tolerance = 1e-6;
    Precision precision = Precision::Double;
};

/// λ − min(λ_min, 0) + ε, elementwise.
std::vector<double> clamp_eigenvalues(std::span<const double> eigenvalues, double epsilon);

/// Q diag(λ_new^(−η/p)) Q^T with λ_new from clamp_eigenvalues.
Matrix root_inverse_eigh(const RootInverseRequest& req);

struct NewtonTrace {
    int iterations = 0;
    double final_residual = 0.0;  // ||M_k − I||_∞ (max row sum)
    bool converged = false;
    double c_init = 0.0;
};

struct NewtonResult {
    Matrix inverse;
    NewtonTrace trace;
};

inline constexpr int kNewtonMaxIterations = 1000;

/// Coupled inverse Newton iteration on A + εI. Exceeding the iteration cap
/// is reported through trace.converged = false with the best iterate.
NewtonResult root_inverse_newton(const RootInverseRequest& req);

enum class GuardBranch { Requested, DoubleRetry, Previous, IdentityFallback };

struct GuardCounters {
    std::size_t requested = 0;
    std::size_t double_retry = 0;
    std::size_t previous = 0;
    std::size_t identity_fallback = 0;

    void record(GuardBranch branch);
    std::size_t total() const { return requested + double_retry + previous + identity_fallback; }
};

struct GuardedRootInverse {
    Matrix inverse;
    GuardBranch branch = GuardBranch::Requested;
};

/// Requested precision first, then a double-precision retry, then the
/// previous inverse, then ε^(−η/p)·I. Never throws on solver failure.
GuardedRootInverse guarded_root_inverse(const RootInverseRequest& req, const Matrix* previous,
                                        GuardCounters* counters = nullptr);

}  // namespace shampoo
