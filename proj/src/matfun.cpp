#include "shampoo/matfun.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "shampoo/error.hpp"

namespace shampoo {

namespace {

constexpr int kJacobiMaxSweeps = 100;
constexpr double kJacobiOffTolerance = 1e-14;

template <typename T>
struct DenseSym {
    std::size_t n = 0;
    std::vector<T> a;  // row-major n x n

    T& operator()(std::size_t i, std::size_t j) { return a[i * n + j]; }
    T operator()(std::size_t i, std::size_t j) const { return a[i * n + j]; }
};

template <typename T>
DenseSym<T> narrow(const Matrix& m) {
    DenseSym<T> s{m.rows(), std::vector<T>(m.data().size())};
    for (std::size_t i = 0; i < s.a.size(); ++i) {
        s.a[i] = static_cast<T>(m.data()[i]);
        if (!std::isfinite(s.a[i])) {
            throw Error(ErrorCode::NonFinite, "matrix entry is not finite in the requested precision");
        }
    }
    return s;
}

template <typename T>
Matrix widen(const DenseSym<T>& s) {
    Matrix m(s.n, s.n);
    for (std::size_t i = 0; i < s.a.size(); ++i) m.data()[i] = static_cast<double>(s.a[i]);
    return m;
}

void require_square_finite(const Matrix& a) {
    if (!a.square()) throw Error(ErrorCode::ShapeMismatch, "expected a square matrix");
    if (!all_finite(a.data())) throw Error(ErrorCode::NonFinite, "matrix has NaN or Inf entries");
}

template <typename T>
T off_diagonal_norm(const DenseSym<T>& s) {
    T sum = 0;
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t j = 0; j < s.n; ++j)
            if (i != j) sum += s(i, j) * s(i, j);
    return std::sqrt(sum);
}

template <typename T>
struct JacobiOutput {
    std::vector<T> values;
    DenseSym<T> vectors;
    int sweeps = 0;
};

template <typename T>
JacobiOutput<T> jacobi(DenseSym<T> s) {
    const std::size_t n = s.n;
    DenseSym<T> v{n, std::vector<T>(n * n, T(0))};
    for (std::size_t i = 0; i < n; ++i) v(i, i) = T(1);

    T norm = 0;
    for (T x : s.a) norm += x * x;
    norm = std::sqrt(norm);
    const T threshold =
        std::max(static_cast<T>(kJacobiOffTolerance), T(8) * std::numeric_limits<T>::epsilon()) * norm;

    int sweep = 0;
    while (off_diagonal_norm(s) > threshold) {
        if (sweep == kJacobiMaxSweeps) {
            throw Error(ErrorCode::NoConvergence, "Jacobi sweep cap reached");
        }
        ++sweep;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                const T apq = s(p, q);
                if (apq == T(0)) continue;
                const T app = s(p, p);
                const T aqq = s(q, q);
                const T theta = (aqq - app) / (T(2) * apq);
                T t;
                if (std::abs(theta) > std::sqrt(std::numeric_limits<T>::max()) / T(4)) {
                    t = T(1) / (T(2) * theta);
                } else {
                    t = (theta >= T(0) ? T(1) : T(-1)) / (std::abs(theta) + std::sqrt(theta * theta + T(1)));
                }
                const T c = T(1) / std::sqrt(t * t + T(1));
                const T sn = t * c;
                for (std::size_t j = 0; j < n; ++j) {
                    if (j == p || j == q) continue;
                    const T ajp = s(j, p);
                    const T ajq = s(j, q);
                    const T np = c * ajp - sn * ajq;
                    const T nq = sn * ajp + c * ajq;
                    s(j, p) = s(p, j) = np;
                    s(j, q) = s(q, j) = nq;
                }
                s(p, p) = app - t * apq;
                s(q, q) = aqq + t * apq;
                s(p, q) = s(q, p) = T(0);
                for (std::size_t j = 0; j < n; ++j) {
                    const T vjp = v(j, p);
                    const T vjq = v(j, q);
                    v(j, p) = c * vjp - sn * vjq;
                    v(j, q) = sn * vjp + c * vjq;
                }
            }
        }
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return s(i, i) < s(j, j); });

    JacobiOutput<T> out{std::vector<T>(n), DenseSym<T>{n, std::vector<T>(n * n)}, sweep};
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = s(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
    }
    for (T x : out.values) {
        if (!std::isfinite(x)) throw Error(ErrorCode::NonFinite, "eigenvalue is not finite");
    }
    return out;
}

template <typename T>
Matrix root_inverse_eigh_impl(const RootInverseRequest& req) {
    const JacobiOutput<T> eig = jacobi(narrow<T>(req.matrix));
    const std::size_t n = eig.vectors.n;

    std::vector<double> lambda(eig.values.begin(), eig.values.end());
    const std::vector<double> clamped = clamp_eigenvalues(lambda, req.epsilon);
    const T exponent = static_cast<T>(-req.exponent_multiplier / req.root_p);

    std::vector<T> scale(n);
    for (std::size_t k = 0; k < n; ++k) {
        const T lk = static_cast<T>(clamped[k]);
        if (lk <= T(0)) {
            throw Error(ErrorCode::EpsilonZeroWithSingular, "clamped eigenvalue is zero with epsilon = 0");
        }
        scale[k] = std::pow(lk, exponent);
    }

    DenseSym<T> x{n, std::vector<T>(n * n, T(0))};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            T sum = 0;
            for (std::size_t k = 0; k < n; ++k) sum += eig.vectors(i, k) * scale[k] * eig.vectors(j, k);
            x(i, j) = x(j, i) = sum;
        }
    }
    Matrix out = widen(x);
    if (!all_finite(out.data())) throw Error(ErrorCode::NonFinite, "root inverse is not finite");
    return out;
}

template <typename T>
std::vector<T> multiply(const std::vector<T>& a, const std::vector<T>& b, std::size_t n) {
    std::vector<T> c(n * n, T(0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < n; ++k) {
            const T aik = a[i * n + k];
            for (std::size_t j = 0; j < n; ++j) c[i * n + j] += aik * b[k * n + j];
        }
    return c;
}

template <typename T>
T residual_inf(const std::vector<T>& m, std::size_t n) {
    T worst = 0;
    for (std::size_t i = 0; i < n; ++i) {
        T row = 0;
        for (std::size_t j = 0; j < n; ++j) row += std::abs(m[i * n + j] - (i == j ? T(1) : T(0)));
        worst = std::max(worst, row);
    }
    return worst;
}

template <typename T>
NewtonResult root_inverse_newton_impl(const RootInverseRequest& req) {
    const std::size_t n = req.matrix.rows();
    const int p = req.root_p;

    DenseSym<T> a = narrow<T>(req.matrix);
    for (std::size_t i = 0; i < n; ++i) a(i, i) += static_cast<T>(req.epsilon);

    T fro = 0;
    for (T x : a.a) fro += x * x;
    fro = std::sqrt(fro);

    const T c = std::pow(T(2) * fro / static_cast<T>(p + 1), T(1) / static_cast<T>(p));
    std::vector<T> x(n * n, T(0));
    std::vector<T> m(n * n);
    const T cp = std::pow(c, static_cast<T>(p));
    for (std::size_t i = 0; i < n; ++i) x[i * n + i] = T(1) / c;
    for (std::size_t i = 0; i < n * n; ++i) m[i] = a.a[i] / cp;

    NewtonTrace trace;
    trace.c_init = static_cast<double>(c);
    T residual = residual_inf(m, n);
    std::vector<T> best_x = x;
    T best_residual = residual;

    const T tol = static_cast<T>(req.tolerance);
    int k = 0;
    while (!(residual < tol) && k < kNewtonMaxIterations) {
        std::vector<T> step(n * n);
        for (std::size_t i = 0; i < n * n; ++i) step[i] = -m[i] / static_cast<T>(p);
        for (std::size_t i = 0; i < n; ++i) step[i * n + i] += static_cast<T>(p + 1) / static_cast<T>(p);

        x = multiply(x, step, n);
        std::vector<T> power = step;
        for (int e = 1; e < p; ++e) power = multiply(power, step, n);
        m = multiply(power, m, n);
        ++k;

        residual = residual_inf(m, n);
        if (!std::isfinite(residual)) break;
        if (residual < best_residual) {
            best_residual = residual;
            best_x = x;
        }
    }

    trace.iterations = k;
    trace.final_residual = static_cast<double>(best_residual);
    trace.converged = best_residual < tol;

    DenseSym<T> out{n, std::move(best_x)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) out(i, j) = out(j, i) = (out(i, j) + out(j, i)) / T(2);
    return NewtonResult{widen(out), trace};
}

void validate(const RootInverseRequest& req) {
    require_square_finite(req.matrix);
    if (req.root_p < 1) throw Error(ErrorCode::InvalidArgument, "root_p must be >= 1");
    if (!(req.exponent_multiplier > 0.0)) throw Error(ErrorCode::InvalidArgument, "exponent multiplier must be > 0");
    if (req.epsilon < 0.0) throw Error(ErrorCode::InvalidArgument, "epsilon must be >= 0");
}

Matrix identity_fallback(const RootInverseRequest& req) {
    const double scale = req.epsilon > 0.0 ? std::pow(req.epsilon, -req.exponent_multiplier / req.root_p) : 1.0;
    return Matrix::identity(req.matrix.rows(), scale);
}

}  // namespace

EighResult sym_eigh(const Matrix& a, Precision precision) {
    require_square_finite(a);
    EighResult result;
    if (precision == Precision::Single) {
        const auto out = jacobi(narrow<float>(a));
        result.eigenvalues.assign(out.values.begin(), out.values.end());
        result.eigenvectors = widen(out.vectors);
        result.sweeps = out.sweeps;
    } else {
        auto out = jacobi(narrow<double>(a));
        result.eigenvalues = std::move(out.values);
        result.eigenvectors = Matrix(out.vectors.n, out.vectors.n, std::move(out.vectors.a));
        result.sweeps = out.sweeps;
    }
    return result;
}

std::vector<double> clamp_eigenvalues(std::span<const double> eigenvalues, double epsilon) {
    if (eigenvalues.empty()) return {};
    const double lambda_min = *std::min_element(eigenvalues.begin(), eigenvalues.end());
    const double shift = std::min(lambda_min, 0.0);
    std::vector<double> out(eigenvalues.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = eigenvalues[i] - shift + epsilon;
    return out;
}

Matrix root_inverse_eigh(const RootInverseRequest& req) {
    validate(req);
    if (req.solver != RootSolver::Eigh) throw Error(ErrorCode::InvalidArgument, "request is not for the Eigh solver");
    return req.precision == Precision::Single ? root_inverse_eigh_impl<float>(req)
                                              : root_inverse_eigh_impl<double>(req);
}

NewtonResult root_inverse_newton(const RootInverseRequest& req) {
    validate(req);
    if (req.solver != RootSolver::CoupledNewton) {
        throw Error(ErrorCode::InvalidArgument, "request is not for the coupled Newton solver");
    }
    if (req.exponent_multiplier != 1.0) {
        throw Error(ErrorCode::InvalidArgument, "coupled Newton does not support an exponent multiplier");
    }
    if (!(req.tolerance > 0.0)) throw Error(ErrorCode::InvalidArgument, "tolerance must be > 0");

    if (frobenius_norm(req.matrix) == 0.0) {
        if (req.epsilon == 0.0) {
            throw Error(ErrorCode::EpsilonZeroWithSingular, "zero matrix with epsilon = 0");
        }
        NewtonTrace trace{0, 0.0, true, 0.0};
        return NewtonResult{Matrix::identity(req.matrix.rows(), std::pow(req.epsilon, -1.0 / req.root_p)), trace};
    }
    return req.precision == Precision::Single ? root_inverse_newton_impl<float>(req)
                                              : root_inverse_newton_impl<double>(req);
}

void GuardCounters::record(GuardBranch branch) {
    switch (branch) {
        case GuardBranch::Requested: ++requested; break;
        case GuardBranch::DoubleRetry: ++double_retry; break;
        case GuardBranch::Previous: ++previous; break;
        case GuardBranch::IdentityFallback: ++identity_fallback; break;
    }
}

namespace {

std::optional<Matrix> try_solve(RootInverseRequest req, Precision precision) {
    req.precision = precision;
    try {
        if (req.solver == RootSolver::Eigh) return root_inverse_eigh(req);
        NewtonResult r = root_inverse_newton(req);
        if (!r.trace.converged || !all_finite(r.inverse.data())) return std::nullopt;
        return std::move(r.inverse);
    } catch (const Error&) {
        return std::nullopt;
    }
}

}  // namespace

GuardedRootInverse guarded_root_inverse(const RootInverseRequest& req, const Matrix* previous,
                                        GuardCounters* counters) {
    GuardedRootInverse result;
    auto finish = [&](GuardBranch branch, Matrix m) {
        result.branch = branch;
        result.inverse = std::move(m);
        if (counters != nullptr) counters->record(branch);
        return result;
    };

    if (auto m = try_solve(req, req.precision)) return finish(GuardBranch::Requested, std::move(*m));
    // A double-precision request that failed would fail identically on retry.
    if (req.precision != Precision::Double) {
        if (auto m = try_solve(req, Precision::Double)) return finish(GuardBranch::DoubleRetry, std::move(*m));
    }
    if (previous != nullptr) return finish(GuardBranch::Previous, *previous);
    return finish(GuardBranch::IdentityFallback, identity_fallback(req));
}

}  // namespace shampoo
