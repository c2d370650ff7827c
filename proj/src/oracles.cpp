#include "shampoo/oracles.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <random>

#include "shampoo/error.hpp"
#include "shampoo/optim.hpp"
#include "shampoo/precond.hpp"

namespace shampoo {

namespace {

constexpr OracleKind kAllKinds[] = {
    OracleKind::HeavyBall,      OracleKind::PrimalAveraging, OracleKind::NesterovHeavyBall,
    OracleKind::NesterovAveraging, OracleKind::RowWiseAdaGrad, OracleKind::AdaFactor,
    OracleKind::FullMatrixAdaGrad, OracleKind::DiagonalAdaGrad,
};

void require_matrix(const Tensor& t, const char* who) {
    if (t.order() != 2) throw Error(ErrorCode::ShapeMismatch, std::string(who) + " needs a matrix parameter");
}

}  // namespace

std::string_view to_string(OracleKind kind) {
    switch (kind) {
        case OracleKind::HeavyBall: return "heavy_ball";
        case OracleKind::PrimalAveraging: return "primal_averaging";
        case OracleKind::NesterovHeavyBall: return "nesterov_heavy_ball";
        case OracleKind::NesterovAveraging: return "nesterov_averaging";
        case OracleKind::RowWiseAdaGrad: return "rowwise_adagrad";
        case OracleKind::AdaFactor: return "adafactor";
        case OracleKind::FullMatrixAdaGrad: return "full_matrix_adagrad";
        case OracleKind::DiagonalAdaGrad: return "diagonal_adagrad";
    }
    return "unknown";
}

OracleKind oracle_kind_from_string(std::string_view name) {
    for (OracleKind k : kAllKinds) {
        if (to_string(k) == name) return k;
    }
    throw Error(ErrorCode::UnknownKind, "unknown oracle '" + std::string(name) + "'");
}

OracleState make_oracle(OracleKind kind, const Tensor& w0, const OracleHyper& hp) {
    OracleState s;
    s.kind = kind;
    s.w = w0;
    switch (kind) {
        case OracleKind::HeavyBall: s.w_prev = w0; break;
        case OracleKind::NesterovHeavyBall:
            s.w_prev = w0;
            s.p_prev = Tensor(w0.shape());
            break;
        case OracleKind::PrimalAveraging: s.z = w0; break;
        case OracleKind::NesterovAveraging:
            s.z = w0;
            s.p_prev = Tensor(w0.shape());
            break;
        case OracleKind::RowWiseAdaGrad:
            require_matrix(w0, "row-wise AdaGrad");
            s.v.assign(w0.shape()[0], hp.epsilon);
            break;
        case OracleKind::AdaFactor:
            require_matrix(w0, "AdaFactor");
            s.r.assign(w0.shape()[0], 0.0);
            s.c.assign(w0.shape()[1], 0.0);
            break;
        case OracleKind::FullMatrixAdaGrad: s.h = Matrix(w0.numel(), w0.numel()); break;
        case OracleKind::DiagonalAdaGrad: s.acc.assign(w0.numel(), 0.0); break;
        default: throw Error(ErrorCode::UnknownKind, "unknown oracle kind");
    }
    return s;
}

void oracle_step(OracleState& s, const Tensor& p, const OracleHyper& hp) {
    if (p.shape() != s.w.shape()) throw Error(ErrorCode::ShapeMismatch, "oracle gradient shape mismatch");
    const std::size_t n = p.numel();
    switch (s.kind) {
        case OracleKind::HeavyBall:
        case OracleKind::NesterovHeavyBall: {
            const bool nesterov = s.kind == OracleKind::NesterovHeavyBall;
            Tensor next(s.w.shape());
            for (std::size_t i = 0; i < n; ++i) {
                const double dir = nesterov ? p[i] + hp.mu * (p[i] - s.p_prev[i]) : p[i];
                next[i] = s.w[i] - hp.alpha * dir + hp.delta * (s.w[i] - s.w_prev[i]);
            }
            s.w_prev = std::move(s.w);
            s.w = std::move(next);
            if (nesterov) s.p_prev = p;
            break;
        }
        case OracleKind::PrimalAveraging:
        case OracleKind::NesterovAveraging: {
            const bool nesterov = s.kind == OracleKind::NesterovAveraging;
            for (std::size_t i = 0; i < n; ++i) {
                const double dir = nesterov ? p[i] + hp.mu * (p[i] - s.p_prev[i]) : p[i];
                s.z[i] -= hp.eta * dir;
                s.w[i] = hp.c * s.w[i] + (1.0 - hp.c) * s.z[i];
            }
            if (nesterov) s.p_prev = p;
            break;
        }
        case OracleKind::RowWiseAdaGrad: {
            const std::size_t rows = p.shape()[0], cols = p.shape()[1];
            for (std::size_t i = 0; i < rows; ++i) {
                double sq = 0.0;
                for (std::size_t j = 0; j < cols; ++j) sq += p[i * cols + j] * p[i * cols + j];
                s.v[i] += sq / static_cast<double>(cols);
            }
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) s.w[i * cols + j] -= hp.alpha * p[i * cols + j] / std::sqrt(s.v[i]);
            break;
        }
        case OracleKind::AdaFactor: {
            const std::size_t rows = p.shape()[0], cols = p.shape()[1];
            std::vector<double> row_sq(rows, 0.0), col_sq(cols, 0.0);
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) {
                    const double g2 = p[i * cols + j] * p[i * cols + j];
                    row_sq[i] += g2;
                    col_sq[j] += g2;
                }
            for (std::size_t i = 0; i < rows; ++i) s.r[i] = hp.beta2 * s.r[i] + (1.0 - hp.beta2) * row_sq[i];
            for (std::size_t j = 0; j < cols; ++j) s.c[j] = hp.beta2 * s.c[j] + (1.0 - hp.beta2) * col_sq[j];
            const Tensor d = adafactor_direction(s, p, hp.epsilon);
            for (std::size_t i = 0; i < n; ++i) s.w[i] -= hp.alpha * d[i];
            break;
        }
        case OracleKind::FullMatrixAdaGrad: {
            Eigen::Map<const Eigen::VectorXd> g(p.data().data(), static_cast<Eigen::Index>(n));
            Eigen::Map<Eigen::MatrixXd> h(s.h.data().data(), static_cast<Eigen::Index>(n),
                                          static_cast<Eigen::Index>(n));
            h += g * g.transpose();
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
            if (es.info() != Eigen::Success) throw Error(ErrorCode::NoConvergence, "full-matrix AdaGrad eigensolve");
            Eigen::VectorXd lam = es.eigenvalues();
            const double shift = std::min(lam.minCoeff(), 0.0);
            for (Eigen::Index i = 0; i < lam.size(); ++i) lam(i) = 1.0 / std::sqrt(lam(i) - shift + hp.epsilon);
            const Eigen::VectorXd step =
                es.eigenvectors() * (lam.asDiagonal() * (es.eigenvectors().transpose() * g));
            for (std::size_t i = 0; i < n; ++i) s.w[i] -= hp.alpha * step(static_cast<Eigen::Index>(i));
            break;
        }
        case OracleKind::DiagonalAdaGrad:
            for (std::size_t i = 0; i < n; ++i) {
                s.acc[i] += p[i] * p[i];
                s.w[i] -= hp.alpha * p[i] / (std::sqrt(s.acc[i]) + hp.epsilon);
            }
            break;
        default: throw Error(ErrorCode::UnknownKind, "unknown oracle kind");
    }
    ++s.step;
}

Tensor adafactor_direction(const OracleState& s, const Tensor& g, double epsilon) {
    require_matrix(g, "AdaFactor");
    const std::size_t rows = g.shape()[0], cols = g.shape()[1];
    double total = 0.0;
    for (double x : s.r) total += x;
    Tensor d(g.shape());
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
            const double a_hat = s.r[i] * s.c[j] / total;
            d[i * cols + j] = g[i * cols + j] / (std::sqrt(a_hat) + epsilon);
        }
    return d;
}

namespace {

struct Quadratic {
    Eigen::MatrixXd a;
    Eigen::VectorXd b;

    Tensor gradient(const Tensor& w) const {
        Eigen::Map<const Eigen::VectorXd> x(w.data().data(), b.size());
        const Eigen::VectorXd g = a * x - b;
        return Tensor(w.shape(), std::vector<double>(g.data(), g.data() + g.size()));
    }
};

Eigen::MatrixXd normal_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = normal(rng);
    return m;
}

Quadratic random_quadratic(std::size_t dim, std::mt19937_64& rng) {
    const auto n = static_cast<Eigen::Index>(dim);
    const Eigen::MatrixXd b = normal_matrix(n, n, rng);
    Quadratic q;
    q.a = b.transpose() * b / static_cast<double>(dim) + 0.1 * Eigen::MatrixXd::Identity(n, n);
    q.b = normal_matrix(n, 1, rng);
    return q;
}

Tensor random_tensor(const Shape& shape, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Tensor t(shape);
    for (double& x : t.data()) x = normal(rng);
    return t;
}

}  // namespace

CheckResult momentum_equivalence_check(int steps, double alpha, double mu, bool nesterov, std::uint64_t seed,
                                       std::size_t dim) {
    std::mt19937_64 rng(seed);
    const Quadratic q = random_quadratic(dim, rng);
    const Tensor w0 = random_tensor({dim}, rng);

    ShampooConfig cfg;
    cfg.lr = LrSchedule::constant(alpha);
    cfg.momentum = mu;
    cfg.use_nesterov = nesterov;
    cfg.weight_decay = 0.0;
    cfg.grafting = GraftingKind::SGD;
    cfg.start_preconditioning_step = kNeverPrecondition;
    ShampooOptimizer opt({{dim}}, cfg);
    std::vector<Tensor> w{w0};

    OracleHyper hb;
    hb.alpha = alpha;
    hb.delta = mu;
    hb.mu = mu;
    OracleHyper avg;
    avg.c = mu;
    avg.eta = alpha / (1.0 - mu);
    avg.mu = mu;
    OracleState heavy = make_oracle(nesterov ? OracleKind::NesterovHeavyBall : OracleKind::HeavyBall, w0, hb);
    OracleState averaging =
        make_oracle(nesterov ? OracleKind::NesterovAveraging : OracleKind::PrimalAveraging, w0, avg);

    CheckResult result{0.0, 1e-10};
    for (int t = 0; t < steps; ++t) {
        opt.step(w, {q.gradient(w[0])});
        oracle_step(heavy, q.gradient(heavy.w), hb);
        oracle_step(averaging, q.gradient(averaging.w), avg);
        result.deviation = std::max({result.deviation, max_abs_diff(w[0].data(), heavy.w.data()),
                                     max_abs_diff(w[0].data(), averaging.w.data())});
    }
    return result;
}

CheckResult rowwise_equivalence_check(int steps, std::size_t m, std::size_t n, double alpha, double epsilon,
                                      RowWiseMapping mapping, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    const Tensor w0 = random_tensor({m, n}, rng);
    const double nn = static_cast<double>(n);
    const double eps_bar = mapping == RowWiseMapping::Stated ? epsilon / nn : nn * epsilon;
    const double alpha_bar = mapping == RowWiseMapping::Stated ? alpha / nn : std::sqrt(nn) * alpha;

    OracleHyper hp;
    hp.alpha = alpha;
    hp.epsilon = epsilon;
    OracleState oracle = make_oracle(OracleKind::RowWiseAdaGrad, w0, hp);

    DiagonalState diag = make_diagonal_state(PreconditionerKind::DiagonalShampoo, {m, n}, 1.0, eps_bar, false);
    Tensor w = w0;
    const double exponents[] = {-0.5, 0.0};

    CheckResult result{0.0, 1e-12};
    for (int t = 0; t < steps; ++t) {
        const Tensor g = random_tensor({m, n}, rng);
        oracle_step(oracle, g, hp);
        update_diagonal(diag, g);
        const Tensor p = precondition_diagonal(diag, g, t, exponents);
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] -= alpha_bar * p[i];
        result.deviation = std::max(result.deviation, max_abs_diff(w.data(), oracle.w.data()));
    }
    return result;
}

CheckResult adafactor_relation_check(int steps, std::size_t m, std::size_t n, double beta2, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    OracleHyper hp;
    hp.alpha = 0.01;
    hp.beta2 = beta2;
    hp.epsilon = 0.0;
    OracleState oracle = make_oracle(OracleKind::AdaFactor, Tensor({m, n}), hp);
    DiagonalState diag = make_diagonal_state(PreconditionerKind::DiagonalShampoo, {m, n}, beta2, 0.0, false);
    RootConfig root;
    root.epsilon = 0.0;
    root.exponent_override = 2;

    CheckResult result{0.0, 1e-10};
    for (int t = 0; t < steps; ++t) {
        const Tensor g = random_tensor({m, n}, rng);
        oracle_step(oracle, g, hp);
        update_diagonal(diag, g);
        const Tensor d_af = adafactor_direction(oracle, g, 0.0);
        const Tensor d_sh = precondition(diag, g, t, root);
        double total = 0.0;
        for (double x : oracle.r) total += x;
        const double scale = std::sqrt(total);
        for (std::size_t i = 0; i < g.numel(); ++i) {
            result.deviation = std::max(result.deviation, std::abs(d_af[i] - scale * d_sh[i]));
        }
    }
    return result;
}

CheckResult full_matrix_check(int steps, std::size_t n, double epsilon, std::uint64_t seed, int root_override) {
    std::mt19937_64 rng(seed);
    const Quadratic q = random_quadratic(n, rng);
    const Tensor w0 = random_tensor({1, n}, rng);
    const double alpha = 0.1;

    ShampooConfig cfg;
    cfg.lr = LrSchedule::constant(alpha);
    cfg.beta2 = 1.0;
    cfg.epsilon = epsilon;
    cfg.momentum = 0.0;
    cfg.use_nesterov = false;
    cfg.weight_decay = 0.0;
    cfg.grafting = GraftingKind::None;
    cfg.precondition_frequency = 1;
    cfg.exponent_override = root_override;
    cfg.use_bias_correction = false;
    ShampooOptimizer opt({{1, n}}, cfg);
    std::vector<Tensor> w{w0};

    OracleHyper hp;
    hp.alpha = alpha;
    hp.epsilon = epsilon;
    OracleState oracle = make_oracle(OracleKind::FullMatrixAdaGrad, w0, hp);

    CheckResult result{0.0, 1e-10};
    for (int t = 0; t < steps; ++t) {
        opt.step(w, {q.gradient(w[0])});
        oracle_step(oracle, q.gradient(oracle.w), hp);
        result.deviation = std::max(result.deviation, max_abs_diff(w[0].data(), oracle.w.data()));
    }
    return result;
}

CheckResult solver_agreement_check(int trials, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> dim(2, 16);
    std::uniform_real_distribution<double> log_cond(0.0, 6.0);
    const int roots[] = {1, 2, 4};
    CheckResult result{0.0, 1e-6};
    for (int trial = 0; trial < trials; ++trial) {
        const auto n = static_cast<Eigen::Index>(dim(rng));
        const double cond = std::pow(10.0, log_cond(rng));
        const Eigen::HouseholderQR<Eigen::MatrixXd> qr(normal_matrix(n, n, rng));
        const Eigen::MatrixXd qm = qr.householderQ();
        Eigen::VectorXd lam(n);
        for (Eigen::Index i = 0; i < n; ++i) lam(i) = std::pow(cond, static_cast<double>(i) / static_cast<double>(n - 1));
        Eigen::MatrixXd a = qm * lam.asDiagonal() * qm.transpose();
        a = 0.5 * (a + a.transpose());

        RootInverseRequest req;
        req.matrix = Matrix(static_cast<std::size_t>(n), static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < n; ++j) req.matrix(i, j) = a(i, j);
        req.root_p = roots[trial % 3];
        const Matrix x_eigh = root_inverse_eigh(req);
        req.solver = RootSolver::CoupledNewton;
        const Matrix x_newton = root_inverse_newton(req).inverse;
        result.deviation =
            std::max(result.deviation, frobenius_norm(x_eigh - x_newton) / frobenius_norm(x_eigh));
    }
    return result;
}

}  // namespace shampoo
