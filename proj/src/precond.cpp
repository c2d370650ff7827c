#include "shampoo/precond.hpp"

#include <algorithm>
#include <cmath>

#include "shampoo/error.hpp"

namespace shampoo {

Shape merge_dims(const Shape& shape, std::size_t max_dim) {
    if (max_dim == 0) throw Error(ErrorCode::InvalidArgument, "max_dim must be >= 1");
    Shape merged;
    std::size_t running = 0;  // 0 marks "no open group"
    for (std::size_t d : shape) {
        if (d == 0) throw Error(ErrorCode::InvalidArgument, "dimensions must be >= 1");
        if (d == 1) continue;
        if (running == 0) {
            running = d;
        } else if (running * d <= max_dim) {
            running *= d;
        } else {
            merged.push_back(running);
            running = d;
        }
    }
    if (running != 0) merged.push_back(running);
    if (merged.empty()) merged.push_back(1);
    return merged;
}

BlockPlan block_partition(const Shape& merged, std::size_t block_size) {
    if (block_size == 0) throw Error(ErrorCode::InvalidArgument, "block size must be >= 1");
    BlockPlan plan;
    plan.original_shape = merged;
    plan.merged_shape = merged;
    plan.block_size = block_size;
    plan.large_dim_method = LargeDimMethod::Blocking;

    const std::size_t order = merged.size();
    std::vector<std::size_t> counts(order);
    for (std::size_t k = 0; k < order; ++k) counts[k] = (merged[k] + block_size - 1) / block_size;

    std::vector<std::size_t> index(order, 0);
    const std::size_t total = numel(counts);
    for (std::size_t n = 0; n < total; ++n) {
        Block b;
        for (std::size_t k = 0; k < order; ++k) {
            const std::size_t start = index[k] * block_size;
            b.offsets.push_back(start);
            b.shape.push_back(std::min(block_size, merged[k] - start));
        }
        plan.blocks.push_back(std::move(b));
        for (std::size_t k = order; k-- > 0;) {
            if (++index[k] < counts[k]) break;
            index[k] = 0;
        }
    }
    return plan;
}

PreconditionerKind select_large_dim_method(const Shape& merged, std::size_t block_size, LargeDimMethod configured) {
    const bool oversized = std::any_of(merged.begin(), merged.end(), [&](std::size_t d) { return d > block_size; });
    if (!oversized) return PreconditionerKind::Shampoo;
    switch (configured) {
        case LargeDimMethod::Blocking: return PreconditionerKind::Shampoo;
        case LargeDimMethod::AdaGradFallback: return PreconditionerKind::AdaGradFallback;
        case LargeDimMethod::DiagonalShampoo: return PreconditionerKind::DiagonalShampoo;
    }
    throw Error(ErrorCode::UnknownKind, "unknown large-dim method");
}

BlockPlan plan_parameter(const Shape& original, std::size_t block_size, LargeDimMethod method, bool merge) {
    Shape merged = merge ? merge_dims(original, block_size) : original;
    if (merged.empty()) merged.push_back(1);

    BlockPlan plan;
    const PreconditionerKind kind = numel(merged) == 1 ? PreconditionerKind::GraftOnly
                                                       : select_large_dim_method(merged, block_size, method);
    if (kind == PreconditionerKind::Shampoo) {
        plan = block_partition(merged, block_size);
    } else {
        plan.merged_shape = merged;
        plan.block_size = block_size;
        plan.blocks.push_back(Block{std::vector<std::size_t>(merged.size(), 0), merged});
    }
    plan.original_shape = original;
    plan.large_dim_method = method;
    plan.kind = kind;
    return plan;
}

std::size_t block_memory(const Block& b, PreconditionerKind kind) {
    std::size_t total = 0;
    switch (kind) {
        case PreconditionerKind::Shampoo:
            for (std::size_t d : b.shape) total += 2 * d * d;
            break;
        case PreconditionerKind::AdaGradFallback: total = b.numel(); break;
        case PreconditionerKind::DiagonalShampoo:
            for (std::size_t d : b.shape) total += d;
            break;
        case PreconditionerKind::GraftOnly: break;
    }
    return total;
}

std::size_t preconditioner_memory(const BlockPlan& plan) {
    std::size_t total = 0;
    for (const Block& b : plan.blocks) total += block_memory(b, plan.kind);
    return total;
}

namespace {

template <typename Fn>
void for_each_block_element(const Shape& merged, const Block& block, Fn&& fn) {
    if (block.shape.size() != merged.size()) throw Error(ErrorCode::ShapeMismatch, "block order mismatch");
    const std::size_t order = merged.size();
    std::vector<std::size_t> stride(order, 1);
    for (std::size_t k = order; k-- > 1;) stride[k - 1] = stride[k] * merged[k];

    std::vector<std::size_t> index(order, 0);
    const std::size_t total = block.numel();
    for (std::size_t n = 0; n < total; ++n) {
        std::size_t flat = 0;
        for (std::size_t k = 0; k < order; ++k) flat += (block.offsets[k] + index[k]) * stride[k];
        fn(n, flat);
        for (std::size_t k = order; k-- > 0;) {
            if (++index[k] < block.shape[k]) break;
            index[k] = 0;
        }
    }
}

double bias_divisor(bool enabled, double beta, std::int64_t t) {
    if (!enabled || beta >= 1.0) return 1.0;
    return 1.0 - std::pow(beta, static_cast<double>(t + 1));
}

}  // namespace

Tensor extract_block(const Tensor& merged, const Block& block) {
    Tensor out(block.shape);
    for_each_block_element(merged.shape(), block, [&](std::size_t n, std::size_t flat) { out[n] = merged[flat]; });
    return out;
}

void scatter_block(Tensor& merged, const Block& block, const Tensor& values) {
    if (values.numel() != block.numel()) throw Error(ErrorCode::ShapeMismatch, "scatter_block size mismatch");
    for_each_block_element(merged.shape(), block, [&](std::size_t n, std::size_t flat) { merged[flat] = values[n]; });
}

int root_for_order(const RootConfig& cfg, std::size_t order) {
    return cfg.exponent_override != 0 ? cfg.exponent_override : static_cast<int>(2 * order);
}

ShampooBlockState make_shampoo_state(const Shape& block_shape, double beta2, double epsilon, bool bias_correction) {
    if (!(beta2 > 0.0 && beta2 <= 1.0)) throw Error(ErrorCode::InvalidArgument, "beta2 must be in (0, 1]");
    ShampooBlockState s;
    s.block_shape = block_shape;
    for (std::size_t d : block_shape) s.factors.emplace_back(d, d);
    s.beta2 = beta2;
    s.epsilon = epsilon;
    s.bias_corrected = bias_correction;
    return s;
}

void update_factors(ShampooBlockState& state, const Tensor& g, Precision precision) {
    if (g.shape() != state.block_shape) {
        throw Error(ErrorCode::ShapeMismatch, "gradient block " + shape_to_string(g.shape()) +
                                                  " does not match factor shape " +
                                                  shape_to_string(state.block_shape));
    }
    for (std::size_t k = 0; k < state.factors.size(); ++k) {
        const Matrix gram = mode_gram(g, k);
        Matrix& f = state.factors[k];
        auto fv = f.data();
        auto gv = gram.data();
        if (state.beta2 == 1.0) {
            for (std::size_t i = 0; i < fv.size(); ++i) fv[i] += gv[i];
        } else {
            for (std::size_t i = 0; i < fv.size(); ++i) fv[i] = state.beta2 * fv[i] + (1.0 - state.beta2) * gv[i];
        }
        if (precision == Precision::Single) {
            for (double& x : fv) x = static_cast<double>(static_cast<float>(x));
        }
    }
    ++state.step;
}

bool refresh_inverses(ShampooBlockState& state, std::int64_t t, const RefreshSchedule& schedule,
                      const RootConfig& cfg) {
    if (schedule.frequency < 1) throw Error(ErrorCode::InvalidArgument, "precondition frequency must be >= 1");
    if (t < schedule.start_step) return false;
    if (t % schedule.frequency != 0 && state.preconditioned()) return false;

    const double divisor = bias_divisor(state.bias_corrected, state.beta2, t);
    const int root = root_for_order(cfg, state.factors.size());
    std::vector<Matrix> inverses;
    inverses.reserve(state.factors.size());
    for (std::size_t k = 0; k < state.factors.size(); ++k) {
        RootInverseRequest req;
        req.matrix = divisor == 1.0 ? state.factors[k] : (1.0 / divisor) * state.factors[k];
        req.root_p = root;
        req.exponent_multiplier = cfg.exponent_multiplier;
        req.epsilon = state.epsilon;
        req.solver = cfg.solver;
        req.tolerance = cfg.tolerance;
        req.precision = cfg.precision;
        const Matrix* previous = state.preconditioned() ? &state.inv_factors[k] : nullptr;
        inverses.push_back(guarded_root_inverse(req, previous, &state.guard).inverse);
    }
    state.inv_factors = std::move(inverses);
    state.last_inverse_step = t;
    return true;
}

Tensor precondition(const ShampooBlockState& state, const Tensor& g) {
    if (!state.preconditioned()) {
        throw Error(ErrorCode::NotYetPreconditioned, "root inverses have not been computed yet");
    }
    if (g.shape() != state.block_shape) throw Error(ErrorCode::ShapeMismatch, "gradient block shape mismatch");
    Tensor out = g;
    for (std::size_t k = 0; k < state.inv_factors.size(); ++k) out = mode_product(out, state.inv_factors[k], k);
    return out;
}

DiagonalState make_diagonal_state(PreconditionerKind kind, const Shape& block_shape, double beta2, double epsilon,
                                  bool bias_correction) {
    if (kind != PreconditionerKind::AdaGradFallback && kind != PreconditionerKind::DiagonalShampoo) {
        throw Error(ErrorCode::InvalidArgument, "diagonal state needs AdaGradFallback or DiagonalShampoo");
    }
    if (!(beta2 > 0.0 && beta2 <= 1.0)) throw Error(ErrorCode::InvalidArgument, "beta2 must be in (0, 1]");
    DiagonalState s;
    s.kind = kind;
    s.block_shape = block_shape;
    if (kind == PreconditionerKind::AdaGradFallback) {
        s.accumulator.assign(numel(block_shape), 0.0);
    } else {
        for (std::size_t d : block_shape) s.mode_diagonals.emplace_back(d, 0.0);
    }
    s.beta2 = beta2;
    s.epsilon = epsilon;
    s.bias_corrected = bias_correction;
    return s;
}

namespace {

void accumulate(std::vector<double>& acc, std::size_t i, double value, double beta2) {
    acc[i] = beta2 == 1.0 ? acc[i] + value : beta2 * acc[i] + (1.0 - beta2) * value;
}

}  // namespace

void update_diagonal(DiagonalState& state, const Tensor& g) {
    if (g.shape() != state.block_shape) throw Error(ErrorCode::ShapeMismatch, "gradient block shape mismatch");
    if (state.kind == PreconditionerKind::AdaGradFallback) {
        for (std::size_t i = 0; i < g.numel(); ++i) accumulate(state.accumulator, i, g[i] * g[i], state.beta2);
    } else {
        for (std::size_t k = 0; k < state.mode_diagonals.size(); ++k) {
            // Diagonal of the mode-k Gram: squared mass of each mode-k slice.
            const Matrix unfolded = unfold(g, k);
            for (std::size_t i = 0; i < unfolded.rows(); ++i) {
                double s = 0.0;
                for (std::size_t j = 0; j < unfolded.cols(); ++j) s += unfolded(i, j) * unfolded(i, j);
                accumulate(state.mode_diagonals[k], i, s, state.beta2);
            }
        }
    }
    ++state.step;
}

Tensor precondition_diagonal(const DiagonalState& state, const Tensor& g, std::int64_t t,
                             std::span<const double> exponents) {
    if (state.kind != PreconditionerKind::DiagonalShampoo) {
        throw Error(ErrorCode::InvalidArgument, "per-mode exponents only apply to diagonal Shampoo");
    }
    if (g.shape() != state.block_shape) throw Error(ErrorCode::ShapeMismatch, "gradient block shape mismatch");
    if (exponents.size() != state.mode_diagonals.size()) {
        throw Error(ErrorCode::ShapeMismatch, "one exponent per mode required");
    }
    if (state.step == 0) throw Error(ErrorCode::NotYetPreconditioned, "diagonal statistics are empty");
    const double divisor = bias_divisor(state.bias_corrected, state.beta2, t);
    Tensor out = g;
    for (std::size_t k = 0; k < state.mode_diagonals.size(); ++k) {
        if (exponents[k] == 0.0) continue;
        std::vector<double> lambda(state.mode_diagonals[k].size());
        for (std::size_t i = 0; i < lambda.size(); ++i) lambda[i] = state.mode_diagonals[k][i] / divisor;
        const std::vector<double> clamped = clamp_eigenvalues(lambda, state.epsilon);
        std::vector<double> scale(clamped.size());
        for (std::size_t i = 0; i < scale.size(); ++i) {
            if (clamped[i] <= 0.0) {
                throw Error(ErrorCode::EpsilonZeroWithSingular, "zero diagonal statistic with epsilon = 0");
            }
            scale[i] = std::pow(clamped[i], exponents[k]);
        }
        out = mode_scale(out, scale, k);
    }
    return out;
}

Tensor precondition(const DiagonalState& state, const Tensor& g, std::int64_t t, const RootConfig& cfg) {
    if (state.kind == PreconditionerKind::DiagonalShampoo) {
        const double exponent =
            -cfg.exponent_multiplier / root_for_order(cfg, state.mode_diagonals.size());
        const std::vector<double> exponents(state.mode_diagonals.size(), exponent);
        return precondition_diagonal(state, g, t, exponents);
    }
    if (g.shape() != state.block_shape) throw Error(ErrorCode::ShapeMismatch, "gradient block shape mismatch");
    if (state.step == 0) throw Error(ErrorCode::NotYetPreconditioned, "diagonal statistics are empty");
    const double divisor = bias_divisor(state.bias_corrected, state.beta2, t);
    Tensor out = g;
    for (std::size_t i = 0; i < g.numel(); ++i) {
        out[i] = g[i] / (std::sqrt(state.accumulator[i] / divisor) + state.epsilon);
    }
    return out;
}

}  // namespace shampoo
