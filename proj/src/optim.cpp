#include "shampoo/optim.hpp"

#include <cmath>
#include <numbers>

#include "shampoo/error.hpp"

namespace shampoo {

LrSchedule LrSchedule::constant(double lr) { return LrSchedule{Kind::Constant, lr, 0, 0}; }

LrSchedule LrSchedule::warmup_cosine(double lr, std::int64_t warmup, std::int64_t total) {
    return LrSchedule{Kind::WarmupCosine, lr, warmup, total};
}

double lr_at(const LrSchedule& s, std::int64_t t) {
    if (t < 0) throw Error(ErrorCode::OutOfRange, "negative step");
    if (s.kind == LrSchedule::Kind::Constant) return s.initial_lr;
    if (t >= s.total_steps) {
        throw Error(ErrorCode::OutOfRange,
                    "step " + std::to_string(t) + " outside schedule of " + std::to_string(s.total_steps));
    }
    if (t < s.warmup_steps) {
        return s.initial_lr * static_cast<double>(t + 1) / static_cast<double>(s.warmup_steps);
    }
    const double span = static_cast<double>(s.total_steps - s.warmup_steps);
    const double progress = static_cast<double>(t - s.warmup_steps) / span;
    return s.initial_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void ShampooConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); };
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1 must be in [0, 1)");
    if (!(beta2 > 0.0 && beta2 <= 1.0)) fail("beta2 must be in (0, 1]");
    if (!(momentum >= 0.0)) fail("momentum must be >= 0");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
    if (!(exponent_multiplier > 0.0)) fail("exponent_multiplier must be > 0");
    if (!(epsilon >= 0.0)) fail("epsilon must be >= 0");
    if (!(grafting_epsilon >= 0.0)) fail("grafting_epsilon must be >= 0");
    if (!(grafting_beta2 > 0.0 && grafting_beta2 <= 1.0)) fail("grafting_beta2 must be in (0, 1]");
    if (exponent_override < 0) fail("exponent_override must be >= 0");
    if (max_preconditioner_dim < 1) fail("max_preconditioner_dim must be >= 1");
    if (precondition_frequency < 1) fail("precondition_frequency must be >= 1");
    if (start_preconditioning_step < 0) fail("start_preconditioning_step must be >= 0");
    if (solver == RootSolver::CoupledNewton && exponent_multiplier != 1.0) {
        fail("the coupled Newton solver requires exponent_multiplier = 1");
    }
    if (!(newton_tolerance > 0.0)) fail("newton_tolerance must be > 0");
    if (!(lr.initial_lr > 0.0)) fail("lr must be > 0");
    if (lr.kind == LrSchedule::Kind::WarmupCosine) {
        if (lr.warmup_steps < 0 || lr.total_steps < 1) fail("schedule steps must be positive");
        if (lr.warmup_steps >= lr.total_steps) fail("warmup_steps must be < total_steps");
    }
}

RootConfig ShampooConfig::root_config() const {
    RootConfig r;
    r.solver = solver;
    r.epsilon = epsilon;
    r.exponent_override = exponent_override;
    r.exponent_multiplier = exponent_multiplier;
    r.tolerance = newton_tolerance;
    r.precision = precision;
    return r;
}

BlockSlot make_block_slot(const Block& block, PreconditionerKind kind, const ShampooConfig& cfg) {
    BlockSlot s;
    s.block = block;
    s.kind = kind;
    switch (kind) {
        case PreconditionerKind::Shampoo:
            s.shampoo = make_shampoo_state(block.shape, cfg.beta2, cfg.epsilon, cfg.use_bias_correction);
            break;
        case PreconditionerKind::AdaGradFallback:
            s.diagonal = make_diagonal_state(kind, block.shape, cfg.beta2, cfg.grafting_epsilon, cfg.use_bias_correction);
            break;
        case PreconditionerKind::DiagonalShampoo:
            s.diagonal = make_diagonal_state(kind, block.shape, cfg.beta2, cfg.epsilon, cfg.use_bias_correction);
            break;
        case PreconditionerKind::GraftOnly: break;
    }
    s.graft = make_graft_state(cfg.grafting, block.shape, cfg.grafting_beta2, cfg.grafting_epsilon);
    if (cfg.beta1 > 0.0) s.filtered = Tensor(block.shape);
    if (cfg.momentum > 0.0) s.momentum = Tensor(block.shape);
    return s;
}

ParamSlot make_param_slot(const Shape& shape, const ShampooConfig& cfg) {
    ParamSlot p;
    p.shape = shape;
    p.plan = plan_parameter(shape, cfg.max_preconditioner_dim, cfg.large_dim_method, cfg.use_merge_dims);
    for (const Block& b : p.plan.blocks) p.blocks.push_back(make_block_slot(b, p.plan.kind, cfg));
    return p;
}

namespace {

void axpy(Tensor& y, double a, const Tensor& x) {
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] += a * x[i];
}

}  // namespace

Tensor compute_block_direction(BlockSlot& slot, const Tensor& g_raw, const Tensor& w, std::int64_t t,
                               const ShampooConfig& cfg) {
    const double lambda = cfg.weight_decay;
    Tensor g = g_raw;
    if (lambda > 0.0 && !cfg.use_decoupled_weight_decay) axpy(g, lambda, w);

    switch (slot.kind) {
        case PreconditionerKind::Shampoo: update_factors(slot.shampoo, g, cfg.precision); break;
        case PreconditionerKind::AdaGradFallback:
        case PreconditionerKind::DiagonalShampoo: update_diagonal(slot.diagonal, g); break;
        case PreconditionerKind::GraftOnly: break;
    }
    update_graft_state(slot.graft, g);

    const bool preconditioning = t >= cfg.start_preconditioning_step;
    if (slot.kind == PreconditionerKind::Shampoo && preconditioning) {
        refresh_inverses(slot.shampoo, t, {cfg.precondition_frequency, cfg.start_preconditioning_step},
                         cfg.root_config());
    }

    Tensor g_hat = g;
    if (cfg.beta1 > 0.0) {
        for (std::size_t i = 0; i < g.numel(); ++i) {
            slot.filtered[i] = cfg.beta1 * slot.filtered[i] + (1.0 - cfg.beta1) * g[i];
        }
        const double divisor = cfg.use_bias_correction ? 1.0 - std::pow(cfg.beta1, static_cast<double>(t + 1)) : 1.0;
        for (std::size_t i = 0; i < g.numel(); ++i) g_hat[i] = slot.filtered[i] / divisor;
    }

    const Tensor p_graft = graft_direction(slot.graft, g_hat, t, cfg.use_bias_correction);
    Tensor p;
    if (!preconditioning || slot.kind == PreconditionerKind::GraftOnly) {
        p = p_graft;
    } else {
        Tensor p_shampoo = slot.kind == PreconditionerKind::Shampoo
                               ? precondition(slot.shampoo, g_hat)
                               : precondition(slot.diagonal, g_hat, t, cfg.root_config());
        if (cfg.grafting == GraftingKind::None) {
            p = std::move(p_shampoo);
        } else {
            // rescale_to_graft yields the descent direction; P here is gradient-like.
            p = rescale_to_graft(p_shampoo, p_graft);
            for (double& x : p.data()) x = -x;
        }
    }

    if (lambda > 0.0 && cfg.use_decoupled_weight_decay) axpy(p, lambda, w);

    if (cfg.momentum > 0.0) {
        for (std::size_t i = 0; i < p.numel(); ++i) slot.momentum[i] = cfg.momentum * slot.momentum[i] + p[i];
        if (cfg.use_nesterov) {
            axpy(p, cfg.momentum, slot.momentum);
        } else {
            p = slot.momentum;
        }
    }
    return p;
}

void check_gradients(std::span<const Shape> shapes, std::span<const Tensor> weights, std::span<const Tensor> grads) {
    if (weights.size() != shapes.size() || grads.size() != shapes.size()) {
        throw Error(ErrorCode::ShapeMismatch, "expected " + std::to_string(shapes.size()) + " parameters");
    }
    for (std::size_t i = 0; i < shapes.size(); ++i) {
        if (weights[i].shape() != shapes[i] || grads[i].shape() != shapes[i]) {
            throw Error(ErrorCode::ShapeMismatch, "parameter " + std::to_string(i) + " expected shape " +
                                                      shape_to_string(shapes[i]));
        }
        if (!all_finite(grads[i].data())) {
            throw Error(ErrorCode::NonFiniteGradient, "non-finite gradient for parameter " + std::to_string(i));
        }
    }
}

ShampooOptimizer::ShampooOptimizer(const std::vector<Shape>& shapes, ShampooConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (const Shape& s : shapes) params_.push_back(make_param_slot(s, cfg_));
}

std::vector<Shape> ShampooOptimizer::shapes() const {
    std::vector<Shape> out;
    for (const ParamSlot& p : params_) out.push_back(p.shape);
    return out;
}

void ShampooOptimizer::step(std::vector<Tensor>& weights, const std::vector<Tensor>& grads) {
    const std::vector<Shape> expected = shapes();
    check_gradients(expected, weights, grads);
    const double alpha = lr_at(cfg_.lr, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ParamSlot& param = params_[i];
        const Tensor g = grads[i].reshaped(param.plan.merged_shape);
        Tensor w = weights[i].reshaped(param.plan.merged_shape);
        std::vector<Tensor> directions;
        directions.reserve(param.blocks.size());
        for (BlockSlot& slot : param.blocks) {
            directions.push_back(
                compute_block_direction(slot, extract_block(g, slot.block), extract_block(w, slot.block), t_, cfg_));
        }
        for (std::size_t b = 0; b < param.blocks.size(); ++b) {
            Tensor wb = extract_block(w, param.blocks[b].block);
            axpy(wb, -alpha, directions[b]);
            scatter_block(w, param.blocks[b].block, wb);
        }
        weights[i] = w.reshaped(param.shape);
    }
    ++t_;
}

}  // namespace shampoo
