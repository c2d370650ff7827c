#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "shampoo/graft.hpp"
#include "shampoo/matfun.hpp"
#include "shampoo/precond.hpp"
#include "shampoo/tensor.hpp"

namespace shampoo {

struct LrSchedule {
    enum class Kind { Constant, WarmupCosine };

    Kind kind = Kind::Constant;
    double initial_lr = 0.1;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 0;  // only used by WarmupCosine

    static LrSchedule constant(double lr);
    static LrSchedule warmup_cosine(double lr, std::int64_t warmup, std::int64_t total);
};

/// Linear ramp with α_0 = lr / warmup reaching lr at t = warmup − 1, then
/// lr · ½(1 + cos(π (t − warmup) / (total − warmup))). Throws OutOfRange
/// outside [0, total).
double lr_at(const LrSchedule& schedule, std::int64_t t);

inline constexpr std::int64_t kNeverPrecondition = std::numeric_limits<std::int64_t>::max();

struct ShampooConfig {
    LrSchedule lr = LrSchedule::constant(0.1);
    double beta1 = 0.0;
    double beta2 = 0.999;
    double epsilon = 1e-12;
    double momentum = 0.9;
    bool use_nesterov = true;
    double weight_decay = 1e-4;
    bool use_decoupled_weight_decay = true;
    bool use_bias_correction = true;
    std::size_t max_preconditioner_dim = 2048;
    std::int64_t precondition_frequency = 50;
    std::int64_t start_preconditioning_step = 0;
    int exponent_override = 0;
    double exponent_multiplier = 1.0;
    GraftingKind grafting = GraftingKind::SGD;
    double grafting_epsilon = 1e-8;
    double grafting_beta2 = 0.999;
    LargeDimMethod large_dim_method = LargeDimMethod::Blocking;
    bool use_merge_dims = true;
    RootSolver solver = RootSolver::Eigh;
    double newton_tolerance = 1e-6;
    Precision precision = Precision::Double;

    /// Throws ConfigInvalid naming the first violated constraint.
    void validate() const;
    RootConfig root_config() const;
};

/// Optimizer state for one block of one parameter.
struct BlockSlot {
    Block block;
    PreconditionerKind kind = PreconditionerKind::Shampoo;
    ShampooBlockState shampoo;  // kind == Shampoo
    DiagonalState diagonal;     // kind == AdaGradFallback or DiagonalShampoo
    GraftState graft;
    Tensor filtered;  // empty unless beta1 > 0
    Tensor momentum;  // empty unless momentum > 0
};

struct ParamSlot {
    Shape shape;
    BlockPlan plan;
    std::vector<BlockSlot> blocks;
};

BlockSlot make_block_slot(const Block& block, PreconditionerKind kind, const ShampooConfig& cfg);
ParamSlot make_param_slot(const Shape& shape, const ShampooConfig& cfg);

/// One block's share of a step, up to and including momentum. Returns the
/// gradient-like direction P so that the caller applies W ← W − α_t P.
Tensor compute_block_direction(BlockSlot& slot, const Tensor& g, const Tensor& w, std::int64_t t,
                               const ShampooConfig& cfg);

/// Throws ShapeMismatch or NonFiniteGradient without touching any state.
void check_gradients(std::span<const Shape> shapes, std::span<const Tensor> weights, std::span<const Tensor> grads);

class ShampooOptimizer {
public:
    ShampooOptimizer(const std::vector<Shape>& shapes, ShampooConfig cfg);

    /// Runs one step at the internal counter t and advances it.
    void step(std::vector<Tensor>& weights, const std::vector<Tensor>& grads);

    std::int64_t step_count() const { return t_; }
    void set_step_count(std::int64_t t) { t_ = t; }
    const ShampooConfig& config() const { return cfg_; }
    std::vector<ParamSlot>& params() { return params_; }
    const std::vector<ParamSlot>& params() const { return params_; }
    std::vector<Shape> shapes() const;

private:
    ShampooConfig cfg_;
    std::vector<ParamSlot> params_;
    std::int64_t t_ = 0;
};

}  // namespace shampoo
