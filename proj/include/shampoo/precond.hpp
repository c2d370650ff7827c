#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "shampoo/matfun.hpp"
#include "shampoo/tensor.hpp"

namespace shampoo {

enum class LargeDimMethod { Blocking, AdaGradFallback, DiagonalShampoo };

/// What actually preconditions a block once the large-dim method has been
/// resolved against the parameter's shape.
enum class PreconditionerKind { Shampoo, AdaGradFallback, DiagonalShampoo, GraftOnly };

struct Block {
    std::vector<std::size_t> offsets;  // start index per merged dimension
    Shape shape;

    std::size_t numel() const { return shampoo::numel(shape); }
    bool operator==(const Block&) const = default;
};

struct BlockPlan {
    Shape original_shape;
    Shape merged_shape;
    std::size_t block_size = 0;
    std::vector<Block> blocks;
    LargeDimMethod large_dim_method = LargeDimMethod::Blocking;
    PreconditionerKind kind = PreconditionerKind::Shampoo;
};

/// Greedy left-to-right folding of consecutive dimensions while the running
/// product stays within max_dim. Unit dimensions are always absorbed.
Shape merge_dims(const Shape& shape, std::size_t max_dim);

/// Ceiling partition of each dimension into ranges of size b (last range
/// shorter), blocks enumerated row-major. Method is recorded as Blocking.
BlockPlan block_partition(const Shape& merged, std::size_t block_size);

PreconditionerKind select_large_dim_method(const Shape& merged, std::size_t block_size, LargeDimMethod configured);

/// merge -> select -> partition. Fallback methods keep the merged tensor as
/// a single block; scalar parameters get PreconditionerKind::GraftOnly.
BlockPlan plan_parameter(const Shape& original, std::size_t block_size, LargeDimMethod method,
                         bool merge = true);

/// Preconditioner memory in scalars following the large-dim cost table:
/// factors plus root inverses for Shampoo, one accumulator per element for
/// the AdaGrad fallback, one accumulator per index for diagonal Shampoo.
std::size_t preconditioner_memory(const BlockPlan& plan);
std::size_t block_memory(const Block& block, PreconditionerKind kind);

Tensor extract_block(const Tensor& merged, const Block& block);
void scatter_block(Tensor& merged, const Block& block, const Tensor& values);

/// Inverse-root settings shared by every factor of a parameter.
struct RootConfig {
    RootSolver solver = RootSolver::Eigh;
    double epsilon = 1e-12;
    int exponent_override = 0;  // 0 selects 2 * order
    double exponent_multiplier = 1.0;
    double tolerance = 1e-6;
    Precision precision = Precision::Double;
};

/// p used for an order-ω block: exponent_override when non-zero, else 2ω.
int root_for_order(const RootConfig& cfg, std::size_t order);

struct ShampooBlockState {
    Shape block_shape;
    std::vector<Matrix> factors;
    std::vector<Matrix> inv_factors;  // empty until the first refresh
    double beta2 = 1.0;
    double epsilon = 1e-12;
    std::int64_t step = 0;
    std::int64_t last_inverse_step = -1;
    bool bias_corrected = false;
    GuardCounters guard;

    bool preconditioned() const { return !inv_factors.empty(); }
};

ShampooBlockState make_shampoo_state(const Shape& block_shape, double beta2, double epsilon, bool bias_correction);

/// Sum (beta2 = 1) or EMA accumulation of the mode-k Gram of g into factor k.
/// In single precision the stored factors are rounded to float.
void update_factors(ShampooBlockState& state, const Tensor& g, Precision precision = Precision::Double);

struct RefreshSchedule {
    std::int64_t frequency = 1;
    std::int64_t start_step = 0;
};

/// Recomputes every root inverse when t >= start and t % frequency == 0, and
/// also at the first t >= start that finds no inverse yet. Returns whether a
/// refresh happened.
bool refresh_inverses(ShampooBlockState& state, std::int64_t t, const RefreshSchedule& schedule,
                      const RootConfig& cfg);

/// Applies inv_factor k along mode k for every k. Throws NotYetPreconditioned
/// before the first refresh.
Tensor precondition(const ShampooBlockState& state, const Tensor& g);

struct DiagonalState {
    PreconditionerKind kind = PreconditionerKind::AdaGradFallback;
    Shape block_shape;
    std::vector<double> accumulator;              // AdaGradFallback, one per element
    std::vector<std::vector<double>> mode_diagonals;  // DiagonalShampoo, one per mode
    double beta2 = 1.0;
    double epsilon = 1e-12;
    std::int64_t step = 0;
    bool bias_corrected = false;
};

DiagonalState make_diagonal_state(PreconditionerKind kind, const Shape& block_shape, double beta2, double epsilon,
                                  bool bias_correction);

void update_diagonal(DiagonalState& state, const Tensor& g);

/// AdaGradFallback: g / (sqrt(acc_hat) + epsilon).
/// DiagonalShampoo: per-mode scaling by (diag_hat + epsilon)^(exponent_k);
/// the exponent per mode defaults to −η/p from cfg.
Tensor precondition(const DiagonalState& state, const Tensor& g, std::int64_t t, const RootConfig& cfg);

/// DiagonalShampoo with explicit per-mode exponents (0 leaves a mode
/// untouched). Used by the row-wise AdaGrad relation.
Tensor precondition_diagonal(const DiagonalState& state, const Tensor& g, std::int64_t t,
                             std::span<const double> exponents);

}  // namespace shampoo
