#pragma once

#include <cstdint>
#include <string_view>

#include "shampoo/tensor.hpp"

namespace shampoo {

/// None disables grafting: the Shampoo direction is used at its own scale.
enum class GraftingKind { None, SGD, AdaGrad, RMSProp, Adam, NormalizedAdaGrad, NormalizedRMSProp, NormalizedAdam };

std::string_view to_string(GraftingKind kind);
GraftingKind grafting_kind_from_string(std::string_view name);

struct GraftState {
    GraftingKind kind = GraftingKind::SGD;
    Tensor accumulator;  // empty for SGD and None
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t step = 0;
};

GraftState make_graft_state(GraftingKind kind, const Shape& shape, double beta2, double epsilon);

/// Accumulates the squared raw gradient (normalized first for the
/// Normalized kinds; a zero gradient is left as is).
void update_graft_state(GraftState& state, const Tensor& g);

/// G / (sqrt(Ã) + ε) for the adaptive kinds, G itself for SGD and None.
/// Adam kinds divide Ã by 1 − β2^(t+1) first when bias_correction is set.
Tensor graft_direction(const GraftState& state, const Tensor& g, std::int64_t t, bool bias_correction);

/// −‖P_graft‖_F · P_shampoo / ‖P_shampoo‖_F, or −P_graft when P_shampoo is 0.
Tensor rescale_to_graft(const Tensor& p_shampoo, const Tensor& p_graft);

}  // namespace shampoo
