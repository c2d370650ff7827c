#include "shampoo/graft.hpp"

#include <cmath>

#include "shampoo/error.hpp"

namespace shampoo {

namespace {

bool is_normalized(GraftingKind k) {
    return k == GraftingKind::NormalizedAdaGrad || k == GraftingKind::NormalizedRMSProp ||
           k == GraftingKind::NormalizedAdam;
}

bool is_adagrad(GraftingKind k) { return k == GraftingKind::AdaGrad || k == GraftingKind::NormalizedAdaGrad; }

bool is_adam(GraftingKind k) { return k == GraftingKind::Adam || k == GraftingKind::NormalizedAdam; }

bool has_accumulator(GraftingKind k) { return k != GraftingKind::SGD && k != GraftingKind::None; }

}  // namespace

std::string_view to_string(GraftingKind kind) {
    switch (kind) {
        case GraftingKind::None: return "none";
        case GraftingKind::SGD: return "sgd";
        case GraftingKind::AdaGrad: return "adagrad";
        case GraftingKind::RMSProp: return "rmsprop";
        case GraftingKind::Adam: return "adam";
        case GraftingKind::NormalizedAdaGrad: return "normalized_adagrad";
        case GraftingKind::NormalizedRMSProp: return "normalized_rmsprop";
        case GraftingKind::NormalizedAdam: return "normalized_adam";
    }
    return "unknown";
}

GraftingKind grafting_kind_from_string(std::string_view name) {
    for (GraftingKind k : {GraftingKind::None, GraftingKind::SGD, GraftingKind::AdaGrad, GraftingKind::RMSProp,
                           GraftingKind::Adam, GraftingKind::NormalizedAdaGrad, GraftingKind::NormalizedRMSProp,
                           GraftingKind::NormalizedAdam}) {
        if (to_string(k) == name) return k;
    }
    throw Error(ErrorCode::UnknownKind, "unknown grafting kind '" + std::string(name) + "'");
}

GraftState make_graft_state(GraftingKind kind, const Shape& shape, double beta2, double epsilon) {
    if (!(beta2 > 0.0 && beta2 <= 1.0)) throw Error(ErrorCode::InvalidArgument, "grafting beta2 must be in (0, 1]");
    if (epsilon < 0.0) throw Error(ErrorCode::InvalidArgument, "grafting epsilon must be >= 0");
    GraftState s;
    s.kind = kind;
    if (has_accumulator(kind)) s.accumulator = Tensor(shape);
    s.beta2 = beta2;
    s.epsilon = epsilon;
    return s;
}

void update_graft_state(GraftState& state, const Tensor& g) {
    if (!has_accumulator(state.kind)) {
        ++state.step;
        return;
    }
    if (g.shape() != state.accumulator.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "gradient " + shape_to_string(g.shape()) +
                                                  " does not match grafting state " +
                                                  shape_to_string(state.accumulator.shape()));
    }
    double scale = 1.0;
    if (is_normalized(state.kind)) {
        const double norm = frobenius_norm(g.data());
        if (norm > 0.0) scale = 1.0 / norm;
    }
    auto acc = state.accumulator.data();
    for (std::size_t i = 0; i < acc.size(); ++i) {
        const double x = g[i] * scale;
        acc[i] = is_adagrad(state.kind) ? acc[i] + x * x : state.beta2 * acc[i] + (1.0 - state.beta2) * x * x;
    }
    ++state.step;
}

Tensor graft_direction(const GraftState& state, const Tensor& g, std::int64_t t, bool bias_correction) {
    if (!has_accumulator(state.kind)) return g;
    if (g.shape() != state.accumulator.shape()) throw Error(ErrorCode::ShapeMismatch, "grafting shape mismatch");
    double divisor = 1.0;
    if (is_adam(state.kind) && bias_correction && state.beta2 < 1.0) {
        divisor = 1.0 - std::pow(state.beta2, static_cast<double>(t + 1));
    }
    Tensor out(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) {
        out[i] = g[i] / (std::sqrt(state.accumulator[i] / divisor) + state.epsilon);
    }
    return out;
}

Tensor rescale_to_graft(const Tensor& p_shampoo, const Tensor& p_graft) {
    if (p_shampoo.shape() != p_graft.shape()) throw Error(ErrorCode::ShapeMismatch, "rescale shape mismatch");
    const double shampoo_norm = frobenius_norm(p_shampoo.data());
    Tensor out(p_shampoo.shape());
    if (shampoo_norm == 0.0) {
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] = -p_graft[i];
        return out;
    }
    const double ratio = frobenius_norm(p_graft.data()) / shampoo_norm;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = -ratio * p_shampoo[i];
    return out;
}

}  // namespace shampoo
