#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "shampoo/dist.hpp"
#include "shampoo/optim.hpp"
#include "shampoo/tensor.hpp"

namespace shampoo {

enum class Activation { ReLU, Identity };
enum class LossKind { SoftmaxCrossEntropy, Mse };

std::string_view to_string(Activation a);
std::string_view to_string(LossKind k);
Activation activation_from_string(std::string_view name);
LossKind loss_kind_from_string(std::string_view name);

/// Bias-free MLP. weights[i] has shape {widths[i+1], widths[i]}; the
/// activation follows every layer except the last, whose output is the logits.
struct Mlp {
    std::vector<std::size_t> widths;
    Activation activation = Activation::ReLU;
    std::vector<Tensor> weights;

    std::size_t layers() const { return weights.size(); }
    std::vector<Shape> shapes() const;
};

/// Uniform(−s, s) with s = sqrt(6 / (fan_in + fan_out)) per layer.
Mlp make_mlp(const std::vector<std::size_t>& widths, Activation activation, std::uint64_t seed);

struct ForwardCache {
    std::vector<Matrix> inputs;  // a^(0)..a^(n−1), each B × d_i
    std::vector<Matrix> pre;     // z^(1)..z^(n), each B × d_i
};

/// X is B × d_0. Returns B × d_n logits; fills cache when given.
Matrix forward(const Mlp& model, const Matrix& x, ForwardCache* cache = nullptr);

/// dlogits already carries the 1/B factor of the batch mean, so the result is
/// the mean of the per-sample gradients δ^(i) a^(i−1)ᵀ.
std::vector<Tensor> backward(const Mlp& model, const ForwardCache& cache, const Matrix& dlogits);

struct Batch {
    Matrix features;                  // B × d_0
    std::vector<std::size_t> labels;  // class indices
    std::uint64_t seed = 0;
    std::int64_t step = 0;
};

struct LossValue {
    double value = 0.0;
    Matrix grad;  // d loss / d logits
};

/// Cross entropy uses the class labels; mse regresses onto their one-hot
/// encoding with loss (1/B) Σ ½‖z − y‖². Both average over the batch.
LossValue compute_loss(LossKind kind, const Matrix& logits, const std::vector<std::size_t>& labels);

double accuracy(const Matrix& logits, const std::vector<std::size_t>& labels);

struct Dataset {
    Matrix features;
    std::vector<std::size_t> labels;
    std::size_t classes = 0;

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return features.cols(); }
};

struct SyntheticSpec {
    std::uint64_t seed = 0;
    std::size_t classes = 10;
    std::size_t dim = 32;
    std::size_t count = 2000;
    double separation = 1.0;  // std of the class means
    double noise = 1.0;       // std around each mean
};

/// Gaussian blobs with labels assigned round-robin. Class means come from
/// N(0, separation²) seeded by spec.seed; samples are mean + N(0, noise²)
/// seeded by sample_seed, so train and validation sets share their classes.
Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t sample_seed);

/// Header row, numeric columns; the named column holds non-negative integer
/// class labels. Throws IoError or InvalidArgument.
Dataset load_csv(const std::filesystem::path& path, const std::string& label_column);

struct Normalization {
    std::vector<double> mean;
    std::vector<double> stddev;
};

Normalization fit_normalization(const Dataset& data);
void apply_normalization(Dataset& data, const Normalization& norm);

/// Batch for a given step, sampled with replacement; a pure function of
/// (seed, step).
Batch sample_batch(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::int64_t step);

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
};

Evaluation evaluate(const Mlp& model, const Dataset& data, LossKind loss);

struct MetricsRow {
    std::int64_t step = 0;
    double loss = 0.0;      // training batch, before the update
    double val_loss = 0.0;  // validation set, after the update
    double accuracy = 0.0;  // validation set, after the update
    double lr = 0.0;
    double step_ms = 0.0;
    std::size_t gathered_bytes = 0;

    /// Equality on everything except the wall-clock time.
    bool same_values(const MetricsRow& other, double tol = 0.0) const;
};

struct TrainOptions {
    LossKind loss = LossKind::SoftmaxCrossEntropy;
    std::size_t batch_size = 64;
    std::uint64_t batch_seed = 0;
    std::size_t world_size = 1;
    std::size_t group_size = 1;
};

class Trainer {
public:
    Trainer(Mlp model, const ShampooConfig& cfg, const TrainOptions& options, const Dataset& train,
            const Dataset& validation);

    /// Runs steps optimizer steps starting from the current step count.
    std::vector<MetricsRow> run(std::int64_t steps);
    MetricsRow step();

    const Mlp& model() const { return model_; }
    const DistributedShampoo& optimizer() const { return opt_; }
    std::int64_t step_count() const { return opt_.step_count(); }

    /// Restores weights and optimizer state, e.g. from a checkpoint.
    void restore(const std::vector<Tensor>& weights, const std::vector<ParamSlot>& state, std::int64_t t);

private:
    Mlp model_;
    TrainOptions options_;
    const Dataset& train_;
    const Dataset& validation_;
    DistributedShampoo opt_;
};

std::vector<MetricsRow> run_training(const Dataset& train, const Dataset& validation, Mlp& model,
                                     const ShampooConfig& cfg, const TrainOptions& options, std::int64_t steps);

}  // namespace shampoo
