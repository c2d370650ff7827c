#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "shampoo/oracles.hpp"
#include "shampoo/optim.hpp"
#include "shampoo/train.hpp"

namespace shampoo {

std::string_view to_string(LargeDimMethod m);
std::string_view to_string(RootSolver s);
std::string_view to_string(Precision p);
LargeDimMethod large_dim_method_from_string(std::string_view name);
RootSolver root_solver_from_string(std::string_view name);
Precision precision_from_string(std::string_view name);

struct RunConfig {
    // Library defaults except merging: a merged 64×32 layer becomes one
    // 2048-dim factor, which the Jacobi eigensolver cannot refresh quickly.
    ShampooConfig optimizer = [] {
        ShampooConfig c;
        c.use_merge_dims = false;
        return c;
    }();

    std::string dataset = "synthetic";  // synthetic | csv
    SyntheticSpec synthetic;
    std::size_t val_count = 500;
    std::string csv_path;
    std::string val_csv_path;
    std::string label_column = "label";
    bool normalize = false;

    std::vector<std::size_t> widths{32, 64, 10};
    Activation activation = Activation::ReLU;
    LossKind loss = LossKind::SoftmaxCrossEntropy;

    std::uint64_t seed = 0;
    std::int64_t steps = 100;
    std::size_t batch_size = 64;
    std::size_t num_trainers = 1;
    std::int64_t num_trainers_per_group = -1;  // −1: all trainers in one group

    std::string metrics_path = "metrics.csv";
    std::string checkpoint_path = "checkpoint.json";
    std::string resume_from;

    std::size_t group_size() const;
    /// Throws ConfigInvalid.
    void validate() const;
};

/// Every recognized key, in the order they are written out.
const std::vector<std::string>& run_config_keys();

/// Throws ConfigInvalid for unknown keys or unparsable values.
void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value);
std::string get_config_value(const RunConfig& cfg, std::string_view key);

/// Flat "key = value" text; blank lines and lines starting with '#' are
/// skipped. If any line starts with "#!" only those lines are read, so a
/// metrics file doubles as the config of the run that wrote it.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);
std::string run_config_text(const RunConfig& cfg, std::string_view prefix = "");

/// Applies SHAMPOO_SEED from the environment, if set.
void apply_env_overrides(RunConfig& cfg);

// Checkpoints

struct Checkpoint {
    std::int64_t step = 0;
    std::vector<Tensor> weights;
    std::vector<ParamSlot> state;
    std::map<std::string, std::string> config;
};

inline constexpr int kCheckpointFormatVersion = 1;

/// 16 hex digits per scalar, least significant byte first.
std::string encode_doubles(std::span<const double> values);
std::vector<double> decode_doubles(std::string_view hex);

nlohmann::json checkpoint_to_json(const Checkpoint& ckpt);

/// layout supplies the block structure and the config-derived fields; every
/// stored array must match it. Unknown or missing keys throw CheckpointInvalid.
Checkpoint checkpoint_from_json(const nlohmann::json& j, const std::vector<ParamSlot>& layout);

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path, const std::vector<ParamSlot>& layout);

// Commands

struct RunData {
    Dataset train;
    Dataset validation;
};

RunData load_run_data(const RunConfig& cfg);
Mlp initial_model(const RunConfig& cfg);
TrainOptions train_options(const RunConfig& cfg);

void write_metrics(std::ostream& out, const RunConfig& cfg, const std::vector<MetricsRow>& rows);

/// Trains to cfg.steps total steps (resuming if cfg.resume_from is set),
/// writes the metrics file and a final checkpoint, and returns the rows.
std::vector<MetricsRow> cmd_train(const RunConfig& cfg);

nlohmann::json plan_json(const AssignmentPlan& plan);
nlohmann::json cmd_plan(const RunConfig& cfg);
/// Memory of one parameter under each large-dimension method.
nlohmann::json memory_json(const Shape& shape, std::size_t max_dim, bool merge);

struct VerifyOptions {
    bool wrong_exponent = false;  // forces p = 1 in the full-matrix check
};

struct NamedCheck {
    std::string name;
    CheckResult result;
};

std::vector<NamedCheck> cmd_verify(const VerifyOptions& options = {});
nlohmann::json verify_json(const std::vector<NamedCheck>& checks);

/// Human-readable summary of a checkpoint file.
std::string inspect_checkpoint(const nlohmann::json& j);

}  // namespace shampoo
