#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <ostream>

#include "shampoo/cli.hpp"
#include "shampoo/dist.hpp"
#include "shampoo/error.hpp"
#include "shampoo/precond.hpp"

namespace shampoo {

using nlohmann::json;

namespace {

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::map<std::string, std::string> config_map(const RunConfig& cfg) {
    std::map<std::string, std::string> out;
    for (const std::string& k : run_config_keys()) out[k] = get_config_value(cfg, k);
    return out;
}

// Keys that may differ between a run and the one resuming it.
bool resumable_key(const std::string& k) {
    return k == "steps" || k == "resume_from" || k == "metrics_path" || k == "checkpoint_path";
}

}  // namespace

RunData load_run_data(const RunConfig& cfg) {
    RunData data;
    if (cfg.dataset == "synthetic") {
        SyntheticSpec spec = cfg.synthetic;
        spec.seed = cfg.seed;
        data.train = make_synthetic(spec, cfg.seed + 1);
        if (cfg.val_count > 0) {
            spec.count = cfg.val_count;
            data.validation = make_synthetic(spec, cfg.seed + 2);
        }
    } else {
        data.train = load_csv(cfg.csv_path, cfg.label_column);
        if (!cfg.val_csv_path.empty()) data.validation = load_csv(cfg.val_csv_path, cfg.label_column);
    }
    if (cfg.normalize) {
        const Normalization norm = fit_normalization(data.train);
        apply_normalization(data.train, norm);
        if (data.validation.size()) apply_normalization(data.validation, norm);
    }
    if (data.train.dim() != cfg.widths.front()) {
        throw Error(ErrorCode::ConfigInvalid, "data has " + std::to_string(data.train.dim()) +
                                                   " features but widths starts with " +
                                                   std::to_string(cfg.widths.front()));
    }
    const std::size_t classes = std::max(data.train.classes, data.validation.classes);
    if (cfg.loss == LossKind::SoftmaxCrossEntropy && classes > cfg.widths.back()) {
        throw Error(ErrorCode::ConfigInvalid, "data has " + std::to_string(classes) + " classes but the model outputs " +
                                                   std::to_string(cfg.widths.back()));
    }
    return data;
}

Mlp initial_model(const RunConfig& cfg) { return make_mlp(cfg.widths, cfg.activation, cfg.seed + 3); }

TrainOptions train_options(const RunConfig& cfg) {
    TrainOptions opts;
    opts.loss = cfg.loss;
    opts.batch_size = cfg.batch_size;
    opts.batch_seed = cfg.seed + 4;
    opts.world_size = cfg.num_trainers;
    opts.group_size = cfg.group_size();
    return opts;
}

void write_metrics(std::ostream& out, const RunConfig& cfg, const std::vector<MetricsRow>& rows) {
    out << run_config_text(cfg, "#! ");
    out << "step,loss,val_loss,accuracy,lr,step_ms,gathered_bytes\n";
    for (const MetricsRow& r : rows) {
        char ms[32];
        std::snprintf(ms, sizeof ms, "%.3f", r.step_ms);
        out << r.step << ',' << fmt(r.loss) << ',' << fmt(r.val_loss) << ',' << fmt(r.accuracy) << ',' << fmt(r.lr)
            << ',' << ms << ',' << r.gathered_bytes << '\n';
    }
}

std::vector<MetricsRow> cmd_train(const RunConfig& cfg) {
    cfg.validate();
    const RunData data = load_run_data(cfg);
    Trainer trainer(initial_model(cfg), cfg.optimizer, train_options(cfg), data.train, data.validation);

    if (!cfg.resume_from.empty()) {
        const Checkpoint ckpt = load_checkpoint(cfg.resume_from, trainer.optimizer().export_state());
        const auto current = config_map(cfg);
        for (const auto& [k, v] : ckpt.config) {
            const auto it = current.find(k);
            if (it == current.end()) throw Error(ErrorCode::CheckpointInvalid, "checkpoint has unknown config key " + k);
            if (!resumable_key(k) && it->second != v) {
                throw Error(ErrorCode::ConfigInvalid, "config key " + k + " is " + it->second +
                                                           " but the checkpoint was written with " + v);
            }
        }
        if (ckpt.step > cfg.steps) {
            throw Error(ErrorCode::ConfigInvalid, "checkpoint is at step " + std::to_string(ckpt.step) +
                                                       ", beyond steps = " + std::to_string(cfg.steps));
        }
        trainer.restore(ckpt.weights, ckpt.state, ckpt.step);
    }

    const std::vector<MetricsRow> rows = trainer.run(cfg.steps - trainer.step_count());

    if (!cfg.metrics_path.empty()) {
        std::ofstream out(cfg.metrics_path, std::ios::binary);
        if (!out) throw Error(ErrorCode::IoError, "cannot write " + cfg.metrics_path);
        write_metrics(out, cfg, rows);
        if (!out) throw Error(ErrorCode::IoError, "failed writing " + cfg.metrics_path);
    }
    if (!cfg.checkpoint_path.empty()) {
        Checkpoint ckpt;
        ckpt.step = trainer.step_count();
        ckpt.weights = trainer.model().weights;
        ckpt.state = trainer.optimizer().export_state();
        ckpt.config = config_map(cfg);
        save_checkpoint(cfg.checkpoint_path, ckpt);
    }
    return rows;
}

json plan_json(const AssignmentPlan& plan) {
    json regions = json::array();
    for (const BufferRegion& r : plan.layout) {
        regions.push_back({{"owner", r.owner}, {"offset", r.offset}, {"length", r.length}});
    }
    return json{{"world_size", plan.world_size},
                {"group_size", plan.group_size},
                {"block_counts", plan.block_counts},
                {"assignments", plan.assignments},
                {"counters", plan.counters},
                {"max_payload_bytes", plan.max_payload_bytes},
                {"buffer_bytes", buffer_size(plan)},
                {"layout", regions}};
}

json memory_json(const Shape& shape, std::size_t max_dim, bool merge) {
    json out{{"shape", shape}};
    for (LargeDimMethod m : {LargeDimMethod::Blocking, LargeDimMethod::AdaGradFallback, LargeDimMethod::DiagonalShampoo}) {
        const BlockPlan plan = plan_parameter(shape, max_dim, m, merge);
        out["merged_shape"] = plan.merged_shape;
        out[std::string(to_string(m))] = preconditioner_memory(plan);
    }
    return out;
}

json cmd_plan(const RunConfig& cfg) {
    cfg.validate();
    const Mlp model = initial_model(cfg);
    std::vector<ParamSlot> params;
    for (const Shape& s : model.shapes()) params.push_back(make_param_slot(s, cfg.optimizer));
    std::vector<std::size_t> counts;
    for (const BlockRef& ref : enumerate_blocks(params)) {
        counts.push_back(params[ref.param].blocks[ref.block].block.numel());
    }
    const AssignmentPlan plan = greedy_assign(counts, cfg.num_trainers, cfg.group_size());
    const CommMeter meter = comm_meter(plan, params);

    json out = plan_json(plan);
    out["meter"] = {{"buffer_bytes", meter.buffer_bytes},
                    {"payload_bytes_per_rank", meter.payload_bytes_per_rank},
                    {"groups", meter.groups},
                    {"gathered_bytes_per_step", meter.gathered_bytes_per_step},
                    {"state_scalars", meter.state_scalars}};
    json per_param = json::array();
    for (const ParamSlot& p : params) {
        json m = memory_json(p.shape, cfg.optimizer.max_preconditioner_dim, cfg.optimizer.use_merge_dims);
        m["blocks"] = p.blocks.size();
        m["configured"] = preconditioner_memory(p.plan);
        per_param.push_back(m);
    }
    out["parameters"] = per_param;
    return out;
}

std::vector<NamedCheck> cmd_verify(const VerifyOptions& options) {
    auto worst = [](CheckResult acc, const CheckResult& r) {
        acc.deviation = std::max(acc.deviation, r.deviation);
        acc.tolerance = r.tolerance;
        return acc;
    };
    CheckResult momentum{}, nesterov{}, rowwise{}, adafactor{};
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        momentum = worst(momentum, momentum_equivalence_check(200, 0.01, 0.9, false, seed));
        nesterov = worst(nesterov, momentum_equivalence_check(200, 0.01, 0.9, true, seed));
        rowwise = worst(rowwise, rowwise_equivalence_check(50, 4, 3, 0.1, 1e-3, RowWiseMapping::Corrected, seed));
        adafactor = worst(adafactor, adafactor_relation_check(50, 4, 3, 0.999, seed));
    }
    return {
        {"momentum_primal_averaging", momentum},
        {"nesterov_primal_averaging", nesterov},
        {"rowwise_adagrad", rowwise},
        {"adafactor_relation", adafactor},
        {"full_matrix_adagrad", full_matrix_check(10, 6, 1e-3, 7, options.wrong_exponent ? 1 : 0)},
        {"solver_agreement", solver_agreement_check(50, 1)},
    };
}

json verify_json(const std::vector<NamedCheck>& checks) {
    json list = json::array();
    bool all = true;
    for (const NamedCheck& c : checks) {
        list.push_back({{"name", c.name},
                        {"deviation", c.result.deviation},
                        {"tolerance", c.result.tolerance},
                        {"passed", c.result.passed()}});
        all = all && c.result.passed();
    }
    return json{{"checks", list}, {"passed", all}};
}

}  // namespace shampoo
