#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include "shampoo/cli.hpp"
#include "shampoo/error.hpp"

using namespace shampoo;

namespace {

std::string dashed(std::string key) {
    std::replace(key.begin(), key.end(), '_', '-');
    return "--" + key;
}

struct ConfigFlags {
    std::string path;
    std::map<std::string, std::string> values;

    void attach(CLI::App* app) {
        app->add_option("-c,--config", path, "flat key = value config file (a metrics file also works)");
        for (const std::string& key : run_config_keys()) app->add_option(dashed(key), values[key]);
    }

    RunConfig resolve(CLI::App* app) const {
        RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
        apply_env_overrides(cfg);
        for (const auto& [key, value] : values) {
            if (app->count(dashed(key))) set_config_value(cfg, key, value);
        }
        return cfg;
    }
};

std::vector<std::size_t> parse_list(const std::string& s) {
    std::vector<std::size_t> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t end = std::min(s.find(',', start), s.size());
        out.push_back(std::stoul(s.substr(start, end - start)));
        start = end + 1;
    }
    return out;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Distributed Shampoo optimizer on a simulated data-parallel MLP"};
    app.require_subcommand(1);

    CLI::App* train = app.add_subcommand("train", "train an MLP and write metrics and a checkpoint");
    ConfigFlags train_flags;
    train_flags.attach(train);

    CLI::App* plan = app.add_subcommand("plan", "print the block assignment and memory accounting as JSON");
    ConfigFlags plan_flags;
    plan_flags.attach(plan);
    std::string block_counts, param_shape;
    plan->add_option("--block-counts", block_counts, "plan raw block sizes, e.g. 6,5,4,3,2");
    plan->add_option("--param-shape", param_shape, "memory of one parameter per large-dim method, e.g. 4096,4096");

    CLI::App* verify = app.add_subcommand("verify", "run the equivalence and numerics checks");
    bool as_json = false, wrong_exponent = false;
    verify->add_flag("--json", as_json, "machine-readable report");
    verify->add_flag("--wrong-exponent", wrong_exponent, "inject p = 1 into the full-matrix check");

    CLI::App* inspect = app.add_subcommand("inspect", "summarize a checkpoint");
    std::string checkpoint;
    inspect->add_option("checkpoint", checkpoint)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) {
            const RunConfig cfg = train_flags.resolve(train);
            const auto rows = cmd_train(cfg);
            if (!rows.empty()) {
                const MetricsRow& last = rows.back();
                std::printf("step %lld loss %.6f val_loss %.6f accuracy %.4f\n", static_cast<long long>(last.step),
                            last.loss, last.val_loss, last.accuracy);
            }
            return 0;
        }
        if (plan->parsed()) {
            const RunConfig cfg = plan_flags.resolve(plan);
            nlohmann::json out;
            if (!block_counts.empty()) {
                cfg.validate();
                out = plan_json(greedy_assign(parse_list(block_counts), cfg.num_trainers, cfg.group_size()));
            } else if (!param_shape.empty()) {
                out = memory_json(parse_list(param_shape), cfg.optimizer.max_preconditioner_dim,
                                  cfg.optimizer.use_merge_dims);
            } else {
                out = cmd_plan(cfg);
            }
            std::cout << out.dump(2) << "\n";
            return 0;
        }
        if (verify->parsed()) {
            const auto checks = cmd_verify({wrong_exponent});
            const nlohmann::json report = verify_json(checks);
            if (as_json) {
                std::cout << report.dump(2) << "\n";
            } else {
                for (const NamedCheck& c : checks) {
                    std::printf("%-28s %s  deviation %.3e  tolerance %.1e\n", c.name.c_str(),
                                c.result.passed() ? "PASS" : "FAIL", c.result.deviation, c.result.tolerance);
                }
            }
            return report["passed"].get<bool>() ? 0 : 1;
        }
        if (inspect->parsed()) {
            std::ifstream in(checkpoint);
            if (!in) throw Error(ErrorCode::IoError, "cannot open " + checkpoint);
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(in);
            } catch (const nlohmann::json::exception& e) {
                throw Error(ErrorCode::CheckpointInvalid, e.what());
            }
            std::cout << inspect_checkpoint(j);
            return 0;
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
