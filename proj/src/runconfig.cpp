#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "shampoo/cli.hpp"
#include "shampoo/error.hpp"

namespace shampoo {

std::string_view to_string(LargeDimMethod m) {
    switch (m) {
        case LargeDimMethod::Blocking: return "blocking";
        case LargeDimMethod::AdaGradFallback: return "adagrad";
        case LargeDimMethod::DiagonalShampoo: return "diagonal";
    }
    return "?";
}

std::string_view to_string(RootSolver s) { return s == RootSolver::Eigh ? "eigh" : "newton"; }
std::string_view to_string(Precision p) { return p == Precision::Double ? "double" : "float"; }

LargeDimMethod large_dim_method_from_string(std::string_view name) {
    if (name == "blocking") return LargeDimMethod::Blocking;
    if (name == "adagrad") return LargeDimMethod::AdaGradFallback;
    if (name == "diagonal") return LargeDimMethod::DiagonalShampoo;
    throw Error(ErrorCode::UnknownKind, "unknown large-dim method '" + std::string(name) + "'");
}

RootSolver root_solver_from_string(std::string_view name) {
    if (name == "eigh") return RootSolver::Eigh;
    if (name == "newton") return RootSolver::CoupledNewton;
    throw Error(ErrorCode::UnknownKind, "unknown solver '" + std::string(name) + "'");
}

Precision precision_from_string(std::string_view name) {
    if (name == "double") return Precision::Double;
    if (name == "float") return Precision::Single;
    throw Error(ErrorCode::UnknownKind, "unknown precision '" + std::string(name) + "'");
}

namespace {

[[noreturn]] void bad_value(std::string_view key, std::string_view value) {
    throw Error(ErrorCode::ConfigInvalid, "bad value '" + std::string(value) + "' for " + std::string(key));
}

template <class T>
T parse_number(std::string_view key, std::string_view s) {
    T v{};
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) bad_value(key, s);
    return v;
}

bool parse_bool(std::string_view key, std::string_view s) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    bad_value(key, s);
}

std::string fmt(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

template <class T>
std::string fmt_int(T v) {
    return std::to_string(v);
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

template <class F>
auto as_config_error(std::string_view key, std::string_view value, F&& f) {
    try {
        return f();
    } catch (const Error& e) {
        if (e.code() == ErrorCode::ConfigInvalid) throw;
        bad_value(key, value);
    }
}

struct KeySpec {
    std::string name;
    std::function<void(RunConfig&, std::string_view)> set;
    std::function<std::string(const RunConfig&)> get;
};

#define SHAMPOO_DOUBLE(KEY, FIELD) \
    {KEY, [](RunConfig& c, std::string_view v) { c.FIELD = parse_number<double>(KEY, v); }, \
     [](const RunConfig& c) { return fmt(c.FIELD); }}
#define SHAMPOO_INT(KEY, FIELD, T) \
    {KEY, [](RunConfig& c, std::string_view v) { c.FIELD = parse_number<T>(KEY, v); }, \
     [](const RunConfig& c) { return fmt_int(c.FIELD); }}
#define SHAMPOO_BOOL(KEY, FIELD) \
    {KEY, [](RunConfig& c, std::string_view v) { c.FIELD = parse_bool(KEY, v); }, \
     [](const RunConfig& c) { return fmt_bool(c.FIELD); }}
#define SHAMPOO_STRING(KEY, FIELD) \
    {KEY, [](RunConfig& c, std::string_view v) { c.FIELD = std::string(v); }, \
     [](const RunConfig& c) { return c.FIELD; }}
#define SHAMPOO_ENUM(KEY, FIELD, PARSE) \
    {KEY, [](RunConfig& c, std::string_view v) { c.FIELD = as_config_error(KEY, v, [&] { return PARSE(v); }); }, \
     [](const RunConfig& c) { return std::string(to_string(c.FIELD)); }}

const std::vector<KeySpec>& key_specs() {
    static const std::vector<KeySpec> specs = {
        SHAMPOO_DOUBLE("lr", optimizer.lr.initial_lr),
        {"lr_schedule",
         [](RunConfig& c, std::string_view v) {
             if (v == "constant") c.optimizer.lr.kind = LrSchedule::Kind::Constant;
             else if (v == "warmup_cosine") c.optimizer.lr.kind = LrSchedule::Kind::WarmupCosine;
             else bad_value("lr_schedule", v);
         },
         [](const RunConfig& c) {
             return std::string(c.optimizer.lr.kind == LrSchedule::Kind::Constant ? "constant" : "warmup_cosine");
         }},
        SHAMPOO_INT("warmup_steps", optimizer.lr.warmup_steps, std::int64_t),
        SHAMPOO_INT("total_steps", optimizer.lr.total_steps, std::int64_t),
        SHAMPOO_DOUBLE("beta1", optimizer.beta1),
        SHAMPOO_DOUBLE("beta2", optimizer.beta2),
        SHAMPOO_DOUBLE("epsilon", optimizer.epsilon),
        SHAMPOO_DOUBLE("momentum", optimizer.momentum),
        SHAMPOO_BOOL("use_nesterov", optimizer.use_nesterov),
        SHAMPOO_DOUBLE("weight_decay", optimizer.weight_decay),
        SHAMPOO_BOOL("use_decoupled_weight_decay", optimizer.use_decoupled_weight_decay),
        SHAMPOO_BOOL("use_bias_correction", optimizer.use_bias_correction),
        SHAMPOO_INT("max_preconditioner_dim", optimizer.max_preconditioner_dim, std::size_t),
        SHAMPOO_INT("precondition_frequency", optimizer.precondition_frequency, std::int64_t),
        {"start_preconditioning_step",
         [](RunConfig& c, std::string_view v) {
             c.optimizer.start_preconditioning_step =
                 v == "never" ? kNeverPrecondition : parse_number<std::int64_t>("start_preconditioning_step", v);
         },
         [](const RunConfig& c) {
             const std::int64_t s = c.optimizer.start_preconditioning_step;
             return s == kNeverPrecondition ? std::string("never") : std::to_string(s);
         }},
        SHAMPOO_INT("exponent_override", optimizer.exponent_override, int),
        SHAMPOO_DOUBLE("exponent_multiplier", optimizer.exponent_multiplier),
        SHAMPOO_ENUM("grafting", optimizer.grafting, grafting_kind_from_string),
        SHAMPOO_DOUBLE("grafting_epsilon", optimizer.grafting_epsilon),
        SHAMPOO_DOUBLE("grafting_beta2", optimizer.grafting_beta2),
        SHAMPOO_ENUM("large_dim_method", optimizer.large_dim_method, large_dim_method_from_string),
        SHAMPOO_BOOL("use_merge_dims", optimizer.use_merge_dims),
        SHAMPOO_ENUM("solver", optimizer.solver, root_solver_from_string),
        SHAMPOO_DOUBLE("newton_tolerance", optimizer.newton_tolerance),
        SHAMPOO_ENUM("precision", optimizer.precision, precision_from_string),
        SHAMPOO_STRING("dataset", dataset),
        SHAMPOO_INT("classes", synthetic.classes, std::size_t),
        SHAMPOO_INT("input_dim", synthetic.dim, std::size_t),
        SHAMPOO_INT("train_count", synthetic.count, std::size_t),
        SHAMPOO_INT("val_count", val_count, std::size_t),
        SHAMPOO_DOUBLE("separation", synthetic.separation),
        SHAMPOO_DOUBLE("noise", synthetic.noise),
        SHAMPOO_STRING("csv_path", csv_path),
        SHAMPOO_STRING("val_csv_path", val_csv_path),
        SHAMPOO_STRING("label_column", label_column),
        SHAMPOO_BOOL("normalize", normalize),
        {"widths",
         [](RunConfig& c, std::string_view v) {
             c.widths.clear();
             std::size_t start = 0;
             while (start <= v.size()) {
                 const std::size_t end = std::min(v.find(',', start), v.size());
                 c.widths.push_back(parse_number<std::size_t>("widths", v.substr(start, end - start)));
                 start = end + 1;
             }
         },
         [](const RunConfig& c) {
             std::string s;
             for (std::size_t i = 0; i < c.widths.size(); ++i) s += (i ? "," : "") + std::to_string(c.widths[i]);
             return s;
         }},
        SHAMPOO_ENUM("activation", activation, activation_from_string),
        SHAMPOO_ENUM("loss", loss, loss_kind_from_string),
        SHAMPOO_INT("seed", seed, std::uint64_t),
        SHAMPOO_INT("steps", steps, std::int64_t),
        SHAMPOO_INT("batch_size", batch_size, std::size_t),
        SHAMPOO_INT("num_trainers", num_trainers, std::size_t),
        SHAMPOO_INT("num_trainers_per_group", num_trainers_per_group, std::int64_t),
        SHAMPOO_STRING("metrics_path", metrics_path),
        SHAMPOO_STRING("checkpoint_path", checkpoint_path),
        SHAMPOO_STRING("resume_from", resume_from),
    };
    return specs;
}

#undef SHAMPOO_DOUBLE
#undef SHAMPOO_INT
#undef SHAMPOO_BOOL
#undef SHAMPOO_STRING
#undef SHAMPOO_ENUM

const KeySpec& find_key(std::string_view key) {
    for (const KeySpec& k : key_specs()) {
        if (k.name == key) return k;
    }
    throw Error(ErrorCode::ConfigInvalid, "unknown config key '" + std::string(key) + "'");
}

std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::size_t RunConfig::group_size() const {
    return num_trainers_per_group < 0 ? num_trainers : static_cast<std::size_t>(num_trainers_per_group);
}

void RunConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::ConfigInvalid, what); };
    try {
        optimizer.validate();
    } catch (const Error& e) {
        if (e.code() != ErrorCode::ConfigInvalid) fail(e.what());
        throw;
    }
    if (optimizer.lr.kind == LrSchedule::Kind::WarmupCosine && optimizer.lr.total_steps < steps) {
        fail("total_steps must cover steps for the warmup_cosine schedule");
    }
    if (dataset != "synthetic" && dataset != "csv") fail("dataset must be synthetic or csv");
    if (dataset == "csv" && csv_path.empty()) fail("csv_path is required for dataset = csv");
    if (dataset == "synthetic") {
        if (synthetic.classes == 0 || synthetic.dim == 0 || synthetic.count == 0) {
            fail("classes, input_dim and train_count must be positive");
        }
        if (widths.empty() || widths.front() != synthetic.dim) fail("widths must start with input_dim");
        if (widths.back() < synthetic.classes) fail("output width is smaller than the number of classes");
    }
    if (widths.size() < 2) fail("widths needs at least an input and an output");
    for (std::size_t w : widths) {
        if (w == 0) fail("widths must be positive");
    }
    if (steps < 0) fail("steps must be non-negative");
    if (batch_size == 0) fail("batch_size must be positive");
    if (num_trainers == 0) fail("num_trainers must be positive");
    if (num_trainers_per_group == 0 || num_trainers_per_group < -1) fail("num_trainers_per_group must be positive or -1");
    if (group_size() > num_trainers || num_trainers % group_size() != 0) {
        fail("num_trainers_per_group must divide num_trainers");
    }
}

const std::vector<std::string>& run_config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> out;
        for (const KeySpec& k : key_specs()) out.push_back(k.name);
        return out;
    }();
    return keys;
}

void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
    find_key(key).set(cfg, trim(value));
}

std::string get_config_value(const RunConfig& cfg, std::string_view key) { return find_key(key).get(cfg); }

RunConfig parse_run_config(std::string_view text) {
    std::vector<std::string_view> lines;
    bool echo = false;
    std::size_t start = 0;
    while (start < text.size()) {
        const std::size_t end = std::min(text.find('\n', start), text.size());
        const std::string_view line = text.substr(start, end - start);
        if (line.starts_with("#!")) echo = true;
        lines.push_back(line);
        start = end + 1;
    }

    RunConfig cfg;
    std::size_t lineno = 0;
    for (std::string_view line : lines) {
        ++lineno;
        if (echo) {
            if (!line.starts_with("#!")) continue;
            line.remove_prefix(2);
        }
        line = trim(line);
        if (line.empty() || line.front() == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw Error(ErrorCode::ConfigInvalid, "line " + std::to_string(lineno) + ": expected key = value");
        }
        set_config_value(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_run_config(ss.str());
}

std::string run_config_text(const RunConfig& cfg, std::string_view prefix) {
    std::string out;
    for (const KeySpec& k : key_specs()) out += std::string(prefix) + k.name + " = " + k.get(cfg) + "\n";
    return out;
}

void apply_env_overrides(RunConfig& cfg) {
    if (const char* seed = std::getenv("SHAMPOO_SEED"); seed && *seed) set_config_value(cfg, "seed", seed);
}

}  // namespace shampoo
