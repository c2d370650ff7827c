#include <bit>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "shampoo/cli.hpp"
#include "shampoo/error.hpp"

namespace shampoo {

using nlohmann::json;

std::string encode_doubles(std::span<const double> values) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(values.size() * 16);
    for (double v : values) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b) {
            const auto byte = static_cast<unsigned>((bits >> (8 * b)) & 0xff);
            out += digits[byte >> 4];
            out += digits[byte & 0xf];
        }
    }
    return out;
}

std::vector<double> decode_doubles(std::string_view hex) {
    if (hex.size() % 16 != 0) throw Error(ErrorCode::CheckpointInvalid, "hex payload length is not a multiple of 16");
    auto nibble = [](char c) -> std::uint64_t {
        if (c >= '0' && c <= '9') return static_cast<std::uint64_t>(c - '0');
        if (c >= 'a' && c <= 'f') return static_cast<std::uint64_t>(c - 'a' + 10);
        throw Error(ErrorCode::CheckpointInvalid, std::string("bad hex digit '") + c + "'");
    };
    std::vector<double> out(hex.size() / 16);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (std::size_t b = 0; b < 8; ++b) {
            const std::uint64_t byte = (nibble(hex[16 * i + 2 * b]) << 4) | nibble(hex[16 * i + 2 * b + 1]);
            bits |= byte << (8 * b);
        }
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorCode::CheckpointInvalid, what); }

json array_json(const Shape& shape, std::span<const double> values) {
    return json{{"shape", shape}, {"data", encode_doubles(values)}};
}

json tensor_json(const Tensor& t) { return array_json(t.shape(), t.data()); }
json matrix_json(const Matrix& m) { return array_json({m.rows(), m.cols()}, m.data()); }
json vector_json(const std::vector<double>& v) { return array_json({v.size()}, v); }

void expect_keys(const json& j, const std::set<std::string>& keys, const std::string& where) {
    if (!j.is_object()) invalid(where + " must be an object");
    for (const auto& [k, _] : j.items()) {
        if (!keys.count(k)) invalid("unknown key '" + k + "' in " + where);
    }
    for (const std::string& k : keys) {
        if (!j.contains(k)) invalid("missing key '" + k + "' in " + where);
    }
}

std::vector<double> read_array(const json& j, const Shape& shape, const std::string& where) {
    expect_keys(j, {"shape", "data"}, where);
    Shape stored;
    try {
        stored = j.at("shape").get<Shape>();
    } catch (const json::exception&) {
        invalid(where + ".shape is not a list of sizes");
    }
    if (stored != shape) invalid(where + " has shape " + shape_to_string(stored) + ", expected " + shape_to_string(shape));
    if (!j.at("data").is_string()) invalid(where + ".data must be a string");
    std::vector<double> values = decode_doubles(j.at("data").get<std::string>());
    if (values.size() != numel(shape)) invalid(where + " has the wrong number of values");
    return values;
}

Tensor read_tensor(const json& j, const Shape& shape, const std::string& where) {
    return Tensor(shape, read_array(j, shape, where));
}

Matrix read_matrix(const json& j, std::size_t n, const std::string& where) {
    return Matrix(n, n, read_array(j, {n, n}, where));
}

template <class T>
T read_int(const json& j, const std::string& where) {
    if (!j.is_number_integer()) invalid(where + " must be an integer");
    return j.get<T>();
}

json block_json(const BlockSlot& s) {
    json j = json::object();
    if (s.kind == PreconditionerKind::Shampoo) {
        json factors = json::array(), inv = json::array();
        for (const Matrix& m : s.shampoo.factors) factors.push_back(matrix_json(m));
        for (const Matrix& m : s.shampoo.inv_factors) inv.push_back(matrix_json(m));
        j["shampoo"] = {{"factors", factors},
                        {"inv_factors", inv},
                        {"step", s.shampoo.step},
                        {"last_inverse_step", s.shampoo.last_inverse_step},
                        {"guard",
                         {{"requested", s.shampoo.guard.requested},
                          {"double_retry", s.shampoo.guard.double_retry},
                          {"previous", s.shampoo.guard.previous},
                          {"identity_fallback", s.shampoo.guard.identity_fallback}}}};
    } else if (s.kind != PreconditionerKind::GraftOnly) {
        json d{{"step", s.diagonal.step}};
        if (s.kind == PreconditionerKind::AdaGradFallback) {
            d["accumulator"] = vector_json(s.diagonal.accumulator);
        } else {
            json modes = json::array();
            for (const auto& v : s.diagonal.mode_diagonals) modes.push_back(vector_json(v));
            d["mode_diagonals"] = modes;
        }
        j["diagonal"] = d;
    }
    json g{{"step", s.graft.step}};
    if (!s.graft.accumulator.values().empty()) g["accumulator"] = tensor_json(s.graft.accumulator);
    j["graft"] = g;
    if (!s.filtered.values().empty()) j["filtered"] = tensor_json(s.filtered);
    if (!s.momentum.values().empty()) j["momentum"] = tensor_json(s.momentum);
    return j;
}

void read_block(const json& j, BlockSlot& s, const std::string& where) {
    std::set<std::string> keys{"graft"};
    if (s.kind == PreconditionerKind::Shampoo) keys.insert("shampoo");
    else if (s.kind != PreconditionerKind::GraftOnly) keys.insert("diagonal");
    if (!s.filtered.values().empty()) keys.insert("filtered");
    if (!s.momentum.values().empty()) keys.insert("momentum");
    expect_keys(j, keys, where);

    if (s.kind == PreconditionerKind::Shampoo) {
        const json& sh = j.at("shampoo");
        const std::string w = where + ".shampoo";
        expect_keys(sh, {"factors", "inv_factors", "step", "last_inverse_step", "guard"}, w);
        const Shape& shape = s.shampoo.block_shape;
        const json& f = sh.at("factors");
        if (!f.is_array() || f.size() != shape.size()) invalid(w + ".factors needs one matrix per mode");
        for (std::size_t k = 0; k < shape.size(); ++k) {
            s.shampoo.factors[k] = read_matrix(f[k], shape[k], w + ".factors[" + std::to_string(k) + "]");
        }
        const json& inv = sh.at("inv_factors");
        if (!inv.is_array() || (!inv.empty() && inv.size() != shape.size())) {
            invalid(w + ".inv_factors must be empty or hold one matrix per mode");
        }
        s.shampoo.inv_factors.clear();
        for (std::size_t k = 0; k < inv.size(); ++k) {
            s.shampoo.inv_factors.push_back(read_matrix(inv[k], shape[k], w + ".inv_factors[" + std::to_string(k) + "]"));
        }
        s.shampoo.step = read_int<std::int64_t>(sh.at("step"), w + ".step");
        s.shampoo.last_inverse_step = read_int<std::int64_t>(sh.at("last_inverse_step"), w + ".last_inverse_step");
        const json& g = sh.at("guard");
        expect_keys(g, {"requested", "double_retry", "previous", "identity_fallback"}, w + ".guard");
        s.shampoo.guard.requested = read_int<std::size_t>(g.at("requested"), w + ".guard");
        s.shampoo.guard.double_retry = read_int<std::size_t>(g.at("double_retry"), w + ".guard");
        s.shampoo.guard.previous = read_int<std::size_t>(g.at("previous"), w + ".guard");
        s.shampoo.guard.identity_fallback = read_int<std::size_t>(g.at("identity_fallback"), w + ".guard");
    } else if (s.kind != PreconditionerKind::GraftOnly) {
        const json& d = j.at("diagonal");
        const std::string w = where + ".diagonal";
        const Shape& shape = s.diagonal.block_shape;
        if (s.kind == PreconditionerKind::AdaGradFallback) {
            expect_keys(d, {"step", "accumulator"}, w);
            s.diagonal.accumulator = read_array(d.at("accumulator"), {numel(shape)}, w + ".accumulator");
        } else {
            expect_keys(d, {"step", "mode_diagonals"}, w);
            const json& modes = d.at("mode_diagonals");
            if (!modes.is_array() || modes.size() != shape.size()) invalid(w + ".mode_diagonals needs one entry per mode");
            for (std::size_t k = 0; k < shape.size(); ++k) {
                s.diagonal.mode_diagonals[k] = read_array(modes[k], {shape[k]}, w + ".mode_diagonals");
            }
        }
        s.diagonal.step = read_int<std::int64_t>(d.at("step"), w + ".step");
    }

    const json& g = j.at("graft");
    std::set<std::string> graft_keys{"step"};
    if (!s.graft.accumulator.values().empty()) graft_keys.insert("accumulator");
    expect_keys(g, graft_keys, where + ".graft");
    s.graft.step = read_int<std::int64_t>(g.at("step"), where + ".graft.step");
    if (graft_keys.count("accumulator")) {
        s.graft.accumulator = read_tensor(g.at("accumulator"), s.graft.accumulator.shape(), where + ".graft.accumulator");
    }
    if (keys.count("filtered")) s.filtered = read_tensor(j.at("filtered"), s.filtered.shape(), where + ".filtered");
    if (keys.count("momentum")) s.momentum = read_tensor(j.at("momentum"), s.momentum.shape(), where + ".momentum");
}

}  // namespace

json checkpoint_to_json(const Checkpoint& ckpt) {
    json weights = json::array();
    for (const Tensor& w : ckpt.weights) weights.push_back(tensor_json(w));
    json state = json::object();
    for (std::size_t p = 0; p < ckpt.state.size(); ++p) {
        json blocks = json::object();
        for (std::size_t b = 0; b < ckpt.state[p].blocks.size(); ++b) {
            blocks[std::to_string(b)] = block_json(ckpt.state[p].blocks[b]);
        }
        state[std::to_string(p)] = blocks;
    }
    return json{{"format_version", kCheckpointFormatVersion},
                {"step", ckpt.step},
                {"config", ckpt.config},
                {"weights", weights},
                {"state", state}};
}

Checkpoint checkpoint_from_json(const json& j, const std::vector<ParamSlot>& layout) {
    expect_keys(j, {"format_version", "step", "config", "weights", "state"}, "checkpoint");
    if (read_int<int>(j.at("format_version"), "format_version") != kCheckpointFormatVersion) {
        invalid("unsupported format_version " + j.at("format_version").dump());
    }
    Checkpoint ckpt;
    ckpt.step = read_int<std::int64_t>(j.at("step"), "step");
    if (ckpt.step < 0) invalid("negative step");

    const json& cfg = j.at("config");
    if (!cfg.is_object()) invalid("config must be an object");
    for (const auto& [k, v] : cfg.items()) {
        if (!v.is_string()) invalid("config." + k + " must be a string");
        ckpt.config[k] = v.get<std::string>();
    }

    const json& weights = j.at("weights");
    if (!weights.is_array() || weights.size() != layout.size()) invalid("weights must hold one array per parameter");
    for (std::size_t p = 0; p < layout.size(); ++p) {
        ckpt.weights.push_back(read_tensor(weights[p], layout[p].shape, "weights[" + std::to_string(p) + "]"));
    }

    const json& state = j.at("state");
    std::set<std::string> param_keys;
    for (std::size_t p = 0; p < layout.size(); ++p) param_keys.insert(std::to_string(p));
    expect_keys(state, param_keys, "state");
    ckpt.state = layout;
    for (std::size_t p = 0; p < layout.size(); ++p) {
        const std::string where = "state." + std::to_string(p);
        const json& blocks = state.at(std::to_string(p));
        std::set<std::string> block_keys;
        for (std::size_t b = 0; b < layout[p].blocks.size(); ++b) block_keys.insert(std::to_string(b));
        expect_keys(blocks, block_keys, where);
        for (std::size_t b = 0; b < layout[p].blocks.size(); ++b) {
            read_block(blocks.at(std::to_string(b)), ckpt.state[p].blocks[b], where + "." + std::to_string(b));
        }
    }
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
    out << checkpoint_to_json(ckpt).dump(2) << '\n';
    if (!out) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const std::vector<ParamSlot>& layout) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        invalid(std::string("malformed JSON: ") + e.what());
    }
    return checkpoint_from_json(j, layout);
}

std::string inspect_checkpoint(const json& j) {
    std::ostringstream out;
    auto shape_of = [](const json& a) { return shape_to_string(a.at("shape").get<Shape>()); };
    auto norm_of = [](const json& a) {
        const std::vector<double> v = decode_doubles(a.at("data").get<std::string>());
        return frobenius_norm(v);
    };
    try {
        out << "format_version " << j.at("format_version") << "\n";
        out << "step " << j.at("step") << "\n";
        out << "config keys " << j.at("config").size() << "\n";
        const json& weights = j.at("weights");
        for (std::size_t p = 0; p < weights.size(); ++p) {
            out << "param " << p << " " << shape_of(weights[p]) << " |W|=" << std::setprecision(6) << norm_of(weights[p])
                << "\n";
            const json& blocks = j.at("state").at(std::to_string(p));
            for (const auto& [b, block] : blocks.items()) {
                out << "  block " << b << ":";
                for (const auto& [name, value] : block.items()) {
                    out << " " << name;
                    if (value.is_object() && value.contains("shape")) out << shape_of(value);
                    if (name == "shampoo") {
                        out << "(factors=" << value.at("factors").size() << " inverses=" << value.at("inv_factors").size()
                            << " step=" << value.at("step") << ")";
                    }
                }
                out << "\n";
            }
        }
    } catch (const json::exception& e) {
        invalid(std::string("unexpected checkpoint layout: ") + e.what());
    }
    return out.str();
}

}  // namespace shampoo
