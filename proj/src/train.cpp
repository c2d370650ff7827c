#include "shampoo/train.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "shampoo/error.hpp"

namespace shampoo {

std::string_view to_string(Activation a) { return a == Activation::ReLU ? "relu" : "identity"; }

std::string_view to_string(LossKind k) {
    return k == LossKind::SoftmaxCrossEntropy ? "softmax_cross_entropy" : "mse";
}

Activation activation_from_string(std::string_view name) {
    if (name == "relu") return Activation::ReLU;
    if (name == "identity") return Activation::Identity;
    throw Error(ErrorCode::UnknownKind, "unknown activation '" + std::string(name) + "'");
}

LossKind loss_kind_from_string(std::string_view name) {
    if (name == "softmax_cross_entropy") return LossKind::SoftmaxCrossEntropy;
    if (name == "mse") return LossKind::Mse;
    throw Error(ErrorCode::UnknownKind, "unknown loss '" + std::string(name) + "'");
}

std::vector<Shape> Mlp::shapes() const {
    std::vector<Shape> out;
    for (const Tensor& w : weights) out.push_back(w.shape());
    return out;
}

Mlp make_mlp(const std::vector<std::size_t>& widths, Activation activation, std::uint64_t seed) {
    if (widths.size() < 2) throw Error(ErrorCode::InvalidArgument, "an MLP needs at least an input and output width");
    for (std::size_t w : widths) {
        if (w == 0) throw Error(ErrorCode::InvalidArgument, "layer widths must be positive");
    }
    Mlp m;
    m.widths = widths;
    m.activation = activation;
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
        const double s = std::sqrt(6.0 / static_cast<double>(widths[i] + widths[i + 1]));
        std::uniform_real_distribution<double> u(-s, s);
        Tensor w({widths[i + 1], widths[i]});
        for (std::size_t e = 0; e < w.numel(); ++e) w[e] = u(rng);
        m.weights.push_back(std::move(w));
    }
    return m;
}

namespace {

void check_chain(const Mlp& model) {
    if (model.widths.size() != model.weights.size() + 1) throw Error(ErrorCode::ShapeMismatch, "widths and layers disagree");
    for (std::size_t i = 0; i < model.weights.size(); ++i) {
        if (model.weights[i].shape() != Shape{model.widths[i + 1], model.widths[i]}) {
            throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(i) + " has shape " +
                                                      shape_to_string(model.weights[i].shape()));
        }
    }
}

// z = a Wᵀ for a of shape B × in and W of shape out × in.
Matrix affine(const Matrix& a, const Tensor& w) {
    const std::size_t out = w.shape()[0], in = w.shape()[1];
    Matrix z(a.rows(), out);
    for (std::size_t b = 0; b < a.rows(); ++b) {
        const double* row = &a.data()[b * in];
        for (std::size_t o = 0; o < out; ++o) {
            const double* wr = &w.data()[o * in];
            double s = 0.0;
            for (std::size_t i = 0; i < in; ++i) s += row[i] * wr[i];
            z(b, o) = s;
        }
    }
    return z;
}

Matrix activate(const Matrix& z, Activation a) {
    if (a == Activation::Identity) return z;
    Matrix out = z;
    for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    return out;
}

}  // namespace

Matrix forward(const Mlp& model, const Matrix& x, ForwardCache* cache) {
    check_chain(model);
    if (x.cols() != model.widths.front()) {
        throw Error(ErrorCode::ShapeMismatch, "input width " + std::to_string(x.cols()) + " but the model expects " +
                                                  std::to_string(model.widths.front()));
    }
    if (cache) {
        cache->inputs.clear();
        cache->pre.clear();
    }
    Matrix a = x;
    for (std::size_t i = 0; i < model.layers(); ++i) {
        Matrix z = affine(a, model.weights[i]);
        if (cache) {
            cache->inputs.push_back(a);
            cache->pre.push_back(z);
        }
        if (i + 1 == model.layers()) return z;
        a = activate(z, model.activation);
    }
    return a;
}

std::vector<Tensor> backward(const Mlp& model, const ForwardCache& cache, const Matrix& dlogits) {
    check_chain(model);
    const std::size_t n = model.layers();
    if (cache.inputs.size() != n || cache.pre.size() != n) throw Error(ErrorCode::ShapeMismatch, "stale forward cache");
    const std::size_t batch = cache.inputs.front().rows();
    if (dlogits.rows() != batch || dlogits.cols() != model.widths.back()) {
        throw Error(ErrorCode::ShapeMismatch, "loss gradient does not match the logits");
    }

    std::vector<Tensor> grads(n);
    Matrix delta = dlogits;
    for (std::size_t li = n; li-- > 0;) {
        const Matrix& a = cache.inputs[li];
        const std::size_t out = model.widths[li + 1], in = model.widths[li];
        Tensor g({out, in});
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t o = 0; o < out; ++o) {
                const double d = delta(b, o);
                if (d == 0.0) continue;
                for (std::size_t i = 0; i < in; ++i) g[o * in + i] += d * a(b, i);
            }
        }
        grads[li] = std::move(g);
        if (li == 0) break;

        const Tensor& w = model.weights[li];
        const Matrix& z = cache.pre[li - 1];
        Matrix prev(batch, in);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t i = 0; i < in; ++i) {
                double s = 0.0;
                for (std::size_t o = 0; o < out; ++o) s += delta(b, o) * w[o * in + i];
                if (model.activation == Activation::ReLU && !(z(b, i) > 0.0)) s = 0.0;
                prev(b, i) = s;
            }
        }
        delta = std::move(prev);
    }
    return grads;
}

LossValue compute_loss(LossKind kind, const Matrix& logits, const std::vector<std::size_t>& labels) {
    const std::size_t batch = logits.rows(), k = logits.cols();
    if (labels.size() != batch || batch == 0) throw Error(ErrorCode::ShapeMismatch, "one label per logit row");
    for (std::size_t y : labels) {
        if (y >= k) {
            throw Error(ErrorCode::LabelOutOfRange,
                        "label " + std::to_string(y) + " with " + std::to_string(k) + " outputs");
        }
    }
    const double inv_b = 1.0 / static_cast<double>(batch);
    LossValue out;
    out.grad = Matrix(batch, k);
    for (std::size_t b = 0; b < batch; ++b) {
        if (kind == LossKind::SoftmaxCrossEntropy) {
            double mx = logits(b, 0);
            for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits(b, c));
            double sum = 0.0;
            for (std::size_t c = 0; c < k; ++c) sum += std::exp(logits(b, c) - mx);
            const double log_z = mx + std::log(sum);
            out.value += (log_z - logits(b, labels[b])) * inv_b;
            for (std::size_t c = 0; c < k; ++c) {
                const double p = std::exp(logits(b, c) - log_z);
                out.grad(b, c) = (p - (c == labels[b] ? 1.0 : 0.0)) * inv_b;
            }
        } else {
            for (std::size_t c = 0; c < k; ++c) {
                const double r = logits(b, c) - (c == labels[b] ? 1.0 : 0.0);
                out.value += 0.5 * r * r * inv_b;
                out.grad(b, c) = r * inv_b;
            }
        }
    }
    return out;
}

double accuracy(const Matrix& logits, const std::vector<std::size_t>& labels) {
    if (labels.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t b = 0; b < logits.rows(); ++b) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c) {
            if (logits(b, c) > logits(b, best)) best = c;
        }
        hits += best == labels[b];
    }
    return static_cast<double>(hits) / static_cast<double>(labels.size());
}

Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t sample_seed) {
    if (spec.classes == 0 || spec.dim == 0 || spec.count == 0) {
        throw Error(ErrorCode::InvalidArgument, "synthetic dataset needs positive classes, dim and count");
    }
    std::normal_distribution<double> normal(0.0, 1.0);
    std::mt19937_64 mean_rng(spec.seed);
    Matrix means(spec.classes, spec.dim);
    for (double& v : means.data()) v = spec.separation * normal(mean_rng);

    std::mt19937_64 rng(sample_seed);
    Dataset d;
    d.classes = spec.classes;
    d.features = Matrix(spec.count, spec.dim);
    d.labels.resize(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        const std::size_t y = i % spec.classes;
        d.labels[i] = y;
        for (std::size_t j = 0; j < spec.dim; ++j) d.features(i, j) = means(y, j) + spec.noise * normal(rng);
    }
    return d;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        const auto b = cell.find_first_not_of(" \t\r");
        const auto e = cell.find_last_not_of(" \t\r");
        out.push_back(b == std::string::npos ? "" : cell.substr(b, e - b + 1));
    }
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_number(const std::string& s, std::size_t line) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        throw Error(ErrorCode::InvalidArgument, "line " + std::to_string(line) + ": '" + s + "' is not a number");
    }
    return v;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const std::string& label_column) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw Error(ErrorCode::IoError, path.string() + " is empty");
    const std::vector<std::string> header = split_csv_line(line);
    const auto it = std::find(header.begin(), header.end(), label_column);
    if (it == header.end()) throw Error(ErrorCode::InvalidArgument, "no column named '" + label_column + "'");
    const auto label_idx = static_cast<std::size_t>(it - header.begin());
    const std::size_t dim = header.size() - 1;

    std::vector<double> values;
    Dataset d;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw Error(ErrorCode::InvalidArgument, "line " + std::to_string(lineno) + " has " +
                                                        std::to_string(cells.size()) + " columns");
        }
        for (std::size_t c = 0; c < cells.size(); ++c) {
            const double v = parse_number(cells[c], lineno);
            if (c != label_idx) {
                values.push_back(v);
                continue;
            }
            if (v < 0.0 || v != std::floor(v)) {
                throw Error(ErrorCode::LabelOutOfRange, "line " + std::to_string(lineno) + ": bad label " + cells[c]);
            }
            d.labels.push_back(static_cast<std::size_t>(v));
        }
    }
    if (d.labels.empty()) throw Error(ErrorCode::InvalidArgument, path.string() + " has no rows");
    d.features = Matrix(d.labels.size(), dim, std::move(values));
    d.classes = *std::max_element(d.labels.begin(), d.labels.end()) + 1;
    return d;
}

Normalization fit_normalization(const Dataset& data) {
    const std::size_t n = data.size(), dim = data.dim();
    Normalization norm{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j) norm.mean[j] += data.features(i, j);
    for (double& m : norm.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dim; ++j) {
            const double r = data.features(i, j) - norm.mean[j];
            norm.stddev[j] += r * r;
        }
    for (double& s : norm.stddev) {
        s = std::sqrt(s / static_cast<double>(n));
        if (s == 0.0) s = 1.0;
    }
    return norm;
}

void apply_normalization(Dataset& data, const Normalization& norm) {
    if (norm.mean.size() != data.dim()) throw Error(ErrorCode::ShapeMismatch, "normalization width mismatch");
    for (std::size_t i = 0; i < data.size(); ++i)
        for (std::size_t j = 0; j < data.dim(); ++j)
            data.features(i, j) = (data.features(i, j) - norm.mean[j]) / norm.stddev[j];
}

Batch sample_batch(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::int64_t step) {
    if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch size must be positive");
    if (data.size() == 0) throw Error(ErrorCode::InvalidArgument, "empty dataset");
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32)};
    std::mt19937_64 rng(seq);
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    Batch b;
    b.seed = seed;
    b.step = step;
    b.features = Matrix(batch_size, data.dim());
    b.labels.resize(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) {
        const std::size_t k = pick(rng);
        b.labels[i] = data.labels[k];
        std::copy_n(&data.features.data()[k * data.dim()], data.dim(), &b.features.data()[i * data.dim()]);
    }
    return b;
}

Evaluation evaluate(const Mlp& model, const Dataset& data, LossKind loss) {
    const Matrix logits = forward(model, data.features);
    return {compute_loss(loss, logits, data.labels).value, accuracy(logits, data.labels)};
}

bool MetricsRow::same_values(const MetricsRow& o, double tol) const {
    auto close = [tol](double a, double b) { return a == b || std::abs(a - b) <= tol; };
    return step == o.step && close(loss, o.loss) && close(val_loss, o.val_loss) && close(accuracy, o.accuracy) &&
           lr == o.lr;
}

Trainer::Trainer(Mlp model, const ShampooConfig& cfg, const TrainOptions& options, const Dataset& train,
                 const Dataset& validation)
    : model_(std::move(model)),
      options_(options),
      train_(train),
      validation_(validation),
      opt_(model_.shapes(), cfg, options.world_size, options.group_size, model_.weights) {
    if (train.dim() != model_.widths.front()) throw Error(ErrorCode::ShapeMismatch, "dataset width does not match d_0");
}

MetricsRow Trainer::step() {
    const auto start = std::chrono::steady_clock::now();
    const std::int64_t t = opt_.step_count();
    const Batch batch = sample_batch(train_, options_.batch_size, options_.batch_seed, t);
    ForwardCache cache;
    const Matrix logits = forward(model_, batch.features, &cache);
    const LossValue lv = compute_loss(options_.loss, logits, batch.labels);
    const std::vector<Tensor> grads = backward(model_, cache, lv.grad);

    MetricsRow row;
    row.step = t;
    row.loss = lv.value;
    row.lr = lr_at(opt_.config().lr, t);
    opt_.step(grads);
    model_.weights = opt_.weights();
    const Evaluation ev = evaluate(model_, validation_.size() ? validation_ : train_, options_.loss);
    row.val_loss = ev.loss;
    row.accuracy = ev.accuracy;
    row.gathered_bytes = opt_.meter().gathered_bytes_per_step;
    row.step_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return row;
}

std::vector<MetricsRow> Trainer::run(std::int64_t steps) {
    std::vector<MetricsRow> rows;
    for (std::int64_t i = 0; i < steps; ++i) rows.push_back(step());
    return rows;
}

void Trainer::restore(const std::vector<Tensor>& weights, const std::vector<ParamSlot>& state, std::int64_t t) {
    opt_.set_weights(weights);
    opt_.import_state(state, t);
    model_.weights = weights;
}

std::vector<MetricsRow> run_training(const Dataset& train, const Dataset& validation, Mlp& model,
                                     const ShampooConfig& cfg, const TrainOptions& options, std::int64_t steps) {
    Trainer trainer(model, cfg, options, train, validation);
    std::vector<MetricsRow> rows = trainer.run(steps);
    model = trainer.model();
    return rows;
}

}  // namespace shampoo
