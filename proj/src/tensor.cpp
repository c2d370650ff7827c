#include "shampoo/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "shampoo/error.hpp"

namespace shampoo {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::NonFinite: return "NonFinite";
        case ErrorCode::NoConvergence: return "NoConvergence";
        case ErrorCode::EpsilonZeroWithSingular: return "EpsilonZeroWithSingular";
        case ErrorCode::MaxIterationsExceeded: return "MaxIterationsExceeded";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NotYetPreconditioned: return "NotYetPreconditioned";
        case ErrorCode::OutOfRange: return "OutOfRange";
        case ErrorCode::UnknownKind: return "UnknownKind";
        case ErrorCode::InvalidGroupSize: return "InvalidGroupSize";
        case ErrorCode::BufferOverflow: return "BufferOverflow";
        case ErrorCode::DivergedReplicas: return "DivergedReplicas";
        case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
        case ErrorCode::LabelOutOfRange: return "LabelOutOfRange";
        case ErrorCode::ConfigInvalid: return "ConfigInvalid";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::CheckpointInvalid: return "CheckpointInvalid";
    }
    return "Unknown";
}

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i > 0) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), values_(shampoo::numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shampoo::numel(shape_)) {
        throw Error(ErrorCode::ShapeMismatch, "tensor data length " + std::to_string(values_.size()) +
                                                  " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shampoo::numel(shape) != numel()) {
        throw Error(ErrorCode::ShapeMismatch,
                    "cannot view " + shape_to_string(shape_) + " as " + shape_to_string(shape));
    }
    return Tensor(std::move(shape), values_);
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows * cols) {
        throw Error(ErrorCode::ShapeMismatch, "matrix data length mismatch");
    }
}

Matrix Matrix::identity(std::size_t n, double scale) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = scale;
    return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
    Matrix m(diag.size(), diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorCode::ShapeMismatch, "matmul inner dimensions differ");
    }
    Matrix c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

namespace {
void require_same(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorCode::ShapeMismatch, "matrix shapes differ");
    }
}
}  // namespace

Matrix operator+(const Matrix& a, const Matrix& b) {
    require_same(a, b);
    Matrix c = a;
    for (std::size_t i = 0; i < c.data().size(); ++i) c.data()[i] += b.data()[i];
    return c;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
    require_same(a, b);
    Matrix c = a;
    for (std::size_t i = 0; i < c.data().size(); ++i) c.data()[i] -= b.data()[i];
    return c;
}

Matrix operator*(double s, const Matrix& a) {
    Matrix c = a;
    for (double& x : c.data()) x *= s;
    return c;
}

Matrix kron(const Matrix& a, const Matrix& b) {
    Matrix k(a.rows() * b.rows(), a.cols() * b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j)
            for (std::size_t p = 0; p < b.rows(); ++p)
                for (std::size_t q = 0; q < b.cols(); ++q)
                    k(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
    return k;
}

double frobenius_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

double frobenius_norm(const Matrix& m) { return frobenius_norm(m.data()); }

double max_abs(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error(ErrorCode::ShapeMismatch, "length mismatch in max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

bool all_finite(std::span<const double> v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

double symmetry_defect(const Matrix& a) {
    const double scale = max_abs(a.data());
    if (scale == 0.0) return 0.0;
    double d = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = i + 1; j < a.cols(); ++j) d = std::max(d, std::abs(a(i, j) - a(j, i)));
    return d / scale;
}

Tensor to_tensor(const Matrix& m) { return Tensor({m.rows(), m.cols()}, m.values()); }

Matrix to_matrix(const Tensor& t) {
    if (t.order() != 2) throw Error(ErrorCode::ShapeMismatch, "expected an order-2 tensor");
    return Matrix(t.shape()[0], t.shape()[1], t.values());
}

namespace {
struct ModeLayout {
    std::size_t outer;
    std::size_t dim;
    std::size_t inner;
};

ModeLayout layout_for(const Shape& shape, std::size_t mode) {
    if (mode >= shape.size()) throw Error(ErrorCode::OutOfRange, "mode index out of range");
    ModeLayout l{1, shape[mode], 1};
    for (std::size_t i = 0; i < mode; ++i) l.outer *= shape[i];
    for (std::size_t i = mode + 1; i < shape.size(); ++i) l.inner *= shape[i];
    return l;
}
}  // namespace

Matrix unfold(const Tensor& t, std::size_t mode) {
    const ModeLayout l = layout_for(t.shape(), mode);
    Matrix m(l.dim, l.outer * l.inner);
    for (std::size_t a = 0; a < l.outer; ++a)
        for (std::size_t i = 0; i < l.dim; ++i)
            for (std::size_t b = 0; b < l.inner; ++b)
                m(i, a * l.inner + b) = t[(a * l.dim + i) * l.inner + b];
    return m;
}

Tensor fold(const Matrix& m, std::size_t mode, const Shape& shape) {
    const ModeLayout l = layout_for(shape, mode);
    if (m.rows() != l.dim || m.cols() != l.outer * l.inner) {
        throw Error(ErrorCode::ShapeMismatch, "fold: matrix does not match target shape");
    }
    Tensor t(shape);
    for (std::size_t a = 0; a < l.outer; ++a)
        for (std::size_t i = 0; i < l.dim; ++i)
            for (std::size_t b = 0; b < l.inner; ++b)
                t[(a * l.dim + i) * l.inner + b] = m(i, a * l.inner + b);
    return t;
}

Matrix mode_gram(const Tensor& t, std::size_t mode) {
    const ModeLayout l = layout_for(t.shape(), mode);
    Matrix g(l.dim, l.dim);
    const auto v = t.data();
    for (std::size_t a = 0; a < l.outer; ++a) {
        const std::size_t base = a * l.dim * l.inner;
        for (std::size_t i = 0; i < l.dim; ++i) {
            for (std::size_t j = i; j < l.dim; ++j) {
                double s = 0.0;
                for (std::size_t b = 0; b < l.inner; ++b)
                    s += v[base + i * l.inner + b] * v[base + j * l.inner + b];
                g(i, j) += s;
            }
        }
    }
    for (std::size_t i = 0; i < l.dim; ++i)
        for (std::size_t j = 0; j < i; ++j) g(i, j) = g(j, i);
    return g;
}

Tensor mode_product(const Tensor& t, const Matrix& m, std::size_t mode) {
    const ModeLayout l = layout_for(t.shape(), mode);
    if (m.rows() != l.dim || m.cols() != l.dim) {
        throw Error(ErrorCode::ShapeMismatch, "mode_product: matrix is not d_k x d_k");
    }
    Tensor out(t.shape());
    for (std::size_t a = 0; a < l.outer; ++a) {
        const std::size_t base = a * l.dim * l.inner;
        for (std::size_t i = 0; i < l.dim; ++i) {
            for (std::size_t j = 0; j < l.dim; ++j) {
                const double mij = m(i, j);
                if (mij == 0.0) continue;
                for (std::size_t b = 0; b < l.inner; ++b)
                    out[base + i * l.inner + b] += mij * t[base + j * l.inner + b];
            }
        }
    }
    return out;
}

Tensor mode_scale(const Tensor& t, std::span<const double> scale, std::size_t mode) {
    const ModeLayout l = layout_for(t.shape(), mode);
    if (scale.size() != l.dim) throw Error(ErrorCode::ShapeMismatch, "mode_scale: length mismatch");
    Tensor out = t;
    for (std::size_t a = 0; a < l.outer; ++a)
        for (std::size_t i = 0; i < l.dim; ++i)
            for (std::size_t b = 0; b < l.inner; ++b) out[(a * l.dim + i) * l.inner + b] *= scale[i];
    return out;
}

}  // namespace shampoo
