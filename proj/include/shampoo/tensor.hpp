#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace shampoo {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major tensor of doubles. Parameters, gradients and search
/// directions all live in this type; reshaping never moves data.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t order() const noexcept { return shape_.size(); }
    std::size_t numel() const noexcept { return values_.size(); }

    std::span<double> data() noexcept { return values_; }
    std::span<const double> data() const noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    /// Row-major view under a different shape with the same element count.
    Tensor reshaped(Shape shape) const;

    bool operator==(const Tensor&) const = default;

private:
    Shape shape_;
    std::vector<double> values_;
};

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    static Matrix identity(std::size_t n, double scale = 1.0);
    static Matrix diagonal(std::span<const double> diag);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool square() const noexcept { return rows_ == cols_; }

    double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

    std::span<double> data() noexcept { return values_; }
    std::span<const double> data() const noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    bool operator==(const Matrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> values_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);

/// Kronecker product with row-major vec convention: vec(A G B^T) = (A ⊗ B) vec(G).
Matrix kron(const Matrix& a, const Matrix& b);

double frobenius_norm(std::span<const double> v);
double frobenius_norm(const Matrix& m);
double max_abs(std::span<const double> v);
double max_abs_diff(std::span<const double> a, std::span<const double> b);
bool all_finite(std::span<const double> v);

/// max_ij |A_ij - A_ji| relative to max |A_ij|.
double symmetry_defect(const Matrix& a);

Tensor to_tensor(const Matrix& m);
Matrix to_matrix(const Tensor& t);

/// Mode-k unfolding: row index is i_k, columns enumerate the remaining
/// indices in row-major order.
Matrix unfold(const Tensor& t, std::size_t mode);
Tensor fold(const Matrix& m, std::size_t mode, const Shape& shape);

/// unfold(t, k) * unfold(t, k)^T without materializing the unfolding.
Matrix mode_gram(const Tensor& t, std::size_t mode);

/// Multiplies mode k of t by m (m is d_k x d_k): fold(m * unfold(t, k)).
Tensor mode_product(const Tensor& t, const Matrix& m, std::size_t mode);

/// Scales mode k of t elementwise by scale[i_k].
Tensor mode_scale(const Tensor& t, std::span<const double> scale, std::size_t mode);

}  // namespace shampoo
