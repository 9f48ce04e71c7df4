#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace aircache {

// Dense row-major matrix of doubles. Desk-scale only.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix identity(std::size_t n);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    const std::vector<double>& data() const noexcept { return data_; }

    // Copies the listed rows, in the listed order.
    Matrix select_rows(std::span<const std::size_t> indices) const;
    Matrix slice_rows(std::size_t begin, std::size_t end) const;
    Matrix slice_cols(std::size_t begin, std::size_t end) const;
    Matrix transpose() const;

    void append_row(std::span<const double> values);

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);

// a · bᵀ without materializing the transpose.
Matrix matmul_transposed(const Matrix& a, const Matrix& b);

// Row r may see column c only when r >= first_visible_row[c]. Columns past
// the end of the vector are visible to every row.
struct CausalMask {
    std::vector<std::size_t> first_visible_row;

    static CausalMask lower_triangular(std::size_t n);

    bool masked(std::size_t row, std::size_t col) const noexcept {
        return col < first_visible_row.size() && row < first_visible_row[col];
    }
};

// Numerically stable row-wise softmax. Masked entries are exactly zero.
// Throws ErrorKind::DegenerateMask when a row has no visible column.
Matrix softmax_rows(const Matrix& a, const std::optional<CausalMask>& mask = std::nullopt);

void softmax_inplace(std::span<double> row);

struct MeanStd {
    double mean = 0.0;
    double sample_std = 0.0;
};

double mean(std::span<const double> v);

// Sample (n-1) standard deviation. Requires at least two values.
MeanStd mean_std(std::span<const double> v);

}  // namespace aircache
