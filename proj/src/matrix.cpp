#include "aircache/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "aircache/error.hpp"

namespace aircache {

const char* to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Shape: return "shape error";
        case ErrorKind::DegenerateMask: return "degenerate mask";
        case ErrorKind::InsufficientData: return "insufficient data";
        case ErrorKind::EmptyText: return "empty text";
        case ErrorKind::EmptyWindow: return "empty window";
        case ErrorKind::Config: return "config error";
        case ErrorKind::Io: return "I/O error";
    }
    return "error";
}

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw Error(ErrorKind::Shape, "data length " + std::to_string(data_.size()) + " != " +
                                          std::to_string(rows_) + "x" + std::to_string(cols_));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::select_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows_) throw Error(ErrorKind::Shape, "row index out of range");
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * cols_), cols_,
                    out.data_.begin() + static_cast<std::ptrdiff_t>(i * cols_));
    }
    return out;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t end) const {
    if (begin > end || end > rows_) throw Error(ErrorKind::Shape, "row slice out of range");
    Matrix out(end - begin, cols_);
    std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_),
              data_.begin() + static_cast<std::ptrdiff_t>(end * cols_), out.data_.begin());
    return out;
}

Matrix Matrix::slice_cols(std::size_t begin, std::size_t end) const {
    if (begin > end || end > cols_) throw Error(ErrorKind::Shape, "column slice out of range");
    Matrix out(rows_, end - begin);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = (*this)(r, c);
    }
    return out;
}

Matrix Matrix::transpose() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r) {
        for (std::size_t c = 0; c < cols_; ++c) out(c, r) = (*this)(r, c);
    }
    return out;
}

void Matrix::append_row(std::span<const double> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_) {
        throw Error(ErrorKind::Shape, "row width " + std::to_string(values.size()) + " != " +
                                          std::to_string(cols_));
    }
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw Error(ErrorKind::Shape, "matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                          " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Matrix out(a.rows(), b.cols());
    // i-k-j order keeps the inner loop contiguous in both b and out.
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
        }
    }
    return out;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw Error(ErrorKind::Shape, "matmul_transposed inner dims " + std::to_string(a.cols()) +
                                          " vs " + std::to_string(b.cols()));
    }
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto a_row = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            auto b_row = b.row(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a_row[k] * b_row[k];
            out(i, j) = acc;
        }
    }
    return out;
}

CausalMask CausalMask::lower_triangular(std::size_t n) {
    CausalMask mask;
    mask.first_visible_row.resize(n);
    for (std::size_t c = 0; c < n; ++c) mask.first_visible_row[c] = c;
    return mask;
}

void softmax_inplace(std::span<double> row) {
    double peak = -std::numeric_limits<double>::infinity();
    for (double v : row) peak = std::max(peak, v);
    if (!std::isfinite(peak)) throw Error(ErrorKind::DegenerateMask, "row has no finite entry");
    double total = 0.0;
    for (double& v : row) {
        v = std::exp(v - peak);
        total += v;
    }
    for (double& v : row) v /= total;
}

Matrix softmax_rows(const Matrix& a, const std::optional<CausalMask>& mask) {
    Matrix out(a.rows(), a.cols());
    std::vector<std::size_t> visible;
    visible.reserve(a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        visible.clear();
        for (std::size_t c = 0; c < a.cols(); ++c) {
            if (!mask || !mask->masked(r, c)) visible.push_back(c);
        }
        if (visible.empty()) {
            throw Error(ErrorKind::DegenerateMask, "row " + std::to_string(r) + " is fully masked");
        }
        double peak = -std::numeric_limits<double>::infinity();
        for (std::size_t c : visible) peak = std::max(peak, a(r, c));
        if (!std::isfinite(peak)) throw Error(ErrorKind::DegenerateMask, "non-finite logits");
        double total = 0.0;
        for (std::size_t c : visible) {
            const double e = std::exp(a(r, c) - peak);
            out(r, c) = e;
            total += e;
        }
        for (std::size_t c : visible) out(r, c) /= total;
    }
    return out;
}

double mean(std::span<const double> v) {
    if (v.empty()) throw Error(ErrorKind::InsufficientData, "mean of empty vector");
    double total = 0.0;
    for (double x : v) total += x;
    return total / static_cast<double>(v.size());
}

MeanStd mean_std(std::span<const double> v) {
    if (v.size() < 2) {
        throw Error(ErrorKind::InsufficientData, "sample std needs >= 2 values, got " + std::to_string(v.size()));
    }
    MeanStd out;
    out.mean = mean(v);
    double ss = 0.0;
    for (double x : v) ss += (x - out.mean) * (x - out.mean);
    out.sample_std = std::sqrt(ss / static_cast<double>(v.size() - 1));
    return out;
}

}  // namespace aircache
