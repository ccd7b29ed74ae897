#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "conealign/error.hpp"

namespace conealign {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EigenMap = Eigen::Map<RowMajor>;
using ConstEigenMap = Eigen::Map<const RowMajor>;

/// Dense row-major matrix of 64-bit floats.
///
/// Activations (n x d), dictionaries (c x d, one atom per row) and code
/// matrices (n x c) all use this type.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;

    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    Matrix(std::size_t r, std::size_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols) {
            throw DimensionError("matrix data length " + std::to_string(data.size()) +
                                 " does not match shape " + std::to_string(rows) + "x" +
                                 std::to_string(cols));
        }
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> init) {
        Matrix m;
        m.rows = init.size();
        m.cols = m.rows ? init.begin()->size() : 0;
        m.data.reserve(m.rows * m.cols);
        for (const auto& r : init) {
            if (r.size() != m.cols) throw DimensionError("ragged initializer list");
            m.data.insert(m.data.end(), r.begin(), r.end());
        }
        return m;
    }

    static Matrix from_eigen(const RowMajor& e) {
        Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
        std::copy(e.data(), e.data() + e.size(), m.data.begin());
        return m;
    }

    template <class Derived>
    static Matrix from_eigen(const Eigen::MatrixBase<Derived>& e) {
        return from_eigen(RowMajor(e));
    }

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    EigenMap eigen() { return {data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)}; }
    ConstEigenMap eigen() const {
        return {data.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)};
    }

    bool empty() const noexcept { return data.empty(); }

    bool operator==(const Matrix&) const = default;
};

/// Integer class labels in [0, num_classes).
struct LabelVector {
    std::vector<std::int64_t> values;
    std::size_t num_classes = 0;

    std::size_t size() const noexcept { return values.size(); }

    static LabelVector from_values(std::vector<std::int64_t> v) {
        LabelVector out;
        std::int64_t hi = -1;
        for (auto x : v) {
            if (x < 0) throw DataError("negative class label " + std::to_string(x));
            hi = std::max(hi, x);
        }
        out.values = std::move(v);
        out.num_classes = static_cast<std::size_t>(hi + 1);
        return out;
    }

    bool operator==(const LabelVector&) const = default;
};

inline Matrix transpose(const Matrix& m) {
    Matrix t(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
    return t;
}

inline Matrix select_rows(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), m.cols);
    for (std::size_t k = 0; k < idx.size(); ++k) {
        auto src = m.row(idx[k]);
        std::copy(src.begin(), src.end(), out.row(k).begin());
    }
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline bool all_finite(const Matrix& m) {
    return std::all_of(m.data.begin(), m.data.end(), [](double x) { return std::isfinite(x); });
}

inline std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

/// Views a 1xN or Nx1 matrix as a flat vector.
inline std::vector<double> as_vector(const Matrix& m) {
    if (m.rows != 1 && m.cols != 1) {
        throw DimensionError("expected a vector, got matrix of shape " + shape_str(m));
    }
    return m.data;
}

inline Matrix row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

} // namespace conealign
