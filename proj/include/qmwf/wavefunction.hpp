#pragma once

#include "qmwf/error.hpp"
#include "qmwf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qmwf {

inline constexpr double kNormTolerance = 1e-9;

/// Unit-norm real amplitude vector over the embedding-axis basis.
class StateVector {
public:
    StateVector() = default;

    /// Wraps amplitudes that are already normalized.
    explicit StateVector(std::vector<double> amplitudes) : amplitudes_(std::move(amplitudes)) {
        double s = 0.0;
        for (double a : amplitudes_) s += a * a;
        if (amplitudes_.empty() || std::abs(s - 1.0) > kNormTolerance) {
            throw DegenerateInputError("state amplitudes must have unit norm");
        }
    }

    [[nodiscard]] std::size_t dim() const { return amplitudes_.size(); }
    [[nodiscard]] std::span<const double> amplitudes() const { return amplitudes_; }
    [[nodiscard]] double operator[](std::size_t h) const { return amplitudes_[h]; }

private:
    std::vector<double> amplitudes_;
};

inline StateVector normalize(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    if (s == 0.0 || !std::isfinite(s)) {
        throw DegenerateInputError("cannot normalize a zero or non-finite vector");
    }
    const double inv = 1.0 / std::sqrt(s);
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out) x *= inv;
    return StateVector(std::move(out));
}

/// Probability of measuring basis direction h: the squared amplitude.
inline double basis_probability(const StateVector& s, std::size_t h) {
    if (h >= s.dim()) throw IndexError("basis index out of range");
    return s[h] * s[h];
}

/// N x M stack of per-word amplitude rows.
///
/// Rows produced by the embedding layer are unit-norm; the network accepts
/// arbitrary finite rows (padding and scaling checks rely on that), and
/// `is_normalized` reports whether the state-vector invariant holds.
class SentenceMatrix {
public:
    SentenceMatrix() = default;

    SentenceMatrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
        if (cols == 0) throw DimensionError("sentence matrix needs at least one column");
    }

    SentenceMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (cols == 0) throw DimensionError("sentence matrix needs at least one column");
        if (data_.size() != rows * cols) throw DimensionError("sentence matrix data size mismatch");
    }

    static SentenceMatrix from_rows(const std::vector<std::vector<double>>& rows) {
        if (rows.empty()) throw DimensionError("sentence matrix needs at least one row");
        SentenceMatrix s(rows.size(), rows.front().size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].size() != s.cols_) throw DimensionError("sentence rows differ in length");
            std::copy(rows[i].begin(), rows[i].end(), s.row(i).begin());
        }
        return s;
    }

    static SentenceMatrix from_states(std::span<const StateVector> states) {
        if (states.empty()) throw DimensionError("sentence matrix needs at least one row");
        SentenceMatrix s(states.size(), states.front().dim());
        for (std::size_t i = 0; i < states.size(); ++i) {
            if (states[i].dim() != s.cols_) throw DimensionError("state vectors differ in length");
            const auto a = states[i].amplitudes();
            std::copy(a.begin(), a.end(), s.row(i).begin());
        }
        return s;
    }

    [[nodiscard]] std::size_t rows() const { return rows_; }
    [[nodiscard]] std::size_t cols() const { return cols_; }
    [[nodiscard]] std::span<const double> data() const { return data_; }
    [[nodiscard]] std::span<double> data() { return data_; }

    [[nodiscard]] std::span<const double> row(std::size_t i) const {
        return {data_.data() + i * cols_, cols_};
    }
    [[nodiscard]] std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }

    [[nodiscard]] std::vector<std::vector<double>> row_vectors() const {
        std::vector<std::vector<double>> out;
        out.reserve(rows_);
        for (std::size_t i = 0; i < rows_; ++i) {
            const auto r = row(i);
            out.emplace_back(r.begin(), r.end());
        }
        return out;
    }

    [[nodiscard]] bool is_normalized(double tol = kNormTolerance) const {
        for (std::size_t i = 0; i < rows_; ++i) {
            double s = 0.0;
            for (double x : row(i)) s += x * x;
            if (std::abs(s - 1.0) > tol) return false;
        }
        return true;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Local product state of a sentence: the tensor product of its word states.
inline DenseTensor product_state(const SentenceMatrix& s, std::size_t cap = kDefaultElementCap) {
    if (s.rows() == 0) throw DimensionError("product_state needs at least one row");
    if (!s.is_normalized()) throw DegenerateInputError("product_state rows must be unit-norm");
    const auto rows = s.row_vectors();
    return tensor_product(rows, cap);
}

}  // namespace qmwf
