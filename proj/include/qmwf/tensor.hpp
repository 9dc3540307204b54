#pragma once

// Dense small-order tensors with equal mode dimensions, CP factor sets, and
// the alternating least squares fit used by the verification tooling.

#include "qmwf/error.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qmwf {

inline constexpr std::size_t kDefaultElementCap = 10'000'000;

/// Number of elements of an order-`order` tensor with `dim` entries per mode.
/// Throws CapacityError when the count would exceed `cap`.
inline std::size_t checked_element_count(std::size_t order, std::size_t dim,
                                         std::size_t cap = kDefaultElementCap) {
    std::size_t count = 1;
    for (std::size_t i = 0; i < order; ++i) {
        if (dim != 0 && count > cap / dim) {
            throw CapacityError("tensor with order " + std::to_string(order) + " and dim " +
                                std::to_string(dim) + " exceeds element cap " +
                                std::to_string(cap));
        }
        count *= dim;
    }
    if (count > cap) {
        throw CapacityError("tensor element count " + std::to_string(count) +
                            " exceeds element cap " + std::to_string(cap));
    }
    return count;
}

/// Row-major N-order tensor, last index fastest.
class DenseTensor {
public:
    DenseTensor() = default;

    DenseTensor(std::size_t order, std::size_t dim, std::size_t cap = kDefaultElementCap)
        : order_(order), dim_(dim) {
        if (order == 0 || dim == 0) {
            throw DimensionError("tensor order and dim must be positive");
        }
        data_.assign(checked_element_count(order, dim, cap), 0.0);
    }

    DenseTensor(std::size_t order, std::size_t dim, std::vector<double> data)
        : order_(order), dim_(dim), data_(std::move(data)) {
        if (order == 0 || dim == 0) {
            throw DimensionError("tensor order and dim must be positive");
        }
        const auto expected = checked_element_count(order, dim, SIZE_MAX);
        if (data_.size() != expected) {
            throw DimensionError("tensor data has " + std::to_string(data_.size()) +
                                 " entries, expected " + std::to_string(expected));
        }
        for (double x : data_) {
            if (!std::isfinite(x)) throw NumericError("tensor entries must be finite");
        }
    }

    [[nodiscard]] std::size_t order() const { return order_; }
    [[nodiscard]] std::size_t dim() const { return dim_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] std::span<const double> data() const { return data_; }
    [[nodiscard]] std::span<double> data() { return data_; }

    [[nodiscard]] std::size_t flat_index(std::span<const std::size_t> coords) const {
        if (coords.size() != order_) {
            throw DimensionError("coordinate count does not match tensor order");
        }
        std::size_t flat = 0;
        for (std::size_t c : coords) {
            if (c >= dim_) throw IndexError("tensor coordinate out of range");
            flat = flat * dim_ + c;
        }
        return flat;
    }

    [[nodiscard]] std::vector<std::size_t> coordinates(std::size_t flat) const {
        if (flat >= data_.size()) throw IndexError("flat index out of range");
        std::vector<std::size_t> coords(order_);
        for (std::size_t i = order_; i-- > 0;) {
            coords[i] = flat % dim_;
            flat /= dim_;
        }
        return coords;
    }

    [[nodiscard]] double at(std::span<const std::size_t> coords) const {
        return data_[flat_index(coords)];
    }
    double& at(std::span<const std::size_t> coords) { return data_[flat_index(coords)]; }

    [[nodiscard]] double frobenius_norm() const {
        double s = 0.0;
        for (double x : data_) s += x * x;
        return std::sqrt(s);
    }

private:
    std::size_t order_ = 0;
    std::size_t dim_ = 0;
    std::vector<double> data_;
};

/// Weighted CP factor set: T = sum_r weight[r] * e(r,0) x ... x e(r,N-1).
///
/// Every factor vector has unit Euclidean norm. With `shared`, a single vector
/// per rank term is stored and reused at every position.
class CPFactors {
public:
    static constexpr double kUnitTolerance = 1e-8;

    CPFactors() = default;

    CPFactors(std::size_t order, std::size_t dim, std::vector<double> weights,
              std::vector<std::vector<double>> factors, bool shared = false)
        : order_(order), dim_(dim), shared_(shared), weights_(std::move(weights)),
          factors_(std::move(factors)) {
        if (order_ == 0 || dim_ == 0 || weights_.empty()) {
            throw DimensionError("CP factors need positive order, dim and rank");
        }
        const std::size_t expected = shared_ ? rank() : rank() * order_;
        if (factors_.size() != expected) {
            throw DimensionError("CP factor count " + std::to_string(factors_.size()) +
                                 " does not match expected " + std::to_string(expected));
        }
        for (double w : weights_) {
            if (!std::isfinite(w)) throw NumericError("CP weights must be finite");
        }
        for (const auto& f : factors_) {
            if (f.size() != dim_) throw DimensionError("CP factor vector has wrong length");
            double s = 0.0;
            for (double x : f) s += x * x;
            if (std::abs(std::sqrt(s) - 1.0) > kUnitTolerance) {
                throw DimensionError("CP factor vectors must have unit norm");
            }
        }
    }

    [[nodiscard]] std::size_t rank() const { return weights_.size(); }
    [[nodiscard]] std::size_t order() const { return order_; }
    [[nodiscard]] std::size_t dim() const { return dim_; }
    [[nodiscard]] bool shared() const { return shared_; }
    [[nodiscard]] std::span<const double> weights() const { return weights_; }

    [[nodiscard]] std::span<const double> factor(std::size_t r, std::size_t position) const {
        if (r >= rank() || position >= order_) throw IndexError("CP factor index out of range");
        return factors_[shared_ ? r : r * order_ + position];
    }

private:
    std::size_t order_ = 0;
    std::size_t dim_ = 0;
    bool shared_ = false;
    std::vector<double> weights_;
    std::vector<std::vector<double>> factors_;
};

/// Rank-1 tensor whose (h_1..h_N) entry is the product of vectors[i][h_i].
inline DenseTensor tensor_product(std::span<const std::vector<double>> vectors,
                                  std::size_t cap = kDefaultElementCap) {
    if (vectors.empty()) throw DimensionError("tensor_product needs at least one vector");
    const std::size_t dim = vectors.front().size();
    if (dim == 0) throw DimensionError("tensor_product vectors must be nonempty");
    for (const auto& v : vectors) {
        if (v.size() != dim) throw DimensionError("tensor_product vectors differ in length");
    }
    DenseTensor out(vectors.size(), dim, cap);
    auto data = out.data();
    // Expand one mode at a time: after step i the first dim^(i+1) entries hold
    // the product of the first i+1 vectors.
    data[0] = 1.0;
    std::size_t filled = 1;
    for (const auto& v : vectors) {
        for (std::size_t j = filled; j-- > 0;) {
            const double base = data[j];
            for (std::size_t h = 0; h < dim; ++h) data[j * dim + h] = base * v[h];
        }
        filled *= dim;
    }
    return out;
}

inline double inner_product(const DenseTensor& a, const DenseTensor& b) {
    if (a.order() != b.order() || a.dim() != b.dim()) {
        throw DimensionError("inner_product tensors differ in shape");
    }
    const auto x = a.data();
    const auto y = b.data();
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

inline DenseTensor cp_reconstruct(const CPFactors& f, std::size_t cap = kDefaultElementCap) {
    DenseTensor out(f.order(), f.dim(), cap);
    auto data = out.data();
    std::vector<std::vector<double>> vectors(f.order());
    for (std::size_t r = 0; r < f.rank(); ++r) {
        for (std::size_t i = 0; i < f.order(); ++i) {
            const auto e = f.factor(r, i);
            vectors[i].assign(e.begin(), e.end());
        }
        const DenseTensor term = tensor_product(vectors, cap);
        const auto t = term.data();
        const double w = f.weights()[r];
        for (std::size_t k = 0; k < data.size(); ++k) data[k] += w * t[k];
    }
    return out;
}

struct CpAlsResult {
    CPFactors factors;
    double relative_error = 0.0;
    int iterations = 0;
    /// Set when a normal-equation solve needed the ridge term.
    bool regularized = false;
};

namespace detail {

inline constexpr double kAlsRidge = 1e-9;

inline double relative_error(const DenseTensor& t, double t_norm,
                             const std::vector<Eigen::MatrixXd>& modes,
                             const Eigen::VectorXd& weights) {
    const std::size_t n_modes = modes.size();
    const std::size_t dim = t.dim();
    const auto rank = static_cast<Eigen::Index>(weights.size());
    std::vector<std::size_t> coords(n_modes, 0);
    double err2 = 0.0;
    const auto data = t.data();
    for (std::size_t flat = 0; flat < data.size(); ++flat) {
        double recon = 0.0;
        for (Eigen::Index r = 0; r < rank; ++r) {
            double p = weights[r];
            for (std::size_t m = 0; m < n_modes; ++m) {
                p *= modes[m](static_cast<Eigen::Index>(coords[m]), r);
            }
            recon += p;
        }
        const double d = data[flat] - recon;
        err2 += d * d;
        for (std::size_t m = n_modes; m-- > 0;) {
            if (++coords[m] < dim) break;
            coords[m] = 0;
        }
    }
    return std::sqrt(err2) / t_norm;
}

}  // namespace detail

/// Fits a rank-`rank` CP model to `t` by alternating least squares.
///
/// Factors are initialized from the leading eigenvectors of each mode's
/// unfolding Gram matrix (columns beyond `dim` are seeded random). For
/// third-order tensors with rank <= dim, a simultaneous-diagonalization start
/// replaces it when it fits better. Each sweep
/// renormalizes the factor columns and folds their norms into the weights,
/// then tries an extrapolated step along the sweep's update.
/// Iteration stops once the relative Frobenius error falls to `tol`, stalls,
/// or `max_iters` sweeps have run.
inline CpAlsResult cp_als(const DenseTensor& t, std::size_t rank, int max_iters, double tol,
                          std::uint64_t seed = 0) {
    if (rank == 0) throw DimensionError("cp_als rank must be at least 1");
    if (max_iters < 1) throw DimensionError("cp_als needs at least one iteration");
    for (double x : t.data()) {
        if (!std::isfinite(x)) throw NumericError("cp_als input must be finite");
    }
    const std::size_t n_modes = t.order();
    const std::size_t dim = t.dim();
    const auto M = static_cast<Eigen::Index>(dim);
    const auto R = static_cast<Eigen::Index>(rank);
    const double t_norm = t.frobenius_norm();

    CpAlsResult result;
    if (t_norm == 0.0) {
        std::vector<std::vector<double>> factors(rank * n_modes, std::vector<double>(dim, 0.0));
        for (auto& f : factors) f[0] = 1.0;
        result.factors = CPFactors(n_modes, dim, std::vector<double>(rank, 0.0), std::move(factors));
        return result;
    }

    const auto data = t.data();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<Eigen::MatrixXd> modes(n_modes, Eigen::MatrixXd::Zero(M, R));
    for (std::size_t n = 0; n < n_modes; ++n) {
        // Gram matrix of the mode-n unfolding.
        Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(M, M);
        const std::size_t stride = [&] {
            std::size_t s = 1;
            for (std::size_t m = n + 1; m < n_modes; ++m) s *= dim;
            return s;
        }();
        const std::size_t block = stride * dim;
        for (std::size_t outer = 0; outer < data.size(); outer += block) {
            for (std::size_t inner = 0; inner < stride; ++inner) {
                for (Eigen::Index a = 0; a < M; ++a) {
                    const double xa = data[outer + static_cast<std::size_t>(a) * stride + inner];
                    if (xa == 0.0) continue;
                    for (Eigen::Index b = 0; b < M; ++b) {
                        gram(a, b) += xa * data[outer + static_cast<std::size_t>(b) * stride + inner];
                    }
                }
            }
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
        const Eigen::MatrixXd& vecs = eig.eigenvectors();  // ascending eigenvalues
        for (Eigen::Index r = 0; r < R; ++r) {
            if (r < M) {
                modes[n].col(r) = vecs.col(M - 1 - r);
            } else {
                for (Eigen::Index h = 0; h < M; ++h) modes[n](h, r) = gauss(rng);
                modes[n].col(r).normalize();
            }
        }
    }

    Eigen::VectorXd weights = Eigen::VectorXd::Ones(R);
    std::vector<std::size_t> coords(n_modes);
    // One least-squares update of mode n; the new column norms become the weights.
    auto update_mode = [&](std::size_t n) {
        // MTTKRP: V(h, r) = sum over entries with coordinate h at mode n.
        Eigen::MatrixXd v = Eigen::MatrixXd::Zero(M, R);
        std::fill(coords.begin(), coords.end(), 0);
        for (std::size_t flat = 0; flat < data.size(); ++flat) {
            const double x = data[flat];
            if (x != 0.0) {
                for (Eigen::Index r = 0; r < R; ++r) {
                    double p = x;
                    for (std::size_t m = 0; m < n_modes; ++m) {
                        if (m != n) p *= modes[m](static_cast<Eigen::Index>(coords[m]), r);
                    }
                    v(static_cast<Eigen::Index>(coords[n]), r) += p;
                }
            }
            for (std::size_t m = n_modes; m-- > 0;) {
                if (++coords[m] < dim) break;
                coords[m] = 0;
            }
        }
        Eigen::MatrixXd gram = Eigen::MatrixXd::Ones(R, R);
        for (std::size_t m = 0; m < n_modes; ++m) {
            if (m != n) gram.array() *= (modes[m].transpose() * modes[m]).array();
        }
        Eigen::LLT<Eigen::MatrixXd> llt(gram);
        bool singular = llt.info() != Eigen::Success;
        if (!singular) {
            const double d_min = llt.matrixL().toDenseMatrix().diagonal().cwiseAbs().minCoeff();
            const double d_max = llt.matrixL().toDenseMatrix().diagonal().cwiseAbs().maxCoeff();
            singular = d_min <= 1e-12 * d_max;
        }
        if (singular) {
            result.regularized = true;
            gram += detail::kAlsRidge * Eigen::MatrixXd::Identity(R, R);
            llt.compute(gram);
        }
        modes[n] = llt.solve(v.transpose()).transpose();
        for (Eigen::Index r = 0; r < R; ++r) {
            const double norm = modes[n].col(r).norm();
            weights[r] = norm;
            if (norm > 0.0) {
                modes[n].col(r) /= norm;
            } else {
                modes[n].col(r).setZero();
                modes[n](0, r) = 1.0;
            }
        }
    };

    double prev_err = detail::relative_error(t, t_norm, modes, weights);
    if (n_modes == 3 && R <= M && R > 1) {
        // Simultaneous diagonalization: two random contractions of the last
        // mode, T_k = A D_k B^T, projected onto the leading subspaces of the
        // first two unfoldings. The eigenvectors of T_1 T_2^{-1} give A and
        // those of T_1^T T_2^{-T} give B; the last mode is then solved exactly.
        Eigen::MatrixXd t1 = Eigen::MatrixXd::Zero(M, M);
        Eigen::MatrixXd t2 = Eigen::MatrixXd::Zero(M, M);
        Eigen::VectorXd w1(M), w2(M);
        for (Eigen::Index l = 0; l < M; ++l) {
            w1[l] = gauss(rng);
            w2[l] = gauss(rng);
        }
        for (Eigen::Index i = 0; i < M; ++i) {
            for (Eigen::Index j = 0; j < M; ++j) {
                for (Eigen::Index l = 0; l < M; ++l) {
                    const double x = data[static_cast<std::size_t>((i * M + j) * M + l)];
                    t1(i, j) += x * w1[l];
                    t2(i, j) += x * w2[l];
                }
            }
        }
        const Eigen::MatrixXd u = modes[0];
        const Eigen::MatrixXd v = modes[1];
        const Eigen::MatrixXd p1 = u.transpose() * t1 * v;
        const Eigen::MatrixXd p2 = u.transpose() * t2 * v;
        Eigen::FullPivLU<Eigen::MatrixXd> lu(p2);
        if (lu.isInvertible()) {
            const Eigen::MatrixXd p2_inv = lu.inverse();
            Eigen::EigenSolver<Eigen::MatrixXd> ea(p1 * p2_inv);
            Eigen::EigenSolver<Eigen::MatrixXd> eb(p1.transpose() * p2_inv.transpose());
            if (ea.info() == Eigen::Success && eb.info() == Eigen::Success) {
                auto sorted = [&](const Eigen::EigenSolver<Eigen::MatrixXd>& e) {
                    std::vector<Eigen::Index> idx(static_cast<std::size_t>(R));
                    std::iota(idx.begin(), idx.end(), Eigen::Index{0});
                    std::sort(idx.begin(), idx.end(), [&](Eigen::Index a, Eigen::Index b) {
                        return e.eigenvalues()[a].real() < e.eigenvalues()[b].real();
                    });
                    return idx;
                };
                const auto ia = sorted(ea);
                const auto ib = sorted(eb);
                std::vector<Eigen::MatrixXd> trial = modes;
                for (Eigen::Index r = 0; r < R; ++r) {
                    trial[0].col(r) = u * ea.eigenvectors().col(ia[static_cast<std::size_t>(r)]).real();
                    trial[1].col(r) = v * eb.eigenvectors().col(ib[static_cast<std::size_t>(r)]).real();
                    for (std::size_t n = 0; n < 2; ++n) {
                        const double norm = trial[n].col(r).norm();
                        if (norm > 0.0) {
                            trial[n].col(r) /= norm;
                        } else {
                            trial[n].col(r).setZero();
                            trial[n](0, r) = 1.0;
                        }
                    }
                }
                std::vector<Eigen::MatrixXd> saved = modes;
                const bool saved_flag = result.regularized;
                modes = std::move(trial);
                update_mode(2);
                const double jen_err = detail::relative_error(t, t_norm, modes, weights);
                if (std::isfinite(jen_err) && jen_err < prev_err) {
                    prev_err = jen_err;
                } else {
                    modes = std::move(saved);
                    weights.setOnes();
                    result.regularized = saved_flag;
                }
            }
        }
    }
    double err = prev_err;
    std::vector<Eigen::MatrixXd> before;
    Eigen::VectorXd before_weights;
    for (int it = 1; it <= max_iters; ++it) {
        before = modes;
        before_weights = weights;
        for (std::size_t n = 0; n < n_modes; ++n) update_mode(n);
        err = detail::relative_error(t, t_norm, modes, weights);
        if (it > 2 && err > tol) {
            // Line search: extrapolate along the sweep's update, keep it if the
            // fit improves.
            const double step = std::cbrt(static_cast<double>(it));
            std::vector<Eigen::MatrixXd> trial(n_modes);
            Eigen::VectorXd trial_weights = Eigen::VectorXd::Ones(R);
            for (std::size_t n = 0; n < n_modes; ++n) {
                Eigen::MatrixXd cur = modes[n];
                Eigen::MatrixXd old = before[n];
                if (n + 1 == n_modes) {
                    cur = cur * weights.asDiagonal();
                    old = old * before_weights.asDiagonal();
                }
                trial[n] = cur + step * (cur - old);
                for (Eigen::Index r = 0; r < R; ++r) {
                    const double norm = trial[n].col(r).norm();
                    trial_weights[r] *= norm;
                    if (norm > 0.0) {
                        trial[n].col(r) /= norm;
                    } else {
                        trial[n](0, r) = 1.0;
                    }
                }
            }
            const double trial_err = detail::relative_error(t, t_norm, trial, trial_weights);
            if (trial_err < err) {
                modes = std::move(trial);
                weights = trial_weights;
                err = trial_err;
            }
        }
        result.iterations = it;
        if (err <= tol || std::abs(prev_err - err) < 1e-15) break;
        prev_err = err;
    }

    // Sort terms by weight, largest first.
    std::vector<Eigen::Index> order(static_cast<std::size_t>(R));
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return weights[a] > weights[b]; });
    std::vector<double> out_weights;
    std::vector<std::vector<double>> out_factors;
    for (Eigen::Index r : order) {
        out_weights.push_back(weights[r]);
        for (std::size_t n = 0; n < n_modes; ++n) {
            const Eigen::VectorXd col = modes[n].col(r);
            out_factors.emplace_back(col.data(), col.data() + col.size());
        }
    }
    result.factors = CPFactors(n_modes, dim, std::move(out_weights), std::move(out_factors));
    result.relative_error = err;
    return result;
}

}  // namespace qmwf
