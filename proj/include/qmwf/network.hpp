#pragma once

// Convolution + product pooling realization of the sentence projection.
//
// A sentence S (N x M) is cut into P = N - patch + 1 windows of `patch`
// consecutive rows. Channel r responds to window i with
//     sigma(r, i) = <kernel(r, i), window(i)>
// and the channel output is v_r = t_r * prod_i sigma(r, i) (linear domain) or
// v_r = t_r * sum_i log(|sigma(r, i)| + eps) with a sign parity (log domain).

#include "qmwf/error.hpp"
#include "qmwf/tensor.hpp"
#include "qmwf/wavefunction.hpp"

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace qmwf {

struct QmwfConfig {
    std::size_t embed_dim = 300;
    std::size_t channels = 150;
    std::size_t patch_size = 1;
    bool shared_kernels = false;
    bool log_domain = false;
    double epsilon = 1e-6;
    /// Number of per-position kernels when kernels are unshared. Longer
    /// sentences are truncated to this many windows.
    std::size_t max_positions = 40;

    void validate() const {
        if (embed_dim < 1) throw ValidationError("embed_dim must be at least 1");
        if (channels < 1) throw ValidationError("channels must be at least 1");
        if (patch_size < 1 || patch_size > 3) throw ValidationError("patch_size must be 1, 2 or 3");
        if (!(epsilon > 0.0)) throw ValidationError("epsilon must be positive");
        if (max_positions < 1) throw ValidationError("max_positions must be at least 1");
    }

    [[nodiscard]] std::size_t window_size() const { return embed_dim * patch_size; }
    [[nodiscard]] std::size_t kernel_positions() const {
        return shared_kernels ? 1 : max_positions;
    }

    friend bool operator==(const QmwfConfig&, const QmwfConfig&) = default;
};

class QmwfModel {
public:
    QmwfModel() = default;

    /// Zero kernels, unit output weights.
    explicit QmwfModel(QmwfConfig config) : config_(config) {
        config_.validate();
        kernels_.assign(config_.channels * config_.kernel_positions() * config_.window_size(), 0.0);
        out_weights_.assign(config_.channels, 1.0);
    }

    QmwfModel(QmwfConfig config, std::vector<double> kernels, std::vector<double> out_weights)
        : config_(config), kernels_(std::move(kernels)), out_weights_(std::move(out_weights)) {
        config_.validate();
        if (kernels_.size() != config_.channels * config_.kernel_positions() * config_.window_size()) {
            throw DimensionError("kernel array does not match model config");
        }
        if (out_weights_.size() != config_.channels) {
            throw DimensionError("output weight count does not match channels");
        }
        for (double x : kernels_) {
            if (!std::isfinite(x)) throw NumericError("kernel weights must be finite");
        }
        for (double x : out_weights_) {
            if (!std::isfinite(x)) throw NumericError("output weights must be finite");
        }
    }

    /// Kernels uniform on [-1/sqrt(W), 1/sqrt(W)] for window size W; output weights 1.
    template <class Rng>
    static QmwfModel random(QmwfConfig config, Rng& rng) {
        QmwfModel m(config);
        const double bound = 1.0 / std::sqrt(static_cast<double>(config.window_size()));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& k : m.kernels_) k = u(rng);
        return m;
    }

    [[nodiscard]] const QmwfConfig& config() const { return config_; }

    [[nodiscard]] std::span<const double> kernel(std::size_t channel, std::size_t position) const {
        return {kernels_.data() + kernel_offset(channel, position), config_.window_size()};
    }
    [[nodiscard]] std::span<double> kernel(std::size_t channel, std::size_t position) {
        return {kernels_.data() + kernel_offset(channel, position), config_.window_size()};
    }

    [[nodiscard]] std::span<const double> kernels() const { return kernels_; }
    [[nodiscard]] std::span<double> kernels() { return kernels_; }
    [[nodiscard]] std::span<const double> out_weights() const { return out_weights_; }
    [[nodiscard]] std::span<double> out_weights() { return out_weights_; }

    [[nodiscard]] std::size_t kernel_offset(std::size_t channel, std::size_t position) const {
        const std::size_t p = config_.shared_kernels ? 0 : position;
        if (channel >= config_.channels || p >= config_.kernel_positions()) {
            throw IndexError("kernel index out of range");
        }
        return (channel * config_.kernel_positions() + p) * config_.window_size();
    }

private:
    QmwfConfig config_;
    std::vector<double> kernels_;
    std::vector<double> out_weights_;
};

/// Sentence vector (v_1..v_R). In the log domain `signs` holds the parity of
/// negative convolution responses per channel; it is empty otherwise.
struct Representation {
    std::vector<double> values;
    std::vector<double> signs;
};

/// Channel-by-position matrix of convolution responses.
struct ConvResponse {
    std::size_t channels = 0;
    std::size_t positions = 0;
    std::vector<double> data;

    [[nodiscard]] double operator()(std::size_t r, std::size_t i) const {
        return data[r * positions + i];
    }
    double& operator()(std::size_t r, std::size_t i) { return data[r * positions + i]; }
    [[nodiscard]] std::span<const double> channel(std::size_t r) const {
        return {data.data() + r * positions, positions};
    }
};

/// Windows of `patch` consecutive rows concatenated into (patch * M)-vectors.
///
/// A sentence shorter than the patch yields one window zero-padded at the end.
/// When `max_windows` is nonzero, trailing windows beyond it are dropped.
inline SentenceMatrix make_windows(const SentenceMatrix& s, std::size_t patch,
                                   std::size_t max_windows = 0) {
    if (s.rows() == 0) throw DimensionError("sentence has no rows");
    const std::size_t m = s.cols();
    std::size_t count = s.rows() >= patch ? s.rows() - patch + 1 : 1;
    if (max_windows != 0 && count > max_windows) count = max_windows;
    SentenceMatrix w(count, m * patch);
    for (std::size_t i = 0; i < count; ++i) {
        auto out = w.row(i);
        for (std::size_t k = 0; k < patch; ++k) {
            if (i + k >= s.rows()) break;
            const auto r = s.row(i + k);
            std::copy(r.begin(), r.end(), out.begin() + static_cast<std::ptrdiff_t>(k * m));
        }
    }
    return w;
}

namespace detail {

inline std::size_t window_limit(const QmwfConfig& c) {
    return c.shared_kernels ? 0 : c.max_positions;
}

inline ConvResponse convolve_windows(const SentenceMatrix& windows, const QmwfModel& m) {
    const auto& c = m.config();
    if (windows.cols() != c.window_size()) {
        throw DimensionError("window width " + std::to_string(windows.cols()) +
                             " does not match model window size " +
                             std::to_string(c.window_size()));
    }
    ConvResponse out{c.channels, windows.rows(), std::vector<double>(c.channels * windows.rows())};
    for (std::size_t r = 0; r < c.channels; ++r) {
        for (std::size_t i = 0; i < windows.rows(); ++i) {
            const auto k = m.kernel(r, i);
            const auto x = windows.row(i);
            double s = 0.0;
            for (std::size_t h = 0; h < x.size(); ++h) s += k[h] * x[h];
            out(r, i) = s;
        }
    }
    return out;
}

}  // namespace detail

inline ConvResponse convolve(const SentenceMatrix& s, const QmwfModel& m) {
    if (s.cols() != m.config().embed_dim) {
        throw DimensionError("sentence row length " + std::to_string(s.cols()) +
                             " does not match embed_dim " + std::to_string(m.config().embed_dim));
    }
    const auto windows = make_windows(s, m.config().patch_size, detail::window_limit(m.config()));
    return detail::convolve_windows(windows, m);
}

inline std::vector<double> product_pool(const ConvResponse& sigma) {
    if (sigma.channels == 0 || sigma.positions == 0) {
        throw DimensionError("product_pool needs a nonempty response matrix");
    }
    std::vector<double> out(sigma.channels, 1.0);
    for (std::size_t r = 0; r < sigma.channels; ++r) {
        for (double x : sigma.channel(r)) out[r] *= x;
    }
    return out;
}

struct LogPool {
    /// sum_i log(|sigma(r, i)| + eps) per channel.
    std::vector<double> log_magnitude;
    /// +1 or -1: parity of negative responses per channel.
    std::vector<double> sign;
};

/// Log-domain product pooling. `epsilon` may be zero only when no response is zero.
inline LogPool log_product_pool(const ConvResponse& sigma, double epsilon) {
    if (sigma.channels == 0 || sigma.positions == 0) {
        throw DimensionError("log_product_pool needs a nonempty response matrix");
    }
    LogPool out{std::vector<double>(sigma.channels, 0.0), std::vector<double>(sigma.channels, 1.0)};
    for (std::size_t r = 0; r < sigma.channels; ++r) {
        for (double x : sigma.channel(r)) {
            out.log_magnitude[r] += std::log(std::abs(x) + epsilon);
            if (x < 0.0) out.sign[r] = -out.sign[r];
        }
    }
    return out;
}

/// Intermediate values of one forward pass, kept for the backward pass.
struct ForwardTrace {
    SentenceMatrix windows;
    ConvResponse sigma;
    /// Linear: prod_i sigma. Log: sum_i log(|sigma| + eps).
    std::vector<double> pooled;
    Representation output;
};

inline ForwardTrace forward_trace(const SentenceMatrix& s, const QmwfModel& m) {
    const auto& c = m.config();
    if (s.cols() != c.embed_dim) {
        throw DimensionError("sentence row length " + std::to_string(s.cols()) +
                             " does not match embed_dim " + std::to_string(c.embed_dim));
    }
    ForwardTrace t;
    t.windows = make_windows(s, c.patch_size, detail::window_limit(c));
    t.sigma = detail::convolve_windows(t.windows, m);
    const auto w = m.out_weights();
    if (c.log_domain) {
        auto lp = log_product_pool(t.sigma, c.epsilon);
        t.pooled = std::move(lp.log_magnitude);
        t.output.signs = std::move(lp.sign);
    } else {
        t.pooled = product_pool(t.sigma);
    }
    t.output.values.resize(c.channels);
    for (std::size_t r = 0; r < c.channels; ++r) t.output.values[r] = w[r] * t.pooled[r];
    return t;
}

inline Representation forward(const SentenceMatrix& s, const QmwfModel& m) {
    return forward_trace(s, m).output;
}

/// Inner product of question and answer representations. When both carry
/// log-domain sign parities, each channel term is multiplied by them.
inline double match_score(const Representation& q, const Representation& a) {
    if (q.values.size() != a.values.size()) {
        throw DimensionError("representations differ in length");
    }
    if (q.signs.empty() != a.signs.empty()) {
        throw DimensionError("cannot match a log-domain representation with a linear one");
    }
    const bool signed_terms = !q.signs.empty();
    double s = 0.0;
    for (std::size_t r = 0; r < q.values.size(); ++r) {
        double term = q.values[r] * a.values[r];
        if (signed_terms) term *= q.signs[r] * a.signs[r];
        s += term;
    }
    return s;
}

/// The CP factor set a linear, patch-1 model realizes on sentences of length
/// `length`. Kernel norms are folded into the weights so factors are unit
/// vectors; a zero kernel yields weight 0.
inline CPFactors to_cp_factors(const QmwfModel& m, std::size_t length) {
    const auto& c = m.config();
    if (c.patch_size != 1) throw DimensionError("CP view requires patch_size 1");
    if (length == 0) throw DimensionError("CP view requires a positive sentence length");
    if (!c.shared_kernels && length > c.max_positions) {
        throw DimensionError("sentence length exceeds max_positions");
    }
    const std::size_t stored = c.shared_kernels ? 1 : length;
    std::vector<double> weights(c.channels);
    std::vector<std::vector<double>> factors;
    for (std::size_t r = 0; r < c.channels; ++r) {
        double w = m.out_weights()[r];
        for (std::size_t i = 0; i < stored; ++i) {
            const auto k = m.kernel(r, i);
            double n2 = 0.0;
            for (double x : k) n2 += x * x;
            const double norm = std::sqrt(n2);
            std::vector<double> e(k.begin(), k.end());
            if (norm > 0.0) {
                for (double& x : e) x /= norm;
            } else {
                std::fill(e.begin(), e.end(), 0.0);
                e[0] = 1.0;
            }
            w *= c.shared_kernels ? std::pow(norm, static_cast<double>(length)) : norm;
            factors.push_back(std::move(e));
        }
        weights[r] = w;
    }
    return CPFactors(length, c.embed_dim, std::move(weights), std::move(factors), c.shared_kernels);
}

}  // namespace qmwf
