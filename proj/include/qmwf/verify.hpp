#pragma once

// Self-contained property suite behind `qmwf verify`. Every check generates
// its own random instances from one seed and reports the worst deviation.
// A failing check carries the offending instance as JSON for replay.

#include "qmwf/metrics.hpp"
#include "qmwf/network.hpp"
#include "qmwf/projection.hpp"
#include "qmwf/random.hpp"
#include "qmwf/tensor.hpp"
#include "qmwf/training.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace qmwf {

struct VerifyOptions {
    std::uint64_t seed = 1;
    /// Adds 1e-3 to every kernel entry after the CP oracle is built, so the
    /// oracle identity must fail.
    bool inject_fault = false;
    std::size_t oracle_instances = 1000;
    std::size_t gradient_configs = 10;
    std::size_t als_seeds = 20;
    std::size_t permutation_instances = 10;
    std::size_t permutations = 100;
    std::size_t metric_groups = 1000;
    std::size_t random_guess_groups = 10000;
};

struct CheckResult {
    std::string name;
    bool passed = true;
    double max_error = 0.0;
    double tolerance = 0.0;
    std::size_t cases = 0;
    double seconds = 0.0;
    nlohmann::json failing_instance;
};

struct VerifyReport {
    std::vector<CheckResult> checks;

    [[nodiscard]] bool passed() const {
        return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
    }
};

namespace detail {

inline nlohmann::json matrix_json(const SentenceMatrix& s) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < s.rows(); ++i) {
        const auto r = s.row(i);
        rows.push_back(std::vector<double>(r.begin(), r.end()));
    }
    return rows;
}

inline nlohmann::json model_json(const QmwfModel& m) {
    const auto& c = m.config();
    const auto k = m.kernels();
    const auto t = m.out_weights();
    return {{"embed_dim", c.embed_dim}, {"channels", c.channels}, {"patch_size", c.patch_size},
            {"shared_kernels", c.shared_kernels}, {"log_domain", c.log_domain}, {"epsilon", c.epsilon},
            {"max_positions", c.max_positions}, {"kernels", std::vector<double>(k.begin(), k.end())},
            {"out_weights", std::vector<double>(t.begin(), t.end())}};
}

inline SentenceMatrix random_unit_sentence(std::mt19937_64& rng, std::size_t n, std::size_t m) {
    std::normal_distribution<double> g(0.0, 1.0);
    SentenceMatrix s(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = s.row(i);
        double norm = 0.0;
        while (norm < 1e-6) {
            norm = 0.0;
            for (double& x : row) {
                x = g(rng);
                norm += x * x;
            }
            norm = std::sqrt(norm);
        }
        for (double& x : row) x /= norm;
    }
    return s;
}

template <class Rng>
QmwfModel random_verify_model(const QmwfConfig& c, Rng& rng) {
    auto m = QmwfModel::random(c, rng);
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    for (double& t : m.out_weights()) t = u(rng);
    return m;
}

class Stopwatch {
public:
    [[nodiscard]] double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline void record(CheckResult& r, double err, const nlohmann::json& instance) {
    ++r.cases;
    const bool bad = !(err <= r.tolerance);
    if (std::isnan(err) || err > r.max_error) r.max_error = err;
    if (bad && r.passed) {
        r.passed = false;
        r.failing_instance = instance;
    }
}

/// Ranks by pairwise comparison (earlier index wins ties).
inline std::vector<std::size_t> brute_ranks(const std::vector<double>& s) {
    std::vector<std::size_t> rank(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        std::size_t ahead = 0;
        for (std::size_t j = 0; j < s.size(); ++j) ahead += (s[j] > s[i] || (s[j] == s[i] && j < i)) ? 1 : 0;
        rank[i] = ahead + 1;
    }
    return rank;
}

}  // namespace detail

/// Sum of network outputs against the materialized-tensor projection.
inline CheckResult check_oracle_identity(const VerifyOptions& opts) {
    detail::Stopwatch clock;
    CheckResult r{"oracle_identity", true, 0.0, 1e-9, 0, 0.0, {}};
    auto rng = substream(opts.seed, "verify.oracle");
    const std::size_t ns[] = {1, 2, 3, 4};
    const std::size_t ms[] = {2, 3, 5};
    const std::size_t rs[] = {1, 3, 6};
    for (std::size_t k = 0; k < opts.oracle_instances; ++k) {
        QmwfConfig c;
        c.embed_dim = ms[(k / 4) % 3];
        c.channels = rs[(k / 12) % 3];
        c.max_positions = 4;
        const std::size_t n = ns[k % 4];
        auto model = detail::random_verify_model(c, rng);
        const auto s = detail::random_unit_sentence(rng, n, c.embed_dim);
        const auto factors = to_cp_factors(model, n);
        if (opts.inject_fault) {
            for (double& x : model.kernels()) x += 1e-3;
        }
        const auto v = forward(s, model).values;
        const double net = std::accumulate(v.begin(), v.end(), 0.0);
        const double oracle = projection_bruteforce(s, factors);
        const double err = std::abs(net - oracle) / std::max(1.0, std::abs(oracle));
        detail::record(r, err, {{"model", detail::model_json(model)}, {"sentence", detail::matrix_json(s)},
                                {"network_sum", net}, {"oracle", oracle}});
    }
    r.seconds = clock.seconds();
    return r;
}

namespace detail {

inline double gradient_block_error(std::span<const double> analytic, std::span<const double> numeric) {
    double diff = 0.0;
    double scale = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
        scale = std::max(scale, std::abs(numeric[i]));
    }
    return diff / std::max(scale, 1e-8);
}

}  // namespace detail

/// Analytic triple gradients (kernels, output weights and sentence rows)
/// against central differences with h = 1e-5.
inline CheckResult check_gradients(const VerifyOptions& opts) {
    detail::Stopwatch clock;
    CheckResult r{"gradient_check", true, 0.0, 1e-4, 0, 0.0, {}};
    auto rng = substream(opts.seed, "verify.gradients");
    constexpr double h = 1e-5;
    std::uniform_int_distribution<std::size_t> pick_n(1, 4), pick_m(2, 5), pick_r(1, 4), pick_p(1, 2);
    for (std::size_t k = 0; k < opts.gradient_configs; ++k) {
        QmwfConfig c;
        c.embed_dim = pick_m(rng);
        c.channels = pick_r(rng);
        c.patch_size = pick_p(rng);
        c.shared_kernels = k % 3 == 1;
        c.log_domain = k % 2 == 1;
        c.max_positions = 4;
        QmwfModel model(c);
        SentenceMatrix q, pos, neg;
        HyperParams hp;
        hp.l2_lambda = 1e-3;
        auto max_abs = [](std::span<const double> v) {
            double m = 0.0;
            for (double x : v) m = std::max(m, std::abs(x));
            return m;
        };
        // Redraw until every response is away from zero, where the log-domain
        // derivative is too steep for finite differences, and every gradient
        // block is large enough to compare against difference roundoff.
        for (int attempt = 0; attempt < 1000; ++attempt) {
            model = detail::random_verify_model(c, rng);
            q = detail::random_unit_sentence(rng, pick_n(rng), c.embed_dim);
            pos = detail::random_unit_sentence(rng, pick_n(rng), c.embed_dim);
            neg = detail::random_unit_sentence(rng, pick_n(rng), c.embed_dim);
            double smallest = 1e300;
            for (const auto* s : {&q, &pos, &neg}) {
                for (double x : forward_trace(*s, model).sigma.data) smallest = std::min(smallest, std::abs(x));
            }
            // Margin just past the score gap: the hinge is active but the loss
            // stays small, so differences do not cancel against a large constant.
            const auto vq = forward(q, model);
            const double gap = match_score(vq, forward(pos, model)) - match_score(vq, forward(neg, model));
            hp.margin = std::abs(gap) + 1.0 + std::max(gap, 0.0);
            const auto probe = triple_backward(model, q, pos, neg, hp.margin);
            const double scale = std::min({max_abs(probe.kernels), max_abs(probe.out_weights),
                                           max_abs(probe.d_question.data()), max_abs(probe.d_positive.data()),
                                           max_abs(probe.d_negative.data())});
            if (smallest >= 0.05 && scale >= 1e-3) break;
        }
        const auto [loss, g] = backward(model, q, pos, neg, hp);
        const auto tb = triple_backward(model, q, pos, neg, hp.margin);
        auto loss_at = [&](const QmwfModel& m, const SentenceMatrix& a, const SentenceMatrix& b,
                           const SentenceMatrix& cc) { return backward(m, a, b, cc, hp).first; };
        auto numeric = [&](std::span<double> params, auto&& eval) {
            std::vector<double> out(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                const double orig = params[i];
                params[i] = orig + h;
                const double up = eval();
                params[i] = orig - h;
                const double down = eval();
                params[i] = orig;
                out[i] = (up - down) / (2.0 * h);
            }
            return out;
        };
        // The sentence-row gradients exclude the L2 term, which does not depend on rows.
        auto eval_model = [&] { return loss_at(model, q, pos, neg); };
        const auto nk = numeric(model.kernels(), eval_model);
        const auto nt = numeric(model.out_weights(), eval_model);
        const auto nq = numeric(q.data(), eval_model);
        const auto np = numeric(pos.data(), eval_model);
        const auto nn = numeric(neg.data(), eval_model);
        const double errs[] = {detail::gradient_block_error(g.kernels, nk),
                               detail::gradient_block_error(g.out_weights, nt),
                               detail::gradient_block_error(tb.d_question.data(), nq),
                               detail::gradient_block_error(tb.d_positive.data(), np),
                               detail::gradient_block_error(tb.d_negative.data(), nn)};
        const char* blocks[] = {"kernels", "out_weights", "question_rows", "positive_rows", "negative_rows"};
        for (std::size_t b = 0; b < 5; ++b) {
            detail::record(r, errs[b], {{"block", blocks[b]}, {"model", detail::model_json(model)},
                                        {"question", detail::matrix_json(q)},
                                        {"positive", detail::matrix_json(pos)},
                                        {"negative", detail::matrix_json(neg)}, {"margin", hp.margin},
                                        {"l2_lambda", hp.l2_lambda}, {"loss", loss}});
        }
    }
    r.seconds = clock.seconds();
    return r;
}

/// ALS on synthetic rank-3 4x4x4 tensors must reach 1e-6 relative error
/// within 500 sweeps.
inline CheckResult check_cp_round_trip(const VerifyOptions& opts) {
    detail::Stopwatch clock;
    CheckResult r{"cp_round_trip", true, 0.0, 1e-6, 0, 0.0, {}};
    for (std::size_t k = 0; k < opts.als_seeds; ++k) {
        auto rng = substream(opts.seed + k, "verify.als");
        std::normal_distribution<double> g(0.0, 1.0);
        std::uniform_real_distribution<double> w(0.5, 2.0);
        std::vector<double> weights(3);
        std::vector<std::vector<double>> factors;
        for (auto& x : weights) x = w(rng);
        for (std::size_t f = 0; f < 9; ++f) {
            std::vector<double> v(4);
            double s = 0.0;
            for (double& x : v) {
                x = g(rng);
                s += x * x;
            }
            for (double& x : v) x /= std::sqrt(s);
            factors.push_back(std::move(v));
        }
        const auto t = cp_reconstruct(CPFactors(3, 4, weights, factors));
        const auto fit = cp_als(t, 3, 500, 1e-9, opts.seed + k);
        const double err = fit.iterations <= 500 ? fit.relative_error : 1e300;
        detail::record(r, err, {{"weights", weights}, {"factors", factors}, {"iterations", fit.iterations},
                                {"relative_error", fit.relative_error}});
    }
    r.seconds = clock.seconds();
    return r;
}

/// Library metrics against pairwise brute force (exact equality), plus the
/// random-guess P@1 of one-positive-in-five groups (0.200 +- 0.01).
inline CheckResult check_metric_oracles(const VerifyOptions& opts) {
    detail::Stopwatch clock;
    CheckResult r{"metric_oracles", true, 0.0, 0.0, 0, 0.0, {}};
    auto rng = substream(opts.seed, "verify.metrics");
    std::uniform_int_distribution<int> size(1, 7), coarse(0, 3);
    std::bernoulli_distribution label(0.4);
    for (std::size_t k = 0; k < opts.metric_groups; ++k) {
        const int n = size(rng);
        std::vector<double> s(static_cast<std::size_t>(n));
        std::vector<int> l(s.size());
        for (std::size_t i = 0; i < s.size(); ++i) {
            s[i] = coarse(rng);
            l[i] = label(rng) ? 1 : 0;
        }
        l[std::uniform_int_distribution<std::size_t>(0, s.size() - 1)(rng)] = 1;
        const auto rank = detail::brute_ranks(s);
        std::vector<double> terms(s.size() + 1, -1.0);
        std::size_t first = s.size() + 1;
        int positives = 0;
        double top = 0.0;
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (rank[i] == 1) top = l[i] == 1 ? 1.0 : 0.0;
            if (l[i] != 1) continue;
            ++positives;
            first = std::min(first, rank[i]);
            std::size_t hits = 0;
            for (std::size_t j = 0; j < s.size(); ++j) hits += (l[j] == 1 && rank[j] <= rank[i]) ? 1 : 0;
            terms[rank[i]] = static_cast<double>(hits) / static_cast<double>(rank[i]);
        }
        double ap = 0.0;
        for (double t : terms) {
            if (t >= 0.0) ap += t;
        }
        ap /= positives;
        const RankedCandidates rc("q", s, l);
        const std::vector<RankedCandidates> one{rc};
        const double err = std::max({std::abs(average_precision(rc) - ap),
                                     std::abs(reciprocal_rank(rc) - 1.0 / static_cast<double>(first)),
                                     std::abs(p_at_1(one) - top)});
        detail::record(r, err, {{"scores", s}, {"labels", l}});
    }
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<RankedCandidates> groups;
    groups.reserve(opts.random_guess_groups);
    const std::vector<int> labels{1, 0, 0, 0, 0};
    for (std::size_t k = 0; k < opts.random_guess_groups; ++k) {
        std::vector<double> s(5);
        for (double& x : s) x = u(rng);
        groups.emplace_back("q", s, labels);
    }
    if (!groups.empty()) {
        const double p1 = p_at_1(groups);
        ++r.cases;
        if (std::abs(p1 - 0.2) > 0.01 && r.passed) {
            r.passed = false;
            r.failing_instance = {{"random_guess_p1", p1}, {"groups", groups.size()}};
        }
    }
    r.seconds = clock.seconds();
    return r;
}

/// Shared kernels with single-word patches: output invariant to row order.
inline CheckResult check_permutation_invariance(const VerifyOptions& opts) {
    detail::Stopwatch clock;
    CheckResult r{"permutation_invariance", true, 0.0, 1e-12, 0, 0.0, {}};
    auto rng = substream(opts.seed, "verify.permutation");
    for (std::size_t k = 0; k < opts.permutation_instances; ++k) {
        QmwfConfig c;
        c.embed_dim = 2 + k % 4;
        c.channels = 1 + k % 6;
        c.shared_kernels = true;
        c.max_positions = 8;
        const auto model = detail::random_verify_model(c, rng);
        const std::size_t n = 2 + k % 5;
        const auto s = detail::random_unit_sentence(rng, n, c.embed_dim);
        const auto base = forward(s, model).values;
        std::vector<std::size_t> perm(n);
        std::iota(perm.begin(), perm.end(), 0);
        for (std::size_t p = 0; p < opts.permutations; ++p) {
            std::shuffle(perm.begin(), perm.end(), rng);
            SentenceMatrix t(n, c.embed_dim);
            for (std::size_t i = 0; i < n; ++i) {
                const auto src = s.row(perm[i]);
                std::copy(src.begin(), src.end(), t.row(i).begin());
            }
            const auto v = forward(t, model).values;
            double err = 0.0;
            for (std::size_t j = 0; j < v.size(); ++j) {
                err = std::max(err, std::abs(v[j] - base[j]) / std::max(1.0, std::abs(base[j])));
            }
            detail::record(r, err, {{"model", detail::model_json(model)}, {"sentence", detail::matrix_json(s)},
                                    {"permutation", perm}});
        }
    }
    r.seconds = clock.seconds();
    return r;
}

inline VerifyReport run_verify(const VerifyOptions& opts) {
    VerifyReport rep;
    rep.checks.push_back(check_oracle_identity(opts));
    rep.checks.push_back(check_gradients(opts));
    rep.checks.push_back(check_cp_round_trip(opts));
    rep.checks.push_back(check_metric_oracles(opts));
    rep.checks.push_back(check_permutation_invariance(opts));
    return rep;
}

/// One line per check; failing instances follow as JSON lines. Timings are
/// left out so that equal seeds give byte-identical reports.
inline void write_verify_report(std::ostream& os, const VerifyReport& rep) {
    for (const auto& c : rep.checks) {
        std::ostringstream err;
        err.precision(3);
        err << std::scientific << c.max_error;
        std::ostringstream tol;
        tol.precision(1);
        tol << std::scientific << c.tolerance;
        os << (c.passed ? "PASS " : "FAIL ") << c.name << " cases=" << c.cases << " max_error=" << err.str()
           << " tolerance=" << tol.str() << '\n';
    }
    for (const auto& c : rep.checks) {
        if (!c.passed) os << nlohmann::json{{"check", c.name}, {"instance", c.failing_instance}}.dump() << '\n';
    }
    os << (rep.passed() ? "verify: all checks passed" : "verify: FAILED") << '\n';
}

}  // namespace qmwf
