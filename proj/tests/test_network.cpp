#include "qmwf/network.hpp"
#include "qmwf/projection.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

namespace qmwf {
namespace {

using testing::relative_diff;
using testing::unit_vector;

QmwfConfig small_config(std::size_t m, std::size_t r, std::size_t patch = 1, bool shared = false,
                        bool log_domain = false) {
    QmwfConfig c;
    c.embed_dim = m;
    c.channels = r;
    c.patch_size = patch;
    c.shared_kernels = shared;
    c.log_domain = log_domain;
    c.max_positions = 6;
    return c;
}

SentenceMatrix random_sentence(std::mt19937_64& rng, std::size_t n, std::size_t m) {
    std::vector<std::vector<double>> rows;
    for (std::size_t i = 0; i < n; ++i) rows.push_back(unit_vector(rng, m));
    return SentenceMatrix::from_rows(rows);
}

QmwfModel random_model(std::mt19937_64& rng, const QmwfConfig& c) {
    auto m = QmwfModel::random(c, rng);
    std::uniform_real_distribution<double> u(-1.5, 1.5);
    for (double& t : m.out_weights()) t = u(rng);
    return m;
}

TEST(QmwfConfigTest, Validation) {
    QmwfConfig c = small_config(3, 2);
    EXPECT_NO_THROW(c.validate());
    c.patch_size = 4;
    EXPECT_THROW(c.validate(), ValidationError);
    c = small_config(3, 2);
    c.epsilon = 0.0;
    EXPECT_THROW(c.validate(), ValidationError);
    c = small_config(3, 0);
    EXPECT_THROW(c.validate(), ValidationError);
}

TEST(QmwfModelTest, InitializationBoundsAndShapes) {
    std::mt19937_64 rng(1);
    const auto c = small_config(4, 3, 2);
    const auto m = QmwfModel::random(c, rng);
    EXPECT_EQ(m.kernels().size(), 3u * 6u * 8u);
    const double bound = 1.0 / std::sqrt(8.0);
    for (double k : m.kernels()) EXPECT_LE(std::abs(k), bound);
    for (double t : m.out_weights()) EXPECT_EQ(t, 1.0);
    EXPECT_THROW(QmwfModel(c, std::vector<double>(5), std::vector<double>(3)), DimensionError);
}

TEST(ConvolveTest, ScalarProduct) {
    QmwfModel m(small_config(1, 1));
    m.kernel(0, 0)[0] = 2.0;
    const auto sigma = convolve(SentenceMatrix(1, 1, {3.0}), m);
    ASSERT_EQ(sigma.positions, 1u);
    EXPECT_EQ(sigma(0, 0), 6.0);
}

TEST(ConvolveTest, OrthogonalKernelGivesZeros) {
    QmwfModel m(small_config(3, 2, 1, true));
    m.kernel(0, 0)[2] = 1.0;
    m.kernel(1, 0)[2] = -4.0;
    const auto s = SentenceMatrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0.6, 0.8, 0}});
    const auto sigma = convolve(s, m);
    for (double x : sigma.data) EXPECT_EQ(x, 0.0);
}

TEST(ConvolveTest, MatchesNestedLoops) {
    std::mt19937_64 rng(3);
    for (std::size_t patch = 1; patch <= 3; ++patch) {
        for (bool shared : {false, true}) {
            const auto c = small_config(4, 3, patch, shared);
            const auto m = random_model(rng, c);
            const auto s = random_sentence(rng, 5, 4);
            const auto sigma = convolve(s, m);
            ASSERT_EQ(sigma.positions, 5 - patch + 1);
            for (std::size_t r = 0; r < 3; ++r) {
                for (std::size_t i = 0; i < sigma.positions; ++i) {
                    double expected = 0.0;
                    for (std::size_t k = 0; k < patch; ++k)
                        for (std::size_t h = 0; h < 4; ++h)
                            expected += m.kernel(r, shared ? 0 : i)[k * 4 + h] * s.row(i + k)[h];
                    EXPECT_NEAR(sigma(r, i), expected, 1e-14);
                }
            }
        }
    }
}

TEST(ConvolveTest, ShortSentenceIsZeroPadded) {
    std::mt19937_64 rng(5);
    const auto c = small_config(3, 2, 3);
    const auto m = random_model(rng, c);
    const auto s = random_sentence(rng, 2, 3);
    const auto sigma = convolve(s, m);
    ASSERT_EQ(sigma.positions, 1u);
    for (std::size_t r = 0; r < 2; ++r) {
        double expected = 0.0;
        for (std::size_t k = 0; k < 2; ++k)
            for (std::size_t h = 0; h < 3; ++h) expected += m.kernel(r, 0)[k * 3 + h] * s.row(k)[h];
        EXPECT_NEAR(sigma(r, 0), expected, 1e-14);
    }
}

TEST(ConvolveTest, LongSentenceTruncatedToMaxPositions) {
    std::mt19937_64 rng(6);
    const auto c = small_config(2, 1);
    const auto m = random_model(rng, c);
    const auto sigma = convolve(random_sentence(rng, 10, 2), m);
    EXPECT_EQ(sigma.positions, c.max_positions);
    EXPECT_THROW(convolve(random_sentence(rng, 3, 3), m), DimensionError);
}

TEST(ProductPoolTest, Basics) {
    const ConvResponse sigma{2, 3, {2, 3, 4, 1, 0, 5}};
    const auto p = product_pool(sigma);
    EXPECT_EQ(p[0], 24.0);
    EXPECT_EQ(p[1], 0.0);
}

TEST(ProductPoolTest, MatchesSequentialMultiply) {
    std::mt19937_64 rng(7);
    const auto v = testing::random_vector(rng, 4 * 7, -2.0, 2.0);
    const ConvResponse sigma{4, 7, v};
    const auto p = product_pool(sigma);
    for (std::size_t r = 0; r < 4; ++r) {
        double acc = 1.0;
        for (std::size_t i = 0; i < 7; ++i) acc = acc * v[r * 7 + i];
        EXPECT_NEAR(p[r], acc, 1e-15 * std::max(1.0, std::abs(acc)));
    }
}

TEST(LogProductPoolTest, Basics) {
    const ConvResponse ones{1, 3, {1, 1, 1}};
    EXPECT_NEAR(log_product_pool(ones, 1e-15).log_magnitude[0], 0.0, 1e-14);
    const ConvResponse e{1, 2, {std::exp(1.0), std::exp(1.0)}};
    EXPECT_NEAR(log_product_pool(e, 0.0).log_magnitude[0], 2.0, 1e-15);
    const ConvResponse neg{2, 3, {-1, 2, -3, -1, 2, 3}};
    const auto lp = log_product_pool(neg, 1e-6);
    EXPECT_EQ(lp.sign[0], 1.0);
    EXPECT_EQ(lp.sign[1], -1.0);
}

TEST(LogProductPoolTest, ConsistentWithLinearPooling) {
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        const ConvResponse sigma{3, 5, testing::random_vector(rng, 15, 0.05, 3.0)};
        const auto lin = product_pool(sigma);
        const auto lp = log_product_pool(sigma, 0.0);
        for (std::size_t r = 0; r < 3; ++r) {
            EXPECT_LE(std::abs(std::exp(lp.log_magnitude[r]) - lin[r]) / lin[r], 1e-9);
        }
    }
}

TEST(ForwardTest, TrivialSingleEntry) {
    QmwfModel m(small_config(1, 1));
    m.kernel(0, 0)[0] = 1.0;
    const auto v = forward(SentenceMatrix(1, 1, {0.5}), m);
    ASSERT_EQ(v.values.size(), 1u);
    EXPECT_EQ(v.values[0], 0.5);
    EXPECT_TRUE(v.signs.empty());
}

double raw_kernel_projection(const QmwfModel& m, const SentenceMatrix& s) {
    const auto& c = m.config();
    std::vector<double> w(m.out_weights().begin(), m.out_weights().end());
    std::vector<std::vector<std::vector<double>>> raw(c.channels);
    for (std::size_t r = 0; r < c.channels; ++r)
        for (std::size_t i = 0; i < s.rows(); ++i) {
            const auto k = m.kernel(r, c.shared_kernels ? 0 : i);
            raw[r].emplace_back(k.begin(), k.end());
        }
    return testing::cp_projection_formula(w, raw, s.row_vectors());
}

TEST(ForwardTest, SumEqualsBruteForceProjection) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + trial % 4;
        const std::size_t m = 2 + trial % 4;
        const std::size_t r = 1 + trial % 6;
        const bool shared = trial % 5 == 0;
        const auto model = random_model(rng, small_config(m, r, 1, shared));
        const auto s = random_sentence(rng, n, m);
        const auto v = forward(s, model);
        const double total = std::accumulate(v.values.begin(), v.values.end(), 0.0);
        const double oracle = projection_bruteforce(s, to_cp_factors(model, n));
        EXPECT_LE(relative_diff(total, oracle), 1e-9) << "trial " << trial;
        EXPECT_LE(relative_diff(total, raw_kernel_projection(model, s)), 1e-9);
    }
}

TEST(ForwardTest, SharedKernelsArePermutationInvariant) {
    std::mt19937_64 rng(10);
    for (int trial = 0; trial < 20; ++trial) {
        const auto model = random_model(rng, small_config(4, 5, 1, true));
        const auto s = random_sentence(rng, 5, 4);
        const auto base = forward(s, model);
        std::vector<std::size_t> perm(5);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), rng);
        SentenceMatrix p(5, 4);
        for (std::size_t i = 0; i < 5; ++i) {
            const auto src = s.row(perm[i]);
            std::copy(src.begin(), src.end(), p.row(i).begin());
        }
        const auto permuted = forward(p, model);
        for (std::size_t r = 0; r < 5; ++r) {
            EXPECT_NEAR(permuted.values[r], base.values[r],
                        1e-12 * std::max(1.0, std::abs(base.values[r])));
        }
    }
}

TEST(ForwardTest, ScalingCovariance) {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> cdist(-3.0, 3.0);
    for (int trial = 0; trial < 30; ++trial) {
        const auto model = random_model(rng, small_config(3, 4, 1, trial % 2 == 0));
        const auto s = random_sentence(rng, 4, 3);
        const double c = cdist(rng);
        auto scaled = s;
        for (double& x : scaled.row(trial % 4)) x *= c;
        const auto t = forward_trace(s, model);
        const auto ts = forward_trace(scaled, model);
        for (std::size_t r = 0; r < 4; ++r) {
            EXPECT_NEAR(ts.pooled[r], c * t.pooled[r], 1e-12 * std::max(1.0, std::abs(c * t.pooled[r])));
        }
    }
}

TEST(ForwardTest, LogDomainMatchesLinearWhenResponsesPositive) {
    std::mt19937_64 rng(12);
    auto linear_cfg = small_config(3, 4);
    auto log_cfg = linear_cfg;
    log_cfg.log_domain = true;
    log_cfg.epsilon = 1e-300;
    auto model = random_model(rng, linear_cfg);
    // Strictly positive kernels and inputs give positive responses.
    for (double& k : model.kernels()) k = std::abs(k) + 0.1;
    const QmwfModel log_model(log_cfg, std::vector<double>(model.kernels().begin(), model.kernels().end()),
                              std::vector<double>(4, 1.0));
    const QmwfModel lin_model(linear_cfg, std::vector<double>(model.kernels().begin(), model.kernels().end()),
                              std::vector<double>(4, 1.0));
    const auto s = SentenceMatrix::from_rows({{0.6, 0.8, 0}, {0, 0.6, 0.8}, {1, 0, 0}});
    const auto lin = forward(s, lin_model);
    const auto lg = forward(s, log_model);
    for (std::size_t r = 0; r < 4; ++r) {
        EXPECT_EQ(lg.signs[r], 1.0);
        EXPECT_LE(std::abs(std::exp(lg.values[r]) - lin.values[r]) / lin.values[r], 1e-9);
    }
}

TEST(ForwardTest, LogDomainNeverNaN) {
    auto cfg = small_config(2, 2, 1, false, true);
    const QmwfModel m(cfg);  // zero kernels: every response is 0
    const auto v = forward(SentenceMatrix::from_rows({{1, 0}, {0, 1}}), m);
    for (double x : v.values) EXPECT_TRUE(std::isfinite(x));
}

TEST(MatchScoreTest, Basics) {
    const Representation a{{0.6, 0.8}, {}};
    const Representation b{{0.8, -0.6}, {}};
    EXPECT_NEAR(match_score(a, a), 1.0, 1e-15);
    EXPECT_NEAR(match_score(a, b), 0.0, 1e-15);
    EXPECT_THROW(match_score(a, Representation{{1.0}, {}}), DimensionError);
    EXPECT_THROW(match_score(a, Representation{{1.0, 0.0}, {1.0, 1.0}}), DimensionError);
}

TEST(MatchScoreTest, MatchesSummationWithSigns) {
    std::mt19937_64 rng(13);
    const auto q = testing::random_vector(rng, 6);
    const auto a = testing::random_vector(rng, 6);
    double expected = 0.0;
    for (std::size_t r = 0; r < 6; ++r) expected += q[r] * a[r];
    EXPECT_NEAR(match_score({q, {}}, {a, {}}), expected, 1e-15);
    const std::vector<double> sq{1, -1, 1, -1, 1, 1};
    const std::vector<double> sa{1, 1, -1, -1, 1, -1};
    double signed_expected = 0.0;
    for (std::size_t r = 0; r < 6; ++r) signed_expected += q[r] * a[r] * sq[r] * sa[r];
    EXPECT_NEAR(match_score({q, sq}, {a, sa}), signed_expected, 1e-15);
}

TEST(ToCpFactorsTest, Errors) {
    std::mt19937_64 rng(14);
    const auto m = random_model(rng, small_config(3, 2, 2));
    EXPECT_THROW(to_cp_factors(m, 2), DimensionError);
    const auto u = random_model(rng, small_config(3, 2));
    EXPECT_THROW(to_cp_factors(u, 7), DimensionError);
}

}  // namespace
}  // namespace qmwf
