#include <gtest/gtest.h>

#include <cmath>

#include "memvuln/rng.hpp"
#include "memvuln/stats.hpp"

using namespace memvuln;
using namespace memvuln::stats;

TEST(Wilson, ExtremesAreExact)
{
    for (std::uint64_t n : {1u, 2u, 10u, 500u, 6500u, 1000000u}) {
        EXPECT_EQ(wilson_ci(0, n, 0.99).lower, 0.0);
        EXPECT_EQ(wilson_ci(n, n, 0.99).upper, 1.0);
        EXPECT_GT(wilson_ci(0, n, 0.99).upper, 0.0);
        EXPECT_LT(wilson_ci(n, n, 0.99).lower, 1.0);
    }
}

TEST(Wilson, SymmetricAtHalf)
{
    const auto ci = wilson_ci(50, 100, 0.99);
    EXPECT_NEAR(ci.lower + ci.upper, 1.0, 1e-15);
    const auto a = wilson_ci(30, 100, 0.95), b = wilson_ci(70, 100, 0.95);
    EXPECT_NEAR(a.lower, 1 - b.upper, 1e-15);
}

TEST(Wilson, WidthAtPaperScale)
{
    const auto ci = wilson_ci(1495, 6500, 0.99);
    EXPECT_NEAR(ci.width(), 0.026, 0.002);
    EXPECT_TRUE(ci.contains(1495.0 / 6500));
}

TEST(Wilson, KnownValue)
{
    // 95%: z = 1.959964; 10 of 100 -> [0.05523, 0.17437].
    const auto ci = wilson_ci(10, 100, 0.95);
    EXPECT_NEAR(ci.lower, 0.05523, 5e-5);
    EXPECT_NEAR(ci.upper, 0.17437, 5e-5);
    EXPECT_NEAR(z_for(0.99), 2.5758293, 1e-6);
}

TEST(Wilson, ContainedInUnitIntervalAndRejectsBadInput)
{
    for (std::uint64_t n = 1; n < 60; ++n)
        for (std::uint64_t k = 0; k <= n; ++k) {
            const auto ci = wilson_ci(k, n, 0.99);
            ASSERT_GE(ci.lower, 0.0);
            ASSERT_LE(ci.upper, 1.0);
            ASSERT_LE(ci.lower, double(k) / double(n));
            ASSERT_GE(ci.upper, double(k) / double(n));
        }
    EXPECT_THROW(wilson_ci(0, 0), InvalidArgument);
    EXPECT_THROW(wilson_ci(5, 4), InvalidArgument);
    EXPECT_THROW(wilson_ci(1, 4, 1.0), InvalidArgument);
}

TEST(Correlation, SpearmanWithTies)
{
    const std::vector<double> x{1, 2, 3, 4, 5}, y{5, 6, 7, 8, 7};
    EXPECT_NEAR(spearman(x, y), 0.820782681668123, 1e-12);  // scipy.stats.spearmanr
    const auto r = average_ranks(std::vector<double>{10, 20, 20, 5});
    EXPECT_EQ(r, (std::vector<double>{2, 3.5, 3.5, 1}));
    EXPECT_DOUBLE_EQ(spearman(x, x), 1.0);
    const std::vector<double> rev{5, 4, 3, 2, 1};
    EXPECT_DOUBLE_EQ(spearman(x, rev), -1.0);
    const std::vector<double> inf{1, 2, INFINITY, 3, 4};
    EXPECT_DOUBLE_EQ(spearman(inf, std::vector<double>{1, 2, 5, 3, 4}), 1.0);
}

TEST(Correlation, Pearson)
{
    const std::vector<double> x{1, 2, 3, 4}, y{2, 4, 6, 8.5};
    EXPECT_NEAR(pearson(x, y), 0.9983814394570298, 1e-12);
    EXPECT_TRUE(std::isnan(pearson(x, std::vector<double>{1, 1, 1, 1})));
    EXPECT_THROW(pearson(std::vector<double>{1}, std::vector<double>{1}), InvalidArgument);
}

TEST(Rng, CounterBasedAndReproducible)
{
    CounterRng a(42, 7), b(42, 7), c(42, 8), d(43, 7);
    for (int i = 0; i < 100; ++i) {
        const auto va = a();
        EXPECT_EQ(va, b());
        EXPECT_NE(va, c());
        EXPECT_NE(va, d());
    }
    EXPECT_EQ(splitmix64(0), 0xe220a8397b1dcdafull);
}

TEST(Rng, UniformMoments)
{
    CounterRng r(1);
    double s = 0, s2 = 0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        ASSERT_GE(u, 0.0);
        ASSERT_LT(u, 1.0);
        s += u;
        s2 += u * u;
    }
    EXPECT_NEAR(s / n, 0.5, 0.005);
    EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12, 0.002);
    std::vector<int> counts(7);
    for (int i = 0; i < 70000; ++i)
        counts[r.below(7)]++;
    for (int c : counts)
        EXPECT_NEAR(c, 10000, 500);
}
