#pragma once

// Proportion intervals and correlation coefficients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include <boost/math/special_functions/erf.hpp>

#include "memvuln/common.hpp"

namespace memvuln::stats {

struct Interval {
    double lower = 0;
    double upper = 0;

    double width() const noexcept { return upper - lower; }
    bool contains(double v) const noexcept { return v >= lower && v <= upper; }
    friend bool operator==(const Interval&, const Interval&) = default;
};

// Two-sided standard normal quantile for the given confidence level.
inline double z_for(double confidence)
{
    if (!(confidence > 0.0 && confidence < 1.0))
        throw InvalidArgument("confidence must be in (0, 1)");
    return std::sqrt(2.0) * boost::math::erf_inv(confidence);
}

// Wilson score interval for successes out of n trials.
inline Interval wilson_ci(std::uint64_t successes, std::uint64_t n, double confidence = 0.99)
{
    if (n == 0)
        throw InvalidArgument("wilson_ci: n must be at least 1");
    if (successes > n)
        throw InvalidArgument("wilson_ci: successes exceed n");
    const double z = z_for(confidence);
    const double nn = static_cast<double>(n);
    const double p = static_cast<double>(successes) / nn;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / nn;
    const double center = (p + z2 / (2.0 * nn)) / denom;
    const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / denom;
    Interval ci{std::clamp(center - half, 0.0, 1.0), std::clamp(center + half, 0.0, 1.0)};
    if (successes == 0)
        ci.lower = 0.0;
    if (successes == n)
        ci.upper = 1.0;
    return ci;
}

// Normal-approximation interval for a sample mean.
inline Interval mean_ci(double mean, double variance, std::uint64_t n, double confidence = 0.99)
{
    if (n == 0)
        throw InvalidArgument("mean_ci: n must be at least 1");
    const double half = z_for(confidence) * std::sqrt(std::max(0.0, variance) / static_cast<double>(n));
    return {mean - half, mean + half};
}

inline double pearson(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size() || x.size() < 2)
        throw InvalidArgument("pearson: need two equal-length samples of size >= 2");
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0 || syy == 0)
        return std::nan("");
    return sxy / std::sqrt(sxx * syy);
}

// Ranks starting at 1; ties share their average rank.
inline std::vector<double> average_ranks(std::span<const double> v)
{
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> rank(v.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]])
            ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            rank[order[k]] = r;
        i = j + 1;
    }
    return rank;
}

// Pearson correlation of average ranks. NaN when either side is constant.
inline double spearman(std::span<const double> x, std::span<const double> y)
{
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    return pearson(rx, ry);
}

}  // namespace memvuln::stats
