#pragma once

// Exponential transient-fault model for one memory location: probability that
// a fault arriving at rate lambda is consumed by an unsafe access, in exact,
// product and linearised form, plus a Monte Carlo estimate from simulated
// Poisson arrivals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "memvuln/common.hpp"
#include "memvuln/rng.hpp"
#include "memvuln/stats.hpp"

namespace memvuln::faultmodel {

enum class Tag : std::uint8_t { safe, unsafe };

struct TimedAccess {
    double time = 0;
    Tag tag = Tag::unsafe;
};

struct FaultModelParams {
    double lambda = 0;  // faults per cycle
    double T = 0;       // cycles

    static constexpr double kRareThreshold = 0.01;
    bool rare() const noexcept { return lambda * T <= kRareThreshold; }
    void validate() const
    {
        if (!(lambda >= 0.0))
            throw InvalidArgument("lambda must be non-negative");
        if (!(T > 0.0))
            throw InvalidArgument("T must be positive");
    }
};

// Accesses to one location over [0, T]. The period of an access runs from the
// previous access (or 0) up to it; time after the last access is never consumed.
class AccessTimeline {
  public:
    AccessTimeline() = default;

    AccessTimeline(double T, std::vector<TimedAccess> accesses) : T_(T), accesses_(std::move(accesses))
    {
        if (!(T_ > 0.0))
            throw InvalidArgument("timeline: T must be positive");
        double prev = -1.0;
        for (const auto& a : accesses_) {
            if (!(a.time > prev))
                throw InvalidArgument("timeline: access times must be strictly increasing");
            if (a.time < 0.0 || a.time > T_)
                throw InvalidArgument("timeline: access time outside [0, T]");
            prev = a.time;
        }
    }

    double T() const noexcept { return T_; }
    const std::vector<TimedAccess>& accesses() const noexcept { return accesses_; }

    double period(std::size_t i) const noexcept
    {
        return accesses_[i].time - (i == 0 ? 0.0 : accesses_[i - 1].time);
    }

    // Total time before unsafe accesses.
    double unsafe_time() const noexcept
    {
        double s = 0;
        for (std::size_t i = 0; i < accesses_.size(); ++i)
            if (accesses_[i].tag == Tag::unsafe)
                s += period(i);
        return s;
    }

    // Vulnerability V: fraction of [0, T] ending in an unsafe access.
    double vulnerability() const noexcept { return unsafe_time() / T_; }

  private:
    double T_ = 1;
    std::vector<TimedAccess> accesses_;
};

// Sum over unsafe accesses of 1 - exp(-lambda p_u). Not clamped to [0, 1].
inline double p_consume_exact(const AccessTimeline& tl, double lambda)
{
    double p = 0;
    for (std::size_t i = 0; i < tl.accesses().size(); ++i)
        if (tl.accesses()[i].tag == Tag::unsafe)
            p += -std::expm1(-lambda * tl.period(i));
    return p;
}

// 1 - prod exp(-lambda p_u): probability that at least one fault is consumed.
inline double p_consume_product(const AccessTimeline& tl, double lambda)
{
    return -std::expm1(-lambda * tl.unsafe_time());
}

// lambda * sum p_u = lambda T V.
inline double p_consume_linear(const AccessTimeline& tl, double lambda) { return lambda * tl.unsafe_time(); }

struct MonteCarloResult {
    std::uint64_t trials = 0;
    std::uint64_t consumed = 0;   // trials where at least one fault was consumed
    double frequency = 0;         // consumed / trials
    stats::Interval ci;           // Wilson interval on frequency
    double mean_consuming = 0;    // mean number of unsafe accesses that consumed a fault
    stats::Interval mean_ci;      // normal interval on mean_consuming
};

// Simulates Poisson fault arrivals over [0, T]. Each trial uses its own
// counter-based substream, so the result does not depend on `threads`.
inline MonteCarloResult monte_carlo_consume(const AccessTimeline& tl, double lambda, std::uint64_t trials,
                                            std::uint64_t seed, double confidence = 0.99, unsigned threads = 1)
{
    if (trials == 0)
        throw InvalidArgument("monte_carlo_consume: trials must be at least 1");
    if (!(lambda >= 0.0))
        throw InvalidArgument("monte_carlo_consume: lambda must be non-negative");

    const auto& acc = tl.accesses();
    std::vector<double> ends(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i)
        ends[i] = acc[i].time;

    struct Partial {
        std::uint64_t consumed = 0;
        double sum = 0, sum_sq = 0;
    };

    auto run_range = [&](std::uint64_t lo, std::uint64_t hi) {
        Partial part;
        std::vector<char> hit(acc.size());
        for (std::uint64_t trial = lo; trial < hi; ++trial) {
            if (lambda == 0.0)
                continue;
            CounterRng rng(seed, trial);
            std::fill(hit.begin(), hit.end(), 0);
            unsigned count = 0;
            for (double t = rng.exponential(lambda); t <= tl.T(); t += rng.exponential(lambda)) {
                // Period (prev, a] containing t; arrivals exactly at 0 go to the first access.
                auto it = std::lower_bound(ends.begin(), ends.end(), t);
                if (it == ends.end())
                    continue;  // trailing time
                const auto a = static_cast<std::size_t>(it - ends.begin());
                if (acc[a].tag == Tag::unsafe && !hit[a]) {
                    hit[a] = 1;
                    ++count;
                }
            }
            if (count > 0)
                ++part.consumed;
            part.sum += count;
            part.sum_sq += static_cast<double>(count) * count;
        }
        return part;
    };

    threads = std::max(1u, threads);
    std::vector<Partial> parts(threads);
    {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < threads; ++w)
            pool.emplace_back([&, w] { parts[w] = run_range(trials * w / threads, trials * (w + 1) / threads); });
    }
    Partial total;
    for (const auto& p : parts) {
        total.consumed += p.consumed;
        total.sum += p.sum;
        total.sum_sq += p.sum_sq;
    }

    MonteCarloResult r;
    r.trials = trials;
    r.consumed = total.consumed;
    const double n = static_cast<double>(trials);
    r.frequency = static_cast<double>(total.consumed) / n;
    r.ci = stats::wilson_ci(total.consumed, trials, confidence);
    r.mean_consuming = total.sum / n;
    const double var = trials > 1 ? (total.sum_sq - total.sum * total.sum / n) / (n - 1) : 0.0;
    r.mean_ci = stats::mean_ci(r.mean_consuming, var, trials, confidence);
    return r;
}

// Text form:
//   T <duration>
//   <time> safe|unsafe
// one access per line, '#' starts a comment.
inline AccessTimeline parse_timeline(std::istream& in)
{
    double T = -1;
    std::vector<TimedAccess> acc;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos)
            line.erase(h);
        std::istringstream ls(line);
        std::string a, b;
        if (!(ls >> a))
            continue;
        if (a == "T") {
            if (!(ls >> T))
                throw FormatError("timeline line " + std::to_string(lineno) + ": expected T <duration>");
            continue;
        }
        if (!(ls >> b) || (b != "safe" && b != "unsafe"))
            throw FormatError("timeline line " + std::to_string(lineno) + ": expected <time> safe|unsafe");
        try {
            acc.push_back({std::stod(a), b == "safe" ? Tag::safe : Tag::unsafe});
        } catch (const std::exception&) {
            throw FormatError("timeline line " + std::to_string(lineno) + ": bad time '" + a + "'");
        }
    }
    if (T < 0)
        throw FormatError("timeline: missing 'T <duration>' line");
    return AccessTimeline(T, std::move(acc));
}

}  // namespace memvuln::faultmodel
