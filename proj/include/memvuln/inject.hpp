#pragma once

// Native single-bit fault injection into a live CG solve.
//
// Each run executes in its own forked process. The child copies the pristine
// problem into a fresh workspace, starts an injector thread, and solves. When
// the region of interest begins the child writes 'S' to its pipe; the injector
// sleeps for the planned delay and flips one bit with a single atomic XOR on the
// containing 64-bit word. After the solve the child verifies x against the
// pristine inputs (its fork-time copy of the problem, never the workspace) and
// writes a report. The parent enforces the wall-clock limit with SIGKILL and
// classifies the run.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <csignal>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include "json.hpp"

#include "memvuln/cg.hpp"
#include "memvuln/rng.hpp"
#include "memvuln/stats.hpp"

namespace memvuln::inject {

enum class OutcomeClass : std::uint8_t { ace, crash, wrong_result, extra_work, hang };
inline constexpr std::array<OutcomeClass, 5> kOutcomeClasses = {OutcomeClass::ace, OutcomeClass::crash,
                                                                 OutcomeClass::wrong_result, OutcomeClass::extra_work,
                                                                 OutcomeClass::hang};

inline constexpr std::string_view name_of(OutcomeClass c) noexcept
{
    switch (c) {
    case OutcomeClass::ace: return "ace";
    case OutcomeClass::crash: return "crash";
    case OutcomeClass::wrong_result: return "wrong_result";
    case OutcomeClass::extra_work: return "extra_work";
    case OutcomeClass::hang: return "hang";
    }
    return "?";
}

inline std::optional<OutcomeClass> outcome_from_name(std::string_view s) noexcept
{
    for (auto c : kOutcomeClasses)
        if (name_of(c) == s)
            return c;
    return std::nullopt;
}

// How the flip is timed: a concurrent thread after a wall-clock delay, or
// synchronously at the top of a chosen iteration (used to check the flip itself).
enum class Mode : std::uint8_t { async, paused };

struct InjectionPlan {
    Structure structure = Structure::x;
    std::uint64_t bit_index = 0;
    double time_fraction = 0;  // position in (0, 1) of the baseline ROI
    double inject_time = 0;    // seconds after ROI start (async mode)
    std::uint32_t iteration = 0;  // iteration whose start triggers the flip (paused mode)
    std::uint64_t seed = 0;
    std::uint64_t run = 0;
    std::uint32_t attempt = 0;
};

struct Baseline {
    std::uint32_t iterations = 0;
    double roi_wall_time = 0;  // seconds

    bool established() const noexcept { return iterations > 0 && roi_wall_time > 0; }
};

struct Outcome {
    OutcomeClass cls = OutcomeClass::ace;
    std::uint32_t iterations = 0;
    double wall_time = 0;  // ROI seconds
    std::string detail;
    bool discarded = false;  // the solve finished before the flip could happen
    int hamming = -1;        // bits changed by the flip, paused mode only
};

// Bytes of a structure that are eligible for injection.
inline std::span<std::byte> injectable_bytes(cg::Workspace& ws, Structure s) { return ws.bytes(s); }

inline std::uint64_t structure_bits(const cg::Workspace& ws, Structure s) { return 8ull * ws.bytes(s).size(); }

// Flips `bit` (little-endian bit numbering over the region) with one atomic
// read-modify-write of the aligned 64-bit word that contains it. Regions are
// 64-byte aligned and padded to whole lines, so the word is always allocated.
inline void flip_bit(std::span<std::byte> region, std::uint64_t bit)
{
    if (bit >= 8ull * region.size())
        throw InvalidArgument("flip_bit: bit index outside the structure");
    auto* word = reinterpret_cast<std::uint64_t*>(region.data() + (bit / 64) * 8);
    std::atomic_ref<std::uint64_t> ref(*word);
    ref.fetch_xor(std::uint64_t{1} << (bit % 64), std::memory_order_relaxed);
}

inline std::uint64_t hamming_distance(std::span<const std::byte> a, std::span<const std::byte> b)
{
    if (a.size() != b.size())
        throw InvalidArgument("hamming_distance: size mismatch");
    std::uint64_t d = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        d += static_cast<std::uint64_t>(std::popcount(static_cast<unsigned>(a[i] ^ b[i])));
    return d;
}

// Plans are a pure function of (seed, structure, run, attempt).
inline InjectionPlan make_plan(Structure s, std::uint64_t structure_bits, const Baseline& base, std::uint64_t seed,
                               std::uint64_t run, std::uint32_t attempt)
{
    if (structure_bits == 0)
        throw InvalidArgument("cannot inject into an empty structure");
    CounterRng rng(splitmix64(seed + 0x100 * (static_cast<std::uint64_t>(s) + 1)), (run << 16) | attempt);
    InjectionPlan p;
    p.structure = s;
    p.seed = seed;
    p.run = run;
    p.attempt = attempt;
    p.bit_index = rng.below(structure_bits);
    p.time_fraction = rng.uniform_open();
    p.inject_time = p.time_fraction * base.roi_wall_time;
    p.iteration = static_cast<std::uint32_t>(p.time_fraction * base.iterations);
    return p;
}

// Child side ------------------------------------------------------------------------

namespace detail {

struct ChildReport {
    std::uint32_t iterations;
    std::uint8_t converged, breakdown, verified, flipped;
    std::int32_t hamming;
    double residual;
    double roi_wall;
};

inline void write_all(int fd, const void* data, std::size_t n) noexcept
{
    const char* p = static_cast<const char*>(data);
    while (n > 0) {
        const ssize_t w = ::write(fd, p, n);
        if (w < 0 && errno == EINTR)
            continue;
        if (w <= 0)
            return;
        p += w;
        n -= static_cast<std::size_t>(w);
    }
}

// Signals the parent at ROI start and wakes the injector.
struct InjectionObserver {
    static constexpr bool traces_accesses = false;

    int fd = -1;
    std::mutex* mu = nullptr;
    std::condition_variable* cv = nullptr;
    bool* started = nullptr;
    bool* done = nullptr;
    std::chrono::steady_clock::time_point* t0 = nullptr;

    void load(Structure, std::size_t) noexcept {}
    void store(Structure, std::size_t) noexcept {}
    void roi_begin()
    {
        write_all(fd, "S", 1);
        std::lock_guard lk(*mu);
        *t0 = std::chrono::steady_clock::now();
        *started = true;
        cv->notify_all();
    }
    void roi_end()
    {
        std::lock_guard lk(*mu);
        *done = true;
        cv->notify_all();
    }
};

[[noreturn]] inline void child_main(int fd, const cg::Problem& problem, cg::SolverOptions opt,
                                    const InjectionPlan& plan, Mode mode)
{
    ChildReport rep{};
    rep.hamming = -1;
    try {
        cg::Workspace ws(problem.a, problem.b);  // prologue: working copies
        opt.tol = problem.tol;
        auto region = injectable_bytes(ws, plan.structure);

        std::mutex mu;
        std::condition_variable cv;
        bool started = false, done = false, flipped = false;
        std::chrono::steady_clock::time_point t0;
        InjectionObserver obs{fd, &mu, &cv, &started, &done, &t0};

        std::jthread injector;
        if (mode == Mode::async) {
            injector = std::jthread([&] {
                std::unique_lock lk(mu);
                cv.wait(lk, [&] { return started || done; });
                const auto at = t0 + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                         std::chrono::duration<double>(plan.inject_time));
                cv.wait_until(lk, at, [&] { return done; });
                if (!done) {
                    flip_bit(region, plan.bit_index);
                    flipped = true;
                }
            });
        } else {
            opt.on_iteration = [&](std::uint32_t t) {
                if (t != plan.iteration || flipped)
                    return;
                std::vector<std::byte> before(region.begin(), region.end());
                flip_bit(region, plan.bit_index);
                flipped = true;
                rep.hamming = static_cast<std::int32_t>(hamming_distance(before, region));
                // sent now so the check survives a later crash or hang
                write_all(fd, "H", 1);
                write_all(fd, &rep.hamming, sizeof rep.hamming);
            };
        }

        const cg::SolveRecord r = cg::solve(ws, opt, obs);
        if (injector.joinable())
            injector.join();
        rep.iterations = r.iterations;
        rep.converged = r.converged;
        rep.breakdown = r.breakdown;
        rep.flipped = flipped;
        rep.roi_wall = r.roi_wall_time;
        rep.residual = cg::residual_norm_sq(problem.a, problem.b, ws.x);
        rep.verified = r.converged && rep.residual < problem.tol;
    } catch (...) {
        ::_exit(3);
    }
    write_all(fd, "R", 1);
    write_all(fd, &rep, sizeof rep);
    ::_exit(0);
}

inline std::string signal_name(int sig)
{
    switch (sig) {
    case SIGSEGV: return "SIGSEGV";
    case SIGBUS: return "SIGBUS";
    case SIGFPE: return "SIGFPE";
    case SIGILL: return "SIGILL";
    case SIGABRT: return "SIGABRT";
    case SIGKILL: return "SIGKILL";
    default: return "signal " + std::to_string(sig);
    }
}

}  // namespace detail

// Maps a finished child to an outcome class. Total over every input.
inline Outcome classify(const Baseline& base, bool timed_out, int wait_status, const detail::ChildReport* rep,
                        double supervised_wall)
{
    Outcome o;
    o.wall_time = supervised_wall;
    if (timed_out) {
        o.cls = OutcomeClass::hang;
        o.detail = "timeout";
        return o;
    }
    if (WIFSIGNALED(wait_status)) {
        o.cls = OutcomeClass::crash;
        o.detail = detail::signal_name(WTERMSIG(wait_status));
        return o;
    }
    if (rep == nullptr || !WIFEXITED(wait_status) || WEXITSTATUS(wait_status) != 0) {
        o.cls = OutcomeClass::crash;
        o.detail = "exit status " + std::to_string(WIFEXITED(wait_status) ? WEXITSTATUS(wait_status) : -1);
        return o;
    }
    o.iterations = rep->iterations;
    o.wall_time = rep->roi_wall;
    o.hamming = rep->hamming;
    if (!rep->flipped) {
        o.discarded = true;
        o.detail = "solve ended before injection";
        return o;
    }
    std::ostringstream d;
    d.precision(6);
    if (rep->breakdown) {
        o.cls = OutcomeClass::wrong_result;
        o.detail = "breakdown";
    } else if (!rep->verified) {
        o.cls = OutcomeClass::wrong_result;
        d << "residual " << rep->residual;
        o.detail = d.str();
    } else if (rep->iterations > base.iterations) {
        o.cls = OutcomeClass::extra_work;
        d << "iterations " << rep->iterations << " > " << base.iterations;
        o.detail = d.str();
    } else {
        o.cls = OutcomeClass::ace;
    }
    return o;
}

// Supervisor --------------------------------------------------------------------------

struct RunContext {
    const cg::Problem* problem = nullptr;
    cg::SolverOptions solver;  // tol is taken from the problem
    Baseline baseline;
    Mode mode = Mode::async;
    double timeout_factor = 10.0;
    double min_timeout = 0.1;      // seconds; scheduler noise dominates tiny baselines
    double startup_limit = 120.0;  // seconds allowed before the ROI starts
};

// Runs plans in forked children, at most `parallel` at a time, calling
// on_done(plan, outcome) as each finishes (in completion order).
inline void supervise(const RunContext& ctx, std::vector<InjectionPlan> plans, unsigned parallel,
                      const std::function<void(const InjectionPlan&, const Outcome&)>& on_done)
{
    using Clock = std::chrono::steady_clock;
    if (ctx.problem == nullptr)
        throw InvalidArgument("supervise: no problem");
    if (!ctx.baseline.established())
        throw Error("fault-free baseline not established; refusing to inject");
    parallel = std::max(1u, parallel);

    struct Child {
        pid_t pid = -1;
        int fd = -1;
        InjectionPlan plan;
        Clock::time_point spawned, roi_start, deadline;
        bool started = false, killed = false, eof = false;
        std::string buf;
    };
    std::vector<Child> active;
    std::size_t next = 0;
    const auto limit = std::chrono::duration_cast<Clock::duration>(
        std::chrono::duration<double>(std::max(ctx.min_timeout, ctx.timeout_factor * ctx.baseline.roi_wall_time)));
    const auto startup = std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(ctx.startup_limit));

    auto spawn = [&](const InjectionPlan& plan) {
        int fds[2];
        if (::pipe2(fds, O_CLOEXEC) != 0)
            throw Error(std::string("pipe: ") + std::strerror(errno));
        const pid_t pid = ::fork();
        if (pid < 0) {
            ::close(fds[0]);
            ::close(fds[1]);
            throw Error(std::string("fork: ") + std::strerror(errno));
        }
        if (pid == 0) {
            ::close(fds[0]);
            detail::child_main(fds[1], *ctx.problem, ctx.solver, plan, ctx.mode);
        }
        ::close(fds[1]);
        Child c;
        c.pid = pid;
        c.fd = fds[0];
        c.plan = plan;
        c.spawned = Clock::now();
        active.push_back(std::move(c));
    };

    auto finish = [&](Child& c) {
        int status = 0;
        while (::waitpid(c.pid, &status, 0) < 0 && errno == EINTR) {
        }
        ::close(c.fd);
        const double wall = c.started ? std::chrono::duration<double>(Clock::now() - c.roi_start).count() : 0.0;
        // 'S', then optionally 'H' + i32, then 'R' + report
        const detail::ChildReport* rep = nullptr;
        detail::ChildReport copy{};
        std::int32_t hamming = -1;
        std::size_t pos = c.buf.empty() || c.buf[0] != 'S' ? c.buf.size() : 1;
        if (pos < c.buf.size() && c.buf[pos] == 'H' && c.buf.size() >= pos + 1 + sizeof hamming) {
            std::memcpy(&hamming, c.buf.data() + pos + 1, sizeof hamming);
            pos += 1 + sizeof hamming;
        }
        if (pos < c.buf.size() && c.buf[pos] == 'R' && c.buf.size() == pos + 1 + sizeof copy) {
            std::memcpy(&copy, c.buf.data() + pos + 1, sizeof copy);
            rep = &copy;
        }
        if (!c.started && !c.killed && WIFEXITED(status) && rep == nullptr)
            throw Error("injection child exited before the region of interest (status " +
                        std::to_string(WEXITSTATUS(status)) + ")");
        if (c.killed && !c.started)
            throw Error("injection child did not reach the region of interest within the startup limit");
        Outcome o = classify(ctx.baseline, c.killed, status, rep, wall);
        o.hamming = hamming;
        on_done(c.plan, o);
    };

    while (next < plans.size() || !active.empty()) {
        while (active.size() < parallel && next < plans.size())
            spawn(plans[next++]);

        const auto now = Clock::now();
        Clock::time_point wake = now + std::chrono::seconds(1);
        for (auto& c : active) {
            if (c.killed)
                continue;
            const auto dl = c.started ? c.deadline : c.spawned + startup;
            if (dl <= now) {
                ::kill(c.pid, SIGKILL);
                c.killed = true;
            } else {
                wake = std::min(wake, dl);
            }
        }

        std::vector<pollfd> pfds;
        for (auto& c : active)
            pfds.push_back({c.fd, POLLIN, 0});
        const auto wait_ms = std::chrono::duration_cast<std::chrono::milliseconds>(wake - Clock::now()).count();
        const int rc = ::poll(pfds.data(), pfds.size(), static_cast<int>(std::clamp<long long>(wait_ms + 1, 0, 1000)));
        if (rc < 0 && errno != EINTR)
            throw Error(std::string("poll: ") + std::strerror(errno));

        for (std::size_t i = 0; i < pfds.size(); ++i) {
            if (!(pfds[i].revents & (POLLIN | POLLHUP | POLLERR)))
                continue;
            Child& c = active[i];
            char tmp[256];
            const ssize_t n = ::read(c.fd, tmp, sizeof tmp);
            if (n > 0) {
                c.buf.append(tmp, static_cast<std::size_t>(n));
                if (!c.started && !c.buf.empty() && c.buf[0] == 'S') {
                    c.started = true;
                    c.roi_start = Clock::now();
                    c.deadline = c.roi_start + limit;
                }
            } else if (n == 0 || (errno != EINTR && errno != EAGAIN)) {
                c.eof = true;
            }
        }
        for (std::size_t i = active.size(); i-- > 0;) {
            if (active[i].eof) {
                Child c = std::move(active[i]);
                active.erase(active.begin() + static_cast<std::ptrdiff_t>(i));
                finish(c);
            }
        }
    }
}

inline Outcome run_one(const InjectionPlan& plan, const RunContext& ctx)
{
    Outcome out;
    supervise(ctx, {plan}, 1, [&](const InjectionPlan&, const Outcome& o) { out = o; });
    return out;
}

// Fault-free reference: iteration count from an in-process solve, ROI wall
// time as the median over `reps` forked runs under the same parallelism.
inline Baseline measure_baseline(const cg::Problem& problem, const cg::SolverOptions& solver, unsigned parallel,
                                 unsigned reps = 5)
{
    Baseline b;
    const auto rec = cg::solve_and_verify(problem, solver);
    if (!rec.verified)
        throw Error("fault-free solve does not verify; cannot establish a baseline");
    b.iterations = rec.iterations;
    b.roi_wall_time = std::max(rec.roi_wall_time, 1e-6);

    // Forked fault-free runs: inject into the dead padding region, which the
    // solver never touches, so the timing reflects the harness itself.
    RunContext ctx;
    ctx.problem = &problem;
    ctx.solver = solver;
    ctx.baseline = {b.iterations, std::max(1.0, 100 * b.roi_wall_time)};
    ctx.mode = Mode::paused;
    std::vector<InjectionPlan> plans;
    for (unsigned i = 0; i < std::max(1u, reps) * std::max(1u, parallel); ++i) {
        InjectionPlan p;
        p.structure = Structure::pad;
        p.run = i;
        plans.push_back(p);
    }
    std::vector<double> walls;
    supervise(ctx, plans, parallel, [&](const InjectionPlan&, const Outcome& o) {
        if (o.cls != OutcomeClass::ace || o.iterations != b.iterations)
            throw Error("fault-free forked run disagrees with the in-process baseline");
        walls.push_back(o.wall_time);
    });
    std::sort(walls.begin(), walls.end());
    b.roi_wall_time = std::max(walls[walls.size() / 2], 1e-6);
    return b;
}

// Campaigns -------------------------------------------------------------------------------

struct CampaignConfig {
    Structure structure = Structure::x;
    std::uint64_t runs = 1000;
    unsigned parallel = 1;
    std::uint64_t seed = 1;
    std::size_t side = 32;
    double tol_factor = 1e-8;
    Mode mode = Mode::async;
    double timeout_factor = 10.0;
    std::uint32_t max_attempts = 64;
    std::string log_path;  // CSV run log; empty for none. Existing compatible logs are resumed.
};

struct CampaignResult {
    Structure structure = Structure::x;
    std::uint64_t n_runs = 0;
    std::array<std::uint64_t, 5> tally{};
    std::uint64_t discarded = 0;
    double p_unace = 0;
    stats::Interval ci99;
    Baseline baseline;
    std::uint64_t resumed = 0;  // runs taken from an existing log

    std::uint64_t count(OutcomeClass c) const noexcept { return tally[static_cast<std::size_t>(c)]; }
};

inline void finalize(CampaignResult& r)
{
    std::uint64_t total = 0;
    for (auto t : r.tally)
        total += t;
    if (total != r.n_runs)
        throw Error("campaign tallies do not sum to the number of runs");
    const std::uint64_t unace = r.n_runs - r.count(OutcomeClass::ace);
    r.p_unace = static_cast<double>(unace) / static_cast<double>(r.n_runs);
    r.ci99 = stats::wilson_ci(unace, r.n_runs, 0.99);
}

inline nlohmann::json to_json(const CampaignResult& r)
{
    nlohmann::json j;
    j["schema"] = "memvuln-campaign-result v1";
    j["structure"] = std::string(name_of(r.structure));
    j["n_runs"] = r.n_runs;
    for (auto c : kOutcomeClasses)
        j["tally"][std::string(name_of(c))] = r.count(c);
    j["discarded"] = r.discarded;
    j["p_unace"] = r.p_unace;
    j["ci99"] = {r.ci99.lower, r.ci99.upper};
    j["baseline"] = {{"iterations", r.baseline.iterations}, {"roi_wall_time", r.baseline.roi_wall_time}};
    j["resumed_runs"] = r.resumed;
    return j;
}

// Run log: schema line, one '#' line of campaign parameters, column header, rows.
inline constexpr const char* kCampaignCsvSchema = "# schema: memvuln-campaign-log v1";

namespace detail {

inline std::string campaign_key(const CampaignConfig& c)
{
    std::ostringstream os;
    os.precision(17);
    os << "structure=" << name_of(c.structure) << ";seed=" << c.seed << ";side=" << c.side
       << ";tol_factor=" << c.tol_factor << ";mode=" << (c.mode == Mode::async ? "async" : "paused")
       << ";timeout_factor=" << c.timeout_factor;
    return os.str();
}

struct LogRow {
    std::uint64_t run;
    std::uint32_t attempt;
    std::string cls;  // outcome name or "discarded"
};

struct ExistingLog {
    bool present = false;
    Baseline baseline;
    std::vector<LogRow> rows;
};

inline ExistingLog read_log(const std::string& path, const std::string& key)
{
    ExistingLog log;
    std::ifstream in(path);
    if (!in)
        return log;
    std::string line;
    if (!std::getline(in, line))
        return log;  // empty file: start fresh
    if (line != kCampaignCsvSchema)
        throw FormatError("campaign log " + path + " has an unknown schema line");
    std::getline(in, line);
    const std::string prefix = "# " + key + ";baseline_iterations=";
    if (line.rfind(prefix, 0) != 0)
        throw FormatError("campaign log " + path + " was written for different campaign parameters");
    {
        std::istringstream ps(line.substr(prefix.size()));
        char sep = 0;
        std::string rest;
        ps >> log.baseline.iterations;
        std::getline(ps, rest);
        const auto eq = rest.find('=');
        if (eq == std::string::npos)
            throw FormatError("campaign log " + path + ": malformed parameter line");
        log.baseline.roi_wall_time = std::stod(rest.substr(eq + 1));
        (void)sep;
    }
    std::getline(in, line);  // column header
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::istringstream rs(line);
        std::string f_run, f_attempt, f_struct, f_bit, f_frac, f_time, f_cls;
        if (!std::getline(rs, f_run, ',') || !std::getline(rs, f_attempt, ',') || !std::getline(rs, f_struct, ',') ||
            !std::getline(rs, f_bit, ',') || !std::getline(rs, f_frac, ',') || !std::getline(rs, f_time, ',') ||
            !std::getline(rs, f_cls, ','))
            break;  // torn final line from an interrupted campaign
        try {
            log.rows.push_back({std::stoull(f_run), static_cast<std::uint32_t>(std::stoul(f_attempt)), f_cls});
        } catch (const std::exception&) {
            break;
        }
    }
    log.present = true;
    return log;
}

}  // namespace detail

// Runs `cfg.runs` injections into one structure of `problem`. Plans are
// deterministic in (seed, run, attempt); a run whose solve ends before the
// flip is redrawn with the next attempt.
inline CampaignResult run_campaign(const cg::Problem& problem, const CampaignConfig& cfg, Baseline baseline,
                                   const cg::SolverOptions& solver = {},
                                   const std::function<void(std::uint64_t done, std::uint64_t total)>& progress = {})
{
    if (cfg.runs == 0)
        throw InvalidArgument("campaign needs at least one run");
    CampaignResult res;
    res.structure = cfg.structure;
    res.n_runs = cfg.runs;

    const std::string key = detail::campaign_key(cfg);
    std::set<std::uint64_t> done_runs;
    std::map<std::uint64_t, std::uint32_t> next_attempt;
    std::ofstream log;
    if (!cfg.log_path.empty()) {
        const auto existing = detail::read_log(cfg.log_path, key);
        if (existing.present) {
            baseline = existing.baseline;  // keep classification consistent across sessions
            for (const auto& row : existing.rows) {
                if (row.run >= cfg.runs)
                    continue;
                next_attempt[row.run] = std::max(next_attempt[row.run], row.attempt + 1);
                if (row.cls == "discarded") {
                    ++res.discarded;
                    continue;
                }
                const auto c = outcome_from_name(row.cls);
                if (!c)
                    throw FormatError("campaign log: unknown outcome '" + row.cls + "'");
                if (done_runs.insert(row.run).second) {
                    res.tally[static_cast<std::size_t>(*c)]++;
                    ++res.resumed;
                }
            }
            log.open(cfg.log_path, std::ios::app);
        } else {
            if (!baseline.established())
                throw Error("fault-free baseline not established; refusing to inject");
            log.open(cfg.log_path, std::ios::trunc);
            log << kCampaignCsvSchema << "\n";
            log.precision(17);
            log << "# " << key << ";baseline_iterations=" << baseline.iterations
                << ";baseline_roi_wall_time=" << baseline.roi_wall_time << "\n";
            log << "run,attempt,structure,bit_index,time_fraction,inject_time_s,class,iterations,wall_time_s,"
                   "detail\n";
        }
        if (!log)
            throw Error("cannot write campaign log: " + cfg.log_path);
    }
    if (!baseline.established())
        throw Error("fault-free baseline not established; refusing to inject");
    res.baseline = baseline;

    cg::Workspace probe(problem.a, problem.b);
    const std::uint64_t bits = structure_bits(probe, cfg.structure);
    probe = cg::Workspace();

    RunContext ctx;
    ctx.problem = &problem;
    ctx.solver = solver;
    ctx.baseline = baseline;
    ctx.mode = cfg.mode;
    ctx.timeout_factor = cfg.timeout_factor;

    std::uint64_t completed = done_runs.size();
    std::vector<InjectionPlan> plans;
    for (std::uint64_t run = 0; run < cfg.runs; ++run)
        if (!done_runs.count(run))
            plans.push_back(make_plan(cfg.structure, bits, baseline, cfg.seed, run, next_attempt[run]));

    while (!plans.empty()) {
        std::vector<InjectionPlan> retry;
        supervise(ctx, plans, cfg.parallel, [&](const InjectionPlan& p, const Outcome& o) {
            if (log.is_open()) {
                std::string detail = o.detail;
                std::replace(detail.begin(), detail.end(), ',', ';');
                log << p.run << ',' << p.attempt << ',' << name_of(p.structure) << ',' << p.bit_index << ','
                    << p.time_fraction << ',' << p.inject_time << ','
                    << (o.discarded ? std::string("discarded") : std::string(name_of(o.cls))) << ','
                    << o.iterations << ',' << o.wall_time << ',' << detail << "\n";
                log.flush();
            }
            if (o.discarded) {
                ++res.discarded;
                if (p.attempt + 1 >= cfg.max_attempts)
                    throw Error("run " + std::to_string(p.run) + ": injection never landed inside the ROI after " +
                                std::to_string(cfg.max_attempts) + " attempts");
                retry.push_back(make_plan(cfg.structure, bits, baseline, cfg.seed, p.run, p.attempt + 1));
                return;
            }
            res.tally[static_cast<std::size_t>(o.cls)]++;
            ++completed;
            if (progress)
                progress(completed, cfg.runs);
        });
        plans = std::move(retry);
    }
    finalize(res);
    return res;
}

}  // namespace memvuln::inject
