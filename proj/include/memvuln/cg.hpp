#pragma once

// Conjugate Gradient benchmark: 27-point Poisson matrices in CSR form, the
// double-buffered CG loop with a marked region of interest, and verification
// against pristine inputs.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <limits>
#include <span>
#include <thread>
#include <utility>
#include <vector>

#include "memvuln/common.hpp"

namespace memvuln::cg {

using Index = std::int32_t;

struct CsrMatrix {
    std::size_t n_rows = 0;
    AlignedArray<Index> row_ptr;  // n_rows + 1 entries
    AlignedArray<Index> col_idx;  // nnz entries
    AlignedArray<double> values;  // nnz entries

    std::size_t nnz() const noexcept { return col_idx.size(); }

    std::size_t row_length(std::size_t i) const noexcept
    {
        return static_cast<std::size_t>(row_ptr[i + 1] - row_ptr[i]);
    }

    friend bool operator==(const CsrMatrix&, const CsrMatrix&) = default;
};

// Throws FormatError when the CSR structural invariants are broken.
inline void validate(const CsrMatrix& a)
{
    if (a.row_ptr.size() != a.n_rows + 1)
        throw FormatError("row_ptr length must be n_rows + 1");
    if (a.values.size() != a.col_idx.size())
        throw FormatError("values and col_idx lengths differ");
    if (a.row_ptr[0] != 0)
        throw FormatError("row_ptr[0] must be 0");
    for (std::size_t i = 0; i < a.n_rows; ++i)
        if (a.row_ptr[i + 1] < a.row_ptr[i])
            throw FormatError("row_ptr decreases at row " + std::to_string(i));
    if (static_cast<std::size_t>(a.row_ptr[a.n_rows]) != a.nnz())
        throw FormatError("row_ptr[n_rows] must equal nnz");
    for (std::size_t k = 0; k < a.nnz(); ++k)
        if (a.col_idx[k] < 0 || static_cast<std::size_t>(a.col_idx[k]) >= a.n_rows)
            throw FormatError("column index out of range at entry " + std::to_string(k));
}

// Standard 27-point stencil on a side^3 grid: 26 on the diagonal, -1 for each of
// the (up to) 26 neighbours. Rows on the boundary are truncated. Columns are
// sorted within each row.
inline CsrMatrix generate_poisson27(std::size_t side)
{
    if (side < 2)
        throw InvalidArgument("poisson27: side must be >= 2");
    constexpr auto kMax = static_cast<std::size_t>(std::numeric_limits<Index>::max());
    if (side > 1290 || side * side * side > kMax / 27)
        throw CapacityError("poisson27: side " + std::to_string(side) + " exceeds 32-bit index capacity");

    const std::size_t n = side * side * side;
    std::size_t nnz = 0;
    auto span1 = [side](std::size_t c) { return (c == 0 || c + 1 == side) ? std::size_t{2} : std::size_t{3}; };
    for (std::size_t z = 0; z < side; ++z)
        for (std::size_t y = 0; y < side; ++y)
            for (std::size_t x = 0; x < side; ++x)
                nnz += span1(x) * span1(y) * span1(z);

    CsrMatrix a;
    a.n_rows = n;
    a.row_ptr = AlignedArray<Index>(n + 1);
    a.col_idx = AlignedArray<Index>(nnz);
    a.values = AlignedArray<double>(nnz);

    const auto s = static_cast<std::ptrdiff_t>(side);
    std::size_t k = 0;
    std::size_t row = 0;
    for (std::ptrdiff_t z = 0; z < s; ++z) {
        for (std::ptrdiff_t y = 0; y < s; ++y) {
            for (std::ptrdiff_t x = 0; x < s; ++x, ++row) {
                a.row_ptr[row] = static_cast<Index>(k);
                for (std::ptrdiff_t dz = -1; dz <= 1; ++dz) {
                    const auto zz = z + dz;
                    if (zz < 0 || zz >= s)
                        continue;
                    for (std::ptrdiff_t dy = -1; dy <= 1; ++dy) {
                        const auto yy = y + dy;
                        if (yy < 0 || yy >= s)
                            continue;
                        for (std::ptrdiff_t dx = -1; dx <= 1; ++dx) {
                            const auto xx = x + dx;
                            if (xx < 0 || xx >= s)
                                continue;
                            const bool diag = dx == 0 && dy == 0 && dz == 0;
                            a.col_idx[k] = static_cast<Index>((zz * s + yy) * s + xx);
                            a.values[k] = diag ? 26.0 : -1.0;
                            ++k;
                        }
                    }
                }
            }
        }
    }
    a.row_ptr[n] = static_cast<Index>(k);
    return a;
}

// y = A x, sequential.
inline AlignedArray<double> multiply(const CsrMatrix& a, std::span<const double> x)
{
    if (x.size() != a.n_rows)
        throw InvalidArgument("multiply: dimension mismatch");
    AlignedArray<double> y(a.n_rows);
    for (std::size_t i = 0; i < a.n_rows; ++i) {
        double sum = 0.0;
        for (auto k = a.row_ptr[i]; k < a.row_ptr[i + 1]; ++k)
            sum += a.values[k] * x[a.col_idx[k]];
        y[i] = sum;
    }
    return y;
}

// ||b - A x||^2, sequential, in row order.
inline double residual_norm_sq(const CsrMatrix& a, std::span<const double> b, std::span<const double> x)
{
    if (b.size() != a.n_rows || x.size() != a.n_rows)
        throw InvalidArgument("residual: dimension mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.n_rows; ++i) {
        double sum = 0.0;
        for (auto k = a.row_ptr[i]; k < a.row_ptr[i + 1]; ++k)
            sum += a.values[k] * x[a.col_idx[k]];
        const double r = b[i] - sum;
        acc += r * r;
    }
    return acc;
}

// Checks a solution against the pristine inputs (never the working copies).
inline bool verify(const CsrMatrix& a, std::span<const double> b, std::span<const double> x, double tol)
{
    const double r = residual_norm_sq(a, b, x);
    return r < tol;  // false for NaN
}

inline double norm_sq(std::span<const double> v)
{
    double acc = 0.0;
    for (double e : v)
        acc += e * e;
    return acc;
}

// Problem inputs: A, the right-hand side b = A * ones, and the absolute tolerance.
struct Problem {
    CsrMatrix a;
    AlignedArray<double> b;
    double tol = 0.0;
};

inline Problem make_problem(std::size_t side, double tol_factor = 1e-8)
{
    if (!(tol_factor > 0.0))
        throw InvalidArgument("tolerance factor must be positive");
    Problem p;
    p.a = generate_poisson27(side);
    AlignedArray<double> ones(p.a.n_rows, 1.0);
    p.b = multiply(p.a, ones);
    p.tol = tol_factor * norm_sq(p.b);
    return p;
}

// Solver storage. Every array here is a working copy that fault injection may
// corrupt; d[0] and d[1] are the two direction buffers ("d" and "d'").
struct Workspace {
    CsrMatrix a;
    AlignedArray<double> x, g, q, b;
    std::array<AlignedArray<double>, 2> d;
    AlignedArray<double> pad;  // never read or written by the solver

    Workspace() = default;

    Workspace(const CsrMatrix& matrix, std::span<const double> rhs)
        : a(matrix), x(matrix.n_rows), g(matrix.n_rows), q(matrix.n_rows), b(matrix.n_rows),
          d{AlignedArray<double>(matrix.n_rows), AlignedArray<double>(matrix.n_rows)}, pad(matrix.n_rows)
    {
        if (rhs.size() != matrix.n_rows)
            throw InvalidArgument("workspace: rhs dimension mismatch");
        std::copy(rhs.begin(), rhs.end(), b.begin());
    }

    std::size_t n_rows() const noexcept { return a.n_rows; }

    std::span<std::byte> bytes(Structure s) noexcept
    {
        switch (s) {
        case Structure::Ar: return a.row_ptr.bytes();
        case Structure::Ac: return a.col_idx.bytes();
        case Structure::Av: return a.values.bytes();
        case Structure::x: return x.bytes();
        case Structure::g: return g.bytes();
        case Structure::d: return d[0].bytes();
        case Structure::d_prime: return d[1].bytes();
        case Structure::q: return q.bytes();
        case Structure::b: return b.bytes();
        case Structure::pad: return pad.bytes();
        }
        return {};
    }

    std::span<const std::byte> bytes(Structure s) const noexcept
    {
        return const_cast<Workspace*>(this)->bytes(s);
    }
};

inline constexpr std::size_t element_size(Structure s) noexcept
{
    return (s == Structure::Ar || s == Structure::Ac) ? sizeof(Index) : sizeof(double);
}

struct SolverOptions {
    double tol = 0.0;
    std::uint32_t t_max = 2000;
    std::uint32_t residual_period = 50;  // g = b - Ax on iterations divisible by this
    std::size_t block_rows = 1024;       // fixed reduction blocking
    unsigned threads = 1;                // ignored when an observer traces accesses
    std::function<void(std::uint32_t)> on_iteration;  // called at the top of each iteration
};

struct SolveRecord {
    std::uint32_t iterations = 0;
    bool converged = false;
    bool breakdown = false;  // <q,d> == 0
    bool verified = false;
    double final_residual_norm_sq = 0.0;
    double roi_wall_time = 0.0;  // seconds
};

// Observers receive every logical load/store of the tracked structures, by
// element index, plus the region-of-interest boundaries.
template <typename O>
concept SolveObserver = requires(O o, Structure s, std::size_t i) {
    { O::traces_accesses } -> std::convertible_to<bool>;
    o.load(s, i);
    o.store(s, i);
    o.roi_begin();
    o.roi_end();
};

struct NullObserver {
    static constexpr bool traces_accesses = false;
    void load(Structure, std::size_t) noexcept {}
    void store(Structure, std::size_t) noexcept {}
    void roi_begin() noexcept {}
    void roi_end() noexcept {}
};

namespace detail {

// Runs fn(block) for every block; blocks are statically partitioned across threads.
template <typename Fn>
void for_blocks(std::size_t n_blocks, unsigned threads, Fn&& fn)
{
    if (threads <= 1 || n_blocks < 2) {
        for (std::size_t blk = 0; blk < n_blocks; ++blk)
            fn(blk);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(threads, n_blocks);
    std::vector<std::jthread> pool;
    pool.reserve(workers - 1);
    for (std::size_t w = 1; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t blk = w; blk < n_blocks; blk += workers)
                fn(blk);
        });
    for (std::size_t blk = 0; blk < n_blocks; blk += workers)
        fn(blk);
}

inline double sum_in_order(const std::vector<double>& partial)
{
    double acc = 0.0;
    for (double p : partial)
        acc += p;
    return acc;
}

}  // namespace detail

// CG on the workspace. The loop is:
//   g = b - A x every residual_period iterations, g - alpha q otherwise
//   eps = ||g||^2, stop when eps < tol
//   d = (eps/eps_old) d' + g;  q = A d;  alpha = eps/<q,d>;  x += alpha d
//   swap(d, d')
// x and d' are zeroed before the region of interest begins.
template <SolveObserver Observer = NullObserver>
SolveRecord solve(Workspace& ws, const SolverOptions& opt, Observer& obs)
{
    if (!(opt.tol > 0.0))
        throw InvalidArgument("solve: tol must be positive");
    const std::size_t n = ws.n_rows();
    if (ws.b.size() != n || ws.a.row_ptr.size() != n + 1)
        throw InvalidArgument("solve: dimension mismatch");

    constexpr bool trace = Observer::traces_accesses;
    const unsigned threads = trace ? 1u : std::max(1u, opt.threads);
    const std::size_t block = std::max<std::size_t>(1, opt.block_rows);
    const std::size_t n_blocks = (n + block - 1) / block;
    std::vector<double> partial(n_blocks, 0.0);

    const Index* ar = ws.a.row_ptr.data();
    const Index* ac = ws.a.col_idx.data();
    const double* av = ws.a.values.data();
    double* x = ws.x.data();
    double* g = ws.g.data();
    double* q = ws.q.data();
    const double* b = ws.b.data();

    // Prologue.
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = 0.0;
        if constexpr (trace)
            obs.store(Structure::x, i);
    }
    for (std::size_t i = 0; i < n; ++i) {
        ws.d[1][i] = 0.0;
        if constexpr (trace)
            obs.store(Structure::d_prime, i);
    }

    SolveRecord rec;
    double eps_old = std::numeric_limits<double>::infinity();
    double alpha = 0.0;

    obs.roi_begin();
    const auto t0 = std::chrono::steady_clock::now();

    std::uint32_t t = 0;
    for (; t < opt.t_max; ++t) {
        if (opt.on_iteration)
            opt.on_iteration(t);

        const int cur = static_cast<int>(t & 1u);  // buffer holding "d" this iteration
        double* dc = ws.d[cur].data();
        const double* dp = ws.d[1 - cur].data();
        const Structure d_cur = cur == 0 ? Structure::d : Structure::d_prime;
        const Structure d_prev = cur == 0 ? Structure::d_prime : Structure::d;

        if (opt.residual_period != 0 && t % opt.residual_period == 0) {
            detail::for_blocks(n_blocks, threads, [&](std::size_t blk) {
                const std::size_t lo = blk * block, hi = std::min(n, lo + block);
                for (std::size_t i = lo; i < hi; ++i) {
                    const Index rs = ar[i], re = ar[i + 1];
                    if constexpr (trace) {
                        obs.load(Structure::Ar, i);
                        obs.load(Structure::Ar, i + 1);
                    }
                    double sum = 0.0;
                    for (Index k = rs; k < re; ++k) {
                        const Index c = ac[k];
                        sum += av[k] * x[c];
                        if constexpr (trace) {
                            obs.load(Structure::Ac, static_cast<std::size_t>(k));
                            obs.load(Structure::Av, static_cast<std::size_t>(k));
                            obs.load(Structure::x, static_cast<std::size_t>(c));
                        }
                    }
                    g[i] = b[i] - sum;
                    if constexpr (trace) {
                        obs.load(Structure::b, i);
                        obs.store(Structure::g, i);
                    }
                }
            });
        } else {
            detail::for_blocks(n_blocks, threads, [&](std::size_t blk) {
                const std::size_t lo = blk * block, hi = std::min(n, lo + block);
                for (std::size_t i = lo; i < hi; ++i) {
                    g[i] = g[i] - alpha * q[i];
                    if constexpr (trace) {
                        obs.load(Structure::g, i);
                        obs.load(Structure::q, i);
                        obs.store(Structure::g, i);
                    }
                }
            });
        }

        detail::for_blocks(n_blocks, threads, [&](std::size_t blk) {
            const std::size_t lo = blk * block, hi = std::min(n, lo + block);
            double acc = 0.0;
            for (std::size_t i = lo; i < hi; ++i) {
                acc += g[i] * g[i];
                if constexpr (trace)
                    obs.load(Structure::g, i);
            }
            partial[blk] = acc;
        });
        const double eps = detail::sum_in_order(partial);
        rec.final_residual_norm_sq = eps;
        if (eps < opt.tol) {
            rec.converged = true;
            break;
        }

        const double beta = eps / eps_old;
        detail::for_blocks(n_blocks, threads, [&](std::size_t blk) {
            const std::size_t lo = blk * block, hi = std::min(n, lo + block);
            for (std::size_t i = lo; i < hi; ++i) {
                dc[i] = beta * dp[i] + g[i];
                if constexpr (trace) {
                    obs.load(d_prev, i);
                    obs.load(Structure::g, i);
                    obs.store(d_cur, i);
                }
            }
        });

        detail::for_blocks(n_blocks, threads, [&](std::size_t blk) {
            const std::size_t lo = blk * block, hi = std::min(n, lo + block);
            for (std::size_t i = lo; i < hi; ++i) {
                const Index rs = ar[i], re = ar[i + 1];
                if constexpr (trace) {
                    obs.load(Structure::Ar, i);
                    obs.load(Structure::Ar, i + 1);
                }
                double sum = 0.0;
                for (Index k = rs; k < re; ++k) {
                    const Index c = ac[k];
                    sum += av[k] * dc[c];
                    if constexpr (trace) {
                        obs.load(Structure::Ac, static_cast<std::size_t>(k));
                        obs.load(Structure::Av, static_cast<std::size_t>(k));
                        obs.load(d_cur, static_cast<std::size_t>(c));
                    }
                }
                q[i] = sum;
                if constexpr (trace)
                    obs.store(Structure::q, i);
            }
        });

        detail::for_blocks(n_blocks, threads, [&](std::size_t blk) {
            const std::size_t lo = blk * block, hi = std::min(n, lo + block);
            double acc = 0.0;
            for (std::size_t i = lo; i < hi; ++i) {
                acc += q[i] * dc[i];
                if constexpr (trace) {
                    obs.load(Structure::q, i);
                    obs.load(d_cur, i);
                }
            }
            partial[blk] = acc;
        });
        const double qd = detail::sum_in_order(partial);
        if (qd == 0.0) {
            rec.breakdown = true;
            break;
        }
        alpha = eps / qd;

        detail::for_blocks(n_blocks, threads, [&](std::size_t blk) {
            const std::size_t lo = blk * block, hi = std::min(n, lo + block);
            for (std::size_t i = lo; i < hi; ++i) {
                x[i] = x[i] + alpha * dc[i];
                if constexpr (trace) {
                    obs.load(Structure::x, i);
                    obs.load(d_cur, i);
                    obs.store(Structure::x, i);
                }
            }
        });

        eps_old = eps;
        // swap(d, d'): the next iteration writes the other buffer.
    }

    rec.roi_wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    obs.roi_end();
    rec.iterations = t;
    return rec;
}

inline SolveRecord solve(Workspace& ws, const SolverOptions& opt)
{
    NullObserver obs;
    return solve(ws, opt, obs);
}

// Fault-free solve of `problem` followed by verification against its inputs.
inline SolveRecord solve_and_verify(const Problem& problem, SolverOptions opt, Workspace* out = nullptr)
{
    opt.tol = problem.tol;
    Workspace ws(problem.a, problem.b);
    SolveRecord rec = solve(ws, opt);
    rec.verified = rec.converged && verify(problem.a, problem.b, ws.x, problem.tol);
    if (out != nullptr)
        *out = std::move(ws);
    return rec;
}

// Binary forms, little-endian:
//   matrix: "MVCSR\0\0\0", u32 version, u32 reserved, u64 n_rows, u64 nnz,
//           i32 row_ptr[n_rows+1], i32 col_idx[nnz], f64 values[nnz]
//   vector: "MVVEC\0\0\0", u32 version, u32 reserved, u64 n, f64 v[n]
inline constexpr char kMatrixMagic[8] = {'M', 'V', 'C', 'S', 'R', '\0', '\0', '\0'};
inline constexpr char kVectorMagic[8] = {'M', 'V', 'V', 'E', 'C', '\0', '\0', '\0'};
inline constexpr std::uint32_t kArrayFormatVersion = 1;

namespace detail {

inline void read_header(std::istream& in, const char (&magic)[8], std::uint64_t& offset, const char* what)
{
    char m[8];
    in.read(m, sizeof m);
    if (in.gcount() != sizeof m)
        throw FormatError(std::string("truncated ") + what + " header at byte offset " + std::to_string(in.gcount()));
    if (!std::equal(std::begin(m), std::end(m), std::begin(magic)))
        throw FormatError(std::string("not a memvuln ") + what + " file");
    offset = sizeof m;
    const auto v = le::get<std::uint32_t>(in, offset, what);
    if (v != kArrayFormatVersion)
        throw FormatError(std::string("unsupported ") + what + " version " + std::to_string(v));
    le::get<std::uint32_t>(in, offset, what);
}

}  // namespace detail

inline void write_matrix(std::ostream& os, const CsrMatrix& a)
{
    os.write(kMatrixMagic, sizeof kMatrixMagic);
    le::put<std::uint32_t>(os, kArrayFormatVersion);
    le::put<std::uint32_t>(os, 0);
    le::put<std::uint64_t>(os, a.n_rows);
    le::put<std::uint64_t>(os, a.nnz());
    le::put_array<Index>(os, a.row_ptr);
    le::put_array<Index>(os, a.col_idx);
    le::put_array<double>(os, a.values);
    if (!os)
        throw Error("matrix write failed");
}

inline CsrMatrix read_matrix(std::istream& in)
{
    std::uint64_t off = 0;
    detail::read_header(in, kMatrixMagic, off, "matrix");
    CsrMatrix a;
    a.n_rows = le::get<std::uint64_t>(in, off, "matrix header");
    const auto nnz = le::get<std::uint64_t>(in, off, "matrix header");
    constexpr auto kMax = static_cast<std::uint64_t>(std::numeric_limits<Index>::max());
    if (a.n_rows >= kMax || nnz > kMax)
        throw FormatError("matrix dimensions exceed the index range");
    a.row_ptr = AlignedArray<Index>(a.n_rows + 1);
    a.col_idx = AlignedArray<Index>(nnz);
    a.values = AlignedArray<double>(nnz);
    le::get_array<Index>(in, off, a.row_ptr, "row_ptr");
    le::get_array<Index>(in, off, a.col_idx, "col_idx");
    le::get_array<double>(in, off, a.values, "values");
    validate(a);
    return a;
}

inline void write_vector(std::ostream& os, std::span<const double> v)
{
    os.write(kVectorMagic, sizeof kVectorMagic);
    le::put<std::uint32_t>(os, kArrayFormatVersion);
    le::put<std::uint32_t>(os, 0);
    le::put<std::uint64_t>(os, v.size());
    le::put_array<double>(os, v);
    if (!os)
        throw Error("vector write failed");
}

inline AlignedArray<double> read_vector(std::istream& in)
{
    std::uint64_t off = 0;
    detail::read_header(in, kVectorMagic, off, "vector");
    const auto n = le::get<std::uint64_t>(in, off, "vector header");
    if (n > (std::uint64_t{1} << 40))
        throw FormatError("vector length implausible: " + std::to_string(n));
    AlignedArray<double> v(n);
    le::get_array<double>(in, off, v, "vector");
    return v;
}

}  // namespace memvuln::cg
