#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "memvuln/cg.hpp"

using namespace memvuln;
using namespace memvuln::cg;

namespace {

// Neighbour count of grid point (x, y, z) by direct enumeration, self included.
std::size_t brute_neighbours(std::ptrdiff_t s, std::ptrdiff_t x, std::ptrdiff_t y, std::ptrdiff_t z)
{
    std::size_t n = 0;
    for (std::ptrdiff_t a = 0; a < s; ++a)
        for (std::ptrdiff_t b = 0; b < s; ++b)
            for (std::ptrdiff_t c = 0; c < s; ++c)
                if (std::abs(a - x) <= 1 && std::abs(b - y) <= 1 && std::abs(c - z) <= 1)
                    ++n;
    return n;
}

double entry(const CsrMatrix& a, std::size_t i, std::size_t j)
{
    for (auto k = a.row_ptr[i]; k < a.row_ptr[i + 1]; ++k)
        if (static_cast<std::size_t>(a.col_idx[k]) == j)
            return a.values[k];
    return 0.0;
}

CsrMatrix diagonal(std::vector<double> diag)
{
    CsrMatrix a;
    a.n_rows = diag.size();
    a.row_ptr = AlignedArray<Index>(diag.size() + 1);
    a.col_idx = AlignedArray<Index>(diag.size());
    a.values = AlignedArray<double>(diag.size());
    for (std::size_t i = 0; i < diag.size(); ++i) {
        a.row_ptr[i] = static_cast<Index>(i);
        a.col_idx[i] = static_cast<Index>(i);
        a.values[i] = diag[i];
    }
    a.row_ptr[diag.size()] = static_cast<Index>(diag.size());
    return a;
}

}  // namespace

TEST(Poisson27, Side64RowCountAndInteriorRows)
{
    const auto a = generate_poisson27(64);
    EXPECT_EQ(a.n_rows, 262144u);
    const std::size_t centre = (32 * 64 + 32) * 64 + 32;
    EXPECT_EQ(a.row_length(centre), 27u);
    validate(a);
}

TEST(Poisson27, Side2AllPointsAdjacent)
{
    const auto a = generate_poisson27(2);
    EXPECT_EQ(a.n_rows, 8u);
    for (std::size_t i = 0; i < 8; ++i)
        EXPECT_EQ(a.row_length(i), 8u);
}

TEST(Poisson27, Side3MatchesBruteForceNeighbours)
{
    const auto a = generate_poisson27(3);
    EXPECT_EQ(a.row_length(13), 27u);
    EXPECT_EQ(a.row_length(0), 8u);
    for (std::ptrdiff_t z = 0; z < 3; ++z)
        for (std::ptrdiff_t y = 0; y < 3; ++y)
            for (std::ptrdiff_t x = 0; x < 3; ++x)
                EXPECT_EQ(a.row_length(static_cast<std::size_t>((z * 3 + y) * 3 + x)), brute_neighbours(3, x, y, z));
}

TEST(Poisson27, StructuralInvariantsAndSortedColumns)
{
    for (std::size_t side : {2u, 3u, 5u, 8u}) {
        const auto a = generate_poisson27(side);
        validate(a);
        for (std::size_t i = 0; i < a.n_rows; ++i)
            for (auto k = a.row_ptr[i] + 1; k < a.row_ptr[i + 1]; ++k)
                EXPECT_LT(a.col_idx[k - 1], a.col_idx[k]);
    }
}

TEST(Poisson27, SymmetricPositiveDefinite)
{
    const auto a = generate_poisson27(5);
    for (std::size_t i = 0; i < a.n_rows; ++i)
        for (auto k = a.row_ptr[i]; k < a.row_ptr[i + 1]; ++k)
            EXPECT_EQ(a.values[k], entry(a, static_cast<std::size_t>(a.col_idx[k]), i));
    std::mt19937_64 gen(7);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 10; ++trial) {
        AlignedArray<double> x(a.n_rows);
        for (auto& v : x)
            v = nd(gen);
        const auto ax = multiply(a, x);
        double xax = 0;
        for (std::size_t i = 0; i < a.n_rows; ++i)
            xax += x[i] * ax[i];
        EXPECT_GT(xax, 0.0);
    }
}

TEST(Poisson27, RejectsBadSides)
{
    EXPECT_THROW(generate_poisson27(1), InvalidArgument);
    EXPECT_THROW(generate_poisson27(0), InvalidArgument);
    EXPECT_THROW(generate_poisson27(1291), CapacityError);
    EXPECT_THROW(generate_poisson27(500), CapacityError);
}

TEST(Solve, DiagonalSystemConvergesInOneIteration)
{
    const auto a = diagonal({2.0, 4.0, 8.0, 16.0});
    AlignedArray<double> b(4);
    b[0] = 1, b[1] = -3, b[2] = 5, b[3] = 0.5;
    Workspace ws(a, b.span());
    SolverOptions opt;
    opt.tol = 1e-20;
    // A diagonal matrix with distinct entries needs one step per distinct
    // eigenvalue; use a uniform diagonal for the one-step case.
    const auto ai = diagonal({3.0, 3.0, 3.0, 3.0});
    Workspace wi(ai, b.span());
    const auto r = solve(wi, opt);
    EXPECT_TRUE(r.converged);
    EXPECT_EQ(r.iterations, 1u);
    EXPECT_TRUE(verify(ai, b, wi.x, opt.tol));
    const auto r2 = solve(ws, opt);
    EXPECT_TRUE(r2.converged);
    EXPECT_TRUE(verify(a, b, ws.x, 1e-18));
}

TEST(Solve, VerifyRejectsZeroSolution)
{
    const auto p = make_problem(4);
    AlignedArray<double> zero(p.a.n_rows);
    EXPECT_FALSE(verify(p.a, p.b, zero, p.tol));
}

TEST(Solve, ConvergedSolutionVerifiesForGeneratedSizes)
{
    for (std::size_t side = 2; side <= 16; ++side) {
        const auto p = make_problem(side);
        const auto r = solve_and_verify(p, SolverOptions{});
        EXPECT_TRUE(r.converged) << "side " << side;
        EXPECT_TRUE(r.verified) << "side " << side;
        EXPECT_LE(r.iterations, 2000u);
    }
}

TEST(Solve, IterationCountsAreStable)
{
    EXPECT_EQ(solve_and_verify(make_problem(8), {}).iterations, 8u);
    EXPECT_EQ(solve_and_verify(make_problem(16), {}).iterations, 16u);
    EXPECT_EQ(solve_and_verify(make_problem(32), {}).iterations, 31u);
}

TEST(Solve, DeterministicAcrossRepeatedRuns)
{
    const auto p = make_problem(8);
    Workspace first;
    const auto r0 = solve_and_verify(p, {}, &first);
    for (int i = 0; i < 100; ++i) {
        Workspace ws;
        const auto r = solve_and_verify(p, {}, &ws);
        ASSERT_EQ(r.iterations, r0.iterations);
        ASSERT_EQ(r.final_residual_norm_sq, r0.final_residual_norm_sq);
        ASSERT_TRUE(ws.x == first.x);
    }
}

TEST(Solve, ThreadedSolveMatchesSequentialBitForBit)
{
    const auto p = make_problem(12);
    SolverOptions seq, par;
    seq.block_rows = par.block_rows = 100;
    par.threads = 4;
    Workspace a, b;
    const auto ra = solve_and_verify(p, seq, &a);
    const auto rb = solve_and_verify(p, par, &b);
    EXPECT_EQ(ra.iterations, rb.iterations);
    EXPECT_TRUE(a.x == b.x);
}

TEST(Solve, IterationHookSeesEveryIteration)
{
    const auto p = make_problem(6);
    std::vector<std::uint32_t> seen;
    SolverOptions opt;
    opt.on_iteration = [&](std::uint32_t t) { seen.push_back(t); };
    const auto r = solve_and_verify(p, opt);
    ASSERT_EQ(seen.size(), r.iterations + 1);  // the final, converging check also runs the hook
    for (std::size_t i = 0; i < seen.size(); ++i)
        EXPECT_EQ(seen[i], i);
}

TEST(Solve, BreakdownIsReportedNotThrown)
{
    const auto p = make_problem(3);
    Workspace ws(p.a, p.b);
    for (auto& v : ws.a.values)
        v = 0.0;  // q = 0, so <q, d> = 0
    SolverOptions opt;
    opt.tol = p.tol;
    const auto r = solve(ws, opt);
    EXPECT_TRUE(r.breakdown);
    EXPECT_FALSE(r.converged);
}

TEST(Solve, IterationCapIsRespected)
{
    const auto p = make_problem(8);
    SolverOptions opt;
    opt.t_max = 3;
    const auto r = solve_and_verify(p, opt);
    EXPECT_FALSE(r.converged);
    EXPECT_FALSE(r.verified);
    EXPECT_EQ(r.iterations, 3u);
}

TEST(Solve, RejectsNonPositiveTolerance)
{
    const auto p = make_problem(2);
    Workspace ws(p.a, p.b);
    SolverOptions opt;
    opt.tol = 0.0;
    EXPECT_THROW(solve(ws, opt), InvalidArgument);
}

TEST(Serialization, MatrixAndVectorRoundTrip)
{
    const auto p = cg::make_problem(5);
    std::stringstream ms, vs;
    cg::write_matrix(ms, p.a);
    cg::write_vector(vs, p.b);
    EXPECT_EQ(ms.str().size(), 32 + 4 * (p.a.n_rows + 1) + 12 * p.a.nnz());
    EXPECT_EQ(ms.str().substr(0, 5), "MVCSR");
    const auto a = cg::read_matrix(ms);
    EXPECT_TRUE(a == p.a);
    const auto b = cg::read_vector(vs);
    ASSERT_EQ(b.size(), p.b.size());
    EXPECT_TRUE(std::equal(b.begin(), b.end(), p.b.begin()));
}

TEST(Serialization, RejectsTruncatedAndCorrupt)
{
    const auto p = cg::make_problem(4);
    std::stringstream ms;
    cg::write_matrix(ms, p.a);
    const std::string full = ms.str();
    std::stringstream cut(full.substr(0, full.size() - 3));
    EXPECT_THROW(cg::read_matrix(cut), FormatError);

    std::string bad = full;
    bad[32 + 4] = 0x7f;  // row_ptr[1] far beyond nnz
    std::stringstream corrupt(bad);
    EXPECT_THROW(cg::read_matrix(corrupt), FormatError);

    std::stringstream wrong(std::string("MVVEC\0\0\0", 8) + std::string(16, '\0'));
    EXPECT_THROW(cg::read_matrix(wrong), FormatError);
}
