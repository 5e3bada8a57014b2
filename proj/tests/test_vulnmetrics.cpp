#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "memvuln/vulnmetrics.hpp"
#include "synthetic_streams.hpp"

using namespace memvuln;
using namespace memvuln::metrics;
using cache::FillResolution;
using cache::MemoryRequest;
using cache::RequestKind;

namespace {

trace::StructureMap one_word() { return trace::StructureMap({{"w", 0, 8}}); }

MemoryRequest fill(std::uint64_t t, std::uint64_t id, std::uint64_t line = 0)
{
    return {t, RequestKind::fill, line, cache::FillCause::load_miss, id};
}
MemoryRequest writeback(std::uint64_t t, std::uint64_t line = 0)
{
    return {t, RequestKind::writeback, line, cache::FillCause::none, cache::kNoFill};
}
FillResolution resolve(std::uint64_t id, std::uint8_t mask, std::uint64_t line = 0) { return {id, line, mask, 0}; }

}  // namespace

TEST(Accumulator, HandEnumeratedTimeline)
{
    Accumulator acc(one_word());
    acc.roi_begin(0);
    acc.request(fill(5, 0));
    acc.resolution(resolve(0, 0));
    acc.request(fill(8, 1));
    acc.resolution(resolve(1, 0));
    acc.request(writeback(10));
    acc.roi_end(20);
    acc.close();
    const auto& w = acc.ledgers()[0];
    EXPECT_EQ(w.vulnerable_time, 8u);
    EXPECT_EQ(w.safe_time, 12u);
    EXPECT_EQ(w.fea_reclassified_time, 0u);
    EXPECT_DOUBLE_EQ(mvf(w), 0.4);
    EXPECT_DOUBLE_EQ(fea(w), 0.4);
    EXPECT_DOUBLE_EQ(safe_ratio(w), 0.6);
    EXPECT_EQ(w.mem_loads, 2u);
    EXPECT_EQ(w.mem_stores, 1u);
}

TEST(Accumulator, WritebackOnlyWordIsNotVulnerable)
{
    Accumulator acc(one_word());
    acc.roi_begin(0);
    acc.request(writeback(3));
    acc.request(writeback(9));
    acc.roi_end(20);
    acc.close();
    EXPECT_EQ(mvf(acc.ledgers()[0]), 0.0);
}

TEST(Accumulator, ReadOnceEarlyPattern)
{
    Accumulator acc(one_word());
    acc.roi_begin(0);
    acc.request(fill(29, 0));
    acc.resolution(resolve(0, 0));
    acc.roi_end(1000);
    acc.close();
    EXPECT_DOUBLE_EQ(mvf(acc.ledgers()[0]), 0.029);
}

TEST(Accumulator, OverwrittenFillCountsOnlyForFea)
{
    Accumulator acc(one_word());
    acc.roi_begin(0);
    acc.resolution(resolve(0, 0x01));  // resolution may precede its fill
    acc.request(fill(8, 0));
    acc.roi_end(20);
    acc.close();
    const auto& w = acc.ledgers()[0];
    EXPECT_EQ(w.vulnerable_time, 8u);
    EXPECT_EQ(w.fea_reclassified_time, 8u);
    EXPECT_DOUBLE_EQ(mvf(w), 0.4);
    EXPECT_DOUBLE_EQ(fea(w), 0.0);
}

TEST(Accumulator, RequestsOutsideRoiAreIgnoredAndCounted)
{
    Accumulator acc(one_word());
    acc.request(fill(1, 0));  // before the ROI is known
    acc.resolution(resolve(0, 0));
    acc.roi_begin(5);
    acc.request(writeback(4));
    acc.roi_end(20);
    acc.resolution(resolve(1, 0));
    acc.request(fill(25, 1));  // after ROI end
    acc.close();
    EXPECT_EQ(acc.ignored_requests(), 3u);
    EXPECT_EQ(acc.ledgers()[0].total(), 15u);
    EXPECT_FALSE(acc.ledgers()[0].touched());
}

TEST(Accumulator, UnmatchedFillIsAnError)
{
    Accumulator acc(one_word());
    acc.roi_begin(0);
    acc.request(fill(3, 0));
    acc.roi_end(10);
    EXPECT_THROW(acc.close(), Error);
}

TEST(Accumulator, WideWordsNeedBothHalvesOverwritten)
{
    trace::StructureMap m({{"w", 0, 64}});
    Accumulator acc(m, 16);
    acc.roi_begin(0);
    acc.request(fill(10, 0));
    acc.resolution(resolve(0, 0b00000111));  // words 0 and 1 of 64 bits, half of 128-bit word 1
    acc.roi_end(20);
    acc.close();
    ASSERT_EQ(acc.ledgers().size(), 4u);
    EXPECT_EQ(acc.ledgers()[0].fea_reclassified_time, 10u);
    EXPECT_EQ(acc.ledgers()[1].fea_reclassified_time, 0u);
    EXPECT_EQ(acc.ledgers()[1].vulnerable_time, 10u);
    EXPECT_THROW(Accumulator(m, 32), InvalidArgument);
}

TEST(Metrics, LedgerExamples)
{
    WordLedger a{8, 12, 0, 0, 0};
    EXPECT_DOUBLE_EQ(mvf(a), 0.4);
    EXPECT_DOUBLE_EQ(fea(a), 0.4);
    EXPECT_DOUBLE_EQ(safe_ratio(a), 0.6);
    WordLedger b{8, 12, 8, 0, 0};
    EXPECT_EQ(fea(b), 0.0);
    WordLedger c{0, 20, 0, 0, 0};
    EXPECT_EQ(mvf(c), 0.0);
    EXPECT_EQ(fea(c), 0.0);
    EXPECT_EQ(safe_ratio(c), 1.0);
    EXPECT_THROW(mvf(WordLedger{}), UndefinedMetric);
    EXPECT_THROW(fea(WordLedger{}), UndefinedMetric);
}

TEST(Metrics, Dvf)
{
    EXPECT_DOUBLE_EQ(dvf(1e-9, 1e6, 8, 4), 3.2e-2);
    EXPECT_EQ(dvf(0, 1e6, 8, 4), 0.0);
    EXPECT_EQ(dvf(1e-9, 0, 8, 4), 0.0);
    EXPECT_EQ(dvf(1e-9, 1e6, 0, 4), 0.0);
    EXPECT_EQ(dvf(1e-9, 1e6, 8, 0), 0.0);
    EXPECT_THROW(dvf(-1, 1, 1, 1), InvalidArgument);
}

TEST(Metrics, LdStNormalization)
{
    EXPECT_TRUE(std::isinf(ld_st_ratio(5, 0)));
    EXPECT_EQ(ld_st_normalized(5, 0), 1.0);
    EXPECT_EQ(ld_st_normalized(0, 0), 1.0);
    EXPECT_DOUBLE_EQ(ld_st_normalized(3, 1), 0.75);
    std::mt19937_64 gen(3);
    for (int i = 0; i < 10000; ++i) {
        const std::uint64_t la = gen() % 1000, sa = 1 + gen() % 1000, lb = gen() % 1000, sb = 1 + gen() % 1000;
        const bool lt = ld_st_ratio(la, sa) < ld_st_ratio(lb, sb);
        const bool lt_n = ld_st_normalized(la, sa) < ld_st_normalized(lb, sb);
        ASSERT_EQ(lt, lt_n) << la << "/" << sa << " vs " << lb << "/" << sb;
    }
}

TEST(Aggregate, StructureIsMeanOfWords)
{
    std::vector<WordLedger> w{{2, 8, 0, 1, 0}, {6, 4, 0, 1, 1}};
    const auto s = summarize_words("s", w, 8, 16, 1.0, 10);
    EXPECT_DOUBLE_EQ(s.mvf, 0.4);
    EXPECT_EQ(s.mem_loads, 2u);
    EXPECT_EQ(s.mem_stores, 1u);
    EXPECT_DOUBLE_EQ(s.ld_st, 2.0);
    EXPECT_DOUBLE_EQ(s.dvf, 1.0 * 10 * 16 * 3);
    std::vector<WordLedger> same(5, WordLedger{3, 7, 1, 1, 0});
    const auto t = summarize_words("t", same, 8, 40, 1.0, 10);
    EXPECT_DOUBLE_EQ(t.mvf, mvf(same[0]));
    EXPECT_DOUBLE_EQ(t.fea, fea(same[0]));
    EXPECT_TRUE(std::isinf(t.ld_st));
    EXPECT_EQ(t.ld_st_normalized, 1.0);
    EXPECT_THROW(summarize_words("u", same, 8, 40, 1.0, 0), UndefinedMetric);
}

TEST(Aggregate, EmptyStructureIsOmittedWithWarning)
{
    trace::StructureMap m({{"a", 0, 16}, {"empty", 64, 0}});
    Accumulator acc(m);
    acc.roi_begin(0);
    acc.roi_end(10);
    acc.close();
    const auto rep = aggregate(acc, 1.0);
    ASSERT_EQ(rep.structures.size(), 1u);
    EXPECT_EQ(rep.structures[0].structure, "a");
    EXPECT_EQ(rep.structures[0].untouched_words, 2u);
    EXPECT_EQ(rep.structures[0].mvf, 0.0);
    EXPECT_EQ(rep.warnings.size(), 2u);
}

TEST(Properties, AccumulatorMatchesIntervalWalker)
{
    std::mt19937_64 gen(2024);
    for (int i = 0; i < 2000; ++i) {
        const auto s = synthetic::make_stream(gen);
        Accumulator acc(s.map);
        synthetic::feed(s, acc);
        const auto expect = synthetic::walk_all(s, acc.index());
        for (std::size_t w = 0; w < expect.size(); ++w) {
            const auto& l = acc.ledgers()[w];
            ASSERT_EQ(l.vulnerable_time, expect[w].vulnerable) << "stream " << i << " word " << w;
            ASSERT_EQ(l.safe_time, expect[w].safe);
            ASSERT_EQ(l.fea_reclassified_time, expect[w].fea_reclassified);
            ASSERT_EQ(l.total(), s.roi_end - s.roi_start);
            const double m = mvf(l), f = fea(l);
            ASSERT_LE(0.0, f);
            ASSERT_LE(f, m);
            ASSERT_LE(m, 1.0);
            ASSERT_EQ(m + safe_ratio(l), 1.0);
        }
        const auto rep = aggregate(acc, 1.0);
        for (const auto& st : rep.structures)
            ASSERT_LE(st.fea, st.mvf);
    }
}

TEST(Properties, TrailingEpochLowersMvf)
{
    std::mt19937_64 gen(5);
    for (int i = 0; i < 200; ++i) {
        const auto s = synthetic::make_stream(gen);
        Accumulator base(s.map);
        synthetic::feed(s, base);
        double prev_sum = 0;
        for (const auto& l : base.ledgers())
            prev_sum += mvf(l);
        for (std::uint64_t delta : {10u, 1000u, 100000u}) {
            auto longer = s;
            longer.roi_end += delta;
            // Requests after the old end would now count; drop them to keep the
            // epoch read-free.
            std::erase_if(longer.items, [&](const auto& it) { return !it.is_resolution && it.req.time > s.roi_end; });
            std::erase_if(longer.items, [&](const auto& it) {
                if (!it.is_resolution)
                    return false;
                for (const auto& o : s.items)
                    if (!o.is_resolution && o.req.fill_id == it.res.fill_id && o.req.kind == RequestKind::fill)
                        return o.req.time > s.roi_end;
                return false;
            });
            Accumulator acc(longer.map);
            synthetic::feed(longer, acc);
            for (std::size_t w = 0; w < acc.ledgers().size(); ++w) {
                const double before = mvf(base.ledgers()[w]), after = mvf(acc.ledgers()[w]);
                if (before > 0)
                    ASSERT_LT(after, before);
                else
                    ASSERT_EQ(after, 0.0);
            }
        }
    }
}

TEST(EndToEnd, Side8ConservationAndDvfOrdering)
{
    const auto p = cg::make_problem(8);
    const auto map = trace::cg_layout(p.a.n_rows, p.a.nnz());
    Accumulator acc(map);
    const auto run = run_metrics(map, cache::CacheConfig::table1().scaled(1.0 / 512),
                                 [&](cache::Simulator& sim) { trace::record_solve(p, {}, sim); }, -1.0, 8, &acc);
    ASSERT_GT(run.T, 0u);
    std::uint64_t total = 0;
    for (const auto& l : acc.ledgers())
        total += l.total();
    std::uint64_t words = 0;
    for (const auto& s : run.report.structures)
        words += s.words;
    EXPECT_EQ(total, words * run.T);
    EXPECT_EQ(run.report.structures.size(), 9u);
    for (const auto& s : run.report.structures) {
        EXPECT_LE(s.fea, s.mvf) << s.structure;
        EXPECT_GE(s.fea, 0.0);
        EXPECT_LE(s.mvf, 1.0);
    }
}

TEST(EndToEnd, Side16DvfRanksMatrixArraysHighest)
{
    const auto p = cg::make_problem(16);
    const auto map = trace::cg_layout(p.a.n_rows, p.a.nnz());
    const auto run = run_metrics(map, cache::CacheConfig::table1().scaled(1.0 / 64),
                                 [&](cache::Simulator& sim) { trace::record_solve(p, {}, sim); });
    std::vector<std::pair<double, std::string>> by_dvf;
    for (const auto& s : run.report.structures)
        by_dvf.push_back({s.dvf, s.structure});
    std::sort(by_dvf.rbegin(), by_dvf.rend());
    std::set<std::string> top{by_dvf[0].second, by_dvf[1].second};
    EXPECT_EQ(top, (std::set<std::string>{"Ac", "Av"}));
}

TEST(Output, CsvAndJsonCarrySchema)
{
    MetricsReport r;
    r.T = 10;
    r.structures.push_back(summarize_words("x", std::vector<WordLedger>{{2, 8, 1, 1, 0}}, 8, 8, 1.0, 10));
    std::ostringstream os;
    write_csv(os, r);
    EXPECT_EQ(os.str().rfind("# schema: memvuln-metrics v1\n", 0), 0u);
    EXPECT_NE(os.str().find("x,1,0,8,10,0.2,0.1,0.8,"), std::string::npos) << os.str();
    EXPECT_NE(os.str().find(",inf,1\n"), std::string::npos);
    const auto j = to_json(r);
    EXPECT_EQ(j["schema"], "memvuln-metrics v1");
    EXPECT_EQ(j["structures"][0]["ld_st"], "inf");
}
