#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "memvuln/report.hpp"
#include "test_util.hpp"

using namespace memvuln;
using namespace memvuln::report;

namespace {

inject::CampaignResult campaign(Structure s, std::uint64_t n, std::uint64_t unace)
{
    inject::CampaignResult c;
    c.structure = s;
    c.n_runs = n;
    c.tally[static_cast<std::size_t>(inject::OutcomeClass::ace)] = n - unace;
    c.tally[static_cast<std::size_t>(inject::OutcomeClass::wrong_result)] = unace;
    inject::finalize(c);
    return c;
}

metrics::StructureReport structure(Structure s, double mvf, double fea, double dvf, double ldst)
{
    metrics::StructureReport r;
    r.structure = std::string(name_of(s));
    r.mvf = mvf;
    r.fea = fea;
    r.safe_ratio = 1 - mvf;
    r.dvf = dvf;
    r.ld_st_normalized = ldst;
    return r;
}

metrics::MetricsReport three_structures()
{
    metrics::MetricsReport m;
    m.T = 100;
    m.structures = {structure(Structure::x, 0.8, 0.8, 3.0, 0.5), structure(Structure::d, 0.9, 0.3, 2.0, 0.6),
                    structure(Structure::b, 0.02, 0.02, 1.0, 1.0)};
    return m;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST(Report, SortedByUnaceWithCorrelations)
{
    std::map<Structure, inject::CampaignResult> c = {{Structure::x, campaign(Structure::x, 1000, 250)},
                                                     {Structure::d, campaign(Structure::d, 1000, 100)},
                                                     {Structure::b, campaign(Structure::b, 1000, 0)}};
    const auto r = build_report(three_structures(), c);
    ASSERT_EQ(r.rows.size(), 3u);
    EXPECT_EQ(r.rows[0].structure, Structure::b);
    EXPECT_EQ(r.rows[1].structure, Structure::d);
    EXPECT_EQ(r.rows[2].structure, Structure::x);
    EXPECT_DOUBLE_EQ(r.correlation("fea")->spearman, 1.0);
    EXPECT_DOUBLE_EQ(r.correlation("mvf")->spearman, 0.5);
    EXPECT_DOUBLE_EQ(r.correlation("safe_ratio")->spearman, -0.5);
    EXPECT_DOUBLE_EQ(r.correlation("ld_st_normalized")->spearman, -1.0);
    EXPECT_TRUE(r.violations.empty());
}

TEST(Report, FlagsMetricBelowLowerBound)
{
    std::map<Structure, inject::CampaignResult> c = {{Structure::x, campaign(Structure::x, 1000, 250)},
                                                     {Structure::d, campaign(Structure::d, 1000, 500)},
                                                     {Structure::b, campaign(Structure::b, 1000, 0)}};
    const auto r = build_report(three_structures(), c);
    ASSERT_EQ(r.violations.size(), 1u);
    EXPECT_EQ(r.violations[0].structure, Structure::d);
    EXPECT_EQ(r.violations[0].metric, "fea");
    EXPECT_LT(r.violations[0].value, r.violations[0].ci_lower);
}

TEST(Report, ValueInsideIntervalIsNotAViolation)
{
    // FEA 0.3 above p_unace 0.31 lower bound (about 0.27) but below the point estimate
    std::map<Structure, inject::CampaignResult> c = {{Structure::x, campaign(Structure::x, 1000, 250)},
                                                     {Structure::d, campaign(Structure::d, 1000, 310)},
                                                     {Structure::b, campaign(Structure::b, 1000, 0)}};
    EXPECT_TRUE(build_report(three_structures(), c).violations.empty());
}

TEST(Report, MetricsOnlyHasNoCampaignColumns)
{
    const auto r = build_report(three_structures(), {});
    EXPECT_FALSE(r.has_campaigns);
    EXPECT_TRUE(r.correlations.empty());
    std::ostringstream os;
    write_csv(os, r);
    std::istringstream in(os.str());
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, kReportCsvSchema);
    std::getline(in, line);
    std::getline(in, line);
    EXPECT_EQ(line.rfind("x,,,,,,,,,,0.8,", 0), 0u) << line;
}

TEST(Report, MissingCampaignIsAnError)
{
    std::map<Structure, inject::CampaignResult> c = {{Structure::x, campaign(Structure::x, 10, 2)}};
    EXPECT_THROW(build_report(three_structures(), c), InvalidArgument);
}

TEST(Report, PlotDataHasOneLinePerStructure)
{
    std::map<Structure, inject::CampaignResult> c = {{Structure::x, campaign(Structure::x, 100, 25)},
                                                     {Structure::d, campaign(Structure::d, 100, 10)},
                                                     {Structure::b, campaign(Structure::b, 100, 0)}};
    std::ostringstream os;
    write_plot_data(os, build_report(three_structures(), c));
    std::istringstream in(os.str());
    std::string line;
    int data = 0;
    while (std::getline(in, line))
        data += !line.empty() && line[0] != '#';
    EXPECT_EQ(data, 3);
    EXPECT_NE(os.str().find("0 b 0 0 "), std::string::npos);
}

TEST(Pipeline, MetricsOnlyIsDeterministic)
{
    PipelineConfig cfg;
    cfg.side = 8;
    cfg.runs = 0;
    cfg.out_dir = scratch_dir() / "p1";
    const auto a = run_pipeline(cfg);
    cfg.out_dir = scratch_dir() / "p2";
    const auto b = run_pipeline(cfg);
    EXPECT_FALSE(a.report.has_campaigns);
    EXPECT_EQ(a.report.rows.size(), 9u);
    EXPECT_EQ(slurp(scratch_dir() / "p1" / "metrics.csv"), slurp(scratch_dir() / "p2" / "metrics.csv"));
    EXPECT_EQ(slurp(scratch_dir() / "p1" / "report.csv"), slurp(scratch_dir() / "p2" / "report.csv"));
    for (auto f : {"metrics.csv", "report.csv", "correlations.csv", "fig1.dat", "report.json"})
        EXPECT_TRUE(std::filesystem::exists(scratch_dir() / "p1" / f)) << f;
}

TEST(Pipeline, SmallCampaignJoinsAndResumes)
{
    PipelineConfig cfg;
    cfg.side = 8;
    cfg.runs = 12;
    cfg.mode = inject::Mode::paused;
    cfg.structures = {Structure::Av, Structure::b};
    cfg.out_dir = scratch_dir() / "p3";
    const auto a = run_pipeline(cfg);
    ASSERT_EQ(a.report.rows.size(), 2u);
    EXPECT_TRUE(a.report.has_campaigns);
    EXPECT_EQ(a.report.find(Structure::b)->campaign->n_runs, 12u);
    EXPECT_TRUE(std::filesystem::exists(cfg.out_dir / "campaigns" / "Av.csv"));

    const auto b = run_pipeline(cfg);
    EXPECT_EQ(b.report.find(Structure::Av)->campaign->resumed, 12u);
    EXPECT_EQ(b.report.find(Structure::Av)->campaign->tally, a.report.find(Structure::Av)->campaign->tally);
}

TEST(Pipeline, StageNameInDiagnostics)
{
    PipelineConfig cfg;
    cfg.side = 8;
    cfg.runs = 0;
    cfg.out_dir = scratch_dir() / "p4";
    cfg.config_path = (scratch_dir() / "missing.cfg").string();
    try {
        run_pipeline(cfg);
        FAIL() << "expected an error";
    } catch (const Error& e) {
        EXPECT_EQ(std::string(e.what()).rfind("stage config:", 0), 0u) << e.what();
    }
}

TEST(Pipeline, DefaultCacheScale)
{
    EXPECT_DOUBLE_EQ(default_cache_scale(64), 1.0);
    EXPECT_DOUBLE_EQ(default_cache_scale(32), 0.125);
}
