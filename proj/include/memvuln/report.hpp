#pragma once

// Joins simulation metrics with injection campaigns: per-structure table sorted
// by un-ACE probability, rank and linear correlations of each metric against
// it, and the list of structures where a metric falls below the campaign's
// lower confidence bound.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "memvuln/cache_config.hpp"
#include "memvuln/cg.hpp"
#include "memvuln/inject.hpp"
#include "memvuln/stats.hpp"
#include "memvuln/trace.hpp"
#include "memvuln/vulnmetrics.hpp"

namespace memvuln::report {

struct Row {
    Structure structure = Structure::x;
    metrics::StructureReport metrics;
    std::optional<inject::CampaignResult> campaign;
};

struct Correlation {
    std::string metric;
    double spearman = std::nan("");
    double pearson = std::nan("");
};

struct Violation {
    Structure structure = Structure::x;
    std::string metric;
    double value = 0;
    double ci_lower = 0;
};

struct ValidationReport {
    std::vector<Row> rows;  // increasing p_unace when campaigns ran, else structure order
    std::vector<Correlation> correlations;
    std::vector<Violation> violations;
    metrics::MetricsReport metrics;
    bool has_campaigns = false;

    const Row* find(Structure s) const noexcept
    {
        for (const auto& r : rows)
            if (r.structure == s)
                return &r;
        return nullptr;
    }
    const Correlation* correlation(std::string_view metric) const noexcept
    {
        for (const auto& c : correlations)
            if (c.metric == metric)
                return &c;
        return nullptr;
    }
};

// Metrics compared against p_unace, in report order.
inline const std::vector<std::pair<std::string, std::function<double(const metrics::StructureReport&)>>>&
compared_metrics()
{
    static const std::vector<std::pair<std::string, std::function<double(const metrics::StructureReport&)>>> m = {
        {"mvf", [](const metrics::StructureReport& s) { return s.mvf; }},
        {"fea", [](const metrics::StructureReport& s) { return s.fea; }},
        {"safe_ratio", [](const metrics::StructureReport& s) { return s.safe_ratio; }},
        {"dvf", [](const metrics::StructureReport& s) { return s.dvf; }},
        {"ld_st_normalized", [](const metrics::StructureReport& s) { return s.ld_st_normalized; }},
    };
    return m;
}

// Metrics that claim to bound p_unace from above.
inline constexpr std::array<std::string_view, 2> kBoundMetrics = {"mvf", "fea"};

inline ValidationReport build_report(const metrics::MetricsReport& m,
                                     const std::map<Structure, inject::CampaignResult>& campaigns)
{
    ValidationReport r;
    r.metrics = m;
    r.has_campaigns = !campaigns.empty();
    for (const auto& s : m.structures) {
        Row row;
        const auto id = structure_from_name(s.structure);
        if (!id)
            throw InvalidArgument("report: unknown structure " + s.structure);
        row.structure = *id;
        row.metrics = s;
        if (auto it = campaigns.find(row.structure); it != campaigns.end())
            row.campaign = it->second;
        r.rows.push_back(std::move(row));
    }
    if (!r.has_campaigns)
        return r;

    for (const auto& row : r.rows)
        if (!row.campaign)
            throw InvalidArgument("report: no campaign for structure " + std::string(name_of(row.structure)));
    std::stable_sort(r.rows.begin(), r.rows.end(),
                     [](const Row& a, const Row& b) { return a.campaign->p_unace < b.campaign->p_unace; });

    std::vector<double> p;
    for (const auto& row : r.rows)
        p.push_back(row.campaign->p_unace);
    for (const auto& [name, get] : compared_metrics()) {
        std::vector<double> v;
        for (const auto& row : r.rows)
            v.push_back(get(row.metrics));
        Correlation c;
        c.metric = name;
        if (v.size() >= 2) {
            c.spearman = stats::spearman(v, p);
            c.pearson = stats::pearson(v, p);
        }
        r.correlations.push_back(c);
    }
    for (const auto& row : r.rows)
        for (const auto& [name, get] : compared_metrics())
            if (std::find(kBoundMetrics.begin(), kBoundMetrics.end(), name) != kBoundMetrics.end() &&
                get(row.metrics) < row.campaign->ci99.lower)
                r.violations.push_back({row.structure, name, get(row.metrics), row.campaign->ci99.lower});
    return r;
}

inline constexpr const char* kReportCsvSchema = "# schema: memvuln-report v1";
inline constexpr const char* kCorrelationCsvSchema = "# schema: memvuln-correlations v1";

inline void write_csv(std::ostream& os, const ValidationReport& r)
{
    os << kReportCsvSchema << "\n";
    os << "structure,runs,ace,crash,wrong_result,extra_work,hang,p_unace,ci99_lower,ci99_upper,mvf,fea,safe_ratio,"
          "dvf,ld_st_normalized\n";
    os.precision(10);
    for (const auto& row : r.rows) {
        os << name_of(row.structure) << ',';
        if (row.campaign) {
            const auto& c = *row.campaign;
            os << c.n_runs;
            for (auto k : inject::kOutcomeClasses)
                os << ',' << c.count(k);
            os << ',' << c.p_unace << ',' << c.ci99.lower << ',' << c.ci99.upper;
        } else {
            os << ",,,,,,,,";
        }
        const auto& m = row.metrics;
        os << ',' << m.mvf << ',' << m.fea << ',' << m.safe_ratio << ',' << m.dvf << ',' << m.ld_st_normalized << "\n";
    }
}

inline void write_correlations_csv(std::ostream& os, const ValidationReport& r)
{
    os << kCorrelationCsvSchema << "\n";
    os << "metric,spearman,pearson\n";
    os.precision(10);
    for (const auto& c : r.correlations)
        os << c.metric << ',' << c.spearman << ',' << c.pearson << "\n";
}

// Whitespace-separated columns for scripts/fig1.gp: bars for p_unace with its
// interval, lines for MVF and FEA.
inline void write_plot_data(std::ostream& os, const ValidationReport& r)
{
    os << "# memvuln fig1 data v1\n";
    os << "# index structure p_unace ci99_lower ci99_upper mvf fea safe_ratio ld_st_normalized\n";
    os.precision(8);
    std::size_t i = 0;
    for (const auto& row : r.rows) {
        os << i++ << ' ' << name_of(row.structure) << ' ';
        if (row.campaign)
            os << row.campaign->p_unace << ' ' << row.campaign->ci99.lower << ' ' << row.campaign->ci99.upper;
        else
            os << "NaN NaN NaN";
        os << ' ' << row.metrics.mvf << ' ' << row.metrics.fea << ' ' << row.metrics.safe_ratio << ' '
           << row.metrics.ld_st_normalized << "\n";
    }
}

inline nlohmann::json json_number(double v)
{
    return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

inline nlohmann::json to_json(const ValidationReport& r)
{
    nlohmann::json j;
    j["schema"] = "memvuln-report v1";
    j["metrics"] = metrics::to_json(r.metrics);
    j["has_campaigns"] = r.has_campaigns;
    for (const auto& row : r.rows) {
        nlohmann::json e;
        e["structure"] = std::string(name_of(row.structure));
        e["mvf"] = row.metrics.mvf;
        e["fea"] = row.metrics.fea;
        e["safe_ratio"] = row.metrics.safe_ratio;
        e["dvf"] = row.metrics.dvf;
        e["ld_st_normalized"] = row.metrics.ld_st_normalized;
        if (row.campaign)
            e["campaign"] = inject::to_json(*row.campaign);
        j["rows"].push_back(e);
    }
    for (const auto& c : r.correlations)
        j["correlations"][c.metric] = {{"spearman", json_number(c.spearman)}, {"pearson", json_number(c.pearson)}};
    j["violations"] = nlohmann::json::array();
    for (const auto& v : r.violations)
        j["violations"].push_back({{"structure", std::string(name_of(v.structure))},
                                   {"metric", v.metric},
                                   {"value", v.value},
                                   {"ci99_lower", v.ci_lower}});
    return j;
}

inline void print_summary(std::ostream& os, const ValidationReport& r)
{
    os << "structure     p_unace  [ci99]               mvf      fea      dvf        ld/(ld+st)\n";
    char buf[160];
    for (const auto& row : r.rows) {
        if (row.campaign)
            std::snprintf(buf, sizeof buf, "%-12s  %.4f  [%.4f, %.4f]  ", std::string(name_of(row.structure)).c_str(),
                          row.campaign->p_unace, row.campaign->ci99.lower, row.campaign->ci99.upper);
        else
            std::snprintf(buf, sizeof buf, "%-12s  -       -                   ",
                          std::string(name_of(row.structure)).c_str());
        os << buf;
        std::snprintf(buf, sizeof buf, "%.4f   %.4f   %.4e %.4f\n", row.metrics.mvf, row.metrics.fea, row.metrics.dvf,
                      row.metrics.ld_st_normalized);
        os << buf;
    }
    for (const auto& c : r.correlations) {
        std::snprintf(buf, sizeof buf, "spearman(%s, p_unace) = %.4f   pearson = %.4f\n", c.metric.c_str(), c.spearman,
                      c.pearson);
        os << buf;
    }
    if (r.has_campaigns) {
        if (r.violations.empty())
            os << "bound violations: none\n";
        for (const auto& v : r.violations)
            os << "bound violation: " << name_of(v.structure) << ' ' << v.metric << " = " << v.value
               << " < ci99 lower " << v.ci_lower << "\n";
    }
}

// Pipeline ------------------------------------------------------------------------------

struct PipelineConfig {
    std::size_t side = 32;
    double tol_factor = 1e-8;
    std::uint64_t runs = 1000;  // per structure; 0 for metrics only
    std::uint64_t seed = 1;
    unsigned parallel = 1;
    std::filesystem::path out_dir = "memvuln-out";
    double cache_scale = -1;  // <= 0: (side / 64)^3
    std::string config_path;  // hierarchy description; empty for the built-in table
    std::uint32_t word_bytes = 8;
    inject::Mode mode = inject::Mode::async;
    std::vector<Structure> structures{kTracked.begin(), kTracked.end()};
};

struct PipelineResult {
    ValidationReport report;
    cg::SolveRecord solve;
    metrics::MetricsRun metrics_run;
    inject::Baseline baseline;
    cache::CacheConfig cache;
};

inline double default_cache_scale(std::size_t side)
{
    const double f = static_cast<double>(side) / 64.0;
    return f * f * f;
}

inline cache::CacheConfig pipeline_cache(const PipelineConfig& cfg)
{
    cache::CacheConfig c = cfg.config_path.empty() ? cache::CacheConfig::table1() : [&] {
        std::ifstream in(cfg.config_path);
        if (!in)
            throw Error("cannot open cache config " + cfg.config_path);
        return cache::parse_config(in);
    }();
    const double scale = cfg.cache_scale > 0 ? cfg.cache_scale : default_cache_scale(cfg.side);
    if (scale != 1.0)
        c = c.scaled(scale);
    c.validate();
    return c;
}

namespace detail {

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f())
{
    try {
        return f();
    } catch (const std::exception& e) {
        throw Error(std::string("stage ") + name + ": " + e.what());
    }
}

inline std::ofstream open_out(const std::filesystem::path& p)
{
    std::ofstream o(p);
    if (!o)
        throw Error("cannot write " + p.string());
    return o;
}

}  // namespace detail

// trace -> simulate -> metrics, then one campaign per structure, then the joined
// report. Everything lands in cfg.out_dir; campaign logs there are resumed.
inline PipelineResult run_pipeline(const PipelineConfig& cfg, std::ostream* log = nullptr)
{
    PipelineResult out;
    std::filesystem::create_directories(cfg.out_dir);
    const cg::Problem problem = detail::stage("problem", [&] { return cg::make_problem(cfg.side, cfg.tol_factor); });
    out.cache = detail::stage("config", [&] { return pipeline_cache(cfg); });

    out.metrics_run = detail::stage("simulate", [&] {
        const auto map = trace::cg_layout(problem.a.n_rows, problem.a.nnz());
        auto run = metrics::run_metrics(
            map, out.cache, [&](cache::Simulator& sim) { out.solve = trace::record_solve(problem, {}, sim); }, -1.0,
            cfg.word_bytes);
        if (!out.solve.verified)
            throw Error("traced solve did not verify");
        return run;
    });
    if (log)
        *log << "simulate: " << out.solve.iterations << " iterations, T = " << out.metrics_run.T << " cycles, "
             << out.metrics_run.sim.fills << " fills, " << out.metrics_run.sim.writebacks << " writebacks\n";
    detail::stage("metrics", [&] {
        auto f = detail::open_out(cfg.out_dir / "metrics.csv");
        metrics::write_csv(f, out.metrics_run.report);
        return 0;
    });

    std::map<Structure, inject::CampaignResult> campaigns;
    if (cfg.runs > 0) {
        out.baseline = detail::stage("baseline", [&] { return inject::measure_baseline(problem, {}, cfg.parallel); });
        if (log)
            *log << "baseline: " << out.baseline.iterations << " iterations, " << out.baseline.roi_wall_time
                 << " s ROI\n";
        std::filesystem::create_directories(cfg.out_dir / "campaigns");
        for (Structure s : cfg.structures) {
            campaigns[s] = detail::stage("inject", [&] {
                inject::CampaignConfig cc;
                cc.structure = s;
                cc.runs = cfg.runs;
                cc.parallel = cfg.parallel;
                cc.seed = cfg.seed;
                cc.side = cfg.side;
                cc.tol_factor = cfg.tol_factor;
                cc.mode = cfg.mode;
                cc.log_path = (cfg.out_dir / "campaigns" / (std::string(name_of(s)) + ".csv")).string();
                auto res = inject::run_campaign(problem, cc, out.baseline);
                auto j = detail::open_out(cfg.out_dir / "campaigns" / (std::string(name_of(s)) + ".json"));
                j << inject::to_json(res).dump(2) << "\n";
                return res;
            });
            if (log)
                *log << "inject " << name_of(s) << ": p_unace " << campaigns[s].p_unace << " ["
                     << campaigns[s].ci99.lower << ", " << campaigns[s].ci99.upper << "]\n";
        }
    }

    out.report = detail::stage("report", [&] {
        auto m = out.metrics_run.report;
        if (!campaigns.empty()) {
            std::erase_if(m.structures, [&](const metrics::StructureReport& s) {
                const auto id = structure_from_name(s.structure);
                return !id || !campaigns.count(*id);
            });
        }
        auto r = build_report(m, campaigns);
        auto csv = detail::open_out(cfg.out_dir / "report.csv");
        write_csv(csv, r);
        auto cor = detail::open_out(cfg.out_dir / "correlations.csv");
        write_correlations_csv(cor, r);
        auto dat = detail::open_out(cfg.out_dir / "fig1.dat");
        write_plot_data(dat, r);
        auto js = detail::open_out(cfg.out_dir / "report.json");
        js << to_json(r).dump(2) << "\n";
        return r;
    });
    return out;
}

}  // namespace memvuln::report
