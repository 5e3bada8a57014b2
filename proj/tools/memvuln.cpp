// memvuln: command-line front end.
//
//   memvuln cg solve|save          generate and solve the benchmark problem
//   memvuln trace record|info      capture and inspect access traces
//   memvuln config show            print the cache hierarchy description
//   memvuln metrics                simulate a trace and report vulnerability metrics
//   memvuln faultmodel check       compare closed forms against Monte Carlo
//   memvuln inject campaign        native fault-injection campaign for one structure
//   memvuln pipeline               all of the above, joined into one report
//
// Exit status: 0 on success, 1 on errors, 2 when a pipeline finds a bound
// violation, CLI11's codes for usage errors.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>

#include "CLI11.hpp"

#include "memvuln/cachesim.hpp"
#include "memvuln/faultmodel.hpp"
#include "memvuln/inject.hpp"
#include "memvuln/report.hpp"
#include "memvuln/trace.hpp"
#include "memvuln/vulnmetrics.hpp"

using namespace memvuln;

namespace {

constexpr int kExitViolation = 2;

std::filesystem::path scratch_root()
{
    if (const char* s = std::getenv("MEMVULN_SCRATCH"); s != nullptr && *s != '\0')
        return s;
    return std::filesystem::current_path();
}

// Writes to `path`, or standard output when it is empty or "-".
class Output {
  public:
    explicit Output(const std::string& path)
    {
        if (!path.empty() && path != "-") {
            file_ = std::make_unique<std::ofstream>(path);
            if (!*file_)
                throw Error("cannot write " + path);
        }
    }
    std::ostream& operator*() { return file_ ? *file_ : std::cout; }

  private:
    std::unique_ptr<std::ofstream> file_;
};

Structure parse_structure(const std::string& name)
{
    const auto s = structure_from_name(name);
    if (!s)
        throw InvalidArgument("unknown structure '" + name + "' (expected Ar Ac Av x g d d_prime q b pad)");
    return *s;
}

cache::CacheConfig load_cache(const std::string& path, double scale)
{
    cache::CacheConfig c = cache::CacheConfig::table1();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in)
            throw Error("cannot open cache config " + path);
        c = cache::parse_config(in);
    }
    if (scale > 0 && scale != 1.0)
        c = c.scaled(scale);
    c.validate();
    return c;
}

inject::Mode parse_mode(const std::string& m)
{
    if (m == "async")
        return inject::Mode::async;
    if (m == "paused")
        return inject::Mode::paused;
    throw InvalidArgument("mode must be async or paused");
}

unsigned default_parallel() { return std::max(1u, std::thread::hardware_concurrency()); }

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"memory vulnerability metrics and fault-injection campaigns for a CG solver"};
    app.require_subcommand(1);
    app.failure_message(CLI::FailureMessage::help);

    // cg ---------------------------------------------------------------------------------
    auto* cg_cmd = app.add_subcommand("cg", "benchmark problem");
    cg_cmd->require_subcommand(1);
    std::size_t side = 32;
    double tol = 1e-8;
    unsigned threads = 1;
    std::uint32_t t_max = 2000;
    auto* cg_solve = cg_cmd->add_subcommand("solve", "solve and verify, fault free");
    cg_solve->add_option("--side", side, "grid side length")->capture_default_str()->check(CLI::Range(2, 1024));
    cg_solve->add_option("--tol", tol, "tolerance factor (times ||b||^2)")->capture_default_str();
    cg_solve->add_option("--threads", threads, "solver threads")->capture_default_str();
    cg_solve->add_option("--t-max", t_max, "iteration limit")->capture_default_str();
    std::string matrix_out, rhs_out;
    auto* cg_save = cg_cmd->add_subcommand("save", "write A and b in binary form");
    cg_save->add_option("--side", side, "grid side length")->capture_default_str()->check(CLI::Range(2, 1024));
    cg_save->add_option("--matrix", matrix_out, "matrix output file")->required();
    cg_save->add_option("--rhs", rhs_out, "right-hand side output file")->required();

    // trace ------------------------------------------------------------------------------
    auto* trace_cmd = app.add_subcommand("trace", "access traces");
    trace_cmd->require_subcommand(1);
    std::string trace_path;
    auto* trace_record = trace_cmd->add_subcommand("record", "record the access trace of one solve");
    trace_record->add_option("--side", side, "grid side length")->capture_default_str()->check(CLI::Range(2, 1024));
    trace_record->add_option("--tol", tol, "tolerance factor")->capture_default_str();
    trace_record->add_option("--out", trace_path, "trace file")->required();
    auto* trace_info = trace_cmd->add_subcommand("info", "summarize a trace file");
    trace_info->add_option("trace", trace_path, "trace file")->required();

    // config -----------------------------------------------------------------------------
    auto* config_cmd = app.add_subcommand("config", "cache hierarchy description");
    config_cmd->require_subcommand(1);
    std::string config_path;
    double cache_scale = 0;
    auto* config_show = config_cmd->add_subcommand("show", "print the (optionally scaled) hierarchy");
    config_show->add_option("--config", config_path, "key-value config file (default: built-in table)");
    config_show->add_option("--cache-scale", cache_scale, "capacity scale factor");

    // metrics ----------------------------------------------------------------------------
    auto* metrics_cmd = app.add_subcommand("metrics", "simulate a trace and report per-structure metrics");
    std::string out_path, histogram_path, dump_path;
    std::uint32_t word_bytes = 8;
    double fit = -1;
    bool as_json = false;
    metrics_cmd->add_option("--trace", trace_path, "trace file")->required();
    metrics_cmd->add_option("--config", config_path, "key-value config file (default: built-in table)");
    metrics_cmd->add_option("--cache-scale", cache_scale, "capacity scale factor");
    metrics_cmd->add_option("--word-bytes", word_bytes, "metric word size")->check(CLI::IsMember({8, 16}));
    metrics_cmd->add_option("--fit", fit, "faults per bit per cycle (default: 1 FIT/Mbit)");
    metrics_cmd->add_option("--out", out_path, "report file (default: standard output)");
    metrics_cmd->add_flag("--json", as_json, "JSON instead of CSV");
    metrics_cmd->add_option("--histogram", histogram_path, "per-word MVF histogram output");
    metrics_cmd->add_option("--dump-requests", dump_path, "binary memory request dump");

    // faultmodel -------------------------------------------------------------------------
    auto* fm_cmd = app.add_subcommand("faultmodel", "fault model");
    fm_cmd->require_subcommand(1);
    double lambda = 0;
    std::string timeline_path;
    std::uint64_t trials = 1000000;
    std::uint64_t seed = 1;
    auto* fm_check = fm_cmd->add_subcommand("check", "closed forms vs Monte Carlo for one timeline");
    fm_check->add_option("--lambda", lambda, "fault rate per time unit")->required();
    fm_check->add_option("--timeline-file", timeline_path, "timeline ('T <dur>' then '<time> safe|unsafe')")
        ->required();
    fm_check->add_option("--trials", trials, "Monte Carlo trials")->capture_default_str();
    fm_check->add_option("--seed", seed, "Monte Carlo seed")->capture_default_str();
    fm_check->add_option("--threads", threads, "worker threads")->capture_default_str();

    // inject -----------------------------------------------------------------------------
    auto* inj_cmd = app.add_subcommand("inject", "fault injection");
    inj_cmd->require_subcommand(1);
    std::string structure_name, mode_name = "async", log_path;
    std::uint64_t runs = 1000;
    unsigned parallel = default_parallel();
    auto* inj_campaign = inj_cmd->add_subcommand("campaign", "single-bit flips into one structure");
    inj_campaign->add_option("--structure", structure_name, "Ar Ac Av x g d d_prime q b pad")->required();
    inj_campaign->add_option("--runs", runs, "injections")->capture_default_str();
    inj_campaign->add_option("--parallel", parallel, "concurrent runs")->capture_default_str();
    inj_campaign->add_option("--seed", seed, "plan seed")->capture_default_str();
    inj_campaign->add_option("--side", side, "grid side length")->capture_default_str()->check(CLI::Range(2, 1024));
    inj_campaign->add_option("--tol", tol, "tolerance factor")->capture_default_str();
    inj_campaign->add_option("--mode", mode_name, "async or paused")->capture_default_str();
    inj_campaign->add_option("--log", log_path, "CSV run log, resumed if present");
    inj_campaign->add_option("--out", out_path, "result JSON (default: standard output)");

    // pipeline ---------------------------------------------------------------------------
    auto* pipe_cmd = app.add_subcommand("pipeline", "trace, simulate, metrics, campaigns, report");
    std::string out_dir;
    std::vector<std::string> structure_names;
    pipe_cmd->add_option("--side", side, "grid side length")->capture_default_str()->check(CLI::Range(2, 1024));
    pipe_cmd->add_option("--tol", tol, "tolerance factor")->capture_default_str();
    pipe_cmd->add_option("--runs", runs, "injections per structure (0: metrics only)")->capture_default_str();
    pipe_cmd->add_option("--seed", seed, "plan seed")->capture_default_str();
    pipe_cmd->add_option("--parallel", parallel, "concurrent runs")->capture_default_str();
    pipe_cmd->add_option("--out-dir", out_dir, "output directory (default: $MEMVULN_SCRATCH/memvuln-out)");
    pipe_cmd->add_option("--cache-scale", cache_scale, "capacity scale factor (default: (side/64)^3)");
    pipe_cmd->add_option("--config", config_path, "key-value config file (default: built-in table)");
    pipe_cmd->add_option("--word-bytes", word_bytes, "metric word size")->check(CLI::IsMember({8, 16}));
    pipe_cmd->add_option("--mode", mode_name, "async or paused")->capture_default_str();
    pipe_cmd->add_option("--structures", structure_names, "subset of structures (default: all nine)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cg_solve->parsed()) {
            const auto p = cg::make_problem(side, tol);
            cg::SolverOptions opt;
            opt.threads = threads;
            opt.t_max = t_max;
            cg::Workspace ws;
            const auto r = cg::solve_and_verify(p, opt, &ws);
            std::cout << "n_rows " << p.a.n_rows << "\nnnz " << p.a.nnz() << "\niterations " << r.iterations
                      << "\nconverged " << r.converged << "\nverified " << r.verified << "\nresidual_norm_sq "
                      << cg::residual_norm_sq(p.a, p.b, ws.x) << "\ntol " << p.tol << "\nroi_wall_time_s "
                      << r.roi_wall_time << "\n";
            return r.verified ? 0 : 1;
        }
        if (cg_save->parsed()) {
            const auto p = cg::make_problem(side, tol);
            std::ofstream m(matrix_out, std::ios::binary), b(rhs_out, std::ios::binary);
            if (!m || !b)
                throw Error("cannot open output files");
            cg::write_matrix(m, p.a);
            cg::write_vector(b, p.b);
            return 0;
        }
        if (trace_record->parsed()) {
            const auto p = cg::make_problem(side, tol);
            trace::TraceWriter w(trace_path, trace::cg_layout(p.a.n_rows, p.a.nnz()));
            const auto r = trace::record_solve(p, {}, w);
            w.close();
            std::cout << "events " << w.count() << "\niterations " << r.iterations << "\nverified " << r.verified
                      << "\n";
            return r.verified ? 0 : 1;
        }
        if (trace_info->parsed()) {
            trace::TraceReader reader(trace_path);
            std::cout << "events " << reader.size() << "\nroi " << reader.roi().start << ' ' << reader.roi().end
                      << "\n";
            const auto s = trace::summarize(reader);
            std::cout << "roi_events " << s.roi_events << "\nother " << s.other << "\n";
            std::cout << "structure base length roi_loads roi_stores\n";
            for (std::size_t i = 0; i < reader.structures().size(); ++i) {
                const auto& r = reader.structures()[i];
                std::cout << r.id << ' ' << r.base << ' ' << r.length << ' ' << s.loads[i] << ' ' << s.stores[i]
                          << "\n";
            }
            return 0;
        }
        if (config_show->parsed()) {
            std::cout << cache::to_text(load_cache(config_path, cache_scale));
            return 0;
        }
        if (metrics_cmd->parsed()) {
            const auto cfg = load_cache(config_path, cache_scale);
            trace::TraceReader reader(trace_path);
            metrics::Accumulator acc(reader.structures(), word_bytes);
            std::unique_ptr<cache::RequestDumpWriter> dump;
            if (!dump_path.empty())
                dump = std::make_unique<cache::RequestDumpWriter>(dump_path);
            cache::TeeSink tee = dump ? cache::TeeSink{&acc, dump.get()} : cache::TeeSink{&acc};
            cache::Simulator sim(cfg, tee);
            cache::simulate(reader, sim);
            const auto rep = metrics::aggregate(acc, fit >= 0 ? fit : metrics::default_fit_per_cycle(cfg.core_ghz));
            Output out(out_path);
            if (as_json)
                *out << metrics::to_json(rep).dump(2) << "\n";
            else
                metrics::write_csv(*out, rep);
            if (!histogram_path.empty()) {
                Output h(histogram_path);
                metrics::write_word_histogram(*h, acc);
            }
            for (const auto& w : rep.warnings)
                std::cerr << "warning: " << w << "\n";
            return 0;
        }
        if (fm_check->parsed()) {
            std::ifstream in(timeline_path);
            if (!in)
                throw Error("cannot open timeline " + timeline_path);
            const auto tl = faultmodel::parse_timeline(in);
            const faultmodel::FaultModelParams params{lambda, tl.T()};
            params.validate();
            const auto mc = faultmodel::monte_carlo_consume(tl, lambda, trials, seed, 0.99, threads);
            std::cout.precision(10);
            std::cout << "lambda_T " << lambda * tl.T() << (params.rare() ? " (rare)" : "") << "\n";
            std::cout << "V " << tl.vulnerability() << "\n";
            std::cout << "form value\n";
            std::cout << "exact_sum " << faultmodel::p_consume_exact(tl, lambda) << "\n";
            std::cout << "product " << faultmodel::p_consume_product(tl, lambda) << "\n";
            std::cout << "linear " << faultmodel::p_consume_linear(tl, lambda) << "\n";
            std::cout << "mc_any_consumed " << mc.frequency << " ci99 " << mc.ci.lower << ' ' << mc.ci.upper << "\n";
            std::cout << "mc_mean_consuming " << mc.mean_consuming << " ci99 " << mc.mean_ci.lower << ' '
                      << mc.mean_ci.upper << "\n";
            std::cout << "trials " << mc.trials << " seed " << seed << "\n";
            return 0;
        }
        if (inj_campaign->parsed()) {
            const auto p = cg::make_problem(side, tol);
            inject::CampaignConfig cc;
            cc.structure = parse_structure(structure_name);
            cc.runs = runs;
            cc.parallel = parallel;
            cc.seed = seed;
            cc.side = side;
            cc.tol_factor = tol;
            cc.mode = parse_mode(mode_name);
            cc.log_path = log_path;
            if (cc.runs == 0)
                throw InvalidArgument("campaign needs at least one run");
            const auto base = inject::measure_baseline(p, {}, parallel);
            std::cerr << "baseline: " << base.iterations << " iterations, " << base.roi_wall_time << " s\n";
            const auto r = inject::run_campaign(p, cc, base);
            Output out(out_path);
            *out << inject::to_json(r).dump(2) << "\n";
            return 0;
        }
        if (pipe_cmd->parsed()) {
            report::PipelineConfig pc;
            pc.side = side;
            pc.tol_factor = tol;
            pc.runs = runs;
            pc.seed = seed;
            pc.parallel = parallel;
            pc.out_dir = out_dir.empty() ? scratch_root() / "memvuln-out" : std::filesystem::path(out_dir);
            pc.cache_scale = cache_scale;
            pc.config_path = config_path;
            pc.word_bytes = word_bytes;
            pc.mode = parse_mode(mode_name);
            if (!structure_names.empty()) {
                pc.structures.clear();
                for (const auto& n : structure_names)
                    pc.structures.push_back(parse_structure(n));
            }
            const auto res = report::run_pipeline(pc, &std::cerr);
            report::print_summary(std::cout, res.report);
            std::cout << "output: " << pc.out_dir.string() << "\n";
            return res.report.violations.empty() ? 0 : kExitViolation;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
