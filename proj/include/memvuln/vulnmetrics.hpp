#pragma once

// Word-granularity interval accounting over the main-memory request stream,
// and the per-structure reports built from it (MVF, FEA, safe ratio, DVF,
// LD/ST and LD/(LD+ST)).

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "memvuln/cachesim.hpp"
#include "memvuln/trace.hpp"

namespace memvuln::metrics {

struct WordLedger {
    std::uint64_t vulnerable_time = 0;        // periods ending in a consuming fill
    std::uint64_t safe_time = 0;              // periods ending in a writeback, plus trailing time
    std::uint64_t fea_reclassified_time = 0;  // part of vulnerable_time ending in an overwritten fill
    std::uint64_t mem_loads = 0;              // fills touching the word
    std::uint64_t mem_stores = 0;             // writebacks touching the word

    std::uint64_t total() const noexcept { return vulnerable_time + safe_time; }
    bool touched() const noexcept { return mem_loads + mem_stores != 0; }

    WordLedger& operator+=(const WordLedger& o) noexcept
    {
        vulnerable_time += o.vulnerable_time;
        safe_time += o.safe_time;
        fea_reclassified_time += o.fea_reclassified_time;
        mem_loads += o.mem_loads;
        mem_stores += o.mem_stores;
        return *this;
    }
    friend bool operator==(const WordLedger&, const WordLedger&) = default;
};

inline double mvf(const WordLedger& w)
{
    if (w.total() == 0)
        throw UndefinedMetric("MVF undefined over an empty time window");
    return static_cast<double>(w.vulnerable_time) / static_cast<double>(w.total());
}

inline double fea(const WordLedger& w)
{
    if (w.total() == 0)
        throw UndefinedMetric("FEA undefined over an empty time window");
    return static_cast<double>(w.vulnerable_time - w.fea_reclassified_time) / static_cast<double>(w.total());
}

inline double safe_ratio(const WordLedger& w) { return 1.0 - mvf(w); }

// DVF = FIT * T * S * N. fit is in faults per cycle per byte when T is in cycles and S in bytes.
inline double dvf(double fit_rate, double T, double size_bytes, double n_mem_accesses)
{
    if (fit_rate < 0 || T < 0 || size_bytes < 0 || n_mem_accesses < 0)
        throw InvalidArgument("dvf: factors must be non-negative");
    return fit_rate * T * size_bytes * n_mem_accesses;
}

// One fault per 1e9 device-hours, expressed per cycle.
inline double default_fit_per_cycle(double core_ghz = 2.6) { return 1.0 / (1e9 * 3600.0 * core_ghz * 1e9); }

// Tracked words --------------------------------------------------------------------

// Maps byte addresses to a dense index over every word of every tracked structure.
class WordIndex {
  public:
    WordIndex() = default;

    WordIndex(const trace::StructureMap& map, std::uint32_t word_bytes) : map_(map), word_bytes_(word_bytes)
    {
        if (word_bytes != 8 && word_bytes != 16)
            throw InvalidArgument("word granularity must be 8 or 16 bytes");
        std::uint64_t next = 0;
        for (std::size_t i = 0; i < map.size(); ++i) {
            const auto& r = map[i];
            if (r.base % word_bytes != 0)
                throw InvalidArgument("structure '" + r.id + "' is not aligned to the word size");
            const std::uint64_t words = (r.length + word_bytes - 1) / word_bytes;
            spans_.push_back({r.base, r.base + words * word_bytes, next, i});
            first_word_.push_back(next);
            n_words_.push_back(words);
            next += words;
        }
        std::sort(spans_.begin(), spans_.end(), [](const Span& a, const Span& b) { return a.base < b.base; });
        total_ = next;
    }

    static constexpr std::uint64_t kUntracked = ~std::uint64_t{0};

    std::uint64_t word_of(std::uint64_t addr) const noexcept
    {
        auto it = std::upper_bound(spans_.begin(), spans_.end(), addr,
                                   [](std::uint64_t a, const Span& s) { return a < s.base; });
        if (it == spans_.begin())
            return kUntracked;
        --it;
        if (addr >= it->end)
            return kUntracked;
        return it->first_word + (addr - it->base) / word_bytes_;
    }

    std::uint64_t size() const noexcept { return total_; }
    std::uint32_t word_bytes() const noexcept { return word_bytes_; }
    std::uint64_t first_word(std::size_t structure) const { return first_word_.at(structure); }
    std::uint64_t words_in(std::size_t structure) const { return n_words_.at(structure); }
    const trace::StructureMap& structures() const noexcept { return map_; }

  private:
    struct Span {
        std::uint64_t base, end, first_word;
        std::size_t structure;
    };
    trace::StructureMap map_;
    std::uint32_t word_bytes_ = 8;
    std::vector<Span> spans_;
    std::vector<std::uint64_t> first_word_;
    std::vector<std::uint64_t> n_words_;
    std::uint64_t total_ = 0;
};

// Streaming accumulator ------------------------------------------------------------

// Folds the request and resolution streams into one WordLedger per tracked word.
// A fill's period is held until its resolution says whether the word was
// consumed or overwritten; resolutions may arrive before or after the fill.
class Accumulator : public cache::RequestSink {
  public:
    Accumulator(const trace::StructureMap& map, std::uint32_t word_bytes = 8)
        : index_(map, word_bytes), ledgers_(index_.size()), last_(index_.size(), 0)
    {
    }

    void roi_begin(std::uint64_t cycle) override
    {
        roi_start_ = cycle;
        started_ = true;
        std::fill(last_.begin(), last_.end(), cycle);
    }

    void roi_end(std::uint64_t cycle) override
    {
        roi_end_ = cycle;
        ended_ = true;
    }

    void request(const cache::MemoryRequest& r) override
    {
        if (!started_ || r.time < roi_start_ || (ended_ && r.time > roi_end_)) {
            ++ignored_;
            if (r.kind == cache::RequestKind::fill) {
                if (early_.erase(r.fill_id) == 0)
                    ignored_fills_.insert(r.fill_id);
            }
            return;
        }
        const std::uint64_t line_bytes = kLineBytes;
        const std::uint32_t wb = index_.word_bytes();
        const unsigned per_line = static_cast<unsigned>(line_bytes / wb);

        if (r.kind == cache::RequestKind::writeback) {
            for (unsigned k = 0; k < per_line; ++k) {
                const auto w = index_.word_of(r.line_addr + k * wb);
                if (w == WordIndex::kUntracked)
                    continue;
                ledgers_[w].safe_time += r.time - last_[w];
                ledgers_[w].mem_stores += 1;
                last_[w] = r.time;
            }
            return;
        }

        OpenFill open;
        open.line_addr = r.line_addr;
        for (unsigned k = 0; k < per_line; ++k) {
            const auto w = index_.word_of(r.line_addr + k * wb);
            open.word[k] = w;
            if (w == WordIndex::kUntracked)
                continue;
            open.duration[k] = r.time - last_[w];
            ledgers_[w].mem_loads += 1;
            last_[w] = r.time;
        }
        if (auto it = early_.find(r.fill_id); it != early_.end()) {
            settle(open, it->second);
            early_.erase(it);
        } else {
            open_.emplace(r.fill_id, open);
        }
    }

    void resolution(const cache::FillResolution& r) override
    {
        if (ignored_fills_.erase(r.fill_id) != 0)
            return;
        if (auto it = open_.find(r.fill_id); it != open_.end()) {
            settle(it->second, r.overwritten_mask);
            open_.erase(it);
        } else {
            early_.emplace(r.fill_id, r.overwritten_mask);
        }
    }

    // Adds the trailing period of every word and checks that every fill was settled.
    void close() override
    {
        if (closed_)
            return;
        if (!started_ || !ended_)
            throw Error("metrics: request stream closed without ROI boundaries");
        if (!open_.empty() || !early_.empty())
            throw Error("metrics: " + std::to_string(open_.size() + early_.size()) +
                        " fills without a matching resolution");
        for (std::size_t w = 0; w < ledgers_.size(); ++w)
            ledgers_[w].safe_time += roi_end_ - last_[w];
        closed_ = true;
    }

    const std::vector<WordLedger>& ledgers() const noexcept { return ledgers_; }
    const WordIndex& index() const noexcept { return index_; }
    std::uint64_t T() const noexcept { return roi_end_ - roi_start_; }
    std::uint64_t roi_start() const noexcept { return roi_start_; }
    std::uint64_t roi_end() const noexcept { return roi_end_; }
    std::uint64_t ignored_requests() const noexcept { return ignored_; }
    bool closed() const noexcept { return closed_; }

  private:
    struct OpenFill {
        std::uint64_t line_addr = 0;
        std::array<std::uint64_t, 8> word{};
        std::array<std::uint64_t, 8> duration{};
    };

    void settle(const OpenFill& f, std::uint8_t overwritten_mask)
    {
        const std::uint32_t wb = index_.word_bytes();
        const unsigned per_line = static_cast<unsigned>(kLineBytes / wb);
        const unsigned sub = wb / 8;  // 64-bit verdicts per word
        for (unsigned k = 0; k < per_line; ++k) {
            const auto w = f.word[k];
            if (w == WordIndex::kUntracked)
                continue;
            const unsigned bits = ((1u << sub) - 1u) << (k * sub);
            ledgers_[w].vulnerable_time += f.duration[k];
            if ((overwritten_mask & bits) == bits)
                ledgers_[w].fea_reclassified_time += f.duration[k];
        }
    }

    WordIndex index_;
    std::vector<WordLedger> ledgers_;
    std::vector<std::uint64_t> last_;
    std::unordered_map<std::uint64_t, OpenFill> open_;
    std::unordered_map<std::uint64_t, std::uint8_t> early_;
    std::unordered_set<std::uint64_t> ignored_fills_;
    std::uint64_t roi_start_ = 0, roi_end_ = 0;
    std::uint64_t ignored_ = 0;
    bool started_ = false, ended_ = false, closed_ = false;
};

// Structure reports ------------------------------------------------------------------

struct StructureReport {
    std::string structure;
    std::uint64_t words = 0;
    std::uint64_t untouched_words = 0;  // no memory request during the ROI
    std::uint64_t size_bytes = 0;
    double mvf = 0, fea = 0, safe_ratio = 1;
    double dvf = 0;
    std::uint64_t mem_loads = 0, mem_stores = 0;
    double ld_st = 0;             // +inf when there are no stores
    double ld_st_normalized = 1;  // LD/(LD+ST), 1 when there are no stores
    std::uint64_t n_mem_accesses() const noexcept { return mem_loads + mem_stores; }
};

struct MetricsReport {
    std::uint64_t T = 0;
    double fit_per_cycle = 0;
    std::uint32_t word_bytes = 8;
    std::vector<StructureReport> structures;
    std::vector<std::string> warnings;

    const StructureReport* find(std::string_view id) const noexcept
    {
        for (const auto& s : structures)
            if (s.structure == id)
                return &s;
        return nullptr;
    }
};

inline double ld_st_ratio(std::uint64_t loads, std::uint64_t stores) noexcept
{
    if (stores == 0)
        return std::numeric_limits<double>::infinity();
    return static_cast<double>(loads) / static_cast<double>(stores);
}

inline double ld_st_normalized(std::uint64_t loads, std::uint64_t stores) noexcept
{
    if (stores == 0)
        return 1.0;
    return static_cast<double>(loads) / static_cast<double>(loads + stores);
}

// Structure value = unweighted mean over its words.
inline StructureReport summarize_words(std::string id, std::span<const WordLedger> words, std::uint32_t word_bytes,
                                       std::uint64_t size_bytes, double fit_per_cycle, std::uint64_t T)
{
    if (T == 0)
        throw UndefinedMetric("metrics undefined for an empty ROI (T = 0)");
    StructureReport s;
    s.structure = std::move(id);
    s.words = words.size();
    s.size_bytes = size_bytes ? size_bytes : words.size() * word_bytes;
    double sum_mvf = 0, sum_fea = 0;
    for (const auto& w : words) {
        if (!w.touched())
            ++s.untouched_words;
        sum_mvf += mvf(w);
        sum_fea += fea(w);
        s.mem_loads += w.mem_loads;
        s.mem_stores += w.mem_stores;
    }
    const double n = static_cast<double>(words.size());
    s.mvf = sum_mvf / n;
    s.fea = sum_fea / n;
    s.safe_ratio = 1.0 - s.mvf;
    s.ld_st = ld_st_ratio(s.mem_loads, s.mem_stores);
    s.ld_st_normalized = ld_st_normalized(s.mem_loads, s.mem_stores);
    s.dvf = dvf(fit_per_cycle, static_cast<double>(T), static_cast<double>(s.size_bytes),
                static_cast<double>(s.n_mem_accesses()));
    return s;
}

inline MetricsReport aggregate(const std::vector<WordLedger>& ledgers, const WordIndex& index, double fit_per_cycle,
                               std::uint64_t T)
{
    if (T == 0)
        throw UndefinedMetric("metrics undefined for an empty ROI (T = 0)");
    MetricsReport rep;
    rep.T = T;
    rep.fit_per_cycle = fit_per_cycle;
    rep.word_bytes = index.word_bytes();
    const auto& map = index.structures();
    for (std::size_t i = 0; i < map.size(); ++i) {
        const auto n = index.words_in(i);
        if (n == 0) {
            rep.warnings.push_back("structure '" + map[i].id + "' is empty; omitted");
            continue;
        }
        std::span<const WordLedger> words(ledgers.data() + index.first_word(i), n);
        rep.structures.push_back(
            summarize_words(map[i].id, words, index.word_bytes(), map[i].length, fit_per_cycle, T));
        if (auto u = rep.structures.back().untouched_words)
            rep.warnings.push_back("structure '" + map[i].id + "': " + std::to_string(u) + " of " +
                                   std::to_string(n) + " words had no memory request in the ROI");
    }
    return rep;
}

inline MetricsReport aggregate(const Accumulator& acc, double fit_per_cycle)
{
    if (!acc.closed())
        throw Error("metrics: accumulator not closed");
    return aggregate(acc.ledgers(), acc.index(), fit_per_cycle, acc.T());
}

// Output ---------------------------------------------------------------------------------

inline constexpr const char* kMetricsCsvSchema = "# schema: memvuln-metrics v1";

namespace detail {
inline std::string num(double v)
{
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}
}  // namespace detail

inline void write_csv(std::ostream& os, const MetricsReport& r)
{
    os << kMetricsCsvSchema << "\n";
    os << "structure,words,untouched_words,size_bytes,T,mvf,fea,safe_ratio,dvf,mem_loads,mem_stores,ld_st,"
          "ld_st_normalized\n";
    for (const auto& s : r.structures)
        os << s.structure << ',' << s.words << ',' << s.untouched_words << ',' << s.size_bytes << ',' << r.T << ','
           << detail::num(s.mvf) << ',' << detail::num(s.fea) << ',' << detail::num(s.safe_ratio) << ','
           << detail::num(s.dvf) << ',' << s.mem_loads << ',' << s.mem_stores << ',' << detail::num(s.ld_st) << ','
           << detail::num(s.ld_st_normalized) << "\n";
}

inline nlohmann::json to_json(const StructureReport& s)
{
    nlohmann::json j;
    j["structure"] = s.structure;
    j["words"] = s.words;
    j["untouched_words"] = s.untouched_words;
    j["size_bytes"] = s.size_bytes;
    j["mvf"] = s.mvf;
    j["fea"] = s.fea;
    j["safe_ratio"] = s.safe_ratio;
    j["dvf"] = s.dvf;
    j["mem_loads"] = s.mem_loads;
    j["mem_stores"] = s.mem_stores;
    j["ld_st"] = std::isinf(s.ld_st) ? nlohmann::json("inf") : nlohmann::json(s.ld_st);
    j["ld_st_normalized"] = s.ld_st_normalized;
    return j;
}

inline nlohmann::json to_json(const MetricsReport& r)
{
    nlohmann::json j;
    j["schema"] = "memvuln-metrics v1";
    j["T"] = r.T;
    j["fit_per_cycle"] = r.fit_per_cycle;
    j["word_bytes"] = r.word_bytes;
    j["structures"] = nlohmann::json::array();
    for (const auto& s : r.structures)
        j["structures"].push_back(to_json(s));
    j["warnings"] = r.warnings;
    return j;
}

// Per-structure histogram of word MVF and FEA values in `bins` equal bins over [0, 1].
inline void write_word_histogram(std::ostream& os, const Accumulator& acc, unsigned bins = 20)
{
    const auto& index = acc.index();
    const auto& map = index.structures();
    os << "# schema: memvuln-word-histogram v1\n";
    os << "structure,metric,bin_low,bin_high,words\n";
    for (std::size_t i = 0; i < map.size(); ++i) {
        std::vector<std::uint64_t> hm(bins, 0), hf(bins, 0);
        const auto first = index.first_word(i);
        for (std::uint64_t w = first; w < first + index.words_in(i); ++w) {
            const auto& l = acc.ledgers()[w];
            auto bin = [bins](double v) { return std::min<unsigned>(bins - 1, static_cast<unsigned>(v * bins)); };
            hm[bin(mvf(l))]++;
            hf[bin(fea(l))]++;
        }
        for (int m = 0; m < 2; ++m)
            for (unsigned b = 0; b < bins; ++b)
                os << map[i].id << ',' << (m == 0 ? "mvf" : "fea") << ',' << detail::num(double(b) / bins) << ','
                   << detail::num(double(b + 1) / bins) << ',' << (m == 0 ? hm : hf)[b] << "\n";
    }
}

// End-to-end: program trace -> hierarchy -> ledgers -> report ---------------------------

struct MetricsRun {
    MetricsReport report;
    cache::SimStats sim;
    std::uint64_t T = 0;
    std::uint64_t ignored_requests = 0;
};

// Pushes a recorded or live access stream through the simulator into an accumulator.
// `feed` receives an EventSink (the simulator) and must deliver the whole stream.
template <typename Feed>
MetricsRun run_metrics(const trace::StructureMap& map, const cache::CacheConfig& config, Feed&& feed,
                       double fit_per_cycle = -1.0, std::uint32_t word_bytes = 8,
                       Accumulator* keep = nullptr)
{
    Accumulator local(map, word_bytes);
    Accumulator& acc = keep ? *keep : local;
    cache::Simulator sim(config, acc);
    feed(sim);
    if (!sim.finished())
        sim.roi_end(0);
    MetricsRun out;
    out.T = sim.simulated_time();
    out.sim = sim.stats();
    out.ignored_requests = acc.ignored_requests();
    if (fit_per_cycle < 0)
        fit_per_cycle = default_fit_per_cycle(config.core_ghz);
    out.report = aggregate(acc, fit_per_cycle);
    return out;
}

}  // namespace memvuln::metrics
