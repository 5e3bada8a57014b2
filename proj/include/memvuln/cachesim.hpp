#pragma once

// Trace-driven simulation of a three-level, non-inclusive, write-back,
// write-allocate cache hierarchy. Produces the main-memory request stream
// (fills and writebacks, in time order) and, for every fill, the per-word
// verdict of whether the fetched data was consumed or overwritten.
//
// Timing model: one access issues per tick; a miss allocates an MSHR at every
// level it misses in and completes after the summed lookup latencies (plus the
// fixed memory latency when it reaches DRAM). Accesses to a line with an
// outstanding miss merge into it. The core stalls only when a level runs out of
// MSHRs. Fill requests are stamped when they reach memory (issue + L1 + L2 + L3
// latency); writebacks when the dirty victim leaves the last level.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <queue>
#include <unordered_map>
#include <vector>

#include "memvuln/cache_config.hpp"
#include "memvuln/trace.hpp"

namespace memvuln::cache {

enum class RequestKind : std::uint8_t { fill = 0, writeback = 1 };
enum class FillCause : std::uint8_t { none = 0, load_miss = 1, store_miss = 2 };

inline constexpr std::uint64_t kNoFill = ~std::uint64_t{0};

struct MemoryRequest {
    std::uint64_t time = 0;  // cycles
    RequestKind kind = RequestKind::fill;
    std::uint64_t line_addr = 0;
    FillCause cause = FillCause::none;
    std::uint64_t fill_id = kNoFill;  // sequence number of the fill, kNoFill for writebacks

    friend bool operator==(const MemoryRequest&, const MemoryRequest&) = default;
};

inline constexpr int kWordsPerLine = 8;

struct FillResolution {
    std::uint64_t fill_id = 0;
    std::uint64_t line_addr = 0;
    std::uint8_t overwritten_mask = 0;  // bit w set: word w was overwritten before any load
    std::uint64_t time = 0;

    bool overwritten(int word) const noexcept { return (overwritten_mask >> word) & 1u; }
    friend bool operator==(const FillResolution&, const FillResolution&) = default;
};

// Consumer of the simulator output. roi_end() is delivered before the final
// batch of requests is released, so consumers know the window edge while
// processing it; close() marks the end of both streams.
class RequestSink {
  public:
    virtual ~RequestSink() = default;
    virtual void roi_begin(std::uint64_t /*cycle*/) {}
    virtual void request(const MemoryRequest& r) = 0;
    virtual void resolution(const FillResolution& r) = 0;
    virtual void roi_end(std::uint64_t /*cycle*/) {}
    virtual void close() {}
};

class TeeSink : public RequestSink {
  public:
    TeeSink(std::initializer_list<RequestSink*> sinks) : sinks_(sinks) {}
    void roi_begin(std::uint64_t c) override { for (auto* s : sinks_) s->roi_begin(c); }
    void request(const MemoryRequest& r) override { for (auto* s : sinks_) s->request(r); }
    void resolution(const FillResolution& r) override { for (auto* s : sinks_) s->resolution(r); }
    void roi_end(std::uint64_t c) override { for (auto* s : sinks_) s->roi_end(c); }
    void close() override { for (auto* s : sinks_) s->close(); }

  private:
    std::vector<RequestSink*> sinks_;
};

// Collects both streams in memory.
class CollectingSink : public RequestSink {
  public:
    void roi_begin(std::uint64_t c) override { roi_start = c; }
    void request(const MemoryRequest& r) override { requests.push_back(r); }
    void resolution(const FillResolution& r) override { resolutions.push_back(r); }
    void roi_end(std::uint64_t c) override { roi_end_cycle = c; }
    void close() override { closed = true; }

    std::vector<MemoryRequest> requests;
    std::vector<FillResolution> resolutions;
    std::uint64_t roi_start = 0;
    std::uint64_t roi_end_cycle = 0;
    bool closed = false;
};

struct SimStats {
    std::uint64_t accesses = 0;
    std::uint64_t roi_accesses = 0;
    std::array<std::uint64_t, 3> hits{};
    std::array<std::uint64_t, 3> misses{};
    std::uint64_t fills = 0;
    std::uint64_t writebacks = 0;
    std::uint64_t mshr_merges = 0;
    std::uint64_t stall_cycles = 0;
    std::uint64_t resolutions = 0;
    std::uint64_t ignored_after_roi = 0;
};

namespace detail {

inline constexpr std::uint64_t kNoLine = ~std::uint64_t{0};

struct Way {
    std::uint64_t line = kNoLine;
    std::uint64_t stamp = 0;
    std::uint64_t ready = 0;
    bool dirty = false;
    bool pending = false;  // L1 only: a fill resolution is open for this line
};

class Level {
  public:
    Level(const LevelConfig& cfg, std::uint32_t line_size, Replacement policy)
        : cfg_(cfg), policy_(policy), n_sets_(cfg.sets(line_size)), ways_(n_sets_ * cfg.assoc)
    {
    }

    Way* find(std::uint64_t line) noexcept
    {
        Way* set = &ways_[(line % n_sets_) * cfg_.assoc];
        for (std::uint32_t i = 0; i < cfg_.assoc; ++i)
            if (set[i].line == line)
                return &set[i];
        return nullptr;
    }

    void touch(Way& w) noexcept
    {
        if (policy_ == Replacement::lru)
            w.stamp = ++clock_;
    }

    // Places `line` in its set and returns the way it displaced (line == kNoLine
    // when an invalid way was used).
    Way place(std::uint64_t line, bool dirty, std::uint64_t ready, Way*& placed) noexcept
    {
        Way* set = &ways_[(line % n_sets_) * cfg_.assoc];
        Way* victim = nullptr;
        for (std::uint32_t i = 0; i < cfg_.assoc; ++i) {
            if (set[i].line == kNoLine) {
                victim = &set[i];
                break;
            }
            if (victim == nullptr || set[i].stamp < victim->stamp)
                victim = &set[i];
        }
        const Way old = *victim;
        victim->line = line;
        victim->stamp = ++clock_;
        victim->ready = ready;
        victim->dirty = dirty;
        victim->pending = false;
        placed = victim;
        return old;
    }

    template <typename Fn>
    void for_each_valid(Fn&& fn)
    {
        for (auto& w : ways_)
            if (w.line != kNoLine)
                fn(w);
    }

    // Outstanding-miss bookkeeping.
    void prune_mshrs(std::uint64_t now)
    {
        std::erase_if(mshrs_, [now](std::uint64_t r) { return r <= now; });
    }
    bool mshrs_full() const noexcept { return mshrs_.size() >= cfg_.mshrs; }
    std::uint64_t earliest_mshr() const noexcept { return *std::min_element(mshrs_.begin(), mshrs_.end()); }
    void add_mshr(std::uint64_t ready) { mshrs_.push_back(ready); }

    std::uint32_t latency() const noexcept { return cfg_.latency; }

  private:
    LevelConfig cfg_;
    Replacement policy_;
    std::uint64_t n_sets_;
    std::vector<Way> ways_;
    std::uint64_t clock_ = 0;
    std::vector<std::uint64_t> mshrs_;
};

struct PendingFill {
    std::uint64_t fill_id = 0;
    std::uint8_t resolved = 0;
    std::uint8_t overwritten = 0;
    std::array<std::uint8_t, kWordsPerLine> covered{};  // byte masks
};

}  // namespace detail

class Simulator {
  public:
    Simulator(const CacheConfig& config, RequestSink& sink) : config_(config), sink_(&sink)
    {
        config_.validate();
        for (const auto& l : config_.levels)
            levels_.emplace_back(l, config_.line_size, config_.replacement);
    }

    Simulator(const Simulator&) = delete;
    Simulator& operator=(const Simulator&) = delete;

    void event(const trace::AccessEvent& e)
    {
        if (finished_) {
            ++stats_.ignored_after_roi;
            return;
        }
        if (e.width == 0)
            throw InvalidArgument("access width must be positive");
        if (e.addr + e.width > config_.memory_size || e.addr + e.width < e.addr)
            throw CapacityError("access at address " + std::to_string(e.addr) + " outside configured memory of " +
                                std::to_string(config_.memory_size) + " bytes");
        if (e.time < last_tick_)
            throw InvalidArgument("trace events out of time order at tick " + std::to_string(e.time));
        last_tick_ = e.time;

        now_ = std::max(now_, e.time + stats_.stall_cycles);
        ++stats_.accesses;

        const std::uint64_t line_bytes = config_.line_size;
        std::uint64_t addr = e.addr;
        std::uint64_t remaining = e.width;
        while (remaining > 0) {
            const std::uint64_t line = addr / line_bytes;
            const std::uint64_t off = addr % line_bytes;
            const std::uint64_t chunk = std::min<std::uint64_t>(remaining, line_bytes - off);
            access_line(line, e.kind == trace::AccessKind::store, static_cast<unsigned>(off),
                        static_cast<unsigned>(chunk));
            addr += chunk;
            remaining -= chunk;
        }
        if (in_roi_) {
            roi_last_issue_ = now_;
            ++stats_.roi_accesses;
        }
        release(now_);
    }

    void roi_begin(std::uint64_t tick)
    {
        if (finished_ || in_roi_)
            return;
        in_roi_ = true;
        roi_start_ = std::max(now_, tick + stats_.stall_cycles);
        roi_last_issue_ = roi_start_;
        sink_->roi_begin(roi_start_);
    }

    // Closes the region of interest: resolves every open fill, writes back every
    // dirty line, and drains both output streams.
    void roi_end(std::uint64_t /*tick*/)
    {
        if (finished_)
            return;
        if (!in_roi_)
            roi_begin(last_tick_);
        roi_end_ = roi_last_issue_;
        now_ = std::max(now_, roi_end_);
        sink_->roi_end(roi_end_);

        std::vector<std::uint64_t> open;
        open.reserve(pending_.size());
        for (const auto& [line, p] : pending_)
            open.push_back(line);
        std::sort(open.begin(), open.end());
        for (auto line : open)
            resolve_on_leave(line, roi_end_);

        std::vector<std::uint64_t> dirty;
        for (auto& lvl : levels_)
            lvl.for_each_valid([&](detail::Way& w) {
                if (w.dirty)
                    dirty.push_back(w.line);
            });
        std::sort(dirty.begin(), dirty.end());
        dirty.erase(std::unique(dirty.begin(), dirty.end()), dirty.end());
        for (auto line : dirty)
            emit_writeback(line, roi_end_);

        release(~std::uint64_t{0});
        in_roi_ = false;
        finished_ = true;
        sink_->close();
    }

    // Region-of-interest duration in cycles (last ROI access minus first).
    std::uint64_t simulated_time() const noexcept { return roi_end_ - roi_start_; }
    std::uint64_t roi_start_cycle() const noexcept { return roi_start_; }
    std::uint64_t roi_end_cycle() const noexcept { return roi_end_; }
    bool finished() const noexcept { return finished_; }
    const SimStats& stats() const noexcept { return stats_; }
    const CacheConfig& config() const noexcept { return config_; }

  private:
    void access_line(std::uint64_t line, bool store, unsigned off, unsigned width)
    {
        detail::Level& l1 = levels_[0];
        if (detail::Way* w = l1.find(line)) {
            ++stats_.hits[0];
            if (w->ready > now_)
                ++stats_.mshr_merges;
            l1.touch(*w);
            if (store)
                w->dirty = true;
            if (w->pending)
                apply_to_pending(line, *w, store, off, width);
            return;
        }
        ++stats_.misses[0];

        // Level that supplies the data: 1 = L2, 2 = L3, 3 = memory.
        int serve = 3;
        if (detail::Way* w2 = levels_[1].find(line)) {
            serve = 1;
            ++stats_.hits[1];
            levels_[1].touch(*w2);
        } else {
            ++stats_.misses[1];
            if (detail::Way* w3 = levels_[2].find(line)) {
                serve = 2;
                ++stats_.hits[2];
                levels_[2].touch(*w3);
            } else {
                ++stats_.misses[2];
            }
        }

        for (int l = 0; l < serve && l < 3; ++l)
            reserve_mshr(levels_[static_cast<std::size_t>(l)]);

        std::uint64_t latency = 0;
        for (int l = 0; l <= std::min(serve, 2); ++l)
            latency += levels_[static_cast<std::size_t>(l)].latency();
        if (serve == 3)
            latency += config_.memory_latency;
        const std::uint64_t ready = now_ + latency;
        if (ready > now_)
            for (int l = 0; l < serve && l < 3; ++l)
                levels_[static_cast<std::size_t>(l)].add_mshr(ready);

        if (serve == 3) {
            const std::uint64_t id = next_fill_id_++;
            MemoryRequest r;
            r.time = now_ + config_.lookup_latency();
            r.kind = RequestKind::fill;
            r.line_addr = line * config_.line_size;
            r.cause = store ? FillCause::store_miss : FillCause::load_miss;
            r.fill_id = id;
            enqueue(r);
            ++stats_.fills;
        }

        detail::Way* placed = nullptr;
        for (int l = std::min(serve, 3) - 1; l >= 0; --l)
            install(static_cast<std::size_t>(l), line, false, ready, placed);
        placed->dirty = store;
        // Opened only now, so victims displaced by the installs above cannot
        // close it before the line reaches L1.
        if (serve == 3)
            pending_[line] = detail::PendingFill{next_fill_id_ - 1, 0, 0, {}};
        if (pending_.contains(line)) {
            placed->pending = true;
            apply_to_pending(line, *placed, store, off, width);
        }
    }

    void reserve_mshr(detail::Level& lvl)
    {
        lvl.prune_mshrs(now_);
        if (!lvl.mshrs_full())
            return;
        const std::uint64_t until = lvl.earliest_mshr();
        stats_.stall_cycles += until - now_;
        now_ = until;
        for (auto& l : levels_)
            l.prune_mshrs(now_);
    }

    void install(std::size_t level, std::uint64_t line, bool dirty, std::uint64_t ready, detail::Way*& placed)
    {
        const detail::Way old = levels_[level].place(line, dirty, ready, placed);
        if (old.line == detail::kNoLine)
            return;
        if (old.dirty) {
            if (level + 1 < levels_.size())
                write_into(level + 1, old.line);
            else
                emit_writeback(old.line, now_);
        }
        if (pending_.contains(old.line) && !present(old.line))
            resolve_on_leave(old.line, now_);
    }

    void write_into(std::size_t level, std::uint64_t line)
    {
        if (detail::Way* w = levels_[level].find(line)) {
            w->dirty = true;
            levels_[level].touch(*w);
            return;
        }
        detail::Way* placed = nullptr;
        install(level, line, true, now_, placed);
    }

    bool present(std::uint64_t line) noexcept
    {
        for (auto& l : levels_)
            if (l.find(line) != nullptr)
                return true;
        return false;
    }

    void apply_to_pending(std::uint64_t line, detail::Way& l1_way, bool store, unsigned off, unsigned width)
    {
        auto it = pending_.find(line);
        if (it == pending_.end()) {
            l1_way.pending = false;
            return;
        }
        detail::PendingFill& p = it->second;
        const unsigned first = off / 8, last = (off + width - 1) / 8;
        for (unsigned w = first; w <= last; ++w) {
            const std::uint8_t bit = static_cast<std::uint8_t>(1u << w);
            if (p.resolved & bit)
                continue;
            if (!store) {
                p.resolved |= bit;  // consumed
                continue;
            }
            const unsigned lo = std::max(off, w * 8), hi = std::min(off + width, w * 8 + 8);
            for (unsigned byte = lo; byte < hi; ++byte)
                p.covered[w] |= static_cast<std::uint8_t>(1u << (byte - w * 8));
            if (p.covered[w] == 0xFF) {
                p.resolved |= bit;
                p.overwritten |= bit;
            }
        }
        if (p.resolved == 0xFF) {
            emit_resolution(line, p, now_);
            pending_.erase(it);
            l1_way.pending = false;
        }
    }

    // The line left the hierarchy (or the ROI closed): words not yet decided are
    // overwritten only if already fully covered, consumed otherwise.
    void resolve_on_leave(std::uint64_t line, std::uint64_t when)
    {
        auto it = pending_.find(line);
        if (it == pending_.end())
            return;
        detail::PendingFill& p = it->second;
        for (int w = 0; w < kWordsPerLine; ++w) {
            const std::uint8_t bit = static_cast<std::uint8_t>(1u << w);
            if (!(p.resolved & bit) && p.covered[static_cast<std::size_t>(w)] == 0xFF)
                p.overwritten |= bit;
        }
        p.resolved = 0xFF;
        emit_resolution(line, p, when);
        pending_.erase(it);
        if (detail::Way* w = levels_[0].find(line))
            w->pending = false;
    }

    void emit_resolution(std::uint64_t line, const detail::PendingFill& p, std::uint64_t when)
    {
        FillResolution r;
        r.fill_id = p.fill_id;
        r.line_addr = line * config_.line_size;
        r.overwritten_mask = p.overwritten;
        r.time = when;
        ++stats_.resolutions;
        sink_->resolution(r);
    }

    void emit_writeback(std::uint64_t line, std::uint64_t when)
    {
        MemoryRequest r;
        r.time = when;
        r.kind = RequestKind::writeback;
        r.line_addr = line * config_.line_size;
        r.cause = FillCause::none;
        enqueue(r);
        ++stats_.writebacks;
    }

    struct Queued {
        std::uint64_t time;
        std::uint64_t seq;
        MemoryRequest req;
        bool operator>(const Queued& o) const noexcept
        {
            return time != o.time ? time > o.time : seq > o.seq;
        }
    };

    void enqueue(const MemoryRequest& r) { queue_.push(Queued{r.time, seq_++, r}); }

    // Everything stamped at or before `upto` can no longer be preceded by a new request.
    void release(std::uint64_t upto)
    {
        while (!queue_.empty() && queue_.top().time <= upto) {
            sink_->request(queue_.top().req);
            queue_.pop();
        }
    }

    CacheConfig config_;
    RequestSink* sink_;
    std::vector<detail::Level> levels_;
    std::unordered_map<std::uint64_t, detail::PendingFill> pending_;
    std::priority_queue<Queued, std::vector<Queued>, std::greater<>> queue_;
    std::uint64_t seq_ = 0;
    std::uint64_t next_fill_id_ = 0;
    std::uint64_t now_ = 0;
    std::uint64_t last_tick_ = 0;
    std::uint64_t roi_start_ = 0;
    std::uint64_t roi_end_ = 0;
    std::uint64_t roi_last_issue_ = 0;
    bool in_roi_ = false;
    bool finished_ = false;
    SimStats stats_;
};

// Replays a stored trace through a simulator.
inline void simulate(trace::TraceReader& reader, Simulator& sim) { trace::replay(reader, sim); }

// Binary dump of the request stream, for debugging:
//   "MVREQS\0\0", u32 version (1), u32 reserved, u64 count,
//   then 26-byte records: u64 time, u8 kind, u8 cause, u64 line_addr, u64 fill_id.
class RequestDumpWriter : public RequestSink {
  public:
    explicit RequestDumpWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc)
    {
        if (!out_)
            throw Error("cannot open request dump for writing: " + path);
        out_.write("MVREQS\0\0", 8);
        le::put<std::uint32_t>(out_, 1);
        le::put<std::uint32_t>(out_, 0);
        le::put<std::uint64_t>(out_, 0);
    }

    void request(const MemoryRequest& r) override
    {
        le::put(out_, r.time);
        le::put(out_, static_cast<std::uint8_t>(r.kind));
        le::put(out_, static_cast<std::uint8_t>(r.cause));
        le::put(out_, r.line_addr);
        le::put(out_, r.fill_id);
        ++count_;
    }
    void resolution(const FillResolution&) override {}
    void close() override
    {
        out_.seekp(16);
        le::put<std::uint64_t>(out_, count_);
        out_.close();
    }

  private:
    std::ofstream out_;
    std::uint64_t count_ = 0;
};

inline std::vector<MemoryRequest> read_request_dump(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open request dump: " + path);
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::string_view(magic, 8) != std::string_view("MVREQS\0\0", 8))
        throw FormatError("not a request dump: " + path);
    std::uint64_t off = 8;
    if (le::get<std::uint32_t>(in, off, "request dump header") != 1)
        throw FormatError("unsupported request dump version");
    le::get<std::uint32_t>(in, off, "request dump header");
    const auto n = le::get<std::uint64_t>(in, off, "request dump header");
    std::vector<MemoryRequest> out;
    out.reserve(static_cast<std::size_t>(n));
    for (std::uint64_t i = 0; i < n; ++i) {
        MemoryRequest r;
        r.time = le::get<std::uint64_t>(in, off, "request record");
        r.kind = static_cast<RequestKind>(le::get<std::uint8_t>(in, off, "request record"));
        r.cause = static_cast<FillCause>(le::get<std::uint8_t>(in, off, "request record"));
        r.line_addr = le::get<std::uint64_t>(in, off, "request record");
        r.fill_id = le::get<std::uint64_t>(in, off, "request record");
        out.push_back(r);
    }
    return out;
}

}  // namespace memvuln::cache
