#pragma once

// Program-level memory access traces: events, the structure layout of the
// flat simulated address space, ROI markers, and the versioned binary file
// format used to store them.
//
// File layout (all integers little-endian):
//   0   char[8]  magic "MVTRACE\0"
//   8   u32      version (1)
//   12  u32      number of structures
//   16  u64      roi_start tick
//   24  u64      roi_end tick (exclusive)
//   32  u64      number of event records
//   40  per structure: u16 name length, name bytes, u64 base, u64 length
//   ... event records, 20 bytes each:
//         u64 time, u8 kind (0 load, 1 store), u64 addr, u8 width, u16 structure
//       (structure is the ordinal in the header table, 0xFFFF for "other")

#include <algorithm>
#include <concepts>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "memvuln/cg.hpp"
#include "memvuln/common.hpp"

namespace memvuln::trace {

enum class AccessKind : std::uint8_t { load = 0, store = 1 };

inline constexpr std::uint16_t kOtherStructure = 0xFFFF;

struct AccessEvent {
    std::uint64_t time = 0;  // logical ticks
    AccessKind kind = AccessKind::load;
    std::uint64_t addr = 0;
    std::uint8_t width = 8;
    std::uint16_t structure = kOtherStructure;

    friend bool operator==(const AccessEvent&, const AccessEvent&) = default;
};

struct StructureRegion {
    std::string id;
    std::uint64_t base = 0;
    std::uint64_t length = 0;  // bytes

    std::uint64_t end() const noexcept { return base + length; }
    friend bool operator==(const StructureRegion&, const StructureRegion&) = default;
};

class StructureMap {
  public:
    StructureMap() = default;

    explicit StructureMap(std::vector<StructureRegion> regions) : regions_(std::move(regions)) { validate(); }

    const std::vector<StructureRegion>& regions() const noexcept { return regions_; }
    std::size_t size() const noexcept { return regions_.size(); }
    const StructureRegion& operator[](std::size_t i) const { return regions_.at(i); }

    // Ordinal of the region containing [addr, addr+width), or kOtherStructure.
    std::uint16_t find(std::uint64_t addr, std::uint64_t width = 1) const noexcept
    {
        for (std::size_t i = 0; i < regions_.size(); ++i) {
            const auto& r = regions_[i];
            if (addr >= r.base && addr + width <= r.end())
                return static_cast<std::uint16_t>(i);
        }
        return kOtherStructure;
    }

    std::optional<std::size_t> index_of(std::string_view id) const noexcept
    {
        for (std::size_t i = 0; i < regions_.size(); ++i)
            if (regions_[i].id == id)
                return i;
        return std::nullopt;
    }

    friend bool operator==(const StructureMap&, const StructureMap&) = default;

  private:
    void validate() const
    {
        if (regions_.size() >= kOtherStructure)
            throw InvalidArgument("too many structures");
        std::vector<const StructureRegion*> sorted;
        for (const auto& r : regions_) {
            if (r.base % 8 != 0 || r.length % 8 != 0)
                throw InvalidArgument("structure '" + r.id + "' is not 8-byte aligned");
            sorted.push_back(&r);
        }
        std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->base < b->base; });
        for (std::size_t i = 1; i < sorted.size(); ++i)
            if (sorted[i]->base < sorted[i - 1]->end())
                throw InvalidArgument("structures '" + sorted[i - 1]->id + "' and '" + sorted[i]->id + "' overlap");
    }

    std::vector<StructureRegion> regions_;
};

// Half-open window [start, end) of logical ticks.
struct RoiMarkers {
    std::uint64_t start = 0;
    std::uint64_t end = 0;

    bool contains(std::uint64_t t) const noexcept { return t >= start && t < end; }
    friend bool operator==(const RoiMarkers&, const RoiMarkers&) = default;
};

// Flat address-space layout of the CG structures: Ar, Ac, Av, x, g, d, d', q, b
// in that order from address 0, each on a 64-byte boundary. Ordinals equal the
// numeric value of memvuln::Structure.
inline StructureMap cg_layout(std::size_t n_rows, std::size_t nnz)
{
    std::vector<StructureRegion> regions;
    std::uint64_t base = 0;
    for (Structure s : kTracked) {
        std::size_t elems = n_rows;
        if (s == Structure::Ar)
            elems = n_rows + 1;
        else if (s == Structure::Ac || s == Structure::Av)
            elems = nnz;
        const std::uint64_t length = round_up(elems * cg::element_size(s), 8);
        regions.push_back({std::string(name_of(s)), base, length});
        base = round_up(base + length, kLineBytes);
    }
    return StructureMap(std::move(regions));
}

inline std::uint64_t address_of(const StructureMap& map, Structure s, std::size_t index)
{
    return map[static_cast<std::size_t>(s)].base + index * cg::element_size(s);
}

// Consumer of an access stream.
template <typename S>
concept EventSink = requires(S s, const AccessEvent& e, std::uint64_t t) {
    s.event(e);
    s.roi_begin(t);
    s.roi_end(t);
};

// Solver observer that turns logical accesses into AccessEvents, one tick per
// access, and forwards them to a sink.
template <EventSink Sink>
class Recorder {
  public:
    static constexpr bool traces_accesses = true;

    Recorder(const StructureMap& map, Sink& sink) : map_(&map), sink_(&sink) {}

    void load(Structure s, std::size_t i) { emit(AccessKind::load, s, i); }
    void store(Structure s, std::size_t i) { emit(AccessKind::store, s, i); }

    void roi_begin()
    {
        roi_.start = tick_;
        sink_->roi_begin(tick_);
    }
    void roi_end()
    {
        roi_.end = tick_;
        sink_->roi_end(tick_);
    }

    std::uint64_t ticks() const noexcept { return tick_; }
    const RoiMarkers& roi() const noexcept { return roi_; }

  private:
    void emit(AccessKind kind, Structure s, std::size_t i)
    {
        AccessEvent e;
        e.time = tick_++;
        e.kind = kind;
        e.addr = address_of(*map_, s, i);
        e.width = static_cast<std::uint8_t>(cg::element_size(s));
        e.structure = static_cast<std::uint16_t>(s);
        sink_->event(e);
    }

    const StructureMap* map_;
    Sink* sink_;
    std::uint64_t tick_ = 0;
    RoiMarkers roi_;
};

// Runs a traced fault-free solve of `problem`, streaming every access to `sink`.
template <EventSink Sink>
cg::SolveRecord record_solve(const cg::Problem& problem, cg::SolverOptions opt, Sink& sink,
                             RoiMarkers* roi_out = nullptr)
{
    opt.tol = problem.tol;
    opt.threads = 1;
    cg::Workspace ws(problem.a, problem.b);
    const StructureMap map = cg_layout(problem.a.n_rows, problem.a.nnz());
    Recorder<Sink> rec(map, sink);
    cg::SolveRecord r = cg::solve(ws, opt, rec);
    r.verified = r.converged && cg::verify(problem.a, problem.b, ws.x, problem.tol);
    if (roi_out != nullptr)
        *roi_out = rec.roi();
    return r;
}

// Writer ------------------------------------------------------------------------

inline constexpr char kTraceMagic[8] = {'M', 'V', 'T', 'R', 'A', 'C', 'E', '\0'};
inline constexpr std::uint32_t kTraceVersion = 1;
inline constexpr std::size_t kRecordBytes = 20;

inline void encode_record(unsigned char* p, const AccessEvent& e) noexcept
{
    le::encode(p, e.time);
    p[8] = static_cast<unsigned char>(e.kind);
    le::encode(p + 9, e.addr);
    p[17] = e.width;
    le::encode(p + 18, e.structure);
}

inline AccessEvent decode_record(const unsigned char* p) noexcept
{
    AccessEvent e;
    e.time = le::decode<std::uint64_t>(p);
    e.kind = static_cast<AccessKind>(p[8]);
    e.addr = le::decode<std::uint64_t>(p + 9);
    e.width = p[17];
    e.structure = le::decode<std::uint16_t>(p + 18);
    return e;
}

class TraceWriter {
  public:
    TraceWriter(const std::string& path, StructureMap map) : path_(path), map_(std::move(map))
    {
        out_.open(path, std::ios::binary | std::ios::trunc);
        if (!out_)
            throw Error("cannot open trace file for writing: " + path);
        out_.write(kTraceMagic, sizeof kTraceMagic);
        le::put<std::uint32_t>(out_, kTraceVersion);
        le::put<std::uint32_t>(out_, static_cast<std::uint32_t>(map_.size()));
        le::put<std::uint64_t>(out_, 0);  // roi_start, patched on close
        le::put<std::uint64_t>(out_, 0);  // roi_end
        le::put<std::uint64_t>(out_, 0);  // event count
        for (const auto& r : map_.regions()) {
            le::put<std::uint16_t>(out_, static_cast<std::uint16_t>(r.id.size()));
            out_.write(r.id.data(), static_cast<std::streamsize>(r.id.size()));
            le::put<std::uint64_t>(out_, r.base);
            le::put<std::uint64_t>(out_, r.length);
        }
        buffer_.reserve(kRecordBytes * 4096);
    }

    TraceWriter(const TraceWriter&) = delete;
    TraceWriter& operator=(const TraceWriter&) = delete;

    ~TraceWriter()
    {
        if (!closed_) {
            try {
                close();
            } catch (...) {
            }
        }
    }

    void event(const AccessEvent& e)
    {
        if (e.time < last_time_)
            throw Error("trace capture out of order: time " + std::to_string(e.time) + " after " +
                        std::to_string(last_time_));
        if (e.width == 0 || e.width > 64)
            throw InvalidArgument("access width must be in [1, 64]");
        if (e.structure != kOtherStructure && e.structure >= map_.size())
            throw InvalidArgument("unknown structure ordinal " + std::to_string(e.structure));
        last_time_ = e.time;
        const std::size_t at = buffer_.size();
        buffer_.resize(at + kRecordBytes);
        encode_record(buffer_.data() + at, e);
        ++count_;
        if (buffer_.size() >= kRecordBytes * 4096)
            flush();
    }

    void roi_begin(std::uint64_t t) { roi_.start = t; }
    void roi_end(std::uint64_t t) { roi_.end = t; }
    void set_roi(RoiMarkers roi) { roi_ = roi; }

    void close()
    {
        if (closed_)
            return;
        flush();
        out_.seekp(16);
        le::put<std::uint64_t>(out_, roi_.start);
        le::put<std::uint64_t>(out_, roi_.end);
        le::put<std::uint64_t>(out_, count_);
        out_.close();
        closed_ = true;
        if (!out_)
            throw Error("error writing trace file: " + path_);
    }

    std::uint64_t count() const noexcept { return count_; }

  private:
    void flush()
    {
        out_.write(reinterpret_cast<const char*>(buffer_.data()), static_cast<std::streamsize>(buffer_.size()));
        buffer_.clear();
    }

    std::string path_;
    StructureMap map_;
    std::ofstream out_;
    std::vector<unsigned char> buffer_;
    std::uint64_t last_time_ = 0;
    std::uint64_t count_ = 0;
    RoiMarkers roi_;
    bool closed_ = false;
};

// Reader -------------------------------------------------------------------------

// Streams events from a trace file through a fixed-size buffer.
class TraceReader {
  public:
    explicit TraceReader(const std::string& path) : path_(path)
    {
        in_.open(path, std::ios::binary);
        if (!in_)
            throw Error("cannot open trace file: " + path);
        char magic[8];
        in_.read(magic, sizeof magic);
        if (in_.gcount() != sizeof magic)
            throw FormatError("truncated trace header at byte offset " + std::to_string(in_.gcount()));
        if (!std::equal(std::begin(magic), std::end(magic), std::begin(kTraceMagic)))
            throw FormatError("not a memvuln trace file: " + path);
        offset_ = sizeof magic;
        const auto version = le::get<std::uint32_t>(in_, offset_, "trace header");
        if (version != kTraceVersion)
            throw FormatError("unsupported trace version " + std::to_string(version) + " (expected " +
                              std::to_string(kTraceVersion) + ")");
        const auto n_structures = le::get<std::uint32_t>(in_, offset_, "trace header");
        roi_.start = le::get<std::uint64_t>(in_, offset_, "trace header");
        roi_.end = le::get<std::uint64_t>(in_, offset_, "trace header");
        n_events_ = le::get<std::uint64_t>(in_, offset_, "trace header");
        std::vector<StructureRegion> regions;
        for (std::uint32_t i = 0; i < n_structures; ++i) {
            const auto len = le::get<std::uint16_t>(in_, offset_, "structure table");
            std::string id(len, '\0');
            in_.read(id.data(), len);
            if (in_.gcount() != len)
                throw FormatError("truncated structure table at byte offset " + std::to_string(offset_));
            offset_ += len;
            const auto base = le::get<std::uint64_t>(in_, offset_, "structure table");
            const auto length = le::get<std::uint64_t>(in_, offset_, "structure table");
            regions.push_back({std::move(id), base, length});
        }
        map_ = StructureMap(std::move(regions));
        buffer_.resize(kRecordBytes * 8192);
    }

    const StructureMap& structures() const noexcept { return map_; }
    const RoiMarkers& roi() const noexcept { return roi_; }
    std::uint64_t size() const noexcept { return n_events_; }

    // Returns false at the end of the stream.
    bool next(AccessEvent& e)
    {
        if (read_ == n_events_) {
            if (!checked_tail_) {
                checked_tail_ = true;
                if (pos_ != filled_ || in_.peek() != std::char_traits<char>::eof())
                    throw FormatError("trailing bytes after last event at byte offset " +
                                      std::to_string(offset_));
            }
            return false;
        }
        if (pos_ == filled_)
            refill();
        e = decode_record(buffer_.data() + pos_);
        pos_ += kRecordBytes;
        offset_ += kRecordBytes;
        ++read_;
        return true;
    }

  private:
    void refill()
    {
        const std::uint64_t remaining = n_events_ - read_;
        const std::size_t want =
            static_cast<std::size_t>(std::min<std::uint64_t>(remaining, buffer_.size() / kRecordBytes)) * kRecordBytes;
        in_.read(reinterpret_cast<char*>(buffer_.data()), static_cast<std::streamsize>(want));
        const auto got = static_cast<std::size_t>(in_.gcount());
        if (got != want)
            throw FormatError("truncated trace: event " + std::to_string(read_ + got / kRecordBytes) +
                              " incomplete at byte offset " + std::to_string(offset_ + got));
        filled_ = got;
        pos_ = 0;
    }

    std::string path_;
    std::ifstream in_;
    StructureMap map_;
    RoiMarkers roi_;
    std::uint64_t n_events_ = 0;
    std::uint64_t read_ = 0;
    std::uint64_t offset_ = 0;
    std::vector<unsigned char> buffer_;
    std::size_t pos_ = 0;
    std::size_t filled_ = 0;
    bool checked_tail_ = false;
};

// Feeds a stored trace to a sink, delivering the ROI boundaries at the same
// points a live recorder would.
template <EventSink Sink>
void replay(TraceReader& reader, Sink& sink)
{
    const RoiMarkers roi = reader.roi();
    bool began = false, ended = false;
    AccessEvent e;
    while (reader.next(e)) {
        if (!began && e.time >= roi.start) {
            sink.roi_begin(roi.start);
            began = true;
        }
        if (began && !ended && e.time >= roi.end) {
            sink.roi_end(roi.end);
            ended = true;
        }
        sink.event(e);
    }
    if (!began)
        sink.roi_begin(roi.start);
    if (!ended)
        sink.roi_end(roi.end);
}

// Summary used by `trace info`.
struct TraceSummary {
    std::uint64_t events = 0;
    std::uint64_t roi_events = 0;
    std::vector<std::uint64_t> loads;   // per structure ordinal, ROI only
    std::vector<std::uint64_t> stores;  // per structure ordinal, ROI only
    std::uint64_t other = 0;
};

inline TraceSummary summarize(TraceReader& reader)
{
    TraceSummary s;
    s.loads.assign(reader.structures().size(), 0);
    s.stores.assign(reader.structures().size(), 0);
    AccessEvent e;
    while (reader.next(e)) {
        ++s.events;
        if (!reader.roi().contains(e.time))
            continue;
        ++s.roi_events;
        if (e.structure == kOtherStructure || e.structure >= s.loads.size()) {
            ++s.other;
            continue;
        }
        (e.kind == AccessKind::load ? s.loads : s.stores)[e.structure]++;
    }
    return s;
}

}  // namespace memvuln::trace
