#pragma once

// Reference cache hierarchy for cross-checking the simulator: three levels of
// per-set recency lists, zero latency, no MSHRs. Same placement rules as the
// simulator (non-inclusive, write-back, write-allocate, dirty victims written
// into the next level) but none of its code.

#include <cstdint>
#include <list>
#include <map>
#include <vector>

namespace oracle {

struct LineEvent {
    std::uint64_t line;  // line number (address / 64)
    bool writeback;
    auto operator<=>(const LineEvent&) const = default;
};

class FunctionalCache {
  public:
    struct LevelShape {
        std::uint64_t sets;
        std::uint32_t ways;
    };

    FunctionalCache(std::vector<LevelShape> shape, bool fifo = false) : shape_(std::move(shape)), fifo_(fifo)
    {
        levels_.resize(shape_.size());
    }

    void access(std::uint64_t addr, unsigned width, bool store)
    {
        const std::uint64_t first = addr / 64, last = (addr + width - 1) / 64;
        for (std::uint64_t line = first; line <= last; ++line)
            access_line(line, store);
    }

    // Writes back everything still dirty, one event per line.
    void flush()
    {
        std::map<std::uint64_t, bool> dirty;
        for (auto& lvl : levels_)
            for (auto& [set, entries] : lvl)
                for (auto& e : entries)
                    if (e.dirty)
                        dirty[e.line] = true;
        for (auto& [line, d] : dirty)
            events.push_back({line, true});
    }

    std::vector<LineEvent> events;

  private:
    struct Entry {
        std::uint64_t line;
        bool dirty;
    };
    using Set = std::list<Entry>;  // front = most recent

    Set& set_of(std::size_t l, std::uint64_t line) { return levels_[l][line % shape_[l].sets]; }

    Set::iterator lookup(std::size_t l, std::uint64_t line)
    {
        Set& s = set_of(l, line);
        for (auto it = s.begin(); it != s.end(); ++it)
            if (it->line == line)
                return it;
        return s.end();
    }

    void promote(std::size_t l, Set::iterator it)
    {
        if (fifo_)
            return;
        Set& s = set_of(l, it->line);
        s.splice(s.begin(), s, it);
    }

    void access_line(std::uint64_t line, bool store)
    {
        auto it = lookup(0, line);
        if (it != set_of(0, line).end()) {
            if (store)
                it->dirty = true;
            promote(0, it);
            return;
        }
        std::size_t from = levels_.size();
        for (std::size_t l = 1; l < levels_.size(); ++l) {
            auto hit = lookup(l, line);
            if (hit != set_of(l, line).end()) {
                promote(l, hit);
                from = l;
                break;
            }
        }
        if (from == levels_.size())
            events.push_back({line, false});
        for (std::size_t l = from; l-- > 0;)
            insert(l, line, l == 0 && store);
    }

    void insert(std::size_t l, std::uint64_t line, bool dirty)
    {
        Set& s = set_of(l, line);
        s.push_front({line, dirty});
        if (s.size() <= shape_[l].ways)
            return;
        const Entry victim = s.back();
        s.pop_back();
        if (!victim.dirty)
            return;
        if (l + 1 == levels_.size()) {
            events.push_back({victim.line, true});
            return;
        }
        auto below = lookup(l + 1, victim.line);
        if (below != set_of(l + 1, victim.line).end()) {
            below->dirty = true;
            promote(l + 1, below);
        } else {
            insert(l + 1, victim.line, true);
        }
    }

    std::vector<LevelShape> shape_;
    bool fifo_;
    std::vector<std::map<std::uint64_t, Set>> levels_;
};

}  // namespace oracle
