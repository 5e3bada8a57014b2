#pragma once

// Cache hierarchy configuration and its key = value text form.

#include <array>
#include <cmath>
#include <cstdint>
#include <istream>
#include <sstream>
#include <string>

#include "memvuln/common.hpp"

namespace memvuln::cache {

enum class Replacement : std::uint8_t { lru, fifo };

struct LevelConfig {
    std::string name;
    bool shared = false;
    std::uint32_t assoc = 8;
    std::uint64_t size_bytes = 0;
    std::uint32_t latency = 0;  // cycles
    std::uint32_t mshrs = 32;

    std::uint64_t sets(std::uint32_t line) const noexcept { return size_bytes / (std::uint64_t{assoc} * line); }

    friend bool operator==(const LevelConfig&, const LevelConfig&) = default;
};

struct CacheConfig {
    std::array<LevelConfig, 3> levels;
    std::uint32_t line_size = 64;
    std::uint32_t memory_latency = 155;
    std::uint64_t memory_size = 32ull << 30;
    // Recorded for reference only; memory is modelled with fixed latency.
    double memory_bandwidth_bytes_per_cycle = 16e9 / 2.6e9;
    double core_ghz = 2.6;
    Replacement replacement = Replacement::lru;

    // Xeon E5-2670-like defaults.
    static CacheConfig table1()
    {
        CacheConfig c;
        c.levels[0] = {"l1d", false, 8, 32u << 10, 4, 32};
        c.levels[1] = {"l2", false, 8, 256u << 10, 12, 32};
        c.levels[2] = {"l3", true, 16, 20u << 20, 28, 128};
        return c;
    }

    // Capacities multiplied by `factor`, rounded down to whole sets (at least one).
    CacheConfig scaled(double factor) const
    {
        if (!(factor > 0.0))
            throw InvalidArgument("cache scale factor must be positive");
        CacheConfig c = *this;
        for (auto& l : c.levels) {
            const std::uint64_t set_bytes = std::uint64_t{l.assoc} * line_size;
            const auto target = static_cast<std::uint64_t>(std::floor(static_cast<double>(l.size_bytes) * factor));
            l.size_bytes = std::max<std::uint64_t>(1, target / set_bytes) * set_bytes;
        }
        return c;
    }

    // Same geometry with every latency zeroed: a purely functional hierarchy.
    CacheConfig latency_free() const
    {
        CacheConfig c = *this;
        for (auto& l : c.levels)
            l.latency = 0;
        c.memory_latency = 0;
        return c;
    }

    std::uint32_t lookup_latency() const noexcept
    {
        return levels[0].latency + levels[1].latency + levels[2].latency;
    }

    void validate() const
    {
        if (line_size != 64)
            throw InvalidArgument("line size must be 64 bytes");
        for (const auto& l : levels) {
            if (l.assoc == 0 || l.mshrs == 0)
                throw InvalidArgument(l.name + ": associativity and MSHR count must be positive");
            if (l.size_bytes == 0 || l.size_bytes % (std::uint64_t{l.assoc} * line_size) != 0)
                throw InvalidArgument(l.name + ": size must be a positive multiple of assoc * line size");
        }
        if (memory_size == 0)
            throw InvalidArgument("memory size must be positive");
    }

    friend bool operator==(const CacheConfig&, const CacheConfig&) = default;
};

inline std::string to_text(const CacheConfig& c)
{
    std::ostringstream os;
    os << "# memvuln cache configuration v1\n";
    os << "line_size = " << c.line_size << "\n";
    os << "replacement = " << (c.replacement == Replacement::lru ? "lru" : "fifo") << "\n";
    os << "core_ghz = " << c.core_ghz << "\n";
    for (const auto& l : c.levels) {
        os << l.name << ".shared = " << (l.shared ? "true" : "false") << "\n";
        os << l.name << ".assoc = " << l.assoc << "\n";
        os << l.name << ".size = " << l.size_bytes << "\n";
        os << l.name << ".latency = " << l.latency << "\n";
        os << l.name << ".mshrs = " << l.mshrs << "\n";
    }
    os << "memory.latency = " << c.memory_latency << "\n";
    os << "memory.size = " << c.memory_size << "\n";
    os.precision(17);
    os << "memory.bandwidth_bytes_per_cycle = " << c.memory_bandwidth_bytes_per_cycle << "\n";
    return os.str();
}

namespace detail {

inline std::string trim(std::string s)
{
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos)
        return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

inline std::uint64_t parse_size(const std::string& v, const std::string& key)
{
    std::size_t pos = 0;
    unsigned long long n = 0;
    try {
        n = std::stoull(v, &pos);
    } catch (const std::exception&) {
        throw FormatError("config: bad number for '" + key + "': " + v);
    }
    std::string suffix = trim(v.substr(pos));
    for (auto& ch : suffix)
        ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (suffix.empty() || suffix == "b")
        return n;
    if (suffix == "k" || suffix == "kb" || suffix == "kib")
        return n << 10;
    if (suffix == "m" || suffix == "mb" || suffix == "mib")
        return n << 20;
    if (suffix == "g" || suffix == "gb" || suffix == "gib")
        return n << 30;
    throw FormatError("config: bad size suffix for '" + key + "': " + v);
}

inline std::uint32_t parse_u32(const std::string& v, const std::string& key)
{
    const auto n = parse_size(v, key);
    if (n > 0xFFFFFFFFull)
        throw FormatError("config: value out of range for '" + key + "'");
    return static_cast<std::uint32_t>(n);
}

}  // namespace detail

// Parses the text form. Keys not present keep their Table-1 defaults; unknown
// keys are an error. Sizes accept k/m/g suffixes.
inline CacheConfig parse_config(std::istream& in)
{
    CacheConfig c = CacheConfig::table1();
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (const auto hash = line.find('#'); hash != std::string::npos)
            line.erase(hash);
        line = detail::trim(line);
        if (line.empty())
            continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw FormatError("config line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string val = detail::trim(line.substr(eq + 1));

        if (key == "line_size") {
            c.line_size = detail::parse_u32(val, key);
            continue;
        }
        if (key == "replacement") {
            if (val == "lru")
                c.replacement = Replacement::lru;
            else if (val == "fifo")
                c.replacement = Replacement::fifo;
            else
                throw FormatError("config: unknown replacement policy '" + val + "'");
            continue;
        }
        if (key == "core_ghz") {
            c.core_ghz = std::stod(val);
            continue;
        }
        if (key == "memory.latency") {
            c.memory_latency = detail::parse_u32(val, key);
            continue;
        }
        if (key == "memory.size") {
            c.memory_size = detail::parse_size(val, key);
            continue;
        }
        if (key == "memory.bandwidth_bytes_per_cycle") {
            c.memory_bandwidth_bytes_per_cycle = std::stod(val);
            continue;
        }
        const auto dot = key.find('.');
        LevelConfig* level = nullptr;
        if (dot != std::string::npos)
            for (auto& l : c.levels)
                if (l.name == key.substr(0, dot))
                    level = &l;
        if (level == nullptr)
            throw FormatError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
        const std::string field = key.substr(dot + 1);
        if (field == "shared")
            level->shared = (val == "true" || val == "1" || val == "yes");
        else if (field == "assoc")
            level->assoc = detail::parse_u32(val, key);
        else if (field == "size")
            level->size_bytes = detail::parse_size(val, key);
        else if (field == "latency")
            level->latency = detail::parse_u32(val, key);
        else if (field == "mshrs")
            level->mshrs = detail::parse_u32(val, key);
        else
            throw FormatError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    c.validate();
    return c;
}

inline CacheConfig parse_config(const std::string& text)
{
    std::istringstream in(text);
    return parse_config(in);
}

}  // namespace memvuln::cache
