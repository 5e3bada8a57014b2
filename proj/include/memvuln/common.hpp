#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <memory>
#include <new>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace memvuln {

// Error hierarchy -----------------------------------------------------------

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Requested sizes do not fit the index type or the configured address space.
class CapacityError : public Error {
  public:
    using Error::Error;
};

// Malformed, truncated or mismatched binary/text files.
class FormatError : public Error {
  public:
    using Error::Error;
};

// A metric was asked for over an empty time window.
class UndefinedMetric : public Error {
  public:
    using Error::Error;
};

class InvalidArgument : public Error {
  public:
    using Error::Error;
};

// Data structures -----------------------------------------------------------

// The nine CG data structures whose memory behaviour is tracked, plus a padding
// region that the solver never touches (used as an injection control).
enum class Structure : std::uint8_t { Ar, Ac, Av, x, g, d, d_prime, q, b, pad };

inline constexpr std::size_t kTrackedStructures = 9;

inline constexpr std::array<Structure, kTrackedStructures> kTracked = {
    Structure::Ar, Structure::Ac, Structure::Av, Structure::x, Structure::g,
    Structure::d,  Structure::d_prime, Structure::q, Structure::b};

inline constexpr std::string_view name_of(Structure s) noexcept
{
    switch (s) {
    case Structure::Ar: return "Ar";
    case Structure::Ac: return "Ac";
    case Structure::Av: return "Av";
    case Structure::x: return "x";
    case Structure::g: return "g";
    case Structure::d: return "d";
    case Structure::d_prime: return "d_prime";
    case Structure::q: return "q";
    case Structure::b: return "b";
    case Structure::pad: return "pad";
    }
    return "other";
}

inline std::optional<Structure> structure_from_name(std::string_view name) noexcept
{
    for (auto s : kTracked)
        if (name_of(s) == name)
            return s;
    if (name == "pad")
        return Structure::pad;
    if (name == "d'" || name == "dp")
        return Structure::d_prime;
    return std::nullopt;
}

// AlignedArray ----------------------------------------------------------------

inline constexpr std::size_t kLineBytes = 64;

inline constexpr std::size_t round_up(std::size_t v, std::size_t to) noexcept
{
    return (v + to - 1) / to * to;
}

// Fixed-size array on a 64-byte boundary whose allocation is padded (with zeros)
// to a whole number of cache lines, so any 64-bit word overlapping the logical
// extent can be read or written in place.
template <typename T>
class AlignedArray {
    struct Free {
        void operator()(T* p) const noexcept { std::free(p); }
    };

  public:
    AlignedArray() = default;

    explicit AlignedArray(std::size_t n) : size_(n)
    {
        if (n == 0)
            return;
        const std::size_t bytes = padded_bytes();
        void* p = std::aligned_alloc(kLineBytes, bytes);
        if (p == nullptr)
            throw std::bad_alloc();
        std::memset(p, 0, bytes);
        data_.reset(static_cast<T*>(p));
    }

    AlignedArray(std::size_t n, const T& fill) : AlignedArray(n)
    {
        for (std::size_t i = 0; i < n; ++i)
            data_.get()[i] = fill;
    }

    AlignedArray(const AlignedArray& other) : AlignedArray(other.size_)
    {
        if (size_ != 0)
            std::memcpy(data_.get(), other.data_.get(), other.padded_bytes());
    }

    AlignedArray& operator=(const AlignedArray& other)
    {
        if (this != &other) {
            if (size_ == other.size_) {
                if (size_ != 0)
                    std::memcpy(data_.get(), other.data_.get(), padded_bytes());
            } else {
                AlignedArray tmp(other);
                *this = std::move(tmp);
            }
        }
        return *this;
    }

    AlignedArray(AlignedArray&&) noexcept = default;
    AlignedArray& operator=(AlignedArray&&) noexcept = default;

    T* data() noexcept { return data_.get(); }
    const T* data() const noexcept { return data_.get(); }
    std::size_t size() const noexcept { return size_; }
    bool empty() const noexcept { return size_ == 0; }
    std::size_t byte_size() const noexcept { return size_ * sizeof(T); }
    std::size_t padded_bytes() const noexcept { return round_up(byte_size(), kLineBytes); }

    T& operator[](std::size_t i) noexcept { return data_.get()[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_.get()[i]; }

    T* begin() noexcept { return data(); }
    T* end() noexcept { return data() + size_; }
    const T* begin() const noexcept { return data(); }
    const T* end() const noexcept { return data() + size_; }

    std::span<T> span() noexcept { return {data(), size_}; }
    std::span<const T> span() const noexcept { return {data(), size_}; }
    operator std::span<T>() noexcept { return span(); }
    operator std::span<const T>() const noexcept { return span(); }

    std::span<std::byte> bytes() noexcept { return {reinterpret_cast<std::byte*>(data()), byte_size()}; }
    std::span<const std::byte> bytes() const noexcept
    {
        return {reinterpret_cast<const std::byte*>(data()), byte_size()};
    }

    friend bool operator==(const AlignedArray& a, const AlignedArray& b) noexcept
    {
        return a.size_ == b.size_ &&
               (a.size_ == 0 || std::memcmp(a.data(), b.data(), a.byte_size()) == 0);
    }

  private:
    std::unique_ptr<T, Free> data_;
    std::size_t size_ = 0;
};

// Little-endian binary helpers ------------------------------------------------

namespace le {

template <typename T>
void put(std::ostream& os, T value)
{
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<unsigned char, sizeof(T)> buf{};
    std::memcpy(buf.data(), &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(buf.begin(), buf.end());
    os.write(reinterpret_cast<const char*>(buf.data()), sizeof(T));
}

template <typename T>
T decode(const unsigned char* p) noexcept
{
    std::array<unsigned char, sizeof(T)> buf{};
    std::memcpy(buf.data(), p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(buf.begin(), buf.end());
    T value;
    std::memcpy(&value, buf.data(), sizeof(T));
    return value;
}

template <typename T>
void encode(unsigned char* p, T value) noexcept
{
    std::memcpy(p, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big)
        std::reverse(p, p + sizeof(T));
}

// Reads one value; `offset` is advanced and reported on truncation.
template <typename T>
T get(std::istream& is, std::uint64_t& offset, std::string_view what)
{
    std::array<unsigned char, sizeof(T)> buf{};
    is.read(reinterpret_cast<char*>(buf.data()), sizeof(T));
    if (is.gcount() != static_cast<std::streamsize>(sizeof(T)))
        throw FormatError("truncated " + std::string(what) + " at byte offset " + std::to_string(offset));
    offset += sizeof(T);
    return decode<T>(buf.data());
}

template <typename T>
void put_array(std::ostream& os, std::span<const T> values)
{
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(values.data()),
                 static_cast<std::streamsize>(values.size_bytes()));
    } else {
        for (const T& v : values)
            put(os, v);
    }
}

template <typename T>
void get_array(std::istream& is, std::uint64_t& offset, std::span<T> out, std::string_view what)
{
    const auto bytes = static_cast<std::streamsize>(out.size_bytes());
    is.read(reinterpret_cast<char*>(out.data()), bytes);
    if (is.gcount() != bytes)
        throw FormatError("truncated " + std::string(what) + " at byte offset " +
                          std::to_string(offset + static_cast<std::uint64_t>(is.gcount())));
    offset += static_cast<std::uint64_t>(bytes);
    if constexpr (std::endian::native == std::endian::big) {
        for (T& v : out)
            v = decode<T>(reinterpret_cast<const unsigned char*>(&v));
    }
}

}  // namespace le

}  // namespace memvuln
