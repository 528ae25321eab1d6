#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace exitrf {

/// Typed failure for artifact files. Every reader reports one of these
/// instead of crashing on malformed input.
enum class FormatErrorKind {
    BadMagic,
    VersionMismatch,
    Truncated,
    Checksum,
    Shape,
    Parse,
    Io,
};

const char* to_string(FormatErrorKind kind) noexcept;

class FormatError : public std::runtime_error {
public:
    FormatError(FormatErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    FormatErrorKind kind() const noexcept { return kind_; }

private:
    FormatErrorKind kind_;
};

/// Counter-based seed derivation so every frame / tree / run gets its own stream.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return splitmix64(splitmix64(base ^ splitmix64(a)) + b);
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept;

/// Little-endian byte sink.
class ByteWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) { put(v); }
    void u32(std::uint32_t v) { put(v); }
    void u64(std::uint64_t v) { put(v); }
    void f32(float v) { put(v); }
    void f64(double v) { put(v); }
    void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
    void str(std::string_view s) {
        u32(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void f64s(std::span<const double> v) {
        for (double x : v) f64(x);
    }

    const std::vector<std::uint8_t>& data() const noexcept { return buf_; }
    std::vector<std::uint8_t>& data() noexcept { return buf_; }

private:
    template <class T>
    void put(T v) {
        static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, &v, sizeof(T));
        buf_.insert(buf_.end(), raw, raw + sizeof(T));
    }

    std::vector<std::uint8_t> buf_;
};

/// Little-endian byte source; any overrun throws FormatError(Truncated).
class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

    std::uint8_t u8() { return get<std::uint8_t>(); }
    std::uint16_t u16() { return get<std::uint16_t>(); }
    std::uint32_t u32() { return get<std::uint32_t>(); }
    std::uint64_t u64() { return get<std::uint64_t>(); }
    float f32() { return get<float>(); }
    double f64() { return get<double>(); }
    std::string str();
    void f64s(std::span<double> out) {
        for (double& x : out) x = f64();
    }
    std::span<const std::uint8_t> bytes(std::size_t n);

    std::size_t remaining() const noexcept { return data_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }

private:
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void need(std::size_t n) const;

    std::span<const std::uint8_t> data_;
    std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

/// Writes to a sibling temp file and renames it into place, so a failed
/// write never leaves a partial artifact behind.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

/// Appends a CRC32 trailer over everything written so far.
void append_crc(ByteWriter& w);

/// Checks magic + version, then the CRC32 trailer. Returns a reader positioned
/// just after the version field and bounded before the trailer.
ByteReader open_checked(std::span<const std::uint8_t> bytes, std::string_view magic,
                        std::uint16_t version, const std::string& what);

}  // namespace exitrf
