#include "exitrf/common.hpp"

#include <fstream>
#include <iterator>

#include <zlib.h>

namespace exitrf {

const char* to_string(FormatErrorKind kind) noexcept {
    switch (kind) {
        case FormatErrorKind::BadMagic: return "bad magic";
        case FormatErrorKind::VersionMismatch: return "version mismatch";
        case FormatErrorKind::Truncated: return "truncated";
        case FormatErrorKind::Checksum: return "checksum failure";
        case FormatErrorKind::Shape: return "shape mismatch";
        case FormatErrorKind::Parse: return "parse error";
        case FormatErrorKind::Io: return "io error";
    }
    return "unknown";
}

std::uint32_t crc32(std::span<const std::uint8_t> bytes) noexcept {
    uLong c = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; chunk to stay portable for multi-GB buffers.
    std::size_t off = 0;
    while (off < bytes.size()) {
        const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
        c = ::crc32(c, bytes.data() + off, static_cast<uInt>(n));
        off += n;
    }
    return static_cast<std::uint32_t>(c);
}

std::string ByteReader::str() {
    const std::uint32_t n = u32();
    auto b = bytes(n);
    return std::string(b.begin(), b.end());
}

std::span<const std::uint8_t> ByteReader::bytes(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
}

void ByteReader::need(std::size_t n) const {
    if (n > data_.size() - pos_) {
        throw FormatError(FormatErrorKind::Truncated,
                          "needed " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                              ", only " + std::to_string(data_.size() - pos_) + " remain");
    }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError(FormatErrorKind::Io, "cannot open " + path.string());
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FormatError(FormatErrorKind::Io, "cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        if (!out) {
            out.close();
            std::filesystem::remove(tmp);
            throw FormatError(FormatErrorKind::Io, "short write to " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw FormatError(FormatErrorKind::Io, "cannot rename into " + path.string() + ": " + ec.message());
    }
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void append_crc(ByteWriter& w) {
    const std::uint32_t c = crc32(w.data());
    w.u32(c);
}

ByteReader open_checked(std::span<const std::uint8_t> bytes, std::string_view magic,
                        std::uint16_t version, const std::string& what) {
    if (bytes.size() < magic.size() ||
        std::memcmp(bytes.data(), magic.data(), magic.size()) != 0) {
        throw FormatError(FormatErrorKind::BadMagic, what + ": expected magic '" + std::string(magic) + "'");
    }
    if (bytes.size() < magic.size() + 2 + 4) {
        throw FormatError(FormatErrorKind::Checksum, what + ": file too short for header and checksum");
    }
    std::uint16_t v;
    std::memcpy(&v, bytes.data() + magic.size(), 2);
    if (v != version) {
        throw FormatError(FormatErrorKind::VersionMismatch,
                          what + ": file version " + std::to_string(v) + ", reader supports " +
                              std::to_string(version));
    }
    const auto body = bytes.first(bytes.size() - 4);
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
    if (crc32(body) != stored) {
        throw FormatError(FormatErrorKind::Checksum, what + ": CRC32 mismatch (corrupted or truncated file)");
    }
    ByteReader r(body);
    r.bytes(magic.size() + 2);
    return r;
}

}  // namespace exitrf
