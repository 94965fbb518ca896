#include "unetmm/tnsr_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include <fmt/core.h>

namespace unetmm {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFFu));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint32_t extent_u32(std::int64_t e) {
    if (e > std::numeric_limits<std::uint32_t>::max()) {
        throw SizeError(fmt::format("extent {} does not fit the TNSR header", e));
    }
    return static_cast<std::uint32_t>(e);
}

}  // namespace

std::vector<std::uint8_t> encode_tnsr(const Tensor& t) {
    const Shape& s = t.shape();
    std::vector<std::uint8_t> out;
    out.reserve(kTnsrHeaderBytes + static_cast<std::size_t>(t.numel()) * 4);
    out.insert(out.end(), {'T', 'N', 'S', 'R'});
    out.push_back(kTnsrVersion);
    for (std::int64_t e : {s.n, s.c, s.h, s.w}) put_u32(out, extent_u32(e));
    for (float v : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

Tensor decode_tnsr(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < kTnsrHeaderBytes) {
        throw FormatError(fmt::format("TNSR: truncated header ({} bytes)", bytes.size()));
    }
    if (std::memcmp(bytes.data(), "TNSR", 4) != 0) {
        throw FormatError("TNSR: bad magic");
    }
    if (bytes[4] != kTnsrVersion) {
        throw FormatError(fmt::format("TNSR: unsupported version {}", bytes[4]));
    }
    Shape s{get_u32(&bytes[5]), get_u32(&bytes[9]), get_u32(&bytes[13]), get_u32(&bytes[17])};
    if (s.n == 0 || s.c == 0 || s.h == 0 || s.w == 0) {
        throw FormatError(fmt::format("TNSR: zero extent in {}", s.str()));
    }
    const auto count = static_cast<std::size_t>(s.numel());
    if (bytes.size() != kTnsrHeaderBytes + count * 4) {
        throw FormatError(fmt::format("TNSR: payload is {} bytes, header {} implies {}",
                                      bytes.size() - kTnsrHeaderBytes, s.str(), count * 4));
    }
    std::vector<float> values(count);
    const std::uint8_t* p = bytes.data() + kTnsrHeaderBytes;
    for (std::size_t i = 0; i < count; ++i) values[i] = std::bit_cast<float>(get_u32(p + 4 * i));
    return Tensor(s, std::move(values));
}

void write_tnsr(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_tnsr(t);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(fmt::format("cannot open {} for writing", path.string()));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error(fmt::format("write to {} failed", path.string()));
    }
}

Tensor read_tnsr(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError(fmt::format("cannot open {}", path.string()));
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_tnsr(bytes);
    } catch (const FormatError& e) {
        throw FormatError(fmt::format("{}: {}", path.string(), e.what()));
    }
}

}  // namespace unetmm
