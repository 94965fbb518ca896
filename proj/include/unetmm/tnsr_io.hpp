#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "unetmm/tensor.hpp"

namespace unetmm {

// "TNSR v1" layout: the bytes `TNSR`, a version byte (1), four little-endian
// u32 extents (n, c, h, w), then n*c*h*w little-endian IEEE-754 floats in
// NCHW order.
inline constexpr std::uint8_t kTnsrVersion = 1;
inline constexpr std::size_t kTnsrHeaderBytes = 4 + 1 + 4 * 4;

std::vector<std::uint8_t> encode_tnsr(const Tensor& t);
/// Throws FormatError on bad magic, unknown version, zero extents, or a
/// payload whose length disagrees with the header.
Tensor decode_tnsr(std::span<const std::uint8_t> bytes);

void write_tnsr(const std::filesystem::path& path, const Tensor& t);
Tensor read_tnsr(const std::filesystem::path& path);

}  // namespace unetmm
