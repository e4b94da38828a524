#pragma once

#include <array>
#include <cstdint>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace spectralx {

// All in-memory arithmetic runs in double precision; on-disk rasters and
// checkpoints store 32-bit little-endian floats.
using real = double;

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Contract violations on tensor shapes / dimensions.
struct ShapeError : Error {
  using Error::Error;
};

// Bad argument values (out-of-range K, odd embedding dim, ...).
struct ValueError : Error {
  using Error::Error;
};

// Non-finite value produced by a forward op, or a diverging loss.
struct NumericError : Error {
  using Error::Error;
};

// File / container problems. Subclasses keep the SPXR failure modes distinct.
struct DataError : Error {
  using Error::Error;
};
struct BadMagicError : DataError {
  using DataError::DataError;
};
struct BadVersionError : DataError {
  using DataError::DataError;
};
struct BadChecksumError : DataError {
  using DataError::DataError;
};
struct TruncatedError : DataError {
  using DataError::DataError;
};

struct ConfigError : Error {
  using Error::Error;
};

// IEEE CRC-32 (reflected, poly 0xEDB88320), as used by zip/png.
inline uint32_t crc32(std::span<const unsigned char> bytes, uint32_t seed = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  for (unsigned char b : bytes) c = table[(c ^ b) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

// FNV-1a, used to derive run filenames from configs.
inline uint64_t fnv1a(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace spectralx
