#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "spectralx/dataio.hpp"
#include "spectralx/params.hpp"

namespace spectralx {

inline constexpr uint16_t kWeightsVersion = 1;

// Weights container: magic "SPXW", version, entry count, then per entry the
// dotted name, shape, and float32 values, and a trailing CRC-32 of everything
// before it. Covers parameters and buffers alike so a load restores eval
// behavior exactly (up to the float32 round trip).
inline std::vector<unsigned char> encode_weights(const ParamStore& store) {
  std::vector<unsigned char> buf;
  buf.insert(buf.end(), {'S', 'P', 'X', 'W'});
  detail::put_u16(buf, kWeightsVersion);
  const auto& all = store.all();
  detail::put_u32(buf, static_cast<uint32_t>(all.size()));
  for (const auto& [name, info] : all) {
    if (name.size() > 0xFFFF) throw DataError("weights: name too long: " + name);
    detail::put_u16(buf, static_cast<uint16_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    const Shape& shp = info.tensor.shape();
    buf.push_back(static_cast<unsigned char>(shp.size()));
    for (int64_t d : shp) detail::put_u32(buf, static_cast<uint32_t>(d));
    for (real v : info.tensor.vals()) detail::put_f32(buf, static_cast<float>(v));
  }
  detail::put_u32(buf, crc32({buf.data(), buf.size()}));
  return buf;
}

// Loads into an existing store; the file must carry exactly the names and
// shapes the store declares, in any order.
inline void decode_weights(ParamStore& store, const unsigned char* data, size_t size) {
  detail::ByteReader r(data, size);
  if (r.u8() != 'S' || r.u8() != 'P' || r.u8() != 'X' || r.u8() != 'W') {
    throw BadMagicError("weights: bad magic");
  }
  if (size < 8) throw TruncatedError("weights: too short");
  const uint32_t stored = static_cast<uint32_t>(data[size - 4]) |
                          static_cast<uint32_t>(data[size - 3]) << 8 |
                          static_cast<uint32_t>(data[size - 2]) << 16 |
                          static_cast<uint32_t>(data[size - 1]) << 24;
  if (crc32({data, size - 4}) != stored) throw BadChecksumError("weights: checksum mismatch");
  const uint16_t ver = r.u16();
  if (ver != kWeightsVersion) throw BadVersionError("weights: unsupported version");
  const uint32_t count = r.u32();
  if (count != store.all().size()) throw DataError("weights: entry count mismatch");

  std::map<std::string, bool> seen;
  for (uint32_t e = 0; e < count; ++e) {
    const uint16_t nlen = r.u16();
    std::string name(nlen, '\0');
    for (uint16_t i = 0; i < nlen; ++i) name[i] = static_cast<char>(r.u8());
    const uint8_t ndim = r.u8();
    Shape shp(ndim);
    for (uint8_t i = 0; i < ndim; ++i) shp[i] = static_cast<int64_t>(r.u32());
    Tensor t = store.get(name);  // throws on unknown name; copy shares storage
    if (t.shape() != shp) throw DataError("weights: shape mismatch for " + name);
    if (seen[name]) throw DataError("weights: duplicate entry " + name);
    seen[name] = true;
    auto& vals = t.vals_mut();
    for (real& v : vals) v = static_cast<real>(r.f32());
  }
}

inline void save_weights(const ParamStore& store, const std::string& path) {
  const auto buf = encode_weights(store);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("weights: cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("weights: write failed: " + path);
}

inline void load_weights(ParamStore& store, const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("weights: cannot open: " + path);
  const std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<unsigned char> buf(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(buf.data()), size);
  if (!f) throw DataError("weights: read failed: " + path);
  decode_weights(store, buf.data(), buf.size());
}

}  // namespace spectralx
