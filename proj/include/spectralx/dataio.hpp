#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "spectralx/common.hpp"
#include "spectralx/rng.hpp"
#include "spectralx/tensor.hpp"

namespace spectralx {

// Raster payloads are stored as 32-bit floats so that generation, training
// input, and the on-disk container all agree bit-for-bit.
struct SpectralImage {
  int64_t height = 0, width = 0, bands = 0;
  std::vector<float> wavelengths;  // nm, strictly increasing
  std::vector<float> values;       // band-interleaved by pixel: [y][x][band]

  void validate() const {
    if (height <= 0 || width <= 0 || bands <= 0) throw DataError("image: empty dimensions");
    if (static_cast<int64_t>(wavelengths.size()) != bands) {
      throw DataError("image: wavelength count != band count");
    }
    for (int64_t i = 1; i < bands; ++i) {
      if (!(wavelengths[static_cast<size_t>(i)] > wavelengths[static_cast<size_t>(i - 1)])) {
        throw DataError("image: wavelengths not strictly increasing");
      }
    }
    if (static_cast<int64_t>(values.size()) != height * width * bands) {
      throw DataError("image: value count mismatch");
    }
    for (float v : values) {
      if (!std::isfinite(v)) throw DataError("image: non-finite value");
    }
  }

  float at(int64_t y, int64_t x, int64_t b) const {
    return values[static_cast<size_t>((y * width + x) * bands + b)];
  }
};

struct SegmentationMap {
  int64_t height = 0, width = 0;
  std::vector<uint16_t> labels;

  void validate(int64_t classes) const {
    if (static_cast<int64_t>(labels.size()) != height * width) {
      throw DataError("labels: count mismatch");
    }
    for (uint16_t l : labels) {
      if (l >= classes) throw DataError("labels: value out of class range");
    }
  }

  uint16_t at(int64_t y, int64_t x) const { return labels[static_cast<size_t>(y * width + x)]; }
};

// Model-side view: [1, bands, H, W] double tensor.
inline Tensor image_to_tensor(const SpectralImage& img) {
  std::vector<real> v(static_cast<size_t>(img.bands * img.height * img.width));
  for (int64_t b = 0; b < img.bands; ++b)
    for (int64_t y = 0; y < img.height; ++y)
      for (int64_t x = 0; x < img.width; ++x)
        v[static_cast<size_t>((b * img.height + y) * img.width + x)] =
            static_cast<real>(img.at(y, x, b));
  return Tensor::from({1, img.bands, img.height, img.width}, std::move(v));
}

// ----- synthetic scenes -------------------------------------------------------

struct SceneConfig {
  int64_t size = 32;
  int64_t bands = 8;
  std::vector<real> wavelengths = {443, 490, 560, 665, 705, 842, 1610, 2190};
  int64_t classes = 4;
  int64_t sites = 5;        // Voronoi seed points
  real noise_std = 0.05;
  real illum_amp = 0.2;     // smooth multiplicative illumination amplitude
  uint64_t seed = 0;

  void validate() const {
    if (size < 4) throw ValueError("scene: size too small");
    if (classes < 2) throw ValueError("scene: need at least 2 classes");
    if (sites < classes) throw ValueError("scene: need at least one site per class");
    if (static_cast<int64_t>(wavelengths.size()) != bands) {
      throw ValueError("scene: wavelength count != bands");
    }
    if (noise_std < 0 || illum_amp < 0 || illum_amp >= 1) {
      throw ValueError("scene: invalid noise/illumination");
    }
  }
};

struct DomainShift {
  enum class Kind { none, regional, seasonal };
  Kind kind = Kind::none;
  real magnitude = 0.0;
};

namespace detail {

// Class signatures: a smooth band profile shared by every class plus a
// smaller per-class deviation, redrawn until every pair is farther apart than
// 3x the noise level. The shared profile dominates the within-patch spectral
// shape (like a common land-surface continuum), so coarse reconstruction can
// succeed from scene statistics alone, while classification has to pick up
// the per-class deviations.
inline std::vector<real> class_signatures(const SceneConfig& cfg) {
  Rng rng = Rng::substream(cfg.seed, fnv1a("signatures"));
  std::vector<real> base(static_cast<size_t>(cfg.bands));
  const real phase = rng.uniform(0.0, 6.28);
  for (int64_t b = 0; b < cfg.bands; ++b) {
    base[static_cast<size_t>(b)] =
        2.0 + 0.8 * std::sin(2.0 * 3.14159265358979323846 * static_cast<real>(b) /
                                 static_cast<real>(cfg.bands) +
                             phase);
  }
  std::vector<real> sig(static_cast<size_t>(cfg.classes * cfg.bands));
  for (int attempt = 0; attempt < 64; ++attempt) {
    for (int64_t c = 0; c < cfg.classes; ++c)
      for (int64_t b = 0; b < cfg.bands; ++b)
        sig[static_cast<size_t>(c * cfg.bands + b)] =
            base[static_cast<size_t>(b)] + rng.uniform(-0.35, 0.35);
    real min_dist2 = std::numeric_limits<real>::infinity();
    for (int64_t a = 0; a < cfg.classes; ++a)
      for (int64_t b = a + 1; b < cfg.classes; ++b) {
        real d2 = 0.0;
        for (int64_t k = 0; k < cfg.bands; ++k) {
          const real diff = sig[static_cast<size_t>(a * cfg.bands + k)] -
                            sig[static_cast<size_t>(b * cfg.bands + k)];
          d2 += diff * diff;
        }
        min_dist2 = std::min(min_dist2, d2);
      }
    const real need = 3.0 * cfg.noise_std;
    if (min_dist2 > need * need) return sig;
  }
  throw ValueError("scene: could not draw sufficiently distinct signatures");
}

// Regional shift: deterministic per-(class, band) signature displacement
// shared by every scene of the shifted domain.
inline void apply_regional(std::vector<real>& sig, const SceneConfig& cfg, real magnitude) {
  Rng rng = Rng::substream(cfg.seed, fnv1a("regional-delta"));
  for (auto& s : sig) {
    s += magnitude * rng.normal();
    s = std::clamp(s, 0.1, 9.0);
  }
}

struct SeasonalCurve {
  real phase_gain, phase_offset;
  real magnitude;
  real wl_lo, wl_hi;

  real gain(real wl) const {
    const real u = (wl - wl_lo) / (wl_hi - wl_lo);
    return 1.0 + magnitude * 0.5 * std::sin(2.0 * 3.14159265358979323846 * u + phase_gain);
  }
  real offset(real wl) const {
    const real u = (wl - wl_lo) / (wl_hi - wl_lo);
    return magnitude * 0.1 * std::cos(2.0 * 3.14159265358979323846 * u + phase_offset);
  }
};

inline SeasonalCurve seasonal_curve(const SceneConfig& cfg, real magnitude) {
  Rng rng = Rng::substream(cfg.seed, fnv1a("seasonal"));
  SeasonalCurve c;
  c.phase_gain = rng.uniform(0.0, 6.28);
  c.phase_offset = rng.uniform(0.0, 6.28);
  c.magnitude = magnitude;
  c.wl_lo = cfg.wavelengths.front();
  c.wl_hi = cfg.wavelengths.back();
  return c;
}

}  // namespace detail

// One synthetic scene: Voronoi label geometry, class-signature spectra under
// a smooth illumination field, optional domain shift on the spectra only.
inline std::pair<SpectralImage, SegmentationMap> generate_scene(const SceneConfig& cfg,
                                                                const DomainShift& shift,
                                                                uint64_t scene_seed) {
  cfg.validate();
  Rng rng = Rng::substream(cfg.seed, scene_seed * 2 + 1);

  // Voronoi sites; class of site i = i mod classes so every class can appear.
  std::vector<real> sx(static_cast<size_t>(cfg.sites)), sy(static_cast<size_t>(cfg.sites));
  for (int64_t i = 0; i < cfg.sites; ++i) {
    sx[static_cast<size_t>(i)] = rng.uniform(0.0, static_cast<real>(cfg.size));
    sy[static_cast<size_t>(i)] = rng.uniform(0.0, static_cast<real>(cfg.size));
  }

  SegmentationMap labels;
  labels.height = labels.width = cfg.size;
  labels.labels.resize(static_cast<size_t>(cfg.size * cfg.size));
  for (int64_t y = 0; y < cfg.size; ++y)
    for (int64_t x = 0; x < cfg.size; ++x) {
      real best = std::numeric_limits<real>::infinity();
      int64_t arg = 0;
      for (int64_t i = 0; i < cfg.sites; ++i) {
        const real dx = static_cast<real>(x) + 0.5 - sx[static_cast<size_t>(i)];
        const real dy = static_cast<real>(y) + 0.5 - sy[static_cast<size_t>(i)];
        const real d2 = dx * dx + dy * dy;
        if (d2 < best) {
          best = d2;
          arg = i;
        }
      }
      labels.labels[static_cast<size_t>(y * cfg.size + x)] =
          static_cast<uint16_t>(arg % cfg.classes);
    }

  std::vector<real> sig = detail::class_signatures(cfg);
  if (shift.kind == DomainShift::Kind::regional && shift.magnitude != 0.0) {
    detail::apply_regional(sig, cfg, shift.magnitude);
  }
  const bool seasonal = shift.kind == DomainShift::Kind::seasonal && shift.magnitude != 0.0;
  detail::SeasonalCurve curve = detail::seasonal_curve(cfg, seasonal ? shift.magnitude : 0.0);

  // smooth multiplicative illumination field, phase varies per scene
  const real px = rng.uniform(0.0, 6.28), py = rng.uniform(0.0, 6.28);
  constexpr real kTau = 2.0 * 3.14159265358979323846;

  SpectralImage img;
  img.height = img.width = cfg.size;
  img.bands = cfg.bands;
  img.wavelengths.reserve(static_cast<size_t>(cfg.bands));
  for (real w : cfg.wavelengths) img.wavelengths.push_back(static_cast<float>(w));
  img.values.resize(static_cast<size_t>(cfg.size * cfg.size * cfg.bands));
  for (int64_t y = 0; y < cfg.size; ++y)
    for (int64_t x = 0; x < cfg.size; ++x) {
      const real illum =
          1.0 + cfg.illum_amp * std::sin(kTau * static_cast<real>(x) / static_cast<real>(cfg.size) + px) *
                    std::sin(kTau * static_cast<real>(y) / static_cast<real>(cfg.size) + py);
      const int64_t cls = labels.at(y, x);
      for (int64_t b = 0; b < cfg.bands; ++b) {
        real v = sig[static_cast<size_t>(cls * cfg.bands + b)] * illum;
        if (seasonal) {
          v = v * curve.gain(cfg.wavelengths[static_cast<size_t>(b)]) +
              curve.offset(cfg.wavelengths[static_cast<size_t>(b)]);
        }
        v += cfg.noise_std == 0.0 ? 0.0 : rng.normal(0.0, cfg.noise_std);
        v = std::clamp(v, 0.0, 10.0);
        img.values[static_cast<size_t>((y * cfg.size + x) * cfg.bands + b)] =
            static_cast<float>(v);
      }
    }
  img.validate();
  labels.validate(cfg.classes);
  return {std::move(img), std::move(labels)};
}

// Deterministic train/test index partition.
inline std::pair<std::vector<int64_t>, std::vector<int64_t>> split_indices(int64_t n,
                                                                           real train_frac,
                                                                           uint64_t seed) {
  if (n <= 0) throw ValueError("split: empty dataset");
  if (train_frac <= 0.0 || train_frac >= 1.0) throw ValueError("split: fraction must be in (0,1)");
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  Rng rng(seed);
  shuffle(idx, rng);
  const int64_t k = std::max<int64_t>(1, static_cast<int64_t>(train_frac * static_cast<real>(n)));
  if (k >= n) throw ValueError("split: empty test partition");
  return {{idx.begin(), idx.begin() + k}, {idx.begin() + k, idx.end()}};
}

// ----- SPXR raster container ----------------------------------------------------
//
// Layout (all little-endian):
//   "SPXR" | u16 version | u32 H | u32 W | u32 d | d x f32 wavelengths |
//   H*W*d x f32 values (band-interleaved by pixel) | u8 label flag |
//   [H*W x u16 labels] | u32 CRC-32 of everything before it

inline constexpr uint16_t kRasterVersion = 1;

namespace detail {

inline void put_u16(std::vector<unsigned char>& b, uint16_t v) {
  b.push_back(static_cast<unsigned char>(v & 0xFF));
  b.push_back(static_cast<unsigned char>(v >> 8));
}
inline void put_u32(std::vector<unsigned char>& b, uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}
inline void put_f32(std::vector<unsigned char>& b, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(b, bits);
}

class ByteReader {
 public:
  ByteReader(const unsigned char* data, size_t size) : data_(data), size_(size) {}
  size_t pos() const { return pos_; }
  size_t remaining() const { return size_ - pos_; }

  void need(size_t n) const {
    if (pos_ + n > size_) throw TruncatedError("raster file truncated");
  }
  uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  uint16_t u16() {
    need(2);
    uint16_t v = static_cast<uint16_t>(data_[pos_]) |
                 static_cast<uint16_t>(static_cast<uint16_t>(data_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() {
    const uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

 private:
  const unsigned char* data_;
  size_t size_;
  size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_raster(const SpectralImage& img,
                                                const SegmentationMap* labels) {
  img.validate();
  if (labels) {
    if (labels->height != img.height || labels->width != img.width) {
      throw DataError("raster: label size mismatch");
    }
    if (static_cast<int64_t>(labels->labels.size()) != img.height * img.width) {
      throw DataError("raster: label count mismatch");
    }
  }
  std::vector<unsigned char> buf;
  buf.reserve(static_cast<size_t>(32 + img.values.size() * 4));
  buf.insert(buf.end(), {'S', 'P', 'X', 'R'});
  detail::put_u16(buf, kRasterVersion);
  detail::put_u32(buf, static_cast<uint32_t>(img.height));
  detail::put_u32(buf, static_cast<uint32_t>(img.width));
  detail::put_u32(buf, static_cast<uint32_t>(img.bands));
  for (float w : img.wavelengths) detail::put_f32(buf, w);
  for (float v : img.values) detail::put_f32(buf, v);
  buf.push_back(labels ? 1 : 0);
  if (labels) {
    for (uint16_t l : labels->labels) detail::put_u16(buf, l);
  }
  const uint32_t crc = crc32({buf.data(), buf.size()});
  detail::put_u32(buf, crc);
  return buf;
}

struct RasterFile {
  SpectralImage image;
  std::optional<SegmentationMap> labels;
};

inline RasterFile decode_raster(const unsigned char* data, size_t size) {
  detail::ByteReader r(data, size);
  r.need(4);
  if (std::memcmp(data, "SPXR", 4) != 0) throw BadMagicError("raster: bad magic");
  // checksum first: everything except the trailing 4 bytes
  if (size < 8) throw TruncatedError("raster file truncated");
  {
    detail::ByteReader tail(data + size - 4, 4);
    const uint32_t stored = tail.u32();
    const uint32_t computed = crc32({data, size - 4});
    if (stored != computed) throw BadChecksumError("raster: checksum mismatch");
  }
  r = detail::ByteReader(data + 4, size - 8);  // body between magic and CRC
  const uint16_t version = r.u16();
  if (version != kRasterVersion) throw BadVersionError("raster: unsupported version");
  RasterFile out;
  out.image.height = r.u32();
  out.image.width = r.u32();
  out.image.bands = r.u32();
  if (out.image.height <= 0 || out.image.width <= 0 || out.image.bands <= 0 ||
      out.image.height > 1 << 20 || out.image.width > 1 << 20 || out.image.bands > 1 << 16) {
    throw DataError("raster: implausible dimensions");
  }
  out.image.wavelengths.resize(static_cast<size_t>(out.image.bands));
  for (auto& w : out.image.wavelengths) w = r.f32();
  const int64_t n = out.image.height * out.image.width;
  out.image.values.resize(static_cast<size_t>(n * out.image.bands));
  for (auto& v : out.image.values) v = r.f32();
  const uint8_t flag = r.u8();
  if (flag > 1) throw DataError("raster: bad label flag");
  if (flag) {
    SegmentationMap m;
    m.height = out.image.height;
    m.width = out.image.width;
    m.labels.resize(static_cast<size_t>(n));
    for (auto& l : m.labels) l = r.u16();
    out.labels = std::move(m);
  }
  if (r.remaining() != 0) throw TruncatedError("raster: trailing bytes");
  out.image.validate();
  return out;
}

inline void write_raster(const SpectralImage& img, const SegmentationMap* labels,
                         const std::string& path) {
  const auto buf = encode_raster(img, labels);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("raster: cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("raster: write failed: " + path);
}

inline RasterFile read_raster(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("raster: cannot open: " + path);
  const std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<unsigned char> buf(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(buf.data()), size);
  if (!f) throw DataError("raster: read failed: " + path);
  return decode_raster(buf.data(), buf.size());
}

// ----- dataset manifest -----------------------------------------------------

struct ManifestEntry {
  std::string path;
  std::string domain;  // source | target
  std::string split;   // train | test
};

inline void write_manifest(const std::vector<ManifestEntry>& entries, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("manifest: cannot open for writing: " + path);
  for (const auto& e : entries) {
    f << "path=" << e.path << " domain=" << e.domain << " split=" << e.split << "\n";
  }
}

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("manifest: cannot open: " + path);
  std::vector<ManifestEntry> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    ManifestEntry e;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos) throw DataError("manifest: malformed line: " + line);
      const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
      if (key == "path") e.path = val;
      else if (key == "domain") e.domain = val;
      else if (key == "split") e.split = val;
      else throw DataError("manifest: unknown key: " + key);
    }
    if (e.path.empty()) throw DataError("manifest: entry without path");
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace spectralx
