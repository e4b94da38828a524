#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "spectralx/common.hpp"

namespace spectralx {

inline int64_t isqrt_exact(int64_t n, const char* what) {
  const int64_t r = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(n))));
  if (r * r != n) throw ValueError(std::string(what) + " must be a perfect square");
  return r;
}

struct TokenizerProfile {
  int64_t image_size = 32;
  int64_t bands = 8;
  std::vector<real> wavelengths = {443, 490, 560, 665, 705, 842, 1610, 2190};
  int64_t C = 32;   // semantic feature width
  int64_t S = 64;   // spatial positions (grid side squared)
  int64_t L = 16;   // attribute tokens
  int64_t r = 32;   // per-attribute channel width; backbone width is 2r
  int64_t window = 4;
  int64_t heads = 4;

  int64_t grid_side() const { return isqrt_exact(S, "S"); }
  int64_t token_side() const { return isqrt_exact(L, "L"); }

  void validate() const {
    const int64_t s = grid_side();
    (void)token_side();
    if (image_size % s != 0) throw ValueError("profile: image size not divisible by grid side");
    int64_t stride = image_size / s;
    while (stride > 1) {
      if (stride % 2 != 0) throw ValueError("profile: total stride must be a power of two");
      stride /= 2;
    }
    if (s % window != 0) throw ValueError("profile: window must divide the grid side");
    if (C % 4 != 0) throw ValueError("profile: C must be divisible by 4");
    if (C % heads != 0 || S % heads != 0 || r % heads != 0) {
      throw ValueError("profile: heads must divide C, S, and r");
    }
    if (r % 4 != 0) throw ValueError("profile: r must be divisible by 4");
    if (static_cast<int64_t>(wavelengths.size()) != bands || bands < 2) {
      throw ValueError("profile: need >= 2 wavelengths matching the band count");
    }
    for (size_t i = 1; i < wavelengths.size(); ++i) {
      if (!(wavelengths[i] > wavelengths[i - 1])) {
        throw ValueError("profile: wavelengths must increase strictly");
      }
    }
  }
};

struct BackboneProfile {
  int64_t depth = 4;
  int64_t width = 64;  // must equal 2r
  int64_t heads = 4;
  real mlp_ratio = 2.0;
  std::vector<int64_t> aomoa_sites = {2, 4};  // 1-based block indices
  int64_t dec_depth = 2;
  int64_t dec_width = 32;
  std::vector<int64_t> dec_sites = {1, 2};
  real mask_ratio = 0.75;
  int64_t classes = 4;
  int64_t n_adapters = 4;
  int64_t top_k = 2;

  void validate(const TokenizerProfile& tok) const {
    if (width != 2 * tok.r) throw ValueError("profile: backbone width must equal 2r");
    if (depth < 1 || dec_depth < 1) throw ValueError("profile: empty backbone");
    if (width % heads != 0) throw ValueError("profile: heads must divide width");
    if (mask_ratio <= 0.0 || mask_ratio >= 1.0) throw ValueError("profile: mask ratio in (0,1)");
    if (classes < 2) throw ValueError("profile: need at least 2 classes");
    if (top_k < 1 || top_k > n_adapters) throw ValueError("profile: K must be in [1, N_a]");
    for (int64_t s : aomoa_sites) {
      if (s < 1 || s > depth) throw ValueError("profile: adapter site outside encoder depth");
    }
    for (int64_t s : dec_sites) {
      if (s < 1 || s > dec_depth) throw ValueError("profile: adapter site outside decoder depth");
    }
  }
};

struct Profile {
  std::string name;
  TokenizerProfile tok;
  BackboneProfile bb;

  void validate() const {
    tok.validate();
    bb.validate(tok);
  }

  static Profile desk() {
    Profile p;
    p.name = "desk";
    return p;  // defaults above are the desk profile
  }

  static Profile full() {
    Profile p;
    p.name = "full";
    p.tok.image_size = 224;
    p.tok.bands = 10;
    p.tok.wavelengths = {443, 490, 560, 665, 705, 740, 783, 842, 1610, 2190};
    p.tok.C = 512;
    p.tok.S = 784;
    p.tok.L = 196;
    p.tok.r = 512;
    p.tok.window = 7;
    p.tok.heads = 8;
    p.bb.depth = 24;
    p.bb.width = 1024;
    p.bb.heads = 16;
    p.bb.mlp_ratio = 4.0;
    p.bb.aomoa_sites = {6, 12, 18, 24};
    p.bb.dec_depth = 4;
    p.bb.dec_width = 512;
    p.bb.dec_sites = {1, 2, 3, 4};
    p.bb.classes = 8;
    return p;
  }

  static Profile by_name(const std::string& name) {
    if (name == "desk") return desk();
    if (name == "full") return full();
    throw ValueError("unknown profile: " + name);
  }
};

}  // namespace spectralx
