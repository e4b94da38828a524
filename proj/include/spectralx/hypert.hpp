#pragma once

#include <string>
#include <vector>

#include "spectralx/modules.hpp"
#include "spectralx/profiles.hpp"

namespace spectralx {

// 2-D sine-cosine grid embedding: each of the side*side cells gets
// [embed(x) | embed(y)], dim/2 columns per coordinate.
inline Tensor sincos_embed_2d(int64_t side, int64_t dim) {
  if (dim % 2 != 0) throw ValueError("sincos_embed_2d: dim must be even");
  std::vector<real> coords(static_cast<size_t>(side));
  for (int64_t i = 0; i < side; ++i) coords[static_cast<size_t>(i)] = static_cast<real>(i);
  Tensor ex = sincos_embed_1d(coords, dim / 2);  // side x dim/2
  const auto& e = ex.vals();
  const int64_t half = dim / 2;
  std::vector<real> out(static_cast<size_t>(side * side * dim));
  for (int64_t y = 0; y < side; ++y)
    for (int64_t x = 0; x < side; ++x) {
      real* row = out.data() + (y * side + x) * dim;
      for (int64_t c = 0; c < half; ++c) {
        row[c] = e[static_cast<size_t>(x * half + c)];
        row[half + c] = e[static_cast<size_t>(y * half + c)];
      }
    }
  return Tensor::from({side * side, dim}, std::move(out));
}

// Wavelength position embedding: sincos rows for the d wavelengths (dim
// columns), linearly interpolated along the row axis to target_rows.
inline Tensor spectral_pos_embed(const std::vector<real>& wavelengths, int64_t target_rows,
                                 int64_t dim) {
  if (wavelengths.size() < 2) throw ValueError("spectral_pos_embed: need >= 2 wavelengths");
  Tensor base = sincos_embed_1d(wavelengths, dim);  // d x dim
  return interpolate_linear(base, target_rows, 0);  // target_rows x dim
}

struct TokenizerOutput {
  Tensor t_att;  // L x 2r
  Tensor z_spa;  // S x C
  Tensor z_spe;  // C x S
};

// Hyper Tokenizer: CNN downsampling, local/global attribute perception,
// position embeddings, and cross-attention of learned queries.
class HyperTokenizer {
 public:
  HyperTokenizer(ParamStore& store, const std::string& prefix, const TokenizerProfile& prof,
                 Rng& rng)
      : prof_(prof) {
    prof.validate();
    const int64_t s = prof.grid_side();
    int64_t stride = prof.image_size / s;
    int64_t stages = 0;
    while ((1 << stages) < stride) ++stages;

    int64_t in_ch = prof.bands;
    for (int64_t i = 0; i < stages; ++i) {
      const int64_t out_ch = prof.C >> (stages - 1 - i);
      const std::string sp = prefix + ".down." + std::to_string(i);
      // 4x4 halving convolutions: a 3x3 stride-2 kernel cannot tile an even
      // extent exactly, which the convolution contract requires
      convs_.emplace_back(store, sp + ".conv", in_ch, out_ch, 4, 2, 1, rng);
      norms_.emplace_back(store, sp + ".bn", out_ch);
      in_ch = out_ch;
    }

    local_ = MultiHeadAttention(store, prefix + ".local", prof.C, prof.C, prof.heads, rng);
    global_ = MultiHeadAttention(store, prefix + ".global", prof.S, prof.S, prof.heads, rng);
    cross_spa_ = MultiHeadAttention(store, prefix + ".cross_spa", prof.r, prof.C, prof.heads, rng);
    cross_spe_ = MultiHeadAttention(store, prefix + ".cross_spe", prof.r, prof.S, prof.heads, rng);
    queries_ = store.add(prefix + ".queries", Tensor::randn({prof.L, 2 * prof.r}, rng, kInitStd));
    ffn_ = Mlp(store, prefix + ".ffn", 2 * prof.r, 4 * 2 * prof.r, 2 * prof.r, rng, kFanInStd);

    pe_spa_ = sincos_embed_2d(s, prof.C);                            // S x C
    pe_spe_ = spectral_pos_embed(prof.wavelengths, prof.C, prof.S);  // C x S

    // window index lists over the s x s grid
    const int64_t w = prof.window;
    for (int64_t wy = 0; wy < s / w; ++wy)
      for (int64_t wx = 0; wx < s / w; ++wx) {
        std::vector<int64_t> idx;
        idx.reserve(static_cast<size_t>(w * w));
        for (int64_t dy = 0; dy < w; ++dy)
          for (int64_t dx = 0; dx < w; ++dx) idx.push_back((wy * w + dy) * s + (wx * w + dx));
        windows_.push_back(std::move(idx));
      }
  }

  // image: [1, bands, H, W]
  Tensor downsample(const Tensor& image, bool training) const {
    if (image.ndim() != 4 || image.dim(0) != 1 || image.dim(1) != prof_.bands ||
        image.dim(2) != prof_.image_size || image.dim(3) != prof_.image_size) {
      throw ShapeError("tokenizer: image does not match profile");
    }
    Tensor x = image;
    for (size_t i = 0; i < convs_.size(); ++i) {
      x = gelu(norms_[i].forward(convs_[i].forward(x), training));
    }
    return x;  // [1, C, s, s]
  }

  std::pair<Tensor, Tensor> perceive(const Tensor& grid) const {
    const int64_t s = prof_.grid_side();
    Tensor z = transpose(reshape(grid, {prof_.C, prof_.S}));  // S x C

    // local windowed self-attention, residual
    Tensor attn_sum;
    for (const auto& idx : windows_) {
      Tensor zw = gather_rows(z, idx);
      Tensor aw = local_.forward(zw);
      Tensor scattered = scatter_rows(aw, idx, prof_.S);
      attn_sum = attn_sum.defined() ? attn_sum + scattered : scattered;
    }
    Tensor z_spa = z + attn_sum;

    // global channel self-attention on the transposed view, residual
    Tensor zt = transpose(z);  // C x S
    Tensor z_spe = zt + global_.forward(zt);
    (void)s;
    return {z_spa, z_spe};
  }

  Tensor match(const Tensor& z_spa, const Tensor& z_spe) const {
    Tensor q_spa = narrow(queries_, 1, 0, prof_.r);
    Tensor q_spe = narrow(queries_, 1, prof_.r, prof_.r);
    Tensor a_spa = cross_spa_.forward(q_spa, z_spa + pe_spa_);
    Tensor a_spe = cross_spe_.forward(q_spe, z_spe + pe_spe_);
    return ffn_.forward(concat({a_spa, a_spe}, 1));  // L x 2r
  }

  TokenizerOutput forward(const Tensor& image, bool training) const {
    Tensor grid = downsample(image, training);
    auto [z_spa, z_spe] = perceive(grid);
    Tensor t_att = match(z_spa, z_spe);
    return {t_att, z_spa, z_spe};
  }

  const TokenizerProfile& profile() const { return prof_; }
  const Tensor& pe_spa() const { return pe_spa_; }
  const Tensor& pe_spe() const { return pe_spe_; }
  const MultiHeadAttention& local_attention() const { return local_; }
  const MultiHeadAttention& cross_spa_attention() const { return cross_spa_; }
  const MultiHeadAttention& cross_spe_attention() const { return cross_spe_; }

 private:
  TokenizerProfile prof_;
  std::vector<Conv2dM> convs_;
  std::vector<BatchNormM> norms_;
  MultiHeadAttention local_, global_, cross_spa_, cross_spe_;
  Tensor queries_;
  Mlp ffn_;
  Tensor pe_spa_, pe_spe_;  // fixed, derived from the profile
  std::vector<std::vector<int64_t>> windows_;
};

}  // namespace spectralx
