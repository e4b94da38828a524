#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "spectralx/aomoa.hpp"
#include "spectralx/are_adapter.hpp"
#include "spectralx/dataio.hpp"
#include "spectralx/hypert.hpp"
#include "spectralx/modules.hpp"
#include "spectralx/profiles.hpp"

namespace spectralx {

// Which trainable machinery the model carries; mirrors the ablation rows.
// are implies aomoa implies hypert (checked at construction).
struct ModelFlags {
  bool train_hypert = true;  // tokenizer trainable (it is always present)
  bool use_aomoa = true;
  bool use_are = true;
  int64_t lora_rank = 0;  // > 0: low-rank deltas on encoder attention projections

  void validate() const {
    if (use_are && !use_aomoa) throw ValueError("flags: are requires aomoa");
    if (use_aomoa && !train_hypert) throw ValueError("flags: aomoa requires hypert");
    if (lora_rank > 0 && (train_hypert || use_aomoa || use_are)) {
      throw ValueError("flags: low-rank baseline excludes the adapter stack");
    }
    if (lora_rank < 0) throw ValueError("flags: negative rank");
  }
};

// Linear with an optional additive low-rank delta A*B (B zero-initialized,
// so the wrapped map starts exactly at the base map).
class LoraLinear {
 public:
  LoraLinear() = default;
  LoraLinear(ParamStore& store, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
             int64_t rank)
      : base_(store, prefix, in, out, rng), rank_(rank) {
    if (rank > 0) {
      a_ = store.add(prefix + ".lora_a", Tensor::randn({in, rank}, rng, kInitStd));
      b_ = store.add(prefix + ".lora_b", Tensor::zeros({rank, out}));
    }
  }
  Tensor forward(const Tensor& x) const {
    Tensor y = base_.forward(x);
    if (rank_ > 0) y = y + matmul(matmul(x, a_), b_);
    return y;
  }

 private:
  Linear base_;
  Tensor a_, b_;
  int64_t rank_ = 0;
};

// Pre-norm transformer block over 2-D token matrices, with optional low-rank
// attention deltas. The attention here is single-matrix multi-head identical
// in structure to MultiHeadAttention but built on LoraLinear.
class TransformerBlock {
 public:
  TransformerBlock(ParamStore& store, const std::string& prefix, int64_t dim, int64_t heads,
                   real mlp_ratio, Rng& rng, int64_t lora_rank = 0)
      : heads_(heads), dim_(dim) {
    if (dim % heads != 0) throw ShapeError("block: heads must divide width");
    ln1_ = LayerNormM(store, prefix + ".ln1", dim);
    ln2_ = LayerNormM(store, prefix + ".ln2", dim);
    wq_ = LoraLinear(store, prefix + ".attn.wq", dim, dim, rng, lora_rank);
    wk_ = LoraLinear(store, prefix + ".attn.wk", dim, dim, rng, lora_rank);
    wv_ = LoraLinear(store, prefix + ".attn.wv", dim, dim, rng, lora_rank);
    wo_ = LoraLinear(store, prefix + ".attn.wo", dim, dim, rng, lora_rank);
    const int64_t hidden = static_cast<int64_t>(mlp_ratio * static_cast<real>(dim));
    mlp_ = Mlp(store, prefix + ".mlp", dim, hidden, dim, rng);
  }

  Tensor attention(const Tensor& x) const {
    Tensor q = wq_.forward(x), k = wk_.forward(x), v = wv_.forward(x);
    const int64_t hd = dim_ / heads_;
    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads_));
    for (int64_t h = 0; h < heads_; ++h) {
      auto [o, attn] = scaled_dot_attention(narrow(q, 1, h * hd, hd), narrow(k, 1, h * hd, hd),
                                            narrow(v, 1, h * hd, hd));
      outs.push_back(o);
    }
    return wo_.forward(concat(outs, 1));
  }

  // AoMoA reads the same normalized stream the FFN consumes and its delta is
  // added to the FFN output before the residual.
  Tensor forward(const Tensor& x, const AoMoA* aomoa, bool training, Rng& rng) const {
    Tensor y = x + attention(ln1_.forward(x));
    Tensor h = ln2_.forward(y);
    Tensor f = mlp_.forward(h);
    if (aomoa) f = AoMoA::inject(f, aomoa->forward(h, training, rng));
    return y + f;
  }

 private:
  LayerNormM ln1_, ln2_;
  LoraLinear wq_, wk_, wv_, wo_;
  Mlp mlp_;
  int64_t heads_ = 0, dim_ = 0;
};

// Uniform sample of floor(ratio*L) masked indices without replacement;
// both index lists are returned sorted.
inline std::pair<std::vector<int64_t>, std::vector<int64_t>> mask_tokens(int64_t L, real ratio,
                                                                         Rng& rng) {
  if (ratio <= 0.0 || ratio >= 1.0) throw ValueError("mask: ratio must be in (0,1)");
  const int64_t m = static_cast<int64_t>(ratio * static_cast<real>(L));
  if (m >= L) throw ValueError("mask: no visible tokens left");
  std::vector<int64_t> idx(static_cast<size_t>(L));
  for (int64_t i = 0; i < L; ++i) idx[static_cast<size_t>(i)] = i;
  shuffle(idx, rng);
  std::vector<int64_t> masked(idx.begin(), idx.begin() + m);
  std::vector<int64_t> visible(idx.begin() + m, idx.end());
  std::sort(masked.begin(), masked.end());
  std::sort(visible.begin(), visible.end());
  return {visible, masked};
}

struct EncodeResult {
  Tensor final;              // tokens x 2r
  std::vector<Tensor> sites;  // hidden states at each adapter site (stage >= 2)
};

// The full model: tokenizer, adapted encoder, reconstruction decoder, and
// segmentation head, plus the per-stage freeze policies.
class SpectralXModel {
 public:
  SpectralXModel(const Profile& profile, const ModelFlags& flags, uint64_t init_seed)
      : prof_(profile), flags_(flags) {
    prof_.validate();
    flags.validate();
    Rng rng(init_seed);

    hypert_ = std::make_unique<HyperTokenizer>(store_, "hypert", prof_.tok, rng);

    const int64_t width = prof_.bb.width;
    for (int64_t i = 1; i <= prof_.bb.depth; ++i) {
      const std::string bp = "encoder.block." + std::to_string(i);
      enc_blocks_.emplace_back(store_, bp, width, prof_.bb.heads, prof_.bb.mlp_ratio, rng,
                               flags.lora_rank);
      const bool site = is_site(prof_.bb.aomoa_sites, i);
      if (site && flags.use_aomoa) {
        enc_aomoa_.push_back(std::make_unique<AoMoA>(store_, bp + ".aomoa", prof_.tok.r,
                                                     prof_.bb.n_adapters, prof_.bb.top_k, rng));
      } else {
        enc_aomoa_.push_back(nullptr);
      }
      if (site && flags.use_are) {
        enc_are_.push_back(std::make_unique<AreAdapter>(store_, bp + ".are", prof_.tok, rng));
      } else {
        enc_are_.push_back(nullptr);
      }
    }

    const int64_t dw = prof_.bb.dec_width;
    dec_embed_ = Linear(store_, "decoder.embed", width, dw, rng);
    mask_token_ = store_.add("decoder.mask_token", Tensor::randn({1, dw}, rng, kInitStd));
    for (int64_t i = 1; i <= prof_.bb.dec_depth; ++i) {
      const std::string bp = "decoder.block." + std::to_string(i);
      dec_blocks_.emplace_back(store_, bp, dw, prof_.bb.heads, prof_.bb.mlp_ratio, rng);
      if (is_site(prof_.bb.dec_sites, i) && flags.use_aomoa) {
        dec_aomoa_.push_back(std::make_unique<AoMoA>(store_, bp + ".aomoa", dw / 2,
                                                     prof_.bb.n_adapters, prof_.bb.top_k, rng));
      } else {
        dec_aomoa_.push_back(nullptr);
      }
    }
    const int64_t p = patch_side();
    // head layers scale by fan-in: their inputs must produce O(1) predictions
    // and logits from the first step (the blocks above stay at kInitStd,
    // standing in for pretrained weights)
    patch_head_ = Linear(store_, "decoder.patch_head", dw, p * p * prof_.tok.bands, rng,
                         kFanInStd);

    const int64_t hw = prof_.tok.r;
    lateral_ = Linear(store_, "head.lateral", width, hw, rng, kFanInStd);
    fuse_conv_ = Conv2dM(store_, "head.fuse", hw, hw, 3, 1, 1, rng);
    // Zero classifier: logits start at exactly zero whatever scale the adapted
    // features arrive at, so stage 2 opens at uniform-prediction loss instead
    // of a hot-logit spike that would blast the tuned tokenizer apart.
    classifier_ = Linear(store_, "head.classifier", hw, prof_.bb.classes, rng, 0.0);

    pe_enc_ = sincos_embed_2d(prof_.tok.token_side(), width);
    pe_dec_ = sincos_embed_2d(prof_.tok.token_side(), dw);

    site_gamma_ = Tensor::full({width}, 1.0);
    site_beta_ = Tensor::zeros({width});
  }

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Profile& profile() const { return prof_; }
  const ModelFlags& flags() const { return flags_; }
  const HyperTokenizer& tokenizer() const { return *hypert_; }

  int64_t patch_side() const { return prof_.tok.image_size / prof_.tok.token_side(); }

  // Runtime switch: with adapters disabled the forward pass is structurally
  // the frozen backbone + head alone (safe-insertion comparisons).
  void set_adapters_enabled(bool on) { adapters_enabled_ = on; }
  bool adapters_enabled() const { return adapters_enabled_; }

  EncodeResult encode(const Tensor& tokens, int stage, const TokenizerOutput* sem, bool training,
                      Rng& rng) const {
    if (stage < 1 || stage > 3) throw ValueError("encode: stage must be 1, 2, or 3");
    if (stage >= 2 && sem == nullptr) {
      throw ValueError("encode: semantic features required in stages 2-3");
    }
    EncodeResult res;
    Tensor x = tokens;
    for (int64_t i = 1; i <= prof_.bb.depth; ++i) {
      const size_t bi = static_cast<size_t>(i - 1);
      const AoMoA* moa = adapters_enabled_ ? enc_aomoa_[bi].get() : nullptr;
      x = enc_blocks_[bi].forward(x, moa, training, rng);
      if (is_site(prof_.bb.aomoa_sites, i)) {
        if (stage >= 2 && adapters_enabled_ && enc_are_[bi]) {
          x = enc_are_[bi]->forward(x, sem->z_spa, sem->z_spe, training);
        }
        res.sites.push_back(x);
      }
    }
    res.final = x;
    return res;
  }

  // Stage-1 masked reconstruction loss for one image.
  Tensor reconstruction_loss(const Tensor& image, Rng& mask_rng, Rng& route_rng,
                             bool training = true) const {
    TokenizerOutput tok = hypert_->forward(image, training);
    const int64_t L = prof_.tok.L;
    Tensor x = tok.t_att + pe_enc_;
    auto [visible, masked] = mask_tokens(L, prof_.bb.mask_ratio, mask_rng);
    if (masked.empty()) throw ValueError("stage1: mask ratio leaves nothing to reconstruct");

    Tensor xv = gather_rows(x, visible);
    EncodeResult enc = encode(xv, 1, nullptr, training, route_rng);

    Tensor d = dec_embed_.forward(enc.final);  // V x dw
    Tensor mask_rep = gather_rows(mask_token_, std::vector<int64_t>(masked.size(), 0));
    Tensor full = scatter_rows(d, visible, L) + scatter_rows(mask_rep, masked, L);
    Tensor y = full + pe_dec_;
    for (int64_t i = 1; i <= prof_.bb.dec_depth; ++i) {
      const size_t bi = static_cast<size_t>(i - 1);
      const AoMoA* moa = adapters_enabled_ ? dec_aomoa_[bi].get() : nullptr;
      y = dec_blocks_[bi].forward(y, moa, training, route_rng);
    }
    Tensor pred = patch_head_.forward(y);  // L x p*p*bands

    Tensor pred_masked = gather_rows(pred, masked);
    Tensor target = normalized_patches(image, masked);
    Tensor diff = pred_masked - target;
    return mean(diff * diff);
  }

  // Stage-2/3 per-pixel class logits, [1, classes, H, W].
  Tensor segment_logits(const Tensor& image, bool training, Rng& route_rng) const {
    TokenizerOutput tok = hypert_->forward(image, training);
    Tensor x = tok.t_att + pe_enc_;
    EncodeResult enc = encode(x, training ? 2 : 3, &tok, training, route_rng);
    if (enc.sites.empty()) throw ValueError("segment: no adapter sites recorded");

    // Site features ride the residual stream at whatever scale adaptation has
    // driven them to; normalize per token (plain, no affine parameters) so the
    // head's conditioning never depends on training history.
    Tensor summed;
    for (const Tensor& s : enc.sites) {
      Tensor lat = lateral_.forward(layer_norm(s, site_gamma_, site_beta_));  // L x hw
      summed = summed.defined() ? summed + lat : lat;
    }
    const int64_t t = prof_.tok.token_side();
    const int64_t hw = prof_.tok.r;
    Tensor grid = reshape(permute(reshape(summed, {t, t, hw}), {2, 0, 1}), {1, hw, t, t});
    Tensor fused = relu(fuse_conv_.forward(grid));
    Tensor feats = transpose(reshape(fused, {hw, prof_.tok.L}));  // L x hw
    Tensor logits_tok = classifier_.forward(feats);               // L x classes
    Tensor maps = reshape(transpose(logits_tok), {1, prof_.bb.classes, t, t});
    return bilinear_resize(maps, prof_.tok.image_size, prof_.tok.image_size);
  }

  // Deterministic inference: argmax segmentation map for one image.
  SegmentationMap predict(const SpectralImage& img) const {
    NoGradGuard ng;
    Rng rng(0);  // eval path draws no routing noise
    Tensor logits = segment_logits(image_to_tensor(img), false, rng);
    const auto am = argmax_axis(reshape(logits, {prof_.bb.classes,
                                                 prof_.tok.image_size * prof_.tok.image_size}),
                                0);
    SegmentationMap m;
    m.height = m.width = prof_.tok.image_size;
    m.labels.reserve(am.size());
    for (int64_t v : am) m.labels.push_back(static_cast<uint16_t>(v));
    return m;
  }

  // Per-patch-normalized reconstruction targets for the masked rows.
  Tensor normalized_patches(const Tensor& image, const std::vector<int64_t>& rows) const {
    const int64_t p = patch_side(), t = prof_.tok.token_side(), d = prof_.tok.bands;
    const int64_t cols = p * p * d;
    std::vector<real> out(rows.size() * static_cast<size_t>(cols));
    const auto& v = image.vals();
    const int64_t H = prof_.tok.image_size;
    for (size_t ri = 0; ri < rows.size(); ++ri) {
      const int64_t ty = rows[ri] / t, tx = rows[ri] % t;
      real* dst = out.data() + ri * static_cast<size_t>(cols);
      int64_t k = 0;
      for (int64_t b = 0; b < d; ++b)
        for (int64_t py = 0; py < p; ++py)
          for (int64_t px = 0; px < p; ++px)
            dst[k++] = v[static_cast<size_t>((b * H + ty * p + py) * H + tx * p + px)];
      real mu = 0.0;
      for (int64_t i = 0; i < cols; ++i) mu += dst[i];
      mu /= static_cast<real>(cols);
      real var = 0.0;
      for (int64_t i = 0; i < cols; ++i) var += (dst[i] - mu) * (dst[i] - mu);
      var /= static_cast<real>(cols);
      const real inv = 1.0 / std::sqrt(var + 1e-6);
      for (int64_t i = 0; i < cols; ++i) dst[i] = (dst[i] - mu) * inv;
    }
    return Tensor::from({static_cast<int64_t>(rows.size()), cols}, std::move(out));
  }

  // Stage freeze policies. The backbone core (transformer blocks, decoder
  // embed) stays frozen always; the segmentation head trains in stage 2 for
  // every arm; the low-rank baseline trains only its factors plus the head.
  void apply_stage_freeze(int stage) {
    const ModelFlags f = flags_;
    store_.apply_freeze([stage, f](const std::string& name) {
      const bool is_hypert = name.rfind("hypert.", 0) == 0;
      const bool is_aomoa = name.find(".aomoa.") != std::string::npos;
      const bool is_are = name.find(".are.") != std::string::npos;
      const bool is_enc = name.rfind("encoder.", 0) == 0;
      const bool is_head = name.rfind("head.", 0) == 0;
      const bool is_lora = name.find(".lora_") != std::string::npos;
      if (f.lora_rank > 0) return is_lora || is_head;
      if (stage == 1) {
        return (f.train_hypert && is_hypert) || is_aomoa || name == "decoder.mask_token" ||
               name.rfind("decoder.patch_head.", 0) == 0;
      }
      return (f.train_hypert && is_hypert) || (is_enc && is_aomoa) || is_are || is_head;
    });
  }

 private:
  static bool is_site(const std::vector<int64_t>& sites, int64_t i) {
    return std::find(sites.begin(), sites.end(), i) != sites.end();
  }

  Profile prof_;
  ModelFlags flags_;
  ParamStore store_;
  std::unique_ptr<HyperTokenizer> hypert_;
  std::vector<TransformerBlock> enc_blocks_;
  std::vector<std::unique_ptr<AoMoA>> enc_aomoa_;
  std::vector<std::unique_ptr<AreAdapter>> enc_are_;
  Linear dec_embed_;
  Tensor mask_token_;
  std::vector<TransformerBlock> dec_blocks_;
  std::vector<std::unique_ptr<AoMoA>> dec_aomoa_;
  Linear patch_head_;
  Linear lateral_;
  Conv2dM fuse_conv_;
  Linear classifier_;
  Tensor pe_enc_, pe_dec_;
  Tensor site_gamma_, site_beta_;  // constant affine for the head-side norm
  bool adapters_enabled_ = true;
};

}  // namespace spectralx
