#pragma once

#include <string>
#include <utility>
#include <vector>

#include "spectralx/modules.hpp"
#include "spectralx/profiles.hpp"

namespace spectralx {

struct MatchMaps {
  Tensor m_spa;  // L x S raw scaled-dot scores
  Tensor m_spe;  // L x C
};

// Attribute-refined Adapter: match maps between current tokens and the
// tokenizer's semantic features, per-feature argmax token selection, a
// spatial (2-D) and a spectral (1-D) refinement path, and a residual
// adjustment gated by a zero-initialized scaling vector.
class AreAdapter {
 public:
  AreAdapter(ParamStore& store, const std::string& prefix, const TokenizerProfile& prof, Rng& rng)
      : prof_(prof) {
    const int64_t r = prof.r;
    q_spa_ = Linear(store, prefix + ".q_spa", r, r, rng, kFanInStd);
    k_spa_ = Linear(store, prefix + ".k_spa", prof.C, r, rng, kFanInStd);
    q_spe_ = Linear(store, prefix + ".q_spe", r, r, rng, kFanInStd);
    k_spe_ = Linear(store, prefix + ".k_spe", prof.S, r, rng, kFanInStd);
    ln_spa_ = LayerNormM(store, prefix + ".refine1.ln", r);
    conv_spa_ = Conv2dM(store, prefix + ".refine1.conv", r, r, 3, 1, 1, rng);
    bn_spa_ = BatchNormM(store, prefix + ".refine1.bn", r);
    ln_spe_ = LayerNormM(store, prefix + ".refine2.ln", r);
    conv_spe_ = Conv1dM(store, prefix + ".refine2.conv", r, r, 3, 1, 1, rng);
    bn_spe_ = BatchNormM(store, prefix + ".refine2.bn", r);
    s2_ = store.add(prefix + ".s2", Tensor::zeros({2 * r}));

    const int64_t s = prof.grid_side(), t = prof.token_side();
    if (s % t != 0) throw ValueError("are: grid side must be a multiple of the token side");
  }

  MatchMaps match_maps(const Tensor& t_spa, const Tensor& t_spe, const Tensor& z_spa,
                       const Tensor& z_spe) const {
    if (t_spa.dim(1) != prof_.r || t_spe.dim(1) != prof_.r) {
      throw ShapeError("are: token half width mismatch");
    }
    if (z_spa.dim(0) != prof_.S || z_spa.dim(1) != prof_.C || z_spe.dim(0) != prof_.C ||
        z_spe.dim(1) != prof_.S) {
      throw ShapeError("are: semantic feature shape mismatch");
    }
    const real scale = 1.0 / std::sqrt(static_cast<real>(prof_.r));
    MatchMaps m;
    m.m_spa = matmul(q_spa_.forward(t_spa), transpose(k_spa_.forward(z_spa))) * scale;  // L x S
    m.m_spe = matmul(q_spe_.forward(t_spe), transpose(k_spe_.forward(z_spe))) * scale;  // L x C
    return m;
  }

  // Per-column argmax over the token axis (ties to the lowest index).
  static std::vector<int64_t> select_indices(const Tensor& match_map) {
    return argmax_axis(match_map, 0);
  }

  std::pair<Tensor, Tensor> select_refine(const Tensor& t_spa, const Tensor& t_spe,
                                          const MatchMaps& maps, bool training) const {
    const int64_t r = prof_.r, L = prof_.L, C = prof_.C;
    const int64_t s = prof_.grid_side(), t = prof_.token_side();

    // spatial path: gather S rows, refine on the s x s grid, pool to sqrt(L)
    Tensor g_spa = gather_rows(t_spa, select_indices(maps.m_spa));  // S x r
    Tensor x = ln_spa_.forward(g_spa);
    x = reshape(permute(reshape(x, {s, s, r}), {2, 0, 1}), {1, r, s, s});
    x = relu(bn_spa_.forward(conv_spa_.forward(x), training));
    x = avg_pool2d(x, s / t, s / t);                            // 1 x r x t x t
    Tensor ref_spa = transpose(reshape(x, {r, L}));             // L x r

    // spectral path: gather C rows, refine along the sequence, resample to L
    Tensor g_spe = gather_rows(t_spe, select_indices(maps.m_spe));  // C x r
    Tensor y = ln_spe_.forward(g_spe);
    y = reshape(transpose(y), {1, r, C});
    y = relu(bn_spe_.forward(conv_spe_.forward(y), training));
    y = interpolate_linear(y, L, 2);                            // 1 x r x L
    Tensor ref_spe = transpose(reshape(y, {r, L}));             // L x r
    return {ref_spa, ref_spe};
  }

  Tensor adjust(const Tensor& t_att, const Tensor& ref_spa, const Tensor& ref_spe) const {
    if (t_att.dim(1) != 2 * prof_.r || ref_spa.dim(1) != prof_.r || ref_spe.dim(1) != prof_.r) {
      throw ShapeError("are: adjust shape mismatch");
    }
    return t_att + s2_ * concat({ref_spa, ref_spe}, 1);
  }

  Tensor forward(const Tensor& t_att, const Tensor& z_spa, const Tensor& z_spe,
                 bool training) const {
    Tensor t_spa = narrow(t_att, 1, 0, prof_.r);
    Tensor t_spe = narrow(t_att, 1, prof_.r, prof_.r);
    MatchMaps maps = match_maps(t_spa, t_spe, z_spa, z_spe);
    auto [ref_spa, ref_spe] = select_refine(t_spa, t_spe, maps, training);
    return adjust(t_att, ref_spa, ref_spe);
  }

  const Tensor& s2() const { return s2_; }

 private:
  TokenizerProfile prof_;
  Linear q_spa_, k_spa_, q_spe_, k_spe_;
  LayerNormM ln_spa_, ln_spe_;
  Conv2dM conv_spa_;
  Conv1dM conv_spe_;
  BatchNormM bn_spa_, bn_spe_;
  Tensor s2_;
};

}  // namespace spectralx
