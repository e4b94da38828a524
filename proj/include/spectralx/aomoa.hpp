#pragma once

#include <string>
#include <vector>

#include "spectralx/modules.hpp"

namespace spectralx {

enum class Attribute { spatial = 0, spectral = 1 };

struct RoutingDecision {
  Tensor weights;                              // tokens x N_a, rows sum to 1
  std::vector<std::vector<int64_t>> selected;  // per token: indices with nonzero weight
};

// Attribute-oriented Mixture of Adapters: channel split, shared down/up
// projections, per-attribute noisy top-K routing over a shared adapter
// bank, and a zero-initialized output scaling for safe insertion.
class AoMoA {
 public:
  AoMoA(ParamStore& store, const std::string& prefix, int64_t r, int64_t n_adapters, int64_t top_k,
        Rng& rng)
      : r_(r), n_adapters_(n_adapters), top_k_(top_k) {
    if (r % 4 != 0) throw ValueError("aomoa: r must be divisible by 4");
    if (top_k < 1 || top_k > n_adapters) throw ValueError("aomoa: K must be in [1, N_a]");
    const int64_t r4 = r / 4;
    w_down_ = store.add(prefix + ".w_down", Tensor::randn({r, r4}, rng, kInitStd));
    w_up_ = store.add(prefix + ".w_up", Tensor::randn({r4, r}, rng, kInitStd));
    // gating starts uniform: zero logits for every adapter
    for (const char* attr : {"spa", "spe"}) {
      gates_.push_back(store.add(prefix + ".gate_" + std::string(attr),
                                 Tensor::zeros({r4, n_adapters})));
      noises_.push_back(store.add(prefix + ".noise_" + std::string(attr),
                                  Tensor::zeros({r4, n_adapters})));
    }
    adapters_.reserve(static_cast<size_t>(n_adapters));
    for (int64_t i = 0; i < n_adapters; ++i) {
      adapters_.emplace_back(store, prefix + ".adapter." + std::to_string(i), r4, r4, r4, rng);
    }
    s1_ = store.add(prefix + ".s1", Tensor::zeros({2 * r}));
  }

  int64_t top_k() const { return top_k_; }
  int64_t n_adapters() const { return n_adapters_; }

  // tokens: already down-projected, tokens x (r/4).
  RoutingDecision route(const Tensor& tokens, Attribute attr, bool training, Rng& rng) const {
    const Tensor& gate = gates_[static_cast<size_t>(attr)];
    const Tensor& noise = noises_[static_cast<size_t>(attr)];
    Tensor h = matmul(tokens, gate);
    if (training) {
      Tensor eps = Tensor::randn({tokens.dim(0), n_adapters_}, rng);
      h = h + eps * softplus(matmul(tokens, noise));
    }
    Tensor weights = softmax(top_k_mask(h, top_k_), -1);

    RoutingDecision d;
    d.selected.resize(static_cast<size_t>(weights.dim(0)));
    const auto& wv = weights.vals();
    for (int64_t t = 0; t < weights.dim(0); ++t)
      for (int64_t a = 0; a < n_adapters_; ++a)
        if (wv[static_cast<size_t>(t * n_adapters_ + a)] > 0.0) {
          d.selected[static_cast<size_t>(t)].push_back(a);
        }
    d.weights = std::move(weights);
    return d;
  }

  // Weighted sum over selected adapters; adapters with zero weight for every
  // token are never evaluated, and each evaluated adapter sees only the rows
  // routed to it.
  Tensor mix(const Tensor& tokens, const RoutingDecision& d) const {
    const int64_t n = tokens.dim(0);
    if (d.weights.dim(0) != n || d.weights.dim(1) != n_adapters_) {
      throw ShapeError("aomoa: routing decision does not match tokens");
    }
    Tensor out;
    for (int64_t a = 0; a < n_adapters_; ++a) {
      std::vector<int64_t> rows;
      for (int64_t t = 0; t < n; ++t) {
        for (int64_t sel : d.selected[static_cast<size_t>(t)]) {
          if (sel == a) rows.push_back(t);
        }
      }
      if (rows.empty()) continue;
      Tensor xa = gather_rows(tokens, rows);
      Tensor ya = adapters_[static_cast<size_t>(a)].forward(xa);
      Tensor wa = narrow(gather_rows(d.weights, rows), 1, a, 1);  // rows x 1
      Tensor contrib = scatter_rows(ya * wa, rows, n);
      out = out.defined() ? out + contrib : contrib;
    }
    if (!out.defined()) out = Tensor::zeros({n, r_ / 4});
    return out;
  }

  // t_att: tokens x 2r -> adapter delta, tokens x 2r (already scaled by s1).
  Tensor forward(const Tensor& t_att, bool training, Rng& rng) const {
    if (t_att.ndim() != 2 || t_att.dim(1) != 2 * r_) {
      throw ShapeError("aomoa: expected tokens x 2r input");
    }
    Tensor halves[2] = {narrow(t_att, 1, 0, r_), narrow(t_att, 1, r_, r_)};
    Tensor mixed[2];
    for (int i = 0; i < 2; ++i) {
      Tensor down = matmul(halves[i], w_down_);
      RoutingDecision d = route(down, static_cast<Attribute>(i), training, rng);
      mixed[i] = matmul(mix(down, d), w_up_);
    }
    return concat({mixed[0], mixed[1]}, 1) * s1_;
  }

  // Residual injection into the FFN output.
  static Tensor inject(const Tensor& ffn_out, const Tensor& f_aomoa) {
    if (ffn_out.shape() != f_aomoa.shape()) throw ShapeError("aomoa: inject shape mismatch");
    return ffn_out + f_aomoa;
  }

  const Tensor& s1() const { return s1_; }

 private:
  int64_t r_, n_adapters_, top_k_;
  Tensor w_down_, w_up_;
  std::vector<Tensor> gates_, noises_;  // indexed by Attribute
  std::vector<Mlp> adapters_;
  Tensor s1_;
};

}  // namespace spectralx
