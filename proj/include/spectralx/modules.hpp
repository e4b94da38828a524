#pragma once

#include <string>
#include <utility>
#include <vector>

#include "spectralx/nn.hpp"
#include "spectralx/params.hpp"
#include "spectralx/rng.hpp"
#include "spectralx/tensor.hpp"

namespace spectralx {

inline constexpr real kInitStd = 0.02;
// Sentinel stdev: scale the layer by 1/sqrt(fan_in) instead of a fixed value.
// Fixed 0.02 on both sides of a dot product drives attention scores to ~4e-4,
// i.e. uniform softmax; fan-in scaling keeps activations O(1) so attention
// carries signal from the first step.
inline constexpr real kFanInStd = -1.0;

inline real resolve_std(real stdev, int64_t fan_in) {
  return stdev == kFanInStd ? 1.0 / std::sqrt(static_cast<real>(fan_in)) : stdev;
}

// Affine map y = x W + b on row-major token matrices. stdev 0 gives an
// all-zero weight (used for gates and safe-insertion factors).
class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& prefix, int64_t in, int64_t out, Rng& rng,
         real stdev = kInitStd, bool bias = true) {
    const real s = resolve_std(stdev, in);
    w_ = store.add(prefix + ".weight",
                   s == 0.0 ? Tensor::zeros({in, out}) : Tensor::randn({in, out}, rng, s));
    if (bias) b_ = store.add(prefix + ".bias", Tensor::zeros({out}));
  }

  Tensor forward(const Tensor& x) const {
    Tensor y = matmul(x, w_);
    if (b_.defined()) y = y + b_;
    return y;
  }

  const Tensor& weight() const { return w_; }
  const Tensor& bias() const { return b_; }

 private:
  Tensor w_, b_;
};

class LayerNormM {
 public:
  LayerNormM() = default;
  LayerNormM(ParamStore& store, const std::string& prefix, int64_t dim) {
    gamma_ = store.add(prefix + ".gamma", Tensor::full({dim}, 1.0));
    beta_ = store.add(prefix + ".beta", Tensor::zeros({dim}));
  }
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma_, beta_); }

 private:
  Tensor gamma_, beta_;
};

// Two-layer perceptron with GELU, the transformer FFN.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& prefix, int64_t in, int64_t hidden, int64_t out,
      Rng& rng, real stdev = kInitStd)
      : fc1_(store, prefix + ".fc1", in, hidden, rng, stdev),
        fc2_(store, prefix + ".fc2", hidden, out, rng, stdev) {}
  Tensor forward(const Tensor& x) const { return fc2_.forward(gelu(fc1_.forward(x))); }

 private:
  Linear fc1_, fc2_;
};

// Multi-head attention over 2-D token matrices. Queries come from a
// model_dim stream; keys/values may come from a stream of different width
// (cross-attention); per-head splitting happens along columns.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& prefix, int64_t model_dim,
                     int64_t kv_dim, int64_t heads, Rng& rng, real stdev = kFanInStd)
      : heads_(heads), model_dim_(model_dim) {
    if (heads <= 0 || model_dim % heads != 0) {
      throw ShapeError("attention: head count must divide model dim");
    }
    wq_ = Linear(store, prefix + ".wq", model_dim, model_dim, rng, stdev);
    wk_ = Linear(store, prefix + ".wk", kv_dim, model_dim, rng, stdev);
    wv_ = Linear(store, prefix + ".wv", kv_dim, model_dim, rng, stdev);
    wo_ = Linear(store, prefix + ".wo", model_dim, model_dim, rng, stdev);
  }

  Tensor forward(const Tensor& q_in, const Tensor& kv_in) const {
    Tensor q = wq_.forward(q_in);
    Tensor k = wk_.forward(kv_in);
    Tensor v = wv_.forward(kv_in);
    const int64_t hd = model_dim_ / heads_;
    std::vector<Tensor> outs;
    last_attn_.clear();
    outs.reserve(static_cast<size_t>(heads_));
    for (int64_t h = 0; h < heads_; ++h) {
      auto [o, attn] = scaled_dot_attention(narrow(q, 1, h * hd, hd), narrow(k, 1, h * hd, hd),
                                            narrow(v, 1, h * hd, hd));
      outs.push_back(o);
      last_attn_.push_back(attn.detach());
    }
    return wo_.forward(concat(outs, 1));
  }

  Tensor forward(const Tensor& x) const { return forward(x, x); }

  // Per-head attention weights from the most recent forward (inspection only).
  const std::vector<Tensor>& last_attention() const { return last_attn_; }

 private:
  Linear wq_, wk_, wv_, wo_;
  int64_t heads_ = 0, model_dim_ = 0;
  mutable std::vector<Tensor> last_attn_;
};

class Conv2dM {
 public:
  Conv2dM() = default;
  Conv2dM(ParamStore& store, const std::string& prefix, int64_t in_ch, int64_t out_ch, int64_t k,
          int64_t stride, int64_t pad, Rng& rng, real stdev = kFanInStd)
      : stride_(stride), pad_(pad) {
    const real s = resolve_std(stdev, in_ch * k * k);
    w_ = store.add(prefix + ".weight", Tensor::randn({out_ch, in_ch, k, k}, rng, s));
    b_ = store.add(prefix + ".bias", Tensor::zeros({out_ch}));
  }
  Tensor forward(const Tensor& x) const { return conv2d(x, w_, b_, stride_, pad_); }

 private:
  Tensor w_, b_;
  int64_t stride_ = 1, pad_ = 0;
};

class Conv1dM {
 public:
  Conv1dM() = default;
  Conv1dM(ParamStore& store, const std::string& prefix, int64_t in_ch, int64_t out_ch, int64_t k,
          int64_t stride, int64_t pad, Rng& rng, real stdev = kFanInStd)
      : stride_(stride), pad_(pad) {
    const real s = resolve_std(stdev, in_ch * k);
    w_ = store.add(prefix + ".weight", Tensor::randn({out_ch, in_ch, k}, rng, s));
    b_ = store.add(prefix + ".bias", Tensor::zeros({out_ch}));
  }
  Tensor forward(const Tensor& x) const { return conv1d(x, w_, b_, stride_, pad_); }

 private:
  Tensor w_, b_;
  int64_t stride_ = 1, pad_ = 0;
};

// Batch normalization module holding affine parameters plus running-stat
// buffers; works for NCHW (2-D) and NCL (1-D) inputs alike.
class BatchNormM {
 public:
  BatchNormM() = default;
  BatchNormM(ParamStore& store, const std::string& prefix, int64_t channels, real momentum = 0.1)
      : momentum_(momentum) {
    gamma_ = store.add(prefix + ".gamma", Tensor::full({channels}, 1.0));
    beta_ = store.add(prefix + ".beta", Tensor::zeros({channels}));
    running_mean_ = store.add(prefix + ".running_mean", Tensor::zeros({channels}), /*buffer=*/true);
    running_var_ = store.add(prefix + ".running_var", Tensor::full({channels}, 1.0),
                             /*buffer=*/true);
  }

  Tensor forward(const Tensor& x, bool training) const {
    auto res = batch_norm(x, gamma_, beta_, running_mean_.vals(), running_var_.vals(), training);
    if (training) {
      auto& rm = running_mean_.vals_mut();
      auto& rv = running_var_.vals_mut();
      for (size_t i = 0; i < rm.size(); ++i) {
        rm[i] = (1.0 - momentum_) * rm[i] + momentum_ * res.batch_mean[i];
        rv[i] = (1.0 - momentum_) * rv[i] + momentum_ * res.batch_var[i];
      }
    }
    return res.y;
  }

 private:
  Tensor gamma_, beta_;
  mutable Tensor running_mean_, running_var_;
  real momentum_ = 0.1;
};

}  // namespace spectralx
