#pragma once

#include <cmath>
#include <memory>
#include <utility>
#include <vector>

#include "spectralx/tensor.hpp"

namespace spectralx {

// Output length of a strided convolution; the geometry must tile exactly.
inline int64_t conv_out_len(int64_t in, int64_t kernel, int64_t stride, int64_t pad,
                            const char* what) {
  const int64_t span = in + 2 * pad - kernel;
  if (span < 0 || span % stride != 0) {
    throw ShapeError(std::string(what) + ": size " + std::to_string(in) +
                     " incompatible with kernel " + std::to_string(kernel) + " stride " +
                     std::to_string(stride) + " pad " + std::to_string(pad));
  }
  return span / stride + 1;
}

// 2-D convolution, x [N,Cin,H,W] * w [Cout,Cin,kh,kw] + b [Cout].
// im2col + GEMM; the unrolled patch matrix is kept for the backward pass.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride = 1,
                     int64_t pad = 0) {
  if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: x must be NCHW, w OIHW");
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Cin) throw ShapeError("conv2d: channel mismatch");
  if (b.numel() != Cout) throw ShapeError("conv2d: bias size");
  const int64_t Ho = conv_out_len(H, kh, stride, pad, "conv2d height");
  const int64_t Wo = conv_out_len(W, kw, stride, pad, "conv2d width");
  const int64_t P = Ho * Wo, K = Cin * kh * kw;

  auto cols = std::make_shared<std::vector<real>>(static_cast<size_t>(N * P * K), 0.0);
  const auto& xv = x.vals();
  for (int64_t n = 0; n < N; ++n) {
    real* col = cols->data() + n * P * K;
    for (int64_t oy = 0; oy < Ho; ++oy)
      for (int64_t ox = 0; ox < Wo; ++ox) {
        real* row = col + (oy * Wo + ox) * K;
        for (int64_t ci = 0; ci < Cin; ++ci)
          for (int64_t ky = 0; ky < kh; ++ky) {
            const int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= H) continue;
            const real* src = xv.data() + ((n * Cin + ci) * H + iy) * W;
            for (int64_t kx = 0; kx < kw; ++kx) {
              const int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= W) continue;
              row[(ci * kh + ky) * kw + kx] = src[ix];
            }
          }
      }
  }

  std::vector<real> out(static_cast<size_t>(N * Cout * P));
  {
    detail::ECMap Wm(w.vals().data(), Cout, K);
    for (int64_t n = 0; n < N; ++n) {
      detail::ECMap Cn(cols->data() + n * P * K, P, K);
      detail::EMap On(out.data() + n * Cout * P, Cout, P);
      On.noalias() = Wm * Cn.transpose();
    }
    const auto& bv = b.vals();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < Cout; ++c) {
        real* row = out.data() + (n * Cout + c) * P;
        for (int64_t p = 0; p < P; ++p) row[p] += bv[static_cast<size_t>(c)];
      }
  }

  return Tensor::make(
      "conv2d", {N, Cout, Ho, Wo}, std::move(out), {x, w, b},
      [x, w, b, cols, N, Cin, H, W, Cout, kh, kw, Ho, Wo, P, K, stride, pad](detail::Node& o) {
        if (w.node().requires_grad) {
          auto& pw = w.node();
          pw.ensure_grad();
          detail::EMap GW(pw.grad.data(), Cout, K);
          for (int64_t n = 0; n < N; ++n) {
            detail::ECMap G(o.grad.data() + n * Cout * P, Cout, P);
            detail::ECMap Cn(cols->data() + n * P * K, P, K);
            GW.noalias() += G * Cn;
          }
        }
        if (b.node().requires_grad) {
          auto& pb = b.node();
          pb.ensure_grad();
          for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < Cout; ++c) {
              const real* g = o.grad.data() + (n * Cout + c) * P;
              real s = 0.0;
              for (int64_t p = 0; p < P; ++p) s += g[p];
              pb.grad[static_cast<size_t>(c)] += s;
            }
        }
        if (x.node().requires_grad) {
          auto& px = x.node();
          px.ensure_grad();
          detail::ECMap Wm(w.vals().data(), Cout, K);
          std::vector<real> gcol(static_cast<size_t>(P * K));
          for (int64_t n = 0; n < N; ++n) {
            detail::ECMap G(o.grad.data() + n * Cout * P, Cout, P);
            detail::EMap GC(gcol.data(), P, K);
            GC.noalias() = G.transpose() * Wm;
            for (int64_t oy = 0; oy < Ho; ++oy)
              for (int64_t ox = 0; ox < Wo; ++ox) {
                const real* row = gcol.data() + (oy * Wo + ox) * K;
                for (int64_t ci = 0; ci < Cin; ++ci)
                  for (int64_t ky = 0; ky < kh; ++ky) {
                    const int64_t iy = oy * stride + ky - pad;
                    if (iy < 0 || iy >= H) continue;
                    real* dst = px.grad.data() + ((n * Cin + ci) * H + iy) * W;
                    for (int64_t kx = 0; kx < kw; ++kx) {
                      const int64_t ix = ox * stride + kx - pad;
                      if (ix < 0 || ix >= W) continue;
                      dst[ix] += row[(ci * kh + ky) * kw + kx];
                    }
                  }
              }
          }
        }
      });
}

// 1-D convolution, x [N,Cin,L] * w [Cout,Cin,k] + b [Cout]; wraps conv2d by
// treating the sequence as a 1-pixel-tall image. Padding applies to the
// sequence axis only (realized by explicit zero concat: conv2d would pad
// the unit height axis too).
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride = 1,
                     int64_t pad = 0) {
  if (x.ndim() != 3 || w.ndim() != 3) throw ShapeError("conv1d: x must be NCL, w OIK");
  const int64_t N = x.dim(0), Cin = x.dim(1);
  const int64_t Cout = w.dim(0), k = w.dim(2);
  Tensor xp = x;
  if (pad > 0) {
    Tensor zeros = Tensor::zeros({N, Cin, pad});
    xp = concat({zeros, x, zeros}, 2);
  }
  Tensor x4 = reshape(xp, {N, Cin, 1, xp.dim(2)});
  Tensor w4 = reshape(w, {Cout, w.dim(1), 1, k});
  Tensor y = conv2d(x4, w4, b, stride, 0);
  return reshape(y, {N, Cout, y.dim(3)});
}

// Non-overlapping average pooling over NCHW; H and W must tile exactly.
inline Tensor avg_pool2d(const Tensor& x, int64_t kh, int64_t kw) {
  if (x.ndim() != 4) throw ShapeError("avg_pool2d: expects NCHW");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (kh <= 0 || kw <= 0 || H % kh != 0 || W % kw != 0) {
    throw ShapeError("avg_pool2d: kernel must tile the input exactly");
  }
  const int64_t Ho = H / kh, Wo = W / kw;
  const real inv = 1.0 / static_cast<real>(kh * kw);
  const auto& v = x.vals();
  std::vector<real> out(static_cast<size_t>(N * C * Ho * Wo), 0.0);
  for (int64_t nc = 0; nc < N * C; ++nc)
    for (int64_t oy = 0; oy < Ho; ++oy)
      for (int64_t ox = 0; ox < Wo; ++ox) {
        real s = 0.0;
        for (int64_t ky = 0; ky < kh; ++ky)
          for (int64_t kx = 0; kx < kw; ++kx)
            s += v[static_cast<size_t>((nc * H + oy * kh + ky) * W + ox * kw + kx)];
        out[static_cast<size_t>((nc * Ho + oy) * Wo + ox)] = s * inv;
      }
  return Tensor::make("avg_pool2d", {N, C, Ho, Wo}, std::move(out), {x},
                      [x, N, C, H, W, Ho, Wo, kh, kw, inv](detail::Node& o) {
                        auto& p = x.node();
                        if (!p.requires_grad) return;
                        p.ensure_grad();
                        for (int64_t nc = 0; nc < N * C; ++nc)
                          for (int64_t oy = 0; oy < Ho; ++oy)
                            for (int64_t ox = 0; ox < Wo; ++ox) {
                              const real g =
                                  o.grad[static_cast<size_t>((nc * Ho + oy) * Wo + ox)] * inv;
                              for (int64_t ky = 0; ky < kh; ++ky)
                                for (int64_t kx = 0; kx < kw; ++kx)
                                  p.grad[static_cast<size_t>((nc * H + oy * kh + ky) * W +
                                                             ox * kw + kx)] += g;
                            }
                      });
}

struct BatchNormResult {
  Tensor y;
  std::vector<real> batch_mean;  // per channel, biased variance convention
  std::vector<real> batch_var;
};

// Batch normalization over axis 1 of [N,C,...]. Training mode normalizes
// with batch statistics (and differentiates through them); eval mode uses
// the supplied running statistics as constants.
inline BatchNormResult batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                                  const std::vector<real>& running_mean,
                                  const std::vector<real>& running_var, bool training,
                                  real eps = 1e-5) {
  if (x.ndim() < 2) throw ShapeError("batch_norm: expects at least 2 dims");
  const int64_t N = x.dim(0), C = x.dim(1);
  int64_t inner = 1;
  for (int64_t i = 2; i < x.ndim(); ++i) inner *= x.dim(i);
  const int64_t m = N * inner;  // samples per channel
  if (gamma.numel() != C || beta.numel() != C) throw ShapeError("batch_norm: affine size");
  if (static_cast<int64_t>(running_mean.size()) != C ||
      static_cast<int64_t>(running_var.size()) != C) {
    throw ShapeError("batch_norm: running stat size");
  }
  if (training && m < 2) throw ValueError("batch_norm: need at least 2 samples per channel");

  const auto& v = x.vals();
  std::vector<real> mean(static_cast<size_t>(C), 0.0), var(static_cast<size_t>(C), 0.0);
  if (training) {
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const real* p = v.data() + (n * C + c) * inner;
        real s = 0.0;
        for (int64_t i = 0; i < inner; ++i) s += p[i];
        mean[static_cast<size_t>(c)] += s;
      }
    for (auto& s : mean) s /= static_cast<real>(m);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t c = 0; c < C; ++c) {
        const real* p = v.data() + (n * C + c) * inner;
        const real mu = mean[static_cast<size_t>(c)];
        real s = 0.0;
        for (int64_t i = 0; i < inner; ++i) s += (p[i] - mu) * (p[i] - mu);
        var[static_cast<size_t>(c)] += s;
      }
    for (auto& s : var) s /= static_cast<real>(m);
  } else {
    mean = running_mean;
    var = running_var;
  }

  auto xhat = std::make_shared<std::vector<real>>(v.size());
  std::vector<real> invstd(static_cast<size_t>(C));
  for (int64_t c = 0; c < C; ++c)
    invstd[static_cast<size_t>(c)] = 1.0 / std::sqrt(var[static_cast<size_t>(c)] + eps);
  const auto& gw = gamma.vals();
  const auto& bw = beta.vals();
  std::vector<real> out(v.size());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const real mu = mean[static_cast<size_t>(c)];
      const real iv = invstd[static_cast<size_t>(c)];
      const real g = gw[static_cast<size_t>(c)], bb = bw[static_cast<size_t>(c)];
      const real* p = v.data() + (n * C + c) * inner;
      real* xh = xhat->data() + (n * C + c) * inner;
      real* y = out.data() + (n * C + c) * inner;
      for (int64_t i = 0; i < inner; ++i) {
        xh[i] = (p[i] - mu) * iv;
        y[i] = xh[i] * g + bb;
      }
    }

  auto ivp = std::make_shared<std::vector<real>>(std::move(invstd));
  Tensor y = Tensor::make(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, ivp, N, C, inner, m, training](detail::Node& o) {
        auto& px = x.node();
        auto& pg = gamma.node();
        auto& pb = beta.node();
        const auto& gw2 = gamma.vals();
        if (pg.requires_grad) pg.ensure_grad();
        if (pb.requires_grad) pb.ensure_grad();
        if (px.requires_grad) px.ensure_grad();
        for (int64_t c = 0; c < C; ++c) {
          real sum_g = 0.0, sum_gxh = 0.0;
          for (int64_t n = 0; n < N; ++n) {
            const real* g = o.grad.data() + (n * C + c) * inner;
            const real* xh = xhat->data() + (n * C + c) * inner;
            for (int64_t i = 0; i < inner; ++i) {
              sum_g += g[i];
              sum_gxh += g[i] * xh[i];
            }
          }
          if (pg.requires_grad) pg.grad[static_cast<size_t>(c)] += sum_gxh;
          if (pb.requires_grad) pb.grad[static_cast<size_t>(c)] += sum_g;
          if (px.requires_grad) {
            const real iv = (*ivp)[static_cast<size_t>(c)];
            const real gmm = gw2[static_cast<size_t>(c)];
            if (training) {
              const real mg = sum_g / static_cast<real>(m);
              const real mgxh = sum_gxh / static_cast<real>(m);
              for (int64_t n = 0; n < N; ++n) {
                const real* g = o.grad.data() + (n * C + c) * inner;
                const real* xh = xhat->data() + (n * C + c) * inner;
                real* dst = px.grad.data() + (n * C + c) * inner;
                for (int64_t i = 0; i < inner; ++i)
                  dst[i] += gmm * iv * (g[i] - mg - xh[i] * mgxh);
              }
            } else {
              for (int64_t n = 0; n < N; ++n) {
                const real* g = o.grad.data() + (n * C + c) * inner;
                real* dst = px.grad.data() + (n * C + c) * inner;
                for (int64_t i = 0; i < inner; ++i) dst[i] += gmm * iv * g[i];
              }
            }
          }
        }
      });
  return {std::move(y), std::move(mean), std::move(var)};
}

// Scaled dot-product attention on 2-D matrices; returns (output, weights).
inline std::pair<Tensor, Tensor> scaled_dot_attention(const Tensor& q, const Tensor& k,
                                                      const Tensor& v) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2) {
    throw ShapeError("scaled_dot_attention: expects matrices");
  }
  if (q.dim(1) != k.dim(1)) throw ShapeError("scaled_dot_attention: q/k dim mismatch");
  if (k.dim(0) != v.dim(0)) throw ShapeError("scaled_dot_attention: k/v length mismatch");
  const real scale = 1.0 / std::sqrt(static_cast<real>(q.dim(1)));
  Tensor attn = softmax(matmul(q, transpose(k)) * scale, -1);
  return {matmul(attn, v), attn};
}

// Bilinear resize of NCHW maps (endpoint-aligned, separable).
inline Tensor bilinear_resize(const Tensor& x, int64_t H2, int64_t W2) {
  if (x.ndim() != 4) throw ShapeError("bilinear_resize: expects NCHW");
  return interpolate_linear(interpolate_linear(x, H2, 2), W2, 3);
}

}  // namespace spectralx
