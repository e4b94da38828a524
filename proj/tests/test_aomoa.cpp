#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "spectralx/aomoa.hpp"
#include "testutil.hpp"

using namespace spectralx;
using testutil::allclose;
using testutil::close;

namespace {

constexpr int64_t kR = 32, kAdapters = 4, kTopK = 2;

struct Fixture {
  ParamStore store;
  std::unique_ptr<AoMoA> moa;

  explicit Fixture(uint64_t seed = 7) {
    Rng rng(seed);
    moa = std::make_unique<AoMoA>(store, "aomoa", kR, kAdapters, kTopK, rng);
  }

  // overwrite the zero-initialized gate so routing depends on the tokens
  void randomize_gates(uint64_t seed) {
    Rng rng(seed);
    for (const char* name : {"aomoa.gate_spa", "aomoa.gate_spe"}) {
      for (real& v : store.get(name).vals_mut()) v = rng.normal();
    }
  }
};

// reference routing: keep the K largest logits (ties to the lower index),
// softmax over the kept set, zero elsewhere
std::vector<real> route_oracle(const std::vector<real>& logits, int64_t k) {
  const int64_t n = static_cast<int64_t>(logits.size());
  std::vector<int64_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)]) {
      return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
    }
    return a < b;
  });
  std::vector<real> out(static_cast<size_t>(n), 0.0);
  real mx = -1e300, denom = 0.0;
  for (int64_t i = 0; i < k; ++i) mx = std::max(mx, logits[static_cast<size_t>(order[i])]);
  for (int64_t i = 0; i < k; ++i) denom += std::exp(logits[static_cast<size_t>(order[i])] - mx);
  for (int64_t i = 0; i < k; ++i) {
    const size_t j = static_cast<size_t>(order[i]);
    out[j] = std::exp(logits[j] - mx) / denom;
  }
  return out;
}

}  // namespace

TEST_CASE("routing weights are a sparse distribution") {
  Fixture f;
  f.randomize_gates(31);
  const int64_t n = 1024;
  Rng rng(9);
  Tensor tokens = Tensor::randn({n, kR / 4}, rng);

  for (bool training : {false, true}) {
    Rng noise_rng(17);
    RoutingDecision d = f.moa->route(tokens, Attribute::spatial, training, noise_rng);
    REQUIRE(d.weights.shape() == Shape{n, kAdapters});
    REQUIRE(d.selected.size() == static_cast<size_t>(n));
    const auto& w = d.weights.vals();
    for (int64_t t = 0; t < n; ++t) {
      real sum = 0.0;
      int64_t nonzero = 0;
      for (int64_t a = 0; a < kAdapters; ++a) {
        const real v = w[static_cast<size_t>(t * kAdapters + a)];
        REQUIRE(v >= 0.0);
        sum += v;
        if (v > 0.0) ++nonzero;
      }
      REQUIRE(close(sum, 1.0, 1e-6));
      REQUIRE(nonzero == kTopK);
      REQUIRE(static_cast<int64_t>(d.selected[static_cast<size_t>(t)].size()) == kTopK);
    }
  }
}

TEST_CASE("deterministic routing matches the top-K softmax oracle") {
  Fixture f;
  f.randomize_gates(55);
  const int64_t n = 256;
  Rng rng(3);
  Tensor tokens = Tensor::randn({n, kR / 4}, rng);
  Rng unused(0);
  RoutingDecision d = f.moa->route(tokens, Attribute::spectral, false, unused);

  Tensor logits = matmul(tokens, f.store.get("aomoa.gate_spe"));
  const auto& lv = logits.vals();
  const auto& wv = d.weights.vals();
  for (int64_t t = 0; t < n; ++t) {
    std::vector<real> row(lv.begin() + t * kAdapters, lv.begin() + (t + 1) * kAdapters);
    const auto expect = route_oracle(row, kTopK);
    for (int64_t a = 0; a < kAdapters; ++a) {
      CHECK(close(wv[static_cast<size_t>(t * kAdapters + a)], expect[static_cast<size_t>(a)],
                  1e-9));
    }
  }
}

TEST_CASE("noisy routing matches an oracle replaying the same draws") {
  Fixture f;
  f.randomize_gates(77);
  // give the noise projection structure too
  {
    Rng rng(78);
    for (real& v : f.store.get("aomoa.noise_spa").vals_mut()) v = 0.5 * rng.normal();
  }
  const int64_t n = 64;
  Rng rng(5);
  Tensor tokens = Tensor::randn({n, kR / 4}, rng);

  Rng route_rng(101);
  RoutingDecision d = f.moa->route(tokens, Attribute::spatial, true, route_rng);

  Rng replay(101);
  Tensor eps = Tensor::randn({n, kAdapters}, replay);
  Tensor logits = matmul(tokens, f.store.get("aomoa.gate_spa")) +
                  eps * softplus(matmul(tokens, f.store.get("aomoa.noise_spa")));
  const auto& lv = logits.vals();
  const auto& wv = d.weights.vals();
  for (int64_t t = 0; t < n; ++t) {
    std::vector<real> row(lv.begin() + t * kAdapters, lv.begin() + (t + 1) * kAdapters);
    const auto expect = route_oracle(row, kTopK);
    for (int64_t a = 0; a < kAdapters; ++a) {
      CHECK(close(wv[static_cast<size_t>(t * kAdapters + a)], expect[static_cast<size_t>(a)],
                  1e-9));
    }
  }
}

TEST_CASE("tied logits select the lowest adapter indices with equal weight") {
  Fixture f;  // gates stay zero: every logit ties at 0
  Rng rng(1);
  Tensor tokens = Tensor::randn({8, kR / 4}, rng);
  Rng unused(0);
  RoutingDecision d = f.moa->route(tokens, Attribute::spatial, false, unused);
  const auto& w = d.weights.vals();
  for (int64_t t = 0; t < 8; ++t) {
    CHECK(w[static_cast<size_t>(t * kAdapters + 0)] == 0.5);
    CHECK(w[static_cast<size_t>(t * kAdapters + 1)] == 0.5);
    CHECK(w[static_cast<size_t>(t * kAdapters + 2)] == 0.0);
    CHECK(w[static_cast<size_t>(t * kAdapters + 3)] == 0.0);
    REQUIRE(d.selected[static_cast<size_t>(t)] == std::vector<int64_t>{0, 1});
  }
}

TEST_CASE("K equal to the bank size reproduces the dense softmax") {
  ParamStore store;
  Rng rng(7);
  AoMoA moa(store, "aomoa", kR, kAdapters, kAdapters, rng);
  for (real& v : store.get("aomoa.gate_spa").vals_mut()) v = rng.normal();

  Tensor tokens = Tensor::randn({128, kR / 4}, rng);
  Rng unused(0);
  RoutingDecision d = moa.route(tokens, Attribute::spatial, false, unused);
  Tensor dense = softmax(matmul(tokens, store.get("aomoa.gate_spa")), -1);
  CHECK(allclose(d.weights.vals(), dense.vals(), 1e-9));
}

TEST_CASE("training-mode selection is uniform at initialization") {
  // zero gate logits tie every adapter; the noise term (softplus(0) > 0)
  // breaks ties symmetrically, so selections should spread evenly
  Fixture f;
  const int64_t n = 10000;
  Rng rng(13);
  Tensor tokens = Tensor::randn({n, kR / 4}, rng);
  Rng noise_rng(99);
  RoutingDecision d = f.moa->route(tokens, Attribute::spatial, true, noise_rng);

  std::vector<int64_t> counts(kAdapters, 0);
  for (const auto& sel : d.selected)
    for (int64_t a : sel) ++counts[static_cast<size_t>(a)];
  const real expected = static_cast<real>(n * kTopK) / kAdapters;
  real chi2 = 0.0;
  for (int64_t c : counts) {
    const real dev = static_cast<real>(c) - expected;
    chi2 += dev * dev / expected;
  }
  // 3 degrees of freedom, alpha = 0.01
  CHECK(chi2 < 11.345);
}

TEST_CASE("sparse dispatch equals evaluating every adapter densely") {
  Fixture f;
  f.randomize_gates(42);
  Rng rng(4);
  Tensor tokens = Tensor::randn({96, kR / 4}, rng);
  Rng unused(0);
  RoutingDecision d = f.moa->route(tokens, Attribute::spatial, false, unused);
  Tensor sparse = f.moa->mix(tokens, d);

  // dense evaluation: force every adapter onto every token with the same
  // weights; zero-weight terms contribute exact zeros
  RoutingDecision dense = d;
  dense.selected.assign(static_cast<size_t>(tokens.dim(0)), {0, 1, 2, 3});
  Tensor full = f.moa->mix(tokens, dense);

  REQUIRE(sparse.shape() == full.shape());
  CHECK(allclose(sparse.vals(), full.vals(), 1e-9));
}

TEST_CASE("adapters the router never picks are not evaluated") {
  Fixture f;  // zero gates: ties send every token to adapters 0 and 1
  Rng rng(8);
  Tensor tokens = Tensor::randn({32, kR / 4}, rng);
  Rng unused(0);
  RoutingDecision d = f.moa->route(tokens, Attribute::spatial, false, unused);
  for (const auto& sel : d.selected) REQUIRE(sel == std::vector<int64_t>{0, 1});

  // break the weights of the idle adapters: every op rejects non-finite
  // values, so a clean mix proves those adapters are skipped entirely
  for (int64_t idle : {2, 3}) {
    auto& w = f.store.get("aomoa.adapter." + std::to_string(idle) + ".fc1.weight").vals_mut();
    std::fill(w.begin(), w.end(), std::numeric_limits<real>::quiet_NaN());
  }
  CHECK_NOTHROW(f.moa->mix(tokens, d));
}

TEST_CASE("fresh modules emit exactly zero and inject is the identity") {
  Fixture f;
  Rng rng(2);
  Tensor t_att = Tensor::randn({16, 2 * kR}, rng);
  Rng route_rng(3);
  Tensor delta = f.moa->forward(t_att, true, route_rng);
  REQUIRE(delta.shape() == Shape{16, 2 * kR});
  for (real v : delta.vals()) CHECK(v == 0.0);

  Tensor ffn = Tensor::randn({16, 2 * kR}, rng);
  Tensor sum = AoMoA::inject(ffn, delta);
  CHECK(allclose(sum.vals(), ffn.vals(), 0.0));

  Tensor wrong = Tensor::zeros({8, 2 * kR});
  CHECK_THROWS_AS(AoMoA::inject(ffn, wrong), ShapeError);
}

TEST_CASE("gradients flow through routing, mixing, and the scale") {
  Fixture f;
  f.randomize_gates(12);
  {
    auto& s = f.store.get("aomoa.s1").vals_mut();
    std::fill(s.begin(), s.end(), 0.5);
  }
  Rng rng(14);
  Tensor t_att = Tensor::randn({24, 2 * kR}, rng);
  Rng route_rng(15);
  Tensor delta = f.moa->forward(t_att, false, route_rng);
  mean(delta * delta).backward();

  for (const char* name : {"aomoa.w_down", "aomoa.w_up", "aomoa.gate_spa", "aomoa.gate_spe",
                           "aomoa.s1"}) {
    Tensor t = f.store.get(name);
    REQUIRE(t.has_grad());
    real mag = 0.0;
    for (real g : t.grad()) mag += std::abs(g);
    CHECK(mag > 0.0);
  }
}

TEST_CASE("scale gradient matches finite differences end to end") {
  Fixture f;
  f.randomize_gates(20);
  Rng rng(21);
  Tensor t_att = Tensor::randn({8, 2 * kR}, rng);
  Tensor s1 = f.store.get("aomoa.s1");
  {
    // move off the zero init so the loss actually varies with the scale
    auto& v = s1.vals_mut();
    for (size_t i = 0; i < v.size(); ++i) v[i] = 0.2 + 0.01 * static_cast<real>(i % 7);
  }
  // routing is deterministic in eval mode, so the loss is smooth in s1
  auto fn = [&]() {
    Rng route_rng(0);
    Tensor d = f.moa->forward(t_att, false, route_rng);
    return sum(d * d);
  };
  auto res = testutil::grad_check_sampled(fn, {s1}, 16, 1e-5);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("bank configuration is validated") {
  ParamStore store;
  Rng rng(1);
  CHECK_THROWS_AS(AoMoA(store, "a", 30, 4, 2, rng), ValueError);
  ParamStore s2;
  CHECK_THROWS_AS(AoMoA(s2, "a", 32, 4, 5, rng), ValueError);
  ParamStore s3;
  CHECK_THROWS_AS(AoMoA(s3, "a", 32, 4, 0, rng), ValueError);
}
