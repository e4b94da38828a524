#include <cmath>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "spectralx/are_adapter.hpp"
#include "testutil.hpp"

using namespace spectralx;
using testutil::allclose;
using testutil::close;

namespace {

struct Fixture {
  TokenizerProfile tok = Profile::desk().tok;
  ParamStore store;
  std::unique_ptr<AreAdapter> are;
  Tensor t_att, z_spa, z_spe;

  explicit Fixture(uint64_t seed = 7) {
    Rng rng(seed);
    are = std::make_unique<AreAdapter>(store, "are", tok, rng);
    t_att = Tensor::randn({tok.L, 2 * tok.r}, rng);
    z_spa = Tensor::randn({tok.S, tok.C}, rng);
    z_spe = Tensor::randn({tok.C, tok.S}, rng);
  }
};

}  // namespace

TEST_CASE("match maps carry one score per token-feature pair") {
  Fixture f;
  Tensor t_spa = narrow(f.t_att, 1, 0, f.tok.r);
  Tensor t_spe = narrow(f.t_att, 1, f.tok.r, f.tok.r);
  MatchMaps maps = f.are->match_maps(t_spa, t_spe, f.z_spa, f.z_spe);
  CHECK(maps.m_spa.shape() == Shape{f.tok.L, f.tok.S});
  CHECK(maps.m_spe.shape() == Shape{f.tok.L, f.tok.C});

  // the scores are the scaled projected dot products
  const real scale = 1.0 / std::sqrt(static_cast<real>(f.tok.r));
  Tensor q = matmul(t_spa, f.store.get("are.q_spa.weight")) + f.store.get("are.q_spa.bias");
  Tensor k = matmul(f.z_spa, f.store.get("are.k_spa.weight")) + f.store.get("are.k_spa.bias");
  Tensor expect = matmul(q, transpose(k)) * scale;
  CHECK(allclose(maps.m_spa.vals(), expect.vals(), 1e-12));

  Tensor bad = Tensor::zeros({f.tok.S, f.tok.C + 1});
  CHECK_THROWS_AS(f.are->match_maps(t_spa, t_spe, bad, f.z_spe), ShapeError);
}

TEST_CASE("selection takes the best-matching token per feature") {
  Rng rng(3);
  Tensor map = Tensor::randn({16, 64}, rng);
  const auto idx = AreAdapter::select_indices(map);
  REQUIRE(idx.size() == 64);
  const auto& v = map.vals();
  for (int64_t c = 0; c < 64; ++c) {
    int64_t best = 0;
    for (int64_t t = 1; t < 16; ++t) {
      if (v[static_cast<size_t>(t * 64 + c)] > v[static_cast<size_t>(best * 64 + c)]) best = t;
    }
    CHECK(idx[static_cast<size_t>(c)] == best);
  }
}

TEST_CASE("a constant map selects token zero everywhere") {
  Tensor map = Tensor::full({16, 64}, 0.25);
  for (int64_t i : AreAdapter::select_indices(map)) CHECK(i == 0);
}

TEST_CASE("selection is invariant to per-feature offsets") {
  Rng rng(5);
  Tensor map = Tensor::randn({16, 64}, rng);
  Tensor offsets = Tensor::randn({1, 64}, rng, 10.0);
  const auto a = AreAdapter::select_indices(map);
  const auto b = AreAdapter::select_indices(map + offsets);
  CHECK(a == b);
}

TEST_CASE("adjustment output keeps the token shape") {
  Fixture f;
  Tensor out = f.are->forward(f.t_att, f.z_spa, f.z_spe, true);
  CHECK(out.shape() == Shape{f.tok.L, 2 * f.tok.r});
}

TEST_CASE("a fresh adapter is an exact identity") {
  Fixture f;
  Tensor out = f.are->forward(f.t_att, f.z_spa, f.z_spe, false);
  CHECK(allclose(out.vals(), f.t_att.vals(), 0.0));
}

TEST_CASE("refinement paths produce the contracted shapes") {
  Fixture f;
  Tensor t_spa = narrow(f.t_att, 1, 0, f.tok.r);
  Tensor t_spe = narrow(f.t_att, 1, f.tok.r, f.tok.r);
  MatchMaps maps = f.are->match_maps(t_spa, t_spe, f.z_spa, f.z_spe);
  auto [ref_spa, ref_spe] = f.are->select_refine(t_spa, t_spe, maps, false);
  CHECK(ref_spa.shape() == Shape{f.tok.L, f.tok.r});
  CHECK(ref_spe.shape() == Shape{f.tok.L, f.tok.r});
}

TEST_CASE("the scale gradient matches finite differences end to end") {
  Fixture f;
  Tensor s2 = f.store.get("are.s2");
  {
    auto& v = s2.vals_mut();
    for (size_t i = 0; i < v.size(); ++i) v[i] = 0.1 + 0.01 * static_cast<real>(i % 5);
  }
  auto fn = [&]() {
    Tensor out = f.are->forward(f.t_att, f.z_spa, f.z_spe, false);
    return sum(out * out);
  };
  auto res = testutil::grad_check_sampled(fn, {s2}, 16, 1e-5);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("gradients reach the refinement parameters") {
  Fixture f;
  {
    auto& v = f.store.get("are.s2").vals_mut();
    std::fill(v.begin(), v.end(), 0.5);
  }
  Tensor out = f.are->forward(f.t_att, f.z_spa, f.z_spe, true);
  mean(out * out).backward();
  for (const char* name : {"are.refine1.conv.weight", "are.refine2.conv.weight",
                           "are.refine1.ln.gamma", "are.refine2.ln.gamma", "are.s2"}) {
    Tensor t = f.store.get(name);
    REQUIRE(t.has_grad());
    real mag = 0.0;
    for (real g : t.grad()) mag += std::abs(g);
    CHECK(mag > 0.0);
  }
}

TEST_CASE("training mode refreshes the normalization buffers") {
  Fixture f;
  auto before = f.store.get("are.refine1.bn.running_mean").vals();
  (void)f.are->forward(f.t_att, f.z_spa, f.z_spe, true);
  CHECK_FALSE(allclose(f.store.get("are.refine1.bn.running_mean").vals(), before, 0.0));

  auto frozen = f.store.get("are.refine1.bn.running_mean").vals();
  (void)f.are->forward(f.t_att, f.z_spa, f.z_spe, false);
  CHECK(allclose(f.store.get("are.refine1.bn.running_mean").vals(), frozen, 0.0));
}
