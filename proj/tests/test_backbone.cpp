#include <cmath>
#include <cstdio>
#include <set>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "spectralx/backbone.hpp"
#include "spectralx/checkpoint.hpp"
#include "testutil.hpp"

using namespace spectralx;
using testutil::allclose;
using testutil::close;

namespace {

Tensor random_image(const TokenizerProfile& tok, uint64_t seed) {
  Rng rng(seed);
  return Tensor::randn({1, tok.bands, tok.image_size, tok.image_size}, rng, 1.0, 2.0);
}

}  // namespace

TEST_CASE("masking splits tokens at the configured ratio") {
  Rng rng(5);
  auto [visible, masked] = mask_tokens(16, 0.75, rng);
  CHECK(masked.size() == 12);
  CHECK(visible.size() == 4);

  std::set<int64_t> all(visible.begin(), visible.end());
  all.insert(masked.begin(), masked.end());
  CHECK(all.size() == 16);
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 15);

  CHECK_THROWS_AS(mask_tokens(16, 0.0, rng), ValueError);
  CHECK_THROWS_AS(mask_tokens(16, 1.0, rng), ValueError);
}

TEST_CASE("mask selection is uniform over tokens") {
  Rng rng(11);
  const int64_t trials = 4000, L = 16;
  std::vector<int64_t> hits(L, 0);
  for (int64_t t = 0; t < trials; ++t) {
    auto [visible, masked] = mask_tokens(L, 0.75, rng);
    for (int64_t m : masked) ++hits[static_cast<size_t>(m)];
  }
  // every token is masked 3/4 of the time, within Monte-Carlo slack
  for (int64_t h : hits) {
    const real rate = static_cast<real>(h) / trials;
    CHECK(rate > 0.73);
    CHECK(rate < 0.77);
  }
}

TEST_CASE("model construction registers the adapter stack by site") {
  const Profile p = Profile::desk();
  SpectralXModel model(p, ModelFlags{}, 7);
  const ParamStore& store = model.params();

  CHECK(store.contains("encoder.block.2.aomoa.s1"));
  CHECK(store.contains("encoder.block.4.aomoa.s1"));
  CHECK_FALSE(store.contains("encoder.block.1.aomoa.s1"));
  CHECK_FALSE(store.contains("encoder.block.3.aomoa.s1"));
  CHECK(store.contains("encoder.block.2.are.s2"));
  CHECK(store.contains("decoder.block.1.aomoa.s1"));
  CHECK(store.contains("decoder.block.2.aomoa.s1"));
  CHECK(store.contains("decoder.mask_token"));
  CHECK(store.contains("head.classifier.weight"));

  ModelFlags plain;
  plain.use_aomoa = false;
  plain.use_are = false;
  SpectralXModel bare(p, plain, 7);
  CHECK_FALSE(bare.params().contains("encoder.block.2.aomoa.s1"));
  CHECK_FALSE(bare.params().contains("encoder.block.2.are.s2"));

  ModelFlags bad;
  bad.use_aomoa = false;
  CHECK_THROWS_AS(SpectralXModel(p, bad, 7), ValueError);
}

TEST_CASE("token count is conserved through the encoder") {
  const Profile p = Profile::desk();
  SpectralXModel model(p, ModelFlags{}, 7);
  Rng rng(3);

  Tensor img = random_image(p.tok, 2);
  TokenizerOutput tok = model.tokenizer().forward(img, false);
  Tensor x = tok.t_att + sincos_embed_2d(p.tok.token_side(), p.bb.width);

  for (int stage : {1, 2}) {
    Rng route(4);
    EncodeResult res = model.encode(x, stage, stage >= 2 ? &tok : nullptr, false, route);
    CHECK(res.final.shape() == Shape{p.tok.L, p.bb.width});
    REQUIRE(res.sites.size() == p.bb.aomoa_sites.size());
    for (const Tensor& s : res.sites) CHECK(s.shape() == Shape{p.tok.L, p.bb.width});
  }

  // a reduced token set passes through stage 1 untouched in count
  Tensor xv = gather_rows(x, {0, 3, 9, 15});
  Rng route(4);
  CHECK(model.encode(xv, 1, nullptr, false, route).final.shape() == Shape{4, p.bb.width});

  CHECK_THROWS_AS(model.encode(x, 2, nullptr, false, rng), ValueError);
  CHECK_THROWS_AS(model.encode(x, 0, nullptr, false, rng), ValueError);
}

TEST_CASE("fresh adapters do not perturb the frozen computation") {
  const Profile p = Profile::desk();
  SpectralXModel with(p, ModelFlags{}, 7);

  Tensor img = random_image(p.tok, 6);
  NoGradGuard ng;
  Rng r1(0), r2(0);
  Tensor adapted = with.segment_logits(img, false, r1);
  with.set_adapters_enabled(false);
  Tensor bare = with.segment_logits(img, false, r2);
  with.set_adapters_enabled(true);

  // zero-initialized scales make insertion exact, not merely approximate
  CHECK(allclose(adapted.vals(), bare.vals(), 0.0));
}

TEST_CASE("segmentation logits cover every pixel and class") {
  const Profile p = Profile::desk();
  SpectralXModel model(p, ModelFlags{}, 7);
  Rng route(1);
  Tensor logits = model.segment_logits(random_image(p.tok, 5), false, route);
  CHECK(logits.shape() == Shape{1, p.bb.classes, p.tok.image_size, p.tok.image_size});

  SceneConfig cfg;
  auto [scene, labels] = generate_scene(cfg, DomainShift{}, 3);
  SegmentationMap pred = model.predict(scene);
  CHECK(pred.height == p.tok.image_size);
  CHECK(pred.width == p.tok.image_size);
  CHECK(pred.labels.size() == static_cast<size_t>(p.tok.image_size * p.tok.image_size));
  for (uint16_t l : pred.labels) CHECK(l < p.bb.classes);
}

TEST_CASE("reconstruction loss is a finite scalar and trains the right parts") {
  const Profile p = Profile::desk();
  SpectralXModel model(p, ModelFlags{}, 7);
  model.apply_stage_freeze(1);

  Rng mask(3), route(4);
  Tensor loss = model.reconstruction_loss(random_image(p.tok, 8), mask, route, true);
  REQUIRE(loss.numel() == 1);
  CHECK(std::isfinite(loss.item()));
  loss.backward();

  // stage 1 trains the tokenizer, mixture adapters, mask token and patch head
  CHECK(model.params().get("hypert.queries").has_grad());
  CHECK(model.params().get("decoder.mask_token").has_grad());
  CHECK(model.params().get("decoder.patch_head.weight").has_grad());

  auto trainable = [&](const std::string& n) {
    return !model.params().all().at(n).frozen;
  };
  CHECK(trainable("hypert.queries"));
  CHECK(trainable("encoder.block.2.aomoa.s1"));
  CHECK(trainable("decoder.block.1.aomoa.s1"));
  CHECK(trainable("decoder.mask_token"));
  CHECK(trainable("decoder.patch_head.weight"));
  CHECK_FALSE(trainable("encoder.block.1.attn.wq.weight"));
  CHECK_FALSE(trainable("encoder.block.2.are.s2"));
  CHECK_FALSE(trainable("head.classifier.weight"));
  CHECK_FALSE(trainable("decoder.embed.weight"));
}

TEST_CASE("stage-2 freezing trains adapters and head only around a frozen core") {
  const Profile p = Profile::desk();
  SpectralXModel model(p, ModelFlags{}, 7);
  model.apply_stage_freeze(2);

  auto trainable = [&](const std::string& n) {
    return !model.params().all().at(n).frozen;
  };
  CHECK(trainable("hypert.queries"));
  CHECK(trainable("encoder.block.2.aomoa.s1"));
  CHECK(trainable("encoder.block.2.are.s2"));
  CHECK(trainable("head.classifier.weight"));
  CHECK(trainable("head.lateral.weight"));
  CHECK_FALSE(trainable("decoder.block.1.aomoa.s1"));
  CHECK_FALSE(trainable("decoder.patch_head.weight"));
  CHECK_FALSE(trainable("encoder.block.1.attn.wq.weight"));
  CHECK_FALSE(trainable("encoder.block.1.mlp.fc1.weight"));

  // the frozen core stays bit-identical across a training step
  auto before = model.params().snapshot([](const ParamInfo& i) { return i.frozen; });
  Rng route(9);
  Tensor logits = model.segment_logits(random_image(p.tok, 4), true, route);
  mean(logits * logits).backward();
  Adam opt(1e-3);
  opt.step(model.params());
  auto after = model.params().snapshot([](const ParamInfo& i) { return i.frozen; });
  CHECK(before == after);
}

TEST_CASE("per-patch targets are normalized and ordered band-major") {
  const Profile p = Profile::desk();
  SpectralXModel model(p, ModelFlags{}, 7);
  Tensor img = random_image(p.tok, 12);

  std::vector<int64_t> rows = {0, 5, 15};
  Tensor t = model.normalized_patches(img, rows);
  const int64_t ps = model.patch_side();
  REQUIRE(t.shape() == Shape{3, ps * ps * p.tok.bands});

  const auto& v = t.vals();
  const int64_t cols = t.dim(1);
  for (int64_t r = 0; r < 3; ++r) {
    real mu = 0.0, var = 0.0;
    for (int64_t c = 0; c < cols; ++c) mu += v[static_cast<size_t>(r * cols + c)];
    mu /= static_cast<real>(cols);
    for (int64_t c = 0; c < cols; ++c) {
      const real d = v[static_cast<size_t>(r * cols + c)] - mu;
      var += d * d;
    }
    var /= static_cast<real>(cols);
    CHECK(close(mu, 0.0, 1e-9));
    CHECK(close(var, 1.0, 1e-3));
  }

  // first column of token 0 is the image's first pixel, standardized
  const auto& iv = img.vals();
  const int64_t hw = p.tok.image_size;
  real mu = 0.0;
  std::vector<real> patch;
  for (int64_t b = 0; b < p.tok.bands; ++b)
    for (int64_t y = 0; y < ps; ++y)
      for (int64_t x = 0; x < ps; ++x) patch.push_back(iv[static_cast<size_t>((b * hw + y) * hw + x)]);
  for (real x : patch) mu += x;
  mu /= static_cast<real>(patch.size());
  real var = 0.0;
  for (real x : patch) var += (x - mu) * (x - mu);
  var /= static_cast<real>(patch.size());
  const real expect = (patch[0] - mu) / std::sqrt(var + 1e-6);
  CHECK(close(v[0], expect, 1e-12));
}

TEST_CASE("low-rank attention deltas start silent and count as configured") {
  const Profile p = Profile::desk();
  ModelFlags lora;
  lora.train_hypert = false;
  lora.use_aomoa = false;
  lora.use_are = false;
  lora.lora_rank = 4;
  SpectralXModel model(p, lora, 7);
  model.apply_stage_freeze(2);

  Tensor img = random_image(p.tok, 2);
  NoGradGuard ng;
  Rng r1(0), r2(0), r3(0);
  Tensor before = model.segment_logits(img, false, r1);

  // the zero second factor silences the first: scrambling it changes nothing
  {
    auto& a = model.params().get("encoder.block.1.attn.wq.lora_a").vals_mut();
    for (real& v : a) v += 3.0;
  }
  CHECK(allclose(model.segment_logits(img, false, r2).vals(), before.vals(), 0.0));

  // a live second factor must reach the logits
  {
    auto& b = model.params().get("encoder.block.1.attn.wq.lora_b").vals_mut();
    std::fill(b.begin(), b.end(), 0.05);
  }
  CHECK_FALSE(allclose(model.segment_logits(img, false, r3).vals(), before.vals(), 1e-9));

  // rank x (fan_in + fan_out) per wrapped projection, four per block
  int64_t lora_params = 0;
  for (const auto& [name, info] : model.params().all()) {
    if (name.find(".lora_") == std::string::npos) continue;
    CHECK_FALSE(info.frozen);
    lora_params += info.tensor.numel();
  }
  const int64_t w = p.bb.width;
  CHECK(lora_params == p.bb.depth * 4 * lora.lora_rank * (w + w));

  // besides the head, nothing else trains
  for (const auto& [name, info] : model.params().all()) {
    if (info.buffer || info.frozen) continue;
    const bool ok = name.find(".lora_") != std::string::npos || name.rfind("head.", 0) == 0;
    CHECK(ok);
  }
}

TEST_CASE("weights survive a checkpoint round trip") {
  const Profile p = Profile::desk();
  SpectralXModel model(p, ModelFlags{}, 7);

  const std::string path = "ckpt_roundtrip.spxw";
  save_weights(model.params(), path);

  // the file stores float32, so load it into the donor too: after that both
  // models hold identical weights and must agree bit-for-bit
  SpectralXModel other(p, ModelFlags{}, 99);  // different init
  load_weights(other.params(), path);
  load_weights(model.params(), path);
  std::remove(path.c_str());

  for (const auto& [name, info] : model.params().all()) {
    REQUIRE(allclose(info.tensor.vals(), other.params().get(name).vals(), 0.0));
  }

  Tensor img = random_image(p.tok, 3);
  NoGradGuard ng;
  Rng r1(0), r2(0);
  Tensor a = model.segment_logits(img, false, r1);
  Tensor b = other.segment_logits(img, false, r2);
  CHECK(allclose(a.vals(), b.vals(), 0.0));
}

TEST_CASE("checkpoint loading rejects mismatched and corrupt files") {
  const Profile p = Profile::desk();
  SpectralXModel model(p, ModelFlags{}, 7);
  auto buf = encode_weights(model.params());

  // corrupt one payload byte
  auto bad = buf;
  bad[100] ^= 0x40;
  CHECK_THROWS_AS(decode_weights(model.params(), bad.data(), bad.size()), BadChecksumError);

  auto magic = buf;
  magic[0] = 'Q';
  CHECK_THROWS_AS(decode_weights(model.params(), magic.data(), magic.size()), BadMagicError);

  ModelFlags bare;
  bare.use_aomoa = false;
  bare.use_are = false;
  SpectralXModel other(p, bare, 7);
  CHECK_THROWS_AS(decode_weights(other.params(), buf.data(), buf.size()), DataError);
}
