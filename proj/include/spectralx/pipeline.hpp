#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spectralx/backbone.hpp"
#include "spectralx/checkpoint.hpp"
#include "spectralx/config.hpp"
#include "spectralx/dataio.hpp"
#include "spectralx/metrics.hpp"

namespace spectralx {

// ----- parameter ledger ------------------------------------------------------

struct LedgerRow {
  std::string module;
  int64_t trainable = 0;
  int64_t frozen = 0;
};

struct ParamLedger {
  std::vector<LedgerRow> rows;  // sorted by module name
  int64_t trainable_total = 0;
  int64_t frozen_total = 0;
};

// Logical module of a parameter, for ledger grouping and freeze-isolation
// checks. Buffers never appear in the ledger.
inline std::string module_of(const std::string& name) {
  if (name.rfind("hypert.", 0) == 0) return "hypert";
  if (name.find(".lora_") != std::string::npos) return "lora";
  if (name.rfind("encoder.", 0) == 0) {
    if (name.find(".aomoa.") != std::string::npos) return "encoder.aomoa";
    if (name.find(".are.") != std::string::npos) return "encoder.are";
    return "encoder.core";
  }
  if (name.rfind("decoder.", 0) == 0) {
    if (name.find(".aomoa.") != std::string::npos) return "decoder.aomoa";
    if (name == "decoder.mask_token") return "decoder.mask_token";
    if (name.rfind("decoder.patch_head.", 0) == 0) return "decoder.patch_head";
    return "decoder.core";
  }
  if (name.rfind("head.", 0) == 0) return "head";
  return "other";
}

inline ParamLedger build_ledger(const ParamStore& store) {
  std::map<std::string, LedgerRow> rows;
  for (const auto& [name, info] : store.all()) {
    if (info.buffer) continue;
    LedgerRow& row = rows[module_of(name)];
    row.module = module_of(name);
    (info.frozen ? row.frozen : row.trainable) += info.tensor.numel();
  }
  ParamLedger ledger;
  for (auto& [mod, row] : rows) {
    ledger.trainable_total += row.trainable;
    ledger.frozen_total += row.frozen;
    ledger.rows.push_back(row);
  }
  return ledger;
}

// ----- in-memory datasets ----------------------------------------------------

struct SceneSet {
  std::vector<SpectralImage> images;
  std::vector<SegmentationMap> labels;

  size_t size() const { return images.size(); }
};

inline SceneConfig scene_config_for(const Profile& profile, const RunConfig& rc) {
  SceneConfig cfg;
  cfg.size = profile.tok.image_size;
  cfg.bands = profile.tok.bands;
  cfg.wavelengths = profile.tok.wavelengths;
  cfg.classes = profile.bb.classes;
  cfg.sites = rc.scene_sites;
  cfg.noise_std = rc.scene_noise;
  cfg.illum_amp = rc.scene_illum;
  cfg.seed = rc.seed;
  return cfg;
}

// Scene ids partition the id space so source and target scenes never share
// Voronoi geometry; class signatures still come from the shared config seed.
inline SceneSet make_scene_set(const SceneConfig& cfg, const DomainShift& shift, int64_t count,
                               int64_t first_id) {
  SceneSet set;
  set.images.reserve(static_cast<size_t>(count));
  set.labels.reserve(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    auto [img, map] = generate_scene(cfg, shift, static_cast<uint64_t>(first_id + i));
    set.images.push_back(std::move(img));
    set.labels.push_back(std::move(map));
  }
  return set;
}

inline SceneSet source_train_set(const Profile& p, const RunConfig& rc) {
  return make_scene_set(scene_config_for(p, rc), DomainShift{}, rc.train_scenes, 0);
}

inline SceneSet target_test_set(const Profile& p, const RunConfig& rc) {
  return make_scene_set(scene_config_for(p, rc), rc.domain_shift(), rc.test_scenes, 1000000);
}

// ----- evaluation ------------------------------------------------------------

struct EvalResult {
  real miou = 0.0;
  real m_f1 = 0.0;
  real m_acc = 0.0;
  int64_t pixels = 0;
};

inline EvalResult evaluate_model(const SpectralXModel& model, const SceneSet& set) {
  if (set.size() == 0) throw DataError("evaluate: empty scene set");
  ConfusionMatrix cm(model.profile().bb.classes);
  for (size_t i = 0; i < set.size(); ++i) {
    const SegmentationMap pred = model.predict(set.images[i]);
    cm.accumulate(set.labels[i], pred);
  }
  EvalResult r;
  r.miou = miou(cm);
  r.m_f1 = m_f1(cm);
  r.m_acc = m_acc(cm);
  r.pixels = cm.total();
  return r;
}

// ----- training stages -------------------------------------------------------

struct StageResult {
  std::vector<real> epoch_losses;  // mean over scenes
  std::vector<real> val_miou;      // stage 2 only, on a training subset
};

namespace detail {

inline std::vector<size_t> epoch_order(size_t n, Rng& rng) {
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  shuffle(order, rng);
  return order;
}

inline void freeze_for_stage(SpectralXModel& model, int stage, const RunConfig& rc) {
  model.apply_stage_freeze(stage);
  if (rc.baseline == "full") {
    // full fine-tuning baseline: every parameter trains in every stage
    model.params().apply_freeze([](const std::string&) { return true; });
  }
}

}  // namespace detail

// Stage 1: masked-reconstruction adaptation on the source scenes.
inline StageResult run_stage1(SpectralXModel& model, const SceneSet& train, const RunConfig& rc) {
  if (train.size() == 0) throw DataError("stage1: empty dataset");
  detail::freeze_for_stage(model, 1, rc);
  Adam opt(rc.lr);
  Rng order_rng = Rng::substream(rc.seed, fnv1a("stage1-order"));
  Rng mask_rng = Rng::substream(rc.seed, fnv1a("stage1-mask"));
  Rng route_rng = Rng::substream(rc.seed, fnv1a("stage1-route"));

  std::vector<Tensor> inputs;
  inputs.reserve(train.size());
  for (const auto& img : train.images) inputs.push_back(image_to_tensor(img));

  StageResult res;
  for (int64_t epoch = 0; epoch < rc.epochs_stage1; ++epoch) {
    opt.set_lr(cosine_lr(rc.lr, epoch, rc.epochs_stage1));
    const auto order = detail::epoch_order(train.size(), order_rng);
    real loss_sum = 0.0;
    int64_t in_batch = 0;
    model.params().zero_grads();
    for (size_t idx : order) {
      Tensor loss = model.reconstruction_loss(inputs[idx], mask_rng, route_rng, true);
      const real l = loss.item();
      if (!std::isfinite(l)) throw NumericError("stage1: non-finite loss");
      loss_sum += l;
      loss.backward();
      if (++in_batch == rc.batch) {
        opt.step(model.params());
        model.params().zero_grads();
        in_batch = 0;
      }
    }
    if (in_batch > 0) {
      opt.step(model.params());
      model.params().zero_grads();
    }
    res.epoch_losses.push_back(loss_sum / static_cast<real>(train.size()));
  }
  return res;
}

// Stage 2: per-pixel cross-entropy training of the adapters and the head.
inline StageResult run_stage2(SpectralXModel& model, const SceneSet& train, const RunConfig& rc) {
  if (train.size() == 0) throw DataError("stage2: empty dataset");
  detail::freeze_for_stage(model, 2, rc);
  Adam opt(rc.lr);
  Rng order_rng = Rng::substream(rc.seed, fnv1a("stage2-order"));
  Rng route_rng = Rng::substream(rc.seed, fnv1a("stage2-route"));

  const Profile& p = model.profile();
  const int64_t hw = p.tok.image_size * p.tok.image_size;
  std::vector<Tensor> inputs;
  std::vector<std::vector<int64_t>> targets;
  inputs.reserve(train.size());
  targets.reserve(train.size());
  for (size_t i = 0; i < train.size(); ++i) {
    inputs.push_back(image_to_tensor(train.images[i]));
    const auto& lab = train.labels[i].labels;
    std::vector<int64_t> t(lab.size());
    for (size_t j = 0; j < lab.size(); ++j) {
      if (lab[j] >= p.bb.classes) throw DataError("stage2: label out of range");
      t[j] = lab[j];
    }
    targets.push_back(std::move(t));
  }

  // small fixed validation subset for the per-epoch quality track
  SceneSet val;
  for (size_t i = 0; i < std::min<size_t>(train.size(), 8); ++i) {
    val.images.push_back(train.images[i]);
    val.labels.push_back(train.labels[i]);
  }

  StageResult res;
  for (int64_t epoch = 0; epoch < rc.epochs_stage2; ++epoch) {
    opt.set_lr(cosine_lr(rc.lr, epoch, rc.epochs_stage2));
    const auto order = detail::epoch_order(train.size(), order_rng);
    real loss_sum = 0.0;
    int64_t in_batch = 0;
    model.params().zero_grads();
    for (size_t idx : order) {
      Tensor logits = model.segment_logits(inputs[idx], true, route_rng);
      Tensor flat = transpose(reshape(logits, {p.bb.classes, hw}));
      Tensor loss = cross_entropy(flat, targets[idx]);
      const real l = loss.item();
      if (!std::isfinite(l)) throw NumericError("stage2: non-finite loss");
      loss_sum += l;
      loss.backward();
      if (++in_batch == rc.batch) {
        opt.step(model.params());
        model.params().zero_grads();
        in_batch = 0;
      }
    }
    if (in_batch > 0) {
      opt.step(model.params());
      model.params().zero_grads();
    }
    res.epoch_losses.push_back(loss_sum / static_cast<real>(train.size()));
    res.val_miou.push_back(evaluate_model(model, val).miou);
  }
  return res;
}

// ----- whole runs ------------------------------------------------------------

struct RunOutcome {
  RunConfig cfg;
  ParamLedger ledger_stage1;
  ParamLedger ledger_stage2;
  StageResult stage1;
  StageResult stage2;
  EvalResult source_eval;  // on the training scenes (same-domain reference)
  EvalResult target_eval;  // on shifted, unseen scenes
};

// Runs the configured arm end to end on a caller-owned model (so the caller
// can save the weights afterwards): optional stage-1 adaptation, stage-2 task
// training, then deterministic evaluation on both domains.
inline RunOutcome execute_run_on(SpectralXModel& model, const RunConfig& rc, const SceneSet& train,
                                 const SceneSet& target) {
  rc.validate();
  RunOutcome out;
  out.cfg = rc;
  if (rc.stage1_enabled) {
    out.stage1 = run_stage1(model, train, rc);
    out.ledger_stage1 = build_ledger(model.params());  // stage-1 freeze still applied
  }
  out.stage2 = run_stage2(model, train, rc);
  out.ledger_stage2 = build_ledger(model.params());
  out.source_eval = evaluate_model(model, train);
  out.target_eval = evaluate_model(model, target);
  return out;
}

inline RunOutcome execute_run(const RunConfig& rc, const SceneSet& train, const SceneSet& target) {
  rc.validate();
  SpectralXModel model(Profile::by_name(rc.profile), rc.model_flags(), rc.seed);
  return execute_run_on(model, rc, train, target);
}

inline RunOutcome execute_run(const RunConfig& rc) {
  const Profile profile = Profile::by_name(rc.profile);
  return execute_run(rc, source_train_set(profile, rc), target_test_set(profile, rc));
}

// The component-ablation matrix: cumulative rows x {with, without} stage 1.
inline std::vector<RunConfig> ablation_matrix(const RunConfig& base) {
  struct Row {
    bool hypert, aomoa, are;
  };
  const std::vector<Row> rows = {
      {false, false, false},  // frozen backbone + head
      {true, false, false},
      {true, true, false},
      {true, true, true},
  };
  std::vector<RunConfig> cells;
  for (bool stage1 : {true, false}) {
    for (const Row& row : rows) {
      RunConfig rc = base;
      rc.baseline = "none";
      rc.flag_hypert = row.hypert;
      rc.flag_aomoa = row.aomoa;
      rc.flag_are = row.are;
      rc.stage1_enabled = stage1;
      rc.validate();
      cells.push_back(rc);
    }
  }
  return cells;
}

// ----- run manifests ---------------------------------------------------------

inline std::string format_real(real v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline uint64_t config_hash(const RunConfig& rc, const std::string& kind) {
  return fnv1a(kind + "\n" + canonical_config(rc));
}

inline std::string manifest_name(const RunConfig& rc, const std::string& kind) {
  std::ostringstream os;
  os << "run_" << std::hex << std::setw(16) << std::setfill('0') << config_hash(rc, kind)
     << ".txt";
  return os.str();
}

// Line-oriented record of one run: config echo, ledgers, losses, metrics.
inline std::string manifest_text(const RunOutcome& out, const std::string& kind) {
  std::ostringstream os;
  os << "kind=" << kind << "\n";
  std::istringstream cfg(canonical_config(out.cfg));
  std::string line;
  while (std::getline(cfg, line)) os << "config." << line << "\n";

  auto emit_ledger = [&os](const ParamLedger& ledger, const std::string& prefix) {
    for (const auto& row : ledger.rows) {
      os << prefix << "." << row.module << ".trainable=" << row.trainable << "\n";
      os << prefix << "." << row.module << ".frozen=" << row.frozen << "\n";
    }
    os << prefix << ".total.trainable=" << ledger.trainable_total << "\n";
    os << prefix << ".total.frozen=" << ledger.frozen_total << "\n";
  };
  if (!out.ledger_stage1.rows.empty()) emit_ledger(out.ledger_stage1, "ledger.stage1");
  if (!out.ledger_stage2.rows.empty()) emit_ledger(out.ledger_stage2, "ledger.stage2");

  auto emit_series = [&os](const std::vector<real>& xs, const std::string& key) {
    os << key << "=";
    for (size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << format_real(xs[i]);
    os << "\n";
  };
  if (!out.stage1.epoch_losses.empty()) emit_series(out.stage1.epoch_losses, "stage1.losses");
  if (!out.stage2.epoch_losses.empty()) emit_series(out.stage2.epoch_losses, "stage2.losses");
  if (!out.stage2.val_miou.empty()) emit_series(out.stage2.val_miou, "stage2.val_miou");

  auto emit_eval = [&os](const EvalResult& ev, const std::string& prefix) {
    if (ev.pixels <= 0) return;  // this run did not evaluate that domain
    os << prefix << ".miou=" << format_real(ev.miou) << "\n";
    os << prefix << ".m_f1=" << format_real(ev.m_f1) << "\n";
    os << prefix << ".m_acc=" << format_real(ev.m_acc) << "\n";
    os << prefix << ".pixels=" << ev.pixels << "\n";
  };
  emit_eval(out.source_eval, "eval.source");
  emit_eval(out.target_eval, "eval.target");
  return os.str();
}

inline std::string write_manifest(const RunOutcome& out, const std::string& kind) {
  std::filesystem::create_directories(out.cfg.out_dir);
  const std::string path = out.cfg.out_dir + "/" + manifest_name(out.cfg, kind);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DataError("manifest: cannot open for writing: " + path);
  f << manifest_text(out, kind);
  return path;
}

}  // namespace spectralx
