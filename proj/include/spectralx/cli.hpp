#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "spectralx/checkpoint.hpp"
#include "spectralx/pipeline.hpp"

namespace spectralx {

struct UsageError : Error {
  using Error::Error;
};

// ----- segmentation rasters (PPM) ---------------------------------------------

// Fixed 24-entry palette for class maps; distinct, display-friendly colors.
// The mapping is injective, so PPM exports decode back to exact label maps.
inline const std::array<std::array<uint8_t, 3>, 24>& segmentation_palette() {
  static const std::array<std::array<uint8_t, 3>, 24> kPalette = {{
      {230, 25, 75},   {60, 180, 75},   {255, 225, 25},  {0, 130, 200},
      {245, 130, 48},  {145, 30, 180},  {70, 240, 240},  {240, 50, 230},
      {210, 245, 60},  {250, 190, 212}, {0, 128, 128},   {220, 190, 255},
      {170, 110, 40},  {255, 250, 200}, {128, 0, 0},     {170, 255, 195},
      {128, 128, 0},   {255, 215, 180}, {0, 0, 128},     {128, 128, 128},
      {255, 255, 255}, {0, 0, 0},       {100, 150, 30},  {60, 60, 160},
  }};
  return kPalette;
}

inline std::vector<unsigned char> encode_ppm(const SegmentationMap& map) {
  const auto& palette = segmentation_palette();
  std::ostringstream head;
  head << "P6\n" << map.width << " " << map.height << "\n255\n";
  const std::string h = head.str();
  std::vector<unsigned char> out(h.begin(), h.end());
  out.reserve(out.size() + map.labels.size() * 3);
  for (uint16_t l : map.labels) {
    if (l >= palette.size()) throw DataError("ppm: label exceeds the 24-color palette");
    const auto& rgb = palette[l];
    out.insert(out.end(), rgb.begin(), rgb.end());
  }
  return out;
}

inline SegmentationMap decode_ppm(const unsigned char* data, size_t size) {
  std::string text(reinterpret_cast<const char*>(data), std::min<size_t>(size, 64));
  std::istringstream head(text);
  std::string magic;
  int64_t w = 0, h = 0, maxval = 0;
  head >> magic >> w >> h >> maxval;
  if (magic != "P6") throw BadMagicError("ppm: bad magic");
  if (w <= 0 || h <= 0 || maxval != 255) throw DataError("ppm: bad header");
  head.get();  // single whitespace byte after maxval
  const size_t pixel_off = static_cast<size_t>(head.tellg());
  const size_t need = static_cast<size_t>(w * h) * 3;
  if (size != pixel_off + need) throw TruncatedError("ppm: pixel payload size mismatch");

  std::map<uint32_t, uint16_t> inverse;
  const auto& palette = segmentation_palette();
  for (size_t i = 0; i < palette.size(); ++i) {
    const auto& c = palette[i];
    inverse[(uint32_t(c[0]) << 16) | (uint32_t(c[1]) << 8) | c[2]] = static_cast<uint16_t>(i);
  }
  SegmentationMap map;
  map.height = h;
  map.width = w;
  map.labels.resize(static_cast<size_t>(w * h));
  const unsigned char* px = data + pixel_off;
  for (size_t i = 0; i < map.labels.size(); ++i) {
    const uint32_t key =
        (uint32_t(px[3 * i]) << 16) | (uint32_t(px[3 * i + 1]) << 8) | px[3 * i + 2];
    const auto it = inverse.find(key);
    if (it == inverse.end()) throw DataError("ppm: color not in the palette");
    map.labels[i] = it->second;
  }
  return map;
}

inline void write_ppm(const SegmentationMap& map, const std::string& path) {
  const auto buf = encode_ppm(map);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("ppm: cannot open for writing: " + path);
  f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("ppm: write failed: " + path);
}

inline SegmentationMap read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw DataError("ppm: cannot open: " + path);
  const std::streamsize size = f.tellg();
  f.seekg(0);
  std::vector<unsigned char> buf(static_cast<size_t>(size));
  f.read(reinterpret_cast<char*>(buf.data()), size);
  if (!f) throw DataError("ppm: read failed: " + path);
  return decode_ppm(buf.data(), buf.size());
}

// ----- command plumbing --------------------------------------------------------

inline const char* usage_text() {
  return "usage: spectralx <verb> [--config FILE] [--out DIR] [key=value ...]\n"
         "\n"
         "verbs:\n"
         "  gen      generate the synthetic source/target dataset into data.dir\n"
         "  adapt    stage-1 spectral adaptation on the source scenes\n"
         "  train    full run: optional stage 1, stage-2 task training, evaluation\n"
         "  infer    predict segmentation maps for the test scenes (PPM export)\n"
         "  eval     score saved predictions against the dataset labels\n"
         "  ablate   component matrix: 4 cumulative rows x {with, without} stage 1\n"
         "  report   aggregate run manifests in out.dir into one table\n"
         "\n"
         "settings come from --config (key=value lines), then key=value overrides;\n"
         "--out DIR is shorthand for out.dir=DIR; SPECTRALX_SEED overrides the seed.\n"
         "exit codes: 1 usage, 2 config, 3 data, 4 numeric\n";
}

struct Command {
  std::string verb;
  std::string config_path;
  std::vector<std::string> overrides;
};

inline Command parse_command(const std::vector<std::string>& args) {
  if (args.empty()) throw UsageError("missing verb");
  Command cmd;
  cmd.verb = args[0];
  const std::vector<std::string> verbs = {"gen",  "adapt",  "train", "infer",
                                          "eval", "ablate", "report"};
  if (std::find(verbs.begin(), verbs.end(), cmd.verb) == verbs.end()) {
    throw UsageError("unknown verb: " + cmd.verb);
  }
  for (size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a == "--config") {
      if (++i >= args.size()) throw UsageError("--config needs a path");
      cmd.config_path = args[i];
    } else if (a == "--out") {
      if (++i >= args.size()) throw UsageError("--out needs a directory");
      cmd.overrides.push_back("out.dir=" + args[i]);
    } else if (a.rfind("--", 0) == 0) {
      throw UsageError("unknown flag: " + a);
    } else if (a.find('=') != std::string::npos) {
      cmd.overrides.push_back(a);
    } else {
      throw UsageError("expected key=value, got: " + a);
    }
  }
  return cmd;
}

inline RunConfig command_config(const Command& cmd) {
  ConfigMap cfg = cmd.config_path.empty() ? ConfigMap{} : parse_config_file(cmd.config_path);
  apply_overrides(cfg, cmd.overrides);
  return run_config_from(cfg);
}

namespace detail {

inline std::string scene_file(const std::string& domain, int64_t index) {
  std::ostringstream os;
  os << (domain == "source" ? "src_" : "tgt_") << std::setw(4) << std::setfill('0') << index
     << ".spxr";
  return os.str();
}

inline std::string weights_file(const RunConfig& rc) {
  return rc.weights_path.empty() ? rc.out_dir + "/weights.spxw" : rc.weights_path;
}

inline std::string pred_file(const RunConfig& rc, int64_t index) {
  std::ostringstream os;
  os << rc.out_dir << "/pred_" << std::setw(4) << std::setfill('0') << index << ".ppm";
  return os.str();
}

// Reads one split of a generated dataset back into memory. Scene values are
// float32 end to end, so this reproduces the in-memory dataset exactly.
inline SceneSet load_split(const RunConfig& rc, const std::string& split) {
  const auto entries = read_manifest(rc.data_dir + "/manifest.txt");
  SceneSet set;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    RasterFile raster = read_raster(rc.data_dir + "/" + e.path);
    if (!raster.labels) throw DataError("dataset scene lacks labels: " + e.path);
    set.images.push_back(std::move(raster.image));
    set.labels.push_back(std::move(*raster.labels));
  }
  if (set.size() == 0) throw DataError("dataset has no '" + split + "' scenes; run gen first");
  return set;
}

}  // namespace detail

// ----- verbs -------------------------------------------------------------------

inline int cmd_gen(const RunConfig& rc) {
  const Profile profile = Profile::by_name(rc.profile);
  std::filesystem::create_directories(rc.data_dir);
  const SceneSet train = source_train_set(profile, rc);
  const SceneSet test = target_test_set(profile, rc);

  std::vector<ManifestEntry> entries;
  for (size_t i = 0; i < train.size(); ++i) {
    ManifestEntry e{detail::scene_file("source", static_cast<int64_t>(i)), "source", "train"};
    write_raster(train.images[i], &train.labels[i], rc.data_dir + "/" + e.path);
    entries.push_back(e);
  }
  for (size_t i = 0; i < test.size(); ++i) {
    ManifestEntry e{detail::scene_file("target", static_cast<int64_t>(i)), "target", "test"};
    write_raster(test.images[i], &test.labels[i], rc.data_dir + "/" + e.path);
    entries.push_back(e);
  }
  write_manifest(entries, rc.data_dir + "/manifest.txt");
  std::cout << "gen: " << train.size() << " source train + " << test.size()
            << " target test scenes -> " << rc.data_dir << "\n";
  return 0;
}

inline int cmd_adapt(const RunConfig& rc) {
  const SceneSet train = detail::load_split(rc, "train");
  SpectralXModel model(Profile::by_name(rc.profile), rc.model_flags(), rc.seed);

  RunOutcome out;
  out.cfg = rc;
  out.stage1 = run_stage1(model, train, rc);
  out.ledger_stage1 = build_ledger(model.params());

  std::filesystem::create_directories(rc.out_dir);
  save_weights(model.params(), detail::weights_file(rc));
  const std::string manifest = write_manifest(out, "adapt");
  std::cout << "adapt: loss " << format_real(out.stage1.epoch_losses.front()) << " -> "
            << format_real(out.stage1.epoch_losses.back()) << " over " << rc.epochs_stage1
            << " epochs; weights " << detail::weights_file(rc) << "; manifest " << manifest
            << "\n";
  return 0;
}

inline int cmd_train(const RunConfig& rc) {
  const SceneSet train = detail::load_split(rc, "train");
  const SceneSet test = detail::load_split(rc, "test");
  SpectralXModel model(Profile::by_name(rc.profile), rc.model_flags(), rc.seed);

  const RunOutcome out = execute_run_on(model, rc, train, test);
  std::filesystem::create_directories(rc.out_dir);
  save_weights(model.params(), detail::weights_file(rc));
  const std::string manifest = write_manifest(out, "train");
  std::cout << "train: source miou " << format_real(out.source_eval.miou) << ", target miou "
            << format_real(out.target_eval.miou) << "; weights " << detail::weights_file(rc)
            << "; manifest " << manifest << "\n";
  return 0;
}

inline int cmd_infer(const RunConfig& rc) {
  const SceneSet test = detail::load_split(rc, "test");
  SpectralXModel model(Profile::by_name(rc.profile), rc.model_flags(), rc.seed);
  load_weights(model.params(), detail::weights_file(rc));

  std::filesystem::create_directories(rc.out_dir);
  ConfusionMatrix cm(model.profile().bb.classes);
  for (size_t i = 0; i < test.size(); ++i) {
    const SegmentationMap pred = model.predict(test.images[i]);
    write_ppm(pred, detail::pred_file(rc, static_cast<int64_t>(i)));
    cm.accumulate(test.labels[i], pred);
  }

  RunOutcome out;
  out.cfg = rc;
  out.target_eval =
      EvalResult{miou(cm), m_f1(cm), m_acc(cm), cm.total()};
  const std::string manifest = write_manifest(out, "infer");
  std::cout << "infer: " << test.size() << " scenes, target miou "
            << format_real(out.target_eval.miou) << "; maps in " << rc.out_dir << "; manifest "
            << manifest << "\n";
  return 0;
}

inline int cmd_eval(const RunConfig& rc) {
  const SceneSet test = detail::load_split(rc, "test");
  ConfusionMatrix cm(Profile::by_name(rc.profile).bb.classes);
  for (size_t i = 0; i < test.size(); ++i) {
    const SegmentationMap pred = read_ppm(detail::pred_file(rc, static_cast<int64_t>(i)));
    cm.accumulate(test.labels[i], pred);
  }

  RunOutcome out;
  out.cfg = rc;
  out.target_eval = EvalResult{miou(cm), m_f1(cm), m_acc(cm), cm.total()};
  const std::string manifest = write_manifest(out, "eval");
  std::cout << "eval: miou " << format_real(out.target_eval.miou) << ", m_f1 "
            << format_real(out.target_eval.m_f1) << ", m_acc " << format_real(out.target_eval.m_acc)
            << "; manifest " << manifest << "\n";
  return 0;
}

inline int cmd_ablate(const RunConfig& rc) {
  const SceneSet train = detail::load_split(rc, "train");
  const SceneSet test = detail::load_split(rc, "test");

  std::cout << "stage1  hypert  aomoa  are    target_miou  manifest\n";
  for (const RunConfig& cell : ablation_matrix(rc)) {
    const RunOutcome out = execute_run(cell, train, test);
    const std::string manifest = write_manifest(out, "ablate");
    std::cout << (cell.stage1_enabled ? "w/    " : "w/o   ") << "  "
              << (cell.flag_hypert ? "yes" : "no ") << "     " << (cell.flag_aomoa ? "yes" : "no ")
              << "    " << (cell.flag_are ? "yes" : "no ") << "    "
              << format_real(out.target_eval.miou) << "  " << manifest << "\n";
  }
  return 0;
}

inline int cmd_report(const RunConfig& rc) {
  std::vector<std::string> files;
  if (std::filesystem::is_directory(rc.out_dir)) {
    for (const auto& entry : std::filesystem::directory_iterator(rc.out_dir)) {
      const std::string name = entry.path().filename().string();
      if (name.rfind("run_", 0) == 0 && name.size() > 8 &&
          name.compare(name.size() - 4, 4, ".txt") == 0) {
        files.push_back(name);
      }
    }
  }
  if (files.empty()) throw DataError("report: no run manifests under " + rc.out_dir);
  std::sort(files.begin(), files.end());  // filenames embed the config hash

  std::ostringstream table;
  table << "run              kind    baseline  stage1  hypert  aomoa  are  seed  source_miou  "
           "target_miou\n";
  for (const std::string& name : files) {
    const ConfigMap m = parse_config_file(rc.out_dir + "/" + name);
    auto field = [&m](const std::string& key) {
      const auto it = m.find(key);
      return it == m.end() ? std::string("-") : it->second;
    };
    table << name.substr(4, 16) << " " << std::setw(7) << std::left << field("kind")
          << " " << std::setw(9) << field("config.baseline") << " " << std::setw(7)
          << field("config.flags.stage1") << " " << std::setw(7) << field("config.flags.hypert")
          << " " << std::setw(6) << field("config.flags.aomoa") << " " << std::setw(4)
          << field("config.flags.are") << " " << std::setw(5) << field("config.seed") << " "
          << std::setw(12) << field("eval.source.miou").substr(0, 8) << " "
          << field("eval.target.miou").substr(0, 8) << "\n";
  }
  const std::string text = table.str();
  std::filesystem::create_directories(rc.out_dir);
  std::ofstream f(rc.out_dir + "/report.txt", std::ios::trunc);
  if (!f) throw DataError("report: cannot write " + rc.out_dir + "/report.txt");
  f << text;
  std::cout << text;
  return 0;
}

// ----- entry point ---------------------------------------------------------------

inline int run_cli(const std::vector<std::string>& args) {
  try {
    const Command cmd = parse_command(args);
    const RunConfig rc = command_config(cmd);
    if (cmd.verb == "gen") return cmd_gen(rc);
    if (cmd.verb == "adapt") return cmd_adapt(rc);
    if (cmd.verb == "train") return cmd_train(rc);
    if (cmd.verb == "infer") return cmd_infer(rc);
    if (cmd.verb == "eval") return cmd_eval(rc);
    if (cmd.verb == "ablate") return cmd_ablate(rc);
    return cmd_report(rc);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << usage_text();
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace spectralx
