#pragma once

// Command-line driver. run_cli() never throws: every failure becomes a single
// `siftgraph: error: ...` line and an exit code (1 usage, 2 I/O, 3 validation).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "siftgraph/attack.hpp"
#include "siftgraph/checkpoint.hpp"
#include "siftgraph/io.hpp"
#include "siftgraph/run_config.hpp"
#include "siftgraph/svg.hpp"

namespace siftgraph {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitIo = 2;
inline constexpr int kExitValidation = 3;

namespace cli {

inline std::string key_table() {
  std::string out = "Config keys (key = default):\n";
  for (const auto& k : config_keys()) {
    std::string line = "  " + k.name + " = " + (k.default_value.empty() ? "\"\"" : k.default_value);
    if (line.size() < 38) line.append(38 - line.size(), ' ');
    out += line + "  " + k.help + "\n";
  }
  return out;
}

inline std::string stats_text(const NormalizationStats& s) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "mu_x = %.17g\nmu_y = %.17g\nsigma_x = %.17g\nsigma_y = %.17g\neps = %.17g\n", s.mu_x,
                s.mu_y, s.sigma_x, s.sigma_y, s.eps);
  return buf;
}

inline std::string history_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,loss,val_acc\n";
  for (const auto& h : history) {
    char line[96];
    std::snprintf(line, sizeof line, "%d,%.6f,%.6f\n", h.epoch, h.loss, h.val_acc);
    out += line;
  }
  return out;
}

inline std::string features_text(const std::vector<Feature>& feats) {
  std::ostringstream os;
  write_features(os, feats);
  return os.str();
}

inline void write_config(const fs::path& dir, const RunConfig& rc) { atomic_write(dir / "config.txt", rc.echo()); }

inline void cmd_extract(const RunConfig& rc, const fs::path& image, std::ostream& out) {
  const fs::path dir = rc.str("out");
  const ImageTensor img = read_ppm(image);
  // Round-tripping through the text form makes the overlay use the exact
  // values written to keypoints.txt.
  const std::string text = features_text(extract(img, rc.sift()));
  std::istringstream in(text);
  const auto feats = read_features(in);
  atomic_write(dir / "keypoints.txt", text);
  atomic_write(dir / "keypoints.svg", keypoint_svg(img, feats));
  write_config(dir, rc);
  out << feats.size() << " keypoints -> " << (dir / "keypoints.txt").string() << "\n";
}

inline void cmd_graph(const RunConfig& rc, const fs::path& image, std::ostream& out) {
  const fs::path dir = rc.str("out");
  const ImageTensor img = read_ppm(image);
  const auto feats = extract(img, rc.sift());
  // A single image has no training corpus; its own keypoints define the
  // coordinate normalization.
  const NormalizationStats stats = feats.empty() ? NormalizationStats{} : compute_normalization_stats({feats});
  const auto ks = rc.list("graph_k_list");
  if (ks.empty()) throw validation_error("config key 'graph_k_list' is empty");
  for (double kv : ks) {
    if (kv < 1 || kv != std::floor(kv)) throw validation_error("config key 'graph_k_list': bad k " + std::to_string(kv));
    const int k = static_cast<int>(kv);
    const auto g = graph_from_features(feats, stats, k, img.width, img.height);
    std::ostringstream text;
    write_graph(text, g);
    // The SVG reads coordinates back from the text form, as a consumer would.
    std::istringstream in(text.str());
    const auto parsed = read_graph(in);
    const std::string stem = "graph_k" + std::to_string(k);
    atomic_write(dir / (stem + ".txt"), text.str());
    atomic_write(dir / (stem + ".svg"), graph_svg(img, parsed, stats, k == kDefaultNeighbors));
    out << stem << ": " << g.n_nodes << " nodes, " << g.edges.size() / 2 << " undirected edges"
        << (k == kDefaultNeighbors ? " (default k)" : "") << "\n";
  }
  atomic_write(dir / "stats.txt", stats_text(stats));
  write_config(dir, rc);
}

inline void cmd_train(const RunConfig& rc, std::ostream& out) {
  const fs::path root = rc.str("out");
  const auto variants = rc.variants();
  std::vector<FusedModelConfig> cfgs;
  for (const auto& v : variants) cfgs.push_back(rc.model(v == "fused"));
  TrainConfig tc = rc.train();
  tc.log = &out;
  const Dataset ds = rc.dataset();
  write_config(root, rc);
  for (std::size_t i = 0; i < variants.size(); ++i) {
    const fs::path dir = variants.size() > 1 ? root / variants[i] : root;
    out << "training " << variants[i] << " (" << to_string(cfgs[i].backbone) << ", " << ds.train.size()
        << " samples)\n";
    const TrainResult res = train(ds, cfgs[i], tc);
    save_checkpoint(dir / "checkpoint.sgck", make_checkpoint(res, cfgs[i]));
    atomic_write(dir / "stats.txt", stats_text(res.stats));
    atomic_write(dir / "history.csv", history_csv(res.history));
    if (dir != root) write_config(dir, rc);
  }
}

inline void cmd_sweep(const RunConfig& rc, const std::vector<std::string>& paths, std::ostream& out) {
  const fs::path dir = rc.str("out");
  const FusedModelConfig fused = rc.model(true), baseline = rc.model(false);
  const auto grid = rc.grid();
  const AttackConfig atk = rc.attack();
  std::vector<Checkpoint> cks;
  std::vector<ModelVariant> variants;
  cks.reserve(paths.size());
  for (const auto& p : paths) {
    cks.push_back(load_checkpoint(p));
    const auto& ck = cks.back();
    ModelVariant v;
    if (ck.config_digest == fused.digest()) {
      v.name = "fused";
      v.cfg = fused;
    } else if (ck.config_digest == baseline.digest()) {
      v.name = "baseline";
      v.cfg = baseline;
    } else {
      throw CheckpointError(CheckpointFault::config_mismatch,
                            p + ": checkpoint was trained with a different model configuration");
    }
    for (const auto& other : variants)
      if (other.name == v.name) throw validation_error(p + ": a " + v.name + " checkpoint was already given");
    v.stats = ck.stats;
    variants.push_back(v);
  }
  for (std::size_t i = 0; i < variants.size(); ++i) variants[i].params = &cks[i].params;
  const Dataset ds = rc.test_dataset();
  const EvalReport rep = sweep(ds.test, variants, grid, atk, ds.name, rc.threads());
  rep.validate();
  if (rep.budget_violations != 0)
    throw validation_error("sweep: " + std::to_string(rep.budget_violations) + " adversarial examples left the budget");
  atomic_write(dir / "sweep.csv", rep.csv());
  atomic_write(dir / "sweep.svg", sweep_svg(rep));
  write_config(dir, rc);
  out << rep.csv();
}

inline void cmd_stability(const RunConfig& rc, const fs::path& image, std::ostream& out) {
  const fs::path dir = rc.str("out");
  const ImageTensor img = read_ppm(image);
  const auto levels255 = rc.list("stability_noise");
  if (levels255.empty()) throw validation_error("config key 'stability_noise' is empty");
  std::vector<double> levels;
  for (double l : levels255) {
    if (l < 0) throw validation_error("config key 'stability_noise': negative noise level");
    levels.push_back(l / 255.0);
  }
  const auto reports = measure_keypoint_stability(img, levels, rc.uint("seed"), rc.sift());
  std::string csv = "noise,repeatability,desc_dist,pixel_dist\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    char line[128];
    std::snprintf(line, sizeof line, "%g,%.6f,%.6f,%.6f\n", levels255[i], reports[i].repeatability,
                  reports[i].mean_descriptor_distance, reports[i].mean_pixel_distance);
    csv += line;
  }
  atomic_write(dir / "stability.csv", csv);
  write_config(dir, rc);
  out << csv;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  auto fail = [&](int code, const std::string& what) {
    std::string line = what;
    for (auto& c : line)
      if (c == '\n' || c == '\r') c = ' ';
    err << "siftgraph: error: " << line << std::endl;
    return code;
  };

  CLI::App app{"Keypoint-graph fusion classifiers: feature extraction, training and adversarial evaluation."};
  app.name("siftgraph");
  app.footer(cli::key_table());
  app.require_subcommand(1, 1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<std::string> out_dir, variant;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "Run configuration file (key = value lines)");
  app.add_option("--seed", seed, "Override the seed key");
  app.add_option("--out", out_dir, "Override the out key");
  app.add_option("--threads", threads, "Override the threads key");
  app.add_option("--variant", variant, "Override the variant key: fused, baseline or both");
  app.add_option("--set", sets, "Override any key: --set key=value (repeatable)");

  std::string image;
  std::vector<std::string> checkpoints;
  auto* extract_cmd = app.add_subcommand("extract", "SIFT keypoints of a PPM image: keypoints.txt and keypoints.svg");
  extract_cmd->add_option("image", image, "Input PPM image")->required();
  auto* graph_cmd = app.add_subcommand("graph", "k-NN keypoint graphs for every k in graph_k_list, text and SVG");
  graph_cmd->add_option("image", image, "Input PPM image")->required();
  auto* train_cmd = app.add_subcommand("train", "Train the configured variant(s): checkpoint, stats, history");
  auto* sweep_cmd = app.add_subcommand("sweep", "PGD accuracy sweep over the epsilon grid: sweep.csv and sweep.svg");
  sweep_cmd->add_option("checkpoints", checkpoints, "Checkpoint files (one fused and/or one baseline)")->required();
  auto* stability_cmd = app.add_subcommand("stability", "Keypoint stability under Gaussian noise: stability.csv");
  stability_cmd->add_option("image", image, "Input PPM image")->required();

  try {
    std::vector<std::string> args;
    for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    return fail(kExitUsage, e.what());
  }

  try {
    RunConfig rc = config_path.empty() ? RunConfig{} : RunConfig::load(config_path);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw usage_error("--set expects key=value, got '" + s + "'");
      rc.set(s.substr(0, eq), s.substr(eq + 1), "--set: ");
    }
    if (seed) rc.set("seed", std::to_string(*seed));
    if (out_dir) rc.set("out", *out_dir);
    if (threads) rc.set("threads", std::to_string(*threads));
    if (variant) rc.set("variant", *variant);
    rc.threads();
    rc.variants();

    if (extract_cmd->parsed()) cli::cmd_extract(rc, image, out);
    else if (graph_cmd->parsed()) cli::cmd_graph(rc, image, out);
    else if (train_cmd->parsed()) cli::cmd_train(rc, out);
    else if (sweep_cmd->parsed()) cli::cmd_sweep(rc, checkpoints, out);
    else if (stability_cmd->parsed()) cli::cmd_stability(rc, image, out);
    return kExitOk;
  } catch (const Error& e) {
    switch (e.kind()) {
      case ErrorKind::usage: return fail(kExitUsage, e.what());
      case ErrorKind::io: return fail(kExitIo, e.what());
      case ErrorKind::validation: return fail(kExitValidation, e.what());
    }
    return fail(kExitValidation, e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kExitIo, e.what());
  } catch (const std::exception& e) {
    return fail(kExitValidation, e.what());
  }
}

}  // namespace siftgraph
