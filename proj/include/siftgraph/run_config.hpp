#pragma once

// Flat `key = value` run configuration shared by every CLI command.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "siftgraph/attack.hpp"
#include "siftgraph/data.hpp"
#include "siftgraph/error.hpp"
#include "siftgraph/model.hpp"

namespace siftgraph {

struct ConfigKey {
  std::string name;
  std::string default_value;
  std::string help;
};

inline const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys{
      {"dataset", "shapes", "shapes or cifar10"},
      {"data_dir", "", "directory holding the CIFAR-10 binary batches"},
      {"limit", "0", "cap on CIFAR-10 samples per split (0 = all)"},
      {"n_train", "2000", "synthetic shapes: training samples"},
      {"n_test", "500", "synthetic shapes: test samples"},
      {"image_size", "64", "model input side in pixels"},
      {"n_classes", "4", "synthetic shapes: number of classes (2-4)"},
      {"data_seed", "17", "synthetic shapes: generator seed"},
      {"backbone", "cnn", "semantic branch: cnn or vit"},
      {"variant", "fused", "fused, baseline or both (train only)"},
      {"k", "5", "neighbours per keypoint in the graph"},
      {"graph_k_list", "1,3,5,8", "k values rendered by the graph command"},
      {"sift.n_octaves", "0", "octaves (0 = automatic)"},
      {"sift.scales_per_octave", "3", "DoG scales per octave"},
      {"sift.base_sigma", "1.6", "blur of the first pyramid level"},
      {"sift.contrast_threshold", "0.03", "minimum |DoG| response"},
      {"sift.edge_ratio", "10", "principal curvature ratio limit"},
      {"sift.max_keypoints", "256", "keypoints kept per image, by response"},
      {"sift.upscale_factor", "1", "resize factor applied before detection"},
      {"epochs", "15", "training epochs"},
      {"batch", "32", "training batch size"},
      {"lr", "0.001", "Adam learning rate"},
      {"beta1", "0.9", "Adam first-moment decay"},
      {"beta2", "0.999", "Adam second-moment decay"},
      {"flip", "true", "random horizontal flip augmentation"},
      {"cache_dir", "", "on-disk graph cache root (empty = memory only)"},
      {"eps_min", "0.001", "smallest nonzero attack budget"},
      {"eps_max", "0.1", "largest attack budget"},
      {"eps_n", "9", "number of log-spaced budgets"},
      {"eps_list", "", "explicit comma-separated budgets (overrides the grid)"},
      {"pgd_steps", "10", "PGD iterations (step 2.5 * epsilon / steps)"},
      {"random_start", "true", "uniform PGD start inside the budget"},
      {"stability_noise", "2,4,8,16", "noise std-devs on the 0-255 scale"},
      {"seed", "0", "training and attack seed"},
      {"threads", "1", "worker threads"},
      {"out", "out", "output directory"},
  };
  return keys;
}

class RunConfig {
 public:
  RunConfig() {
    for (const auto& k : config_keys()) values_[k.name] = k.default_value;
  }

  static RunConfig parse(std::string_view text, const std::string& source = "config") {
    RunConfig cfg;
    std::istringstream in{std::string(text)};
    std::string line;
    for (int n = 1; std::getline(in, line); ++n) {
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string t = trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string::npos)
        throw usage_error(source + ":" + std::to_string(n) + ": expected 'key = value'");
      cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)), source + ":" + std::to_string(n) + ": ");
    }
    return cfg;
  }

  static RunConfig load(const std::filesystem::path& path) { return parse(read_file(path), path.string()); }

  void set(const std::string& key, const std::string& value, const std::string& where = "") {
    auto it = values_.find(key);
    if (it == values_.end()) throw usage_error(where + "unknown config key '" + key + "'");
    it->second = value;
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw usage_error("unknown config key '" + key + "'");
    return it->second;
  }

  double num(const std::string& key) const {
    const auto& s = str(key);
    double v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size() || !std::isfinite(v))
      throw validation_error("config key '" + key + "': '" + s + "' is not a number");
    return v;
  }

  std::uint64_t uint(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size())
      throw validation_error("config key '" + key + "': '" + s + "' is not a non-negative integer");
    return v;
  }

  bool flag(const std::string& key) const {
    const auto& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw validation_error("config key '" + key + "': '" + s + "' is not a boolean");
  }

  std::vector<double> list(const std::string& key) const {
    std::vector<double> out;
    std::istringstream in(str(key));
    std::string item;
    while (std::getline(in, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      double v = 0;
      const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc{} || p != item.data() + item.size() || !std::isfinite(v))
        throw validation_error("config key '" + key + "': '" + item + "' is not a number");
      out.push_back(v);
    }
    return out;
  }

  // Effective configuration, one `key = value` line per key in documented order.
  std::string echo() const {
    std::string out;
    for (const auto& k : config_keys()) out += k.name + " = " + values_.at(k.name) + "\n";
    return out;
  }

  // -------------------------------------------------------------------------
  // Typed views
  // -------------------------------------------------------------------------

  SiftConfig sift() const {
    SiftConfig s;
    s.n_octaves = static_cast<int>(uint("sift.n_octaves"));
    s.scales_per_octave = static_cast<int>(uint("sift.scales_per_octave"));
    s.base_sigma = num("sift.base_sigma");
    s.contrast_threshold = static_cast<float>(num("sift.contrast_threshold"));
    s.edge_ratio = static_cast<float>(num("sift.edge_ratio"));
    s.max_keypoints = uint("sift.max_keypoints");
    s.upscale_factor = num("sift.upscale_factor");
    s.validate();
    return s;
  }

  FusedModelConfig model(bool fused) const {
    FusedModelConfig m;
    m.backbone = parse_backbone(str("backbone"));
    m.use_graph_branch = fused;
    m.n_classes = str("dataset") == "cifar10" ? 10 : static_cast<int>(uint("n_classes"));
    m.k = static_cast<int>(uint("k"));
    m.input_size = uint("image_size");
    m.sift = sift();
    m.validate();
    return m;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.epochs = uint("epochs");
    t.batch = uint("batch");
    t.lr = num("lr");
    t.beta1 = num("beta1");
    t.beta2 = num("beta2");
    t.flip = flag("flip");
    t.seed = uint("seed");
    t.threads = threads();
    if (!str("cache_dir").empty()) t.cache_dir = std::filesystem::path(str("cache_dir"));
    t.validate();
    return t;
  }

  AttackConfig attack() const {
    AttackConfig a;
    a.steps = static_cast<int>(uint("pgd_steps"));
    a.random_start = flag("random_start");
    a.seed = uint("seed");
    a.validate();
    return a;
  }

  std::vector<double> grid() const {
    auto explicit_list = list("eps_list");
    if (!explicit_list.empty()) return explicit_list;
    return epsilon_grid(num("eps_min"), num("eps_max"), static_cast<int>(uint("eps_n")));
  }

  unsigned threads() const {
    const auto t = uint("threads");
    if (t == 0 || t > 1024) throw validation_error("config key 'threads' must be in [1, 1024]");
    return static_cast<unsigned>(t);
  }

  std::vector<std::string> variants() const {
    const auto& v = str("variant");
    if (v == "fused" || v == "baseline") return {v};
    if (v == "both") return {"fused", "baseline"};
    throw validation_error("config key 'variant': expected fused, baseline or both, got '" + v + "'");
  }

  // Dataset in model space (resized to image_size).
  Dataset dataset() const { return load_dataset(false); }

  // Same test split as dataset(); synthetic training data is not generated.
  Dataset test_dataset() const { return load_dataset(true); }

 private:
  Dataset load_dataset(bool test_only) const {
    const auto& name = str("dataset");
    Dataset ds;
    if (name == "shapes") {
      const auto c = uint("n_classes");
      ds = make_synthetic_shapes(test_only ? c : uint("n_train"), uint("n_test"), uint("image_size"),
                                 static_cast<int>(c), uint("data_seed"));
      if (test_only) ds.train.clear();
    } else if (name == "cifar10") {
      if (str("data_dir").empty()) throw validation_error("config key 'data_dir' is required for cifar10");
      ds = load_cifar10(str("data_dir"), uint("limit"));
      preprocess_dataset(ds, uint("image_size"));
    } else {
      throw validation_error("config key 'dataset': expected shapes or cifar10, got '" + name + "'");
    }
    ds.validate();
    return ds;
  }

  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
  }

  std::map<std::string, std::string> values_;
};

}  // namespace siftgraph
