#pragma once

// Fused classifier: semantic branch (CNN or patch transformer) and keypoint
// graph branch, concatenated and fed to a two-layer MLP head.
//
// Gradient contract: parameter gradients reach both branches; pixel gradients
// reach only the semantic branch. The graph is rebuilt from the given pixels on
// every call and enters each differentiation as a constant.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "siftgraph/backbone.hpp"
#include "siftgraph/checkpoint.hpp"
#include "siftgraph/data.hpp"
#include "siftgraph/gat.hpp"
#include "siftgraph/graph.hpp"
#include "siftgraph/graph_cache.hpp"
#include "siftgraph/parallel.hpp"
#include "siftgraph/sift.hpp"
#include "siftgraph/tensor.hpp"

namespace siftgraph {

struct FusedModelConfig {
  BackboneKind backbone = BackboneKind::cnn;
  bool use_graph_branch = true;
  int n_classes = 4;
  int k = kDefaultNeighbors;
  std::size_t input_size = 64;
  std::size_t channels = 3;
  std::size_t d = 128;
  std::size_t hidden = 128;
  SiftConfig sift;
  GatConfig gat;
  CnnConfig cnn;
  VitConfig vit;

  // Branch configs with the shared input geometry applied.
  CnnConfig cnn_config() const {
    CnnConfig c = cnn;
    c.input_size = input_size;
    c.channels_in = channels;
    c.out_dim = d;
    return c;
  }
  VitConfig vit_config() const {
    VitConfig v = vit;
    v.input_size = input_size;
    v.channels_in = channels;
    v.out_dim = d;
    return v;
  }

  void validate() const {
    if (n_classes < 2) throw validation_error("model: n_classes must be >= 2");
    if (k < 1) throw validation_error("model: k must be >= 1");
    if (d == 0 || hidden == 0) throw validation_error("model: widths must be positive");
    if (gat.out_dim() != d)
      throw validation_error("model: graph embedding width " + std::to_string(gat.out_dim()) + " differs from d = " +
                             std::to_string(d));
    sift.validate();
    gat.validate();
    if (backbone == BackboneKind::cnn) cnn_config().validate();
    else vit_config().validate();
  }

  std::string canonical() const {
    std::ostringstream os;
    os << "backbone=" << to_string(backbone) << ";graph=" << use_graph_branch << ";classes=" << n_classes
       << ";k=" << k << ";size=" << input_size << ";channels=" << channels << ";d=" << d << ";hidden=" << hidden
       << ";sift{" << sift.canonical() << "};gat{" << gat.n_layers << ',' << gat.heads << ',' << gat.head_dim << ','
       << gat.in_dim << ',' << gat.slope << "}";
    if (backbone == BackboneKind::cnn) {
      os << ";cnn{";
      for (auto s : cnn.stages) os << s << ',';
      os << '}';
    } else {
      os << ";vit{" << vit.patch << ',' << vit.dim << ',' << vit.layers << ',' << vit.heads << ',' << vit.mlp_ratio
         << '}';
    }
    return os.str();
  }

  std::uint64_t digest() const { return fnv1a64(canonical()); }
};

struct Prediction {
  std::vector<float> logits;
  std::vector<float> probabilities;
  int predicted = 0;
};

// Softmax and lowest-index argmax of a logit row.
inline Prediction make_prediction(std::span<const float> logits) {
  Prediction p;
  p.logits.assign(logits.begin(), logits.end());
  p.predicted = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  const float mx = logits[static_cast<std::size_t>(p.predicted)];
  double total = 0;
  for (float v : logits) total += std::exp(static_cast<double>(v - mx));
  for (float v : logits) p.probabilities.push_back(static_cast<float>(std::exp(static_cast<double>(v - mx)) / total));
  return p;
}

// Semantic parameters come from seed, graph parameters from seed + 1 and the
// head from seed + 2, so baseline and fused models built from one seed share
// their semantic initialization.
inline ParamSet init_model(const FusedModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParamSet p;
  std::mt19937_64 sem_rng(seed), gat_rng(seed + 1), head_rng(seed + 2);
  if (cfg.backbone == BackboneKind::cnn) init_cnn_params(p, cfg.cnn_config(), sem_rng, "cnn.");
  else init_vit_params(p, cfg.vit_config(), sem_rng, "vit.");
  if (cfg.use_graph_branch) init_gat_params(p, cfg.gat, gat_rng, "gat.");
  const std::size_t in = 2 * cfg.d, h = cfg.hidden, c = static_cast<std::size_t>(cfg.n_classes);
  p.add("head.w1", glorot_uniform({in, h}, in, h, head_rng));
  p.add("head.b1", Tensor::zeros({h}, true));
  // Small output layer: untrained logits stay near uniform for either backbone.
  p.add("head.w2", glorot_uniform({h, c}, h, c, head_rng, 0.1f));
  p.add("head.b2", Tensor::zeros({c}, true));
  return p;
}

// Pixels are centred (x - 0.5) before entering the backbone.
inline Tensor semantic_embedding(const Tensor& chw, const ParamSet& params, const FusedModelConfig& cfg) {
  const Tensor x = sub(chw, Tensor::full(chw.shape(), 0.5f));
  return cfg.backbone == BackboneKind::cnn ? cnn_forward(x, params, cfg.cnn_config(), "cnn.")
                                           : vit_forward(x, params, cfg.vit_config(), "vit.");
}

// Logits [1, C]. A null graph, or a model without the graph branch, puts a
// zero vector in the graph half of the fused embedding.
inline Tensor model_logits(const Tensor& chw, const KeypointGraph* graph, const ParamSet& params,
                           const FusedModelConfig& cfg) {
  const Tensor z_sem = semantic_embedding(chw, params, cfg);
  const Tensor z_gat = cfg.use_graph_branch && graph ? encode(*graph, params, cfg.gat, "gat.") : Tensor::zeros({cfg.d});
  const Tensor fused = reshape(concat(z_sem, z_gat, 0), {1, 2 * cfg.d});
  const Tensor hidden = relu(linear(fused, params.at("head.w1"), params.at("head.b1")));
  return linear(hidden, params.at("head.w2"), params.at("head.b2"));
}

// Graph for an image in model space; served from `cache` when given.
inline std::shared_ptr<const KeypointGraph> model_graph(const ImageTensor& img, const FusedModelConfig& cfg,
                                                        const NormalizationStats& stats, GraphCache* cache = nullptr) {
  if (!cfg.use_graph_branch) return nullptr;
  if (cache) return cache->get(img);
  return std::make_shared<const KeypointGraph>(build_graph(img, cfg.sift, stats, cfg.k));
}

inline void check_input(const ImageTensor& img, const FusedModelConfig& cfg) {
  if (img.height != cfg.input_size || img.width != cfg.input_size || img.channels != cfg.channels)
    throw validation_error("model: expected a " + std::to_string(cfg.input_size) + "x" + std::to_string(cfg.input_size) +
                           "x" + std::to_string(cfg.channels) + " image, got " + std::to_string(img.height) + "x" +
                           std::to_string(img.width) + "x" + std::to_string(img.channels));
}

inline Prediction forward(const ImageTensor& img, const ParamSet& params, const FusedModelConfig& cfg,
                          const NormalizationStats& stats, GraphCache* cache = nullptr) {
  check_input(img, cfg);
  const auto graph = model_graph(img, cfg, stats, cache);
  return make_prediction(model_logits(to_chw_tensor(img), graph.get(), params, cfg).values());
}

// Mean cross-entropy over a batch; backward() on the result fills parameter gradients.
inline Tensor loss(std::span<const ImageTensor> images, std::span<const int> labels, const ParamSet& params,
                   const FusedModelConfig& cfg, const NormalizationStats& stats, GraphCache* cache = nullptr) {
  if (images.empty()) throw validation_error("loss: empty batch");
  if (images.size() != labels.size()) throw validation_error("loss: image and label counts differ");
  std::vector<Tensor> rows;
  rows.reserve(images.size());
  for (const auto& img : images) {
    check_input(img, cfg);
    const auto graph = model_graph(img, cfg, stats, cache);
    rows.push_back(model_logits(to_chw_tensor(img), graph.get(), params, cfg));
  }
  return softmax_cross_entropy(concat(rows, 0), labels);
}

struct InputGradient {
  float loss = 0;
  std::vector<float> grad;  // same layout as ImageTensor::values
  Prediction prediction;
};

// Cross-entropy and its gradient with respect to the pixels of one image,
// under the gradient contract above.
inline InputGradient input_gradient(const ImageTensor& img, int label, const ParamSet& params,
                                    const FusedModelConfig& cfg, const NormalizationStats& stats) {
  check_input(img, cfg);
  const auto graph = model_graph(img, cfg, stats);
  const Tensor x = to_chw_tensor(img, true);
  const Tensor logits = model_logits(x, graph.get(), params.replica(), cfg);
  const int lab[1] = {label};
  const Tensor ce = softmax_cross_entropy(logits, lab);
  backward(ce, false);
  InputGradient out;
  out.loss = ce.item();
  out.prediction = make_prediction(logits.values());
  ImageTensor g(img.height, img.width, img.channels);
  if (x.has_grad()) chw_to_image(x.grad(), g);
  out.grad = std::move(g.values);
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 15;
  std::size_t batch = 32;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool flip = true;
  unsigned threads = 1;
  std::optional<std::filesystem::path> cache_dir;
  std::ostream* log = &std::cout;

  void validate() const {
    if (epochs == 0) throw validation_error("train: epochs must be >= 1");
    if (batch == 0) throw validation_error("train: batch must be >= 1");
    if (!(lr > 0) || !(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1) || !(adam_eps > 0))
      throw validation_error("train: invalid optimizer hyperparameters");
  }
};

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  // grads[i] belongs to the i-th parameter in ParamSet order.
  void step(ParamSet& params, const std::vector<std::vector<float>>& grads) {
    ++t_;
    if (m_.empty()) {
      for (const auto& [_, p] : params) {
        m_.emplace_back(p.size(), 0.0);
        v_.emplace_back(p.size(), 0.0);
      }
    }
    const double c1 = 1 - std::pow(b1_, static_cast<double>(t_)), c2 = 1 - std::pow(b2_, static_cast<double>(t_));
    std::size_t i = 0;
    for (auto& [_, p] : params) {
      auto w = p.mutable_values();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double g = grads[i][j];
        m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * g;
        v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * g * g;
        w[j] = static_cast<float>(w[j] - lr_ * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_));
      }
      ++i;
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

inline ImageTensor flip_horizontal(const ImageTensor& img) {
  ImageTensor out(img.height, img.width, img.channels);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) out.at(y, img.width - 1 - x, c) = img.at(y, x, c);
  return out;
}

// Population coordinate statistics of the keypoints of `samples`.
inline NormalizationStats training_stats(const std::vector<Sample>& samples, const SiftConfig& sift, unsigned threads) {
  std::vector<std::vector<Feature>> feats(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) { feats[i] = extract(samples[i].image, sift); });
  return compute_normalization_stats(feats);
}

inline double evaluate(const std::vector<Sample>& split, const ParamSet& params, const FusedModelConfig& cfg,
                       const NormalizationStats& stats, unsigned threads = 1, GraphCache* cache = nullptr) {
  if (split.empty()) throw validation_error("evaluate: empty split");
  std::vector<char> correct(split.size());
  parallel_for(split.size(), threads, [&](std::size_t i) {
    correct[i] = forward(split[i].image, params, cfg, stats, cache).predicted == split[i].label;
  });
  return static_cast<double>(std::count(correct.begin(), correct.end(), 1)) / static_cast<double>(split.size());
}

struct TrainResult {
  ParamSet params;
  NormalizationStats stats;
  std::vector<EpochRecord> history;
  std::size_t warmup_extractions = 0;  // SIFT runs before the first epoch
  std::vector<std::size_t> extractions_per_epoch;  // during each epoch's training pass
};

// Per-sample gradients are computed on parameter replicas and summed in
// sample order, so results do not depend on the thread count. Validation
// accuracy is measured on the test split after every epoch. Normalization
// statistics come from the training split only.
inline TrainResult train(const Dataset& ds, const FusedModelConfig& cfg, const TrainConfig& tc) {
  cfg.validate();
  tc.validate();
  if (ds.train.empty()) throw validation_error("train: empty training split");
  if (ds.n_classes != cfg.n_classes)
    throw validation_error("train: dataset has " + std::to_string(ds.n_classes) + " classes, model expects " +
                           std::to_string(cfg.n_classes));

  TrainResult res;
  res.params = init_model(cfg, tc.seed);
  std::optional<GraphCache> cache;
  if (cfg.use_graph_branch) {
    // One extraction pass yields the statistics and the clean graphs; flipped
    // copies are added up front so epochs never wait on SIFT.
    std::vector<std::vector<Feature>> feats(ds.train.size());
    parallel_for(ds.train.size(), tc.threads, [&](std::size_t i) { feats[i] = extract(ds.train[i].image, cfg.sift); });
    res.stats = compute_normalization_stats(feats);
    cache.emplace(cfg.sift, res.stats, cfg.k, tc.cache_dir);
    parallel_for(ds.train.size(), tc.threads, [&](std::size_t i) {
      const auto& img = ds.train[i].image;
      cache->insert(img, graph_from_features(feats[i], res.stats, cfg.k, img.width, img.height));
      if (tc.flip) cache->get(flip_horizontal(img));
    });
    res.warmup_extractions = ds.train.size() + cache->extractions();
  }
  GraphCache* cache_ptr = cache ? &*cache : nullptr;

  Adam opt(tc.lr, tc.beta1, tc.beta2, tc.adam_eps);
  std::mt19937_64 rng(tc.seed ^ 0x5eedf00dULL);
  std::vector<std::size_t> order(ds.train.size());
  std::vector<std::size_t> param_sizes;
  for (const auto& [_, p] : res.params) param_sizes.push_back(p.size());

  for (std::size_t epoch = 1; epoch <= tc.epochs; ++epoch) {
    const std::size_t extractions_before = cache ? cache->extractions() : 0;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<char> flips(order.size());
    std::bernoulli_distribution coin(0.5);
    for (auto& f : flips) f = tc.flip && coin(rng);

    double epoch_loss = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch) {
      const std::size_t n = std::min(tc.batch, order.size() - start);
      std::vector<std::vector<std::vector<float>>> grads(n);
      std::vector<double> losses(n);
      parallel_for(n, tc.threads, [&](std::size_t b) {
        const auto& s = ds.train[order[start + b]];
        const ImageTensor img = flips[start + b] ? flip_horizontal(s.image) : s.image;
        check_input(img, cfg);
        const auto graph = model_graph(img, cfg, res.stats, cache_ptr);
        const ParamSet local = res.params.replica();
        const int lab[1] = {s.label};
        const Tensor ce = softmax_cross_entropy(model_logits(to_chw_tensor(img), graph.get(), local, cfg), lab);
        backward(ce, false);
        losses[b] = ce.item();
        auto& g = grads[b];
        for (const auto& [_, p] : local) {
          if (p.has_grad()) g.emplace_back(p.grad().begin(), p.grad().end());
          else g.emplace_back(p.size(), 0.0f);
        }
      });
      std::vector<std::vector<float>> total(param_sizes.size());
      for (std::size_t i = 0; i < param_sizes.size(); ++i) total[i].assign(param_sizes[i], 0.0f);
      const float inv = 1.0f / static_cast<float>(n);
      for (std::size_t b = 0; b < n; ++b) {
        epoch_loss += losses[b];
        for (std::size_t i = 0; i < total.size(); ++i)
          for (std::size_t j = 0; j < total[i].size(); ++j) total[i][j] += grads[b][i][j] * inv;
      }
      opt.step(res.params, total);
    }
    res.extractions_per_epoch.push_back(cache ? cache->extractions() - extractions_before : 0);
    EpochRecord rec;
    rec.epoch = static_cast<int>(epoch);
    rec.loss = epoch_loss / static_cast<double>(order.size());
    rec.val_acc = ds.test.empty() ? 0.0 : evaluate(ds.test, res.params, cfg, res.stats, tc.threads, cache_ptr);
    res.history.push_back(rec);
    if (tc.log) {
      char line[96];
      std::snprintf(line, sizeof line, "epoch %d loss %.6f val_acc %.6f\n", rec.epoch, rec.loss, rec.val_acc);
      *tc.log << line << std::flush;
    }
  }
  return res;
}

inline Checkpoint make_checkpoint(const TrainResult& r, const FusedModelConfig& cfg) {
  Checkpoint ck;
  ck.config_digest = cfg.digest();
  ck.params = r.params.clone();
  ck.stats = r.stats;
  ck.history = r.history;
  return ck;
}

}  // namespace siftgraph
