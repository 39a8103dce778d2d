#pragma once

// L-infinity FGSM and PGD in model input space, and the accuracy-versus-epsilon
// sweep over several model variants.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "siftgraph/model.hpp"
#include "siftgraph/parallel.hpp"

namespace siftgraph {

struct AttackConfig {
  double epsilon = 0;
  int steps = 10;
  std::optional<double> step_size;  // default 2.5 * epsilon / steps
  bool random_start = true;
  std::uint64_t seed = 0;

  double step() const { return step_size ? *step_size : 2.5 * epsilon / steps; }

  void validate() const {
    if (!(epsilon >= 0) || !std::isfinite(epsilon)) throw validation_error("attack: epsilon must be >= 0");
    if (steps < 1) throw validation_error("attack: steps must be >= 1");
    if (epsilon > 0 && !(step() > 0)) throw validation_error("attack: step size must be > 0");
  }
};

// Loss and pixel gradient of the attacked objective at an image.
using LossGradient = std::function<InputGradient(const ImageTensor&)>;

inline LossGradient model_objective(int label, const ParamSet& params, const FusedModelConfig& cfg,
                                    const NormalizationStats& stats) {
  return [label, &params, &cfg, &stats](const ImageTensor& x) { return input_gradient(x, label, params, cfg, stats); };
}

namespace detail {

inline float sign(float g) { return g > 0 ? 1.0f : (g < 0 ? -1.0f : 0.0f); }

// Clamp each pixel into [x0 - eps, x0 + eps] and [0, 1].
inline void project(ImageTensor& x, const ImageTensor& x0, float eps) {
  for (std::size_t i = 0; i < x.values.size(); ++i) {
    const float lo = std::max(0.0f, x0.values[i] - eps), hi = std::min(1.0f, x0.values[i] + eps);
    x.values[i] = std::clamp(x.values[i], lo, hi);
  }
}

}  // namespace detail

// x' = clamp01(x + eps * sign(grad)), with sign(0) = 0.
inline ImageTensor fgsm(const ImageTensor& img, const LossGradient& objective, const AttackConfig& atk) {
  atk.validate();
  if (atk.epsilon == 0) return img;
  const auto g = objective(img);
  const auto eps = static_cast<float>(atk.epsilon);
  ImageTensor x = img;
  for (std::size_t i = 0; i < x.values.size(); ++i) x.values[i] += eps * detail::sign(g.grad[i]);
  detail::project(x, img, eps);
  return x;
}

// Optional uniform start in the eps-ball, then `steps` signed-gradient ascent
// steps, each projected back onto the ball and [0, 1].
inline ImageTensor pgd(const ImageTensor& img, const LossGradient& objective, const AttackConfig& atk) {
  atk.validate();
  if (atk.epsilon == 0) return img;
  const auto eps = static_cast<float>(atk.epsilon);
  const auto alpha = static_cast<float>(atk.step());
  ImageTensor x = img;
  if (atk.random_start) {
    std::mt19937_64 rng(atk.seed);
    std::uniform_real_distribution<float> u(-eps, eps);
    for (auto& v : x.values) v += u(rng);
    detail::project(x, img, eps);
  }
  for (int s = 0; s < atk.steps; ++s) {
    const auto g = objective(x);
    for (std::size_t i = 0; i < x.values.size(); ++i) x.values[i] += alpha * detail::sign(g.grad[i]);
    detail::project(x, img, eps);
  }
  return x;
}

inline ImageTensor fgsm(const ImageTensor& img, int label, const ParamSet& params, const FusedModelConfig& cfg,
                        const NormalizationStats& stats, const AttackConfig& atk) {
  return fgsm(img, model_objective(label, params, cfg, stats), atk);
}

inline ImageTensor pgd(const ImageTensor& img, int label, const ParamSet& params, const FusedModelConfig& cfg,
                       const NormalizationStats& stats, const AttackConfig& atk) {
  return pgd(img, model_objective(label, params, cfg, stats), atk);
}

// Largest |x' - x| and whether every value of x' lies in [0, 1].
struct BudgetCheck {
  double linf = 0;
  bool in_range = true;
};

inline BudgetCheck check_budget(const ImageTensor& adv, const ImageTensor& clean) {
  BudgetCheck c;
  for (std::size_t i = 0; i < adv.values.size(); ++i) {
    c.linf = std::max(c.linf, std::abs(static_cast<double>(adv.values[i]) - clean.values[i]));
    if (!(adv.values[i] >= 0.0f && adv.values[i] <= 1.0f)) c.in_range = false;
  }
  return c;
}

// Log-spaced grid from lo to hi inclusive, rounded to `decimals` places
// (negative keeps the exact values).
inline std::vector<double> epsilon_grid(double lo = 1e-3, double hi = 1e-1, int n = 9, int decimals = 4) {
  if (!(lo > 0) || !(hi > lo) || n < 2) throw validation_error("epsilon_grid: need 0 < min < max and n >= 2");
  std::vector<double> out;
  const double a = std::log10(lo), b = std::log10(hi), unit = std::pow(10.0, decimals);
  for (int i = 0; i < n; ++i) {
    const double v = std::pow(10.0, a + (b - a) * i / (n - 1));
    out.push_back(decimals < 0 ? v : std::round(v * unit) / unit);
  }
  for (std::size_t i = 1; i < out.size(); ++i)
    if (!(out[i] > out[i - 1])) throw validation_error("epsilon_grid: grid collapses after rounding");
  return out;
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct ModelVariant {
  std::string name;
  const ParamSet* params = nullptr;
  FusedModelConfig cfg;
  NormalizationStats stats;
};

struct EvalRow {
  double epsilon = 0;
  std::string variant;
  double accuracy = 0;

  friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct EvalReport {
  std::string dataset;
  std::string backbone;
  std::uint64_t seed = 0;
  AttackConfig attack;
  std::vector<EvalRow> rows;
  std::size_t examples = 0;           // adversarial examples emitted
  std::size_t budget_violations = 0;  // examples outside the eps-ball or [0, 1]

  void validate() const {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (!(rows[i].accuracy >= 0 && rows[i].accuracy <= 1)) throw validation_error("report: accuracy outside [0, 1]");
      if (i && rows[i].epsilon < rows[i - 1].epsilon) throw validation_error("report: epsilons out of order");
    }
    if (rows.empty() || rows.front().epsilon != 0) throw validation_error("report: missing epsilon = 0 row");
  }

  std::string csv() const {
    std::ostringstream os;
    os << "epsilon,variant,accuracy,dataset,backbone,seed\n";
    char buf[64];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%.4f", r.epsilon);
      os << buf << ',' << r.variant << ',';
      std::snprintf(buf, sizeof buf, "%.6f", r.accuracy);
      os << buf << ',' << dataset << ',' << backbone << ',' << seed << '\n';
    }
    return os.str();
  }

  double accuracy(const std::string& variant, double eps) const {
    for (const auto& r : rows)
      if (r.variant == variant && std::abs(r.epsilon - eps) < 1e-12) return r.accuracy;
    throw validation_error("report: no row for " + variant + " at epsilon " + std::to_string(eps));
  }
};

// Attack seed for one sample at one budget; identical for every variant.
inline std::uint64_t sample_attack_seed(std::uint64_t seed, std::size_t sample, std::size_t eps_index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(sample), static_cast<std::uint32_t>(eps_index)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// Accuracy of every variant under PGD at epsilon 0 and each grid value.
// Rows are ordered by epsilon, then by variant order. Every budget uses the
// default step rule; `base` supplies steps, random_start and seed.
inline EvalReport sweep(const std::vector<Sample>& split, const std::vector<ModelVariant>& variants,
                        const std::vector<double>& grid, const AttackConfig& base, const std::string& dataset,
                        unsigned threads = 1) {
  if (split.empty()) throw validation_error("sweep: empty split");
  if (variants.empty()) throw validation_error("sweep: no model variants");
  std::vector<double> eps{0.0};
  for (double e : grid) {
    if (!(e > eps.back())) throw validation_error("sweep: grid must be positive and strictly increasing");
    eps.push_back(e);
  }
  EvalReport rep;
  rep.dataset = dataset;
  rep.backbone = to_string(variants.front().cfg.backbone);
  rep.seed = base.seed;
  rep.attack = base;
  for (std::size_t ei = 0; ei < eps.size(); ++ei) {
    for (const auto& v : variants) {
      if (!v.params) throw validation_error("sweep: variant " + v.name + " has no parameters");
      std::vector<char> correct(split.size()), violated(split.size());
      parallel_for(split.size(), threads, [&](std::size_t i) {
        AttackConfig atk = base;
        atk.epsilon = eps[ei];
        atk.step_size.reset();
        atk.seed = sample_attack_seed(base.seed, i, ei);
        const auto& s = split[i];
        const ImageTensor adv = pgd(s.image, s.label, *v.params, v.cfg, v.stats, atk);
        const auto b = check_budget(adv, s.image);
        violated[i] = !(b.in_range && b.linf <= eps[ei] + 1e-6);
        correct[i] = forward(adv, *v.params, v.cfg, v.stats).predicted == s.label;
      });
      rep.examples += split.size();
      rep.budget_violations += static_cast<std::size_t>(std::count(violated.begin(), violated.end(), 1));
      const double acc =
          static_cast<double>(std::count(correct.begin(), correct.end(), 1)) / static_cast<double>(split.size());
      rep.rows.push_back({eps[ei], v.name, acc});
    }
  }
  return rep;
}

}  // namespace siftgraph
