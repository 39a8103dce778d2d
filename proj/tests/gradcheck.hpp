#pragma once

// Central finite-difference oracle for tests. It only touches forward values,
// so it stays independent of every backward rule it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "siftgraph/tensor.hpp"

namespace siftgraph::testing {

struct GradCheck {
  double max_rel_err = 0.0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// |a - n| / max(|a|, |n|, floor). With floor = 1 small gradients are judged
// absolutely, since f32 forward rounding dominates a 1e-3 central difference.
inline double rel_err(double a, double n, double floor = 1.0) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f,
                            bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Compares backward() of L = sum(w * f(inputs)) against central differences.
// `probe` limits how many coordinates per input are perturbed (0 = all).
inline GradCheck gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                           std::uint64_t seed, double step = 1e-3, std::size_t probe = 0, double floor = 1.0) {
  Tensor y = f(inputs);
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> w(y.size());
  for (auto& v : w) v = dist(rng);

  auto objective = [&](const Tensor& out) {
    double total = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) total += static_cast<double>(w[i]) * out[i];
    return total;
  };

  for (auto& in : inputs) in.zero_grad();
  Tensor loss = sum(mul(y, Tensor(y.shape(), w)));
  backward(loss);

  GradCheck result;
  for (auto& in : inputs) {
    if (!in.requires_grad()) continue;
    std::vector<float> analytic(in.size(), 0.0f);
    if (in.has_grad()) std::copy(in.grad().begin(), in.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(in.size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (probe && probe < coords.size()) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(probe);
    }
    for (std::size_t i : coords) {
      auto vals = in.mutable_values();
      const float orig = vals[i];
      vals[i] = orig + static_cast<float>(step);
      const double up = objective(f(inputs));
      vals[i] = orig - static_cast<float>(step);
      const double down = objective(f(inputs));
      vals[i] = orig;
      const double numeric = (up - down) / (2.0 * step);
      const double err = rel_err(analytic[i], numeric, floor);
      if (err > result.max_rel_err) {
        result.max_rel_err = err;
        result.worst_analytic = analytic[i];
        result.worst_numeric = numeric;
      }
    }
  }
  return result;
}

}  // namespace siftgraph::testing
