#pragma once

// Minimal dense f32 tensor with tape-free reverse-mode autodiff.
//
// Every op returns a fresh Tensor whose node remembers its parents and a
// backward closure, so the provenance graph is a DAG rooted at the loss.
// backward() walks it once in reverse topological order. Leaves accumulate
// gradients across calls; the graph is released afterwards unless retained.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include "siftgraph/error.hpp"

namespace siftgraph {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::shared_ptr<std::vector<float>> data;
  std::vector<float> grad;  // empty until first touched
  bool requires_grad = false;
  bool leaf = true;
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;
};

inline std::vector<float>& grad_buffer(Node& n) {
  if (n.grad.size() != n.data->size()) n.grad.assign(n.data->size(), 0.0f);
  return n.grad;
}

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_size(shape) != values.size()) {
      throw validation_error("tensor shape " + shape_str(shape) + " does not match " +
                             std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::make_shared<std::vector<float>>(std::move(values));
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return Tensor(Shape{}, {value}, requires_grad);
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->data->size(); }
  std::string_view op() const { return node_->op; }

  std::span<const float> values() const { return *node_->data; }
  // Writable view for parameter updates; never call while a forward pass reads it.
  std::span<float> mutable_values() { return *node_->data; }
  float item() const {
    if (size() != 1) throw validation_error("item() on tensor of shape " + shape_str(shape()));
    return (*node_->data)[0];
  }
  float operator[](std::size_t i) const { return (*node_->data)[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == size() && size() > 0; }
  std::span<const float> grad() const { return node_->grad; }
  std::span<float> mutable_grad() { return detail::grad_buffer(*node_); }
  void zero_grad() { node_->grad.clear(); }

  // Constant copy cut off from the provenance graph.
  Tensor detach() const { return Tensor(shape(), *node_->data, false); }

  // New leaf reading the same storage with its own gradient slot. Used to give
  // each worker thread private gradients over shared parameters.
  Tensor share_leaf() const {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  detail::Node& node() const { return *node_; }

  static Tensor make(std::string_view op, Shape shape, std::vector<float> values,
                     std::vector<Tensor> parents, std::function<void(detail::Node&)> backward) {
    Tensor t(std::move(shape), std::move(values));
    t.node_->op = op;
    t.node_->leaf = false;
    const bool needs = std::any_of(parents.begin(), parents.end(),
                                   [](const Tensor& p) { return p.requires_grad(); });
    if (needs) {
      t.node_->requires_grad = true;
      for (auto& p : parents) t.node_->parents.push_back(p.node_);
      t.node_->backward = std::move(backward);
    }
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;

  friend void backward(const Tensor& root, bool retain_graph);
};

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
  if (a.shape() != b.shape()) {
    throw validation_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
  }
}

inline void require_rank(const Tensor& a, std::size_t rank, std::string_view op) {
  if (a.rank() != rank) {
    throw validation_error(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                           shape_str(a.shape()));
  }
}

inline bool wants_grad(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }
inline std::vector<float>& pgrad(Node& n, std::size_t i) { return grad_buffer(*n.parents[i]); }
inline const std::vector<float>& pdata(const Node& n, std::size_t i) { return *n.parents[i]->data; }

// Splits a shape around `axis` into (outer, extent, inner) for strided loops.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make("add", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    for (std::size_t p = 0; p < 2; ++p) {
      if (!detail::wants_grad(n, p)) continue;
      auto& g = detail::pgrad(n, p);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::pgrad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::pgrad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    const auto& av = detail::pdata(n, 0);
    const auto& bv = detail::pdata(n, 1);
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::pgrad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::pgrad(n, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, float s) {
  std::vector<float> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  return Tensor::make("scale", a.shape(), std::move(out), {a}, [s](detail::Node& n) {
    auto& g = detail::pgrad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
  });
}

// x[..., D] + b[D]; the only broadcasting op.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  if (x.rank() == 0 || b.rank() != 1 || x.shape().back() != b.dim(0)) {
    throw validation_error("add_bias: shape mismatch " + shape_str(x.shape()) + " vs " +
                           shape_str(b.shape()));
  }
  const std::size_t d = b.dim(0);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % d];
  return Tensor::make("add_bias", x.shape(), std::move(out), {x, b}, [d](detail::Node& n) {
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::pgrad(n, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::pgrad(n, 1);
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % d] += n.grad[i];
    }
  });
}

inline Tensor relu(const Tensor& x) {
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return Tensor::make("relu", x.shape(), std::move(out), {x}, [](detail::Node& n) {
    const auto& xv = detail::pdata(n, 0);
    auto& g = detail::pgrad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0f) g[i] += n.grad[i];
  });
}

// max(x, slope*x) with derivative `slope` at x <= 0.
inline Tensor leaky_relu(const Tensor& x, float slope = 0.2f) {
  if (!(slope >= 0.0f && slope < 1.0f)) throw validation_error("leaky_relu: slope must be in [0,1)");
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0f ? x[i] : slope * x[i];
  return Tensor::make("leaky_relu", x.shape(), std::move(out), {x}, [slope](detail::Node& n) {
    const auto& xv = detail::pdata(n, 0);
    auto& g = detail::pgrad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (xv[i] > 0.0f ? 1.0f : slope);
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw validation_error("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<float> out(x.values().begin(), x.values().end());
  return Tensor::make("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& n) {
    auto& g = detail::pgrad(n, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_rank(x, 2, "transpose");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return Tensor::make("transpose", {c, r}, std::move(out), {x}, [r, c](detail::Node& n) {
    auto& g = detail::pgrad(n, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += n.grad[j * r + i];
  });
}

inline Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw validation_error("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw validation_error("concat: axis out of range for " + shape_str(first));
  Shape shape = first;
  shape[axis] = 0;
  for (const auto& p : parts) {
    bool ok = p.rank() == first.size();
    for (std::size_t i = 0; ok && i < first.size(); ++i)
      if (i != axis && p.dim(i) != first[i]) ok = false;
    if (!ok) throw validation_error("concat: shape mismatch " + shape_str(first) + " vs " + shape_str(p.shape()));
    shape[axis] += p.dim(axis);
  }
  const auto split = detail::split_axis(shape, axis);
  std::vector<float> out(shape_size(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(p.values().begin() + o * chunk, chunk,
                  out.begin() + o * split.extent * split.inner + offset * split.inner);
    offset += p.dim(axis);
  }
  std::vector<Tensor> parents(parts.begin(), parts.end());
  return Tensor::make("concat", shape, std::move(out), std::move(parents),
                      [split, offsets, axis](detail::Node& n) {
                        for (std::size_t p = 0; p < n.parents.size(); ++p) {
                          if (!detail::wants_grad(n, p)) continue;
                          auto& g = detail::pgrad(n, p);
                          const std::size_t chunk = n.parents[p]->shape[axis] * split.inner;
                          for (std::size_t o = 0; o < split.outer; ++o) {
                            const float* src = n.grad.data() + o * split.extent * split.inner + offsets[p] * split.inner;
                            float* dst = g.data() + o * chunk;
                            for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                          }
                        }
                      });
}

inline Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Tensor parts[] = {a, b};
  return concat(std::span<const Tensor>(parts), axis);
}

// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
    throw validation_error("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                           ") invalid for " + shape_str(x.shape()));
  }
  const auto split = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t chunk = (end - begin) * split.inner;
  std::vector<float> out(split.outer * chunk);
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(x.values().begin() + (o * split.extent + begin) * split.inner, chunk, out.begin() + o * chunk);
  return Tensor::make("slice", std::move(shape), std::move(out), {x}, [split, begin, chunk](detail::Node& n) {
    auto& g = detail::pgrad(n, 0);
    for (std::size_t o = 0; o < split.outer; ++o) {
      float* dst = g.data() + (o * split.extent + begin) * split.inner;
      const float* src = n.grad.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& x) {
  float total = 0.0f;
  for (float v : x.values()) total += v;
  return Tensor::make("sum", {}, {total}, {x}, [](detail::Node& n) {
    auto& g = detail::pgrad(n, 0);
    for (auto& v : g) v += n.grad[0];
  });
}

inline Tensor reduce_sum(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw validation_error("reduce_sum: axis out of range for " + shape_str(x.shape()));
  const auto s = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<float> out(s.outer * s.inner, 0.0f);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += x[(o * s.extent + e) * s.inner + i];
  return Tensor::make("reduce_sum", std::move(shape), std::move(out), {x}, [s](detail::Node& n) {
    auto& g = detail::pgrad(n, 0);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i) g[(o * s.extent + e) * s.inner + i] += n.grad[o * s.inner + i];
  });
}

inline Tensor reduce_mean(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw validation_error("reduce_mean: axis out of range for " + shape_str(x.shape()));
  if (x.dim(axis) == 0) throw validation_error("reduce_mean: empty axis in " + shape_str(x.shape()));
  return scale(reduce_sum(x, axis), 1.0f / static_cast<float>(x.dim(axis)));
}

// Gradient goes to the first (lowest-index) maximum.
inline Tensor reduce_max(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw validation_error("reduce_max: axis out of range for " + shape_str(x.shape()));
  if (x.dim(axis) == 0) throw validation_error("reduce_max: empty axis in " + shape_str(x.shape()));
  const auto s = detail::split_axis(x.shape(), axis);
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<float> out(s.outer * s.inner);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = o * s.extent * s.inner + i;
      for (std::size_t e = 1; e < s.extent; ++e) {
        const std::size_t idx = (o * s.extent + e) * s.inner + i;
        if (x[idx] > x[best]) best = idx;
      }
      out[o * s.inner + i] = x[best];
      argmax[o * s.inner + i] = best;
    }
  return Tensor::make("reduce_max", std::move(shape), std::move(out), {x},
                      [argmax = std::move(argmax)](detail::Node& n) {
                        auto& g = detail::pgrad(n, 0);
                        for (std::size_t k = 0; k < argmax.size(); ++k) g[argmax[k]] += n.grad[k];
                      });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  if (a.dim(1) != b.dim(0)) {
    throw validation_error("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto nn = static_cast<Eigen::Index>(b.dim(1));
  std::vector<float> out(static_cast<std::size_t>(m * nn));
  detail::MatMap(out.data(), m, nn).noalias() =
      detail::ConstMatMap(a.values().data(), m, k) * detail::ConstMatMap(b.values().data(), k, nn);
  return Tensor::make("matmul", {a.dim(0), b.dim(1)}, std::move(out), {a, b}, [m, k, nn](detail::Node& n) {
    const detail::ConstMatMap dc(n.grad.data(), m, nn);
    if (detail::wants_grad(n, 0)) {
      detail::MatMap(detail::pgrad(n, 0).data(), m, k).noalias() +=
          dc * detail::ConstMatMap(detail::pdata(n, 1).data(), k, nn).transpose();
    }
    if (detail::wants_grad(n, 1)) {
      detail::MatMap(detail::pgrad(n, 1).data(), k, nn).noalias() +=
          detail::ConstMatMap(detail::pdata(n, 0).data(), m, k).transpose() * dc;
    }
  });
}

// x[N, in] * w[in, out] + b[out]
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_bias(matmul(x, w), b); }

// Cross-correlation of x[C_in,H,W] with k[C_out,C_in,kh,kw] plus optional bias[C_out].
inline Tensor conv2d(const Tensor& x, const Tensor& k, const Tensor& bias, std::size_t stride = 1,
                     std::size_t pad = 0) {
  detail::require_rank(x, 3, "conv2d");
  detail::require_rank(k, 4, "conv2d");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = k.dim(0), kh = k.dim(2), kw = k.dim(3);
  if (k.dim(1) != cin) {
    throw validation_error("conv2d: channel mismatch " + shape_str(x.shape()) + " vs kernel " + shape_str(k.shape()));
  }
  if (stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad || (h + 2 * pad - kh) % stride != 0 ||
      (w + 2 * pad - kw) % stride != 0) {
    throw validation_error("conv2d: non-integral output size for input " + shape_str(x.shape()) + ", kernel " +
                           shape_str(k.shape()) + ", stride " + std::to_string(stride) + ", pad " +
                           std::to_string(pad));
  }
  const bool has_bias = bias.defined();
  if (has_bias && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw validation_error("conv2d: bias shape " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                           " output channels");
  }
  const std::size_t ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  const std::size_t rows = cin * kh * kw, cols = ho * wo;

  std::vector<float> col(rows * cols, 0.0f);
  const auto xv = x.values();
  for (std::size_t c = 0; c < cin; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        float* dst = col.data() + ((c * kh + i) * kw + j) * cols;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          const float* src = xv.data() + (c * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[oy * wo + ox] = src[ix];
          }
        }
      }

  const auto er = static_cast<Eigen::Index>(rows), ec = static_cast<Eigen::Index>(cols),
             eo = static_cast<Eigen::Index>(cout);
  std::vector<float> out(cout * cols);
  detail::MatMap(out.data(), eo, ec).noalias() =
      detail::ConstMatMap(k.values().data(), eo, er) * detail::ConstMatMap(col.data(), er, ec);
  if (has_bias)
    for (std::size_t c = 0; c < cout; ++c)
      for (std::size_t p = 0; p < cols; ++p) out[c * cols + p] += bias[c];

  std::vector<Tensor> parents{x, k};
  if (has_bias) parents.push_back(bias);
  return Tensor::make(
      "conv2d", {cout, ho, wo}, std::move(out), std::move(parents),
      [col = std::move(col), cin, cout, h, w, kh, kw, ho, wo, stride, pad, er, ec, eo, has_bias](detail::Node& n) {
        const detail::ConstMatMap dout(n.grad.data(), eo, ec);
        if (detail::wants_grad(n, 1)) {
          detail::MatMap(detail::pgrad(n, 1).data(), eo, er).noalias() +=
              dout * detail::ConstMatMap(col.data(), er, ec).transpose();
        }
        if (has_bias && detail::wants_grad(n, 2)) {
          auto& gb = detail::pgrad(n, 2);
          // Plain loop: Eigen's vectorized reduction peels by address, which
          // would make the summation order allocation dependent.
          for (std::size_t c = 0; c < cout; ++c) {
            float s = 0.0f;
            for (std::size_t q = 0; q < ho * wo; ++q) s += n.grad[c * ho * wo + q];
            gb[c] += s;
          }
        }
        if (detail::wants_grad(n, 0)) {
          detail::RowMat dcol = detail::ConstMatMap(detail::pdata(n, 1).data(), eo, er).transpose() * dout;
          auto& gx = detail::pgrad(n, 0);
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const float* src = dcol.data() + ((c * kh + i) * kw + j) * static_cast<std::size_t>(ec);
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const auto iy = static_cast<std::ptrdiff_t>(oy * stride + i) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  float* dst = gx.data() + (c * h + static_cast<std::size_t>(iy)) * w;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const auto ix = static_cast<std::ptrdiff_t>(ox * stride + j) - static_cast<std::ptrdiff_t>(pad);
                    if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(w)) dst[ix] += src[oy * wo + ox];
                  }
                }
              }
        }
      });
}

inline Tensor conv2d(const Tensor& x, const Tensor& k, std::size_t stride = 1, std::size_t pad = 0) {
  return conv2d(x, k, Tensor{}, stride, pad);
}

// Non-overlapping window average over x[C,H,W].
inline Tensor avg_pool2d(const Tensor& x, std::size_t window) {
  detail::require_rank(x, 3, "avg_pool2d");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (window == 0 || h % window || w % window) {
    throw validation_error("avg_pool2d: window " + std::to_string(window) + " does not tile " + shape_str(x.shape()));
  }
  const std::size_t ho = h / window, wo = w / window;
  const float inv = 1.0f / static_cast<float>(window * window);
  std::vector<float> out(c * ho * wo, 0.0f);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t xx = 0; xx < w; ++xx) out[(ch * ho + y / window) * wo + xx / window] += x[(ch * h + y) * w + xx];
  for (auto& v : out) v *= inv;
  return Tensor::make("avg_pool2d", {c, ho, wo}, std::move(out), {x}, [c, h, w, ho, wo, window, inv](detail::Node& n) {
    auto& g = detail::pgrad(n, 0);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          g[(ch * h + y) * w + xx] += inv * n.grad[(ch * ho + y / window) * wo + xx / window];
  });
}

// ---------------------------------------------------------------------------
// Graph message passing
// ---------------------------------------------------------------------------

// Rows x[idx[e], :] stacked into [E, D].
inline Tensor gather_rows(const Tensor& x, std::span<const std::size_t> idx) {
  detail::require_rank(x, 2, "gather_rows");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  std::vector<float> out(idx.size() * d);
  for (std::size_t e = 0; e < idx.size(); ++e) {
    if (idx[e] >= rows) throw validation_error("gather_rows: index " + std::to_string(idx[e]) + " out of range");
    std::copy_n(x.values().begin() + idx[e] * d, d, out.begin() + e * d);
  }
  return Tensor::make("gather_rows", {idx.size(), d}, std::move(out), {x},
                      [ids = std::vector<std::size_t>(idx.begin(), idx.end()), d](detail::Node& n) {
                        auto& g = detail::pgrad(n, 0);
                        for (std::size_t e = 0; e < ids.size(); ++e)
                          for (std::size_t j = 0; j < d; ++j) g[ids[e] * d + j] += n.grad[e * d + j];
                      });
}

// y[e, :] = w[e] * x[e, :]; w holds one weight per row.
inline Tensor scale_rows(const Tensor& x, const Tensor& w) {
  detail::require_rank(x, 2, "scale_rows");
  const std::size_t rows = x.dim(0), d = x.dim(1);
  if (w.size() != rows) {
    throw validation_error("scale_rows: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  }
  std::vector<float> out(x.size());
  for (std::size_t e = 0; e < rows; ++e)
    for (std::size_t j = 0; j < d; ++j) out[e * d + j] = w[e] * x[e * d + j];
  return Tensor::make("scale_rows", x.shape(), std::move(out), {x, w}, [rows, d](detail::Node& n) {
    const auto& xv = detail::pdata(n, 0);
    const auto& wv = detail::pdata(n, 1);
    if (detail::wants_grad(n, 0)) {
      auto& g = detail::pgrad(n, 0);
      for (std::size_t e = 0; e < rows; ++e)
        for (std::size_t j = 0; j < d; ++j) g[e * d + j] += wv[e] * n.grad[e * d + j];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = detail::pgrad(n, 1);
      for (std::size_t e = 0; e < rows; ++e) {
        float acc = 0.0f;
        for (std::size_t j = 0; j < d; ++j) acc += xv[e * d + j] * n.grad[e * d + j];
        g[e] += acc;
      }
    }
  });
}

// Softmax over groups of entries that share a segment id (a destination node).
inline Tensor segment_softmax(const Tensor& logits, std::span<const std::size_t> segments) {
  if (logits.size() != segments.size()) {
    throw validation_error("segment_softmax: " + std::to_string(logits.size()) + " logits but " +
                           std::to_string(segments.size()) + " segment ids");
  }
  const std::size_t e_count = logits.size();
  std::size_t n_seg = 0;
  for (auto s : segments) n_seg = std::max(n_seg, s + 1);
  std::vector<float> seg_max(n_seg, -std::numeric_limits<float>::infinity());
  for (std::size_t e = 0; e < e_count; ++e) seg_max[segments[e]] = std::max(seg_max[segments[e]], logits[e]);
  std::vector<float> out(e_count);
  std::vector<float> denom(n_seg, 0.0f);
  for (std::size_t e = 0; e < e_count; ++e) {
    out[e] = std::exp(logits[e] - seg_max[segments[e]]);
    denom[segments[e]] += out[e];
  }
  for (std::size_t e = 0; e < e_count; ++e) out[e] /= denom[segments[e]];
  return Tensor::make("segment_softmax", logits.shape(), std::move(out), {logits},
                      [seg = std::vector<std::size_t>(segments.begin(), segments.end()), n_seg](detail::Node& n) {
                        const auto& alpha = *n.data;
                        std::vector<float> dot(n_seg, 0.0f);
                        for (std::size_t e = 0; e < seg.size(); ++e) dot[seg[e]] += alpha[e] * n.grad[e];
                        auto& g = detail::pgrad(n, 0);
                        for (std::size_t e = 0; e < seg.size(); ++e) g[e] += alpha[e] * (n.grad[e] - dot[seg[e]]);
                      });
}

// Row-wise sum of values[E, D] into n_segments buckets.
inline Tensor segment_sum(const Tensor& values, std::span<const std::size_t> segments, std::size_t n_segments) {
  detail::require_rank(values, 2, "segment_sum");
  const std::size_t e_count = values.dim(0), d = values.dim(1);
  if (segments.size() != e_count) throw validation_error("segment_sum: segment id count differs from row count");
  std::vector<float> out(n_segments * d, 0.0f);
  for (std::size_t e = 0; e < e_count; ++e) {
    if (segments[e] >= n_segments) {
      throw validation_error("segment_sum: segment id " + std::to_string(segments[e]) + " >= " +
                             std::to_string(n_segments));
    }
    for (std::size_t j = 0; j < d; ++j) out[segments[e] * d + j] += values[e * d + j];
  }
  return Tensor::make("segment_sum", {n_segments, d}, std::move(out), {values},
                      [seg = std::vector<std::size_t>(segments.begin(), segments.end()), d](detail::Node& n) {
                        auto& g = detail::pgrad(n, 0);
                        for (std::size_t e = 0; e < seg.size(); ++e)
                          for (std::size_t j = 0; j < d; ++j) g[e * d + j] += n.grad[seg[e] * d + j];
                      });
}

// ---------------------------------------------------------------------------
// Normalization and losses
// ---------------------------------------------------------------------------

inline Tensor softmax_rows(const Tensor& x) {
  detail::require_rank(x, 2, "softmax_rows");
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<float> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const float* row = x.values().data() + i * c;
    const float mx = *std::max_element(row, row + c);
    float total = 0.0f;
    for (std::size_t j = 0; j < c; ++j) total += out[i * c + j] = std::exp(row[j] - mx);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= total;
  }
  return Tensor::make("softmax_rows", x.shape(), std::move(out), {x}, [r, c](detail::Node& n) {
    const auto& p = *n.data;
    auto& g = detail::pgrad(n, 0);
    for (std::size_t i = 0; i < r; ++i) {
      float dot = 0.0f;
      for (std::size_t j = 0; j < c; ++j) dot += p[i * c + j] * n.grad[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] += p[i * c + j] * (n.grad[i * c + j] - dot);
    }
  });
}

// Mean over the batch of -log softmax(logits)[label], via a max-shifted log-sum-exp.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  detail::require_rank(logits, 2, "softmax_cross_entropy");
  const std::size_t b = logits.dim(0), c = logits.dim(1);
  if (labels.size() != b) throw validation_error("softmax_cross_entropy: label count differs from batch size");
  std::vector<float> prob(logits.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw validation_error("softmax_cross_entropy: label " + std::to_string(labels[i]) + " out of range for " +
                             std::to_string(c) + " classes");
    }
    const float* row = logits.values().data() + i * c;
    const float mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) total += std::exp(static_cast<double>(row[j] - mx));
    const double lse = std::log(total) + mx;
    for (std::size_t j = 0; j < c; ++j) prob[i * c + j] = static_cast<float>(std::exp(row[j] - lse));
    loss += lse - row[labels[i]];
  }
  loss /= static_cast<double>(b);
  return Tensor::make("softmax_cross_entropy", {}, {static_cast<float>(loss)}, {logits},
                      [prob = std::move(prob), lab = std::vector<int>(labels.begin(), labels.end()), b, c](detail::Node& n) {
                        auto& g = detail::pgrad(n, 0);
                        const float s = n.grad[0] / static_cast<float>(b);
                        for (std::size_t i = 0; i < b; ++i)
                          for (std::size_t j = 0; j < c; ++j) {
                            const float onehot = static_cast<int>(j) == lab[i] ? 1.0f : 0.0f;
                            g[i * c + j] += s * (prob[i * c + j] - onehot);
                          }
                      });
}

// Normalizes each row over the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, float eps = 1e-5f) {
  if (x.rank() == 0) throw validation_error("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gain.size() != d || bias.size() != d) {
    throw validation_error("layer_norm: affine shape mismatch " + shape_str(x.shape()) + " vs " +
                           shape_str(gain.shape()) + "/" + shape_str(bias.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<float> xhat(x.size()), inv_std(rows), out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = x.values().data() + r * d;
    float mean = 0.0f;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<float>(d);
    inv_std[r] = 1.0f / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mean) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain[j] + bias[j];
    }
  }
  return Tensor::make("layer_norm", x.shape(), std::move(out), {x, gain, bias},
                      [xhat = std::move(xhat), inv_std = std::move(inv_std), rows, d](detail::Node& n) {
                        const auto& gv = detail::pdata(n, 1);
                        if (detail::wants_grad(n, 1)) {
                          auto& gg = detail::pgrad(n, 1);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < d; ++j) gg[j] += n.grad[r * d + j] * xhat[r * d + j];
                        }
                        if (detail::wants_grad(n, 2)) {
                          auto& gb = detail::pgrad(n, 2);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < d; ++j) gb[j] += n.grad[r * d + j];
                        }
                        if (detail::wants_grad(n, 0)) {
                          auto& gx = detail::pgrad(n, 0);
                          const float inv_d = 1.0f / static_cast<float>(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            float mean_dxh = 0.0f, mean_dxh_xh = 0.0f;
                            for (std::size_t j = 0; j < d; ++j) {
                              const float dxh = n.grad[r * d + j] * gv[j];
                              mean_dxh += dxh;
                              mean_dxh_xh += dxh * xhat[r * d + j];
                            }
                            mean_dxh *= inv_d;
                            mean_dxh_xh *= inv_d;
                            for (std::size_t j = 0; j < d; ++j) {
                              const float dxh = n.grad[r * d + j] * gv[j];
                              gx[r * d + j] += inv_std[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
                            }
                          }
                        }
                      });
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

// Fills grad slots of every requires_grad tensor reachable from `root`. Leaf
// gradients accumulate across calls; interior gradients are recomputed. The
// recorded graph is released afterwards unless `retain_graph` is set.
inline void backward(const Tensor& root, bool retain_graph = false) {
  if (!root.defined() || root.size() != 1) {
    throw validation_error("backward: root must be a scalar, got " +
                           (root.defined() ? shape_str(root.shape()) : std::string("undefined")));
  }
  detail::Node* start = root.node_.get();
  if (!start->requires_grad) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen{start};
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{start, 0}};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order)
    if (!n->leaf) n->grad.assign(n->data->size(), 0.0f);
  detail::grad_buffer(*start)[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (!n->leaf && n->backward) n->backward(*n);
  }
  if (!retain_graph) {
    for (auto* n : order) {
      if (n->leaf) continue;
      n->backward = nullptr;
      n->parents.clear();
      if (n != start) n->grad.clear();
    }
  }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// Named trainable tensors, iterated in lexicographic order.
class ParamSet {
 public:
  void add(const std::string& name, Tensor t) {
    if (tensors_.count(name)) throw validation_error("duplicate parameter " + name);
    if (!t.requires_grad()) t = Tensor(t.shape(), std::vector<float>(t.values().begin(), t.values().end()), true);
    tensors_.emplace(name, std::move(t));
  }

  const Tensor& at(const std::string& name) const {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw validation_error("missing parameter " + name);
    return it->second;
  }
  Tensor& at(const std::string& name) {
    auto it = tensors_.find(name);
    if (it == tensors_.end()) throw validation_error("missing parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return tensors_.count(name) != 0; }

  std::size_t size() const { return tensors_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : tensors_) n += t.size();
    return n;
  }

  auto begin() const { return tensors_.begin(); }
  auto end() const { return tensors_.end(); }
  auto begin() { return tensors_.begin(); }
  auto end() { return tensors_.end(); }

  void zero_grad() {
    for (auto& [_, t] : tensors_) t.zero_grad();
  }

  // Same values, private gradient slots.
  ParamSet replica() const {
    ParamSet r;
    for (const auto& [name, t] : tensors_) r.tensors_.emplace(name, t.share_leaf());
    return r;
  }

  // Deep copy with independent storage.
  ParamSet clone() const {
    ParamSet r;
    for (const auto& [name, t] : tensors_)
      r.tensors_.emplace(name, Tensor(t.shape(), std::vector<float>(t.values().begin(), t.values().end()), true));
    return r;
  }

 private:
  std::map<std::string, Tensor> tensors_;
};

// Uniform(-limit, limit) with limit = gain * sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng,
                             float gain = 1.0f) {
  const float limit = gain * std::sqrt(6.0f / static_cast<float>(fan_in + fan_out));
  std::uniform_real_distribution<float> dist(-limit, limit);
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

// Uniform(-limit, limit) with limit = sqrt(6 / fan_in); keeps ReLU activations at unit scale.
inline Tensor he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const float limit = std::sqrt(6.0f / static_cast<float>(fan_in));
  std::uniform_real_distribution<float> dist(-limit, limit);
  std::vector<float> v(shape_size(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace siftgraph
