#pragma once

// Multi-head graph attention encoder: KeypointGraph -> 128-d embedding.

#include <random>
#include <string>
#include <vector>

#include "siftgraph/error.hpp"
#include "siftgraph/graph.hpp"
#include "siftgraph/tensor.hpp"

namespace siftgraph {

struct GatConfig {
  int n_layers = 5;
  int heads = 4;
  int head_dim = 32;
  std::size_t in_dim = kNodeFeatureWidth;
  float slope = 0.2f;

  std::size_t width() const { return static_cast<std::size_t>(heads * head_dim); }
  std::size_t out_dim() const { return width(); }

  void validate() const {
    if (n_layers < 1 || heads < 1 || head_dim < 1 || in_dim == 0)
      throw validation_error("gat: layers, heads and widths must be positive");
  }
};

// Parameter names: <prefix>l<layer>.h<head>.W  [in, head_dim]
//                  <prefix>l<layer>.h<head>.a  [2*head_dim, 1] (destination half first)
inline std::string gat_param_name(const std::string& prefix, int layer, int head, const char* what) {
  return prefix + "l" + std::to_string(layer) + ".h" + std::to_string(head) + "." + what;
}

inline void init_gat_params(ParamSet& params, const GatConfig& cfg, std::mt19937_64& rng,
                            const std::string& prefix = "gat.") {
  cfg.validate();
  const auto hd = static_cast<std::size_t>(cfg.head_dim);
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::size_t in = l == 0 ? cfg.in_dim : cfg.width();
    for (int h = 0; h < cfg.heads; ++h) {
      params.add(gat_param_name(prefix, l, h, "W"), glorot_uniform({in, hd}, in, hd, rng));
      params.add(gat_param_name(prefix, l, h, "a"), glorot_uniform({2 * hd, 1}, 2 * hd, 1, rng));
    }
  }
}

// Edge lists with one self-loop per node appended after the graph edges.
struct AttentionEdges {
  std::vector<std::size_t> src, dst;
};

inline AttentionEdges with_self_loops(const EdgeIndex& e, std::size_t n_nodes) {
  AttentionEdges out;
  out.src.reserve(e.size() + n_nodes);
  out.dst.reserve(e.size() + n_nodes);
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (e.src[i] >= n_nodes || e.dst[i] >= n_nodes)
      throw validation_error("gat: edge (" + std::to_string(e.src[i]) + "," + std::to_string(e.dst[i]) +
                             ") out of range for " + std::to_string(n_nodes) + " nodes");
    out.src.push_back(e.src[i]);
    out.dst.push_back(e.dst[i]);
  }
  for (std::size_t i = 0; i < n_nodes; ++i) {
    out.src.push_back(i);
    out.dst.push_back(i);
  }
  return out;
}

// One attention layer. Node i aggregates alpha_ij * W h_j over incoming edges
// j -> i, with e_ij = LeakyReLU(a^T [W h_i || W h_j]) normalized per i. Heads
// are concatenated; ReLU follows when `activate` is set. If `alphas` is given
// it receives one attention tensor per head.
inline Tensor gat_layer_forward(const Tensor& h, const AttentionEdges& edges, const ParamSet& params,
                                const GatConfig& cfg, int layer, bool activate, const std::string& prefix = "gat.",
                                std::vector<Tensor>* alphas = nullptr) {
  detail::require_rank(h, 2, "gat_layer_forward");
  const std::size_t n = h.dim(0);
  const auto hd = static_cast<std::size_t>(cfg.head_dim);
  std::vector<Tensor> heads;
  heads.reserve(static_cast<std::size_t>(cfg.heads));
  for (int k = 0; k < cfg.heads; ++k) {
    const Tensor& w = params.at(gat_param_name(prefix, layer, k, "W"));
    const Tensor& a = params.at(gat_param_name(prefix, layer, k, "a"));
    const Tensor wh = matmul(h, w);
    const Tensor score_dst = matmul(wh, slice(a, 0, 0, hd));
    const Tensor score_src = matmul(wh, slice(a, 0, hd, 2 * hd));
    const Tensor logits =
        leaky_relu(add(gather_rows(score_dst, edges.dst), gather_rows(score_src, edges.src)), cfg.slope);
    const Tensor alpha = segment_softmax(reshape(logits, {edges.dst.size()}), edges.dst);
    if (alphas) alphas->push_back(alpha);
    heads.push_back(segment_sum(scale_rows(gather_rows(wh, edges.src), alpha), edges.dst, n));
  }
  Tensor out = heads.size() == 1 ? heads[0] : concat(heads, 1);
  return activate ? relu(out) : out;
}

// Per-node outputs of the full stack, before pooling.
inline Tensor gat_node_embeddings(const KeypointGraph& g, const ParamSet& params, const GatConfig& cfg,
                                  const std::string& prefix = "gat.") {
  cfg.validate();
  if (g.n_nodes == 0) throw validation_error("gat: graph has no nodes");
  if (g.features.size() != g.n_nodes * cfg.in_dim)
    throw validation_error("gat: feature matrix is not " + std::to_string(g.n_nodes) + "x" + std::to_string(cfg.in_dim));
  const auto edges = with_self_loops(g.edges, g.n_nodes);
  Tensor h({g.n_nodes, cfg.in_dim}, g.features);
  for (int l = 0; l < cfg.n_layers; ++l) h = gat_layer_forward(h, edges, params, cfg, l, l + 1 < cfg.n_layers, prefix);
  return h;
}

// Mean over nodes of the last layer's outputs: z in R^{heads * head_dim}.
inline Tensor encode(const KeypointGraph& g, const ParamSet& params, const GatConfig& cfg,
                     const std::string& prefix = "gat.") {
  return reduce_mean(gat_node_embeddings(g, params, cfg, prefix), 0);
}

}  // namespace siftgraph
