#pragma once

// Semantic branch: a small CNN with global average pooling and a tiny patch
// transformer with a CLS token. Both map a [C, H, W] pixel tensor to R^128.

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "siftgraph/error.hpp"
#include "siftgraph/image.hpp"
#include "siftgraph/tensor.hpp"

namespace siftgraph {

enum class BackboneKind { cnn, vit };

inline std::string to_string(BackboneKind k) { return k == BackboneKind::cnn ? "cnn" : "vit"; }

inline BackboneKind parse_backbone(const std::string& s) {
  if (s == "cnn") return BackboneKind::cnn;
  if (s == "vit") return BackboneKind::vit;
  throw validation_error("unknown backbone '" + s + "' (expected cnn or vit)");
}

struct CnnConfig {
  std::size_t input_size = 64;
  std::size_t channels_in = 3;
  std::vector<std::size_t> stages{32, 64, 128};
  std::size_t out_dim = 128;

  void validate() const {
    if (stages.empty()) throw validation_error("cnn: at least one stage");
    if (input_size % (std::size_t{1} << stages.size()))
      throw validation_error("cnn: input size must be divisible by 2^stages");
  }
};

struct VitConfig {
  std::size_t input_size = 64;
  std::size_t channels_in = 3;
  std::size_t patch = 8;
  std::size_t dim = 64;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t out_dim = 128;

  std::size_t n_patches() const { return (input_size / patch) * (input_size / patch); }

  void validate() const {
    if (patch == 0 || input_size % patch) throw validation_error("vit: input size must be divisible by patch size");
    if (heads == 0 || dim % heads) throw validation_error("vit: dim must be divisible by heads");
  }
};

// ---------------------------------------------------------------------------
// Patches
// ---------------------------------------------------------------------------

// Row n is patch (n / (W/P), n % (W/P)) in row-major patch order; within a
// row, entries run over channel, then pixel row, then pixel column.
inline std::vector<std::size_t> patch_indices(std::size_t c, std::size_t h, std::size_t w, std::size_t p) {
  if (p == 0 || h % p || w % p)
    throw validation_error("patchify: " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by patch " +
                           std::to_string(p));
  std::vector<std::size_t> idx;
  idx.reserve(c * h * w);
  for (std::size_t py = 0; py < h / p; ++py)
    for (std::size_t px = 0; px < w / p; ++px)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t r = 0; r < p; ++r)
          for (std::size_t col = 0; col < p; ++col) idx.push_back((ch * h + py * p + r) * w + px * p + col);
  return idx;
}

// [C, H, W] -> [N, P*P*C]
inline Tensor patchify(const Tensor& chw, std::size_t p) {
  detail::require_rank(chw, 3, "patchify");
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  const auto idx = patch_indices(c, h, w, p);
  return reshape(gather_rows(reshape(chw, {chw.size(), 1}), idx), {(h / p) * (w / p), p * p * c});
}

inline Tensor patchify(const ImageTensor& img, std::size_t p) { return patchify(to_chw_tensor(img), p); }

// Inverse of patchify on raw values.
inline ImageTensor unpatchify(const Tensor& patches, std::size_t h, std::size_t w, std::size_t c, std::size_t p) {
  const auto idx = patch_indices(c, h, w, p);
  if (patches.size() != idx.size()) throw validation_error("unpatchify: size mismatch");
  std::vector<float> chw(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) chw[idx[i]] = patches[i];
  ImageTensor img(h, w, c);
  chw_to_image(chw, img);
  return img;
}

// ---------------------------------------------------------------------------
// CNN
// ---------------------------------------------------------------------------

inline void init_cnn_params(ParamSet& params, const CnnConfig& cfg, std::mt19937_64& rng,
                            const std::string& prefix = "cnn.") {
  cfg.validate();
  std::size_t in = cfg.channels_in;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const std::size_t out = cfg.stages[s];
    const std::string base = prefix + "conv" + std::to_string(s);
    params.add(base + ".w", he_uniform({out, in, 3, 3}, in * 9, rng));
    params.add(base + ".b", Tensor::zeros({out}, true));
    in = out;
  }
  params.add(prefix + "fc.w", glorot_uniform({in, cfg.out_dim}, in, cfg.out_dim, rng));
  params.add(prefix + "fc.b", Tensor::zeros({cfg.out_dim}, true));
}

// x: [C, H, W]. Each stage: 3x3 conv (pad 1), ReLU, 2x2 average pool; then
// global average pool and a linear map to out_dim.
inline Tensor cnn_forward(const Tensor& x, const ParamSet& params, const CnnConfig& cfg,
                          const std::string& prefix = "cnn.") {
  detail::require_rank(x, 3, "cnn_forward");
  if (x.dim(0) != cfg.channels_in || x.dim(1) != cfg.input_size || x.dim(2) != cfg.input_size)
    throw validation_error("cnn_forward: expected input [" + std::to_string(cfg.channels_in) + "," +
                           std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) + "], got " +
                           shape_str(x.shape()));
  Tensor h = x;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const std::string base = prefix + "conv" + std::to_string(s);
    h = avg_pool2d(relu(conv2d(h, params.at(base + ".w"), params.at(base + ".b"), 1, 1)), 2);
  }
  const std::size_t c = h.dim(0);
  const Tensor pooled = reshape(reduce_mean(reshape(h, {c, h.dim(1) * h.dim(2)}), 1), {1, c});
  return reshape(linear(pooled, params.at(prefix + "fc.w"), params.at(prefix + "fc.b")), {cfg.out_dim});
}

// ---------------------------------------------------------------------------
// Patch transformer
// ---------------------------------------------------------------------------

inline void init_vit_params(ParamSet& params, const VitConfig& cfg, std::mt19937_64& rng,
                            const std::string& prefix = "vit.") {
  cfg.validate();
  const std::size_t pdim = cfg.patch * cfg.patch * cfg.channels_in, d = cfg.dim, hid = cfg.dim * cfg.mlp_ratio;
  std::normal_distribution<float> small(0.0f, 0.02f);
  auto normal = [&](Shape shape) {
    std::vector<float> v(shape_size(shape));
    for (auto& x : v) x = small(rng);
    return Tensor(std::move(shape), std::move(v), true);
  };
  params.add(prefix + "embed.w", glorot_uniform({pdim, d}, pdim, d, rng));
  params.add(prefix + "embed.b", Tensor::zeros({d}, true));
  params.add(prefix + "cls", normal({1, d}));
  params.add(prefix + "pos", normal({cfg.n_patches() + 1, d}));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string b = prefix + "block" + std::to_string(l) + ".";
    params.add(b + "ln1.g", Tensor::full({d}, 1.0f, true));
    params.add(b + "ln1.b", Tensor::zeros({d}, true));
    for (const char* m : {"q", "k", "v", "o"}) {
      params.add(b + m + ".w", glorot_uniform({d, d}, d, d, rng));
      params.add(b + m + ".b", Tensor::zeros({d}, true));
    }
    params.add(b + "ln2.g", Tensor::full({d}, 1.0f, true));
    params.add(b + "ln2.b", Tensor::zeros({d}, true));
    params.add(b + "mlp1.w", glorot_uniform({d, hid}, d, hid, rng));
    params.add(b + "mlp1.b", Tensor::zeros({hid}, true));
    params.add(b + "mlp2.w", glorot_uniform({hid, d}, hid, d, rng));
    params.add(b + "mlp2.b", Tensor::zeros({d}, true));
  }
  params.add(prefix + "ln.g", Tensor::full({d}, 1.0f, true));
  params.add(prefix + "ln.b", Tensor::zeros({d}, true));
  params.add(prefix + "head.w", glorot_uniform({d, cfg.out_dim}, d, cfg.out_dim, rng));
  params.add(prefix + "head.b", Tensor::zeros({cfg.out_dim}, true));
}

// x: [C, H, W]. patchify -> project -> [CLS; patches] + positions -> pre-norm
// blocks -> layer norm -> CLS row -> linear. `attention`, when given, receives
// every head's [T, T] attention matrix.
inline Tensor vit_forward(const Tensor& x, const ParamSet& params, const VitConfig& cfg,
                          const std::string& prefix = "vit.", std::vector<Tensor>* attention = nullptr) {
  cfg.validate();
  detail::require_rank(x, 3, "vit_forward");
  if (x.dim(0) != cfg.channels_in || x.dim(1) != cfg.input_size || x.dim(2) != cfg.input_size)
    throw validation_error("vit_forward: expected input [" + std::to_string(cfg.channels_in) + "," +
                           std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) + "], got " +
                           shape_str(x.shape()));
  const std::size_t dh = cfg.dim / cfg.heads;
  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));
  const auto& P = [&](const std::string& name) -> const Tensor& { return params.at(prefix + name); };

  const Tensor tokens = linear(patchify(x, cfg.patch), P("embed.w"), P("embed.b"));
  Tensor z = add(concat(P("cls"), tokens, 0), P("pos"));
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string b = "block" + std::to_string(l) + ".";
    const Tensor n1 = layer_norm(z, P(b + "ln1.g"), P(b + "ln1.b"));
    const Tensor q = linear(n1, P(b + "q.w"), P(b + "q.b"));
    const Tensor k = linear(n1, P(b + "k.w"), P(b + "k.b"));
    const Tensor v = linear(n1, P(b + "v.w"), P(b + "v.b"));
    std::vector<Tensor> heads;
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const Tensor qh = slice(q, 1, h * dh, (h + 1) * dh);
      const Tensor kh = slice(k, 1, h * dh, (h + 1) * dh);
      const Tensor vh = slice(v, 1, h * dh, (h + 1) * dh);
      const Tensor attn = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt));
      if (attention) attention->push_back(attn);
      heads.push_back(matmul(attn, vh));
    }
    z = add(z, linear(concat(heads, 1), P(b + "o.w"), P(b + "o.b")));
    const Tensor n2 = layer_norm(z, P(b + "ln2.g"), P(b + "ln2.b"));
    z = add(z, linear(relu(linear(n2, P(b + "mlp1.w"), P(b + "mlp1.b"))), P(b + "mlp2.w"), P(b + "mlp2.b")));
  }
  const Tensor cls = slice(layer_norm(z, P("ln.g"), P("ln.b")), 0, 0, 1);
  return reshape(linear(cls, P("head.w"), P("head.b")), {cfg.out_dim});
}

}  // namespace siftgraph
