#include <gtest/gtest.h>

#include <random>

#include "gradcheck.hpp"
#include "siftgraph/backbone.hpp"

using namespace siftgraph;
using siftgraph::testing::gradcheck;
using siftgraph::testing::random_tensor;

namespace {

ImageTensor random_image(std::size_t n, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  ImageTensor img(n, n, c);
  for (auto& v : img.values) v = u(rng);
  return img;
}

template <class Cfg, class Init>
ParamSet make(const Cfg& cfg, Init init, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParamSet p;
  init(p, cfg, rng, std::string(std::is_same_v<Cfg, CnnConfig> ? "cnn." : "vit."));
  return p;
}

ParamSet cnn_params(const CnnConfig& cfg, std::uint64_t seed) {
  return make(cfg, [](ParamSet& p, const CnnConfig& c, std::mt19937_64& r, const std::string& s) { init_cnn_params(p, c, r, s); }, seed);
}

ParamSet vit_params(const VitConfig& cfg, std::uint64_t seed) {
  return make(cfg, [](ParamSet& p, const VitConfig& c, std::mt19937_64& r, const std::string& s) { init_vit_params(p, c, r, s); }, seed);
}

// Gradient check over every parameter of `base`, rebuilding a ParamSet from the inputs.
template <class Fwd>
double param_gradcheck(const ParamSet& base, const Tensor& x, Fwd fwd, std::uint64_t seed, std::size_t probe) {
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : base) {
    names.push_back(name);
    std::vector<float> v(t.values().begin(), t.values().end());
    // Zero biases put ReLU inputs exactly on the kink wherever a channel is dead.
    if (name.ends_with(".b"))
      for (std::size_t i = 0; i < v.size(); ++i) v[i] += 0.05f * static_cast<float>(i % 3 + 1);
    // A CLS row of std 0.02 sits where layer norm's curvature swamps a 1e-3 central difference.
    if (name.ends_with("cls"))
      for (auto& c : v) c *= 10.0f;
    inputs.push_back(Tensor(t.shape(), std::move(v), true));
  }
  auto f = [&](const std::vector<Tensor>& in) {
    ParamSet p;
    for (std::size_t i = 0; i < names.size(); ++i) p.add(names[i], in[i]);
    return fwd(x, p);
  };
  return gradcheck(f, inputs, seed, 1e-3, probe).max_rel_err;
}

}  // namespace

TEST(Patchify, ShapeAndOrder) {
  const auto img = random_image(64, 3, 1);
  const Tensor p = patchify(img, 8);
  EXPECT_EQ(p.shape(), (Shape{64, 192}));
  // Patch 1 is the second patch of the first row; entry 0 is channel 0, pixel (0, 8).
  EXPECT_EQ(p[192], img.at(0, 8, 0));
  // Entry 64 of patch 0 is channel 1, pixel (0, 0); entry 9 is channel 0, pixel (1, 1).
  EXPECT_EQ(p[64], img.at(0, 0, 1));
  EXPECT_EQ(p[9], img.at(1, 1, 0));
  // Patch 8 starts the second patch row.
  EXPECT_EQ(p[8 * 192], img.at(8, 0, 0));
}

TEST(Patchify, ConstantImageRowsIdentical) {
  const ImageTensor img(64, 64, 3, 0.3f);
  const Tensor p = patchify(img, 8);
  for (std::size_t r = 1; r < 64; ++r)
    for (std::size_t c = 0; c < 192; ++c) EXPECT_EQ(p[r * 192 + c], p[c]);
}

TEST(Patchify, RoundTripAndErrors) {
  const auto img = random_image(32, 3, 2);
  EXPECT_EQ(unpatchify(patchify(img, 8), 32, 32, 3, 8), img);
  EXPECT_THROW(patchify(random_image(30, 3, 3), 8), Error);
}

TEST(Cnn, OutputShapeAndParams) {
  const CnnConfig cfg;
  const auto p = cnn_params(cfg, 4);
  EXPECT_EQ(p.at("cnn.conv0.w").shape(), (Shape{32, 3, 3, 3}));
  EXPECT_EQ(p.at("cnn.conv2.w").shape(), (Shape{128, 64, 3, 3}));
  const Tensor z = cnn_forward(to_chw_tensor(random_image(64, 3, 5)), p, cfg);
  EXPECT_EQ(z.shape(), (Shape{128}));
}

TEST(Cnn, ZeroImageZeroBiasGivesZero) {
  const CnnConfig cfg;
  const auto p = cnn_params(cfg, 6);
  const Tensor z = cnn_forward(Tensor::zeros({3, 64, 64}), p, cfg);
  for (float v : z.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Cnn, RejectsWrongShape) {
  const CnnConfig cfg;
  const auto p = cnn_params(cfg, 7);
  EXPECT_THROW(cnn_forward(Tensor::zeros({3, 32, 32}), p, cfg), Error);
}

TEST(Cnn, PixelGradientMatchesFiniteDifference) {
  const CnnConfig cfg;
  const auto p = cnn_params(cfg, 8);
  auto f = [&](const std::vector<Tensor>& in) { return cnn_forward(in[0], p, cfg); };
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Tensor x = to_chw_tensor(random_image(64, 3, 10 + seed), true);
    EXPECT_LE(gradcheck(f, {x}, seed, 1e-3, 4).max_rel_err, 1e-2);
  }
}

TEST(Cnn, ParameterGradientsMatchFiniteDifferences) {
  CnnConfig cfg;
  cfg.input_size = 8;
  cfg.stages = {3, 4};
  cfg.out_dim = 5;
  const auto p = cnn_params(cfg, 9);
  const Tensor x = to_chw_tensor(random_image(8, 3, 11));
  auto fwd = [&](const Tensor& in, const ParamSet& ps) { return cnn_forward(in, ps, cfg); };
  for (std::uint64_t seed : {1u, 2u, 3u}) EXPECT_LE(param_gradcheck(p, x, fwd, seed, 0), 1e-2);
}

TEST(Vit, OutputShapeAndAttentionRows) {
  const VitConfig cfg;
  const auto p = vit_params(cfg, 12);
  std::vector<Tensor> attn;
  const Tensor z = vit_forward(to_chw_tensor(random_image(64, 3, 13)), p, cfg, "vit.", &attn);
  EXPECT_EQ(z.shape(), (Shape{128}));
  ASSERT_EQ(attn.size(), cfg.layers * cfg.heads);
  for (const auto& a : attn) {
    ASSERT_EQ(a.shape(), (Shape{65, 65}));
    for (std::size_t r = 0; r < 65; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 65; ++c) s += a[r * 65 + c];
      EXPECT_NEAR(s, 1.0, 1e-5);
    }
  }
}

TEST(Vit, SwappingPatchesChangesOutput) {
  const VitConfig cfg;
  const auto p = vit_params(cfg, 14);
  const auto img = random_image(64, 3, 15);
  auto swapped = img;
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < 3; ++c) std::swap(swapped.at(y, x, c), swapped.at(y + 24, x + 40, c));
  const Tensor a = vit_forward(to_chw_tensor(img), p, cfg), b = vit_forward(to_chw_tensor(swapped), p, cfg);
  double diff = 0;
  for (std::size_t i = 0; i < 128; ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 1e-4);
}

TEST(Vit, Deterministic) {
  const VitConfig cfg;
  const auto p = vit_params(cfg, 16);
  const Tensor x = to_chw_tensor(random_image(64, 3, 17));
  const Tensor a = vit_forward(x, p, cfg), b = vit_forward(x, p, cfg);
  for (std::size_t i = 0; i < 128; ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Vit, PixelGradientMatchesFiniteDifference) {
  const VitConfig cfg;
  const auto p = vit_params(cfg, 18);
  auto f = [&](const std::vector<Tensor>& in) { return vit_forward(in[0], p, cfg); };
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const Tensor x = to_chw_tensor(random_image(64, 3, 20 + seed), true);
    EXPECT_LE(gradcheck(f, {x}, seed, 1e-3, 4).max_rel_err, 1e-2);
  }
}

TEST(Vit, ParameterGradientsMatchFiniteDifferences) {
  VitConfig cfg;
  cfg.input_size = 8;
  cfg.patch = 4;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.out_dim = 5;
  const auto p = vit_params(cfg, 19);
  const Tensor x = to_chw_tensor(random_image(8, 3, 21));
  auto fwd = [&](const Tensor& in, const ParamSet& ps) { return vit_forward(in, ps, cfg); };
  for (std::uint64_t seed : {1u, 2u, 3u}) EXPECT_LE(param_gradcheck(p, x, fwd, seed, 0), 1e-2);
}
