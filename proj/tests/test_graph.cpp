#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "siftgraph/graph.hpp"

#include "oracles.hpp"

using namespace siftgraph;
using namespace siftgraph::testing;

namespace {

Feature feature_at(float x, float y, float seed_value = 0.0f) {
  Feature f;
  f.kp.x = x;
  f.kp.y = y;
  f.kp.scale = 1.5f;
  f.kp.theta = 0.25f;
  f.kp.response = 0.05f;
  for (std::size_t i = 0; i < 128; ++i) f.desc[i] = seed_value + 0.001f * static_cast<float>(i);
  return f;
}

void expect_symmetric_no_self_loops(const EdgeIndex& e, std::size_t n) {
  const auto s = edge_set(e);
  EXPECT_EQ(s.size(), e.size()) << "duplicate edges";
  for (const auto& [a, b] : s) {
    EXPECT_NE(a, b);
    EXPECT_LT(a, n);
    EXPECT_LT(b, n);
    EXPECT_TRUE(s.count({b, a})) << a << "->" << b << " has no reverse";
  }
}

}  // namespace

TEST(NormalizationStats, SingleKeypoint) {
  const auto s = compute_normalization_stats({{feature_at(10, 20)}});
  EXPECT_EQ(s.mu_x, 10.0);
  EXPECT_EQ(s.mu_y, 20.0);
  EXPECT_EQ(s.sigma_x, 0.0);
  EXPECT_EQ(s.sigma_y, 0.0);
  const auto x = build_node_features({feature_at(10, 20)}, s);
  EXPECT_EQ(x[128], 0.0f);
  EXPECT_EQ(x[129], 0.0f);
}

TEST(NormalizationStats, TwoPointPopulationStd) {
  const auto s = compute_normalization_stats({{feature_at(0, 5)}, {feature_at(2, 5)}});
  EXPECT_DOUBLE_EQ(s.mu_x, 1.0);
  EXPECT_DOUBLE_EQ(s.sigma_x, 1.0);
  EXPECT_EQ(s.eps, 1e-6);
}

TEST(NormalizationStats, EmptyCorpusRejected) {
  EXPECT_THROW(compute_normalization_stats({}), Error);
  EXPECT_THROW(compute_normalization_stats({{}, {}}), Error);
}

TEST(NormalizationStats, MatchesTwoPassOracle) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<float> u(0.0f, 64.0f);
  std::vector<std::vector<Feature>> corpus(10);
  std::vector<double> xs, ys;
  for (int i = 0; i < 100; ++i) {
    const float x = u(rng), y = u(rng);
    corpus[static_cast<std::size_t>(i % 10)].push_back(feature_at(x, y));
    xs.push_back(x);
    ys.push_back(y);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto stdev = [&](const std::vector<double>& v) {
    const double m = mean(v);
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size()));
  };
  const auto s = compute_normalization_stats(corpus);
  EXPECT_NEAR(s.mu_x, mean(xs), 1e-6);
  EXPECT_NEAR(s.mu_y, mean(ys), 1e-6);
  EXPECT_NEAR(s.sigma_x, stdev(xs), 1e-6);
  EXPECT_NEAR(s.sigma_y, stdev(ys), 1e-6);

  // Standardizing the same corpus gives zero mean and unit spread.
  double sum = 0, sq = 0;
  std::size_t n = 0;
  for (const auto& image : corpus) {
    const auto x = build_node_features(image, s);
    for (std::size_t i = 0; i < image.size(); ++i, ++n) {
      sum += x[i * kNodeFeatureWidth + 128];
      sq += static_cast<double>(x[i * kNodeFeatureWidth + 128]) * x[i * kNodeFeatureWidth + 128];
    }
  }
  const double m = sum / static_cast<double>(n);
  EXPECT_LE(std::abs(m), 1e-4);
  EXPECT_NEAR(std::sqrt(sq / static_cast<double>(n) - m * m), 1.0, 1e-3);
}

TEST(NodeFeatures, LayoutAndCopy) {
  NormalizationStats s;
  s.mu_x = 4;
  s.mu_y = 8;
  s.sigma_x = 2;
  s.sigma_y = 4;
  const auto a = feature_at(4, 8, 0.1f), b = feature_at(6, 0, 0.2f);
  const auto x = build_node_features({a, b}, s);
  ASSERT_EQ(x.size(), 2 * kNodeFeatureWidth);
  for (std::size_t i = 0; i < 128; ++i) {
    EXPECT_EQ(x[i], a.desc[i]);
    EXPECT_EQ(x[kNodeFeatureWidth + i], b.desc[i]);
  }
  EXPECT_EQ(x[128], 0.0f);
  EXPECT_EQ(x[129], 0.0f);
  EXPECT_NEAR(x[kNodeFeatureWidth + 128], 2.0 / (2 + 1e-6), 1e-6);
  EXPECT_NEAR(x[kNodeFeatureWidth + 129], -8.0 / (4 + 1e-6), 1e-6);
  EXPECT_EQ(x[130], a.kp.theta);
  EXPECT_EQ(x[131], a.kp.response);
  EXPECT_EQ(x[132], a.kp.scale);
}

TEST(Knn, SingleNodeHasNoEdges) { EXPECT_EQ(knn_edges({{0.0, 0.0}}, 5).size(), 0u); }

TEST(Knn, EmptyAndBadK) {
  EXPECT_EQ(knn_edges({}, 5).size(), 0u);
  EXPECT_THROW(knn_edges({{0, 0}, {1, 1}}, 0), Error);
}

TEST(Knn, CollinearExample) {
  const auto e = knn_edges({{0, 0}, {1, 0}, {3, 0}}, 1);
  const std::set<std::pair<std::uint32_t, std::uint32_t>> expected{{0, 1}, {1, 0}, {1, 2}, {2, 1}};
  EXPECT_EQ(edge_set(e), expected);
}

TEST(Knn, TiesGoToLowerIndex) {
  // Node 0 is equidistant from 1, 2 and 3; nodes 2 and 3 have closer partners.
  const auto e = knn_edges({{0, 0}, {1, 0}, {0, 1}, {-1, 0}, {0, 1.5}, {-1.5, 0}}, 1);
  const std::set<std::pair<std::uint32_t, std::uint32_t>> expected{{0, 1}, {1, 0}, {2, 4}, {4, 2}, {3, 5}, {5, 3}};
  EXPECT_EQ(edge_set(e), expected);
}

TEST(Knn, MatchesBruteForceOracle) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng() % 50;
    const int k = 1 + static_cast<int>(rng() % 7);
    std::vector<std::pair<double, double>> pts(n);
    // Integer grid coordinates make distance ties common.
    for (auto& p : pts) p = {static_cast<double>(rng() % 8), static_cast<double>(rng() % 8)};
    const auto e = knn_edges(pts, k);
    EXPECT_EQ(edge_set(e), knn_oracle(pts, k)) << "trial " << trial;
    expect_symmetric_no_self_loops(e, n);
    std::map<std::uint32_t, std::size_t> degree;
    for (auto s : e.src) ++degree[s];
    for (std::uint32_t i = 0; i < n && n > 1; ++i)
      EXPECT_GE(degree[i], std::min<std::size_t>(static_cast<std::size_t>(k), n - 1));
  }
}

TEST(BuildGraph, ConstantImageFallback) {
  const ImageTensor flat(64, 64, 1, 0.5f);
  NormalizationStats s;
  s.mu_x = s.mu_y = 31.5;
  s.sigma_x = s.sigma_y = 10;
  const auto g = build_graph(flat, SiftConfig{}, s);
  EXPECT_EQ(g.n_nodes, 1u);
  EXPECT_EQ(g.edges.size(), 0u);
  ASSERT_EQ(g.features.size(), kNodeFeatureWidth);
  for (std::size_t i = 0; i < 128; ++i) EXPECT_EQ(g.features[i], 0.0f);
  EXPECT_EQ(g.features[128], 0.0f);
  EXPECT_EQ(g.features[129], 0.0f);
  EXPECT_EQ(g.features[130], 0.0f);
  EXPECT_EQ(g.features[131], 0.0f);
  EXPECT_EQ(g.features[132], 0.0f);
}

TEST(BuildGraph, CheckerboardAgainstOracle) {
  const auto img = siftgraph::testing::checkerboard();
  const auto feats = extract(img);
  ASSERT_GT(feats.size(), 5u);
  const auto stats = compute_normalization_stats({feats});
  const auto g = build_graph(img, SiftConfig{}, stats, 5);
  EXPECT_EQ(g.n_nodes, feats.size());
  EXPECT_EQ(g.k, 5);
  std::vector<std::pair<double, double>> pts;
  for (std::size_t i = 0; i < g.n_nodes; ++i)
    pts.emplace_back(g.features[i * kNodeFeatureWidth + 128], g.features[i * kNodeFeatureWidth + 129]);
  EXPECT_EQ(edge_set(g.edges), knn_oracle(pts, 5));
  expect_symmetric_no_self_loops(g.edges, g.n_nodes);
}

TEST(GraphText, RoundTrip) {
  const auto img = siftgraph::testing::checkerboard();
  const auto feats = extract(img);
  const auto g = build_graph(img, SiftConfig{}, compute_normalization_stats({feats}));
  std::stringstream ss;
  write_graph(ss, g);
  std::string header;
  std::getline(ss, header);
  EXPECT_EQ(header, std::to_string(g.n_nodes) + " " + std::to_string(g.edges.size()) + " 5");
  ss.seekg(0);
  EXPECT_EQ(read_graph(ss), g);
}

TEST(GraphText, RejectsBadInput) {
  std::stringstream bad("2 1 5\n");
  EXPECT_THROW(read_graph(bad), Error);
  std::stringstream junk("x");
  EXPECT_THROW(read_graph(junk), Error);
}
