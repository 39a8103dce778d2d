#pragma once

// Keypoint graphs: 133-wide node features and symmetric k-NN edges in the
// standardized coordinate space.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "siftgraph/error.hpp"
#include "siftgraph/sift.hpp"

namespace siftgraph {

inline constexpr std::size_t kNodeFeatureWidth = 133;
inline constexpr int kDefaultNeighbors = 5;

struct NormalizationStats {
  double mu_x = 0, mu_y = 0;
  double sigma_x = 1, sigma_y = 1;
  double eps = 1e-6;

  double norm_x(double x) const { return (x - mu_x) / (sigma_x + eps); }
  double norm_y(double y) const { return (y - mu_y) / (sigma_y + eps); }

  std::string canonical() const {
    std::ostringstream os;
    os << std::hexfloat << mu_x << ',' << mu_y << ',' << sigma_x << ',' << sigma_y << ',' << eps;
    return os.str();
  }

  friend bool operator==(const NormalizationStats&, const NormalizationStats&) = default;
};

// Population mean and standard deviation of keypoint coordinates over a corpus
// (one inner vector per image).
inline NormalizationStats compute_normalization_stats(const std::vector<std::vector<Feature>>& corpus) {
  // Welford accumulation keeps large pixel offsets from cancelling.
  std::size_t n = 0;
  double mx = 0, my = 0, m2x = 0, m2y = 0;
  for (const auto& image : corpus)
    for (const auto& f : image) {
      ++n;
      const double dx = f.kp.x - mx, dy = f.kp.y - my;
      mx += dx / static_cast<double>(n);
      my += dy / static_cast<double>(n);
      m2x += dx * (f.kp.x - mx);
      m2y += dy * (f.kp.y - my);
    }
  if (n == 0) throw validation_error("normalization stats: corpus contains no keypoints");
  NormalizationStats s;
  s.mu_x = mx;
  s.mu_y = my;
  s.sigma_x = std::sqrt(std::max(0.0, m2x / static_cast<double>(n)));
  s.sigma_y = std::sqrt(std::max(0.0, m2y / static_cast<double>(n)));
  return s;
}

// Row i = [descriptor(128), x_hat, y_hat, theta, response, scale].
inline std::vector<float> build_node_features(const std::vector<Feature>& feats, const NormalizationStats& stats) {
  if (!std::isfinite(stats.mu_x) || !std::isfinite(stats.mu_y) || !std::isfinite(stats.sigma_x) ||
      !std::isfinite(stats.sigma_y)) {
    throw validation_error("node features: normalization stats are not finite");
  }
  std::vector<float> x(feats.size() * kNodeFeatureWidth);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    float* row = x.data() + i * kNodeFeatureWidth;
    std::copy(feats[i].desc.begin(), feats[i].desc.end(), row);
    row[128] = static_cast<float>(stats.norm_x(feats[i].kp.x));
    row[129] = static_cast<float>(stats.norm_y(feats[i].kp.y));
    row[130] = feats[i].kp.theta;
    row[131] = feats[i].kp.response;
    row[132] = feats[i].kp.scale;
  }
  return x;
}

// Directed edge list; for every (src, dst) the reverse pair is also present.
struct EdgeIndex {
  std::vector<std::uint32_t> src, dst;

  std::size_t size() const { return src.size(); }
  friend bool operator==(const EdgeIndex&, const EdgeIndex&) = default;
};

// Brute-force k nearest neighbours (ties to the lower index), symmetrized,
// deduplicated, sorted by (src, dst). coords holds (x, y) pairs.
inline EdgeIndex knn_edges(const std::vector<std::pair<double, double>>& coords, int k) {
  if (k < 1) throw validation_error("knn_edges: k must be >= 1");
  const std::size_t n = coords.size();
  std::vector<std::pair<std::uint32_t, std::uint32_t>> pairs;
  std::vector<std::pair<double, std::uint32_t>> dist;
  const std::size_t keep = std::min<std::size_t>(static_cast<std::size_t>(k), n ? n - 1 : 0);
  for (std::size_t i = 0; i < n; ++i) {
    dist.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = coords[i].first - coords[j].first, dy = coords[i].second - coords[j].second;
      dist.emplace_back(dx * dx + dy * dy, static_cast<std::uint32_t>(j));
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(keep), dist.end());
    for (std::size_t t = 0; t < keep; ++t) {
      const auto a = static_cast<std::uint32_t>(i), b = dist[t].second;
      pairs.emplace_back(a, b);
      pairs.emplace_back(b, a);
    }
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  EdgeIndex e;
  e.src.reserve(pairs.size());
  e.dst.reserve(pairs.size());
  for (const auto& [a, b] : pairs) {
    e.src.push_back(a);
    e.dst.push_back(b);
  }
  return e;
}

struct KeypointGraph {
  std::size_t n_nodes = 0;
  int k = kDefaultNeighbors;
  std::vector<float> features;  // n_nodes x 133, row-major
  EdgeIndex edges;

  Tensor feature_tensor() const { return Tensor({n_nodes, kNodeFeatureWidth}, features); }
  friend bool operator==(const KeypointGraph&, const KeypointGraph&) = default;
};

// Graph from already extracted features. An empty list becomes one node with
// a zero descriptor at the image centre and no edges.
inline KeypointGraph graph_from_features(const std::vector<Feature>& feats, const NormalizationStats& stats, int k,
                                         std::size_t width, std::size_t height) {
  if (k < 1) throw validation_error("graph: k must be >= 1");
  KeypointGraph g;
  g.k = k;
  if (feats.empty()) {
    Feature centre;
    centre.desc.fill(0.0f);
    centre.kp.x = static_cast<float>((static_cast<double>(width) - 1) / 2);
    centre.kp.y = static_cast<float>((static_cast<double>(height) - 1) / 2);
    centre.kp.theta = centre.kp.response = centre.kp.scale = 0.0f;
    g.n_nodes = 1;
    g.features = build_node_features({centre}, stats);
    return g;
  }
  g.n_nodes = feats.size();
  g.features = build_node_features(feats, stats);
  std::vector<std::pair<double, double>> coords(feats.size());
  for (std::size_t i = 0; i < feats.size(); ++i)
    coords[i] = {g.features[i * kNodeFeatureWidth + 128], g.features[i * kNodeFeatureWidth + 129]};
  g.edges = knn_edges(coords, k);
  return g;
}

inline KeypointGraph build_graph(const ImageTensor& img, const SiftConfig& cfg, const NormalizationStats& stats,
                                 int k = kDefaultNeighbors) {
  return graph_from_features(extract(img, cfg), stats, k, img.width, img.height);
}

// Text form: "N |E| k", N rows of 133 features, |E| lines "src dst".
inline void write_graph(std::ostream& os, const KeypointGraph& g) {
  const auto old = os.precision(9);
  os << g.n_nodes << ' ' << g.edges.size() << ' ' << g.k << '\n';
  for (std::size_t i = 0; i < g.n_nodes; ++i) {
    for (std::size_t c = 0; c < kNodeFeatureWidth; ++c) os << (c ? " " : "") << g.features[i * kNodeFeatureWidth + c];
    os << '\n';
  }
  for (std::size_t e = 0; e < g.edges.size(); ++e) os << g.edges.src[e] << ' ' << g.edges.dst[e] << '\n';
  os.precision(old);
}

inline KeypointGraph read_graph(std::istream& is) {
  KeypointGraph g;
  std::size_t n_edges = 0;
  if (!(is >> g.n_nodes >> n_edges >> g.k)) throw validation_error("graph text: bad header, expected 'N |E| k'");
  g.features.resize(g.n_nodes * kNodeFeatureWidth);
  for (auto& v : g.features)
    if (!(is >> v)) throw validation_error("graph text: truncated feature rows");
  g.edges.src.resize(n_edges);
  g.edges.dst.resize(n_edges);
  for (std::size_t e = 0; e < n_edges; ++e) {
    if (!(is >> g.edges.src[e] >> g.edges.dst[e])) throw validation_error("graph text: truncated edge list");
    if (g.edges.src[e] >= g.n_nodes || g.edges.dst[e] >= g.n_nodes)
      throw validation_error("graph text: edge index out of range");
  }
  return g;
}

}  // namespace siftgraph
