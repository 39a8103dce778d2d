#pragma once

// Memoized keypoint graphs, in memory and optionally on disk under
// <dir>/<stats-digest>/<img-digest>.kg. The image digest covers the pixels,
// the SIFT config and k, so any change to them misses the cache.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

#include "siftgraph/graph.hpp"
#include "siftgraph/io.hpp"
#include "siftgraph/sift.hpp"

namespace siftgraph {

inline std::uint64_t stats_digest(const NormalizationStats& stats) { return fnv1a64(stats.canonical()); }

inline std::uint64_t image_digest(const ImageTensor& img, const SiftConfig& cfg, int k) {
  const std::uint64_t dims[3] = {img.height, img.width, img.channels};
  std::uint64_t h = fnv1a64(dims, sizeof dims);
  h = fnv1a64(img.values.data(), img.values.size() * sizeof(float), h);
  h = fnv1a64(cfg.canonical(), h);
  return fnv1a64(";k=" + std::to_string(k), h);
}

// Binary graph record: "SGKG", u64 n, i32 k, u64 |E|, f32 features, u32 src, u32 dst, u64 FNV-1a.
inline std::string encode_graph(const KeypointGraph& g) {
  ByteWriter w;
  w.bytes("SGKG");
  w.put<std::uint64_t>(g.n_nodes);
  w.put<std::int32_t>(g.k);
  w.put<std::uint64_t>(g.edges.size());
  w.bytes({reinterpret_cast<const char*>(g.features.data()), g.features.size() * sizeof(float)});
  w.bytes({reinterpret_cast<const char*>(g.edges.src.data()), g.edges.size() * sizeof(std::uint32_t)});
  w.bytes({reinterpret_cast<const char*>(g.edges.dst.data()), g.edges.size() * sizeof(std::uint32_t)});
  w.put<std::uint64_t>(fnv1a64(w.str()));
  return w.str();
}

inline KeypointGraph decode_graph(std::string_view bytes) {
  if (bytes.size() < 8) throw validation_error("graph record: truncated");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  if (stored != fnv1a64(bytes.substr(0, bytes.size() - 8))) throw validation_error("graph record: checksum mismatch");
  ByteReader r(bytes.substr(0, bytes.size() - 8), "graph record");
  if (r.bytes(4) != "SGKG") throw validation_error("graph record: bad magic");
  KeypointGraph g;
  g.n_nodes = r.get<std::uint64_t>();
  g.k = r.get<std::int32_t>();
  const auto n_edges = r.get<std::uint64_t>();
  if (g.n_nodes * kNodeFeatureWidth * sizeof(float) + 2 * n_edges * sizeof(std::uint32_t) != r.remaining())
    throw validation_error("graph record: size mismatch");
  g.features.resize(g.n_nodes * kNodeFeatureWidth);
  g.edges.src.resize(n_edges);
  g.edges.dst.resize(n_edges);
  auto copy = [&](void* dst, std::size_t n) { std::memcpy(dst, r.bytes(n).data(), n); };
  copy(g.features.data(), g.features.size() * sizeof(float));
  copy(g.edges.src.data(), n_edges * sizeof(std::uint32_t));
  copy(g.edges.dst.data(), n_edges * sizeof(std::uint32_t));
  for (std::size_t e = 0; e < n_edges; ++e)
    if (g.edges.src[e] >= g.n_nodes || g.edges.dst[e] >= g.n_nodes) throw validation_error("graph record: bad edge");
  return g;
}

class GraphCache {
 public:
  GraphCache(SiftConfig cfg, NormalizationStats stats, int k = kDefaultNeighbors,
             std::optional<std::filesystem::path> dir = std::nullopt)
      : cfg_(std::move(cfg)), stats_(stats), k_(k) {
    cfg_.validate();
    if (dir) dir_ = *dir / hex64(stats_digest(stats_));
  }

  const SiftConfig& sift_config() const { return cfg_; }
  const NormalizationStats& stats() const { return stats_; }
  int k() const { return k_; }
  std::optional<std::filesystem::path> directory() const { return dir_; }

  std::filesystem::path path_for(const ImageTensor& img) const {
    if (!dir_) throw usage_error("graph cache has no directory");
    return *dir_ / (hex64(image_digest(img, cfg_, k_)) + ".kg");
  }

  std::shared_ptr<const KeypointGraph> get(const ImageTensor& img) {
    const std::uint64_t key = image_digest(img, cfg_, k_);
    {
      std::lock_guard lock(mu_);
      if (auto it = mem_.find(key); it != mem_.end()) return it->second;
    }
    std::shared_ptr<const KeypointGraph> g;
    std::filesystem::path file;
    if (dir_) {
      file = *dir_ / (hex64(key) + ".kg");
      std::error_code ec;
      if (std::filesystem::exists(file, ec)) {
        try {
          g = std::make_shared<const KeypointGraph>(decode_graph(read_file(file)));
          if (g->k != k_) g.reset();
        } catch (const Error&) {
          g.reset();
        }
      }
    }
    if (!g) {
      g = std::make_shared<const KeypointGraph>(build_graph(img, cfg_, stats_, k_));
      ++extractions_;
      if (dir_) {
        std::lock_guard lock(write_mu_);
        atomic_write(file, encode_graph(*g));
      }
    }
    std::lock_guard lock(mu_);
    return mem_.emplace(key, std::move(g)).first->second;
  }

  // Stores a graph built elsewhere from `img` under this cache's settings.
  void insert(const ImageTensor& img, KeypointGraph g) {
    const std::uint64_t key = image_digest(img, cfg_, k_);
    auto shared = std::make_shared<const KeypointGraph>(std::move(g));
    if (dir_) {
      std::lock_guard lock(write_mu_);
      atomic_write(*dir_ / (hex64(key) + ".kg"), encode_graph(*shared));
    }
    std::lock_guard lock(mu_);
    mem_.insert_or_assign(key, std::move(shared));
  }

  // Number of SIFT extractions performed (cache misses on both levels).
  std::size_t extractions() const { return extractions_.load(); }
  std::size_t size() const {
    std::lock_guard lock(mu_);
    return mem_.size();
  }
  void clear_memory() {
    std::lock_guard lock(mu_);
    mem_.clear();
  }

 private:
  SiftConfig cfg_;
  NormalizationStats stats_;
  int k_;
  std::optional<std::filesystem::path> dir_;
  mutable std::mutex mu_;
  std::mutex write_mu_;
  std::unordered_map<std::uint64_t, std::shared_ptr<const KeypointGraph>> mem_;
  std::atomic<std::size_t> extractions_{0};
};

}  // namespace siftgraph
