#pragma once

// Datasets: the CIFAR-10 binary corpus, a synthetic shapes corpus, and the
// shared preprocessing into model input space.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "siftgraph/checkpoint.hpp"
#include "siftgraph/error.hpp"
#include "siftgraph/graph_cache.hpp"
#include "siftgraph/image.hpp"
#include "siftgraph/io.hpp"
#include "siftgraph/sift.hpp"

namespace siftgraph {

struct Sample {
  ImageTensor image;
  int label = 0;

  friend bool operator==(const Sample&, const Sample&) = default;
};

struct Dataset {
  std::string name;
  std::vector<Sample> train, test;
  int n_classes = 0;
  std::vector<std::string> class_names;

  void validate() const {
    if (n_classes < 2) throw validation_error("dataset " + name + ": need at least 2 classes");
    for (const auto* split : {&train, &test}) {
      for (const auto& s : *split) {
        if (s.label < 0 || s.label >= n_classes)
          throw validation_error("dataset " + name + ": label " + std::to_string(s.label) + " out of range");
        if (!s.image.same_shape(split->front().image))
          throw validation_error("dataset " + name + ": images differ in size within a split");
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Bilinear resize into the model's square input space, clamped to [0,1].
inline ImageTensor preprocess(const ImageTensor& img, std::size_t size = 64) {
  if (img.empty()) throw validation_error("preprocess: empty image");
  ImageTensor out = resize_bilinear(img, size, size);
  out.clamp01();
  return out;
}

inline void preprocess_dataset(Dataset& ds, std::size_t size = 64) {
  for (auto* split : {&ds.train, &ds.test})
    for (auto& s : *split) s.image = preprocess(s.image, size);
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches
// ---------------------------------------------------------------------------

inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarRecord = 1 + 3 * kCifarSide * kCifarSide;

inline const std::vector<std::string>& cifar10_class_names() {
  static const std::vector<std::string> names{"airplane", "automobile", "bird",  "cat",  "deer",
                                              "dog",      "frog",       "horse", "ship", "truck"};
  return names;
}

// Records: label byte, then the R, G and B planes, each 32x32 row-major.
inline std::vector<Sample> decode_cifar10(std::string_view bytes, const std::string& name, std::size_t limit = 0) {
  if (bytes.size() % kCifarRecord)
    throw validation_error(name + ": size " + std::to_string(bytes.size()) + " is not a multiple of " +
                           std::to_string(kCifarRecord));
  std::size_t n = bytes.size() / kCifarRecord;
  if (limit) n = std::min(n, limit);
  std::vector<Sample> out(n);
  const std::size_t plane = kCifarSide * kCifarSide;
  for (std::size_t r = 0; r < n; ++r) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data() + r * kCifarRecord);
    if (rec[0] > 9) throw validation_error(name + ": record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    out[r].label = rec[0];
    out[r].image = ImageTensor(kCifarSide, kCifarSide, 3);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        out[r].image.values[i * 3 + c] = static_cast<float>(rec[1 + c * plane + i]) / 255.0f;
  }
  return out;
}

inline std::string encode_cifar10(const std::vector<Sample>& samples) {
  std::string out;
  out.reserve(samples.size() * kCifarRecord);
  const std::size_t plane = kCifarSide * kCifarSide;
  for (const auto& s : samples) {
    if (s.image.height != kCifarSide || s.image.width != kCifarSide || s.image.channels != 3)
      throw validation_error("cifar10 writer: images must be 32x32 RGB");
    if (s.label < 0 || s.label > 9) throw validation_error("cifar10 writer: label out of range");
    out.push_back(static_cast<char>(s.label));
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i)
        out.push_back(static_cast<char>(std::lround(std::clamp(s.image.values[i * 3 + c], 0.0f, 1.0f) * 255.0f)));
  }
  return out;
}

inline std::vector<Sample> read_cifar10_file(const std::filesystem::path& path, std::size_t limit = 0) {
  return decode_cifar10(read_file(path), path.string(), limit);
}

inline void write_cifar10_file(const std::filesystem::path& path, const std::vector<Sample>& samples) {
  atomic_write(path, encode_cifar10(samples));
}

// Reads data_batch_1..5.bin and test_batch.bin. `limit` caps each split (0 = all).
// Images stay at 32x32; see preprocess_dataset.
inline Dataset load_cifar10(const std::filesystem::path& dir, std::size_t limit = 0) {
  Dataset ds;
  ds.name = "cifar10";
  ds.n_classes = 10;
  ds.class_names = cifar10_class_names();
  for (int b = 1; b <= 5; ++b) {
    if (limit && ds.train.size() >= limit) break;
    auto part = read_cifar10_file(dir / ("data_batch_" + std::to_string(b) + ".bin"),
                                  limit ? limit - ds.train.size() : 0);
    ds.train.insert(ds.train.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  ds.test = read_cifar10_file(dir / "test_batch.bin", limit);
  return ds;
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

enum class Shape2D { circle = 0, triangle = 1, square = 2, cross = 3 };

inline const std::vector<std::string>& shape_class_names() {
  static const std::vector<std::string> names{"circle", "triangle", "square", "cross"};
  return names;
}

namespace detail {

// Signed distance (pixels, negative inside) to a shape of circumradius-ish size r
// centred at the origin, evaluated in the shape's rotated frame.
inline double shape_sdf(Shape2D kind, double x, double y, double r) {
  auto box = [](double px, double py, double hx, double hy) {
    const double dx = std::abs(px) - hx, dy = std::abs(py) - hy;
    return std::hypot(std::max(dx, 0.0), std::max(dy, 0.0)) + std::min(std::max(dx, dy), 0.0);
  };
  switch (kind) {
    case Shape2D::circle:
      return std::hypot(x, y) - r;
    case Shape2D::square:
      return box(x, y, 0.8 * r, 0.8 * r);
    case Shape2D::cross:
      return std::min(box(x, y, r, 0.3 * r), box(x, y, 0.3 * r, r));
    case Shape2D::triangle: {
      // Equilateral triangle with vertices at distance r from the centre.
      const double k = std::sqrt(3.0);
      const double h = r * k / 2;  // half side
      double px = std::abs(x) - h;
      double py = y + h / k;
      if (px + k * py > 0) {
        const double nx = (px - k * py) / 2, ny = (-k * px - py) / 2;
        px = nx;
        py = ny;
      }
      px -= std::clamp(px, -2 * h, 0.0);
      return -std::hypot(px, py) * (py < 0 ? -1.0 : 1.0);
    }
  }
  return 0;
}

struct ShapeDraw {
  Shape2D kind;
  double cx, cy, r, angle;
  bool filled;
  double stroke;
  std::array<float, 3> fg, bg;
  std::array<double, 4> wave;  // background texture: fx, fy, phase, amplitude
  std::array<double, 4> wave2;
};

inline ImageTensor render_shape(const ShapeDraw& d, std::size_t size) {
  ImageTensor img(size, size, 3);
  const double ca = std::cos(d.angle), sa = std::sin(d.angle);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double px = static_cast<double>(x) - d.cx, py = static_cast<double>(y) - d.cy;
      const double lx = ca * px + sa * py, ly = -sa * px + ca * py;
      double sdf = shape_sdf(d.kind, lx, ly, d.r);
      if (!d.filled) sdf = std::abs(sdf) - d.stroke / 2;
      const double cover = std::clamp(0.5 - sdf, 0.0, 1.0);
      const double tex = d.wave[3] * std::sin(d.wave[0] * static_cast<double>(x) + d.wave[1] * static_cast<double>(y) + d.wave[2]) +
                         d.wave2[3] * std::sin(d.wave2[0] * static_cast<double>(x) + d.wave2[1] * static_cast<double>(y) + d.wave2[2]);
      for (std::size_t c = 0; c < 3; ++c) {
        const double bg = d.bg[c] + tex;
        img.at(y, x, c) = static_cast<float>(std::clamp(cover * d.fg[c] + (1 - cover) * bg, 0.0, 1.0));
      }
    }
  }
  return img;
}

inline ShapeDraw random_shape(Shape2D kind, std::size_t size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double n = static_cast<double>(size);
  ShapeDraw d{};
  d.kind = kind;
  d.r = n * (0.2 + 0.12 * u(rng));
  const double margin = d.r + 3;
  d.cx = margin + (n - 1 - 2 * margin) * u(rng);
  d.cy = margin + (n - 1 - 2 * margin) * u(rng);
  d.angle = 2 * std::numbers::pi * u(rng);
  d.filled = u(rng) < 0.5;
  d.stroke = 2.5 + 1.5 * u(rng);
  // Dark shape on light ground or the reverse, with a random tint.
  const bool light_fg = u(rng) < 0.5;
  for (std::size_t c = 0; c < 3; ++c) {
    const double lo = 0.1 + 0.2 * u(rng), hi = 0.7 + 0.2 * u(rng);
    d.fg[c] = static_cast<float>(light_fg ? hi : lo);
    d.bg[c] = static_cast<float>(light_fg ? lo : hi);
  }
  for (auto* w : {&d.wave, &d.wave2}) {
    const double freq = 2 * std::numbers::pi / (n * (0.5 + u(rng)));
    const double dir = 2 * std::numbers::pi * u(rng);
    *w = {freq * std::cos(dir), freq * std::sin(dir), 2 * std::numbers::pi * u(rng), 0.04 + 0.04 * u(rng)};
  }
  return d;
}

inline std::vector<Sample> shape_split(std::size_t n, std::size_t size, int n_classes, std::size_t min_keypoints,
                                       std::mt19937_64& rng) {
  std::vector<Sample> out(n);
  SiftConfig sift;
  for (std::size_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % static_cast<std::size_t>(n_classes));
    for (;;) {
      ImageTensor img = render_shape(random_shape(static_cast<Shape2D>(label), size, rng), size);
      if (extract(img, sift).size() >= min_keypoints) {
        out[i] = {std::move(img), label};
        break;
      }
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace detail

inline constexpr std::size_t kMinShapeKeypoints = 6;

// Classes circle, triangle, square, cross (the first C of them). Every image
// yields at least kMinShapeKeypoints under the default SIFT config; draws
// that fall short are replaced. Classes are balanced to within one sample.
inline Dataset make_synthetic_shapes(std::size_t n_train, std::size_t n_test, std::size_t size = 64,
                                     int n_classes = 4, std::uint64_t seed = 0) {
  if (n_classes < 2 || n_classes > 4) throw validation_error("shapes: n_classes must be in [2, 4]");
  if (n_train < static_cast<std::size_t>(n_classes) || n_test < static_cast<std::size_t>(n_classes))
    throw validation_error("shapes: each split needs at least one sample per class");
  if (size < 32) throw validation_error("shapes: image size must be at least 32");
  Dataset ds;
  ds.name = "shapes";
  ds.n_classes = n_classes;
  ds.class_names.assign(shape_class_names().begin(), shape_class_names().begin() + n_classes);
  std::mt19937_64 train_rng(seed), test_rng(seed ^ 0x9e3779b97f4a7c15ULL);
  ds.train = detail::shape_split(n_train, size, n_classes, kMinShapeKeypoints, train_rng);
  ds.test = detail::shape_split(n_test, size, n_classes, kMinShapeKeypoints, test_rng);
  return ds;
}

}  // namespace siftgraph
