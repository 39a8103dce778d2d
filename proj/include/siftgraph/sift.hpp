#pragma once

// Scale-invariant keypoint detection and 128-d gradient-histogram descriptors.
//
// Conventions: pixel centers sit at integer coordinates, x is the column and
// y the row (pointing down). Orientations are atan2(dy, dx) in [0, 2*pi).
// Keypoints are always reported in the coordinate frame of the image handed
// to extract(); the optional upscale happens internally.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <numbers>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "siftgraph/error.hpp"
#include "siftgraph/image.hpp"

namespace siftgraph {

struct SiftConfig {
  int n_octaves = 0;  // 0 = floor(log2(min side)) - 2, at least 1
  int scales_per_octave = 3;
  double base_sigma = 1.6;
  double assumed_blur = 0.5;  // blur already present in the input
  float contrast_threshold = 0.03f;
  float edge_ratio = 10.0f;
  std::size_t max_keypoints = 256;
  double upscale_factor = 1.0;

  void validate() const {
    if (scales_per_octave < 1) throw validation_error("sift: scales_per_octave must be >= 1");
    if (n_octaves < 0) throw validation_error("sift: n_octaves must be >= 0");
    if (!(base_sigma > 0) || !(contrast_threshold > 0) || !(edge_ratio > 0) || !(upscale_factor > 0)) {
      throw validation_error("sift: thresholds and scales must be positive");
    }
    if (max_keypoints == 0) throw validation_error("sift: max_keypoints must be positive");
  }

  // Canonical text form; feeds cache keys and checkpoint digests.
  std::string canonical() const {
    std::ostringstream os;
    os << std::setprecision(9) << "octaves=" << n_octaves << ";scales=" << scales_per_octave
       << ";sigma=" << base_sigma << ";blur=" << assumed_blur << ";contrast=" << contrast_threshold
       << ";edge=" << edge_ratio << ";max=" << max_keypoints << ";upscale=" << upscale_factor;
    return os.str();
  }
};

struct Keypoint {
  float x = 0, y = 0;
  float scale = 0;     // Gaussian sigma in pixels
  float theta = 0;     // radians in [0, 2*pi)
  float response = 0;  // |interpolated DoG value|
  int octave = 0;
  int layer = 1;  // nearest Gaussian layer inside the octave
};

using Descriptor = std::array<float, 128>;

struct Feature {
  Keypoint kp;
  Descriptor desc{};
};

// Single-channel float grid, used for pyramid levels.
struct Plane {
  std::size_t width = 0, height = 0;
  std::vector<float> v;

  Plane() = default;
  Plane(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), v(w * h, fill) {}
  float& operator()(std::size_t x, std::size_t y) { return v[y * width + x]; }
  float operator()(std::size_t x, std::size_t y) const { return v[y * width + x]; }
};

struct ScaleSpace {
  std::vector<std::vector<Plane>> gauss;  // per octave: scales_per_octave + 3 levels
  std::vector<std::vector<Plane>> dog;    // per octave: scales_per_octave + 2 levels
  int scales_per_octave = 3;
  double base_sigma = 1.6;
  double upscale = 1.0;
  std::size_t input_width = 0, input_height = 0;

  int n_octaves() const { return static_cast<int>(gauss.size()); }
};

inline ImageTensor to_grayscale(const ImageTensor& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw validation_error("to_grayscale: channels must be 1 or 3");
  ImageTensor out(img.height, img.width, 1);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      out.at(y, x) = 0.299f * img.at(y, x, 0) + 0.587f * img.at(y, x, 1) + 0.114f * img.at(y, x, 2);
  return out;
}

namespace detail {

// Mirror about the edge pixel without repeating it: -1 -> 1, n -> n - 2.
inline std::size_t reflect101(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto m = static_cast<std::ptrdiff_t>(n);
  const std::ptrdiff_t period = 2 * (m - 1);
  i %= period;
  if (i < 0) i += period;
  if (i >= m) i = period - i;
  return static_cast<std::size_t>(i);
}

inline std::vector<float> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(4.0 * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * radius + 1));
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) total += std::exp(-0.5 * i * i / (sigma * sigma));
  for (int i = -radius; i <= radius; ++i)
    k[static_cast<std::size_t>(i + radius)] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)) / total);
  return k;
}

inline Plane plane_from_gray(const ImageTensor& gray) {
  Plane p(gray.width, gray.height);
  std::copy(gray.values.begin(), gray.values.end(), p.v.begin());
  return p;
}

inline float bilinear(const Plane& p, float x, float y) {
  const auto x0 = static_cast<std::ptrdiff_t>(std::floor(x));
  const auto y0 = static_cast<std::ptrdiff_t>(std::floor(y));
  const float wx = x - static_cast<float>(x0), wy = y - static_cast<float>(y0);
  const auto xa = static_cast<std::size_t>(x0), ya = static_cast<std::size_t>(y0);
  return (1 - wy) * ((1 - wx) * p(xa, ya) + wx * p(xa + 1, ya)) + wy * ((1 - wx) * p(xa, ya + 1) + wx * p(xa + 1, ya + 1));
}

inline float wrap_angle(float a) {
  constexpr float two_pi = 2.0f * std::numbers::pi_v<float>;
  a = std::fmod(a, two_pi);
  if (a < 0) a += two_pi;
  if (a >= two_pi) a = 0.0f;
  return a;
}

}  // namespace detail

// Separable Gaussian blur, kernel truncated at 4 sigma, reflect-101 borders.
inline Plane gaussian_blur(const Plane& src, double sigma) {
  const auto k = detail::gaussian_kernel(sigma);
  const std::size_t radius = k.size() / 2;
  const std::size_t w = src.width, h = src.height;
  Plane tmp(w, h), out(w, h);
  std::vector<float> line(std::max(w, h) + 2 * radius);
  auto convolve = [&](std::size_t n, auto&& load, auto&& store) {
    for (std::size_t i = 0; i < n + 2 * radius; ++i)
      line[i] = load(detail::reflect101(static_cast<std::ptrdiff_t>(i) - static_cast<std::ptrdiff_t>(radius), n));
    for (std::size_t i = 0; i < n; ++i) {
      float acc = 0.0f;
      for (std::size_t t = 0; t < k.size(); ++t) acc += k[t] * line[i + t];
      store(i, acc);
    }
  };
  for (std::size_t y = 0; y < h; ++y)
    convolve(w, [&](std::size_t x) { return src(x, y); }, [&](std::size_t x, float v) { tmp(x, y) = v; });
  for (std::size_t x = 0; x < w; ++x)
    convolve(h, [&](std::size_t y) { return tmp(x, y); }, [&](std::size_t y, float v) { out(x, y) = v; });
  return out;
}

inline int auto_octaves(std::size_t w, std::size_t h) {
  const auto min_side = static_cast<double>(std::min(w, h));
  return std::max(1, static_cast<int>(std::floor(std::log2(min_side))) - 2);
}

// Gaussian and difference-of-Gaussian pyramids of a single-channel image.
inline ScaleSpace build_scale_space(const ImageTensor& gray_in, const SiftConfig& cfg) {
  cfg.validate();
  if (gray_in.channels != 1) throw validation_error("build_scale_space: expects a grayscale image");
  if (std::min(gray_in.width, gray_in.height) < 8) {
    throw validation_error("build_scale_space: image too small (" + std::to_string(gray_in.width) + "x" +
                           std::to_string(gray_in.height) + ", need min side >= 8)");
  }
  ImageTensor gray = gray_in;
  if (cfg.upscale_factor != 1.0) {
    gray = resize_bilinear(gray_in,
                           static_cast<std::size_t>(std::lround(static_cast<double>(gray_in.height) * cfg.upscale_factor)),
                           static_cast<std::size_t>(std::lround(static_cast<double>(gray_in.width) * cfg.upscale_factor)));
  }

  ScaleSpace ss;
  ss.scales_per_octave = cfg.scales_per_octave;
  ss.base_sigma = cfg.base_sigma;
  ss.upscale = cfg.upscale_factor;
  ss.input_width = gray_in.width;
  ss.input_height = gray_in.height;

  const int s = cfg.scales_per_octave;
  const int octaves = cfg.n_octaves > 0 ? cfg.n_octaves : auto_octaves(gray.width, gray.height);
  const double present = cfg.assumed_blur * cfg.upscale_factor;
  const double first = std::sqrt(std::max(cfg.base_sigma * cfg.base_sigma - present * present, 0.01));

  std::vector<double> increments(static_cast<std::size_t>(s + 3), 0.0);
  for (int j = 1; j < s + 3; ++j) {
    const double prev = cfg.base_sigma * std::pow(2.0, (j - 1) / static_cast<double>(s));
    const double cur = cfg.base_sigma * std::pow(2.0, j / static_cast<double>(s));
    increments[static_cast<std::size_t>(j)] = std::sqrt(cur * cur - prev * prev);
  }

  Plane base = gaussian_blur(detail::plane_from_gray(gray), first);
  for (int o = 0; o < octaves; ++o) {
    std::vector<Plane> levels;
    levels.reserve(static_cast<std::size_t>(s + 3));
    if (o == 0) {
      levels.push_back(std::move(base));
    } else {
      const Plane& src = ss.gauss.back()[static_cast<std::size_t>(s)];
      Plane half(std::max<std::size_t>(1, src.width / 2), std::max<std::size_t>(1, src.height / 2));
      for (std::size_t y = 0; y < half.height; ++y)
        for (std::size_t x = 0; x < half.width; ++x) half(x, y) = src(2 * x, 2 * y);
      levels.push_back(std::move(half));
    }
    for (int j = 1; j < s + 3; ++j) levels.push_back(gaussian_blur(levels.back(), increments[static_cast<std::size_t>(j)]));

    std::vector<Plane> dogs;
    for (int j = 0; j + 1 < s + 3; ++j) {
      const auto& a = levels[static_cast<std::size_t>(j)];
      const auto& b = levels[static_cast<std::size_t>(j + 1)];
      Plane d(a.width, a.height);
      for (std::size_t i = 0; i < d.v.size(); ++i) d.v[i] = b.v[i] - a.v[i];
      dogs.push_back(std::move(d));
    }
    ss.gauss.push_back(std::move(levels));
    ss.dog.push_back(std::move(dogs));
  }
  return ss;
}

namespace detail {

struct Refined {
  Keypoint kp;
  std::size_t col, row;
  int layer;
};

// Quadratic fit of the DoG around (layer, row, col); moves to the neighbour
// sample while any offset exceeds 0.5, at most 5 times.
inline bool refine_extremum(const ScaleSpace& ss, int o, int layer, std::ptrdiff_t row, std::ptrdiff_t col,
                            const SiftConfig& cfg, Refined& out) {
  const auto& dogs = ss.dog[static_cast<std::size_t>(o)];
  const int s = ss.scales_per_octave;
  const auto w = static_cast<std::ptrdiff_t>(dogs[0].width), h = static_cast<std::ptrdiff_t>(dogs[0].height);
  constexpr std::ptrdiff_t border = 1;
  double off[3] = {0, 0, 0};
  double grad[3] = {0, 0, 0};
  bool converged = false;
  for (int iter = 0; iter < 5; ++iter) {
    const auto& prev = dogs[static_cast<std::size_t>(layer - 1)];
    const auto& cur = dogs[static_cast<std::size_t>(layer)];
    const auto& next = dogs[static_cast<std::size_t>(layer + 1)];
    const auto c = static_cast<std::size_t>(col), r = static_cast<std::size_t>(row);
    const double v = cur(c, r);
    grad[0] = 0.5 * (cur(c + 1, r) - cur(c - 1, r));
    grad[1] = 0.5 * (cur(c, r + 1) - cur(c, r - 1));
    grad[2] = 0.5 * (next(c, r) - prev(c, r));
    const double dxx = cur(c + 1, r) + cur(c - 1, r) - 2 * v;
    const double dyy = cur(c, r + 1) + cur(c, r - 1) - 2 * v;
    const double dss = next(c, r) + prev(c, r) - 2 * v;
    const double dxy = 0.25 * (cur(c + 1, r + 1) - cur(c - 1, r + 1) - cur(c + 1, r - 1) + cur(c - 1, r - 1));
    const double dxs = 0.25 * (next(c + 1, r) - next(c - 1, r) - prev(c + 1, r) + prev(c - 1, r));
    const double dys = 0.25 * (next(c, r + 1) - next(c, r - 1) - prev(c, r + 1) + prev(c, r - 1));
    Eigen::Matrix3d hess;
    hess << dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss;
    const Eigen::Vector3d g(grad[0], grad[1], grad[2]);
    Eigen::FullPivLU<Eigen::Matrix3d> lu(hess);
    if (!lu.isInvertible()) return false;
    const Eigen::Vector3d x = -lu.solve(g);
    off[0] = x(0);
    off[1] = x(1);
    off[2] = x(2);
    if (std::abs(off[0]) < 0.5 && std::abs(off[1]) < 0.5 && std::abs(off[2]) < 0.5) {
      converged = true;
      break;
    }
    if (std::abs(off[0]) > 1e3 || std::abs(off[1]) > 1e3 || std::abs(off[2]) > 1e3) return false;
    col += static_cast<std::ptrdiff_t>(std::lround(off[0]));
    row += static_cast<std::ptrdiff_t>(std::lround(off[1]));
    layer += static_cast<int>(std::lround(off[2]));
    if (layer < 1 || layer > s || col < border || col >= w - border || row < border || row >= h - border) return false;
  }
  if (!converged) return false;

  const auto& cur = dogs[static_cast<std::size_t>(layer)];
  const auto c = static_cast<std::size_t>(col), r = static_cast<std::size_t>(row);
  const double contrast = cur(c, r) + 0.5 * (grad[0] * off[0] + grad[1] * off[1] + grad[2] * off[2]);
  if (std::abs(contrast) < cfg.contrast_threshold) return false;

  const double v = cur(c, r);
  const double dxx = cur(c + 1, r) + cur(c - 1, r) - 2 * v;
  const double dyy = cur(c, r + 1) + cur(c, r - 1) - 2 * v;
  const double dxy = 0.25 * (cur(c + 1, r + 1) - cur(c - 1, r + 1) - cur(c + 1, r - 1) + cur(c - 1, r - 1));
  const double tr = dxx + dyy, det = dxx * dyy - dxy * dxy;
  const double ratio = cfg.edge_ratio;
  if (det <= 0 || tr * tr * ratio >= (ratio + 1) * (ratio + 1) * det) return false;

  const double octave_scale = std::ldexp(1.0, o) / ss.upscale;
  out.kp.x = static_cast<float>((static_cast<double>(col) + off[0]) * octave_scale);
  out.kp.y = static_cast<float>((static_cast<double>(row) + off[1]) * octave_scale);
  out.kp.scale = static_cast<float>(ss.base_sigma * std::pow(2.0, (layer + off[2]) / s) * octave_scale);
  out.kp.response = static_cast<float>(std::abs(contrast));
  out.kp.octave = o;
  out.kp.layer = layer;
  out.col = c;
  out.row = r;
  out.layer = layer;
  return true;
}

inline bool keypoint_order(const Keypoint& a, const Keypoint& b) {
  return std::tie(b.response, a.y, a.x, a.theta, a.scale) < std::tie(a.response, b.y, b.x, b.theta, b.scale);
}

}  // namespace detail

// 3x3x3 DoG extrema, refined to subpixel accuracy and filtered by contrast and
// edge response. Sorted by descending response and capped at max_keypoints.
inline std::vector<Keypoint> detect_keypoints(const ScaleSpace& ss, const SiftConfig& cfg) {
  std::vector<Keypoint> kps;
  std::vector<std::tuple<int, int, std::size_t, std::size_t>> seen;
  const int s = ss.scales_per_octave;
  const float prefilter = 0.5f * cfg.contrast_threshold;
  for (int o = 0; o < ss.n_octaves(); ++o) {
    const auto& dogs = ss.dog[static_cast<std::size_t>(o)];
    const std::size_t w = dogs[0].width, h = dogs[0].height;
    if (w < 3 || h < 3) continue;
    for (int layer = 1; layer <= s; ++layer) {
      const auto& prev = dogs[static_cast<std::size_t>(layer - 1)];
      const auto& cur = dogs[static_cast<std::size_t>(layer)];
      const auto& next = dogs[static_cast<std::size_t>(layer + 1)];
      for (std::size_t r = 1; r + 1 < h; ++r)
        for (std::size_t c = 1; c + 1 < w; ++c) {
          const float v = cur(c, r);
          if (std::abs(v) <= prefilter) continue;
          bool is_max = v > 0, is_min = v < 0;
          for (int dy = -1; dy <= 1 && (is_max || is_min); ++dy)
            for (int dx = -1; dx <= 1 && (is_max || is_min); ++dx) {
              const std::size_t xx = c + static_cast<std::size_t>(dx), yy = r + static_cast<std::size_t>(dy);
              for (const Plane* p : {&prev, &cur, &next}) {
                if (p == &cur && dx == 0 && dy == 0) continue;
                const float n = (*p)(xx, yy);
                if (n > v) is_max = false;
                if (n < v) is_min = false;
              }
            }
          if (!is_max && !is_min) continue;
          detail::Refined ref;
          if (!detail::refine_extremum(ss, o, layer, static_cast<std::ptrdiff_t>(r), static_cast<std::ptrdiff_t>(c), cfg,
                                       ref)) {
            continue;
          }
          const auto key = std::make_tuple(o, ref.layer, ref.row, ref.col);
          if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
          seen.push_back(key);
          const Keypoint& kp = ref.kp;
          if (kp.x < 0 || kp.y < 0 || kp.x >= static_cast<float>(ss.input_width) ||
              kp.y >= static_cast<float>(ss.input_height)) {
            continue;
          }
          kps.push_back(kp);
        }
    }
  }
  std::sort(kps.begin(), kps.end(), detail::keypoint_order);
  if (kps.size() > cfg.max_keypoints) kps.resize(cfg.max_keypoints);
  return kps;
}

namespace detail {

struct OctavePoint {
  const Plane* img;
  float x, y;   // position in octave pixels
  float sigma;  // scale in octave pixels
};

inline OctavePoint locate(const ScaleSpace& ss, const Keypoint& kp) {
  const int o = std::clamp(kp.octave, 0, ss.n_octaves() - 1);
  const int layer = std::clamp(kp.layer, 0, ss.scales_per_octave + 2);
  const double factor = ss.upscale / std::ldexp(1.0, o);
  return {&ss.gauss[static_cast<std::size_t>(o)][static_cast<std::size_t>(layer)], static_cast<float>(kp.x * factor),
          static_cast<float>(kp.y * factor), static_cast<float>(kp.scale * factor)};
}

}  // namespace detail

// Dominant gradient orientations around a keypoint: a 36-bin histogram over a
// radius 4.5*sigma window weighted by a Gaussian of 1.5*sigma. Every local
// peak within 80% of the maximum yields one keypoint. Empty when the window
// has no interior pixels.
inline std::vector<Keypoint> assign_orientation(const ScaleSpace& ss, const Keypoint& kp) {
  constexpr int bins = 36;
  constexpr float two_pi = 2.0f * std::numbers::pi_v<float>;
  const auto at = detail::locate(ss, kp);
  const Plane& img = *at.img;
  const int radius = static_cast<int>(std::lround(4.5f * at.sigma));
  const float weight_sigma = 1.5f * at.sigma;
  const auto cx = static_cast<int>(std::lround(at.x)), cy = static_cast<int>(std::lround(at.y));

  std::array<double, bins> hist{};
  int samples = 0;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) {
      const int x = cx + dx, y = cy + dy;
      if (x < 1 || y < 1 || x >= static_cast<int>(img.width) - 1 || y >= static_cast<int>(img.height) - 1) continue;
      const auto ux = static_cast<std::size_t>(x), uy = static_cast<std::size_t>(y);
      const double gx = img(ux + 1, uy) - img(ux - 1, uy);
      const double gy = img(ux, uy + 1) - img(ux, uy - 1);
      const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * weight_sigma * weight_sigma));
      const double angle = detail::wrap_angle(static_cast<float>(std::atan2(gy, gx)));
      const int bin = static_cast<int>(std::lround(angle * bins / two_pi)) % bins;
      hist[static_cast<std::size_t>(bin)] += w * std::sqrt(gx * gx + gy * gy);
      ++samples;
    }
  if (samples == 0) return {};

  const double peak = *std::max_element(hist.begin(), hist.end());
  if (peak <= 0.0) {
    Keypoint out = kp;
    out.theta = 0.0f;
    return {out};
  }
  std::vector<Keypoint> result;
  for (int b = 0; b < bins; ++b) {
    const double left = hist[static_cast<std::size_t>((b + bins - 1) % bins)];
    const double right = hist[static_cast<std::size_t>((b + 1) % bins)];
    const double c = hist[static_cast<std::size_t>(b)];
    if (!(c > left && c >= right) || c < 0.8 * peak) continue;
    const double denom = left - 2 * c + right;
    const double shift = denom != 0.0 ? 0.5 * (left - right) / denom : 0.0;
    Keypoint out = kp;
    out.theta = detail::wrap_angle(static_cast<float>((b + shift) * two_pi / bins));
    result.push_back(out);
  }
  return result;
}

// 4x4 cells x 8 orientation bins from a 16x16 sample grid rotated to the
// keypoint orientation. Cell width is 3 sigma; samples are Gaussian weighted
// with sigma = half the window and distributed trilinearly. The vector is
// L2-normalized, clipped at 0.2, and renormalized.
inline Descriptor compute_descriptor(const ScaleSpace& ss, const Keypoint& kp, Descriptor* pre_clip = nullptr) {
  constexpr int grid = 16, cells = 4, obins = 8;
  constexpr float two_pi = 2.0f * std::numbers::pi_v<float>;
  const auto at = detail::locate(ss, kp);
  const Plane& img = *at.img;
  const float spacing = 3.0f * at.sigma / 4.0f;
  const float cos_t = std::cos(kp.theta), sin_t = std::sin(kp.theta);
  const float half = grid / 2.0f;

  std::array<double, 128> hist{};
  for (int iv = 0; iv < grid; ++iv)
    for (int iu = 0; iu < grid; ++iu) {
      const float u = static_cast<float>(iu) + 0.5f - half, v = static_cast<float>(iv) + 0.5f - half;
      const float px = at.x + spacing * (u * cos_t - v * sin_t);
      const float py = at.y + spacing * (u * sin_t + v * cos_t);
      if (px < 1.0f || py < 1.0f || px >= static_cast<float>(img.width) - 2.0f ||
          py >= static_cast<float>(img.height) - 2.0f) {
        continue;
      }
      const float gx = detail::bilinear(img, px + 1, py) - detail::bilinear(img, px - 1, py);
      const float gy = detail::bilinear(img, px, py + 1) - detail::bilinear(img, px, py - 1);
      const double mag = std::sqrt(static_cast<double>(gx) * gx + static_cast<double>(gy) * gy);
      if (mag == 0.0) continue;
      const double w = std::exp(-(u * u + v * v) / (2.0 * half * half));
      const double rel = detail::wrap_angle(static_cast<float>(std::atan2(gy, gx)) - kp.theta);

      const double cu = (u + half) / (grid / cells) - 0.5, cv = (v + half) / (grid / cells) - 0.5;
      const double ob = rel * obins / two_pi;
      const int u0 = static_cast<int>(std::floor(cu)), v0 = static_cast<int>(std::floor(cv));
      const int o0 = static_cast<int>(std::floor(ob));
      const double fu = cu - u0, fv = cv - v0, fo = ob - o0;
      for (int dv = 0; dv <= 1; ++dv) {
        const int vv = v0 + dv;
        if (vv < 0 || vv >= cells) continue;
        const double wv = dv ? fv : 1 - fv;
        for (int du = 0; du <= 1; ++du) {
          const int uu = u0 + du;
          if (uu < 0 || uu >= cells) continue;
          const double wu = du ? fu : 1 - fu;
          for (int dob = 0; dob <= 1; ++dob) {
            const int oo = (o0 + dob) % obins;
            const double wo = dob ? fo : 1 - fo;
            hist[static_cast<std::size_t>((vv * cells + uu) * obins + oo)] += w * mag * wv * wu * wo;
          }
        }
      }
    }

  Descriptor d{};
  double norm = 0.0;
  for (double v : hist) norm += v * v;
  norm = std::sqrt(norm);
  if (norm <= 0.0) {
    d.fill(static_cast<float>(1.0 / std::sqrt(128.0)));
    if (pre_clip) *pre_clip = d;
    return d;
  }
  for (std::size_t i = 0; i < 128; ++i) d[i] = static_cast<float>(std::min(hist[i] / norm, 0.2));
  if (pre_clip) *pre_clip = d;
  double renorm = 0.0;
  for (float v : d) renorm += static_cast<double>(v) * v;
  renorm = std::sqrt(renorm);
  for (auto& v : d) v = static_cast<float>(v / renorm);
  return d;
}

// Keypoints with orientation and descriptor, ordered by (response desc, y, x).
inline std::vector<Feature> extract(const ImageTensor& img, const SiftConfig& cfg = {}) {
  const ImageTensor gray = to_grayscale(img);
  const ScaleSpace ss = build_scale_space(gray, cfg);
  std::vector<Feature> out;
  for (const auto& kp : detect_keypoints(ss, cfg))
    for (const auto& oriented : assign_orientation(ss, kp)) out.push_back({oriented, compute_descriptor(ss, oriented)});
  std::stable_sort(out.begin(), out.end(),
                   [](const Feature& a, const Feature& b) { return detail::keypoint_order(a.kp, b.kp); });
  if (out.size() > cfg.max_keypoints) out.resize(cfg.max_keypoints);
  return out;
}

// ---------------------------------------------------------------------------
// Stability under additive Gaussian noise
// ---------------------------------------------------------------------------

struct StabilityReport {
  double noise_level = 0;  // std-dev on the [0,1] scale
  double repeatability = 0;
  double mean_descriptor_distance = 0;
  double mean_pixel_distance = 0;  // ||I - I'||_2 over the 16x16 patch at each match
  std::size_t clean_keypoints = 0;
  std::size_t matched = 0;
};

inline std::vector<double> default_noise_levels() { return {2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255}; }

inline double descriptor_distance(const Descriptor& a, const Descriptor& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  return std::sqrt(acc);
}

// Greedy one-to-one matching by increasing spatial distance within `gate` px.
inline std::vector<std::pair<std::size_t, std::size_t>> match_keypoints(const std::vector<Feature>& a,
                                                                        const std::vector<Feature>& b, double gate = 2.0) {
  std::vector<std::tuple<double, std::size_t, std::size_t>> cand;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) {
      const double d = std::hypot(static_cast<double>(a[i].kp.x) - b[j].kp.x, static_cast<double>(a[i].kp.y) - b[j].kp.y);
      if (d <= gate) cand.emplace_back(d, i, j);
    }
  std::sort(cand.begin(), cand.end());
  std::vector<bool> used_a(a.size()), used_b(b.size());
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (const auto& [d, i, j] : cand) {
    if (used_a[i] || used_b[j]) continue;
    used_a[i] = used_b[j] = true;
    pairs.emplace_back(i, j);
  }
  return pairs;
}

inline ImageTensor add_gaussian_noise(const ImageTensor& img, double stddev, std::uint64_t seed) {
  ImageTensor out = img;
  if (stddev <= 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, stddev);
  for (auto& v : out.values) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
  return out;
}

inline double patch_distance(const ImageTensor& a, const ImageTensor& b, float x, float y, int half = 8) {
  const auto cx = static_cast<int>(std::lround(x)), cy = static_cast<int>(std::lround(y));
  double acc = 0.0;
  for (int yy = cy - half; yy < cy + half; ++yy)
    for (int xx = cx - half; xx < cx + half; ++xx) {
      if (xx < 0 || yy < 0 || xx >= static_cast<int>(a.width) || yy >= static_cast<int>(a.height)) continue;
      for (std::size_t c = 0; c < a.channels; ++c) {
        const double d = a.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c) -
                         b.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c);
        acc += d * d;
      }
    }
  return std::sqrt(acc);
}

inline std::vector<StabilityReport> measure_keypoint_stability(const ImageTensor& img, const std::vector<double>& levels,
                                                               std::uint64_t seed, const SiftConfig& cfg = {}) {
  const auto clean = extract(img, cfg);
  std::vector<StabilityReport> reports;
  for (std::size_t li = 0; li < levels.size(); ++li) {
    const ImageTensor noisy = add_gaussian_noise(img, levels[li], seed + 0x9e3779b97f4a7c15ULL * (li + 1));
    const auto perturbed = extract(noisy, cfg);
    const auto pairs = match_keypoints(clean, perturbed);
    StabilityReport r;
    r.noise_level = levels[li];
    r.clean_keypoints = clean.size();
    r.matched = pairs.size();
    r.repeatability = clean.empty() ? 1.0 : static_cast<double>(pairs.size()) / static_cast<double>(clean.size());
    for (const auto& [i, j] : pairs) {
      r.mean_descriptor_distance += descriptor_distance(clean[i].desc, perturbed[j].desc);
      r.mean_pixel_distance += patch_distance(img, noisy, clean[i].kp.x, clean[i].kp.y);
    }
    if (!pairs.empty()) {
      r.mean_descriptor_distance /= static_cast<double>(pairs.size());
      r.mean_pixel_distance /= static_cast<double>(pairs.size());
    }
    reports.push_back(r);
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Text format: "x y scale theta response d0 ... d127", one keypoint per line.
// ---------------------------------------------------------------------------

inline void write_features(std::ostream& os, const std::vector<Feature>& features) {
  const auto old = os.precision(9);
  for (const auto& f : features) {
    os << f.kp.x << ' ' << f.kp.y << ' ' << f.kp.scale << ' ' << f.kp.theta << ' ' << f.kp.response;
    for (float v : f.desc) os << ' ' << v;
    os << '\n';
  }
  os.precision(old);
}

inline std::vector<Feature> read_features(std::istream& is) {
  std::vector<Feature> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    Feature f;
    ls >> f.kp.x >> f.kp.y >> f.kp.scale >> f.kp.theta >> f.kp.response;
    for (auto& v : f.desc) ls >> v;
    if (!ls) throw validation_error("keypoint line " + std::to_string(lineno) + ": expected 133 numbers");
    out.push_back(f);
  }
  return out;
}

}  // namespace siftgraph
