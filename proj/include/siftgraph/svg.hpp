#pragma once

// Hand-written SVG figures: keypoint overlays, k-NN graph renderings and the
// accuracy-versus-epsilon plot. Images are embedded as base64 BMP data URIs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "siftgraph/attack.hpp"
#include "siftgraph/graph.hpp"
#include "siftgraph/image.hpp"
#include "siftgraph/sift.hpp"

namespace siftgraph {

namespace detail {

inline std::string base64(std::string_view in) {
  static constexpr char table[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < in.size(); i += 3) {
    std::uint32_t v = static_cast<unsigned char>(in[i]) << 16;
    if (i + 1 < in.size()) v |= static_cast<unsigned char>(in[i + 1]) << 8;
    if (i + 2 < in.size()) v |= static_cast<unsigned char>(in[i + 2]);
    out.push_back(table[(v >> 18) & 63]);
    out.push_back(table[(v >> 12) & 63]);
    out.push_back(i + 1 < in.size() ? table[(v >> 6) & 63] : '=');
    out.push_back(i + 2 < in.size() ? table[v & 63] : '=');
  }
  return out;
}

// 24-bit bottom-up BMP.
inline std::string encode_bmp(const ImageTensor& img) {
  const std::size_t row = (img.width * 3 + 3) & ~std::size_t{3};
  const std::size_t data = row * img.height;
  std::string out;
  auto u16 = [&](std::uint16_t v) { out.append(reinterpret_cast<const char*>(&v), 2); };
  auto u32 = [&](std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); };
  out += "BM";
  u32(static_cast<std::uint32_t>(54 + data));
  u32(0);
  u32(54);
  u32(40);
  u32(static_cast<std::uint32_t>(img.width));
  u32(static_cast<std::uint32_t>(img.height));
  u16(1);
  u16(24);
  for (int i = 0; i < 6; ++i) u32(i == 1 ? static_cast<std::uint32_t>(data) : 0);
  for (std::size_t y = img.height; y-- > 0;) {
    std::size_t written = 0;
    for (std::size_t x = 0; x < img.width; ++x) {
      for (int c = 2; c >= 0; --c) {
        const std::size_t ch = img.channels == 3 ? static_cast<std::size_t>(c) : 0;
        out.push_back(static_cast<char>(std::lround(std::clamp(img.at(y, x, ch), 0.0f, 1.0f) * 255.0f)));
      }
      written += 3;
    }
    out.append(row - written, '\0');
  }
  return out;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string svg_open(double w, double h, const std::string& extra = "") {
  return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(w) + "\" height=\"" + fmt(h) + "\" viewBox=\"0 0 " +
         fmt(w) + " " + fmt(h) + "\"" + extra + ">\n";
}

inline std::string embedded_image(const ImageTensor& img) {
  return "<image x=\"0\" y=\"0\" width=\"" + std::to_string(img.width) + "\" height=\"" + std::to_string(img.height) +
         "\" image-rendering=\"pixelated\" href=\"data:image/bmp;base64," + base64(encode_bmp(img)) + "\"/>\n";
}

}  // namespace detail

// One circle of radius `scale` per keypoint and a radius line along theta.
inline std::string keypoint_svg(const ImageTensor& img, const std::vector<Feature>& feats) {
  std::string out = detail::svg_open(static_cast<double>(img.width), static_cast<double>(img.height));
  out += detail::embedded_image(img);
  out += "<g fill=\"none\" stroke=\"#ffd400\" stroke-width=\"0.5\">\n";
  for (const auto& f : feats) {
    const double x = f.kp.x, y = f.kp.y, r = f.kp.scale;
    out += "<circle class=\"kp\" cx=\"" + detail::fmt(x) + "\" cy=\"" + detail::fmt(y) + "\" r=\"" + detail::fmt(r) +
           "\"/>";
    out += "<line class=\"kp-dir\" x1=\"" + detail::fmt(x) + "\" y1=\"" + detail::fmt(y) + "\" x2=\"" +
           detail::fmt(x + r * std::cos(static_cast<double>(f.kp.theta))) + "\" y2=\"" +
           detail::fmt(y + r * std::sin(static_cast<double>(f.kp.theta))) + "\"/>\n";
  }
  out += "</g>\n</svg>\n";
  return out;
}

// Undirected rendering: one line per edge pair, drawn in normalized
// coordinates and mapped back onto the image by the group transform.
inline std::string graph_svg(const ImageTensor& img, const KeypointGraph& g, const NormalizationStats& stats,
                             bool paper_default) {
  std::string out = detail::svg_open(static_cast<double>(img.width), static_cast<double>(img.height),
                                     " data-k=\"" + std::to_string(g.k) + "\"" +
                                         (paper_default ? " data-default=\"true\"" : ""));
  out += detail::embedded_image(img);
  const double sx = stats.sigma_x + stats.eps, sy = stats.sigma_y + stats.eps;
  out += "<g transform=\"translate(" + detail::fmt(stats.mu_x) + " " + detail::fmt(stats.mu_y) + ") scale(" +
         detail::fmt(sx) + " " + detail::fmt(sy) + ")\">\n";
  auto coord = [&](std::size_t node, std::size_t col) {
    return detail::fmt(static_cast<double>(g.features[node * kNodeFeatureWidth + col]));
  };
  const double stroke = 0.6 / std::max(sx, sy);
  out += "<g stroke=\"#00e0ff\" stroke-width=\"" + detail::fmt(stroke) + "\">\n";
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    if (g.edges.src[e] >= g.edges.dst[e]) continue;
    out += "<line class=\"edge\" x1=\"" + coord(g.edges.src[e], 128) + "\" y1=\"" + coord(g.edges.src[e], 129) +
           "\" x2=\"" + coord(g.edges.dst[e], 128) + "\" y2=\"" + coord(g.edges.dst[e], 129) + "\"/>\n";
  }
  out += "</g>\n<g fill=\"#ff3060\">\n";
  for (std::size_t i = 0; i < g.n_nodes; ++i)
    out += "<circle class=\"node\" cx=\"" + coord(i, 128) + "\" cy=\"" + coord(i, 129) + "\" r=\"" +
           detail::fmt(1.2 / std::max(sx, sy)) + "\"/>\n";
  out += "</g>\n</g>\n";
  out += "<text x=\"2\" y=\"8\" font-size=\"7\" fill=\"#ffffff\">k = " + std::to_string(g.k) +
         (paper_default ? " (default)" : "") + "</text>\n</svg>\n";
  return out;
}

// Log-x accuracy plot, one series per variant over the nonzero budgets; the
// clean accuracy of each variant is a dashed horizontal line.
inline std::string sweep_svg(const EvalReport& rep) {
  const double W = 640, H = 400, left = 60, right = 130, top = 30, bottom = 50;
  std::vector<double> eps;
  std::vector<std::string> variants;
  for (const auto& r : rep.rows) {
    if (r.epsilon > 0 && std::find(eps.begin(), eps.end(), r.epsilon) == eps.end()) eps.push_back(r.epsilon);
    if (std::find(variants.begin(), variants.end(), r.variant) == variants.end()) variants.push_back(r.variant);
  }
  const double lo = eps.empty() ? 1e-3 : std::log10(eps.front()), hi = eps.empty() ? 1e-1 : std::log10(eps.back());
  const double span = hi > lo ? hi - lo : 1.0;
  auto px = [&](double e) { return left + (std::log10(e) - lo) / span * (W - left - right); };
  auto py = [&](double a) { return top + (1 - a) * (H - top - bottom); };
  static const char* colours[] = {"#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"};

  std::string out = detail::svg_open(W, H);
  out += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
  out += "<text x=\"" + detail::fmt(W / 2) + "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">Accuracy under PGD (" +
         rep.dataset + ", " + rep.backbone + ")</text>\n";
  out += "<g stroke=\"#000000\" stroke-width=\"1\"><line x1=\"" + detail::fmt(left) + "\" y1=\"" + detail::fmt(py(0)) +
         "\" x2=\"" + detail::fmt(W - right) + "\" y2=\"" + detail::fmt(py(0)) + "\"/><line x1=\"" + detail::fmt(left) +
         "\" y1=\"" + detail::fmt(py(0)) + "\" x2=\"" + detail::fmt(left) + "\" y2=\"" + detail::fmt(py(1)) +
         "\"/></g>\n";
  for (double e : eps) {
    char label[16];
    std::snprintf(label, sizeof label, "%.4f", e);
    out += "<g class=\"xtick\" data-eps=\"" + std::string(label) + "\"><line x1=\"" + detail::fmt(px(e)) + "\" y1=\"" +
           detail::fmt(py(0)) + "\" x2=\"" + detail::fmt(px(e)) + "\" y2=\"" + detail::fmt(py(0) + 4) +
           "\" stroke=\"#000000\"/><text x=\"" + detail::fmt(px(e)) + "\" y=\"" + detail::fmt(py(0) + 16) +
           "\" font-size=\"9\" text-anchor=\"middle\">" + label + "</text></g>\n";
  }
  for (int t = 0; t <= 4; ++t) {
    const double a = t / 4.0;
    out += "<text x=\"" + detail::fmt(left - 6) + "\" y=\"" + detail::fmt(py(a) + 3) +
           "\" font-size=\"9\" text-anchor=\"end\">" + detail::fmt(a) + "</text>\n";
  }
  out += "<text x=\"" + detail::fmt((left + W - right) / 2) + "\" y=\"" + detail::fmt(H - 12) +
         "\" font-size=\"11\" text-anchor=\"middle\">epsilon (log scale)</text>\n";
  out += "<text x=\"14\" y=\"" + detail::fmt((top + H - bottom) / 2) +
         "\" font-size=\"11\" text-anchor=\"middle\" transform=\"rotate(-90 14 " + detail::fmt((top + H - bottom) / 2) +
         ")\">accuracy</text>\n";
  for (std::size_t v = 0; v < variants.size(); ++v) {
    const std::string colour = colours[v % 5];
    std::string points;
    double clean = -1;
    for (const auto& r : rep.rows) {
      if (r.variant != variants[v]) continue;
      if (r.epsilon == 0) clean = r.accuracy;
      else points += detail::fmt(px(r.epsilon)) + "," + detail::fmt(py(r.accuracy)) + " ";
    }
    if (clean >= 0)
      out += "<line class=\"clean\" x1=\"" + detail::fmt(left) + "\" y1=\"" + detail::fmt(py(clean)) + "\" x2=\"" +
             detail::fmt(W - right) + "\" y2=\"" + detail::fmt(py(clean)) + "\" stroke=\"" + colour +
             "\" stroke-dasharray=\"4 3\" stroke-width=\"1\"/>\n";
    out += "<polyline class=\"series\" data-variant=\"" + variants[v] + "\" fill=\"none\" stroke=\"" + colour +
           "\" stroke-width=\"2\" points=\"" + points + "\"/>\n";
    out += "<text x=\"" + detail::fmt(W - right + 10) + "\" y=\"" + detail::fmt(top + 16 + 16 * static_cast<double>(v)) +
           "\" font-size=\"11\" fill=\"" + colour + "\">" + variants[v] + "</text>\n";
  }
  out += "</svg>\n";
  return out;
}

}  // namespace siftgraph
