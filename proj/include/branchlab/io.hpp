#pragma once

// CSV / JSON / SVG / PGM writers for analysis products. Numbers are printed
// with 17 significant digits so files round-trip and diff byte-for-byte.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "branchlab/diffkit.hpp"
#include "branchlab/trainer.hpp"

namespace branchlab::io {

inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return nlohmann::json::parse(in);
}

inline std::string matrix_csv(const Matrix& m) {
  std::ostringstream os;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) os << (c ? "," : "") << num(m(r, c));
    os << "\n";
  }
  return os.str();
}

inline nlohmann::json matrix_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
    rows.push_back(row);
  }
  return rows;
}

// step,loss,grad_norm
inline std::string trace_csv(const TrainTrace& t) {
  std::ostringstream os;
  os << "step,loss,grad_norm\n";
  for (std::size_t s = 0; s < t.losses.size(); ++s) os << s << "," << num(t.losses[s]) << "," << num(t.grad_norms[s]) << "\n";
  return os.str();
}

inline nlohmann::json trace_json(const TrainTrace& t) {
  nlohmann::json snaps = nlohmann::json::array();
  for (const Snapshot& s : t.snapshots) {
    nlohmann::json outs = nlohmann::json::array();
    for (const Matrix& m : s.branch_outputs) outs.push_back(matrix_json(m));
    snaps.push_back({{"step", s.step}, {"branch_outputs", outs}, {"params", s.params}});
  }
  nlohmann::json j = {{"losses", t.losses},
                      {"grad_norms", t.grad_norms},
                      {"grad_norm_final", t.grad_norm_final},
                      {"snapshots", snaps}};
  j["converged_at"] = t.converged_at ? nlohmann::json(*t.converged_at) : nlohmann::json(nullptr);
  return j;
}

// ---- SVG --------------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<double> xs;
  std::vector<double> ys;
};

namespace detail {
inline const char* palette(std::size_t i) {
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  return colors[i % 8];
}

inline std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    if (c == '<') out += "&lt;";
    else if (c == '>') out += "&gt;";
    else if (c == '&') out += "&amp;";
    else out += c;
  }
  return out;
}

// Diverging blue-white-red for v in [-1, 1].
inline std::string diverging(double v) {
  v = std::clamp(v, -1.0, 1.0);
  const auto mix = [](double a, double b, double t) { return static_cast<int>(std::lround(a + (b - a) * t)); };
  int r, g, b;
  if (v >= 0) {
    r = 255;
    g = mix(255, 40, v);
    b = mix(255, 40, v);
  } else {
    r = mix(255, 40, -v);
    g = mix(255, 90, -v);
    b = 255;
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline std::string gray(double v) {
  const int g = static_cast<int>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", g, g, g);
  return buf;
}
}  // namespace detail

inline std::string line_chart(const std::vector<Series>& series, const std::string& title, const std::string& xlabel,
                              const std::string& ylabel) {
  const double W = 480, H = 320, L = 60, R = 20, T = 30, B = 45;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const Series& s : series)
    for (std::size_t i = 0; i < s.xs.size(); ++i) {
      x0 = std::min(x0, s.xs[i]);
      x1 = std::max(x1, s.xs[i]);
      y0 = std::min(y0, s.ys[i]);
      y1 = std::max(y1, s.ys[i]);
    }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  y0 = std::min(y0, 0.0);
  if (y1 == y0) y1 = y0 + 1;
  const auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (W - L - R); };
  const auto py = [&](double y) { return H - B - (y - y0) / (y1 - y0) * (H - T - B); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" << detail::escape(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x0 + (x1 - x0) * i / 4.0, yv = y0 + (y1 - y0) * i / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << H - B + 14 << "\" text-anchor=\"middle\">" << num(std::round(xv * 100) / 100) << "</text>\n";
    os << "<text x=\"" << L - 4 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << num(std::round(yv * 100) / 100) << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 8 << "\" text-anchor=\"middle\">" << detail::escape(xlabel) << "</text>\n";
  os << "<text x=\"14\" y=\"" << (T + H - B) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " << (T + H - B) / 2 << ")\">"
     << detail::escape(ylabel) << "</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const Series& s = series[k];
    os << "<polyline fill=\"none\" stroke=\"" << detail::palette(k) << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.xs.size(); ++i) os << (i ? " " : "") << px(s.xs[i]) << "," << py(s.ys[i]);
    os << "\"/>\n";
    os << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 14 * (k + 1) << "\" text-anchor=\"end\" fill=\"" << detail::palette(k) << "\">"
       << detail::escape(s.name) << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// Rect-grid heatmap; values scaled by max |entry| onto a diverging palette.
inline std::string heatmap(const Matrix& m, const std::string& title, double cell = 12.0) {
  const double scale = m.size() ? m.cwiseAbs().maxCoeff() : 0.0;
  const double W = static_cast<double>(m.cols()) * cell + 20, H = static_cast<double>(m.rows()) * cell + 40;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"10\" y=\"18\">" << detail::escape(title) << "</text>\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c)
      os << "<rect x=\"" << 10 + static_cast<double>(c) * cell << "\" y=\"" << 28 + static_cast<double>(r) * cell << "\" width=\"" << cell
         << "\" height=\"" << cell << "\" fill=\"" << detail::diverging(scale > 0 ? m(r, c) / scale : 0.0) << "\"/>\n";
  os << "</svg>\n";
  return os.str();
}

// Grayscale images side by side, each min-max normalized.
inline std::string image_strip(const std::vector<Matrix>& images, const std::vector<std::string>& labels,
                               const std::string& title, double pixel = 4.0) {
  double W = 10, H = 0;
  for (const Matrix& img : images) {
    W += static_cast<double>(img.cols()) * pixel + 10;
    H = std::max(H, static_cast<double>(img.rows()) * pixel);
  }
  H += 60;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"10\" y=\"16\" font-size=\"12\">" << detail::escape(title) << "</text>\n";
  double x = 10;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Matrix& img = images[i];
    const double lo = img.size() ? img.minCoeff() : 0.0, hi = img.size() ? img.maxCoeff() : 1.0;
    for (Eigen::Index r = 0; r < img.rows(); ++r)
      for (Eigen::Index c = 0; c < img.cols(); ++c)
        os << "<rect x=\"" << x + static_cast<double>(c) * pixel << "\" y=\"" << 26 + static_cast<double>(r) * pixel << "\" width=\"" << pixel
           << "\" height=\"" << pixel << "\" fill=\"" << detail::gray(hi > lo ? (img(r, c) - lo) / (hi - lo) : 0.5) << "\"/>\n";
    if (i < labels.size())
      os << "<text x=\"" << x << "\" y=\"" << H - 12 << "\">" << detail::escape(labels[i]) << "</text>\n";
    x += static_cast<double>(img.cols()) * pixel + 10;
  }
  os << "</svg>\n";
  return os.str();
}

// Binary 8-bit PGM, min-max normalized.
inline void write_pgm(const std::filesystem::path& path, const Matrix& img) {
  const double lo = img.minCoeff(), hi = img.maxCoeff();
  std::string data = "P5\n" + std::to_string(img.cols()) + " " + std::to_string(img.rows()) + "\n255\n";
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c)
      data += static_cast<char>(static_cast<unsigned char>(std::lround(hi > lo ? 255.0 * (img(r, c) - lo) / (hi - lo) : 128.0)));
  write_text(path, data);
}

}  // namespace branchlab::io
