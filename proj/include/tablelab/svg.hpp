#pragma once

// Minimal SVG writer: heatmaps, line plots and scatter plots.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tablelab::svg {

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string fmt(double v, int prec = 3) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// Blue (negative) - white - red (positive), symmetric around zero.
inline std::string diverging(double v, double vmax) {
  const double t = vmax > 0 ? std::clamp(v / vmax, -1.0, 1.0) : 0.0;
  int r = 255, g = 255, b = 255;
  if (t > 0) {
    g = b = static_cast<int>(std::lround(255 * (1 - t)));
  } else {
    r = g = static_cast<int>(std::lround(255 * (1 + t)));
  }
  char buf[16];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

inline std::string heatmap(const Eigen::MatrixXd& m, const std::vector<std::string>& row_labels,
                           const std::vector<std::string>& col_labels, const std::string& title,
                           const std::string& row_axis = "", const std::string& col_axis = "") {
  const int cell = 28, left = 70, top = 50;
  const int w = left + static_cast<int>(m.cols()) * cell + 90, h = top + static_cast<int>(m.rows()) * cell + 50;
  double vmax = 0.0;
  for (Eigen::Index i = 0; i < m.size(); ++i)
    if (std::isfinite(m.data()[i])) vmax = std::max(vmax, std::abs(m.data()[i]));
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
     << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  os << "<text x=\"" << left << "\" y=\"20\" font-size=\"13\">" << escape(title) << "</text>\n";
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      const int x = left + static_cast<int>(c) * cell, y = top + static_cast<int>(r) * cell;
      os << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell << "\" fill=\""
         << diverging(m(r, c), vmax) << "\" stroke=\"#ccc\"><title>" << fmt(m(r, c)) << "</title></rect>\n";
      os << "<text x=\"" << x + cell / 2 << "\" y=\"" << y + cell / 2 + 3 << "\" text-anchor=\"middle\" font-size=\"7\">"
         << fmt(m(r, c), 2) << "</text>\n";
    }
  for (std::size_t r = 0; r < row_labels.size(); ++r)
    os << "<text x=\"" << left - 4 << "\" y=\"" << top + static_cast<int>(r) * cell + cell / 2 + 3
       << "\" text-anchor=\"end\">" << escape(row_labels[r]) << "</text>\n";
  for (std::size_t c = 0; c < col_labels.size(); ++c)
    os << "<text x=\"" << left + static_cast<int>(c) * cell + cell / 2 << "\" y=\"" << top - 4
       << "\" text-anchor=\"middle\">" << escape(col_labels[c]) << "</text>\n";
  if (!row_axis.empty())
    os << "<text x=\"12\" y=\"" << top + static_cast<int>(m.rows()) * cell / 2 << "\" transform=\"rotate(-90 12 "
       << top + static_cast<int>(m.rows()) * cell / 2 << ")\" text-anchor=\"middle\">" << escape(row_axis) << "</text>\n";
  if (!col_axis.empty())
    os << "<text x=\"" << left + static_cast<int>(m.cols()) * cell / 2 << "\" y=\"" << h - 15
       << "\" text-anchor=\"middle\">" << escape(col_axis) << "</text>\n";
  const int lx = left + static_cast<int>(m.cols()) * cell + 20;
  for (int i = 0; i <= 10; ++i) {
    const double v = vmax * (1.0 - i / 5.0);
    os << "<rect x=\"" << lx << "\" y=\"" << top + i * 10 << "\" width=\"12\" height=\"10\" fill=\"" << diverging(v, vmax)
       << "\"/>\n";
  }
  os << "<text x=\"" << lx + 16 << "\" y=\"" << top + 8 << "\">" << fmt(vmax, 2) << "</text>\n";
  os << "<text x=\"" << lx + 16 << "\" y=\"" << top + 108 << "\">" << fmt(-vmax, 2) << "</text>\n";
  os << "</svg>\n";
  return os.str();
}

struct Series {
  std::string name;
  std::vector<double> x, y;
  std::string color = "#1f77b4";
  std::string marker = "dot";  // dot | star | none
};

namespace detail {

struct Frame {
  double x0, x1, y0, y1;
  int left = 60, top = 40, width = 420, height = 260;
  double px(double x) const { return left + (x1 > x0 ? (x - x0) / (x1 - x0) : 0.5) * width; }
  double py(double y) const { return top + height - (y1 > y0 ? (y - y0) / (y1 - y0) : 0.5) * height; }
};

inline Frame frame_for(const std::vector<Series>& series) {
  Frame f{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity()};
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      f.x0 = std::min(f.x0, s.x[i]);
      f.x1 = std::max(f.x1, s.x[i]);
      f.y0 = std::min(f.y0, s.y[i]);
      f.y1 = std::max(f.y1, s.y[i]);
    }
  if (!std::isfinite(f.x0)) f.x0 = 0, f.x1 = 1, f.y0 = 0, f.y1 = 1;
  const double pad = (f.y1 - f.y0) * 0.05 + 1e-9;
  f.y0 -= pad;
  f.y1 += pad;
  return f;
}

inline void axes(std::ostringstream& os, const Frame& f, const std::string& title, const std::string& xl,
                 const std::string& yl) {
  os << "<text x=\"" << f.left << "\" y=\"20\" font-size=\"13\">" << escape(title) << "</text>\n";
  os << "<rect x=\"" << f.left << "\" y=\"" << f.top << "\" width=\"" << f.width << "\" height=\"" << f.height
     << "\" fill=\"none\" stroke=\"#333\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4, yv = f.y0 + (f.y1 - f.y0) * i / 4;
    os << "<text x=\"" << f.px(xv) << "\" y=\"" << f.top + f.height + 14 << "\" text-anchor=\"middle\">" << fmt(xv, 2)
       << "</text>\n";
    os << "<text x=\"" << f.left - 4 << "\" y=\"" << f.py(yv) + 3 << "\" text-anchor=\"end\">" << fmt(yv, 2) << "</text>\n";
  }
  os << "<text x=\"" << f.left + f.width / 2 << "\" y=\"" << f.top + f.height + 32 << "\" text-anchor=\"middle\">"
     << escape(xl) << "</text>\n";
  os << "<text x=\"14\" y=\"" << f.top + f.height / 2 << "\" transform=\"rotate(-90 14 " << f.top + f.height / 2
     << ")\" text-anchor=\"middle\">" << escape(yl) << "</text>\n";
}

inline void marker(std::ostringstream& os, const std::string& kind, double x, double y, const std::string& color) {
  if (kind == "star") {
    os << "<polygon points=\"";
    for (int i = 0; i < 10; ++i) {
      const double r = i % 2 ? 3.0 : 7.0, a = -M_PI / 2 + i * M_PI / 5;
      os << fmt(x + r * std::cos(a), 2) << ',' << fmt(y + r * std::sin(a), 2) << ' ';
    }
    os << "\" fill=\"" << color << "\"/>\n";
  } else if (kind == "dot") {
    os << "<circle cx=\"" << fmt(x, 2) << "\" cy=\"" << fmt(y, 2) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
  }
}

inline void legend(std::ostringstream& os, const Frame& f, const std::vector<Series>& series) {
  int y = f.top + 10;
  for (const auto& s : series) {
    marker(os, s.marker == "none" ? "dot" : s.marker, f.left + f.width + 16, y - 3, s.color);
    os << "<text x=\"" << f.left + f.width + 26 << "\" y=\"" << y << "\">" << escape(s.name) << "</text>\n";
    y += 16;
  }
}

}  // namespace detail

inline std::string line_plot(const std::vector<Series>& series, const std::string& title, const std::string& xl,
                             const std::string& yl) {
  const auto f = detail::frame_for(series);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.left + f.width + 150 << "\" height=\""
     << f.top + f.height + 45 << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  detail::axes(os, f, title, xl, yl);
  for (const auto& s : series) {
    os << "<polyline fill=\"none\" stroke=\"" << s.color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) os << fmt(f.px(s.x[i]), 2) << ',' << fmt(f.py(s.y[i]), 2) << ' ';
    os << "\"/>\n";
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) detail::marker(os, s.marker, f.px(s.x[i]), f.py(s.y[i]), s.color);
  }
  detail::legend(os, f, series);
  os << "</svg>\n";
  return os.str();
}

inline std::string scatter_plot(const std::vector<Series>& series, const std::string& title, const std::string& xl,
                                const std::string& yl) {
  const auto f = detail::frame_for(series);
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.left + f.width + 150 << "\" height=\""
     << f.top + f.height + 45 << "\" font-family=\"sans-serif\" font-size=\"10\">\n";
  detail::axes(os, f, title, xl, yl);
  for (const auto& s : series)
    for (std::size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.y[i])) detail::marker(os, s.marker, f.px(s.x[i]), f.py(s.y[i]), s.color);
  detail::legend(os, f, series);
  os << "</svg>\n";
  return os.str();
}

}  // namespace tablelab::svg
