#include "plots/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace countlab {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 420;
constexpr int kLeft = 64;
constexpr int kRight = 24;
constexpr int kTop = 44;
constexpr int kBottom = 52;

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

// Tick step of the form {1,2,5} x 10^k giving 4-8 ticks over the span.
double nice_step(double span) {
  if (span <= 0) return 1;
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0})
    if (raw <= m * mag) return m * mag;
  return 10 * mag;
}

struct Frame {
  double x_lo, x_hi, y_lo, y_hi;
  double px(double x) const {
    return kLeft + (x - x_lo) / (x_hi - x_lo) * (kWidth - kLeft - kRight);
  }
  double py(double y) const {
    return kHeight - kBottom - (y - y_lo) / (y_hi - y_lo) * (kHeight - kTop - kBottom);
  }
};

void open_svg(std::ostringstream& s, const std::string& title) {
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
    << kHeight << "\" viewBox=\"0 0 " << kWidth << ' ' << kHeight << "\">\n"
    << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    << "<text x=\"" << kWidth / 2 << "\" y=\"24\" text-anchor=\"middle\" "
    << "font-family=\"sans-serif\" font-size=\"15\" font-weight=\"bold\">" << escape(title)
    << "</text>\n";
}

void axes(std::ostringstream& s, const Frame& f, const std::string& x_label,
          const std::string& y_label) {
  s << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\""
    << kWidth - kRight << "\" y2=\"" << kHeight - kBottom << "\" stroke=\"black\"/>\n"
    << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
    << kHeight - kBottom << "\" stroke=\"black\"/>\n";
  const double xs = nice_step(f.x_hi - f.x_lo);
  for (double t = std::ceil(f.x_lo / xs) * xs; t <= f.x_hi + 1e-9; t += xs) {
    const double px = f.px(t);
    s << "<line x1=\"" << px << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << px
      << "\" y2=\"" << kHeight - kBottom + 4 << "\" stroke=\"black\"/>\n"
      << "<text x=\"" << px << "\" y=\"" << kHeight - kBottom + 18
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(t)
      << "</text>\n";
  }
  const double ys = nice_step(f.y_hi - f.y_lo);
  for (double t = std::ceil(f.y_lo / ys) * ys; t <= f.y_hi + 1e-9; t += ys) {
    const double py = f.py(t);
    s << "<line x1=\"" << kLeft - 4 << "\" y1=\"" << py << "\" x2=\"" << kLeft << "\" y2=\""
      << py << "\" stroke=\"black\"/>\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << py << "\" x2=\"" << kWidth - kRight
      << "\" y2=\"" << py << "\" stroke=\"#dddddd\"/>\n"
      << "<text x=\"" << kLeft - 8 << "\" y=\"" << py + 4
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << fmt(t)
      << "</text>\n";
  }
  s << "<text x=\"" << (kLeft + kWidth - kRight) / 2 << "\" y=\"" << kHeight - 12
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
    << escape(x_label) << "</text>\n"
    << "<text x=\"16\" y=\"" << (kTop + kHeight - kBottom) / 2
    << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\""
    << "rotate(-90 16 " << (kTop + kHeight - kBottom) / 2 << ")\">" << escape(y_label)
    << "</text>\n";
}

}  // namespace

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           ChartSpan y_span) {
  Frame f{0, 1, 0, 1};
  bool any = false;
  for (const Series& sr : series)
    for (size_t i = 0; i < sr.x.size(); ++i) {
      if (!any) {
        f = {sr.x[i], sr.x[i], sr.y[i], sr.y[i]};
        any = true;
      }
      f.x_lo = std::min(f.x_lo, sr.x[i]);
      f.x_hi = std::max(f.x_hi, sr.x[i]);
      f.y_lo = std::min(f.y_lo, sr.y[i]);
      f.y_hi = std::max(f.y_hi, sr.y[i]);
    }
  if (!any) throw std::runtime_error("plot: line chart without points");
  if (y_span.fixed) {
    f.y_lo = y_span.lo;
    f.y_hi = y_span.hi;
  }
  if (f.x_hi <= f.x_lo) f.x_hi = f.x_lo + 1;
  if (f.y_hi <= f.y_lo) f.y_hi = f.y_lo + 1;

  std::ostringstream s;
  open_svg(s, title);
  axes(s, f, x_label, y_label);
  for (size_t k = 0; k < series.size(); ++k) {
    const Series& sr = series[k];
    const char* color = kPalette[k % (sizeof(kPalette) / sizeof(kPalette[0]))];
    s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (size_t i = 0; i < sr.x.size(); ++i)
      s << f.px(sr.x[i]) << ',' << f.py(sr.y[i]) << ' ';
    s << "\"/>\n";
    for (size_t i = 0; i < sr.x.size(); ++i)
      s << "<circle cx=\"" << f.px(sr.x[i]) << "\" cy=\"" << f.py(sr.y[i])
        << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    s << "<rect x=\"" << kLeft + 10 << "\" y=\"" << kTop + 6 + 16 * k
      << "\" width=\"12\" height=\"4\" fill=\"" << color << "\"/>\n"
      << "<text x=\"" << kLeft + 28 << "\" y=\"" << kTop + 12 + 16 * k
      << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(sr.label) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string svg_bar_chart(const std::string& title, const std::string& y_label,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values) {
  if (labels.size() != values.size() || labels.empty())
    throw std::runtime_error("plot: bar chart requires matched non-empty labels/values");
  Frame f{0, static_cast<double>(labels.size()), 0, 0};
  for (double v : values) f.y_hi = std::max(f.y_hi, v);
  if (f.y_hi <= 0) f.y_hi = 1;
  f.y_hi *= 1.1;

  std::ostringstream s;
  open_svg(s, title);
  axes(s, f, "", y_label);
  const double slot = (kWidth - kLeft - kRight) / static_cast<double>(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) {
    const double x = kLeft + slot * i + slot * 0.15;
    const double w = slot * 0.7;
    const double y = f.py(values[i]);
    s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << w << "\" height=\""
      << (kHeight - kBottom - y) << "\" fill=\"#1f77b4\"/>\n"
      << "<text x=\"" << x + w / 2 << "\" y=\"" << y - 4
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
      << fmt(values[i]) << "</text>\n"
      << "<text x=\"" << x + w / 2 << "\" y=\"" << kHeight - kBottom + 16
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">"
      << escape(labels[i]) << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string svg_heatmap(const std::string& title, const Mat<double>& values,
                        const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels) {
  if (values.rows <= 0 || values.cols <= 0) throw std::runtime_error("plot: empty heatmap");
  if (static_cast<int>(row_labels.size()) != values.rows ||
      static_cast<int>(col_labels.size()) != values.cols)
    throw std::runtime_error("plot: heatmap labels do not match the grid");
  double peak = 0;
  for (double v : values.data) peak = std::max(peak, v);
  if (peak <= 0) peak = 1;

  std::ostringstream s;
  open_svg(s, title);
  const double cw = (kWidth - kLeft - kRight) / static_cast<double>(values.cols);
  const double ch = (kHeight - kTop - kBottom) / static_cast<double>(values.rows);
  for (int r = 0; r < values.rows; ++r)
    for (int c = 0; c < values.cols; ++c) {
      const double t = values.row(r)[c] / peak;
      const int red = static_cast<int>(247 - t * (247 - 8));
      const int green = static_cast<int>(251 - t * (251 - 48));
      const int blue = static_cast<int>(255 - t * (255 - 107));
      const double x = kLeft + c * cw;
      const double y = kTop + r * ch;
      char color[8];
      std::snprintf(color, sizeof(color), "#%02x%02x%02x", red, green, blue);
      s << "<rect x=\"" << x << "\" y=\"" << y << "\" width=\"" << cw << "\" height=\"" << ch
        << "\" fill=\"" << color << "\" stroke=\"#999999\"/>\n"
        << "<text x=\"" << x + cw / 2 << "\" y=\"" << y + ch / 2 + 4
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" fill=\""
        << (t > 0.6 ? "white" : "black") << "\">" << fmt(values.row(r)[c]) << "</text>\n";
    }
  for (int r = 0; r < values.rows; ++r)
    s << "<text x=\"" << kLeft - 8 << "\" y=\"" << kTop + r * ch + ch / 2 + 4
      << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">"
      << escape(row_labels[r]) << "</text>\n";
  for (int c = 0; c < values.cols; ++c)
    s << "<text x=\"" << kLeft + c * cw + cw / 2 << "\" y=\"" << kHeight - kBottom + 18
      << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">"
      << escape(col_labels[c]) << "</text>\n";
  s << "</svg>\n";
  return s.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("plot: cannot open " + path);
  out << content;
  if (!out) throw std::runtime_error("plot: write failed for " + path);
}

}  // namespace countlab
