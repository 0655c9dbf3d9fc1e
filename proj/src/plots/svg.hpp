#pragma once

#include <string>
#include <vector>

#include "core/mat.hpp"

namespace countlab {

// Minimal chart emitters; every function returns a complete standalone SVG
// document. Layout is fixed-size with margins chosen for the laboratory's
// figure set, not a general plotting system.

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct ChartSpan {
  double lo = 0;
  double hi = 1;
  bool fixed = false;  // when false the emitter fits the data
};

std::string svg_line_chart(const std::string& title, const std::string& x_label,
                           const std::string& y_label, const std::vector<Series>& series,
                           ChartSpan y_span = {});

std::string svg_bar_chart(const std::string& title, const std::string& y_label,
                          const std::vector<std::string>& labels,
                          const std::vector<double>& values);

// values may be any non-negative matrix; cells are shaded on a white-to-blue
// ramp scaled by the matrix maximum and annotated with their value.
std::string svg_heatmap(const std::string& title, const Mat<double>& values,
                        const std::vector<std::string>& row_labels,
                        const std::vector<std::string>& col_labels);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace countlab
