#include "plots/figures.hpp"

#include "plots/svg.hpp"

namespace countlab {
namespace {

Series per_n_series(const std::string& label, const std::map<int, double>& by_n) {
  Series s{label, {}, {}};
  for (const auto& [n, v] : by_n) {
    s.x.push_back(n);
    s.y.push_back(v);
  }
  return s;
}

}  // namespace

void figure_counting_per_n(const std::string& path, const std::vector<Prediction>& text,
                           const std::vector<Prediction>& vision) {
  const RegimeMetrics mt = score_predictions(text);
  const RegimeMetrics mv = score_predictions(vision);
  write_text_file(path, svg_line_chart("Counting exact-match by target count", "N",
                                       "exact match",
                                       {per_n_series("text", mt.per_n_accuracy),
                                        per_n_series("vision", mv.per_n_accuracy)},
                                       {0.0, 1.05, true}));
}

void figure_mean_prediction(const std::string& path, const std::vector<Prediction>& vision) {
  const ConfusionHeatmap conf = confusion_heatmap(vision);
  Series ident{"identity", {}, {}};
  for (const auto& [n, mean] : conf.mean_prediction) {
    ident.x.push_back(n);
    ident.y.push_back(n);
  }
  write_text_file(path, svg_line_chart("Mean numeric prediction by target count", "N",
                                       "mean N_P",
                                       {ident, per_n_series("mean prediction",
                                                            conf.mean_prediction)}));
}

void figure_attractors(const std::string& path, const std::vector<Prediction>& ve) {
  const AttractorHistogram hist = error_topology(ve);
  std::vector<std::string> labels;
  std::vector<double> values;
  for (const auto& [value, pct] : hist.entries) {
    labels.push_back(value);
    values.push_back(pct);
  }
  write_text_file(path, svg_bar_chart("Predicted values on extrapolation boards (%)",
                                      "percent", labels, values));
}

void figure_comparison_per_n(const std::string& path, const std::vector<Prediction>& cmp,
                             const std::vector<Prediction>& vision, int n_cap) {
  const RegimeMetrics mc = score_predictions(cmp);
  const RegimeMetrics mv = score_predictions(vision);
  Series s_cnt{"counting (vision)", {}, {}};
  for (const auto& [n, acc] : mv.per_n_accuracy) {
    if (n > n_cap) continue;
    s_cnt.x.push_back(n);
    s_cnt.y.push_back(acc);
  }
  write_text_file(path, svg_line_chart("Comparison vs counting accuracy by board count", "N",
                                       "exact match",
                                       {per_n_series("comparison (vision-text)",
                                                     mc.per_n_accuracy),
                                        s_cnt},
                                       {0.0, 1.05, true}));
}

void figure_gaps(const std::string& path, const ProbeReport& report) {
  write_text_file(path, svg_line_chart("Vision and language gaps by target count", "N",
                                       "mean absolute gap",
                                       {per_n_series("vision gap", report.vision_gap_by_n),
                                        per_n_series("language gap",
                                                     report.language_gap_by_n)}));
}

void figure_steering(const std::string& path, const SteeringCurve& curve) {
  Series s{"success rate", {}, {}};
  for (int k = 0; k <= curve.k_max; ++k) {
    s.x.push_back(k);
    s.y.push_back(curve.success_by_k[k]);
  }
  write_text_file(path, svg_line_chart("Stone-masking steering success", "masked stones k",
                                       "P(answer = N-k)", {s}, {0.0, 1.05, true}));
}

void figure_head_heatmap(const std::string& path, const Mat<double>& heat) {
  std::vector<std::string> row_labels, col_labels;
  for (int l = 0; l < heat.rows; ++l) row_labels.push_back("layer " + std::to_string(l));
  for (int h = 0; h < heat.cols; ++h) col_labels.push_back("head " + std::to_string(h));
  write_text_file(path, svg_heatmap("Decoder head activation (mean context norm, max-normalized)",
                                    heat, row_labels, col_labels));
}

}  // namespace countlab
