#pragma once

#include <map>
#include <string>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "model/vlm.hpp"
#include "tokenizer/vocab.hpp"

namespace countlab {

struct Prediction {
  std::string record_id;
  std::string regime;
  int n_target = 0;
  std::string raw_output;  // decoded continuation
  std::string parsed;      // extracted answer ("" when nothing parseable)
  std::string expected;
  bool truncated = false;
  bool correct = false;
};

// First maximal digit run (digits are already rejoined by decoding) or the
// first True/False word; empty string when neither appears.
std::string extract_answer(const std::string& decoded);

// Batched greedy decoding over a manifest. Masks, when given, apply to every
// batch (token masks must then be per-record, matched by index).
std::vector<Prediction> predict_manifest(const Vlm<float>& model, const GenPreset& preset,
                                         const Vocab& vocab, const DatasetManifest& data,
                                         int batch_size, int max_new = 8);

struct RegimeMetrics {
  std::map<int, double> per_n_accuracy;
  std::map<int, long> per_n_count;
  std::map<std::string, double> regime_accuracy;
  std::map<std::string, long> regime_count;
  double overall_accuracy = 0;
  double truncation_rate = 0;
  long total = 0;
};

// Strict string scoring; works for counting (decimal answers) and comparison
// (True/False answers) alike. Truncated generations are wrong by definition
// and tallied in truncation_rate.
RegimeMetrics score_predictions(const std::vector<Prediction>& preds);

struct AttractorHistogram {
  // (predicted value, percent), sorted by percent descending; sub-threshold
  // values merge into a final "Others" bucket. Percents sum to 100.
  std::vector<std::pair<std::string, double>> entries;
  long total = 0;
};

AttractorHistogram error_topology(const std::vector<Prediction>& preds, double min_pct = 0.5);

struct ConfusionHeatmap {
  // cells[n_g][n_p] = fraction of numeric predictions in column n_g.
  std::map<int, std::map<int, double>> cells;
  std::map<int, double> mean_prediction;  // per n_g over numeric predictions
  std::map<int, long> column_counts;      // numeric predictions per n_g
};

ConfusionHeatmap confusion_heatmap(const std::vector<Prediction>& preds);

}  // namespace countlab
