#include "evalsuite/evalsuite.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "model/sequence.hpp"

namespace countlab {

std::string extract_answer(const std::string& decoded) {
  std::istringstream in(decoded);
  std::string w;
  while (in >> w) {
    if (w == "True" || w == "False") return w;
    if (!w.empty() && std::all_of(w.begin(), w.end(),
                                  [](unsigned char c) { return std::isdigit(c); }))
      return w;
  }
  return "";
}

std::vector<Prediction> predict_manifest(const Vlm<float>& model, const GenPreset& preset,
                                         const Vocab& vocab, const DatasetManifest& data,
                                         int batch_size, int max_new) {
  std::vector<Prediction> out;
  out.reserve(data.records.size());
  for (size_t start = 0; start < data.records.size(); start += batch_size) {
    const size_t end = std::min(data.records.size(), start + batch_size);
    std::vector<AssembledSeq> seqs;
    for (size_t i = start; i < end; ++i)
      seqs.push_back(assemble_record(preset, data.records[i], vocab));
    GenResult gen = model.generate_greedy(seqs, preset, vocab, max_new);
    for (size_t i = start; i < end; ++i) {
      const auto& rec = data.records[i];
      Prediction p;
      p.record_id = rec.id;
      p.regime = rec.regime;
      p.n_target = rec.n_target;
      p.raw_output = gen.texts[i - start];
      p.parsed = extract_answer(p.raw_output);
      p.expected = rec.answer;
      p.truncated = gen.truncated[i - start];
      p.correct = !p.truncated && p.parsed == p.expected;
      out.push_back(std::move(p));
    }
  }
  return out;
}

RegimeMetrics score_predictions(const std::vector<Prediction>& preds) {
  RegimeMetrics m;
  std::map<int, long> n_hits;
  std::map<std::string, long> r_hits;
  long truncated = 0;
  for (const auto& p : preds) {
    ++m.per_n_count[p.n_target];
    ++m.regime_count[p.regime];
    if (p.correct) {
      ++n_hits[p.n_target];
      ++r_hits[p.regime];
    }
    if (p.truncated) ++truncated;
  }
  m.total = static_cast<long>(preds.size());
  long correct_total = 0;
  for (const auto& [n, cnt] : m.per_n_count) {
    m.per_n_accuracy[n] = static_cast<double>(n_hits[n]) / static_cast<double>(cnt);
    correct_total += n_hits[n];
  }
  for (const auto& [r, cnt] : m.regime_count)
    m.regime_accuracy[r] = static_cast<double>(r_hits[r]) / static_cast<double>(cnt);
  if (m.total > 0) {
    m.overall_accuracy = static_cast<double>(correct_total) / static_cast<double>(m.total);
    m.truncation_rate = static_cast<double>(truncated) / static_cast<double>(m.total);
  }
  return m;
}

AttractorHistogram error_topology(const std::vector<Prediction>& preds, double min_pct) {
  if (preds.empty()) throw std::runtime_error("error_topology: no predictions");
  AttractorHistogram h;
  h.total = static_cast<long>(preds.size());
  std::map<std::string, long> counts;
  for (const auto& p : preds) counts[p.parsed.empty() ? "(none)" : p.parsed] += 1;
  double others = 0;
  for (const auto& [value, cnt] : counts) {
    const double pct = 100.0 * static_cast<double>(cnt) / static_cast<double>(h.total);
    if (pct < min_pct)
      others += pct;
    else
      h.entries.emplace_back(value, pct);
  }
  std::sort(h.entries.begin(), h.entries.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (others > 0) h.entries.emplace_back("Others", others);
  return h;
}

ConfusionHeatmap confusion_heatmap(const std::vector<Prediction>& preds) {
  ConfusionHeatmap hm;
  std::map<int, std::map<int, long>> counts;
  std::map<int, double> sums;
  for (const auto& p : preds) {
    if (p.parsed.empty() ||
        !std::all_of(p.parsed.begin(), p.parsed.end(),
                     [](unsigned char c) { return std::isdigit(c); }))
      continue;
    if (p.parsed.size() > 6) continue;  // implausible run, treat as unparseable
    const int np = std::stoi(p.parsed);
    ++counts[p.n_target][np];
    sums[p.n_target] += np;
    ++hm.column_counts[p.n_target];
  }
  for (const auto& [ng, col] : counts) {
    const double total = static_cast<double>(hm.column_counts[ng]);
    for (const auto& [np, cnt] : col) hm.cells[ng][np] = static_cast<double>(cnt) / total;
    hm.mean_prediction[ng] = sums[ng] / total;
  }
  return hm;
}

}  // namespace countlab
