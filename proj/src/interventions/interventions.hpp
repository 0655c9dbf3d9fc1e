#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "core/mat.hpp"
#include "model/vlm.hpp"
#include "probelab/probelab.hpp"
#include "tokenizer/vocab.hpp"

namespace countlab {

// One stone-masking intervention: k probe-identified black-stone tokens are
// hidden from the decoder's attention and the prediction is re-read.
struct InterventionResult {
  std::string record_id;
  int k = 0;
  int n_g = 0;
  std::string n_p_base;  // parsed baseline prediction
  std::string n_p_post;  // parsed post-mask prediction
  bool success = false;  // n_p_post == str(n_g - k)
};

struct SteeringCurve {
  int k_max = 0;
  std::vector<double> success_by_k;  // index k over the shared eligible set
  std::vector<long> counts;
  std::vector<InterventionResult> results;
  long eligible = 0;
  long skipped = 0;  // baseline-incorrect or too few probe-positive tokens
};

// Scores masking levels k = 0..k_max over one eligible example set:
// in-distribution boards with a correct baseline prediction, N_G >= k_max and
// at least k_max probe-positive tokens. Stones are drawn uniformly without
// replacement from the probe positives via (seed, example, k).
SteeringCurve steering_curve(const Vlm<float>& model, const TokenProbe& probe,
                             const GenPreset& preset, const Vocab& vocab,
                             const DatasetManifest& data, int k_max, int max_examples,
                             int batch_size, uint64_t seed);

// Greedy per-example head ablation in (layer asc, head asc) order: a head
// stays masked only while this example's generated answer is unchanged. The
// retained complement is the example's critical head set.
struct CriticalHeadSet {
  std::string record_id;
  std::string task;  // "visual" | "textual"
  std::vector<std::pair<int, int>> retained;
  std::vector<std::pair<int, int>> masked;
  std::string baseline;  // exact generated string being preserved
};

struct CriticalSetBatch {
  std::vector<CriticalHeadSet> sets;
  long examples_seen = 0;
  long skipped = 0;            // baseline-incorrect, logged by the caller
  double definition_check = 0;  // fraction of sets whose complement mask
                                // leaves the prediction unchanged (re-run)
};

// Examples sharing a masked-set state are batched together, so the cost is
// (#heads x #distinct states) forward sweeps rather than per-example loops.
CriticalSetBatch per_example_critical_sets(const Vlm<float>& model, const GenPreset& preset,
                                           const Vocab& vocab, const DatasetManifest& data,
                                           const std::string& task_tag, int max_examples,
                                           int batch_size);

struct Overlap {
  bool equal = false;
  double jaccard = 0;  // two empty sets count as identical (1.0)
};

Overlap circuit_overlap(std::vector<std::pair<int, int>> a, std::vector<std::pair<int, int>> b);

// Index-paired same-set / different-set tally between two tasks' per-example
// critical sets.
struct OverlapStats {
  long pairs = 0;
  long same = 0;
  double same_pct = 0;
  double different_pct = 0;
  double mean_jaccard = 0;
};

OverlapStats tally_overlap(const std::vector<CriticalHeadSet>& a,
                           const std::vector<CriticalHeadSet>& b);

// Mean per-token context norm for each decoder (layer, head), max-normalized
// to [0, 1] (all zeros when every head is silent). Optional head masks apply
// during the forward passes.
Mat<double> head_activation_heatmap(const Vlm<float>& model, const GenPreset& preset,
                                    const Vocab& vocab, const DatasetManifest& data,
                                    int max_examples, int batch_size,
                                    const std::vector<std::pair<int, int>>& head_masks = {});

}  // namespace countlab
