#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "evalsuite/evalsuite.hpp"
#include "model/vlm.hpp"
#include "tokenizer/vocab.hpp"

namespace countlab {

struct TokenProbe {
  std::vector<float> weight;  // d
  float bias = 0;
  float threshold = 0.5f;  // on the sigmoid output
  std::string regime_tag = "ID";
  double heldout_accuracy = 0;
};

// Per-token feature/label pairs collected from a trace layer. sample_index
// groups rows back into boards.
struct TokenLabelSet {
  Mat<float> features;
  std::vector<uint8_t> labels;
  std::vector<int> sample_index;
  long positives = 0;
  long samples = 0;
};

// Which activations feed a probe. Encoder entries index
// HiddenTrace::encoder_layers (0 = patch embedding, then block outputs, last =
// final layernorm, the default); decoder entries index decoder_layers,
// restricted to the visual-token rows.
struct ProbeLayer {
  enum class Stack { kEncoder, kDecoder };
  Stack stack = Stack::kEncoder;
  int index = -1;  // -1 = last entry of the chosen stack
};

// Collects one labeled vector per visual token per board: label 1 when that
// cell holds a black stone. Enforces the ID-only firewall (every record must
// fall in the in-distribution regime) and cross-checks each board against the
// pixel oracle before trusting its labels.
TokenLabelSet collect_token_labels(const Vlm<float>& model, const GenPreset& preset,
                                   const Vocab& vocab, const DatasetManifest& data,
                                   int max_samples, int batch_size,
                                   const ProbeLayer& layer = {});

// Regularized logistic regression, full-batch gradient descent: L2 1e-4,
// 1000 steps. Boards with sample_index % 10 == 9 are held out and scored.
TokenProbe train_token_probe(const TokenLabelSet& data, double l2 = 1e-4, int steps = 1000,
                             double lr = 0.5);

// Hard-threshold detection count over one board's visual-token vectors.
int hidden_number(const TokenProbe& probe, const Mat<float>& tokens, int row_begin,
                  int row_count);

struct Gaps {
  double vision_gap = 0;    // |N_H - N_G|
  double language_gap = 0;  // |N_H - N_P|
  bool language_defined = false;
};

Gaps compute_gaps(int n_h, int n_g, int n_p /* -1 = undefined */);

struct ProbeReportEntry {
  std::string record_id;
  std::string regime;
  int n_g = 0;
  int n_h = 0;
  int n_p = -1;  // -1 = unparseable prediction
};

struct ProbeReport {
  std::vector<ProbeReportEntry> entries;
  std::map<int, double> vision_gap_by_n;
  std::map<int, double> language_gap_by_n;
  std::map<std::string, double> vision_gap_by_regime;
  std::map<std::string, double> language_gap_by_regime;
};

// Pairs per-sample hidden numbers with model predictions. preds align with
// data.records by record id; ids without a numeric prediction leave N_P
// undefined and drop out of the language-gap means.
ProbeReport probe_report(const Vlm<float>& model, const TokenProbe& probe,
                         const GenPreset& preset, const Vocab& vocab,
                         const DatasetManifest& data, const std::vector<Prediction>& preds,
                         int batch_size, const ProbeLayer& layer = {});

// Layer-wise quantity probing, two estimators:
//  - token mode: binary per-token probe at the chosen layer; a sample is
//    correct when the thresholded detection count equals N_G. Extrapolates
//    beyond the counts seen in training.
//  - position mode: multiclass softmax regression on the hidden state at the
//    final prompt token; structurally unable to emit classes absent from
//    training, so it serves as the null control.
struct LayerProbeResult {
  std::string mode;
  double train_accuracy = 0;  // sample-level on the training slice
  double eval_accuracy = 0;   // sample-level on the eval slice
  TokenProbe probe;           // token mode only
};

LayerProbeResult train_layer_probe_tokens(const Vlm<float>& model, const GenPreset& preset,
                                          const Vocab& vocab, const DatasetManifest& train_id,
                                          const DatasetManifest& eval_set, int max_samples,
                                          int batch_size, const ProbeLayer& layer);

LayerProbeResult train_layer_probe_position(const Vlm<float>& model, const GenPreset& preset,
                                            const Vocab& vocab, const DatasetManifest& train_id,
                                            const DatasetManifest& eval_set, int max_samples,
                                            int batch_size, int decoder_layer_index);

// Shared feature extraction: visual-token activations at the chosen layer for
// records[lo, hi), shaped ((hi-lo) * visual_len, d).
Mat<float> visual_layer_features(const Vlm<float>& model, const GenPreset& preset,
                                 const Vocab& vocab, const std::vector<ManifestRecord>& records,
                                 int lo, int hi, const ProbeLayer& layer);

// Probe weights are serialized beside the checkpoint they were trained
// against; the parameter checksum binds the two, and loading against other
// weights fails.
uint64_t model_param_checksum(const ParamStore<float>& params);
std::string probe_to_json(const TokenProbe& probe, uint64_t model_checksum);
TokenProbe probe_from_json(const std::string& text, uint64_t expected_model_checksum);

}  // namespace countlab
