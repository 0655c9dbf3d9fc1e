#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "model/checkpoint.hpp"
#include "model/vlm.hpp"
#include "tokenizer/vocab.hpp"

namespace countlab {

struct TrainConfig {
  std::string phase;  // text_pretrain | vision_align | compare_text | compare_vision
  int epochs = 20;
  int batch_size = 2048;
  double lr_main = 1e-3;
  double lr_decoder_phase2 = 1e-5;
  uint64_t seed = 0;
  std::string preset = "paper";
  int n_max = 0;  // regime firewall: highest N_G a training batch may contain

  // Alignment phases freeze the decoder down to the reduced learning rate.
  bool split_lr() const { return phase == "vision_align" || phase == "compare_vision"; }
};

// Adam with per-parameter-group learning rates, constant schedule, no decay.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParamStore<float>& params,
            const std::vector<std::pair<std::string, const Mat<float>*>>& grads,
            const std::function<double(const std::string&)>& lr_of);

 private:
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::unordered_map<std::string, Mat<float>> m_, v_;
};

struct EpochEval {
  std::string metric;
  std::function<double(const Vlm<float>&)> fn;
};

struct PhaseResult {
  double final_loss = 0;
  std::string metrics_path;
  std::string checkpoint_path;
};

// Throws when the per-N positive/negative label split departs from 1:1 by
// more than 1%.
void check_comparison_balance(const DatasetManifest& data);

// One training phase: epoch-shuffled batches, firewall scan per batch,
// Adam updates with the phase's learning-rate groups, one metrics JSONL line
// per step plus per-epoch aggregates, and a final checkpoint (atomic write).
PhaseResult run_training_phase(Vlm<float>& model, const GenPreset& preset, const Vocab& vocab,
                               const DatasetManifest& data, const TrainConfig& cfg,
                               const std::string& run_dir,
                               const std::vector<EpochEval>& epoch_evals = {});

// Wiring check: a fresh model takes `steps` Adam updates on one fixed batch;
// returns the final loss (expected to collapse well under 0.05).
double overfit_fixed_batch(const GenPreset& preset, const Vocab& vocab,
                           const std::vector<ManifestRecord>& records, int steps, uint64_t seed);

}  // namespace countlab
