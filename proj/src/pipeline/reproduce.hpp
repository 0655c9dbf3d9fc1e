#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace countlab {

// One deterministic end-to-end laboratory run: datasets, two training
// lineages (counting and comparison), evaluation suite, probes,
// interventions, figures, tables, and a machine-readable report. Everything
// under run_dir is a pure function of (preset, seed, epoch settings).
struct ReproduceOptions {
  std::string run_dir;
  std::string preset = "desk";
  uint64_t seed = 42;
  // Per-phase epoch overrides; values <= 0 use the tuned defaults.
  int epochs_text = 0;
  int epochs_vision = 0;
  int epochs_compare_text = 0;
  int epochs_compare_vision = 0;
  int batch_size = 0;   // 0 = preset batch size
  int eval_batch = 128; // greedy-decoding batch
  int audit_boards = 1000;
  // Reuse checkpoints already present in run_dir instead of retraining
  // (datasets, evaluations and analyses still rerun).
  bool reuse_checkpoints = false;
};

struct CriterionResult {
  int id = 0;
  std::string name;
  bool pass = false;
  std::string details;
};

struct ReproduceReport {
  std::string run_dir;
  std::vector<CriterionResult> criteria;
  double minutes = 0;

  bool all_pass() const {
    for (const auto& c : criteria)
      if (!c.pass) return false;
    return !criteria.empty();
  }
};

ReproduceReport run_reproduce(const ReproduceOptions& opts);

}  // namespace countlab
