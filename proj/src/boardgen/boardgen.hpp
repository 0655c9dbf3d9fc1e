#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "core/image.hpp"
#include "core/rng.hpp"

namespace countlab {

struct BoardSpec {
  int grid_size = 19;
  int stone_px = 14;
  int target_count = 0;      // black stones
  int distractor_count = 0;  // white stones
  uint64_t seed = 0;
};

struct BoardSample {
  Image image;
  std::vector<std::pair<int, int>> black_cells;  // (row, col)
  std::vector<std::pair<int, int>> white_cells;
  int n_target = 0;
  std::string prompt;
  std::string answer;
};

struct TextSample {
  std::string letters;  // one char per position, alphabet {a,b,c}
  char target_letter = 'c';
  int n_target = 0;
  std::string prompt;
  std::string answer;
  // Bracketed, space-separated rendering fed to the tokenizer:
  // "[ a a b c ... ]".
  std::string input_text() const;
};

struct ComparisonSample {
  enum class Kind { kTextText, kVisionText };
  Kind kind = Kind::kTextText;
  std::optional<BoardSample> lhs_board;  // set for kVisionText
  std::optional<TextSample> lhs_text;    // set for kTextText
  TextSample rhs;
  int n_lhs = 0;
  int n_rhs = 0;
  bool label = false;  // n_lhs == n_rhs
  std::string prompt;
  std::string answer;  // "True" / "False"
};

// Prompt strings shared by generation and evaluation.
std::string counting_text_prompt(char target_letter);
std::string counting_vision_prompt();
std::string compare_text_prompt(char target_letter);
std::string compare_vision_prompt(char target_letter);

BoardSample gen_board(const BoardSpec& spec);

// Uniform over [max(0, n_target - delta), min(cells - n_target, n_target + delta)].
int sample_distractor_count(int n_target, int delta, int cells, Rng& rng);

TextSample gen_text(int n_target, int length, char target_letter, Rng& rng);

// Draws the partner count for a comparison pair: equal when want_equal, else
// |n_rhs - n_lhs| uniform over the feasible deltas in [1, neg_delta_max]
// clamped to [0, n_max].
int sample_comparison_count(int n_lhs, bool want_equal, int neg_delta_max, int n_max, Rng& rng);

ComparisonSample gen_comparison_text(int n_lhs, int n_rhs, int length, char target_letter,
                                     Rng& rng);
ComparisonSample gen_comparison_vision(const BoardSpec& board_spec, int n_rhs, int text_length,
                                       char target_letter, Rng& rng);

// Counts dark connected pixel clusters; independent of the renderer's cell
// bookkeeping so it can arbitrate ground truth.
int pixel_cluster_count(const Image& img, int intensity_below = 64, int min_area = 10);

// Scale preset shared across modules. Regimes partition [0, fe_max]:
// ID = [0, vis_max], VE = (vis_max, text_max], FE = (text_max, fe_max].
struct GenPreset {
  std::string name = "paper";
  int grid_size = 19;
  int stone_px = 14;
  int text_len = 361;
  int vis_max = 49;
  int text_max = 99;
  int fe_max = 120;
  int distractor_delta = 30;
  int neg_delta_max = 10;
  char target_letter = 'c';
  int train_per_class = 8192;
  int eval_per_class = 64;
  int batch_size = 2048;

  int cells() const { return grid_size * grid_size; }
  int image_edge() const { return grid_size * stone_px; }
  std::string regime_of(int n) const;
  static GenPreset paper();
  static GenPreset desk();
};

struct DatasetRequest {
  std::string name;  // manifest stem and image subdirectory
  std::string kind;  // counting_text | counting_vision | compare_text | compare_vision
  int n_lo = 0;
  int n_hi = 0;
  int per_class = 1;
  uint64_t seed = 0;
};

struct ManifestRecord {
  std::string id;
  std::string kind;
  std::string regime;
  int n_target = 0;
  int n_distractor = -1;  // -1 when no board
  int n_rhs = -1;         // comparison partner count
  std::string prompt;
  std::string answer;
  std::string input_text;      // letter sequence (lhs for compare_text)
  std::string rhs_input_text;  // rhs letter sequence for comparison kinds
  std::string image_path;      // relative to the manifest directory
  std::vector<std::pair<int, int>> black_cells;
  uint64_t seed = 0;
  uint64_t checksum = 0;
};

struct DatasetManifest {
  std::string name;
  std::string kind;
  std::string preset_name;
  int n_lo = 0;
  int n_hi = 0;
  int per_class = 0;
  uint64_t seed = 0;
  std::vector<ManifestRecord> records;
};

// Builds every record deterministically from (request.seed, record index),
// writes PNGs for board-bearing kinds plus a JSONL manifest, and returns the
// manifest. Records are pure functions of their seed: rebuilds are identical.
DatasetManifest build_dataset(const GenPreset& preset, const DatasetRequest& request,
                              const std::string& out_dir);

// Regenerates the sample backing a record (used by training/eval loaders).
BoardSample record_board(const GenPreset& preset, const ManifestRecord& rec);

DatasetManifest load_manifest(const std::string& path);
std::string manifest_path(const std::string& out_dir, const std::string& name);

uint64_t record_checksum(const ManifestRecord& rec, const Image* img);

}  // namespace countlab
