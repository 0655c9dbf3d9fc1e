#pragma once

#include <string>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "core/graph.hpp"
#include "core/mat.hpp"
#include "model/config.hpp"
#include "tokenizer/vocab.hpp"

namespace countlab {

// One tokenized example. Visual rows, when present, occupy sequence positions
// [1, 1 + visual_len) right after BOS and hold <img> placeholder ids whose
// embeddings get replaced by projected patch tokens.
struct AssembledSeq {
  std::vector<int> tokens;         // BOS ... answer EOS
  int prompt_len = 0;              // tokens[0, prompt_len) is the generation prefix
  int visual_len = 0;              // grid cells when an image is attached
  Mat<float> patches;              // (visual_len x patch_dim) or empty
  int n_target = 0;
  std::string regime;
  std::string answer;
  std::string record_id;
};

// Flattened padded batch ready for the model. Token/position vectors are
// batch * seq_len long; target -1 means unscored.
struct SeqBatch {
  int batch = 0;
  int seq_len = 0;
  int visual_len = 0;  // identical across the batch (0 = text only)
  int grid_size = 0;
  std::vector<int> tokens;
  std::vector<int> targets;
  std::vector<Pos3> positions;
  std::vector<int> visual_rows;  // flat indices of placeholder rows
  Mat<float> patches;            // (batch * visual_len) x patch_dim
  std::vector<Pos3> patch_positions;
};

// Every template line the tokenizer must cover; building the vocabulary from
// these lines (plus the always-present digits) freezes it before training.
std::vector<std::string> vocab_corpus(const GenPreset& preset);

// Flattens an image into per-patch rows scaled to [-1, 1].
Mat<float> image_patches(const Image& img, int patch_px);

// Decoder position triples: BOS at the origin, visual tokens sharing t=1 with
// grid (h, w), then text advancing all three components together starting
// after the largest coordinate seen.
std::vector<Pos3> decoder_positions(int total_len, int visual_len, int grid_size);

// Encoder position triples for one image: t=0, (h, w) = grid coordinates.
std::vector<Pos3> encoder_positions(int visual_len, int grid_size);

AssembledSeq assemble_record(const GenPreset& preset, const ManifestRecord& rec,
                             const Vocab& vocab);

// Pads sequences (all sharing one visual_len) into a batch. with_answers=false
// truncates each sequence to its prompt for generation.
SeqBatch make_batch(const std::vector<AssembledSeq>& seqs, const GenPreset& preset,
                    bool with_answers);

// Model geometry implied by a preset: patch edge from the stone size, vocab
// size from the frozen tokenizer, and max_seq_len covering the longest
// assembled sequence plus greedy-generation headroom.
ModelConfig model_config_for(const GenPreset& preset, const Vocab& vocab);

}  // namespace countlab
