#include "model/sequence.hpp"

#include <algorithm>
#include <stdexcept>

namespace countlab {

std::vector<std::string> vocab_corpus(const GenPreset& preset) {
  const char c = preset.target_letter;
  return {
      counting_text_prompt(c),
      counting_vision_prompt(),
      compare_text_prompt(c),
      compare_vision_prompt(c),
      "[ a b c ]",
      "True False",
      "0 1 2 3 4 5 6 7 8 9",
  };
}

Mat<float> image_patches(const Image& img, int patch_px) {
  if (img.height % patch_px != 0 || img.width % patch_px != 0)
    throw std::runtime_error("image_patches: image edge not divisible by patch size");
  const int rows = img.height / patch_px;
  const int cols = img.width / patch_px;
  Mat<float> out(rows * cols, patch_px * patch_px * 3);
  for (int pr = 0; pr < rows; ++pr) {
    for (int pc = 0; pc < cols; ++pc) {
      float* dst = out.row(pr * cols + pc);
      int k = 0;
      for (int y = pr * patch_px; y < (pr + 1) * patch_px; ++y) {
        for (int x = pc * patch_px; x < (pc + 1) * patch_px; ++x) {
          const uint8_t* p = img.at(y, x);
          for (int ch = 0; ch < 3; ++ch)
            dst[k++] = (static_cast<float>(p[ch]) / 255.0f - 0.5f) * 2.0f;
        }
      }
    }
  }
  return out;
}

std::vector<Pos3> encoder_positions(int visual_len, int grid_size) {
  std::vector<Pos3> pos(visual_len);
  for (int i = 0; i < visual_len; ++i) pos[i] = {0, i / grid_size, i % grid_size};
  return pos;
}

std::vector<Pos3> decoder_positions(int total_len, int visual_len, int grid_size) {
  std::vector<Pos3> pos(total_len);
  if (visual_len == 0) {
    for (int i = 0; i < total_len; ++i) pos[i] = {i, i, i};
    return pos;
  }
  if (total_len < 1 + visual_len)
    throw std::runtime_error("decoder_positions: sequence shorter than visual prefix");
  pos[0] = {0, 0, 0};
  int max_seen = 1;
  for (int i = 0; i < visual_len; ++i) {
    const int h = i / grid_size, w = i % grid_size;
    pos[1 + i] = {1, h, w};
    max_seen = std::max({max_seen, h, w});
  }
  const int start = max_seen + 1;
  for (int i = 1 + visual_len; i < total_len; ++i) {
    const int p = start + (i - 1 - visual_len);
    pos[i] = {p, p, p};
  }
  return pos;
}

namespace {

void append_encoded(std::vector<int>& ids, const Vocab& vocab, const std::string& text) {
  for (int id : vocab.encode(text)) ids.push_back(id);
}

}  // namespace

AssembledSeq assemble_record(const GenPreset& preset, const ManifestRecord& rec,
                             const Vocab& vocab) {
  AssembledSeq s;
  s.n_target = rec.n_target;
  s.regime = rec.regime;
  s.answer = rec.answer;
  s.record_id = rec.id;
  s.tokens.push_back(Vocab::kBos);

  const bool has_board = !rec.image_path.empty();
  if (has_board) {
    s.visual_len = preset.cells();
    BoardSample board = record_board(preset, rec);
    s.patches = image_patches(board.image, preset.stone_px);
    for (int i = 0; i < s.visual_len; ++i) s.tokens.push_back(Vocab::kImg);
    s.tokens.push_back(Vocab::kImg);  // separator marking end of the prefix
  }
  if (!rec.input_text.empty()) append_encoded(s.tokens, vocab, rec.input_text);
  if (!rec.rhs_input_text.empty()) append_encoded(s.tokens, vocab, rec.rhs_input_text);
  append_encoded(s.tokens, vocab, rec.prompt);
  s.prompt_len = static_cast<int>(s.tokens.size());
  append_encoded(s.tokens, vocab, rec.answer);
  s.tokens.push_back(Vocab::kEos);
  return s;
}

SeqBatch make_batch(const std::vector<AssembledSeq>& seqs, const GenPreset& preset,
                    bool with_answers) {
  if (seqs.empty()) throw std::runtime_error("make_batch: empty batch");
  SeqBatch b;
  b.batch = static_cast<int>(seqs.size());
  b.visual_len = seqs[0].visual_len;
  b.grid_size = preset.grid_size;
  int max_len = 0;
  for (const auto& s : seqs) {
    if (s.visual_len != b.visual_len)
      throw std::runtime_error("make_batch: mixed visual lengths in one batch");
    max_len = std::max(max_len, with_answers ? static_cast<int>(s.tokens.size()) : s.prompt_len);
  }
  b.seq_len = max_len;
  b.tokens.assign(static_cast<size_t>(b.batch) * max_len, Vocab::kPad);
  b.targets.assign(static_cast<size_t>(b.batch) * max_len, -1);
  b.positions.resize(static_cast<size_t>(b.batch) * max_len);

  const int patch_dim = b.visual_len > 0 ? seqs[0].patches.cols : 0;
  if (b.visual_len > 0) {
    b.patches = Mat<float>(b.batch * b.visual_len, patch_dim);
    b.patch_positions.resize(static_cast<size_t>(b.batch) * b.visual_len);
  }

  for (int i = 0; i < b.batch; ++i) {
    const auto& s = seqs[i];
    const int len = with_answers ? static_cast<int>(s.tokens.size()) : s.prompt_len;
    const auto pos = decoder_positions(max_len, s.visual_len, preset.grid_size);
    for (int j = 0; j < max_len; ++j) {
      b.positions[static_cast<size_t>(i) * max_len + j] = pos[j];
      if (j < len) b.tokens[static_cast<size_t>(i) * max_len + j] = s.tokens[j];
    }
    if (with_answers) {
      // Score next-token prediction for the answer span plus EOS.
      for (int j = s.prompt_len - 1; j < len - 1; ++j)
        b.targets[static_cast<size_t>(i) * max_len + j] = s.tokens[j + 1];
    }
    if (b.visual_len > 0) {
      if (s.patches.rows != b.visual_len || s.patches.cols != patch_dim)
        throw std::runtime_error("make_batch: patch shape mismatch");
      const auto enc_pos = encoder_positions(b.visual_len, preset.grid_size);
      for (int r = 0; r < b.visual_len; ++r) {
        b.visual_rows.push_back(i * max_len + 1 + r);
        std::copy(s.patches.row(r), s.patches.row(r) + patch_dim,
                  b.patches.row(i * b.visual_len + r));
        b.patch_positions[static_cast<size_t>(i) * b.visual_len + r] = enc_pos[r];
      }
    }
  }
  return b;
}

ModelConfig model_config_for(const GenPreset& preset, const Vocab& vocab) {
  ModelConfig mc;
  mc.patch_px = preset.stone_px;
  mc.vocab_size = vocab.size();
  const char c = preset.target_letter;
  const int text_tokens = preset.text_len + 2;  // letters plus brackets
  const int vis_tokens = preset.cells() + 1;    // placeholders plus separator
  const int longest_prompt = std::max(
      {1 + text_tokens + static_cast<int>(vocab.encode(counting_text_prompt(c)).size()),
       1 + vis_tokens + static_cast<int>(vocab.encode(counting_vision_prompt()).size()),
       1 + 2 * text_tokens + static_cast<int>(vocab.encode(compare_text_prompt(c)).size()),
       1 + vis_tokens + text_tokens +
           static_cast<int>(vocab.encode(compare_vision_prompt(c)).size())});
  mc.max_seq_len = longest_prompt + 12;  // answer, EOS, and decode headroom
  mc.validate();
  return mc;
}

}  // namespace countlab
