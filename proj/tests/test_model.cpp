#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "core/rng.hpp"
#include "model/checkpoint.hpp"
#include "model/config.hpp"
#include "model/sequence.hpp"
#include "model/vlm.hpp"
#include "tokenizer/vocab.hpp"

using namespace countlab;
namespace fs = std::filesystem;

namespace {

// Small board scale so full-model finite differences stay fast.
GenPreset tiny_preset() {
  GenPreset p;
  p.name = "tiny";
  p.grid_size = 4;
  p.stone_px = 14;
  p.text_len = 16;
  p.vis_max = 3;
  p.text_max = 6;
  p.fe_max = 8;
  p.distractor_delta = 2;
  p.neg_delta_max = 2;
  p.train_per_class = 4;
  p.eval_per_class = 2;
  p.batch_size = 8;
  return p;
}

struct TinyLab {
  GenPreset preset = tiny_preset();
  Vocab vocab = Vocab::build(vocab_corpus(tiny_preset()), true);
  ModelConfig cfg = model_config_for(tiny_preset(), vocab);
};

ManifestRecord text_record(const GenPreset& p, int n, uint64_t seed) {
  Rng rng(seed);
  const TextSample t = gen_text(n, p.text_len, p.target_letter, rng);
  ManifestRecord r;
  r.id = "txt";
  r.kind = "counting_text";
  r.regime = p.regime_of(n);
  r.n_target = n;
  r.prompt = t.prompt;
  r.answer = t.answer;
  r.input_text = t.input_text();
  return r;
}

ManifestRecord vision_record(const GenPreset& p, int n, int d, uint64_t seed) {
  ManifestRecord r;
  r.id = "vis";
  r.kind = "counting_vision";
  r.regime = p.regime_of(n);
  r.n_target = n;
  r.n_distractor = d;
  r.prompt = counting_vision_prompt();
  r.answer = std::to_string(n);
  r.image_path = "unused.png";
  r.seed = seed;
  BoardSpec spec;
  spec.grid_size = p.grid_size;
  spec.stone_px = p.stone_px;
  spec.target_count = n;
  spec.distractor_count = d;
  spec.seed = seed;
  r.black_cells = gen_board(spec).black_cells;
  return r;
}

}  // namespace

TEST_CASE("parameter store total matches an independently computed closed form") {
  TinyLab lab;
  Vlm<float> m(lab.cfg);
  const int64_t d = lab.cfg.d_model, v = lab.cfg.vocab_size, mh = lab.cfg.mlp_hidden();
  const int64_t patch = lab.cfg.patch_dim();
  const int64_t block = 2 * (2 * d) + 4 * d * d + (mh * d + mh) + (d * mh + d);
  const int64_t expect = (patch * d + d)              // patch embedding
                         + 4 * block                  // 2 encoder + 2 decoder blocks
                         + 2 * (2 * d)                // two final layernorms
                         + (d * d + d)                // projector
                         + v * d                      // token embedding
                         + v * d;                     // untied lm head
  CHECK(m.params.total() == expect);
  CHECK(lab.cfg.param_count() == expect);
}

TEST_CASE("desk-scale geometry: known vocabulary and parameter budget") {
  const GenPreset p = GenPreset::desk();
  const Vocab v = Vocab::build(vocab_corpus(p), true);
  CHECK(v.size() == 44);
  const ModelConfig mc = model_config_for(p, v);
  CHECK(mc.param_count() == 73152);
  CHECK(mc.patch_dim() == 14 * 14 * 3);
  // Longest assembled sequence (vision-text comparison) plus headroom fits.
  CHECK(mc.max_seq_len >= 1 + p.cells() + 1 + (p.text_len + 2) + 8);
}

TEST_CASE("image patches: geometry and [-1, 1] scaling") {
  Image img(28, 28, 255, 255, 255);
  img.set(0, 14, 0, 0, 0);  // black pixel in the second patch
  const Mat<float> patches = image_patches(img, 14);
  REQUIRE(patches.rows == 4);
  REQUIRE(patches.cols == 14 * 14 * 3);
  CHECK(patches.at(0, 0) == doctest::Approx(1.0f));
  CHECK(patches.at(1, 0) == doctest::Approx(-1.0f));  // row 0, col 14 lands in patch 1
  CHECK_THROWS(image_patches(img, 13));
}

TEST_CASE("rope position layout for encoder and decoder") {
  const auto enc = encoder_positions(16, 4);
  CHECK(enc[0].t == 0);
  CHECK(enc[5].h == 1);
  CHECK(enc[5].w == 1);
  CHECK(enc[15].h == 3);
  CHECK(enc[15].w == 3);

  const auto dec = decoder_positions(22, 16, 4);
  CHECK((dec[0].t == 0 && dec[0].h == 0 && dec[0].w == 0));
  CHECK((dec[1].t == 1 && dec[1].h == 0 && dec[1].w == 0));
  CHECK((dec[16].t == 1 && dec[16].h == 3 && dec[16].w == 3));
  // Text resumes one past the largest spatial coordinate and advances all
  // three components together.
  CHECK((dec[17].t == 4 && dec[17].h == 4 && dec[17].w == 4));
  CHECK((dec[21].t == 8 && dec[21].h == 8 && dec[21].w == 8));

  const auto pure = decoder_positions(5, 0, 4);
  for (int i = 0; i < 5; ++i) CHECK((pure[i].t == i && pure[i].h == i && pure[i].w == i));
}

TEST_CASE("assembled sequences: layout, prompt boundary, and loss targets") {
  TinyLab lab;
  const auto rec = vision_record(lab.preset, 2, 1, 99);
  const AssembledSeq s = assemble_record(lab.preset, rec, lab.vocab);
  REQUIRE(s.visual_len == 16);
  CHECK(s.tokens[0] == Vocab::kBos);
  for (int i = 1; i <= 17; ++i) CHECK(s.tokens[i] == Vocab::kImg);  // cells + separator
  CHECK(s.tokens.back() == Vocab::kEos);
  CHECK(s.prompt_len < static_cast<int>(s.tokens.size()));

  const SeqBatch b = make_batch({s}, lab.preset, true);
  // Targets score answer tokens and EOS only, shifted next-token style.
  for (int j = 0; j < b.seq_len; ++j) {
    const int tgt = b.targets[j];
    if (j < s.prompt_len - 1 || j >= static_cast<int>(s.tokens.size()) - 1) {
      CHECK(tgt == -1);
    } else {
      CHECK(tgt == s.tokens[j + 1]);
    }
  }
}

TEST_CASE("decoder is causal: editing a token never changes earlier logits") {
  TinyLab lab;
  Vlm<float> m(lab.cfg);
  m.init_params(7);
  const auto rec = text_record(lab.preset, 3, 5);
  AssembledSeq s = assemble_record(lab.preset, rec, lab.vocab);
  const SeqBatch b1 = make_batch({s}, lab.preset, true);
  Graph<float> g1(false);
  const auto n1 = m.build_forward(g1, b1);
  const Mat<float> base = g1.val(n1.logits);

  AssembledSeq s2 = s;
  const int edit_pos = static_cast<int>(s2.tokens.size()) - 2;
  s2.tokens[edit_pos] = s2.tokens[edit_pos] == Vocab::kEos ? Vocab::kBos : Vocab::kEos;
  const SeqBatch b2 = make_batch({s2}, lab.preset, true);
  Graph<float> g2(false);
  const auto n2 = m.build_forward(g2, b2);
  const Mat<float> edited = g2.val(n2.logits);

  bool before_same = true, after_diff = false;
  for (int j = 0; j < edit_pos; ++j)
    for (int c = 0; c < lab.cfg.vocab_size; ++c)
      if (base.at(j, c) != edited.at(j, c)) before_same = false;
  for (int c = 0; c < lab.cfg.vocab_size; ++c)
    if (base.at(edit_pos, c) != edited.at(edit_pos, c)) after_diff = true;
  CHECK(before_same);
  CHECK(after_diff);
}

TEST_CASE("mask directives: empty equals none, masked heads go silent") {
  TinyLab lab;
  Vlm<float> m(lab.cfg);
  m.init_params(11);
  const auto rec = vision_record(lab.preset, 2, 2, 21);
  const AssembledSeq s = assemble_record(lab.preset, rec, lab.vocab);
  const SeqBatch b = make_batch({s}, lab.preset, true);

  Graph<float> g1(false);
  const auto n1 = m.build_forward(g1, b);
  MaskDirectives empty;
  Graph<float> g2(false);
  const auto n2 = m.build_forward(g2, b, &empty);
  CHECK(g1.val(n1.logits).data == g2.val(n2.logits).data);

  MaskDirectives heads;
  heads.head_masks = {{0, 1}};
  HiddenTrace<float> tr;
  Graph<float> g3(false);
  m.build_forward(g3, b, &heads, &tr);
  CHECK(tr.decoder_attn[0].head_norm_sum[1] == 0.0);
  CHECK(tr.decoder_attn[0].head_norm_sum[0] > 0.0);
  CHECK(tr.decoder_attn[1].head_norm_sum[1] > 0.0);

  MaskDirectives bad;
  bad.head_masks = {{5, 0}};
  Graph<float> g4(false);
  CHECK_THROWS(m.build_forward(g4, b, &bad));
}

TEST_CASE("masking every visual key blinds the prompt to the image") {
  TinyLab lab;
  Vlm<float> m(lab.cfg);
  m.init_params(13);
  const AssembledSeq a =
      assemble_record(lab.preset, vision_record(lab.preset, 1, 2, 31), lab.vocab);
  const AssembledSeq b =
      assemble_record(lab.preset, vision_record(lab.preset, 3, 0, 32), lab.vocab);
  REQUIRE(a.tokens.size() == b.tokens.size());

  MaskDirectives md;
  md.token_masks.assign(1, {});
  for (int i = 1; i <= lab.preset.cells() + 1; ++i) md.token_masks[0].push_back(i);

  const SeqBatch ba = make_batch({a}, lab.preset, true);
  const SeqBatch bb = make_batch({b}, lab.preset, true);
  Graph<float> ga(false), gb(false);
  const auto na = m.build_forward(ga, ba, &md);
  const auto nb = m.build_forward(gb, bb, &md);
  const Mat<float>& la = ga.val(na.logits);
  const Mat<float>& lb = gb.val(nb.logits);
  // Prompt-position rows depend only on unmasked keys, which are identical.
  const int last_prompt_row = a.prompt_len - 1;
  for (int c = 0; c < lab.cfg.vocab_size; ++c)
    CHECK(la.at(last_prompt_row, c) == lb.at(last_prompt_row, c));

  // Without masks the same rows must differ (the boards differ).
  Graph<float> ga2(false), gb2(false);
  const auto na2 = m.build_forward(ga2, ba);
  const auto nb2 = m.build_forward(gb2, bb);
  bool differs = false;
  for (int c = 0; c < lab.cfg.vocab_size; ++c)
    if (ga2.val(na2.logits).at(last_prompt_row, c) != gb2.val(nb2.logits).at(last_prompt_row, c))
      differs = true;
  CHECK(differs);
}

TEST_CASE("full-model gradients agree with finite differences") {
  TinyLab lab;
  Vlm<float> mf(lab.cfg);
  mf.init_params(3);
  Vlm<double> m = mf.cast<double>();

  auto run_check = [&](const SeqBatch& b) {
    Graph<double> g;
    const auto nodes = m.build_forward(g, b);
    REQUIRE(nodes.loss >= 0);
    g.backward(nodes.loss);

    Rng pick(17);
    for (const auto& [name, node] : nodes.param_nodes) {
      Mat<double>& w = m.params.at(name);
      const Mat<double>& grad = g.grad(node);
      for (int rep = 0; rep < 3; ++rep) {
        const int idx = static_cast<int>(pick.bounded(w.size()));
        const double keep = w.data[idx];
        const double eps = 1e-5;
        w.data[idx] = keep + eps;
        Graph<double> gp(false);
        const double lp = gp.val(m.build_forward(gp, b).loss).at(0, 0);
        w.data[idx] = keep - eps;
        Graph<double> gm(false);
        const double lm = gm.val(m.build_forward(gm, b).loss).at(0, 0);
        w.data[idx] = keep;
        const double fd = (lp - lm) / (2 * eps);
        const double an = grad.data[idx];
        // Central differences bottom out around |loss| * eps_machine / eps;
        // below that, only agreement in absolute terms is meaningful.
        if (std::max(std::abs(fd), std::abs(an)) < 1e-7) continue;
        const double denom = std::max(std::abs(fd), std::abs(an));
        INFO(name << "[" << idx << "] fd=" << fd << " an=" << an);
        CHECK(std::abs(fd - an) / denom < 1e-3);
      }
    }
  };

  const SeqBatch text_batch = make_batch(
      {assemble_record(lab.preset, text_record(lab.preset, 2, 41), lab.vocab),
       assemble_record(lab.preset, text_record(lab.preset, 5, 42), lab.vocab)},
      lab.preset, true);
  run_check(text_batch);

  const SeqBatch vision_batch = make_batch(
      {assemble_record(lab.preset, vision_record(lab.preset, 2, 1, 43), lab.vocab)},
      lab.preset, true);
  run_check(vision_batch);
}

TEST_CASE("checkpoint round trip preserves weights, config, and provenance") {
  TinyLab lab;
  Vlm<float> m(lab.cfg);
  m.init_params(23);
  const std::string path = (fs::temp_directory_path() / "countlab_ckpt_test.bin").string();
  Provenance prov;
  prov.phase = "text_pretrain";
  prov.epoch = 3;
  prov.seed = 999;
  prov.preset = "tiny";
  save_checkpoint(path, m, lab.vocab.checksum(), prov);
  const LoadedCheckpoint lc = load_checkpoint(path);
  CHECK(lc.vocab_checksum == lab.vocab.checksum());
  CHECK(lc.provenance.phase == "text_pretrain");
  CHECK(lc.provenance.epoch == 3);
  CHECK(lc.provenance.seed == 999);
  CHECK(lc.model.cfg.max_seq_len == lab.cfg.max_seq_len);
  REQUIRE(lc.model.params.total() == m.params.total());
  for (const auto& [name, w] : m.params.items)
    CHECK(lc.model.params.at(name).data == w.data);
  fs::remove(path);
}

TEST_CASE("greedy generation is deterministic and batch-order invariant") {
  TinyLab lab;
  Vlm<float> m(lab.cfg);
  m.init_params(29);
  std::vector<AssembledSeq> seqs;
  for (int i = 0; i < 4; ++i)
    seqs.push_back(
        assemble_record(lab.preset, vision_record(lab.preset, i % 3, 1, 100 + i), lab.vocab));
  const GenResult r1 = m.generate_greedy(seqs, lab.preset, lab.vocab, 6);
  const GenResult r2 = m.generate_greedy(seqs, lab.preset, lab.vocab, 6);
  CHECK(r1.texts == r2.texts);
  CHECK(r1.truncated == r2.truncated);

  std::vector<AssembledSeq> rev(seqs.rbegin(), seqs.rend());
  const GenResult r3 = m.generate_greedy(rev, lab.preset, lab.vocab, 6);
  for (int i = 0; i < 4; ++i) {
    CHECK(r3.texts[3 - i] == r1.texts[i]);
    CHECK(r3.truncated[3 - i] == r1.truncated[i]);
  }
}
