#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "core/rng.hpp"
#include "curriculum/trainer.hpp"
#include "model/checkpoint.hpp"
#include "model/sequence.hpp"
#include "model/vlm.hpp"
#include "tokenizer/vocab.hpp"

using namespace countlab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

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

std::string fresh_dir(const std::string& tag) {
  const fs::path d = fs::temp_directory_path() / ("countlab_cur_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d.string();
}

DatasetManifest tiny_dataset(const GenPreset& p, const std::string& kind, int n_hi,
                             uint64_t seed, const std::string& dir) {
  DatasetRequest req;
  req.name = "d_" + kind;
  req.kind = kind;
  req.n_lo = 0;
  req.n_hi = n_hi;
  req.per_class = 4;
  req.seed = seed;
  return build_dataset(p, req, dir);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), {});
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::vector<json> out;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

double metric_value(const std::vector<json>& rows, const std::string& metric) {
  for (const auto& r : rows)
    if (r.at("metric") == metric) return r.at("value").get<double>();
  FAIL("metric not found: " << metric);
  return 0;
}

}  // namespace

TEST_CASE("a fresh model memorizes one fixed batch fast") {
  const GenPreset p = GenPreset::desk();
  const Vocab vocab = Vocab::build(vocab_corpus(p), true);
  const std::string dir = fresh_dir("overfit");
  DatasetRequest req;
  req.name = "overfit";
  req.kind = "counting_text";
  req.n_lo = 0;
  req.n_hi = 15;
  req.per_class = 1;
  req.seed = 5;
  const DatasetManifest data = build_dataset(p, req, dir);
  REQUIRE(data.records.size() == 16);
  const double loss = overfit_fixed_batch(p, vocab, data.records, 200, 17);
  CHECK(loss < 0.05);
  fs::remove_all(dir);
}

TEST_CASE("training rejects examples above the phase count ceiling") {
  TinyLab lab;
  const std::string dir = fresh_dir("firewall");
  DatasetManifest data = tiny_dataset(lab.preset, "counting_text", lab.preset.text_max, 7, dir);

  TrainConfig cfg;
  cfg.phase = "text_pretrain";
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.preset = lab.preset.name;
  cfg.n_max = lab.preset.text_max;

  // Clean data trains without complaint.
  {
    Vlm<float> m(lab.cfg);
    m.init_params(1);
    CHECK_NOTHROW(run_training_phase(m, lab.preset, lab.vocab, data, cfg, dir + "/ok"));
  }
  // One target count past the ceiling aborts the phase.
  {
    DatasetManifest bad = data;
    bad.records[3].n_target = lab.preset.text_max + 1;
    Vlm<float> m(lab.cfg);
    m.init_params(1);
    CHECK_THROWS(run_training_phase(m, lab.preset, lab.vocab, bad, cfg, dir + "/bad"));
  }
  // Same for a comparison partner larger than any trained sequence.
  {
    DatasetManifest bad = data;
    bad.records[5].n_rhs = lab.preset.text_max + 1;
    Vlm<float> m(lab.cfg);
    m.init_params(1);
    CHECK_THROWS(run_training_phase(m, lab.preset, lab.vocab, bad, cfg, dir + "/bad2"));
  }
  fs::remove_all(dir);
}

TEST_CASE("comparison phases demand a 1:1 label balance per count") {
  TinyLab lab;
  const std::string dir = fresh_dir("balance");
  const DatasetManifest data =
      tiny_dataset(lab.preset, "compare_text", lab.preset.text_max, 11, dir);
  CHECK_NOTHROW(check_comparison_balance(data));

  DatasetManifest skewed = data;
  for (size_t i = 0; i < skewed.records.size(); ++i) {
    if (skewed.records[i].n_target == 2 && skewed.records[i].answer == "False") {
      skewed.records.erase(skewed.records.begin() + static_cast<long>(i));
      break;
    }
  }
  REQUIRE(skewed.records.size() == data.records.size() - 1);
  CHECK_THROWS(check_comparison_balance(skewed));

  TrainConfig cfg;
  cfg.phase = "compare_text";
  cfg.epochs = 1;
  cfg.batch_size = 16;
  cfg.seed = 3;
  cfg.preset = lab.preset.name;
  cfg.n_max = lab.preset.text_max;
  Vlm<float> m(lab.cfg);
  m.init_params(1);
  CHECK_THROWS(run_training_phase(m, lab.preset, lab.vocab, skewed, cfg, dir + "/skew"));
  fs::remove_all(dir);
}

TEST_CASE("one seed, one training trajectory: logs and weights match bitwise") {
  TinyLab lab;
  const std::string dir = fresh_dir("determinism");
  const DatasetManifest data = tiny_dataset(lab.preset, "counting_text", 3, 13, dir);

  TrainConfig cfg;
  cfg.phase = "text_pretrain";
  cfg.epochs = 2;
  cfg.batch_size = 8;
  cfg.seed = 21;
  cfg.preset = lab.preset.name;
  cfg.n_max = lab.preset.text_max;

  auto train_once = [&](const std::string& sub, uint64_t seed) {
    TrainConfig c = cfg;
    c.seed = seed;
    Vlm<float> m(lab.cfg);
    m.init_params(4);
    return run_training_phase(m, lab.preset, lab.vocab, data, c, dir + "/" + sub);
  };

  const PhaseResult a = train_once("a", 21);
  const PhaseResult b = train_once("b", 21);
  const PhaseResult c = train_once("c", 22);
  CHECK(slurp(a.metrics_path) == slurp(b.metrics_path));
  CHECK(slurp(a.checkpoint_path) == slurp(b.checkpoint_path));
  CHECK(slurp(a.metrics_path) != slurp(c.metrics_path));
  fs::remove_all(dir);
}

TEST_CASE("alignment phases train the decoder at the reduced rate") {
  TinyLab lab;
  const std::string dir = fresh_dir("splitlr");
  const DatasetManifest data = tiny_dataset(lab.preset, "counting_vision", 3, 19, dir);

  TrainConfig cfg;
  cfg.phase = "vision_align";
  cfg.epochs = 1;
  cfg.batch_size = 8;
  cfg.seed = 9;
  cfg.preset = lab.preset.name;
  cfg.n_max = lab.preset.vis_max;

  Vlm<float> m(lab.cfg);
  m.init_params(6);
  const Mat<float> enc_before = m.params.at("enc.l0.attn.wq");
  const Mat<float> dec_before = m.params.at("dec.l0.attn.wq");
  const PhaseResult res = run_training_phase(m, lab.preset, lab.vocab, data, cfg, dir);

  const auto rows = read_jsonl(res.metrics_path);
  CHECK(metric_value(rows, "lr.encoder") == doctest::Approx(1e-3));
  CHECK(metric_value(rows, "lr.projector") == doctest::Approx(1e-3));
  CHECK(metric_value(rows, "lr.decoder") == doctest::Approx(1e-5));

  // Adam moves each touched weight by roughly its learning rate per step, so
  // the decoder drift must sit orders of magnitude under the encoder drift.
  auto max_delta = [](const Mat<float>& before, const Mat<float>& after) {
    float d = 0;
    for (size_t i = 0; i < before.data.size(); ++i)
      d = std::max(d, std::abs(before.data[i] - after.data[i]));
    return d;
  };
  const float enc_d = max_delta(enc_before, m.params.at("enc.l0.attn.wq"));
  const float dec_d = max_delta(dec_before, m.params.at("dec.l0.attn.wq"));
  CHECK(enc_d > 5e-4f);
  CHECK(dec_d < 5e-4f);
  CHECK(dec_d > 0.0f);

  // Text pretraining instead trains everything at the main rate.
  TrainConfig t = cfg;
  t.phase = "text_pretrain";
  t.n_max = lab.preset.text_max;
  const DatasetManifest text = tiny_dataset(lab.preset, "counting_text", 3, 23, dir + "/t");
  Vlm<float> m2(lab.cfg);
  m2.init_params(6);
  const PhaseResult res2 = run_training_phase(m2, lab.preset, lab.vocab, text, t, dir + "/t");
  const auto rows2 = read_jsonl(res2.metrics_path);
  CHECK(metric_value(rows2, "lr.decoder") == doctest::Approx(1e-3));
  fs::remove_all(dir);
}

TEST_CASE("epoch accounting: losses logged per epoch, checkpoint stamped with the last") {
  TinyLab lab;
  const std::string dir = fresh_dir("epochs");
  const DatasetManifest data = tiny_dataset(lab.preset, "counting_text", 3, 29, dir);

  TrainConfig cfg;
  cfg.phase = "text_pretrain";
  cfg.epochs = 3;
  cfg.batch_size = 8;
  cfg.seed = 31;
  cfg.preset = lab.preset.name;
  cfg.n_max = lab.preset.text_max;

  int eval_calls = 0;
  std::vector<EpochEval> evals;
  evals.push_back({"probe_accuracy", [&](const Vlm<float>&) {
                     ++eval_calls;
                     return 0.5;
                   }});

  Vlm<float> m(lab.cfg);
  m.init_params(8);
  const PhaseResult res = run_training_phase(m, lab.preset, lab.vocab, data, cfg, dir, evals);

  const auto rows = read_jsonl(res.metrics_path);
  int epoch_lines = 0, step_lines = 0, eval_lines = 0;
  for (const auto& r : rows) {
    if (r.at("metric") == "epoch_loss") ++epoch_lines;
    if (r.at("metric") == "loss") ++step_lines;
    if (r.at("metric") == "probe_accuracy") ++eval_lines;
  }
  CHECK(epoch_lines == 3);
  CHECK(step_lines == 3 * 2);  // 16 records / batch 8
  CHECK(eval_lines == 3);
  CHECK(eval_calls == 3);

  const LoadedCheckpoint lc = load_checkpoint(res.checkpoint_path);
  CHECK(lc.provenance.phase == "text_pretrain");
  CHECK(lc.provenance.epoch == 3);
  CHECK(lc.vocab_checksum == lab.vocab.checksum());

  // Loss should drop across epochs on this memorizable set.
  std::vector<double> losses;
  for (const auto& r : rows)
    if (r.at("metric") == "epoch_loss") losses.push_back(r.at("value").get<double>());
  CHECK(losses.back() < losses.front());
  fs::remove_all(dir);
}
