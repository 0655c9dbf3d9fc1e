#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "boardgen/boardgen.hpp"
#include "curriculum/trainer.hpp"
#include "evalsuite/evalsuite.hpp"
#include "interventions/interventions.hpp"
#include "model/sequence.hpp"
#include "model/vlm.hpp"
#include "probelab/probelab.hpp"
#include "tokenizer/vocab.hpp"

using namespace countlab;
namespace fs = std::filesystem;

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
  p.train_per_class = 8;
  p.eval_per_class = 2;
  p.batch_size = 8;
  return p;
}

struct Memorized {
  GenPreset preset = tiny_preset();
  Vocab vocab = Vocab::build(vocab_corpus(tiny_preset()), true);
  Vlm<float> model{model_config_for(tiny_preset(), vocab)};
  DatasetManifest data;
  TokenProbe probe;
};

// One tiny model memorizing a small board set, shared across test cases.
// Full-rate training on the vision records is enough to make the greedy
// answers correct, which steering and ablation both require.
const Memorized& memorized_vision() {
  static Memorized m = [] {
    Memorized out;
    const fs::path dir = fs::temp_directory_path() / "countlab_intv_vision";
    fs::remove_all(dir);
    fs::create_directories(dir);
    DatasetRequest req;
    req.name = "mem_vision";
    req.kind = "counting_vision";
    req.n_lo = 0;
    req.n_hi = out.preset.vis_max;
    req.per_class = 8;
    req.seed = 71;
    out.data = build_dataset(out.preset, req, dir.string());

    TrainConfig cfg;
    cfg.phase = "text_pretrain";  // full-rate updates everywhere
    cfg.epochs = 60;
    cfg.batch_size = 8;
    cfg.seed = 72;
    cfg.preset = out.preset.name;
    cfg.n_max = out.preset.vis_max;
    out.model.init_params(73);
    run_training_phase(out.model, out.preset, out.vocab, out.data, cfg, dir.string());

    const TokenLabelSet labels =
        collect_token_labels(out.model, out.preset, out.vocab, out.data, 32, 8);
    out.probe = train_token_probe(labels);
    fs::remove_all(dir);
    return out;
  }();
  return m;
}

}  // namespace

TEST_CASE("the memorized fixture really answers its own boards") {
  const Memorized& m = memorized_vision();
  const auto preds = predict_manifest(m.model, m.preset, m.vocab, m.data, 16, 6);
  const RegimeMetrics metrics = score_predictions(preds);
  CHECK(metrics.overall_accuracy > 0.9);
  CHECK(m.probe.heldout_accuracy > 0.9);
}

TEST_CASE("masking zero stones changes nothing: the k=0 rung is exact") {
  const Memorized& m = memorized_vision();
  const SteeringCurve c =
      steering_curve(m.model, m.probe, m.preset, m.vocab, m.data, 0, 32, 8, 5);
  REQUIRE(c.k_max == 0);
  REQUIRE(c.success_by_k.size() == 1);
  CHECK(c.eligible > 0);
  CHECK(c.success_by_k[0] == doctest::Approx(1.0));
  CHECK(c.counts[0] == c.eligible);
  for (const auto& r : c.results) {
    CHECK(r.k == 0);
    CHECK(r.n_p_base == r.n_p_post);
    CHECK(r.success == (r.n_p_post == std::to_string(r.n_g)));
  }
}

TEST_CASE("steering bookkeeping: shared eligible set, rules, determinism") {
  const Memorized& m = memorized_vision();
  const SteeringCurve c =
      steering_curve(m.model, m.probe, m.preset, m.vocab, m.data, 2, 32, 8, 5);
  REQUIRE(c.success_by_k.size() == 3);
  // The candidate pool covers in-distribution boards with n >= k_max; both
  // sides of the baseline/probe filter must account for all of them.
  long pool = 0;
  for (const auto& rec : m.data.records)
    if (m.preset.regime_of(rec.n_target) == "ID" && rec.n_target >= 2) ++pool;
  CHECK(c.eligible + c.skipped == std::min<long>(32, pool));
  // One shared eligible set scores every rung.
  for (long n : c.counts) CHECK(n == c.eligible);
  for (double s : c.success_by_k) {
    CHECK(s >= 0.0);
    CHECK(s <= 1.0);
  }
  // Boards with fewer stones than k_max can never be in the eligible set.
  for (const auto& r : c.results) CHECK(r.n_g >= 2);

  const SteeringCurve c2 =
      steering_curve(m.model, m.probe, m.preset, m.vocab, m.data, 2, 32, 8, 5);
  CHECK(c2.success_by_k == c.success_by_k);
  REQUIRE(c2.results.size() == c.results.size());
  for (size_t i = 0; i < c.results.size(); ++i)
    CHECK(c2.results[i].n_p_post == c.results[i].n_p_post);

  const SteeringCurve c3 =
      steering_curve(m.model, m.probe, m.preset, m.vocab, m.data, 2, 32, 8, 99);
  CHECK(c3.eligible == c.eligible);  // eligibility ignores the draw seed
}

TEST_CASE("per-example critical sets partition the heads and re-verify") {
  const Memorized& m = memorized_vision();
  DatasetManifest slice = m.data;
  slice.records.resize(8);
  const CriticalSetBatch batch =
      per_example_critical_sets(m.model, m.preset, m.vocab, slice, "visual", 8, 8);
  CHECK(batch.examples_seen == 8);
  CHECK(batch.sets.size() + batch.skipped == 8);
  REQUIRE(!batch.sets.empty());
  CHECK(batch.definition_check == doctest::Approx(1.0));

  const int total_heads = m.model.cfg.dec_layers * m.model.cfg.n_heads;
  for (const auto& s : batch.sets) {
    CHECK(s.task == "visual");
    CHECK(!s.baseline.empty());
    std::vector<std::pair<int, int>> all = s.retained;
    all.insert(all.end(), s.masked.begin(), s.masked.end());
    CHECK(static_cast<int>(all.size()) == total_heads);
    std::sort(all.begin(), all.end());
    CHECK(std::adjacent_find(all.begin(), all.end()) == all.end());
    for (const auto& [l, h] : all) {
      CHECK(l >= 0);
      CHECK(l < m.model.cfg.dec_layers);
      CHECK(h >= 0);
      CHECK(h < m.model.cfg.n_heads);
    }
    // Definition, re-run directly: masking the complement of the retained
    // set leaves this example's answer untouched.
    MaskDirectives md;
    md.head_masks = s.masked;
    DatasetManifest one;
    one.preset_name = m.preset.name;
    for (const auto& rec : m.data.records)
      if (rec.id == s.record_id) one.records.push_back(rec);
    REQUIRE(one.records.size() == 1);
    std::vector<AssembledSeq> seqs{assemble_record(m.preset, one.records[0], m.vocab)};
    const GenResult g = m.model.generate_greedy(seqs, m.preset, m.vocab, 6, &md);
    CHECK(g.texts[0] == s.baseline);
  }
}

TEST_CASE("set overlap: equality, jaccard, and the empty-set convention") {
  using P = std::vector<std::pair<int, int>>;
  const Overlap same = circuit_overlap(P{{0, 1}, {1, 0}}, P{{1, 0}, {0, 1}});
  CHECK(same.equal);
  CHECK(same.jaccard == doctest::Approx(1.0));

  const Overlap disjoint = circuit_overlap(P{{0, 0}}, P{{1, 1}});
  CHECK_FALSE(disjoint.equal);
  CHECK(disjoint.jaccard == doctest::Approx(0.0));

  const Overlap half = circuit_overlap(P{{0, 0}, {0, 1}}, P{{0, 1}, {1, 1}});
  CHECK_FALSE(half.equal);
  CHECK(half.jaccard == doctest::Approx(1.0 / 3.0));

  const Overlap empty = circuit_overlap(P{}, P{});
  CHECK(empty.equal);
  CHECK(empty.jaccard == doctest::Approx(1.0));
}

TEST_CASE("tallying overlap between two tasks' sets") {
  auto set = [](const std::string& id, std::vector<std::pair<int, int>> retained) {
    CriticalHeadSet s;
    s.record_id = id;
    s.retained = std::move(retained);
    return s;
  };
  std::vector<CriticalHeadSet> a, b;
  a.push_back(set("x", {{0, 0}, {0, 1}}));
  a.push_back(set("y", {{1, 0}}));
  b.push_back(set("x", {{0, 0}, {0, 1}}));  // identical to a[0]
  b.push_back(set("y", {{1, 1}}));          // disjoint from a[1]

  const OverlapStats t = tally_overlap(a, b);
  CHECK(t.pairs == 2);
  CHECK(t.same == 1);
  CHECK(t.same_pct == doctest::Approx(50.0));
  CHECK(t.different_pct == doctest::Approx(50.0));
  CHECK(t.mean_jaccard == doctest::Approx(0.5));
}

TEST_CASE("head activation map: unit scale, mask sensitivity, silent grid") {
  const Memorized& m = memorized_vision();
  const Mat<double> map = head_activation_heatmap(m.model, m.preset, m.vocab, m.data, 8, 8);
  REQUIRE(map.rows == m.model.cfg.dec_layers);
  REQUIRE(map.cols == m.model.cfg.n_heads);
  double hi = 0;
  for (double v : map.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    hi = std::max(hi, v);
  }
  CHECK(hi == doctest::Approx(1.0));

  const Mat<double> one_off =
      head_activation_heatmap(m.model, m.preset, m.vocab, m.data, 8, 8, {{0, 1}});
  CHECK(one_off.at(0, 1) == doctest::Approx(0.0));
  CHECK(one_off.at(0, 0) > 0.0);

  std::vector<std::pair<int, int>> all;
  for (int l = 0; l < m.model.cfg.dec_layers; ++l)
    for (int h = 0; h < m.model.cfg.n_heads; ++h) all.emplace_back(l, h);
  const Mat<double> silent =
      head_activation_heatmap(m.model, m.preset, m.vocab, m.data, 8, 8, all);
  for (double v : silent.data) CHECK(v == 0.0);
}
