#include "interventions/interventions.hpp"

#include <algorithm>
#include <map>
#include <stdexcept>

#include "core/rng.hpp"
#include "evalsuite/evalsuite.hpp"

namespace countlab {

namespace {

struct RawPrediction {
  std::string text;
  bool truncated = false;
  bool operator==(const RawPrediction& o) const {
    return text == o.text && truncated == o.truncated;
  }
};

// Batched greedy decoding over record pointers with shared head masks and
// optional per-record token masks (indexed like records).
std::vector<RawPrediction> predict_records(
    const Vlm<float>& model, const GenPreset& preset, const Vocab& vocab,
    const std::vector<const ManifestRecord*>& records, int batch_size,
    const std::vector<std::pair<int, int>>& head_masks,
    const std::vector<std::vector<int>>* token_masks = nullptr) {
  const int total = static_cast<int>(records.size());
  std::vector<RawPrediction> out(total);
  for (int lo = 0; lo < total; lo += batch_size) {
    const int hi = std::min(total, lo + batch_size);
    std::vector<AssembledSeq> seqs;
    seqs.reserve(hi - lo);
    for (int i = lo; i < hi; ++i) seqs.push_back(assemble_record(preset, *records[i], vocab));
    MaskDirectives md;
    md.head_masks = head_masks;
    if (token_masks)
      md.token_masks.assign(token_masks->begin() + lo, token_masks->begin() + hi);
    const bool use_masks = !md.empty();
    GenResult gen = model.generate_greedy(seqs, preset, vocab, 8, use_masks ? &md : nullptr);
    for (int i = lo; i < hi; ++i) {
      out[i].text = gen.texts[i - lo];
      out[i].truncated = gen.truncated[i - lo];
    }
  }
  return out;
}

std::vector<std::pair<int, int>> bits_to_heads(unsigned bits, int heads_per_layer) {
  std::vector<std::pair<int, int>> out;
  for (int id = 0; bits >> id; ++id)
    if (bits & (1u << id)) out.emplace_back(id / heads_per_layer, id % heads_per_layer);
  return out;
}

}  // namespace

SteeringCurve steering_curve(const Vlm<float>& model, const TokenProbe& probe,
                             const GenPreset& preset, const Vocab& vocab,
                             const DatasetManifest& data, int k_max, int max_examples,
                             int batch_size, uint64_t seed) {
  if (k_max < 0) throw std::runtime_error("steering: k_max must be >= 0");
  const int cells = preset.cells();

  // Candidate pool: in-distribution boards with at least k_max stones.
  std::vector<const ManifestRecord*> pool;
  for (const ManifestRecord& rec : data.records) {
    if (rec.image_path.empty()) continue;
    if (preset.regime_of(rec.n_target) != "ID") continue;
    if (rec.n_target < k_max) continue;
    pool.push_back(&rec);
    if (static_cast<int>(pool.size()) >= max_examples) break;
  }
  if (pool.empty()) throw std::runtime_error("steering: no eligible boards");

  SteeringCurve res;
  res.k_max = k_max;

  // Baseline predictions and probe-positive token indices per candidate.
  std::vector<RawPrediction> base = predict_records(model, preset, vocab, pool, batch_size, {});
  std::vector<std::vector<int>> positives(pool.size());
  {
    std::vector<ManifestRecord> recs;
    recs.reserve(pool.size());
    for (const ManifestRecord* r : pool) recs.push_back(*r);
    for (int lo = 0; lo < static_cast<int>(recs.size()); lo += batch_size) {
      const int hi = std::min<int>(recs.size(), lo + batch_size);
      Mat<float> feats = visual_layer_features(model, preset, vocab, recs, lo, hi, {});
      for (int i = lo; i < hi; ++i)
        for (int r = 0; r < cells; ++r)
          if (hidden_number(probe, feats, (i - lo) * cells + r, 1) == 1)
            positives[i].push_back(r);
    }
  }

  std::vector<const ManifestRecord*> recs;
  std::vector<std::vector<int>> rec_positive;
  std::vector<std::string> rec_base;
  for (size_t i = 0; i < pool.size(); ++i) {
    const std::string parsed = extract_answer(base[i].text);
    const bool correct = !base[i].truncated && parsed == pool[i]->answer;
    if (!correct || static_cast<int>(positives[i].size()) < k_max) {
      ++res.skipped;
      continue;
    }
    recs.push_back(pool[i]);
    rec_positive.push_back(positives[i]);
    rec_base.push_back(parsed);
  }
  if (recs.empty()) throw std::runtime_error("steering: every candidate was skipped");
  res.eligible = static_cast<long>(recs.size());
  res.success_by_k.assign(k_max + 1, 0.0);
  res.counts.assign(k_max + 1, res.eligible);

  const int total = static_cast<int>(recs.size());
  for (int k = 0; k <= k_max; ++k) {
    std::vector<std::vector<int>> token_masks(total);
    for (int i = 0; i < total; ++i) {
      if (k == 0) continue;
      Rng rng(mix_seed(seed, mix_seed(static_cast<uint64_t>(i), static_cast<uint64_t>(k))));
      const auto pick =
          rng.sample_without_replacement(static_cast<int>(rec_positive[i].size()), k);
      for (int j : pick) token_masks[i].push_back(1 + rec_positive[i][j]);
    }
    std::vector<RawPrediction> preds = predict_records(model, preset, vocab, recs, batch_size,
                                                       {}, k > 0 ? &token_masks : nullptr);
    long hits = 0;
    for (int i = 0; i < total; ++i) {
      InterventionResult r;
      r.record_id = recs[i]->id;
      r.k = k;
      r.n_g = recs[i]->n_target;
      r.n_p_base = rec_base[i];
      r.n_p_post = extract_answer(preds[i].text);
      r.success = !preds[i].truncated && r.n_p_post == std::to_string(r.n_g - k);
      if (r.success) ++hits;
      res.results.push_back(std::move(r));
    }
    res.success_by_k[k] = static_cast<double>(hits) / total;
  }
  return res;
}

CriticalSetBatch per_example_critical_sets(const Vlm<float>& model, const GenPreset& preset,
                                           const Vocab& vocab, const DatasetManifest& data,
                                           const std::string& task_tag, int max_examples,
                                           int batch_size) {
  const int L = model.cfg.dec_layers;
  const int H = model.cfg.n_heads;
  const int n_heads = L * H;
  if (n_heads > 16) throw std::runtime_error("prune: head-state bitmask supports <= 16 heads");

  std::vector<const ManifestRecord*> pool;
  for (const ManifestRecord& rec : data.records) {
    pool.push_back(&rec);
    if (static_cast<int>(pool.size()) >= max_examples) break;
  }
  if (pool.empty()) throw std::runtime_error("prune: empty manifest");

  CriticalSetBatch res;
  res.examples_seen = static_cast<long>(pool.size());

  std::vector<RawPrediction> base = predict_records(model, preset, vocab, pool, batch_size, {});
  std::vector<const ManifestRecord*> recs;
  std::vector<RawPrediction> baseline;
  for (size_t i = 0; i < pool.size(); ++i) {
    if (!base[i].truncated && extract_answer(base[i].text) == pool[i]->answer) {
      recs.push_back(pool[i]);
      baseline.push_back(base[i]);
    } else {
      ++res.skipped;
    }
  }
  if (recs.empty()) throw std::runtime_error("prune: no baseline-correct examples");

  // Greedy sweep: examples sharing an accumulated masked set are evaluated in
  // one batched pass per candidate head.
  std::vector<unsigned> state(recs.size(), 0);
  for (int hid = 0; hid < n_heads; ++hid) {
    std::map<unsigned, std::vector<int>> groups;
    for (size_t i = 0; i < recs.size(); ++i) groups[state[i]].push_back(static_cast<int>(i));
    for (const auto& [bits, members] : groups) {
      const unsigned cand = bits | (1u << hid);
      std::vector<const ManifestRecord*> sub;
      sub.reserve(members.size());
      for (int i : members) sub.push_back(recs[i]);
      std::vector<RawPrediction> preds = predict_records(
          model, preset, vocab, sub, batch_size, bits_to_heads(cand, H));
      for (size_t j = 0; j < members.size(); ++j)
        if (preds[j] == baseline[members[j]]) state[members[j]] = cand;
    }
  }

  res.sets.resize(recs.size());
  long ok = 0;
  std::map<unsigned, std::vector<int>> final_groups;
  for (size_t i = 0; i < recs.size(); ++i) final_groups[state[i]].push_back(static_cast<int>(i));
  for (const auto& [bits, members] : final_groups) {
    std::vector<const ManifestRecord*> sub;
    for (int i : members) sub.push_back(recs[i]);
    std::vector<RawPrediction> preds =
        predict_records(model, preset, vocab, sub, batch_size, bits_to_heads(bits, H));
    for (size_t j = 0; j < members.size(); ++j) {
      const int i = members[j];
      CriticalHeadSet& s = res.sets[i];
      s.record_id = recs[i]->id;
      s.task = task_tag;
      s.baseline = baseline[i].text;
      s.masked = bits_to_heads(bits, H);
      for (int id = 0; id < n_heads; ++id)
        if (!(bits & (1u << id))) s.retained.emplace_back(id / H, id % H);
      if (preds[j] == baseline[i]) ++ok;
    }
  }
  res.definition_check = static_cast<double>(ok) / recs.size();
  return res;
}

Overlap circuit_overlap(std::vector<std::pair<int, int>> a, std::vector<std::pair<int, int>> b) {
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());

  Overlap o;
  o.equal = a == b;
  std::vector<std::pair<int, int>> inter, uni;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(inter));
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(uni));
  o.jaccard = uni.empty() ? 1.0 : static_cast<double>(inter.size()) / uni.size();
  return o;
}

OverlapStats tally_overlap(const std::vector<CriticalHeadSet>& a,
                           const std::vector<CriticalHeadSet>& b) {
  OverlapStats s;
  s.pairs = static_cast<long>(std::min(a.size(), b.size()));
  if (s.pairs == 0) return s;
  double jac = 0;
  for (long i = 0; i < s.pairs; ++i) {
    const Overlap o = circuit_overlap(a[i].retained, b[i].retained);
    if (o.equal) ++s.same;
    jac += o.jaccard;
  }
  s.same_pct = 100.0 * s.same / s.pairs;
  s.different_pct = 100.0 - s.same_pct;
  s.mean_jaccard = jac / s.pairs;
  return s;
}

Mat<double> head_activation_heatmap(const Vlm<float>& model, const GenPreset& preset,
                                    const Vocab& vocab, const DatasetManifest& data,
                                    int max_examples, int batch_size,
                                    const std::vector<std::pair<int, int>>& head_masks) {
  const int L = model.cfg.dec_layers;
  const int H = model.cfg.n_heads;
  std::vector<double> norm_sum(static_cast<size_t>(L) * H, 0.0);
  std::vector<long> tokens(L, 0);

  const int total = std::min<int>(max_examples, static_cast<int>(data.records.size()));
  if (total <= 0) throw std::runtime_error("heatmap: empty manifest");
  for (int lo = 0; lo < total; lo += batch_size) {
    const int hi = std::min(total, lo + batch_size);
    std::vector<AssembledSeq> seqs;
    seqs.reserve(hi - lo);
    for (int i = lo; i < hi; ++i)
      seqs.push_back(assemble_record(preset, data.records[i], vocab));
    SeqBatch batch = make_batch(seqs, preset, true);
    MaskDirectives md;
    md.head_masks = head_masks;
    HiddenTrace<float> trace;
    Graph<float> g(false);
    model.build_forward(g, batch, head_masks.empty() ? nullptr : &md, &trace);
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h)
        norm_sum[static_cast<size_t>(l) * H + h] += trace.decoder_attn[l].head_norm_sum[h];
      tokens[l] += trace.decoder_attn[l].token_count;
    }
  }

  Mat<double> out(L, H);
  double peak = 0;
  for (int l = 0; l < L; ++l)
    for (int h = 0; h < H; ++h) {
      const double mean = tokens[l] ? norm_sum[static_cast<size_t>(l) * H + h] / tokens[l] : 0;
      out.row(l)[h] = mean;
      peak = std::max(peak, mean);
    }
  if (peak <= 0) {
    out.zero();
    return out;
  }
  for (auto& v : out.data) v /= peak;
  return out;
}

}  // namespace countlab
