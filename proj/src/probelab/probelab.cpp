#include "probelab/probelab.hpp"

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <unordered_map>

#include "core/checksum.hpp"

namespace countlab {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

int parse_count(const std::string& s) {
  if (s.empty() || s.size() > 6) return -1;
  for (char c : s)
    if (c < '0' || c > '9') return -1;
  return std::stoi(s);
}

std::vector<AssembledSeq> assemble_slice(const GenPreset& preset, const Vocab& vocab,
                                         const std::vector<ManifestRecord>& records, int lo,
                                         int hi) {
  std::vector<AssembledSeq> seqs;
  seqs.reserve(hi - lo);
  for (int i = lo; i < hi; ++i) seqs.push_back(assemble_record(preset, records[i], vocab));
  return seqs;
}

int resolve_index(int index, int size, const char* what) {
  const int idx = index < 0 ? size - 1 : index;
  if (idx < 0 || idx >= size) throw std::runtime_error(std::string("probe: bad ") + what);
  return idx;
}

struct MeanAcc {
  double sum = 0;
  long n = 0;
  void add(double v) {
    sum += v;
    ++n;
  }
  double mean() const { return n ? sum / n : 0; }
};

}  // namespace

Mat<float> visual_layer_features(const Vlm<float>& model, const GenPreset& preset,
                                 const Vocab& vocab, const std::vector<ManifestRecord>& records,
                                 int lo, int hi, const ProbeLayer& layer) {
  const auto seqs = assemble_slice(preset, vocab, records, lo, hi);
  SeqBatch batch = make_batch(seqs, preset, false);
  if (batch.visual_len <= 0) throw std::runtime_error("probe: records carry no image");
  const int d = model.cfg.d_model;
  const int m = hi - lo;

  if (layer.stack == ProbeLayer::Stack::kEncoder) {
    HiddenTrace<float> trace;
    model.encode_visual(batch, &trace);
    const int idx = resolve_index(layer.index, static_cast<int>(trace.encoder_layers.size()),
                                  "encoder layer index");
    return std::move(trace.encoder_layers[idx]);
  }

  HiddenTrace<float> trace;
  Graph<float> g(false);
  model.build_forward(g, batch, nullptr, &trace);
  const int idx = resolve_index(layer.index, static_cast<int>(trace.decoder_layers.size()),
                                "decoder layer index");
  const Mat<float>& full = trace.decoder_layers[idx];
  Mat<float> out(m * batch.visual_len, d);
  for (int i = 0; i < m; ++i)
    for (int r = 0; r < batch.visual_len; ++r) {
      const float* src = full.row(i * batch.seq_len + 1 + r);
      std::copy(src, src + d, out.row(i * batch.visual_len + r));
    }
  return out;
}

TokenLabelSet collect_token_labels(const Vlm<float>& model, const GenPreset& preset,
                                   const Vocab& vocab, const DatasetManifest& data,
                                   int max_samples, int batch_size, const ProbeLayer& layer) {
  const int total = std::min<int>(max_samples, static_cast<int>(data.records.size()));
  if (total <= 0) throw std::runtime_error("probe: empty manifest");
  const int cells = preset.cells();
  const int d = model.cfg.d_model;

  TokenLabelSet out;
  out.features = Mat<float>(total * cells, d);
  out.labels.assign(static_cast<size_t>(total) * cells, 0);
  out.sample_index.resize(static_cast<size_t>(total) * cells);

  for (int lo = 0; lo < total; lo += batch_size) {
    const int hi = std::min(total, lo + batch_size);
    for (int i = lo; i < hi; ++i) {
      const ManifestRecord& rec = data.records[i];
      if (preset.regime_of(rec.n_target) != "ID")
        throw std::runtime_error("probe: training firewall tripped: record " + rec.id +
                                 " has n=" + std::to_string(rec.n_target) +
                                 " outside the in-distribution regime");
      if (rec.image_path.empty())
        throw std::runtime_error("probe: record " + rec.id + " carries no image");
      if (static_cast<int>(rec.black_cells.size()) != rec.n_target)
        throw std::runtime_error("probe: record " + rec.id + " cell list disagrees with n");
      BoardSample board = record_board(preset, rec);
      if (pixel_cluster_count(board.image) != rec.n_target)
        throw std::runtime_error("probe: record " + rec.id + " fails the pixel oracle");
      // Labels come from the manifest's cell list, so it must match the board
      // the features are computed from, not merely have the right size.
      auto want = board.black_cells;
      auto have = rec.black_cells;
      std::sort(want.begin(), want.end());
      std::sort(have.begin(), have.end());
      if (want != have)
        throw std::runtime_error("probe: record " + rec.id + " cell list disagrees with its board");
    }
    Mat<float> feats = visual_layer_features(model, preset, vocab, data.records, lo, hi, layer);
    std::copy(feats.data.begin(), feats.data.end(), out.features.row(lo * cells));
    for (int i = lo; i < hi; ++i) {
      for (int r = 0; r < cells; ++r) out.sample_index[static_cast<size_t>(i) * cells + r] = i;
      for (auto [row, col] : data.records[i].black_cells) {
        out.labels[static_cast<size_t>(i) * cells + row * preset.grid_size + col] = 1;
        ++out.positives;
      }
    }
  }
  out.samples = total;
  return out;
}

TokenProbe train_token_probe(const TokenLabelSet& data, double l2, int steps, double lr) {
  const int n = data.features.rows;
  const int d = data.features.cols;
  if (n <= 0) throw std::runtime_error("probe: no training rows");

  std::vector<int> train_rows, held_rows;
  train_rows.reserve(n);
  for (int r = 0; r < n; ++r)
    (data.sample_index[r] % 10 == 9 ? held_rows : train_rows).push_back(r);
  if (train_rows.empty()) throw std::runtime_error("probe: no training rows after split");

  const int nt = static_cast<int>(train_rows.size());
  Eigen::MatrixXd x(nt, d);
  Eigen::VectorXd y(nt);
  for (int r = 0; r < nt; ++r) {
    const float* src = data.features.row(train_rows[r]);
    for (int c = 0; c < d; ++c) x(r, c) = src[c];
    y(r) = data.labels[train_rows[r]];
  }

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0;
  for (int step = 0; step < steps; ++step) {
    Eigen::VectorXd p = ((x * w).array() + b).unaryExpr([](double z) { return sigmoid(z); });
    Eigen::VectorXd resid = p - y;
    Eigen::VectorXd gw = x.transpose() * resid / nt + l2 * w;
    const double gb = resid.mean();
    w -= lr * gw;
    b -= lr * gb;
  }

  TokenProbe probe;
  probe.weight.resize(d);
  for (int c = 0; c < d; ++c) probe.weight[c] = static_cast<float>(w(c));
  probe.bias = static_cast<float>(b);

  const std::vector<int>& score_rows = held_rows.empty() ? train_rows : held_rows;
  long hit = 0;
  for (int r : score_rows) {
    const float* src = data.features.row(r);
    double z = b;
    for (int c = 0; c < d; ++c) z += w(c) * src[c];
    const bool pred = sigmoid(z) > probe.threshold;
    if (pred == (data.labels[r] != 0)) ++hit;
  }
  probe.heldout_accuracy = static_cast<double>(hit) / score_rows.size();
  return probe;
}

int hidden_number(const TokenProbe& probe, const Mat<float>& tokens, int row_begin,
                  int row_count) {
  const int d = tokens.cols;
  if (static_cast<int>(probe.weight.size()) != d)
    throw std::runtime_error("probe: width disagrees with features");
  int count = 0;
  for (int r = row_begin; r < row_begin + row_count; ++r) {
    const float* src = tokens.row(r);
    double z = probe.bias;
    for (int c = 0; c < d; ++c) z += probe.weight[c] * src[c];
    if (sigmoid(z) > probe.threshold) ++count;
  }
  return count;
}

Gaps compute_gaps(int n_h, int n_g, int n_p) {
  Gaps g;
  g.vision_gap = std::abs(n_h - n_g);
  if (n_p >= 0) {
    g.language_gap = std::abs(n_h - n_p);
    g.language_defined = true;
  }
  return g;
}

ProbeReport probe_report(const Vlm<float>& model, const TokenProbe& probe,
                         const GenPreset& preset, const Vocab& vocab,
                         const DatasetManifest& data, const std::vector<Prediction>& preds,
                         int batch_size, const ProbeLayer& layer) {
  std::unordered_map<std::string, int> parsed_by_id;
  for (const Prediction& p : preds) parsed_by_id[p.record_id] = parse_count(p.parsed);

  ProbeReport report;
  report.entries.reserve(data.records.size());
  const int cells = preset.cells();
  const int total = static_cast<int>(data.records.size());

  std::map<int, MeanAcc> vg_n, lg_n;
  std::map<std::string, MeanAcc> vg_r, lg_r;

  for (int lo = 0; lo < total; lo += batch_size) {
    const int hi = std::min(total, lo + batch_size);
    Mat<float> feats = visual_layer_features(model, preset, vocab, data.records, lo, hi, layer);
    for (int i = lo; i < hi; ++i) {
      const ManifestRecord& rec = data.records[i];
      ProbeReportEntry e;
      e.record_id = rec.id;
      e.regime = rec.regime;
      e.n_g = rec.n_target;
      e.n_h = hidden_number(probe, feats, (i - lo) * cells, cells);
      auto it = parsed_by_id.find(rec.id);
      e.n_p = it == parsed_by_id.end() ? -1 : it->second;
      const Gaps g = compute_gaps(e.n_h, e.n_g, e.n_p);
      vg_n[e.n_g].add(g.vision_gap);
      vg_r[e.regime].add(g.vision_gap);
      if (g.language_defined) {
        lg_n[e.n_g].add(g.language_gap);
        lg_r[e.regime].add(g.language_gap);
      }
      report.entries.push_back(std::move(e));
    }
  }
  for (auto& [k, acc] : vg_n) report.vision_gap_by_n[k] = acc.mean();
  for (auto& [k, acc] : lg_n) report.language_gap_by_n[k] = acc.mean();
  for (auto& [k, acc] : vg_r) report.vision_gap_by_regime[k] = acc.mean();
  for (auto& [k, acc] : lg_r) report.language_gap_by_regime[k] = acc.mean();
  return report;
}

namespace {

double sample_count_accuracy(const Vlm<float>& model, const TokenProbe& probe,
                             const GenPreset& preset, const Vocab& vocab,
                             const std::vector<ManifestRecord>& records, int max_samples,
                             int batch_size, const ProbeLayer& layer) {
  const int total = std::min<int>(max_samples, static_cast<int>(records.size()));
  if (total <= 0) return 0;
  const int cells = preset.cells();
  long hit = 0;
  for (int lo = 0; lo < total; lo += batch_size) {
    const int hi = std::min(total, lo + batch_size);
    Mat<float> feats = visual_layer_features(model, preset, vocab, records, lo, hi, layer);
    for (int i = lo; i < hi; ++i)
      if (hidden_number(probe, feats, (i - lo) * cells, cells) == records[i].n_target) ++hit;
  }
  return static_cast<double>(hit) / total;
}

}  // namespace

LayerProbeResult train_layer_probe_tokens(const Vlm<float>& model, const GenPreset& preset,
                                          const Vocab& vocab, const DatasetManifest& train_id,
                                          const DatasetManifest& eval_set, int max_samples,
                                          int batch_size, const ProbeLayer& layer) {
  TokenLabelSet labels =
      collect_token_labels(model, preset, vocab, train_id, max_samples, batch_size, layer);
  LayerProbeResult res;
  res.mode = "token";
  res.probe = train_token_probe(labels);
  res.train_accuracy = sample_count_accuracy(model, res.probe, preset, vocab, train_id.records,
                                             max_samples, batch_size, layer);
  res.eval_accuracy = sample_count_accuracy(model, res.probe, preset, vocab, eval_set.records,
                                            max_samples, batch_size, layer);
  return res;
}

LayerProbeResult train_layer_probe_position(const Vlm<float>& model, const GenPreset& preset,
                                            const Vocab& vocab, const DatasetManifest& train_id,
                                            const DatasetManifest& eval_set, int max_samples,
                                            int batch_size, int decoder_layer_index) {
  const int d = model.cfg.d_model;

  // Hidden state at the final prompt token of the chosen decoder layer.
  auto gather = [&](const std::vector<ManifestRecord>& records, int total, Mat<float>& feats,
                    std::vector<int>& targets) {
    feats = Mat<float>(total, d);
    targets.resize(total);
    for (int lo = 0; lo < total; lo += batch_size) {
      const int hi = std::min(total, lo + batch_size);
      const auto seqs = assemble_slice(preset, vocab, records, lo, hi);
      SeqBatch batch = make_batch(seqs, preset, false);
      HiddenTrace<float> trace;
      Graph<float> g(false);
      model.build_forward(g, batch, nullptr, &trace);
      const int idx = resolve_index(decoder_layer_index,
                                    static_cast<int>(trace.decoder_layers.size()),
                                    "decoder layer index");
      const Mat<float>& full = trace.decoder_layers[idx];
      for (int i = lo; i < hi; ++i) {
        const float* src = full.row((i - lo) * batch.seq_len + seqs[i - lo].prompt_len - 1);
        std::copy(src, src + d, feats.row(i));
        targets[i] = records[i].n_target;
      }
    }
  };

  const int n_train = std::min<int>(max_samples, static_cast<int>(train_id.records.size()));
  if (n_train <= 0) throw std::runtime_error("probe: empty manifest");
  for (int i = 0; i < n_train; ++i)
    if (preset.regime_of(train_id.records[i].n_target) != "ID")
      throw std::runtime_error("probe: training firewall tripped: record " +
                               train_id.records[i].id + " outside the in-distribution regime");

  Mat<float> xf;
  std::vector<int> yv;
  gather(train_id.records, n_train, xf, yv);
  int n_classes = 0;
  for (int t : yv) n_classes = std::max(n_classes, t + 1);

  Eigen::MatrixXd x(n_train, d);
  for (int r = 0; r < n_train; ++r)
    for (int c = 0; c < d; ++c) x(r, c) = xf.row(r)[c];

  // Multiclass softmax regression, same schedule as the token probe.
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n_classes, d);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(n_classes);
  const double l2 = 1e-4, lr = 0.5;
  for (int step = 0; step < 1000; ++step) {
    Eigen::MatrixXd z = x * w.transpose();
    z.rowwise() += b.transpose();
    Eigen::MatrixXd p = (z.colwise() - z.rowwise().maxCoeff()).array().exp();
    p.array().colwise() /= p.rowwise().sum().array();
    for (int r = 0; r < n_train; ++r) p(r, yv[r]) -= 1.0;
    Eigen::MatrixXd gw = p.transpose() * x / n_train + l2 * w;
    Eigen::VectorXd gb = p.colwise().mean();
    w -= lr * gw;
    b -= lr * gb;
  }

  auto accuracy = [&](const std::vector<ManifestRecord>& records, int total) {
    if (total <= 0) return 0.0;
    Mat<float> feats;
    std::vector<int> targets;
    gather(records, total, feats, targets);
    long hit = 0;
    for (int r = 0; r < total; ++r) {
      Eigen::VectorXd v(d);
      for (int c = 0; c < d; ++c) v(c) = feats.row(r)[c];
      Eigen::VectorXd z = w * v + b;
      int best = 0;
      for (int k = 1; k < n_classes; ++k)
        if (z(k) > z(best)) best = k;
      if (best == targets[r]) ++hit;
    }
    return static_cast<double>(hit) / total;
  };

  LayerProbeResult res;
  res.mode = "position";
  res.train_accuracy = accuracy(train_id.records, n_train);
  res.eval_accuracy = accuracy(
      eval_set.records, std::min<int>(max_samples, static_cast<int>(eval_set.records.size())));
  return res;
}

uint64_t model_param_checksum(const ParamStore<float>& params) {
  uint64_t h = fnv1a64(std::string("params-v1"));
  for (const auto& [name, m] : params.items) {
    h = fnv1a64(name, h);
    h = fnv1a64(m.data.data(), m.data.size() * sizeof(float), h);
  }
  return h;
}

std::string probe_to_json(const TokenProbe& probe, uint64_t model_checksum) {
  nlohmann::json j;
  j["kind"] = "token-probe-v1";
  j["weight"] = probe.weight;
  j["bias"] = probe.bias;
  j["threshold"] = probe.threshold;
  j["regime_tag"] = probe.regime_tag;
  j["heldout_accuracy"] = probe.heldout_accuracy;
  j["model_checksum"] = checksum_hex(model_checksum);
  return j.dump(2) + "\n";
}

TokenProbe probe_from_json(const std::string& text, uint64_t expected_model_checksum) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.value("kind", "") != "token-probe-v1")
    throw std::runtime_error("probe: unrecognized serialization kind");
  if (j.value("model_checksum", "") != checksum_hex(expected_model_checksum))
    throw std::runtime_error("probe: checksum does not match the loaded parameters");
  TokenProbe p;
  p.weight = j.at("weight").get<std::vector<float>>();
  p.bias = j.at("bias").get<float>();
  p.threshold = j.at("threshold").get<float>();
  p.regime_tag = j.value("regime_tag", "ID");
  p.heldout_accuracy = j.value("heldout_accuracy", 0.0);
  return p;
}

}  // namespace countlab
