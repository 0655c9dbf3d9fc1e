#include "pipeline/reproduce.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "boardgen/boardgen.hpp"
#include "core/config.hpp"
#include "core/rng.hpp"
#include "curriculum/trainer.hpp"
#include "evalsuite/evalsuite.hpp"
#include "interventions/interventions.hpp"
#include "model/checkpoint.hpp"
#include "model/sequence.hpp"
#include "model/vlm.hpp"
#include "plots/figures.hpp"
#include "plots/svg.hpp"
#include "probelab/probelab.hpp"
#include "tokenizer/vocab.hpp"

namespace countlab {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

// Tuned so the full desk run finishes comfortably while leaving headroom
// above every pass threshold.
constexpr int kDefaultTextEpochs = 30;
constexpr int kDefaultVisionEpochs = 20;
constexpr int kDefaultCompareTextEpochs = 20;
constexpr int kDefaultCompareVisionEpochs = 15;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

DatasetManifest filter_by_n(const DatasetManifest& src, int lo, int hi,
                            const std::string& name) {
  DatasetManifest out = src;
  out.name = name;
  out.n_lo = lo;
  out.n_hi = hi;
  out.records.clear();
  for (const auto& r : src.records)
    if (r.n_target >= lo && r.n_target <= hi) out.records.push_back(r);
  return out;
}

DatasetManifest stride_records(const DatasetManifest& src, size_t stride,
                               const std::string& name) {
  DatasetManifest out = src;
  out.name = name;
  out.records.clear();
  for (size_t i = 0; i < src.records.size(); i += stride) out.records.push_back(src.records[i]);
  return out;
}

void write_predictions(const fs::path& path, const std::vector<Prediction>& preds) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("reproduce: cannot write " + path.string());
  for (const auto& p : preds) {
    json j;
    j["record_id"] = p.record_id;
    j["regime"] = p.regime;
    j["n_target"] = p.n_target;
    j["raw_output"] = p.raw_output;
    j["parsed"] = p.parsed;
    j["expected"] = p.expected;
    j["truncated"] = p.truncated;
    j["correct"] = p.correct;
    f << j.dump() << "\n";
  }
}

void write_csv(const fs::path& path, const std::string& header,
               const std::vector<std::string>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("reproduce: cannot write " + path.string());
  f << header << "\n";
  for (const auto& r : rows) f << r << "\n";
}

double map_at(const std::map<std::string, double>& m, const std::string& key, double fallback) {
  auto it = m.find(key);
  return it == m.end() ? fallback : it->second;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("reproduce: cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string pair_list(const std::vector<std::pair<int, int>>& heads) {
  std::string s = "{";
  for (size_t i = 0; i < heads.size(); ++i) {
    if (i) s += " ";
    s += "L" + std::to_string(heads[i].first) + "H" + std::to_string(heads[i].second);
  }
  return s + "}";
}

}  // namespace

ReproduceReport run_reproduce(const ReproduceOptions& opts) {
  const auto t0 = Clock::now();
  auto log_stage = [&](const std::string& msg) {
    std::cout << "[reproduce " << fmt("%7.1f", seconds_since(t0)) << "s] " << msg << std::endl;
  };

  if (opts.run_dir.empty()) throw std::runtime_error("reproduce: run_dir required");
  if (opts.preset != "paper" && opts.preset != "desk")
    throw std::runtime_error("reproduce: unknown preset " + opts.preset);
  const GenPreset preset = opts.preset == "paper" ? GenPreset::paper() : GenPreset::desk();

  const fs::path run = opts.run_dir;
  const fs::path data_dir = run / "data";
  const fs::path fig_dir = run / "figures";
  const fs::path tab_dir = run / "tables";
  fs::create_directories(data_dir);
  fs::create_directories(fig_dir);
  fs::create_directories(tab_dir);

  const int epochs_text = opts.epochs_text > 0 ? opts.epochs_text : kDefaultTextEpochs;
  const int epochs_vision = opts.epochs_vision > 0 ? opts.epochs_vision : kDefaultVisionEpochs;
  const int epochs_ctext =
      opts.epochs_compare_text > 0 ? opts.epochs_compare_text : kDefaultCompareTextEpochs;
  const int epochs_cvision =
      opts.epochs_compare_vision > 0 ? opts.epochs_compare_vision : kDefaultCompareVisionEpochs;
  const int batch = opts.batch_size > 0 ? opts.batch_size : preset.batch_size;

  {
    Config echo;
    echo.set("run.preset", preset.name);
    echo.set_int("run.seed", static_cast<int64_t>(opts.seed));
    echo.set_int("run.batch_size", batch);
    echo.set_int("run.eval_batch", opts.eval_batch);
    echo.set_int("epochs.text_pretrain", epochs_text);
    echo.set_int("epochs.vision_align", epochs_vision);
    echo.set_int("epochs.compare_text", epochs_ctext);
    echo.set_int("epochs.compare_vision", epochs_cvision);
    echo.write_file((run / "reproduce.ini").string());
  }

  ReproduceReport report;
  report.run_dir = run.string();
  json extra;

  // ---------------------------------------------------------------- stage 1
  // Generator audit: pixel-oracle agreement, rebuild determinism, speed.
  log_stage("generator audit: " + std::to_string(opts.audit_boards) + " boards");
  {
    const auto ta = Clock::now();
    Rng audit(mix_seed(opts.seed, 11));
    long oracle_ok = 0;
    bool identical = true;
    for (int i = 0; i < opts.audit_boards; ++i) {
      const int n = static_cast<int>(audit.bounded(static_cast<uint64_t>(preset.fe_max + 1)));
      BoardSpec spec;
      spec.grid_size = preset.grid_size;
      spec.stone_px = preset.stone_px;
      spec.target_count = n;
      spec.distractor_count =
          sample_distractor_count(n, preset.distractor_delta, preset.cells(), audit);
      spec.seed = mix_seed(opts.seed, 1000 + i);
      const BoardSample b1 = gen_board(spec);
      const BoardSample b2 = gen_board(spec);
      if (pixel_cluster_count(b1.image) == n) ++oracle_ok;
      if (b1.image.pixels != b2.image.pixels || b1.black_cells != b2.black_cells)
        identical = false;
    }
    const double secs = seconds_since(ta);
    CriterionResult c;
    c.id = 1;
    c.name = "board generator: pixel-oracle agreement, identical rebuilds, speed";
    c.pass = oracle_ok == opts.audit_boards && identical && secs < 60.0;
    c.details = std::to_string(oracle_ok) + "/" + std::to_string(opts.audit_boards) +
                " oracle matches, rebuilds " + (identical ? "identical" : "DIVERGED") + ", " +
                fmt("%.1f", secs) + "s";
    report.criteria.push_back(c);
    extra["generator_audit"] = {{"oracle_ok", oracle_ok},
                                {"boards", opts.audit_boards},
                                {"identical", identical},
                                {"seconds", secs}};
  }

  // ---------------------------------------------------------------- stage 2
  // Datasets (fully determined by seed; rebuilt every run).
  log_stage("building datasets");
  auto build = [&](const std::string& name, const std::string& kind, int lo, int hi,
                   int per_class, uint64_t salt) {
    DatasetRequest req;
    req.name = name;
    req.kind = kind;
    req.n_lo = lo;
    req.n_hi = hi;
    req.per_class = per_class;
    req.seed = mix_seed(opts.seed, salt);
    return build_dataset(preset, req, data_dir.string());
  };
  const DatasetManifest train_text =
      build("train_text", "counting_text", 0, preset.text_max, preset.train_per_class, 21);
  const DatasetManifest train_vision =
      build("train_vision", "counting_vision", 0, preset.vis_max, preset.train_per_class, 22);
  const DatasetManifest train_ctext =
      build("train_compare_text", "compare_text", 0, preset.text_max, preset.train_per_class, 23);
  const DatasetManifest train_cvision = build("train_compare_vision", "compare_vision", 0,
                                              preset.vis_max, preset.train_per_class, 24);
  const DatasetManifest eval_text =
      build("eval_text", "counting_text", 0, preset.text_max, preset.eval_per_class, 25);
  const DatasetManifest eval_vision =
      build("eval_vision", "counting_vision", 0, preset.fe_max, preset.eval_per_class, 26);
  const DatasetManifest eval_cvision = build("eval_compare_vision", "compare_vision", 0,
                                             preset.text_max, preset.eval_per_class, 27);
  const DatasetManifest probe_train =
      build("probe_train", "counting_vision", 0, preset.vis_max, preset.eval_per_class, 28);
  const DatasetManifest eval_id = filter_by_n(eval_vision, 0, preset.vis_max, "eval_vision_id");
  const DatasetManifest eval_ve =
      filter_by_n(eval_vision, preset.vis_max + 1, preset.text_max, "eval_vision_ve");
  log_stage("datasets ready: " + std::to_string(train_text.records.size()) + " text / " +
            std::to_string(train_vision.records.size()) + " vision train records");

  // ---------------------------------------------------------------- stage 3
  // Tokenizer and model geometry.
  const Vocab vocab = Vocab::build(vocab_corpus(preset), true);
  write_text_file((run / "vocab.json").string(), vocab.to_json());
  const ModelConfig mc = model_config_for(preset, vocab);
  log_stage("vocab " + std::to_string(vocab.size()) + " tokens, model " +
            std::to_string(mc.param_count()) + " params, max_seq " +
            std::to_string(mc.max_seq_len));

  auto train_or_load = [&](Vlm<float>& model, const DatasetManifest& data, TrainConfig cfg,
                           const std::vector<EpochEval>& evals) {
    const fs::path ck = run / ("ckpt_" + cfg.phase + ".bin");
    if (opts.reuse_checkpoints && fs::exists(ck)) {
      LoadedCheckpoint lc = load_checkpoint(ck.string());
      if (lc.vocab_checksum != vocab.checksum())
        throw std::runtime_error("reproduce: checkpoint " + ck.string() +
                                 " was trained against a different vocabulary");
      model = lc.model;
      log_stage("reusing checkpoint " + ck.filename().string());
      return;
    }
    run_training_phase(model, preset, vocab, data, cfg, run.string(), evals);
  };
  auto quick_em = [&](const DatasetManifest& slice, const std::string& metric) {
    const int eval_batch = opts.eval_batch;
    return EpochEval{metric, [slice, &preset, &vocab, eval_batch](const Vlm<float>& m) {
                       auto p = predict_manifest(m, preset, vocab, slice, eval_batch);
                       return score_predictions(p).overall_accuracy;
                     }};
  };
  const DatasetManifest text_quick = stride_records(eval_text, 8, "text_quick");
  const DatasetManifest vision_quick = stride_records(eval_id, 8, "vision_quick");
  const DatasetManifest cmp_quick = stride_records(eval_cvision, 16, "compare_quick");

  // ---------------------------------------------------------------- stage 4
  // Counting lineage: text pretrain, then visual alignment with the decoder
  // held at the reduced learning rate.
  Vlm<float> model(mc);
  model.init_params(mix_seed(opts.seed, 100));
  {
    TrainConfig cfg;
    cfg.phase = "text_pretrain";
    cfg.epochs = epochs_text;
    cfg.batch_size = batch;
    cfg.seed = mix_seed(opts.seed, 201);
    cfg.preset = preset.name;
    cfg.n_max = preset.text_max;
    log_stage("phase text_pretrain: " + std::to_string(cfg.epochs) + " epochs x " +
              std::to_string((train_text.records.size() + batch - 1) / batch) + " steps");
    train_or_load(model, train_text, cfg, {quick_em(text_quick, "text_em_quick")});
  }
  {
    TrainConfig cfg;
    cfg.phase = "vision_align";
    cfg.epochs = epochs_vision;
    cfg.batch_size = batch;
    cfg.seed = mix_seed(opts.seed, 202);
    cfg.preset = preset.name;
    cfg.n_max = preset.vis_max;
    log_stage("phase vision_align: " + std::to_string(cfg.epochs) + " epochs x " +
              std::to_string((train_vision.records.size() + batch - 1) / batch) + " steps");
    train_or_load(model, train_vision, cfg,
                  {quick_em(vision_quick, "vision_em_quick"),
                   quick_em(text_quick, "text_em_quick")});
  }

  // ---------------------------------------------------------------- stage 5
  // Counting evaluation across regimes.
  log_stage("counting evaluation");
  const std::vector<Prediction> preds_text =
      predict_manifest(model, preset, vocab, eval_text, opts.eval_batch);
  const RegimeMetrics m_text = score_predictions(preds_text);
  const std::vector<Prediction> preds_vision =
      predict_manifest(model, preset, vocab, eval_vision, opts.eval_batch);
  const RegimeMetrics m_vision = score_predictions(preds_vision);
  write_predictions(run / "predictions_text.jsonl", preds_text);
  write_predictions(run / "predictions_vision.jsonl", preds_vision);

  double min_text_em = 1.0;
  for (const auto& [n, acc] : m_text.per_n_accuracy) min_text_em = std::min(min_text_em, acc);
  const double id_acc = map_at(m_vision.regime_accuracy, "ID", 0.0);
  const double ve_acc = map_at(m_vision.regime_accuracy, "VE", 1.0);
  const double fe_acc = map_at(m_vision.regime_accuracy, "FE", 1.0);
  {
    CriterionResult c;
    c.id = 2;
    c.name = "counting split: text exact match vs visual regime cliff";
    c.pass = min_text_em >= 0.99 && id_acc >= 0.95 && ve_acc <= 0.05;
    c.details = "text min per-N EM " + fmt("%.4f", min_text_em) + ", vision ID " +
                fmt("%.4f", id_acc) + ", VE " + fmt("%.4f", ve_acc) + ", FE " + fmt("%.4f", fe_acc);
    report.criteria.push_back(c);
  }
  extra["counting"] = {{"text_min_per_n_em", min_text_em},
                       {"text_overall", m_text.overall_accuracy},
                       {"vision_id", id_acc},
                       {"vision_ve", ve_acc},
                       {"vision_fe", fe_acc},
                       {"vision_truncation_rate", m_vision.truncation_rate}};

  const ConfusionHeatmap conf = confusion_heatmap(preds_vision);
  figure_counting_per_n((fig_dir / "counting_per_n.svg").string(), preds_text, preds_vision);
  figure_mean_prediction((fig_dir / "mean_prediction.svg").string(), preds_vision);
  {
    std::vector<std::string> rows;
    for (const auto& [n, acc] : m_vision.per_n_accuracy) {
      std::ostringstream r;
      r << n << ",";
      if (m_text.per_n_accuracy.count(n)) r << fmt("%.6f", m_text.per_n_accuracy.at(n));
      r << "," << fmt("%.6f", acc) << ",";
      if (conf.mean_prediction.count(n)) r << fmt("%.4f", conf.mean_prediction.at(n));
      rows.push_back(r.str());
    }
    write_csv(tab_dir / "counting_per_n.csv", "n,text_em,vision_em,mean_prediction", rows);
  }

  // ---------------------------------------------------------------- stage 6
  // Per-cell detection probe on in-distribution boards, then the two-gap
  // decomposition across regimes.
  log_stage("token probe training (in-distribution boards only)");
  const TokenLabelSet probe_labels = collect_token_labels(
      model, preset, vocab, probe_train, static_cast<int>(probe_train.records.size()),
      opts.eval_batch, ProbeLayer{});
  const TokenProbe probe = train_token_probe(probe_labels);
  write_text_file((run / "probe.json").string(),
                  probe_to_json(probe, model_param_checksum(model.params)));
  log_stage("probe held-out accuracy " + fmt("%.4f", probe.heldout_accuracy));

  const ProbeReport gaps = probe_report(model, probe, preset, vocab, eval_vision, preds_vision,
                                        opts.eval_batch, ProbeLayer{});
  const double fe_vis_gap = map_at(gaps.vision_gap_by_regime, "FE", 1e9);
  const double ve_vis_gap = map_at(gaps.vision_gap_by_regime, "VE", 1e9);
  const double ve_lang_gap = map_at(gaps.language_gap_by_regime, "VE", -1.0);
  {
    CriterionResult c;
    c.id = 3;
    c.name = "two-gap split: perception stays calibrated, readout drifts";
    c.pass = fe_vis_gap <= 0.5 && ve_lang_gap >= ve_vis_gap + 3.0;
    c.details = "FE vision gap " + fmt("%.3f", fe_vis_gap) + ", VE vision gap " +
                fmt("%.3f", ve_vis_gap) + ", VE language gap " + fmt("%.3f", ve_lang_gap);
    report.criteria.push_back(c);
  }
  extra["gaps"] = {{"probe_heldout", probe.heldout_accuracy},
                   {"fe_vision_gap", fe_vis_gap},
                   {"ve_vision_gap", ve_vis_gap},
                   {"ve_language_gap", ve_lang_gap},
                   {"id_vision_gap", map_at(gaps.vision_gap_by_regime, "ID", 0.0)},
                   {"id_language_gap", map_at(gaps.language_gap_by_regime, "ID", 0.0)},
                   {"fe_language_gap", map_at(gaps.language_gap_by_regime, "FE", 0.0)}};
  figure_gaps((fig_dir / "gaps_by_n.svg").string(), gaps);
  {
    std::vector<std::string> rows;
    for (const auto& [n, g] : gaps.vision_gap_by_n) {
      std::ostringstream r;
      r << n << "," << fmt("%.6f", g) << ",";
      if (gaps.language_gap_by_n.count(n)) r << fmt("%.6f", gaps.language_gap_by_n.at(n));
      rows.push_back(r.str());
    }
    write_csv(tab_dir / "gaps_by_n.csv", "n,vision_gap,language_gap", rows);
  }

  // ---------------------------------------------------------------- stage 7
  // Comparison lineage (fresh model), its evaluation, and layer probes.
  Vlm<float> cmp_model(mc);
  cmp_model.init_params(mix_seed(opts.seed, 101));
  {
    TrainConfig cfg;
    cfg.phase = "compare_text";
    cfg.epochs = epochs_ctext;
    cfg.batch_size = batch;
    cfg.seed = mix_seed(opts.seed, 203);
    cfg.preset = preset.name;
    cfg.n_max = preset.text_max;
    log_stage("phase compare_text: " + std::to_string(cfg.epochs) + " epochs x " +
              std::to_string((train_ctext.records.size() + batch - 1) / batch) + " steps");
    train_or_load(cmp_model, train_ctext, cfg, {});
  }
  {
    TrainConfig cfg;
    cfg.phase = "compare_vision";
    cfg.epochs = epochs_cvision;
    cfg.batch_size = batch;
    cfg.seed = mix_seed(opts.seed, 204);
    cfg.preset = preset.name;
    cfg.n_max = preset.vis_max;
    log_stage("phase compare_vision: " + std::to_string(cfg.epochs) + " epochs x " +
              std::to_string((train_cvision.records.size() + batch - 1) / batch) + " steps");
    train_or_load(cmp_model, train_cvision, cfg, {quick_em(cmp_quick, "compare_em_quick")});
  }

  log_stage("comparison evaluation");
  const std::vector<Prediction> preds_cmp =
      predict_manifest(cmp_model, preset, vocab, eval_cvision, opts.eval_batch);
  const RegimeMetrics m_cmp = score_predictions(preds_cmp);
  write_predictions(run / "predictions_compare_vision.jsonl", preds_cmp);
  double min_cmp_ve = 1.0;
  for (const auto& [n, acc] : m_cmp.per_n_accuracy)
    if (n > preset.vis_max && n <= preset.text_max) min_cmp_ve = std::min(min_cmp_ve, acc);

  log_stage("layer probes (token mode sweep + position-mode control)");
  std::vector<std::string> probe_rows;
  auto sweep_probe = [&](ProbeLayer layer, const std::string& label) {
    LayerProbeResult r = train_layer_probe_tokens(
        model, preset, vocab, probe_train, eval_ve,
        static_cast<int>(probe_train.records.size()), opts.eval_batch, layer);
    probe_rows.push_back(label + ",token," + fmt("%.6f", r.train_accuracy) + "," +
                         fmt("%.6f", r.eval_accuracy));
    return r;
  };
  double enc_final_acc = 0, dec_penult_acc = 0;
  for (int e = 0; e <= mc.enc_layers + 1; ++e) {
    LayerProbeResult r =
        sweep_probe(ProbeLayer{ProbeLayer::Stack::kEncoder, e}, "encoder_" + std::to_string(e));
    if (e == mc.enc_layers + 1) enc_final_acc = r.eval_accuracy;
  }
  for (int d = 0; d <= mc.dec_layers + 1; ++d) {
    LayerProbeResult r =
        sweep_probe(ProbeLayer{ProbeLayer::Stack::kDecoder, d}, "decoder_" + std::to_string(d));
    if (d == mc.dec_layers) dec_penult_acc = r.eval_accuracy;
  }
  const LayerProbeResult pos_ctrl = train_layer_probe_position(
      model, preset, vocab, probe_train, eval_ve, static_cast<int>(probe_train.records.size()),
      opts.eval_batch, mc.dec_layers);
  probe_rows.push_back("decoder_" + std::to_string(mc.dec_layers) + ",position," +
                       fmt("%.6f", pos_ctrl.train_accuracy) + "," +
                       fmt("%.6f", pos_ctrl.eval_accuracy));
  write_csv(tab_dir / "layer_probes.csv", "layer,mode,train_accuracy,eval_beyond_train_accuracy",
            probe_rows);
  {
    CriterionResult c;
    c.id = 4;
    c.name = "quantity is represented: comparison transfers, probes extrapolate";
    c.pass = min_cmp_ve >= 0.90 && ve_acc <= 0.05 && enc_final_acc >= 0.98 &&
             dec_penult_acc >= 0.98;
    c.details = "compare vision-text min per-N (beyond visual training range) " +
                fmt("%.4f", min_cmp_ve) + " while counting VE " + fmt("%.4f", ve_acc) +
                "; probe count accuracy enc-final " + fmt("%.4f", enc_final_acc) +
                ", dec-penultimate " + fmt("%.4f", dec_penult_acc) + ", position control " +
                fmt("%.4f", pos_ctrl.eval_accuracy);
    report.criteria.push_back(c);
  }
  extra["comparison"] = {{"min_ve_per_n", min_cmp_ve},
                         {"overall", m_cmp.overall_accuracy},
                         {"enc_final_probe", enc_final_acc},
                         {"dec_penultimate_probe", dec_penult_acc},
                         {"position_control", pos_ctrl.eval_accuracy}};
  figure_comparison_per_n((fig_dir / "comparison_per_n.svg").string(), preds_cmp, preds_vision,
                          preset.text_max);

  // ---------------------------------------------------------------- stage 8
  // Error topology on the visual-extrapolation slice.
  log_stage("error topology");
  std::vector<Prediction> preds_ve;
  for (const auto& p : preds_vision)
    if (p.regime == "VE") preds_ve.push_back(p);
  const AttractorHistogram hist = error_topology(preds_ve);
  double hist_sum = 0;
  for (const auto& [value, pct] : hist.entries) hist_sum += pct;
  std::set<std::string> attractors = {std::to_string(preset.vis_max),
                                      std::to_string(preset.text_max)};
  for (int d = 0; d <= 9; ++d) attractors.insert(std::to_string(d));
  long attracted = 0;
  for (const auto& p : preds_ve)
    if (attractors.count(p.parsed)) ++attracted;
  const double attractor_mass =
      preds_ve.empty() ? 0.0 : 100.0 * static_cast<double>(attracted) / preds_ve.size();
  {
    CriterionResult c;
    c.id = 5;
    c.name = "extrapolation errors collapse onto attractor values";
    c.pass = attractor_mass >= 50.0 && std::abs(hist_sum - 100.0) <= 0.01;
    c.details = fmt("%.1f", attractor_mass) +
                "% of VE predictions in {" + std::to_string(preset.vis_max) + ", " +
                std::to_string(preset.text_max) + ", single digits}; histogram sums to " +
                fmt("%.4f", hist_sum);
    report.criteria.push_back(c);
  }
  extra["error_topology"] = {{"attractor_mass_pct", attractor_mass},
                             {"histogram_sum", hist_sum},
                             {"ve_predictions", static_cast<long>(preds_ve.size())}};
  figure_attractors((fig_dir / "attractors.svg").string(), preds_ve);
  {
    std::vector<std::string> rows;
    for (const auto& [value, pct] : hist.entries)
      rows.push_back(value + "," + fmt("%.4f", pct));
    write_csv(tab_dir / "attractors.csv", "value,percent", rows);
  }

  // ---------------------------------------------------------------- stage 9
  // Steering: mask k probe-identified stones, expect N - k.
  log_stage("steering curve (k = 0..5)");
  const SteeringCurve curve =
      steering_curve(model, probe, preset, vocab, eval_id, 5,
                     static_cast<int>(eval_id.records.size()), opts.eval_batch,
                     mix_seed(opts.seed, 600));
  bool monotone_ok = true;
  for (int k = 1; k + 1 <= curve.k_max; ++k)
    if (curve.success_by_k[k + 1] > curve.success_by_k[k] + 0.02) monotone_ok = false;
  {
    CriterionResult c;
    c.id = 6;
    c.name = "counterfactual steering: masking k stones shifts the answer to N-k";
    const double k1 = curve.k_max >= 1 ? curve.success_by_k[1] : 0.0;
    c.pass = curve.k_max >= 5 && k1 >= 0.95 && monotone_ok && curve.eligible > 0;
    std::string s = "success by k:";
    for (int k = 0; k <= curve.k_max; ++k) s += " " + fmt("%.3f", curve.success_by_k[k]);
    c.details = s + " over " + std::to_string(curve.eligible) + " eligible boards (" +
                std::to_string(curve.skipped) + " skipped)";
    report.criteria.push_back(c);
  }
  extra["steering"] = {{"success_by_k", curve.success_by_k},
                       {"eligible", curve.eligible},
                       {"skipped", curve.skipped}};
  figure_steering((fig_dir / "steering.svg").string(), curve);
  {
    std::vector<std::string> rows;
    for (int k = 0; k <= curve.k_max; ++k)
      rows.push_back(std::to_string(k) + "," + fmt("%.6f", curve.success_by_k[k]) + "," +
                     std::to_string(curve.counts[k]));
    write_csv(tab_dir / "steering.csv", "k,success,count", rows);
  }

  // --------------------------------------------------------------- stage 10
  // Per-example critical head sets for both tasks, plus their overlap.
  log_stage("critical head sets: visual task");
  const CriticalSetBatch crit_vis = per_example_critical_sets(
      model, preset, vocab, eval_id, "visual", static_cast<int>(eval_id.records.size()),
      opts.eval_batch);
  log_stage("critical head sets: textual task");
  const DatasetManifest text_crit_slice = stride_records(eval_text, 3, "text_crit_slice");
  const CriticalSetBatch crit_txt = per_example_critical_sets(
      model, preset, vocab, text_crit_slice, "textual",
      static_cast<int>(text_crit_slice.records.size()), opts.eval_batch);
  const OverlapStats overlap = tally_overlap(crit_vis.sets, crit_txt.sets);
  {
    CriterionResult c;
    c.id = 7;
    c.name = "per-example critical head sets for both tasks, overlap reported";
    c.pass = crit_vis.sets.size() >= 500 && crit_txt.sets.size() >= 500 &&
             crit_vis.definition_check == 1.0 && crit_txt.definition_check == 1.0;
    c.details = std::to_string(crit_vis.sets.size()) + " visual / " +
                std::to_string(crit_txt.sets.size()) + " textual sets, definition check " +
                fmt("%.4f", crit_vis.definition_check) + " / " +
                fmt("%.4f", crit_txt.definition_check) + "; same circuit " +
                fmt("%.1f", overlap.same_pct) + "%, different " +
                fmt("%.1f", overlap.different_pct) + "%, mean Jaccard " +
                fmt("%.3f", overlap.mean_jaccard);
    report.criteria.push_back(c);
  }
  extra["critical_sets"] = {{"visual_sets", static_cast<long>(crit_vis.sets.size())},
                            {"textual_sets", static_cast<long>(crit_txt.sets.size())},
                            {"visual_skipped", crit_vis.skipped},
                            {"textual_skipped", crit_txt.skipped},
                            {"visual_definition_check", crit_vis.definition_check},
                            {"textual_definition_check", crit_txt.definition_check},
                            {"same_pct", overlap.same_pct},
                            {"different_pct", overlap.different_pct},
                            {"mean_jaccard", overlap.mean_jaccard},
                            {"pairs", overlap.pairs}};
  {
    std::map<std::string, long> vis_kinds, txt_kinds;
    for (const auto& s : crit_vis.sets) ++vis_kinds[pair_list(s.retained)];
    for (const auto& s : crit_txt.sets) ++txt_kinds[pair_list(s.retained)];
    std::vector<std::string> rows;
    for (const auto& [set, cnt] : vis_kinds)
      rows.push_back("visual," + set + "," + std::to_string(cnt));
    for (const auto& [set, cnt] : txt_kinds)
      rows.push_back("textual," + set + "," + std::to_string(cnt));
    rows.push_back("overlap,pairs," + std::to_string(overlap.pairs));
    rows.push_back("overlap,same_pct," + fmt("%.4f", overlap.same_pct));
    rows.push_back("overlap,different_pct," + fmt("%.4f", overlap.different_pct));
    rows.push_back("overlap,mean_jaccard," + fmt("%.6f", overlap.mean_jaccard));
    write_csv(tab_dir / "critical_sets.csv", "task,retained_set,count", rows);
  }
  figure_head_heatmap((fig_dir / "head_activation.svg").string(),
                      head_activation_heatmap(model, preset, vocab,
                                              stride_records(eval_id, 8, "heat_slice"), 128,
                                              opts.eval_batch));

  // --------------------------------------------------------------- stage 11
  // Mechanics hygiene: attention invariants, fixed-batch overfit, bitwise
  // deterministic re-runs.
  log_stage("mechanics hygiene");
  double max_rowsum_dev = 0;
  bool masked_zero = true;
  {
    std::vector<AssembledSeq> seqs;
    for (int i = 0; i < 8 && i < static_cast<int>(eval_id.records.size()); ++i)
      seqs.push_back(assemble_record(preset, eval_id.records[i], vocab));
    SeqBatch sb = make_batch(seqs, preset, true);
    MaskDirectives md;
    md.token_masks.assign(seqs.size(), {1, 5, 9});
    HiddenTrace<float> tr;
    Graph<float> g(false);
    model.build_forward(g, sb, &md, &tr);
    auto scan = [&](const AttnTrace<float>& at, bool masked_keys) {
      for (int b = 0; b < at.batch; ++b)
        for (int h = 0; h < at.heads; ++h) {
          const Mat<float>& P = at.probs[static_cast<size_t>(b) * at.heads + h];
          for (int i = 0; i < P.rows; ++i) {
            double sum = 0;
            for (int j = 0; j < P.cols; ++j) sum += P.at(i, j);
            max_rowsum_dev = std::max(max_rowsum_dev, std::abs(sum - 1.0));
            if (masked_keys)
              for (int j : {1, 5, 9})
                if (P.at(i, j) != 0.0f) masked_zero = false;
          }
        }
    };
    for (const auto& at : tr.encoder_attn) scan(at, false);
    for (const auto& at : tr.decoder_attn) scan(at, true);
  }

  const DatasetManifest overfit_slice =
      stride_records(train_vision, train_vision.records.size() / 16, "overfit_slice");
  std::vector<ManifestRecord> overfit_recs(overfit_slice.records.begin(),
                                           overfit_slice.records.begin() +
                                               std::min<size_t>(16, overfit_slice.records.size()));
  const double overfit_loss =
      overfit_fixed_batch(preset, vocab, overfit_recs, 200, mix_seed(opts.seed, 801));
  log_stage("overfit loss after 200 steps: " + fmt("%.5f", overfit_loss));

  bool deterministic = true;
  {
    const DatasetManifest det_slice = stride_records(train_vision, 120, "det_slice");
    TrainConfig cfg;
    cfg.phase = "vision_align";
    cfg.epochs = 1;
    cfg.batch_size = 32;
    cfg.seed = mix_seed(opts.seed, 802);
    cfg.preset = preset.name;
    cfg.n_max = preset.vis_max;
    std::vector<std::string> metrics, ckpts;
    for (const char* tag : {"det_a", "det_b"}) {
      Vlm<float> m(mc);
      m.init_params(mix_seed(opts.seed, 803));
      PhaseResult pr =
          run_training_phase(m, preset, vocab, det_slice, cfg, (run / tag).string(), {});
      metrics.push_back(read_bytes(pr.metrics_path));
      ckpts.push_back(read_bytes(pr.checkpoint_path));
    }
    deterministic = metrics[0] == metrics[1] && ckpts[0] == ckpts[1] && !metrics[0].empty();
  }
  {
    CriterionResult c;
    c.id = 8;
    c.name = "mechanics: attention invariants, fixed-batch overfit, bitwise replay";
    c.pass = max_rowsum_dev <= 1e-5 && masked_zero && overfit_loss < 0.05 && deterministic;
    c.details = "max row-sum deviation " + fmt("%.2e", max_rowsum_dev) + ", masked keys " +
                (masked_zero ? "exactly zero" : "NONZERO") + ", overfit loss " +
                fmt("%.4f", overfit_loss) + ", re-run logs " +
                (deterministic ? "identical" : "DIVERGED");
    report.criteria.push_back(c);
  }
  extra["mechanics"] = {{"max_rowsum_dev", max_rowsum_dev},
                        {"masked_zero", masked_zero},
                        {"overfit_loss", overfit_loss},
                        {"deterministic", deterministic}};

  // --------------------------------------------------------------- stage 12
  report.minutes = seconds_since(t0) / 60.0;
  {
    json j;
    j["run_dir"] = report.run_dir;
    j["minutes"] = report.minutes;
    j["all_pass"] = report.all_pass();
    j["criteria"] = json::array();
    for (const auto& c : report.criteria)
      j["criteria"].push_back(
          {{"id", c.id}, {"name", c.name}, {"pass", c.pass}, {"details", c.details}});
    j["metrics"] = extra;
    std::ofstream f(run / "report.json");
    f << j.dump(2) << "\n";
  }
  for (const auto& c : report.criteria)
    log_stage("criterion " + std::to_string(c.id) + (c.pass ? " PASS  " : " FAIL  ") + c.details);
  log_stage("done in " + fmt("%.1f", report.minutes) + " min");
  return report;
}

}  // namespace countlab
