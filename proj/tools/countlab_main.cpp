// Command-line front end for the counting laboratory: dataset generation,
// phase training, evaluation, probing, interventions, figures, and the full
// deterministic pipeline. Exit codes: 0 success, 1 runtime failure (or failed
// pipeline criteria), 2 usage error.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <unistd.h>

#include "CLI11.hpp"
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
#include "pipeline/reproduce.hpp"
#include "plots/figures.hpp"
#include "plots/svg.hpp"
#include "probelab/probelab.hpp"
#include "tokenizer/vocab.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace countlab;

namespace {

// Exclusive marker held while a command mutates a run directory. Removed on
// scope exit; --force breaks a stale lock.
class RunLock {
 public:
  RunLock(const fs::path& run_dir, bool force) : path_(run_dir / ".lock") {
    fs::create_directories(run_dir);
    if (fs::exists(path_)) {
      if (!force)
        throw std::runtime_error("run dir is locked (" + path_.string() +
                                 "); pass --force if the previous run is dead");
      fs::remove(path_);
    }
    std::ofstream f(path_);
    f << ::getpid() << "\n";
    held_ = true;
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }

 private:
  fs::path path_;
  bool held_ = false;
};

struct Common {
  std::string run_dir;
  std::string config_path;
  std::string preset_name = "desk";
  uint64_t seed = 42;
  bool force = false;
};

void add_common(CLI::App* sub, Common& c, bool run_dir_required = true) {
  auto* rd = sub->add_option("--run-dir", c.run_dir, "working directory for artifacts");
  if (run_dir_required) rd->required();
  sub->add_option("--config", c.config_path,
                  "config file ([run]/[epochs] sections); explicit flags win");
  sub->add_option("--preset", c.preset_name, "scale preset")
      ->check(CLI::IsMember({"paper", "desk"}));
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_flag("--force", c.force, "break stale locks / overwrite existing outputs");
}

// Config file values fill in flags the user did not pass, then the merged
// config is echoed into the run dir for provenance.
Config merge_config(CLI::App* sub, Common& c) {
  Config cfg;
  if (!c.config_path.empty()) cfg = Config::parse_file(c.config_path);
  if (!sub->count("--preset") && cfg.has("run.preset")) c.preset_name = cfg.get_str("run.preset");
  if (!sub->count("--seed") && cfg.has("run.seed"))
    c.seed = static_cast<uint64_t>(cfg.get_int("run.seed"));
  if (!c.run_dir.empty() && !c.config_path.empty()) {
    fs::create_directories(c.run_dir);
    cfg.write_file((fs::path(c.run_dir) / "config_echo.ini").string());
  }
  return cfg;
}

GenPreset preset_of(const Common& c) {
  return c.preset_name == "paper" ? GenPreset::paper() : GenPreset::desk();
}

Vlm<float> load_model(const std::string& path, const Vocab& vocab) {
  LoadedCheckpoint lc = load_checkpoint(path);
  if (lc.vocab_checksum != vocab.checksum())
    throw std::runtime_error("checkpoint " + path + " was trained against a different vocabulary");
  return lc.model;
}

std::vector<Prediction> load_predictions(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read predictions " + path);
  std::vector<Prediction> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    Prediction p;
    p.record_id = j.at("record_id").get<std::string>();
    p.regime = j.at("regime").get<std::string>();
    p.n_target = j.at("n_target").get<int>();
    p.raw_output = j.at("raw_output").get<std::string>();
    p.parsed = j.at("parsed").get<std::string>();
    p.expected = j.at("expected").get<std::string>();
    p.truncated = j.at("truncated").get<bool>();
    p.correct = j.at("correct").get<bool>();
    out.push_back(std::move(p));
  }
  return out;
}

void write_predictions_file(const fs::path& path, const std::vector<Prediction>& preds) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path.string());
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

json metrics_to_json(const RegimeMetrics& m) {
  json j;
  j["overall_accuracy"] = m.overall_accuracy;
  j["truncation_rate"] = m.truncation_rate;
  j["total"] = m.total;
  j["per_regime"] = json::object();
  for (const auto& [r, acc] : m.regime_accuracy)
    j["per_regime"][r] = {{"accuracy", acc}, {"count", m.regime_count.at(r)}};
  j["per_n"] = json::array();
  for (const auto& [n, acc] : m.per_n_accuracy)
    j["per_n"].push_back({{"n", n}, {"accuracy", acc}, {"count", m.per_n_count.at(n)}});
  return j;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  return rows;
}

ProbeLayer parse_probe_layer(const std::string& stack, int index) {
  ProbeLayer layer;
  layer.stack = stack == "decoder" ? ProbeLayer::Stack::kDecoder : ProbeLayer::Stack::kEncoder;
  layer.index = index;
  return layer;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"countlab: a controlled laboratory for the visual counting bottleneck"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "countlab 1.0.0");
  int exit_status = 0;

  // ------------------------------------------------------------- gen-data
  auto* gen = app.add_subcommand("gen-data", "build a dataset (images + JSONL manifest)");
  static Common gen_c;
  static std::string gen_name, gen_kind;
  static int gen_lo = 0, gen_hi = -1, gen_per = -1;
  add_common(gen, gen_c);
  gen->add_option("--name", gen_name, "manifest stem / image subdirectory")->required();
  gen->add_option("--kind", gen_kind, "sample kind")
      ->required()
      ->check(CLI::IsMember({"counting_text", "counting_vision", "compare_text",
                             "compare_vision"}));
  gen->add_option("--n-lo", gen_lo, "lowest target count");
  gen->add_option("--n-hi", gen_hi, "highest target count (default: preset regime bound)");
  gen->add_option("--per-class", gen_per, "records per target count");
  gen->callback([&]() {
    merge_config(gen, gen_c);
    const GenPreset preset = preset_of(gen_c);
    RunLock lock(gen_c.run_dir, gen_c.force);
    const fs::path data_dir = fs::path(gen_c.run_dir) / "data";
    const std::string mpath = manifest_path(data_dir.string(), gen_name);
    if (fs::exists(mpath) && !gen_c.force)
      throw std::runtime_error("manifest exists: " + mpath + " (pass --force to rebuild)");
    DatasetRequest req;
    req.name = gen_name;
    req.kind = gen_kind;
    req.n_lo = gen_lo;
    const bool visual = gen_kind == "counting_vision" || gen_kind == "compare_vision";
    req.n_hi = gen_hi >= 0 ? gen_hi : (visual ? preset.vis_max : preset.text_max);
    req.per_class = gen_per > 0 ? gen_per : preset.train_per_class;
    req.seed = gen_c.seed;
    const DatasetManifest m = build_dataset(preset, req, data_dir.string());
    std::cout << "wrote " << m.records.size() << " records to " << mpath << "\n";
  });

  // ---------------------------------------------------------------- train
  auto* train = app.add_subcommand("train", "run one training phase");
  static Common train_c;
  static std::string train_phase, train_data, train_init;
  static int train_epochs = 10, train_batch = 0;
  static double train_lr = 1e-3, train_lr_dec = 1e-5;
  add_common(train, train_c);
  train->add_option("--phase", train_phase, "curriculum phase")
      ->required()
      ->check(CLI::IsMember({"text_pretrain", "vision_align", "compare_text",
                             "compare_vision"}));
  train->add_option("--data", train_data, "training manifest (JSONL)")->required();
  train->add_option("--epochs", train_epochs, "epochs");
  train->add_option("--batch", train_batch, "batch size (default: preset)");
  train->add_option("--init-from", train_init, "checkpoint to continue from (default: fresh)");
  train->add_option("--lr-main", train_lr, "learning rate for unfrozen groups");
  train->add_option("--lr-decoder", train_lr_dec, "decoder learning rate in alignment phases");
  train->callback([&]() {
    Config cfg_file = merge_config(train, train_c);
    if (!train->count("--epochs") && cfg_file.has("epochs." + train_phase))
      train_epochs = static_cast<int>(cfg_file.get_int("epochs." + train_phase));
    const GenPreset preset = preset_of(train_c);
    RunLock lock(train_c.run_dir, train_c.force);
    const fs::path metrics = fs::path(train_c.run_dir) / ("metrics_" + train_phase + ".jsonl");
    if (fs::exists(metrics) && !train_c.force)
      throw std::runtime_error("phase already trained here: " + metrics.string() +
                               " (pass --force to retrain)");
    const Vocab vocab = Vocab::build(vocab_corpus(preset), true);
    const DatasetManifest data = load_manifest(train_data);
    Vlm<float> model = train_init.empty()
                           ? Vlm<float>(model_config_for(preset, vocab))
                           : load_model(train_init, vocab);
    if (train_init.empty()) model.init_params(mix_seed(train_c.seed, 100));
    TrainConfig cfg;
    cfg.phase = train_phase;
    cfg.epochs = train_epochs;
    cfg.batch_size = train_batch > 0 ? train_batch : preset.batch_size;
    cfg.lr_main = train_lr;
    cfg.lr_decoder_phase2 = train_lr_dec;
    cfg.seed = mix_seed(train_c.seed, 201);
    cfg.preset = preset.name;
    cfg.n_max = (train_phase == "vision_align" || train_phase == "compare_vision")
                    ? preset.vis_max
                    : preset.text_max;
    const PhaseResult res =
        run_training_phase(model, preset, vocab, data, cfg, train_c.run_dir, {});
    std::cout << "final loss " << res.final_loss << "\ncheckpoint " << res.checkpoint_path
              << "\nmetrics " << res.metrics_path << "\n";
  });

  // ----------------------------------------------------------------- eval
  auto* ev = app.add_subcommand("eval", "greedy predictions + exact-match metrics");
  static Common ev_c;
  static std::string ev_ckpt, ev_data, ev_name;
  static int ev_batch = 128, ev_max_new = 8;
  add_common(ev, ev_c);
  ev->add_option("--checkpoint", ev_ckpt, "model checkpoint")->required();
  ev->add_option("--data", ev_data, "evaluation manifest")->required();
  ev->add_option("--name", ev_name, "output stem (default: manifest name)");
  ev->add_option("--batch", ev_batch, "decoding batch size");
  ev->add_option("--max-new", ev_max_new, "generation budget per sample");
  ev->callback([&]() {
    merge_config(ev, ev_c);
    const GenPreset preset = preset_of(ev_c);
    RunLock lock(ev_c.run_dir, ev_c.force);
    const Vocab vocab = Vocab::build(vocab_corpus(preset), true);
    const DatasetManifest data = load_manifest(ev_data);
    const Vlm<float> model = load_model(ev_ckpt, vocab);
    const std::string stem = ev_name.empty() ? data.name : ev_name;
    const auto preds = predict_manifest(model, preset, vocab, data, ev_batch, ev_max_new);
    const RegimeMetrics m = score_predictions(preds);
    write_predictions_file(fs::path(ev_c.run_dir) / ("predictions_" + stem + ".jsonl"), preds);
    std::ofstream mf(fs::path(ev_c.run_dir) / ("metrics_" + stem + ".json"));
    mf << metrics_to_json(m).dump(2) << "\n";
    std::cout << "overall " << m.overall_accuracy << ", truncation " << m.truncation_rate
              << "\n";
    for (const auto& [r, acc] : m.regime_accuracy)
      std::cout << "  " << r << " " << acc << " (" << m.regime_count.at(r) << " samples)\n";
  });

  // ---------------------------------------------------------------- probe
  auto* pr = app.add_subcommand("probe",
                                "train a per-cell detection probe / report the two gaps");
  static Common pr_c;
  static std::string pr_ckpt, pr_data, pr_out, pr_file, pr_report_data, pr_report_preds;
  static std::string pr_stack = "encoder";
  static int pr_index = -1, pr_batch = 128, pr_max_samples = 0;
  add_common(pr, pr_c);
  pr->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
  pr->add_option("--data", pr_data, "in-distribution training manifest");
  pr->add_option("--out", pr_out, "probe output path (default: <run>/probe.json)");
  pr->add_option("--probe-file", pr_file, "reuse an existing probe instead of training");
  pr->add_option("--stack", pr_stack, "activation stack")
      ->check(CLI::IsMember({"encoder", "decoder"}));
  pr->add_option("--layer-index", pr_index, "trace entry (-1 = last)");
  pr->add_option("--batch", pr_batch, "forward batch size");
  pr->add_option("--max-samples", pr_max_samples, "cap on probe boards (0 = all)");
  pr->add_option("--report-data", pr_report_data, "manifest for the gap report");
  pr->add_option("--report-predictions", pr_report_preds,
                 "predictions JSONL aligned with --report-data");
  pr->callback([&]() {
    merge_config(pr, pr_c);
    const GenPreset preset = preset_of(pr_c);
    RunLock lock(pr_c.run_dir, pr_c.force);
    const Vocab vocab = Vocab::build(vocab_corpus(preset), true);
    const Vlm<float> model = load_model(pr_ckpt, vocab);
    const ProbeLayer layer = parse_probe_layer(pr_stack, pr_index);
    TokenProbe probe;
    if (!pr_file.empty()) {
      std::ifstream f(pr_file);
      std::stringstream ss;
      ss << f.rdbuf();
      probe = probe_from_json(ss.str(), model_param_checksum(model.params));
      std::cout << "loaded probe (held-out accuracy " << probe.heldout_accuracy << ")\n";
    } else {
      if (pr_data.empty()) throw std::runtime_error("probe: --data required to train");
      const DatasetManifest data = load_manifest(pr_data);
      const int cap = pr_max_samples > 0 ? pr_max_samples : static_cast<int>(data.records.size());
      const TokenLabelSet labels =
          collect_token_labels(model, preset, vocab, data, cap, pr_batch, layer);
      probe = train_token_probe(labels);
      const std::string out =
          pr_out.empty() ? (fs::path(pr_c.run_dir) / "probe.json").string() : pr_out;
      write_text_file(out, probe_to_json(probe, model_param_checksum(model.params)));
      std::cout << "trained on " << labels.samples << " boards (" << labels.positives
                << " positive cells), held-out accuracy " << probe.heldout_accuracy
                << "\nwrote " << out << "\n";
    }
    if (!pr_report_data.empty()) {
      if (pr_report_preds.empty())
        throw std::runtime_error("probe: --report-predictions required with --report-data");
      const DatasetManifest rdata = load_manifest(pr_report_data);
      const auto preds = load_predictions(pr_report_preds);
      const ProbeReport rep =
          probe_report(model, probe, preset, vocab, rdata, preds, pr_batch, layer);
      const fs::path figd = fs::path(pr_c.run_dir) / "figures";
      const fs::path tabd = fs::path(pr_c.run_dir) / "tables";
      fs::create_directories(figd);
      fs::create_directories(tabd);
      figure_gaps((figd / "gaps_by_n.svg").string(), rep);
      std::ofstream csv(tabd / "gaps_by_n.csv");
      csv << "n,vision_gap,language_gap\n";
      for (const auto& [n, g] : rep.vision_gap_by_n) {
        csv << n << "," << g << ",";
        if (rep.language_gap_by_n.count(n)) csv << rep.language_gap_by_n.at(n);
        csv << "\n";
      }
      for (const auto& [r, g] : rep.vision_gap_by_regime)
        std::cout << r << ": vision gap " << g << ", language gap "
                  << (rep.language_gap_by_regime.count(r) ? rep.language_gap_by_regime.at(r)
                                                          : 0.0)
                  << "\n";
    }
  });

  // ------------------------------------------------------------- intervene
  auto* iv = app.add_subcommand("intervene", "stone-masking steering curve");
  static Common iv_c;
  static std::string iv_ckpt, iv_probe, iv_data;
  static int iv_kmax = 5, iv_batch = 128, iv_max = 0;
  add_common(iv, iv_c);
  iv->add_option("--checkpoint", iv_ckpt, "model checkpoint")->required();
  iv->add_option("--probe", iv_probe, "probe JSON trained against this checkpoint")->required();
  iv->add_option("--data", iv_data, "in-distribution board manifest")->required();
  iv->add_option("--k-max", iv_kmax, "largest masking level");
  iv->add_option("--batch", iv_batch, "decoding batch size");
  iv->add_option("--max-examples", iv_max, "cap on boards (0 = all)");
  iv->callback([&]() {
    merge_config(iv, iv_c);
    const GenPreset preset = preset_of(iv_c);
    RunLock lock(iv_c.run_dir, iv_c.force);
    const Vocab vocab = Vocab::build(vocab_corpus(preset), true);
    const Vlm<float> model = load_model(iv_ckpt, vocab);
    std::ifstream f(iv_probe);
    std::stringstream ss;
    ss << f.rdbuf();
    const TokenProbe probe = probe_from_json(ss.str(), model_param_checksum(model.params));
    const DatasetManifest data = load_manifest(iv_data);
    const int cap = iv_max > 0 ? iv_max : static_cast<int>(data.records.size());
    const SteeringCurve curve = steering_curve(model, probe, preset, vocab, data, iv_kmax, cap,
                                               iv_batch, mix_seed(iv_c.seed, 600));
    const fs::path figd = fs::path(iv_c.run_dir) / "figures";
    const fs::path tabd = fs::path(iv_c.run_dir) / "tables";
    fs::create_directories(figd);
    fs::create_directories(tabd);
    figure_steering((figd / "steering.svg").string(), curve);
    std::ofstream csv(tabd / "steering.csv");
    csv << "k,success,count\n";
    for (int k = 0; k <= curve.k_max; ++k)
      csv << k << "," << curve.success_by_k[k] << "," << curve.counts[k] << "\n";
    std::cout << "eligible " << curve.eligible << ", skipped " << curve.skipped << "\n";
    for (int k = 0; k <= curve.k_max; ++k)
      std::cout << "  k=" << k << " success " << curve.success_by_k[k] << "\n";
  });

  // ----------------------------------------------------------- prune-heads
  auto* ph = app.add_subcommand("prune-heads", "per-example critical attention-head sets");
  static Common ph_c;
  static std::string ph_ckpt, ph_data, ph_task = "visual", ph_data2, ph_task2;
  static int ph_batch = 128, ph_max = 0;
  add_common(ph, ph_c);
  ph->add_option("--checkpoint", ph_ckpt, "model checkpoint")->required();
  ph->add_option("--data", ph_data, "evaluation manifest")->required();
  ph->add_option("--task", ph_task, "task tag for the sets")
      ->check(CLI::IsMember({"visual", "textual"}));
  ph->add_option("--data2", ph_data2, "second manifest for an overlap tally");
  ph->add_option("--task2", ph_task2, "task tag for --data2")
      ->check(CLI::IsMember({"visual", "textual"}));
  ph->add_option("--batch", ph_batch, "decoding batch size");
  ph->add_option("--max-examples", ph_max, "cap on examples (0 = all)");
  ph->callback([&]() {
    merge_config(ph, ph_c);
    const GenPreset preset = preset_of(ph_c);
    RunLock lock(ph_c.run_dir, ph_c.force);
    const Vocab vocab = Vocab::build(vocab_corpus(preset), true);
    const Vlm<float> model = load_model(ph_ckpt, vocab);
    auto run_task = [&](const std::string& mpath, const std::string& task) {
      const DatasetManifest data = load_manifest(mpath);
      const int cap = ph_max > 0 ? ph_max : static_cast<int>(data.records.size());
      const CriticalSetBatch batch =
          per_example_critical_sets(model, preset, vocab, data, task, cap, ph_batch);
      std::cout << task << ": " << batch.sets.size() << " sets (" << batch.skipped
                << " skipped), definition check " << batch.definition_check << "\n";
      return batch;
    };
    const CriticalSetBatch a = run_task(ph_data, ph_task);
    const fs::path tabd = fs::path(ph_c.run_dir) / "tables";
    fs::create_directories(tabd);
    std::ofstream csv(tabd / "critical_sets.csv");
    csv << "task,record_id,retained,masked\n";
    auto dump = [&](const CriticalSetBatch& b, const std::string& task) {
      for (const auto& s : b.sets) {
        auto fmt_set = [](const std::vector<std::pair<int, int>>& v) {
          std::string out;
          for (size_t i = 0; i < v.size(); ++i) {
            if (i) out += " ";
            out += "L" + std::to_string(v[i].first) + "H" + std::to_string(v[i].second);
          }
          return out;
        };
        csv << task << "," << s.record_id << "," << fmt_set(s.retained) << ","
            << fmt_set(s.masked) << "\n";
      }
    };
    dump(a, ph_task);
    if (!ph_data2.empty()) {
      if (ph_task2.empty()) throw std::runtime_error("prune-heads: --task2 required with --data2");
      const CriticalSetBatch b = run_task(ph_data2, ph_task2);
      dump(b, ph_task2);
      const OverlapStats o = tally_overlap(a.sets, b.sets);
      std::cout << "overlap over " << o.pairs << " pairs: same " << o.same_pct
                << "%, different " << o.different_pct << "%, mean Jaccard " << o.mean_jaccard
                << "\n";
    }
  });

  // ------------------------------------------------------------- topology
  auto* tp = app.add_subcommand("topology", "attractor histogram over saved predictions");
  static Common tp_c;
  static std::string tp_preds, tp_regime = "VE";
  static double tp_min_pct = 0.5;
  add_common(tp, tp_c);
  tp->add_option("--predictions", tp_preds, "predictions JSONL")->required();
  tp->add_option("--regime", tp_regime, "regime filter (empty = all)");
  tp->add_option("--min-pct", tp_min_pct, "merge threshold for the Others bucket");
  tp->callback([&]() {
    merge_config(tp, tp_c);
    RunLock lock(tp_c.run_dir, tp_c.force);
    std::vector<Prediction> preds = load_predictions(tp_preds);
    if (!tp_regime.empty()) {
      std::vector<Prediction> kept;
      for (auto& p : preds)
        if (p.regime == tp_regime) kept.push_back(std::move(p));
      preds = std::move(kept);
    }
    if (preds.empty()) throw std::runtime_error("topology: no predictions after filtering");
    const AttractorHistogram hist = error_topology(preds, tp_min_pct);
    const fs::path figd = fs::path(tp_c.run_dir) / "figures";
    const fs::path tabd = fs::path(tp_c.run_dir) / "tables";
    fs::create_directories(figd);
    fs::create_directories(tabd);
    figure_attractors((figd / "attractors.svg").string(), preds);
    std::ofstream csv(tabd / "attractors.csv");
    csv << "value,percent\n";
    for (const auto& [value, pct] : hist.entries) {
      csv << value << "," << pct << "\n";
      std::cout << "  " << value << "  " << pct << "%\n";
    }
  });

  // ----------------------------------------------------------------- plot
  auto* pl = app.add_subcommand("plot", "regenerate figures from run-dir artifacts");
  static Common pl_c;
  static std::string pl_figure = "all";
  add_common(pl, pl_c);
  pl->add_option("--figure", pl_figure, "one of counting, mean, attractors, comparison, gaps, "
                                        "steering (default all available)")
      ->check(CLI::IsMember({"all", "counting", "mean", "attractors", "comparison", "gaps",
                             "steering"}));
  pl->callback([&]() {
    merge_config(pl, pl_c);
    const GenPreset preset = preset_of(pl_c);
    RunLock lock(pl_c.run_dir, pl_c.force);
    const fs::path run = pl_c.run_dir;
    const fs::path figd = run / "figures";
    fs::create_directories(figd);
    int made = 0;
    auto want = [&](const std::string& name) {
      return pl_figure == "all" || pl_figure == name;
    };
    const fs::path ptext = run / "predictions_text.jsonl";
    const fs::path pvis = run / "predictions_vision.jsonl";
    const fs::path pcmp = run / "predictions_compare_vision.jsonl";
    if (want("counting") && fs::exists(ptext) && fs::exists(pvis)) {
      figure_counting_per_n((figd / "counting_per_n.svg").string(),
                            load_predictions(ptext.string()), load_predictions(pvis.string()));
      ++made;
    }
    if (want("mean") && fs::exists(pvis)) {
      figure_mean_prediction((figd / "mean_prediction.svg").string(),
                             load_predictions(pvis.string()));
      ++made;
    }
    if (want("attractors") && fs::exists(pvis)) {
      std::vector<Prediction> ve;
      for (auto& p : load_predictions(pvis.string()))
        if (p.regime == "VE") ve.push_back(std::move(p));
      if (!ve.empty()) {
        figure_attractors((figd / "attractors.svg").string(), ve);
        ++made;
      }
    }
    if (want("comparison") && fs::exists(pcmp) && fs::exists(pvis)) {
      figure_comparison_per_n((figd / "comparison_per_n.svg").string(),
                              load_predictions(pcmp.string()), load_predictions(pvis.string()),
                              preset.text_max);
      ++made;
    }
    auto replot_csv = [&](const std::string& name, const fs::path& csv_path,
                          const std::string& title, const std::string& xl,
                          const std::string& yl) {
      if (!want(name) || !fs::exists(csv_path)) return;
      const auto rows = read_csv(csv_path);
      if (rows.size() < 2) return;
      std::vector<Series> series;
      for (size_t col = 1; col < rows[0].size(); ++col) {
        Series s{rows[0][col], {}, {}};
        for (size_t r = 1; r < rows.size(); ++r) {
          if (col >= rows[r].size() || rows[r][col].empty()) continue;
          s.x.push_back(std::stod(rows[r][0]));
          s.y.push_back(std::stod(rows[r][col]));
        }
        if (!s.x.empty()) series.push_back(std::move(s));
      }
      write_text_file((figd / (name + ".svg")).string(),
                      svg_line_chart(title, xl, yl, series));
      ++made;
    };
    replot_csv("gaps", run / "tables" / "gaps_by_n.csv",
               "Vision and language gaps by target count", "N", "mean absolute gap");
    replot_csv("steering", run / "tables" / "steering.csv", "Stone-masking steering success",
               "masked stones k", "success");
    if (made == 0)
      throw std::runtime_error("plot: no matching artifacts under " + pl_c.run_dir);
    std::cout << "wrote " << made << " figure(s) to " << figd.string() << "\n";
  });

  // ------------------------------------------------------------ reproduce
  auto* rp = app.add_subcommand("reproduce", "full deterministic pipeline + criteria report");
  static Common rp_c;
  static ReproduceOptions rp_opts;
  add_common(rp, rp_c);
  rp->add_option("--epochs-text", rp_opts.epochs_text, "text pretrain epochs (0 = default)");
  rp->add_option("--epochs-vision", rp_opts.epochs_vision, "vision alignment epochs");
  rp->add_option("--epochs-compare-text", rp_opts.epochs_compare_text,
                 "comparison pretrain epochs");
  rp->add_option("--epochs-compare-vision", rp_opts.epochs_compare_vision,
                 "comparison alignment epochs");
  rp->add_option("--batch", rp_opts.batch_size, "training batch size (0 = preset)");
  rp->add_option("--eval-batch", rp_opts.eval_batch, "decoding batch size");
  rp->add_option("--audit-boards", rp_opts.audit_boards, "generator audit sample size");
  rp->add_flag("--reuse-checkpoints", rp_opts.reuse_checkpoints,
               "reuse checkpoints already in the run dir");
  rp->callback([&]() {
    Config cfg_file = merge_config(rp, rp_c);
    auto fill = [&](const char* flag, const char* key, int& slot) {
      if (!rp->count(flag) && cfg_file.has(key)) slot = static_cast<int>(cfg_file.get_int(key));
    };
    fill("--epochs-text", "epochs.text_pretrain", rp_opts.epochs_text);
    fill("--epochs-vision", "epochs.vision_align", rp_opts.epochs_vision);
    fill("--epochs-compare-text", "epochs.compare_text", rp_opts.epochs_compare_text);
    fill("--epochs-compare-vision", "epochs.compare_vision", rp_opts.epochs_compare_vision);
    const fs::path run = rp_c.run_dir;
    if (fs::exists(run) && !fs::is_empty(run) && !rp_c.force && !rp_opts.reuse_checkpoints)
      throw std::runtime_error("run dir not empty: " + run.string() +
                               " (use --force to overwrite or --reuse-checkpoints)");
    RunLock lock(run, rp_c.force);
    rp_opts.run_dir = rp_c.run_dir;
    rp_opts.preset = rp_c.preset_name;
    rp_opts.seed = rp_c.seed;
    const ReproduceReport rep = run_reproduce(rp_opts);
    for (const auto& c : rep.criteria)
      std::cout << "criterion " << c.id << ": " << (c.pass ? "PASS" : "FAIL") << " — " << c.name
                << " (" << c.details << ")\n";
    if (!rep.all_pass()) exit_status = 1;
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return exit_status;
}
