#include "curriculum/trainer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

#include "core/graph.hpp"
#include "core/rng.hpp"
#include "model/sequence.hpp"

namespace countlab {

namespace fs = std::filesystem;
using nlohmann::json;

void Adam::step(ParamStore<float>& params,
                const std::vector<std::pair<std::string, const Mat<float>*>>& grads,
                const std::function<double(const std::string&)>& lr_of) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& [name, g] : grads) {
    Mat<float>& p = params.at(name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() == 0) {
      m = Mat<float>(p.rows, p.cols);
      v = Mat<float>(p.rows, p.cols);
    }
    const float lr = static_cast<float>(lr_of(name));
    for (size_t i = 0; i < p.size(); ++i) {
      const float gi = g->data[i];
      m.data[i] = static_cast<float>(beta1_) * m.data[i] + static_cast<float>(1 - beta1_) * gi;
      v.data[i] = static_cast<float>(beta2_) * v.data[i] + static_cast<float>(1 - beta2_) * gi * gi;
      const float mhat = m.data[i] / static_cast<float>(bc1);
      const float vhat = v.data[i] / static_cast<float>(bc2);
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + static_cast<float>(eps_));
    }
  }
}

void check_comparison_balance(const DatasetManifest& data) {
  long pos = 0, neg = 0;
  for (const auto& r : data.records) {
    if (r.answer == "True")
      ++pos;
    else if (r.answer == "False")
      ++neg;
    else
      throw std::runtime_error("comparison balance: non-boolean answer in " + r.id);
  }
  const double total = static_cast<double>(pos + neg);
  if (total == 0) throw std::runtime_error("comparison balance: empty dataset");
  if (std::abs(pos / total - 0.5) > 0.01)
    throw std::runtime_error("comparison balance: positive fraction " +
                             std::to_string(pos / total) + " departs from 1:1 by more than 1%");
}

namespace {

std::string metric_line(const std::string& phase, int epoch, long step, const std::string& split,
                        const std::string& metric, double value) {
  json j;
  j["phase"] = phase;
  j["epoch"] = epoch;
  j["step"] = step;
  j["split"] = split;
  j["metric"] = metric;
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.8g", value);
  j["value"] = json::parse(buf);
  return j.dump();
}

void firewall_scan(const std::vector<const ManifestRecord*>& batch, const TrainConfig& cfg,
                   const GenPreset& preset) {
  for (const auto* r : batch) {
    if (r->n_target > cfg.n_max)
      throw std::runtime_error("regime firewall: sample " + r->id + " has N_G " +
                               std::to_string(r->n_target) + " above phase bound " +
                               std::to_string(cfg.n_max));
    if (r->n_rhs > preset.text_max)
      throw std::runtime_error("regime firewall: sample " + r->id + " has partner count " +
                               std::to_string(r->n_rhs) + " above text bound");
  }
}

}  // namespace

PhaseResult run_training_phase(Vlm<float>& model, const GenPreset& preset, const Vocab& vocab,
                               const DatasetManifest& data, const TrainConfig& cfg,
                               const std::string& run_dir,
                               const std::vector<EpochEval>& epoch_evals) {
  if (data.records.empty()) throw std::runtime_error("train: empty dataset");
  if (cfg.n_max <= 0) throw std::runtime_error("train: firewall bound not set");
  if (data.kind == "compare_text" || data.kind == "compare_vision")
    check_comparison_balance(data);

  fs::create_directories(run_dir);
  PhaseResult res;
  res.metrics_path = (fs::path(run_dir) / ("metrics_" + cfg.phase + ".jsonl")).string();
  res.checkpoint_path = (fs::path(run_dir) / ("ckpt_" + cfg.phase + ".bin")).string();
  std::ofstream log(res.metrics_path);
  if (!log) throw std::runtime_error("train: cannot write " + res.metrics_path);

  Adam adam;
  auto lr_of = [&cfg](const std::string& name) {
    if (cfg.split_lr() && name.rfind("dec.", 0) == 0) return cfg.lr_decoder_phase2;
    return cfg.lr_main;
  };
  for (const char* group : {"encoder", "projector", "decoder"}) {
    const std::string probe_name =
        std::string(group) == "decoder" ? "dec.lm_head.w"
                                        : (std::string(group) == "projector" ? "proj.w"
                                                                             : "enc.patch.w");
    log << metric_line(cfg.phase, 0, 0, "config", std::string("lr.") + group, lr_of(probe_name))
        << "\n";
  }

  std::vector<int> order(data.records.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  long step = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng shuffle_rng(mix_seed(cfg.seed, static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0;
    long epoch_batches = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<const ManifestRecord*> recs;
      std::vector<AssembledSeq> seqs;
      for (size_t i = start; i < end; ++i) {
        recs.push_back(&data.records[order[i]]);
        seqs.push_back(assemble_record(preset, data.records[order[i]], vocab));
      }
      firewall_scan(recs, cfg, preset);
      SeqBatch batch = make_batch(seqs, preset, true);

      Graph<float> g;
      VlmNodes nodes = model.build_forward(g, batch);
      if (nodes.loss < 0) throw std::runtime_error("train: batch produced no loss");
      const double loss = g.val(nodes.loss).at(0, 0);
      if (!std::isfinite(loss)) throw std::runtime_error("train: non-finite loss");
      g.backward(nodes.loss);

      std::vector<std::pair<std::string, const Mat<float>*>> grads;
      grads.reserve(nodes.param_nodes.size());
      for (const auto& [name, node] : nodes.param_nodes) grads.emplace_back(name, &g.grad(node));
      adam.step(model.params, grads, lr_of);

      ++step;
      epoch_loss += loss;
      ++epoch_batches;
      log << metric_line(cfg.phase, epoch, step, "train", "loss", loss) << "\n";
      res.final_loss = loss;
    }
    log << metric_line(cfg.phase, epoch, step, "train", "epoch_loss",
                       epoch_loss / static_cast<double>(epoch_batches))
        << "\n";
    for (const auto& ev : epoch_evals)
      log << metric_line(cfg.phase, epoch, step, "eval", ev.metric, ev.fn(model)) << "\n";
    log.flush();
  }

  save_checkpoint(res.checkpoint_path, model, vocab.checksum(),
                  Provenance{cfg.phase, cfg.epochs, cfg.seed, cfg.preset});
  return res;
}

double overfit_fixed_batch(const GenPreset& preset, const Vocab& vocab,
                           const std::vector<ManifestRecord>& records, int steps,
                           uint64_t seed) {
  if (records.empty()) throw std::runtime_error("overfit: no records");
  std::vector<AssembledSeq> seqs;
  seqs.reserve(records.size());
  for (const auto& rec : records) seqs.push_back(assemble_record(preset, rec, vocab));
  SeqBatch batch = make_batch(seqs, preset, true);

  Vlm<float> model(model_config_for(preset, vocab));
  model.init_params(seed);
  Adam adam;
  // Slightly hotter than the training rate: this is a wiring check on one
  // fixed batch, where 1e-3 converges too slowly and 3e-3 can oscillate.
  auto lr_of = [](const std::string&) { return 2e-3; };

  double loss = 0;
  for (int s = 0; s < steps; ++s) {
    Graph<float> g;
    VlmNodes nodes = model.build_forward(g, batch);
    if (nodes.loss < 0) throw std::runtime_error("overfit: batch produced no loss");
    loss = g.val(nodes.loss).at(0, 0);
    if (!std::isfinite(loss)) throw std::runtime_error("overfit: non-finite loss");
    g.backward(nodes.loss);
    std::vector<std::pair<std::string, const Mat<float>*>> grads;
    grads.reserve(nodes.param_nodes.size());
    for (const auto& [name, node] : nodes.param_nodes) grads.emplace_back(name, &g.grad(node));
    adam.step(model.params, grads, lr_of);
  }
  return loss;
}

}  // namespace countlab
