#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "core/graph.hpp"
#include "core/mat.hpp"
#include "core/rng.hpp"
#include "model/config.hpp"
#include "model/sequence.hpp"
#include "tokenizer/vocab.hpp"

namespace countlab {

// Named parameter tensors in a fixed order shared by the optimizer and the
// checkpoint format.
template <typename T>
struct ParamStore {
  std::vector<std::pair<std::string, Mat<T>>> items;
  std::unordered_map<std::string, int> index;

  void add(const std::string& name, int rows, int cols) {
    if (index.count(name)) throw std::runtime_error("params: duplicate " + name);
    index[name] = static_cast<int>(items.size());
    items.emplace_back(name, Mat<T>(rows, cols));
  }
  Mat<T>& at(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw std::runtime_error("params: missing " + name);
    return items[it->second].second;
  }
  const Mat<T>& at(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw std::runtime_error("params: missing " + name);
    return items[it->second].second;
  }
  int64_t total() const {
    int64_t n = 0;
    for (const auto& [name, m] : items) n += static_cast<int64_t>(m.size());
    return n;
  }
  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, m] : items) {
      out.index[name] = static_cast<int>(out.items.size());
      out.items.emplace_back(name, m.template cast<U>());
    }
    return out;
  }
};

// Attention-level interventions resolved per forward call. Token masks list
// decoder sequence positions dropped as keys/values in every decoder layer,
// one list per batch item (empty vector = no masking). Head masks name
// (decoder layer, head) pairs whose outputs are zeroed.
struct MaskDirectives {
  std::vector<std::vector<int>> token_masks;
  std::vector<std::pair<int, int>> head_masks;
  bool empty() const { return token_masks.empty() && head_masks.empty(); }
};

// Activation capture. Layer entry 0 is the embedding output; entries
// 1..layers are block outputs; the last entry is the final layernorm output.
template <typename T>
struct HiddenTrace {
  int batch = 0;
  int enc_tokens = 0;  // per-sample visual token count
  int dec_tokens = 0;  // padded decoder sequence length
  std::vector<Mat<T>> encoder_layers;
  std::vector<Mat<T>> decoder_layers;
  std::vector<AttnTrace<T>> encoder_attn;
  std::vector<AttnTrace<T>> decoder_attn;
};

// Node handles into a built forward graph.
struct VlmNodes {
  int logits = -1;
  int loss = -1;
  std::vector<std::pair<std::string, int>> param_nodes;
};

struct GenResult {
  std::vector<std::string> texts;  // decoded continuation, EOS stripped
  std::vector<bool> truncated;
};

template <typename T>
class Vlm {
 public:
  ModelConfig cfg;
  ParamStore<T> params;

  explicit Vlm(const ModelConfig& c) : cfg(c) {
    cfg.validate();
    const int d = cfg.d_model;
    params.add("enc.patch.w", d, cfg.patch_dim());
    params.add("enc.patch.b", 1, d);
    for (int l = 0; l < cfg.enc_layers; ++l) add_block("enc.l" + std::to_string(l));
    params.add("enc.ln_f.g", 1, d);
    params.add("enc.ln_f.b", 1, d);
    params.add("proj.w", d, d);
    params.add("proj.b", 1, d);
    params.add("dec.tok_embed.w", cfg.vocab_size, d);
    for (int l = 0; l < cfg.dec_layers; ++l) add_block("dec.l" + std::to_string(l));
    params.add("dec.ln_f.g", 1, d);
    params.add("dec.ln_f.b", 1, d);
    params.add("dec.lm_head.w", cfg.vocab_size, d);
    if (params.total() != cfg.param_count())
      throw std::runtime_error("params: store size disagrees with closed-form count");
  }

  void init_params(uint64_t seed) {
    Rng rng(seed);
    const double base = 0.02;
    const double resid =
        base / std::sqrt(2.0 * static_cast<double>(cfg.enc_layers + cfg.dec_layers));
    for (auto& [name, m] : params.items) {
      const bool is_ln_gain = name.find(".ln") != std::string::npos && ends_with(name, ".g");
      const bool is_bias = ends_with(name, ".b") || ends_with(name, ".b1") ||
                           ends_with(name, ".b2");
      if (is_ln_gain) {
        std::fill(m.data.begin(), m.data.end(), T(1));
        continue;
      }
      if (is_bias) {
        m.zero();
        continue;
      }
      const double std = (ends_with(name, ".wo") || ends_with(name, ".w2")) ? resid : base;
      for (auto& x : m.data) x = static_cast<T>(rng.normal() * std);
    }
  }

  template <typename U>
  Vlm<U> cast() const {
    Vlm<U> out(cfg);
    out.params = params.template cast<U>();
    return out;
  }

  // Assembles the full graph: encoder over batch patches (unless a
  // precomputed visual embedding matrix is supplied), projector, splice into
  // the token-embedded decoder input, decoder blocks, lm head, and the loss
  // over scored targets (if any).
  VlmNodes build_forward(Graph<T>& g, const SeqBatch& batch,
                         const MaskDirectives* masks = nullptr,
                         HiddenTrace<T>* trace = nullptr,
                         const Mat<T>* precomputed_visual = nullptr) const {
    if (batch.seq_len > cfg.max_seq_len)
      throw std::runtime_error("forward: sequence exceeds max_seq_len");
    validate_masks(masks, batch);

    VlmNodes out;
    std::unordered_map<std::string, int> pn;
    for (const auto& [name, m] : params.items) {
      const int node = g.leaf(m);
      pn[name] = node;
      out.param_nodes.emplace_back(name, node);
    }

    if (trace) {
      trace->batch = batch.batch;
      trace->enc_tokens = batch.visual_len;
      trace->dec_tokens = batch.seq_len;
      trace->encoder_layers.clear();
      trace->decoder_layers.clear();
      trace->encoder_attn.assign(cfg.enc_layers, {});
      trace->decoder_attn.assign(cfg.dec_layers, {});
    }

    int vis = -1;
    if (batch.visual_len > 0) {
      if (precomputed_visual) {
        if (precomputed_visual->rows != batch.batch * batch.visual_len ||
            precomputed_visual->cols != cfg.d_model)
          throw std::runtime_error("forward: precomputed visual shape mismatch");
        vis = g.leaf(*precomputed_visual);
      } else {
        vis = build_visual(g, batch, pn, trace);
      }
    }

    int x = g.embedding(pn.at("dec.tok_embed.w"), batch.tokens);
    if (vis >= 0) x = g.splice_rows(x, vis, batch.visual_rows);
    if (trace) trace->decoder_layers.push_back(g.val(x));

    std::vector<uint8_t> key_mask;
    if (masks && !masks->token_masks.empty()) {
      key_mask.assign(static_cast<size_t>(batch.batch) * batch.seq_len, 0);
      for (int b = 0; b < batch.batch; ++b)
        for (int p : masks->token_masks[b])
          key_mask[static_cast<size_t>(b) * batch.seq_len + p] = 1;
    }
    std::vector<std::vector<uint8_t>> head_masks(cfg.dec_layers);
    if (masks)
      for (auto [l, h] : masks->head_masks) {
        if (head_masks[l].empty()) head_masks[l].assign(cfg.n_heads, 0);
        head_masks[l][h] = 1;
      }

    for (int l = 0; l < cfg.dec_layers; ++l) {
      AttnSpec<T> spec;
      spec.batch = batch.batch;
      spec.seq = batch.seq_len;
      spec.heads = cfg.n_heads;
      spec.head_dim = cfg.head_dim;
      spec.prefix_len = batch.visual_len > 0 ? 1 + batch.visual_len : 0;
      spec.rope_theta = cfg.rope_theta;
      spec.rope_sections = cfg.mrope_sections;
      spec.positions = &batch.positions;
      if (!key_mask.empty()) spec.key_mask = &key_mask;
      if (!head_masks[l].empty()) spec.head_mask = &head_masks[l];
      if (trace) spec.trace = &trace->decoder_attn[l];
      x = block(g, x, "dec.l" + std::to_string(l), spec, pn);
      if (trace) trace->decoder_layers.push_back(g.val(x));
    }
    x = g.layer_norm(x, pn.at("dec.ln_f.g"), pn.at("dec.ln_f.b"));
    if (trace) trace->decoder_layers.push_back(g.val(x));
    out.logits = g.linear(x, pn.at("dec.lm_head.w"));

    bool any_target = false;
    for (int t : batch.targets)
      if (t >= 0) any_target = true;
    if (any_target) out.loss = g.cross_entropy(out.logits, batch.targets);
    return out;
  }

  // Encoder + projector alone; returns the projected visual embeddings
  // (batch * visual_len, d).
  Mat<T> encode_visual(const SeqBatch& batch, HiddenTrace<T>* trace = nullptr) const {
    if (batch.visual_len <= 0) throw std::runtime_error("encode_visual: batch has no patches");
    Graph<T> g(false);
    std::unordered_map<std::string, int> pn;
    for (const auto& [name, m] : params.items)
      if (name.rfind("enc.", 0) == 0 || name.rfind("proj.", 0) == 0) pn[name] = g.leaf(m);
    if (trace) {
      trace->batch = batch.batch;
      trace->enc_tokens = batch.visual_len;
      trace->encoder_layers.clear();
      trace->encoder_attn.assign(cfg.enc_layers, {});
    }
    const int vis = build_visual(g, batch, pn, trace);
    return g.val(vis);
  }

  // Greedy decoding without KV caching: the padded batch is re-run for every
  // generated token. Visual embeddings are computed once per call.
  GenResult generate_greedy(const std::vector<AssembledSeq>& seqs, const GenPreset& preset,
                            const Vocab& vocab, int max_new,
                            const MaskDirectives* masks = nullptr) const {
    const int n = static_cast<int>(seqs.size());
    GenResult res;
    res.texts.assign(n, "");
    res.truncated.assign(n, false);

    std::vector<AssembledSeq> work(seqs.begin(), seqs.end());
    std::vector<std::vector<int>> generated(n);
    std::vector<bool> done(n, false);

    Mat<T> vis;
    const bool visual = seqs[0].visual_len > 0;
    if (visual) {
      SeqBatch b0 = make_batch(work, preset, false);
      vis = encode_visual(b0);
    }

    for (int step = 0; step < max_new; ++step) {
      for (int i = 0; i < n; ++i) {
        work[i].tokens.resize(seqs[i].prompt_len);
        work[i].tokens.insert(work[i].tokens.end(), generated[i].begin(), generated[i].end());
        work[i].prompt_len = static_cast<int>(work[i].tokens.size());
      }
      SeqBatch batch = make_batch(work, preset, false);
      Graph<T> g(false);
      VlmNodes nodes = build_forward(g, batch, masks, nullptr, visual ? &vis : nullptr);
      const Mat<T>& logits = g.val(nodes.logits);
      bool all_done = true;
      for (int i = 0; i < n; ++i) {
        if (done[i]) continue;
        const int row = i * batch.seq_len + work[i].prompt_len - 1;
        const T* lr = logits.row(row);
        int best = 0;
        for (int c = 1; c < cfg.vocab_size; ++c)
          if (lr[c] > lr[best]) best = c;
        if (best == Vocab::kEos) {
          done[i] = true;
        } else {
          generated[i].push_back(best);
          all_done = false;
        }
      }
      if (all_done) break;
    }
    for (int i = 0; i < n; ++i) {
      res.truncated[i] = !done[i];
      res.texts[i] = vocab.decode(generated[i], true);
    }
    return res;
  }

 private:
  template <typename U>
  friend class Vlm;

  static bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  }

  void add_block(const std::string& prefix) {
    const int d = cfg.d_model, m = cfg.mlp_hidden();
    params.add(prefix + ".ln1.g", 1, d);
    params.add(prefix + ".ln1.b", 1, d);
    params.add(prefix + ".attn.wq", d, d);
    params.add(prefix + ".attn.wk", d, d);
    params.add(prefix + ".attn.wv", d, d);
    params.add(prefix + ".attn.wo", d, d);
    params.add(prefix + ".ln2.g", 1, d);
    params.add(prefix + ".ln2.b", 1, d);
    params.add(prefix + ".mlp.w1", m, d);
    params.add(prefix + ".mlp.b1", 1, m);
    params.add(prefix + ".mlp.w2", d, m);
    params.add(prefix + ".mlp.b2", 1, d);
  }

  int block(Graph<T>& g, int x, const std::string& p, const AttnSpec<T>& spec,
            const std::unordered_map<std::string, int>& pn) const {
    const int a_in = g.layer_norm(x, pn.at(p + ".ln1.g"), pn.at(p + ".ln1.b"));
    const int q = g.linear(a_in, pn.at(p + ".attn.wq"));
    const int k = g.linear(a_in, pn.at(p + ".attn.wk"));
    const int v = g.linear(a_in, pn.at(p + ".attn.wv"));
    const int att = g.attention(q, k, v, spec);
    const int att_o = g.linear(att, pn.at(p + ".attn.wo"));
    const int x1 = g.add(x, att_o);
    const int m_in = g.layer_norm(x1, pn.at(p + ".ln2.g"), pn.at(p + ".ln2.b"));
    int h = g.linear(m_in, pn.at(p + ".mlp.w1"), pn.at(p + ".mlp.b1"));
    h = g.gelu(h);
    h = g.linear(h, pn.at(p + ".mlp.w2"), pn.at(p + ".mlp.b2"));
    return g.add(x1, h);
  }

  int build_visual(Graph<T>& g, const SeqBatch& batch,
                   const std::unordered_map<std::string, int>& pn,
                   HiddenTrace<T>* trace) const {
    Mat<T> patches = batch.patches.template cast<T>();
    const int x0 = g.leaf(std::move(patches));
    int x = g.linear(x0, pn.at("enc.patch.w"), pn.at("enc.patch.b"));
    if (trace) trace->encoder_layers.push_back(g.val(x));
    for (int l = 0; l < cfg.enc_layers; ++l) {
      AttnSpec<T> spec;
      spec.batch = batch.batch;
      spec.seq = batch.visual_len;
      spec.heads = cfg.n_heads;
      spec.head_dim = cfg.head_dim;
      spec.bidirectional = true;
      spec.rope_theta = cfg.rope_theta;
      spec.rope_sections = cfg.mrope_sections;
      spec.positions = &batch.patch_positions;
      if (trace) spec.trace = &trace->encoder_attn[l];
      x = block(g, x, "enc.l" + std::to_string(l), spec, pn);
      if (trace) trace->encoder_layers.push_back(g.val(x));
    }
    x = g.layer_norm(x, pn.at("enc.ln_f.g"), pn.at("enc.ln_f.b"));
    if (trace) trace->encoder_layers.push_back(g.val(x));
    return g.linear(x, pn.at("proj.w"), pn.at("proj.b"));
  }

  void validate_masks(const MaskDirectives* masks, const SeqBatch& batch) const {
    if (!masks) return;
    if (!masks->token_masks.empty() &&
        static_cast<int>(masks->token_masks.size()) != batch.batch)
      throw std::runtime_error("forward: token mask list size must match batch");
    for (const auto& list : masks->token_masks)
      for (int p : list)
        if (p < 0 || p >= batch.seq_len)
          throw std::runtime_error("forward: token mask position out of range");
    for (auto [l, h] : masks->head_masks)
      if (l < 0 || l >= cfg.dec_layers || h < 0 || h >= cfg.n_heads)
        throw std::runtime_error("forward: head mask target out of range");
  }
};

}  // namespace countlab
