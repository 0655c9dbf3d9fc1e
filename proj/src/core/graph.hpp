#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <vector>

#include "core/mat.hpp"

namespace countlab {

// Token position triple for rotary embeddings: time, height, width.
struct Pos3 {
  int t = 0;
  int h = 0;
  int w = 0;
};

// Per-call attention capture. probs[b * heads + h] is the seq x seq
// post-softmax weight matrix; head_norm_sum[h] accumulates the L2 norms of
// that head's per-token context rows so callers can average across batches.
template <typename T>
struct AttnTrace {
  int batch = 0;
  int seq = 0;
  int heads = 0;
  std::vector<Mat<T>> probs;
  std::vector<double> head_norm_sum;
  long token_count = 0;
};

// Describes one attention call. Pointer members are borrowed for the duration
// of the op and copied into the tape's closure where backward needs them.
template <typename T>
struct AttnSpec {
  int batch = 1;
  int seq = 0;
  int heads = 0;
  int head_dim = 0;
  // Keys [0, prefix_len) are visible to every query; beyond that the mask is
  // causal. bidirectional overrides both (full visibility).
  int prefix_len = 0;
  bool bidirectional = false;
  double rope_theta = 10000.0;
  std::array<int, 3> rope_sections = {4, 6, 6};
  const std::vector<Pos3>* positions = nullptr;     // size batch*seq, may be null (no rotation)
  const std::vector<uint8_t>* key_mask = nullptr;   // size batch*seq, 1 = drop as key everywhere
  const std::vector<uint8_t>* head_mask = nullptr;  // size heads, 1 = zero this head's output
  AttnTrace<T>* trace = nullptr;
};

namespace detail {

// Rotation angles are assigned per frequency pair: the first sections[0]/2
// pairs read the time coordinate, the next sections[1]/2 the height, and the
// rest the width. Sections must be even and sum to head_dim.
inline std::vector<double> rope_inv_freq(int head_dim, double theta) {
  std::vector<double> inv(head_dim / 2);
  for (size_t j = 0; j < inv.size(); ++j)
    inv[j] = std::pow(theta, -2.0 * static_cast<double>(j) / head_dim);
  return inv;
}

template <typename T>
void apply_rope_row(T* x, int head_dim, const Pos3& p, const std::vector<double>& inv_freq,
                    const std::array<int, 3>& sections, double sign) {
  const int half = head_dim / 2;
  const int ct = sections[0] / 2;
  const int ch = ct + sections[1] / 2;
  for (int j = 0; j < half; ++j) {
    const int comp = j < ct ? p.t : (j < ch ? p.h : p.w);
    const double ang = sign * comp * inv_freq[j];
    const T c = static_cast<T>(std::cos(ang));
    const T s = static_cast<T>(std::sin(ang));
    const T a = x[j];
    const T b = x[j + half];
    x[j] = a * c - b * s;
    x[j + half] = b * c + a * s;
  }
}

}  // namespace detail

// Reverse-mode tape. Nodes are matrices; ops append a node plus a backward
// closure that scatters the node's gradient into its inputs. Templated on the
// scalar so the same graph runs in float for training and double for
// finite-difference checks.
template <typename T>
class Graph {
 public:
  // grads_enabled=false skips gradient buffers and forbids backward; use for
  // inference-only forwards.
  explicit Graph(bool grads_enabled = true) : grads_enabled_(grads_enabled) {}

  int leaf(Mat<T> v) { return add_node(std::move(v), nullptr); }

  Mat<T>& val(int i) { return nodes_[i].val; }
  const Mat<T>& val(int i) const { return nodes_[i].val; }
  Mat<T>& grad(int i) { return nodes_[i].grad; }
  size_t num_nodes() const { return nodes_.size(); }

  // y = x * W^T (+ bias broadcast over rows). W is (out, in); bias is (1, out)
  // or -1 for none.
  int linear(int x, int w, int bias = -1) {
    const Mat<T>& xv = nodes_[x].val;
    const Mat<T>& wv = nodes_[w].val;
    if (xv.cols != wv.cols) throw std::runtime_error("linear: inner dim mismatch");
    Mat<T> y(xv.rows, wv.rows);
    emap(y).noalias() = emap(xv) * emap(wv).transpose();
    if (bias >= 0) {
      const Mat<T>& bv = nodes_[bias].val;
      if (bv.rows != 1 || bv.cols != wv.rows) throw std::runtime_error("linear: bad bias shape");
      emap(y).rowwise() += emap(bv).row(0);
    }
    return add_node(std::move(y), [this, x, w, bias](int out) {
      const Mat<T>& g = nodes_[out].grad;
      emap(nodes_[x].grad).noalias() += emap(g) * emap(nodes_[w].val);
      emap(nodes_[w].grad).noalias() += emap(g).transpose() * emap(nodes_[x].val);
      if (bias >= 0) emap(nodes_[bias].grad).row(0) += emap(g).colwise().sum();
    });
  }

  int add(int a, int b) {
    const Mat<T>& av = nodes_[a].val;
    const Mat<T>& bv = nodes_[b].val;
    if (av.rows != bv.rows || av.cols != bv.cols) throw std::runtime_error("add: shape mismatch");
    Mat<T> y = av;
    emap(y) += emap(bv);
    return add_node(std::move(y), [this, a, b](int out) {
      emap(nodes_[a].grad) += emap(nodes_[out].grad);
      emap(nodes_[b].grad) += emap(nodes_[out].grad);
    });
  }

  // Row-wise layernorm with learned gain and bias, both (1, cols).
  int layer_norm(int x, int gain, int bias, T eps = static_cast<T>(1e-5)) {
    const Mat<T>& xv = nodes_[x].val;
    const Mat<T>& gv = nodes_[gain].val;
    const Mat<T>& bv = nodes_[bias].val;
    if (gv.cols != xv.cols || bv.cols != xv.cols)
      throw std::runtime_error("layer_norm: bad affine shape");
    const int C = xv.cols;
    Mat<T> y(xv.rows, C);
    for (int r = 0; r < xv.rows; ++r) {
      const T* xr = xv.row(r);
      double mu = 0;
      for (int c = 0; c < C; ++c) mu += xr[c];
      mu /= C;
      double var = 0;
      for (int c = 0; c < C; ++c) {
        double d = xr[c] - mu;
        var += d * d;
      }
      var /= C;
      const T inv = static_cast<T>(1.0 / std::sqrt(var + static_cast<double>(eps)));
      T* yr = y.row(r);
      for (int c = 0; c < C; ++c)
        yr[c] = (xr[c] - static_cast<T>(mu)) * inv * gv.at(0, c) + bv.at(0, c);
    }
    return add_node(std::move(y), [this, x, gain, bias, eps](int out) {
      const Mat<T>& xv = nodes_[x].val;
      const Mat<T>& gv = nodes_[gain].val;
      const Mat<T>& g = nodes_[out].grad;
      Mat<T>& dx = nodes_[x].grad;
      Mat<T>& dgain = nodes_[gain].grad;
      Mat<T>& dbias = nodes_[bias].grad;
      const int C = xv.cols;
      for (int r = 0; r < xv.rows; ++r) {
        const T* xr = xv.row(r);
        const T* gr = g.row(r);
        double mu = 0;
        for (int c = 0; c < C; ++c) mu += xr[c];
        mu /= C;
        double var = 0;
        for (int c = 0; c < C; ++c) {
          double d = xr[c] - mu;
          var += d * d;
        }
        var /= C;
        const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
        double sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (int c = 0; c < C; ++c) {
          const double xhat = (xr[c] - mu) * inv;
          const double dxhat = static_cast<double>(gr[c]) * gv.at(0, c);
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          dgain.at(0, c) += static_cast<T>(gr[c] * xhat);
          dbias.at(0, c) += gr[c];
        }
        T* dxr = dx.row(r);
        for (int c = 0; c < C; ++c) {
          const double xhat = (xr[c] - mu) * inv;
          const double dxhat = static_cast<double>(gr[c]) * gv.at(0, c);
          dxr[c] += static_cast<T>(inv * (dxhat - sum_dxhat / C - xhat * sum_dxhat_xhat / C));
        }
      }
    });
  }

  // tanh-approximated gelu.
  int gelu(int x) {
    const Mat<T>& xv = nodes_[x].val;
    Mat<T> y(xv.rows, xv.cols);
    const T k = static_cast<T>(std::sqrt(2.0 / M_PI));
    const T c3 = static_cast<T>(0.044715);
    {
      auto xa = emap(xv).array();
      emap(y).array() = T(0.5) * xa * (T(1) + (k * (xa + c3 * xa.cube())).tanh());
    }
    return add_node(std::move(y), [this, x, k, c3](int out) {
      const Mat<T>& xv = nodes_[x].val;
      const Mat<T>& g = nodes_[out].grad;
      Mat<T>& dx = nodes_[x].grad;
      auto xa = emap(xv).array();
      Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> th =
          (k * (xa + c3 * xa.cube())).tanh();
      auto du = k * (T(1) + T(3) * c3 * xa.square());
      emap(dx).array() +=
          emap(g).array() * (T(0.5) * (T(1) + th) + T(0.5) * xa * (T(1) - th.square()) * du);
    });
  }

  // Gather rows of a (vocab, d) table by token id; backward scatter-adds.
  int embedding(int table, std::vector<int> ids) {
    const Mat<T>& tv = nodes_[table].val;
    Mat<T> y(static_cast<int>(ids.size()), tv.cols);
    for (size_t r = 0; r < ids.size(); ++r) {
      if (ids[r] < 0 || ids[r] >= tv.rows) throw std::runtime_error("embedding: id out of range");
      std::copy(tv.row(ids[r]), tv.row(ids[r]) + tv.cols, y.row(static_cast<int>(r)));
    }
    auto held = std::make_shared<std::vector<int>>(std::move(ids));
    return add_node(std::move(y), [this, table, held](int out) {
      const Mat<T>& g = nodes_[out].grad;
      Mat<T>& dt = nodes_[table].grad;
      for (size_t r = 0; r < held->size(); ++r) {
        T* dst = dt.row((*held)[r]);
        const T* src = g.row(static_cast<int>(r));
        for (int c = 0; c < g.cols; ++c) dst[c] += src[c];
      }
    });
  }

  // Copy of base with rows[k] replaced by patch row k. Row indices must be
  // unique; used to inject projected visual tokens into a token-embedded
  // sequence.
  int splice_rows(int base, int patch, std::vector<int> rows) {
    const Mat<T>& bv = nodes_[base].val;
    const Mat<T>& pv = nodes_[patch].val;
    if (static_cast<int>(rows.size()) != pv.rows)
      throw std::runtime_error("splice_rows: row list size mismatch");
    if (pv.cols != bv.cols) throw std::runtime_error("splice_rows: width mismatch");
    Mat<T> y = bv;
    std::vector<uint8_t> taken(bv.rows, 0);
    for (size_t k = 0; k < rows.size(); ++k) {
      const int r = rows[k];
      if (r < 0 || r >= bv.rows || taken[r]) throw std::runtime_error("splice_rows: bad row index");
      taken[r] = 1;
      std::copy(pv.row(static_cast<int>(k)), pv.row(static_cast<int>(k)) + pv.cols, y.row(r));
    }
    auto held = std::make_shared<std::vector<int>>(std::move(rows));
    return add_node(std::move(y), [this, base, patch, held](int out) {
      const Mat<T>& g = nodes_[out].grad;
      Mat<T>& db = nodes_[base].grad;
      Mat<T>& dp = nodes_[patch].grad;
      std::vector<uint8_t> spliced(g.rows, 0);
      for (size_t k = 0; k < held->size(); ++k) {
        spliced[(*held)[k]] = 1;
        const T* src = g.row((*held)[k]);
        T* dst = dp.row(static_cast<int>(k));
        for (int c = 0; c < g.cols; ++c) dst[c] += src[c];
      }
      for (int r = 0; r < g.rows; ++r) {
        if (spliced[r]) continue;
        const T* src = g.row(r);
        T* dst = db.row(r);
        for (int c = 0; c < g.cols; ++c) dst[c] += src[c];
      }
    });
  }

  // Multi-head scaled-dot-product attention over flattened (batch*seq, heads*head_dim)
  // projections, with rotary positions applied to q and k in place, prefix or
  // causal visibility, hard key-removal masks (exact zero weight), and
  // per-head output zeroing. Softmax probabilities are kept for backward.
  int attention(int q, int k, int v, const AttnSpec<T>& spec) {
    const Mat<T>& qv = nodes_[q].val;
    if (spec.seq <= 0 || spec.heads <= 0 || spec.head_dim <= 0)
      throw std::runtime_error("attention: bad spec");
    if (spec.rope_sections[0] + spec.rope_sections[1] + spec.rope_sections[2] != spec.head_dim)
      throw std::runtime_error("attention: rope sections must sum to head_dim");
    for (int s : spec.rope_sections)
      if (s % 2 != 0) throw std::runtime_error("attention: rope sections must be even");
    const int B = spec.batch, L = spec.seq, H = spec.heads, Dh = spec.head_dim;
    if (qv.rows != B * L || qv.cols != H * Dh)
      throw std::runtime_error("attention: q shape mismatch");
    const Mat<T>& kv = nodes_[k].val;
    const Mat<T>& vv = nodes_[v].val;
    if (kv.rows != qv.rows || kv.cols != qv.cols || vv.rows != qv.rows || vv.cols != qv.cols)
      throw std::runtime_error("attention: k/v shape mismatch");
    if (spec.positions && static_cast<int>(spec.positions->size()) != B * L)
      throw std::runtime_error("attention: positions size mismatch");
    if (spec.key_mask && static_cast<int>(spec.key_mask->size()) != B * L)
      throw std::runtime_error("attention: key_mask size mismatch");
    if (spec.head_mask && static_cast<int>(spec.head_mask->size()) != H)
      throw std::runtime_error("attention: head_mask size mismatch");

    auto st = std::make_shared<AttnCtx>();
    st->batch = B;
    st->seq = L;
    st->heads = H;
    st->head_dim = Dh;
    st->prefix_len = spec.prefix_len;
    st->bidirectional = spec.bidirectional;
    st->sections = spec.rope_sections;
    st->inv_freq = detail::rope_inv_freq(Dh, spec.rope_theta);
    if (spec.positions) st->pos = *spec.positions;
    if (spec.key_mask) st->key_mask = *spec.key_mask;
    if (spec.head_mask) st->head_mask = *spec.head_mask;
    st->probs.resize(static_cast<size_t>(B) * H);
    build_rope_tables(*st);

    if (spec.trace) {
      spec.trace->batch = B;
      spec.trace->seq = L;
      spec.trace->heads = H;
      spec.trace->probs.clear();
      spec.trace->probs.resize(static_cast<size_t>(B) * H);
      spec.trace->head_norm_sum.assign(H, 0.0);
      spec.trace->token_count = static_cast<long>(B) * L;
    }

    Mat<T> y(B * L, H * Dh);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh)));
    Mat<T> qr(L, Dh), kr(L, Dh);
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        rotate_block(qv, b, h, *st, qr, +1.0);
        rotate_block(kv, b, h, *st, kr, +1.0);
        Mat<T>& P = st->probs[static_cast<size_t>(b) * H + h];
        P = Mat<T>(L, L);
        emap(P).noalias() = emap(qr) * emap(kr).transpose() * scale;
        softmax_mask_rows(P, b, *st);
        const bool masked_head = !st->head_mask.empty() && st->head_mask[h];
        auto yb = emap(y).block(b * L, h * Dh, L, Dh);
        if (masked_head)
          yb.setZero();
        else
          yb.noalias() = emap(P) * emap(vv).block(b * L, h * Dh, L, Dh);
        if (spec.trace) {
          spec.trace->probs[static_cast<size_t>(b) * H + h] = P;
          double ns = 0;
          for (int i = 0; i < L; ++i) {
            double sq = 0;
            const T* out = y.row(b * L + i) + h * Dh;
            for (int d = 0; d < Dh; ++d) sq += static_cast<double>(out[d]) * out[d];
            ns += std::sqrt(sq);
          }
          spec.trace->head_norm_sum[h] += ns;
        }
      }
    }

    return add_node(std::move(y), [this, q, k, v, st](int out) {
      const Mat<T>& g = nodes_[out].grad;
      const Mat<T>& qv = nodes_[q].val;
      const Mat<T>& kv = nodes_[k].val;
      const Mat<T>& vv = nodes_[v].val;
      Mat<T>& dq = nodes_[q].grad;
      Mat<T>& dk = nodes_[k].grad;
      Mat<T>& dv = nodes_[v].grad;
      const int B = st->batch, L = st->seq, H = st->heads, Dh = st->head_dim;
      const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(Dh)));
      Mat<T> qr(L, Dh), kr(L, Dh), dP(L, L), dS(L, L), dQr(L, Dh), dKr(L, Dh);
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < H; ++h) {
          if (!st->head_mask.empty() && st->head_mask[h]) continue;
          const Mat<T>& P = st->probs[static_cast<size_t>(b) * H + h];
          auto dCb = emap(g).block(b * L, h * Dh, L, Dh);
          auto Vb = emap(vv).block(b * L, h * Dh, L, Dh);
          emap(dv).block(b * L, h * Dh, L, Dh).noalias() += emap(P).transpose() * dCb;
          emap(dP).noalias() = dCb * Vb.transpose();
          // softmax jacobian per row; zero-prob entries stay zero.
          for (int i = 0; i < L; ++i) {
            auto pr = emap(P).row(i).array();
            auto dpr = emap(dP).row(i).array();
            const T dot = (pr * dpr).sum();
            emap(dS).row(i).array() = pr * (dpr - dot);
          }
          rotate_block(qv, b, h, *st, qr, +1.0);
          rotate_block(kv, b, h, *st, kr, +1.0);
          emap(dQr).noalias() = emap(dS) * emap(kr) * scale;
          emap(dKr).noalias() = emap(dS).transpose() * emap(qr) * scale;
          // Rotation is orthonormal: gradient maps back through the inverse
          // rotation.
          rope_rows_inplace(dQr, *st, b, -1.0);
          rope_rows_inplace(dKr, *st, b, -1.0);
          emap(dq).block(b * L, h * Dh, L, Dh) += emap(dQr);
          emap(dk).block(b * L, h * Dh, L, Dh) += emap(dKr);
        }
      }
    });
  }

  // Mean cross-entropy over rows whose target is >= 0. Accumulates in double.
  int cross_entropy(int logits, std::vector<int> targets) {
    const Mat<T>& lv = nodes_[logits].val;
    if (static_cast<int>(targets.size()) != lv.rows)
      throw std::runtime_error("cross_entropy: target count mismatch");
    double total = 0;
    long count = 0;
    Eigen::Array<double, Eigen::Dynamic, 1> row_d(lv.cols);
    for (int r = 0; r < lv.rows; ++r) {
      const int t = targets[r];
      if (t < 0) continue;
      if (t >= lv.cols) throw std::runtime_error("cross_entropy: target out of range");
      Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> row(lv.row(r), lv.cols);
      row_d = row.template cast<double>();
      const double mx = row_d.maxCoeff();
      const double se = (row_d - mx).exp().sum();
      total += mx + std::log(se) - row_d[t];
      ++count;
    }
    if (count == 0) throw std::runtime_error("cross_entropy: no scored rows");
    Mat<T> y(1, 1);
    y.at(0, 0) = static_cast<T>(total / count);
    auto held = std::make_shared<std::vector<int>>(std::move(targets));
    auto n = count;
    return add_node(std::move(y), [this, logits, held, n](int out) {
      const T gscale = nodes_[out].grad.at(0, 0) / static_cast<T>(n);
      const Mat<T>& lv = nodes_[logits].val;
      Mat<T>& dl = nodes_[logits].grad;
      Eigen::Array<double, Eigen::Dynamic, 1> p(lv.cols);
      for (int r = 0; r < lv.rows; ++r) {
        const int t = (*held)[r];
        if (t < 0) continue;
        Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>> row(lv.row(r), lv.cols);
        p = row.template cast<double>();
        p = (p - p.maxCoeff()).exp();
        p /= p.sum();
        p[t] -= 1.0;
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> dr(dl.row(r), lv.cols);
        dr += gscale * p.template cast<T>();
      }
    });
  }

  // Seeds d(node)/d(node) = 1 and walks the tape backwards.
  void backward(int node) {
    if (!grads_enabled_) throw std::runtime_error("graph: backward on a no-grad graph");
    Mat<T>& g = nodes_[node].grad;
    std::fill(g.data.begin(), g.data.end(), T(1));
    for (int i = node; i >= 0; --i)
      if (nodes_[i].back) nodes_[i].back(i);
  }

 private:
  struct AttnCtx {
    int batch = 0, seq = 0, heads = 0, head_dim = 0, prefix_len = 0;
    bool bidirectional = false;
    std::array<int, 3> sections{};
    std::vector<double> inv_freq;
    std::vector<Pos3> pos;
    std::vector<uint8_t> key_mask;
    std::vector<uint8_t> head_mask;
    std::vector<Mat<T>> probs;
    // When every batch item shares the same position triples, the rotation
    // angles collapse to one (seq x head_dim/2) table reused everywhere.
    bool uniform_pos = false;
    Mat<T> rope_cos;
    Mat<T> rope_sin;
  };

  struct Node {
    Mat<T> val;
    Mat<T> grad;
    std::function<void(int)> back;
  };

  int add_node(Mat<T> v, std::function<void(int)> back) {
    Node n;
    if (grads_enabled_) n.grad = Mat<T>(v.rows, v.cols);
    n.val = std::move(v);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return static_cast<int>(nodes_.size()) - 1;
  }

  static void build_rope_tables(AttnCtx& st) {
    if (st.pos.empty()) return;
    const int B = st.batch, L = st.seq, half = st.head_dim / 2;
    st.uniform_pos = true;
    for (int b = 1; b < B && st.uniform_pos; ++b)
      for (int i = 0; i < L; ++i) {
        const Pos3& a = st.pos[static_cast<size_t>(b) * L + i];
        const Pos3& r = st.pos[i];
        if (a.t != r.t || a.h != r.h || a.w != r.w) {
          st.uniform_pos = false;
          break;
        }
      }
    if (!st.uniform_pos) return;
    st.rope_cos = Mat<T>(L, half);
    st.rope_sin = Mat<T>(L, half);
    const int ct = st.sections[0] / 2;
    const int ch = ct + st.sections[1] / 2;
    for (int i = 0; i < L; ++i) {
      const Pos3& p = st.pos[i];
      for (int j = 0; j < half; ++j) {
        const int comp = j < ct ? p.t : (j < ch ? p.h : p.w);
        const double ang = comp * st.inv_freq[j];
        st.rope_cos.at(i, j) = static_cast<T>(std::cos(ang));
        st.rope_sin.at(i, j) = static_cast<T>(std::sin(ang));
      }
    }
  }

  // Rotates every row of an L x head_dim block in place; sign -1 inverts.
  void rope_rows_inplace(Mat<T>& m, const AttnCtx& st, int b, double sign) const {
    if (st.pos.empty()) return;
    const int L = st.seq, Dh = st.head_dim, half = Dh / 2;
    if (st.uniform_pos) {
      const T sg = static_cast<T>(sign);
      for (int i = 0; i < L; ++i) {
        T* x = m.row(i);
        const T* cs = st.rope_cos.row(i);
        const T* sn = st.rope_sin.row(i);
        for (int j = 0; j < half; ++j) {
          const T c = cs[j], s = sg * sn[j];
          const T a = x[j], bb = x[j + half];
          x[j] = a * c - bb * s;
          x[j + half] = bb * c + a * s;
        }
      }
      return;
    }
    for (int i = 0; i < L; ++i)
      detail::apply_rope_row(m.row(i), Dh, st.pos[static_cast<size_t>(b) * L + i], st.inv_freq,
                             st.sections, sign);
  }

  void rotate_block(const Mat<T>& src, int b, int h, const AttnCtx& st, Mat<T>& out,
                    double sign) const {
    const int L = st.seq, Dh = st.head_dim;
    for (int i = 0; i < L; ++i) {
      const T* s = src.row(b * L + i) + h * Dh;
      std::copy(s, s + Dh, out.row(i));
    }
    rope_rows_inplace(out, st, b, sign);
  }

  // In-place masked softmax over rows of an L x L score matrix for batch b.
  // Disallowed keys never enter the max/exp, so their weight is exactly zero.
  void softmax_mask_rows(Mat<T>& S, int b, const AttnCtx& st) const {
    const int L = st.seq;
    if (st.key_mask.empty()) {
      // Without a key mask the allowed keys form the contiguous range
      // [0, lim): the visual prefix plus the causal span (or the full row
      // when bidirectional).
      for (int i = 0; i < L; ++i) {
        const int lim =
            st.bidirectional ? L : std::min(L, std::max(st.prefix_len, i + 1));
        T* row = S.row(i);
        Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>> seg(row, lim);
        const T mx = seg.maxCoeff();
        seg = (seg - mx).exp();
        seg *= T(1) / seg.sum();
        std::fill(row + lim, row + L, T(0));
      }
      return;
    }
    for (int i = 0; i < L; ++i) {
      T* row = S.row(i);
      double mx = -std::numeric_limits<double>::infinity();
      bool any = false;
      for (int j = 0; j < L; ++j) {
        if (!key_allowed(b, i, j, st)) continue;
        any = true;
        mx = std::max(mx, static_cast<double>(row[j]));
      }
      if (!any) {
        std::fill(row, row + L, T(0));
        continue;
      }
      double sum = 0;
      for (int j = 0; j < L; ++j) {
        if (!key_allowed(b, i, j, st)) {
          row[j] = T(0);
          continue;
        }
        const double e = std::exp(static_cast<double>(row[j]) - mx);
        row[j] = static_cast<T>(e);
        sum += e;
      }
      const T inv = static_cast<T>(1.0 / sum);
      for (int j = 0; j < L; ++j) row[j] *= inv;
    }
  }

  bool key_allowed(int b, int i, int j, const AttnCtx& st) const {
    if (!st.key_mask.empty() && st.key_mask[b * st.seq + j]) return false;
    return st.bidirectional || j < st.prefix_len || j <= i;
  }

  bool grads_enabled_ = true;
  std::vector<Node> nodes_;
};

}  // namespace countlab
