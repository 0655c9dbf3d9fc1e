#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "core/graph.hpp"
#include "core/rng.hpp"

using namespace countlab;

namespace {

Mat<double> random_mat(int r, int c, Rng& rng, double scale = 1.0) {
  Mat<double> m(r, c);
  for (auto& x : m.data) x = rng.normal() * scale;
  return m;
}

// Central finite differences vs analytic gradients for a scalar-valued graph
// rebuilt from mutable input matrices. The default tolerance sits well above
// the FD roundoff floor (~1e-16 / eps relative to an O(1) loss) while staying
// orders of magnitude below any genuine gradient bug.
void check_grads(std::vector<Mat<double>*> inputs,
                 const std::function<double(Graph<double>&, const std::vector<int>&)>& build,
                 double tol = 5e-6, double eps = 1e-6) {
  Graph<double> g;
  std::vector<int> nodes;
  for (auto* m : inputs) nodes.push_back(g.leaf(*m));
  const int loss = [&] {
    Graph<double>& gr = g;
    double unused = build(gr, nodes);
    (void)unused;
    return static_cast<int>(g.num_nodes()) - 1;
  }();
  REQUIRE(g.val(loss).rows == 1);
  REQUIRE(g.val(loss).cols == 1);
  g.backward(loss);

  auto eval = [&]() {
    Graph<double> g2;
    std::vector<int> n2;
    for (auto* m : inputs) n2.push_back(g2.leaf(*m));
    return build(g2, n2);
  };

  for (size_t mi = 0; mi < inputs.size(); ++mi) {
    Mat<double>& m = *inputs[mi];
    for (size_t i = 0; i < m.size(); ++i) {
      const double keep = m.data[i];
      m.data[i] = keep + eps;
      const double lp = eval();
      m.data[i] = keep - eps;
      const double lm = eval();
      m.data[i] = keep;
      const double fd = (lp - lm) / (2 * eps);
      const double an = g.grad(nodes[mi]).data[i];
      const double denom = std::max({std::abs(fd), std::abs(an), 1e-4});
      INFO("input ", mi, " entry ", i, " fd=", fd, " an=", an);
      CHECK(std::abs(fd - an) / denom < tol);
    }
  }
}

double run_to_scalar(Graph<double>& g, int node, const std::vector<int>& targets) {
  const int loss = g.cross_entropy(node, targets);
  return g.val(loss).at(0, 0);
}

}  // namespace

TEST_CASE("linear forward matches manual product and bias broadcast") {
  Graph<float> g;
  Mat<float> x(2, 3);
  for (int i = 0; i < 6; ++i) x.data[i] = static_cast<float>(i + 1);
  Mat<float> w(2, 3);
  for (int i = 0; i < 6; ++i) w.data[i] = static_cast<float>(i) * 0.5f;
  Mat<float> b(1, 2);
  b.data = {10.0f, 20.0f};
  const int y = g.linear(g.leaf(x), g.leaf(w), g.leaf(b));
  // row 0: [1,2,3] . [0,.5,1] = 4 ; [1,2,3] . [1.5,2,2.5] = 13
  CHECK(g.val(y).at(0, 0) == doctest::Approx(14.0));
  CHECK(g.val(y).at(0, 1) == doctest::Approx(33.0));
  CHECK(g.val(y).at(1, 0) == doctest::Approx(18.5));
}

TEST_CASE("gradients: linear with bias") {
  Rng rng(1);
  Mat<double> x = random_mat(4, 5, rng);
  Mat<double> w = random_mat(3, 5, rng);
  Mat<double> b = random_mat(1, 3, rng, 0.1);
  std::vector<int> targets = {0, 2, 1, 2};
  check_grads({&x, &w, &b}, [&](Graph<double>& g, const std::vector<int>& n) {
    return run_to_scalar(g, g.linear(n[0], n[1], n[2]), targets);
  });
}

TEST_CASE("gradients: add, gelu, layer_norm chain") {
  Rng rng(2);
  Mat<double> a = random_mat(3, 6, rng);
  Mat<double> b = random_mat(3, 6, rng);
  Mat<double> gain = random_mat(1, 6, rng, 0.3);
  for (auto& v : gain.data) v += 1.0;
  Mat<double> bias = random_mat(1, 6, rng, 0.2);
  std::vector<int> targets = {1, 4, 0};
  check_grads({&a, &b, &gain, &bias}, [&](Graph<double>& g, const std::vector<int>& n) {
    const int s = g.add(n[0], n[1]);
    const int act = g.gelu(s);
    const int ln = g.layer_norm(act, n[2], n[3]);
    return run_to_scalar(g, ln, targets);
  });
}

TEST_CASE("gradients: embedding scatter-add with repeated ids") {
  Rng rng(3);
  Mat<double> table = random_mat(7, 4, rng);
  std::vector<int> ids = {0, 3, 3, 6, 1};
  std::vector<int> targets = {1, 0, 2, 3, 1};
  check_grads({&table}, [&](Graph<double>& g, const std::vector<int>& n) {
    return run_to_scalar(g, g.embedding(n[0], ids), targets);
  });
}

TEST_CASE("gradients: splice_rows routes to patch and base") {
  Rng rng(4);
  Mat<double> base = random_mat(5, 4, rng);
  Mat<double> patch = random_mat(2, 4, rng);
  std::vector<int> rows = {1, 3};
  std::vector<int> targets = {0, 1, 2, 3, 0};
  check_grads({&base, &patch}, [&](Graph<double>& g, const std::vector<int>& n) {
    return run_to_scalar(g, g.splice_rows(n[0], n[1], rows), targets);
  });
}

TEST_CASE("splice_rows rejects duplicate and out-of-range rows") {
  Graph<float> g;
  const int base = g.leaf(Mat<float>(4, 2));
  const int patch = g.leaf(Mat<float>(2, 2));
  CHECK_THROWS(g.splice_rows(base, patch, {1, 1}));
  CHECK_THROWS(g.splice_rows(base, patch, {1, 7}));
}

namespace {

AttnSpec<double> small_attn_spec(const std::vector<Pos3>& pos) {
  AttnSpec<double> spec;
  spec.batch = 2;
  spec.seq = 5;
  spec.heads = 2;
  spec.head_dim = 16;
  spec.prefix_len = 2;
  spec.positions = &pos;
  return spec;
}

std::vector<Pos3> small_positions() {
  std::vector<Pos3> pos;
  for (int b = 0; b < 2; ++b) {
    pos.push_back({0, 0, 0});
    pos.push_back({1, 0, 0});
    pos.push_back({1, 0, 1});
    for (int t = 2; t < 4; ++t) pos.push_back({t, t, t});
  }
  return pos;
}

}  // namespace

TEST_CASE("gradients: attention with rope, prefix mask, and key mask") {
  Rng rng(5);
  const auto pos = small_positions();
  std::vector<uint8_t> key_mask(10, 0);
  key_mask[2] = 1;  // second visual token of batch 0 removed everywhere
  Mat<double> q = random_mat(10, 32, rng, 0.5);
  Mat<double> k = random_mat(10, 32, rng, 0.5);
  Mat<double> v = random_mat(10, 32, rng, 0.5);
  std::vector<int> targets(10);
  for (int i = 0; i < 10; ++i) targets[i] = (i * 7) % 32;
  check_grads(
      {&q, &k, &v},
      [&](Graph<double>& g, const std::vector<int>& n) {
        auto spec = small_attn_spec(pos);
        spec.key_mask = &key_mask;
        return run_to_scalar(g, g.attention(n[0], n[1], n[2], spec), targets);
      },
      1e-5);
}

TEST_CASE("attention rows sum to one and masked keys get exactly zero") {
  Rng rng(6);
  const auto pos = small_positions();
  std::vector<uint8_t> key_mask(10, 0);
  key_mask[1] = 1;
  key_mask[5 + 4] = 1;
  Graph<double> g;
  const int q = g.leaf(random_mat(10, 32, rng));
  const int k = g.leaf(random_mat(10, 32, rng));
  const int v = g.leaf(random_mat(10, 32, rng));
  AttnTrace<double> trace;
  auto spec = small_attn_spec(pos);
  spec.key_mask = &key_mask;
  spec.trace = &trace;
  g.attention(q, k, v, spec);
  REQUIRE(trace.probs.size() == 4);
  for (int b = 0; b < 2; ++b) {
    for (int h = 0; h < 2; ++h) {
      const Mat<double>& P = trace.probs[b * 2 + h];
      for (int i = 0; i < 5; ++i) {
        double sum = 0;
        for (int j = 0; j < 5; ++j) {
          CHECK(P.at(i, j) >= 0.0);
          if (key_mask[b * 5 + j]) CHECK(P.at(i, j) == 0.0);
          if (j >= 2 && j > i) CHECK(P.at(i, j) == 0.0);  // causal beyond prefix
          sum += P.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
      }
    }
  }
}

TEST_CASE("attention: bidirectional flag opens the full matrix") {
  Rng rng(7);
  const auto pos = small_positions();
  Graph<double> g;
  const int q = g.leaf(random_mat(10, 32, rng));
  const int k = g.leaf(random_mat(10, 32, rng));
  const int v = g.leaf(random_mat(10, 32, rng));
  AttnTrace<double> trace;
  auto spec = small_attn_spec(pos);
  spec.bidirectional = true;
  spec.trace = &trace;
  g.attention(q, k, v, spec);
  for (const auto& P : trace.probs)
    for (size_t i = 0; i < P.size(); ++i) CHECK(P.data[i] > 0.0);
}

TEST_CASE("attention: masked head output is exactly zero, others untouched") {
  Rng rng(8);
  const auto pos = small_positions();
  Mat<double> q = random_mat(10, 32, rng);
  Mat<double> k = random_mat(10, 32, rng);
  Mat<double> v = random_mat(10, 32, rng);
  std::vector<uint8_t> head_mask = {0, 1};

  Graph<double> g1;
  auto spec1 = small_attn_spec(pos);
  const int y1 = g1.attention(g1.leaf(q), g1.leaf(k), g1.leaf(v), spec1);

  Graph<double> g2;
  auto spec2 = small_attn_spec(pos);
  spec2.head_mask = &head_mask;
  const int y2 = g2.attention(g2.leaf(q), g2.leaf(k), g2.leaf(v), spec2);

  for (int r = 0; r < 10; ++r) {
    for (int c = 0; c < 32; ++c) {
      if (c < 16)
        CHECK(g2.val(y2).at(r, c) == g1.val(y1).at(r, c));
      else
        CHECK(g2.val(y2).at(r, c) == 0.0);
    }
  }
}

TEST_CASE("rope bookkeeping: section pair budget covers head_dim exactly") {
  const auto inv = detail::rope_inv_freq(16, 10000.0);
  REQUIRE(inv.size() == 8);
  CHECK(inv[0] == doctest::Approx(1.0));
  CHECK(inv[7] == doctest::Approx(std::pow(10000.0, -14.0 / 16.0)));
  // sections (4,6,6): 2 time pairs + 3 height pairs + 3 width pairs = 8 pairs
  // = 16 rotated dims.
  const std::array<int, 3> sections = {4, 6, 6};
  CHECK(sections[0] / 2 + sections[1] / 2 + sections[2] / 2 == static_cast<int>(inv.size()));
}

TEST_CASE("rope rotation preserves norm and is inverted by the opposite sign") {
  Rng rng(9);
  const auto inv = detail::rope_inv_freq(16, 10000.0);
  std::array<int, 3> sections = {4, 6, 6};
  Mat<double> x = random_mat(1, 16, rng);
  Mat<double> orig = x;
  Pos3 p{3, 7, 11};
  detail::apply_rope_row(x.row(0), 16, p, inv, sections, +1.0);
  double n0 = 0, n1 = 0;
  for (int i = 0; i < 16; ++i) {
    n0 += orig.data[i] * orig.data[i];
    n1 += x.data[i] * x.data[i];
  }
  CHECK(n1 == doctest::Approx(n0));
  detail::apply_rope_row(x.row(0), 16, p, inv, sections, -1.0);
  for (int i = 0; i < 16; ++i) CHECK(x.data[i] == doctest::Approx(orig.data[i]));
}

TEST_CASE("rope: relative property in pure-time section") {
  // With equal (h, w) and differing t, attention scores depend only on the
  // time offset for the time-section dims. Verify score invariance under a
  // global time shift.
  Rng rng(10);
  const auto inv = detail::rope_inv_freq(16, 10000.0);
  std::array<int, 3> sections = {4, 6, 6};
  Mat<double> q = random_mat(1, 16, rng);
  Mat<double> k = random_mat(1, 16, rng);
  auto score_at = [&](int tq, int tk) {
    Mat<double> qr = q, kr = k;
    detail::apply_rope_row(qr.row(0), 16, {tq, 5, 5}, inv, sections, +1.0);
    detail::apply_rope_row(kr.row(0), 16, {tk, 5, 5}, inv, sections, +1.0);
    double s = 0;
    for (int i = 0; i < 16; ++i) s += qr.data[i] * kr.data[i];
    return s;
  };
  CHECK(score_at(3, 1) == doctest::Approx(score_at(10, 8)));
}

TEST_CASE("gradients: cross_entropy ignores negative targets") {
  Rng rng(11);
  Mat<double> logits = random_mat(4, 6, rng);
  std::vector<int> targets = {2, -1, 0, 5};
  Graph<double> g;
  const int x = g.leaf(logits);
  const int loss = g.cross_entropy(x, targets);
  g.backward(loss);
  for (int c = 0; c < 6; ++c) CHECK(g.grad(x).at(1, c) == 0.0);
  check_grads({&logits}, [&](Graph<double>& g2, const std::vector<int>& n) {
    return g2.val(g2.cross_entropy(n[0], targets)).at(0, 0);
  });
}

TEST_CASE("cross_entropy matches a hand-computed two-class case") {
  Graph<double> g;
  Mat<double> logits(1, 2);
  logits.data = {1.0, -1.0};
  const int loss = g.cross_entropy(g.leaf(logits), {0});
  CHECK(g.val(loss).at(0, 0) == doctest::Approx(std::log(1.0 + std::exp(-2.0))));
}

TEST_CASE("no-grad graphs refuse backward") {
  Graph<float> g(false);
  Mat<float> x(1, 2);
  x.data = {0.5f, 1.5f};
  const int loss = g.cross_entropy(g.leaf(x), {1});
  CHECK_THROWS(g.backward(loss));
}
