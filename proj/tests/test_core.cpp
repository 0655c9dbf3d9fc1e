#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "core/checksum.hpp"
#include "core/config.hpp"
#include "core/image.hpp"
#include "core/rng.hpp"

using namespace countlab;

TEST_CASE("rng: identical seeds give identical streams, different seeds diverge") {
  Rng a(123), b(123), c(124);
  bool same = true, diff = false;
  for (int i = 0; i < 1000; ++i) {
    const uint64_t x = a.next_u64(), y = b.next_u64(), z = c.next_u64();
    if (x != y) same = false;
    if (x != z) diff = true;
  }
  CHECK(same);
  CHECK(diff);
}

TEST_CASE("rng: bounded draws are in range and roughly uniform") {
  Rng rng(7);
  const int buckets = 10;
  const int draws = 100000;
  std::vector<long> counts(buckets, 0);
  for (int i = 0; i < draws; ++i) {
    const uint64_t v = rng.bounded(buckets);
    REQUIRE(v < static_cast<uint64_t>(buckets));
    ++counts[v];
  }
  // Chi-squared against uniform; 9 dof, 99.9th percentile ~ 27.9.
  const double expect = static_cast<double>(draws) / buckets;
  double chi2 = 0;
  for (long k : counts) chi2 += (k - expect) * (k - expect) / expect;
  CHECK(chi2 < 27.9);
}

TEST_CASE("rng: range endpoints are reachable and respected") {
  Rng rng(9);
  std::set<int64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const int64_t v = rng.range(-3, 3);
    REQUIRE(v >= -3);
    REQUIRE(v <= 3);
    seen.insert(v);
  }
  CHECK(seen.size() == 7);
}

TEST_CASE("rng: uniform stays in [0,1), normal has sane moments") {
  Rng rng(11);
  double sum = 0, sq = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
  }
  for (int i = 0; i < n; ++i) {
    const double g = rng.normal();
    sum += g;
    sq += g * g;
  }
  CHECK(std::abs(sum / n) < 0.02);
  CHECK(std::abs(sq / n - 1.0) < 0.03);
}

TEST_CASE("rng: shuffle permutes, sample_without_replacement is distinct and in range") {
  Rng rng(13);
  std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  auto sorted = v;
  rng.shuffle(v);
  auto copy = v;
  std::sort(copy.begin(), copy.end());
  CHECK(copy == sorted);

  const auto picks = rng.sample_without_replacement(50, 20);
  REQUIRE(picks.size() == 20);
  std::set<int> uniq(picks.begin(), picks.end());
  CHECK(uniq.size() == 20);
  for (int p : picks) {
    CHECK(p >= 0);
    CHECK(p < 50);
  }
}

TEST_CASE("mix_seed: distinct inputs give distinct well-spread outputs") {
  std::set<uint64_t> seen;
  for (uint64_t a = 0; a < 50; ++a)
    for (uint64_t b = 0; b < 50; ++b) seen.insert(mix_seed(a, b));
  CHECK(seen.size() == 2500);
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}

TEST_CASE("checksum: fnv1a matches reference vectors and measures order") {
  // Reference values for the 64-bit FNV-1a of "" and "a".
  CHECK(fnv1a64(std::string("")) == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64(std::string("ab")) != fnv1a64(std::string("ba")));
  // Chaining matches one-shot hashing of the concatenation.
  const uint64_t chained = fnv1a64(std::string("cd"), fnv1a64(std::string("ab")));
  CHECK(chained == fnv1a64(std::string("abcd")));
  CHECK(checksum_hex(0x1234abcdULL).size() == 16);
}

TEST_CASE("config: sections, types, fallbacks, and round trip") {
  const std::string text =
      "# comment\n[run]\nseed = 42\nname = desk run\n\n[train]\nlr = 1e-3\nflag = true\n";
  Config c = Config::parse_text(text);
  CHECK(c.get_int("run.seed") == 42);
  CHECK(c.get_str("run.name") == "desk run");
  CHECK(c.get_real("train.lr") == doctest::Approx(1e-3));
  CHECK(c.get_bool("train.flag", false));
  CHECK(c.get_int("run.missing", 7) == 7);
  CHECK_THROWS(c.get_int("run.missing"));
  CHECK_THROWS(c.get_int("run.name"));

  Config again = Config::parse_text(c.to_text());
  CHECK(again.values() == c.values());
}

TEST_CASE("png: write/read round trip preserves every pixel") {
  Image img(17, 23, 250, 250, 245);
  Rng rng(3);
  for (int r = 0; r < img.height; ++r)
    for (int cc = 0; cc < img.width; ++cc)
      img.set(r, cc, static_cast<uint8_t>(rng.bounded(256)), static_cast<uint8_t>(rng.bounded(256)),
              static_cast<uint8_t>(rng.bounded(256)));
  const std::string path =
      (std::filesystem::temp_directory_path() / "countlab_png_roundtrip.png").string();
  write_png(path, img);
  const Image back = read_png(path);
  REQUIRE(back.height == img.height);
  REQUIRE(back.width == img.width);
  CHECK(back.pixels == img.pixels);
  std::filesystem::remove(path);
}

TEST_CASE("png: deterministic bytes for identical images") {
  Image img(8, 8, 10, 20, 30);
  const auto tmp = std::filesystem::temp_directory_path();
  const std::string p1 = (tmp / "countlab_det_1.png").string();
  const std::string p2 = (tmp / "countlab_det_2.png").string();
  write_png(p1, img);
  write_png(p2, img);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
  CHECK(!b1.empty());
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}
