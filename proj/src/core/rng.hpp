#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace countlab {

// All sampling goes through this wrapper instead of <random> distributions:
// std::mt19937_64 is bit-exact across platforms, the distribution classes
// are not. Every generated record must be reproducible from (seed, index)
// alone, on any machine.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // Uniform over [0, n). Modulo rejection keeps the draw unbiased.
  uint64_t bounded(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - (UINT64_MAX % n);
    uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return r % n;
  }

  // Uniform over the inclusive range [lo, hi].
  int64_t range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(bounded(static_cast<uint64_t>(hi - lo + 1)));
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  // Box-Muller; the spare value is kept so draws stay cheap.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    const double mag = std::sqrt(-2.0 * std::log(u1));
    const double two_pi = 6.283185307179586476925286766559;
    spare_ = mag * std::sin(two_pi * u2);
    have_spare_ = true;
    return mag * std::cos(two_pi * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(bounded(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Sample k distinct indices from [0, n) in selection order.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
      const int j = static_cast<int>(bounded(static_cast<uint64_t>(n - i)));
      out.push_back(pool[j]);
      std::swap(pool[j], pool[n - 1 - i]);
    }
    return out;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive independent per-record seeds from
// (dataset seed, record index) without correlated streams.
inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace countlab
