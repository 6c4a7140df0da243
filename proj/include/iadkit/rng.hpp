#pragma once

#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <vector>

namespace iadkit {

// Counter-based deterministic randomness. Every consumer derives its own
// stream from (seed, tags...) so draws never depend on program order and
// any step of a run can be reconstructed in isolation.

inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_key(uint64_t a, uint64_t b) {
  return mix64(a ^ (0x9e3779b97f4a7c15ULL + b + (a << 6) + (a >> 2)));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : key_(mix64(seed)) {}
  Rng(uint64_t seed, std::initializer_list<uint64_t> tags) : key_(mix64(seed)) {
    for (uint64_t t : tags) key_ = hash_key(key_, t);
  }

  // Child stream; does not consume draws from this one.
  Rng derive(uint64_t tag) const { return Rng(Raw{}, hash_key(key_, tag)); }

  uint64_t u64() { return mix64(key_ + (++ctr_)); }

  // Uniform in [0, n). n must be > 0.
  uint64_t below(uint64_t n) { return u64() % n; }

  int range(int lo, int hi) {  // inclusive bounds
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo + 1)));
  }

  double uniform() {  // [0, 1)
    return static_cast<double>(u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u = 1.0 - uniform();
    double v = uniform();
    double r = std::sqrt(-2.0 * std::log(u));
    double a = 6.283185307179586 * v;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  uint64_t key() const { return key_; }

 private:
  struct Raw {};
  Rng(Raw, uint64_t key) : key_(key) {}

  uint64_t key_;
  uint64_t ctr_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace iadkit
