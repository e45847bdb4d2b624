#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ega {

// ---------------------------------------------------------------------------
// Error taxonomy. Everything user-facing derives from Error so the CLI can
// map failures onto its exit-code contract.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };
struct LabelError : Error { using Error::Error; };
struct GraphError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

namespace detail {
inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Deterministic randomness. std::mt19937_64 is fully specified by the
// standard; the distributions are not, so we derive variates from raw engine
// bits ourselves. Same seed -> same stream on every platform.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
  return splitmix64(a ^ splitmix64(b));
}

class RandomSource {
 public:
  explicit RandomSource(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ULL)) {}

  uint64_t next_u64() {
    state_ = splitmix64(state_ + 0x9e3779b97f4a7c15ULL);
    return state_;
  }

  // uniform in [0, 1) with 24 bits of mantissa
  float uniform() { return float(next_u64() >> 40) * 0x1p-24f; }

  float uniform_in(float lo, float hi) { return lo + (hi - lo) * uniform(); }

  // unbiased integer in [0, n)
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) throw ContractError("uniform_int: n must be positive");
    uint64_t mask = ~0ULL;
    uint64_t limit = mask - mask % n;
    uint64_t r;
    do { r = next_u64(); } while (r >= limit);
    return r % n;
  }

  // Box-Muller on engine bits
  float normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    float u1 = uniform(), u2 = uniform();
    // keep u1 away from 0 so log() stays finite
    u1 = u1 < 1e-12f ? 1e-12f : u1;
    float r = std::sqrt(-2.0f * std::log(u1));
    float a = 6.28318530717958647692f * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = size_t(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  float spare_ = 0.0f;
};

// ---------------------------------------------------------------------------
// Thread partitioning for kernels. Reduction order never depends on the
// thread count, so results are bit-identical for any EGA_THREADS setting.
// ---------------------------------------------------------------------------

inline int thread_count() {
  static const int n = [] {
    if (const char* env = std::getenv("EGA_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return v;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return int(hw == 0 ? 1 : (hw > 16 ? 16 : hw));
  }();
  return n;
}

// Runs fn(begin, end) on disjoint chunks of [0, n). Writers must touch
// disjoint state per index; no reductions happen here.
inline void parallel_chunks(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
  int t = thread_count();
  if (n <= 0) return;
  if (t <= 1 || n == 1) {
    fn(0, n);
    return;
  }
  int workers = int(t < n ? t : n);
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    int64_t b = w * chunk, e = std::min<int64_t>(n, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] { fn(b, e); });
  }
  fn(0, std::min<int64_t>(n, chunk));
  for (auto& th : pool) th.join();
}

inline bool is_finite(float v) { return std::isfinite(v); }

}  // namespace ega
