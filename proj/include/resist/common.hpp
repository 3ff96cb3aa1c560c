#pragma once

#include <cstdint>
#include <cstring>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace resist {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Training protocols supported by the simulator.
enum class Method { resist, local_sgd, data_parallel, ensemble };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::resist: return "resist";
    case Method::local_sgd: return "local_sgd";
    case Method::data_parallel: return "data_parallel";
    case Method::ensemble: return "ensemble";
  }
  return "?";
}

/// Thrown when a run's loss becomes non-finite or exceeds the divergence limit.
struct divergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thrown by aggregation when some block is held by no worker.
struct coverage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64 finalizer; avalanche-quality 64-bit mixing.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Stream tags keep RNG streams for distinct purposes disjoint.
namespace stream_tag {
inline constexpr std::uint64_t init = 0x696e697400000000ULL;
inline constexpr std::uint64_t partition = 0x7061727469746f6eULL;
inline constexpr std::uint64_t local = 0x6c6f63616c000000ULL;
inline constexpr std::uint64_t shard = 0x7368617264000000ULL;
inline constexpr std::uint64_t teacher = 0x7465616368657200ULL;
inline constexpr std::uint64_t eval = 0x6576616c00000000ULL;
inline constexpr std::uint64_t data = 0x6461746100000000ULL;
}  // namespace stream_tag

/// Counter-style stream derivation: a pure function of (seed, a, b, tag), so
/// streams are reproducible independent of call order.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a,
                                 std::uint64_t b, std::uint64_t tag) {
  std::uint64_t h = mix64(seed ^ 0x243f6a8885a308d3ULL);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ tag);
  return h;
}

/// Deterministic RNG. The engine is std::mt19937_64 (bit-exact by the
/// standard); the variate transforms are spelled out here because the
/// standard library's distributions are implementation-defined.
class DetRng {
 public:
  explicit DetRng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform01() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n), unbiased via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform01();  // (0, 1]
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

  /// k distinct indices from [0, n), in draw order.
  std::vector<int> sample_without_replacement(int k, int n) {
    std::vector<int> pool(n);
    for (int i = 0; i < n; ++i) pool[i] = i;
    std::vector<int> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) {
      const std::uint64_t j = i + below(static_cast<std::uint64_t>(n - i));
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

/// FNV-1a over raw bytes; used for cheap trajectory fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a(const Matrix& m, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
}

inline std::uint64_t fnv1a(const Vector& v, std::uint64_t h = 0xcbf29ce484222325ULL) {
  return fnv1a(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()), h);
}

inline bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(),
                      sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}

inline bool bitwise_equal(const Vector& a, const Vector& b) {
  return a.size() == b.size() &&
         (a.size() == 0 ||
          std::memcmp(a.data(), b.data(),
                      sizeof(double) * static_cast<std::size_t>(a.size())) == 0);
}

}  // namespace resist
