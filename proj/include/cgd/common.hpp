#pragma once

// Shared plumbing: error types, deterministic RNG, seed streams, tokenization.

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace cgd {

inline constexpr std::string_view kToolkitVersion = "0.3.0";

/// Base class of every toolkit error. `kind()` is a stable machine-readable tag.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define CGD_DEFINE_ERROR(Name)                                                \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(#Name, what) {}            \
  };

CGD_DEFINE_ERROR(InsufficientData)
CGD_DEFINE_ERROR(DegenerateInput)
CGD_DEFINE_ERROR(SingleClassData)
CGD_DEFINE_ERROR(NoPositives)
CGD_DEFINE_ERROR(NoCandidates)
CGD_DEFINE_ERROR(MisalignedInputs)
CGD_DEFINE_ERROR(MissingFallback)
CGD_DEFINE_ERROR(EncoderFailure)
CGD_DEFINE_ERROR(GeneratorFailure)
CGD_DEFINE_ERROR(NoEligibleCandidates)
CGD_DEFINE_ERROR(ConfigError)
CGD_DEFINE_ERROR(AdapterError)
CGD_DEFINE_ERROR(MissingCheckpoint)
CGD_DEFINE_ERROR(DanglingAnnotation)

#undef CGD_DEFINE_ERROR

/// Schema violation while reading a line-oriented file.
class MalformedRecord : public Error {
 public:
  MalformedRecord(std::size_t line, const std::string& reason)
      : Error("MalformedRecord", "line " + std::to_string(line) + ": " + reason), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// ---------------------------------------------------------------------------
// Hashing and seed streams

/// 64-bit FNV-1a.
constexpr std::uint64_t fnv1a64(std::string_view data,
                                std::uint64_t h = 0xcbf29ce484222325ULL) noexcept {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent seed for a named stream: splitmix64(seed ^ fnv1a64(name)).
/// Streams used by the toolkit: "split", "negatives", "batching", "selection",
/// "perturbation", "synthesis", "evaluation".
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) noexcept {
  return splitmix64(seed ^ fnv1a64(stream));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream,
                                    std::uint64_t index) noexcept {
  return splitmix64(derive_seed(seed, stream) + splitmix64(index));
}

/// Deterministic RNG. The engine is mt19937_64 (output fixed by the standard); the
/// distributions are implemented here so results do not depend on the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  /// Uniform double in [0, 1) with 53 bits of randomness.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  bool bernoulli(double p) { return uniform() < p; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Index drawn from unnormalized non-negative weights.
  std::size_t categorical(const std::vector<double>& weights) {
    double total = 0.0;
    for (double w : weights) total += w;
    double x = uniform() * total;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      if (x < weights[i]) return i;
      x -= weights[i];
    }
    for (std::size_t i = weights.size(); i > 0; --i)
      if (weights[i - 1] > 0.0) return i - 1;
    return 0;
  }

 private:
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Text helpers

/// Whitespace tokenization on raw text (no case folding).
inline std::vector<std::string> whitespace_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && static_cast<unsigned char>(text[i]) <= ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && static_cast<unsigned char>(text[j]) > ' ') ++j;
    if (j > i) out.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out += sep;
    out += parts[i];
  }
  return out;
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Runs body(i) for i in [0, n). The CLI installs a thread-pool implementation;
/// library code only calls through this hook.
using ParallelFor = std::function<void(std::size_t, const std::function<void(std::size_t)>&)>;

inline void serial_for(std::size_t n, const std::function<void(std::size_t)>& body) {
  for (std::size_t i = 0; i < n; ++i) body(i);
}

/// Parallel loop over `jobs` threads sharing one counter. The first exception thrown by
/// any body is rethrown after all threads join.
inline ParallelFor threaded_for(unsigned jobs) {
  if (jobs <= 1) return serial_for;
  return [jobs](std::size_t n, const std::function<void(std::size_t)>& body) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto worker = [&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    };
    {
      std::vector<std::jthread> pool;
      for (unsigned k = 1; k < std::min<std::size_t>(jobs, n); ++k) pool.emplace_back(worker);
      worker();
    }
    if (error) std::rethrow_exception(error);
  };
}

}  // namespace cgd
