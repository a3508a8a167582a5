#pragma once

// Shared aliases, error types, random streams and a small parallel-for.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace mscl {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatF = Mat<float>;
using MatD = Mat<double>;
using Index = Eigen::Index;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual const char* kind() const noexcept { return "runtime"; }
};

#define MSCL_ERROR_KIND(Name, Kind)                                 \
  class Name : public Error {                                       \
   public:                                                          \
    using Error::Error;                                             \
    const char* kind() const noexcept override { return Kind; }     \
  };

MSCL_ERROR_KIND(ConfigError, "config")
MSCL_ERROR_KIND(ShapeError, "shape")
MSCL_ERROR_KIND(NumericError, "numeric")
MSCL_ERROR_KIND(RenderError, "render")
MSCL_ERROR_KIND(CorruptionError, "corruption")
MSCL_ERROR_KIND(IoError, "io")
MSCL_ERROR_KIND(ValidationError, "validation")

#undef MSCL_ERROR_KIND

// Mixes (seed, index) into an independent 64-bit stream seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

// Deterministic random source. The engine is the standard Mersenne twister;
// the distributions are written out so that draws do not depend on the
// standard library vendor.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed), seed_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_int(std::uint64_t n);
  double normal();
  // Independent child stream; does not advance this generator.
  Rng substream(std::uint64_t index) const { return Rng(derive_seed(seed_, index)); }
  // Child stream keyed on a fresh draw from this generator.
  Rng split() { return Rng(derive_seed(next_u64(), 0x5eedULL)); }

  std::uint64_t seed() const { return seed_; }

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Number of worker threads: MSCL_THREADS if set, otherwise hardware concurrency.
int worker_threads();

// Runs fn(i) for i in [0, n) over worker_threads() threads. Work is split in
// contiguous chunks; callers that reduce results do so in index order.
void parallel_for(int n, const std::function<void(int)>& fn);

template <typename T>
bool all_finite(const Mat<T>& m) {
  return m.allFinite();
}

template <typename T>
void require_finite(const Mat<T>& m, const std::string& where) {
  if (!m.allFinite()) throw NumericError("non-finite activation in " + where);
}

template <typename To, typename From>
Mat<To> cast_mat(const Mat<From>& m) {
  return m.template cast<To>();
}

}  // namespace mscl
