#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace cpes {

using Vec64 = std::vector<double>;

// Row-major dense matrix.
struct Mat64 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Mat64() = default;
  Mat64(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }

  Mat64 transposed() const;
  bool operator==(const Mat64&) const = default;
};

// Norms below this are treated as zero by cosine().
inline constexpr double kDegenerateNorm = 1e-12;

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> u);

// u.v / (|u||v|); 0 when either norm is below kDegenerateNorm.
double cosine(std::span<const double> u, std::span<const double> v);

// Numerically stable (max-subtracted) softmax.
Vec64 softmax(std::span<const double> scores);

// -ln(probs[target]) with probs clamped below at 1e-300.
double cross_entropy(std::span<const double> probs, std::size_t target);

bool all_finite(std::span<const double> values) noexcept;

/// SplitMix64 generator. Portable: every platform sees the same stream for
/// a given state, and all derived distributions below are implemented here
/// rather than through <random> (whose distributions are
/// implementation-defined).
class Rng64 {
 public:
  using result_type = std::uint64_t;

  explicit Rng64(std::uint64_t state = 0) noexcept : state_(state) {}

  std::uint64_t next() noexcept;
  std::uint64_t operator()() noexcept { return next(); }
  static constexpr std::uint64_t min() noexcept { return 0; }
  static constexpr std::uint64_t max() noexcept { return ~std::uint64_t{0}; }

  // Uniform in [0, 1) with 53 bits.
  double uniform() noexcept;
  // Uniform in [lo, hi).
  double uniform(double lo, double hi) noexcept;
  // Unbiased integer in [0, bound). bound must be > 0.
  std::uint64_t below(std::uint64_t bound) noexcept;
  // Standard normal (Box-Muller, one value per call).
  double normal() noexcept;

  std::uint64_t state() const noexcept { return state_; }

 private:
  std::uint64_t state_;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

// Child generator that depends only on (seed, index).
Rng64 rng_split(std::uint64_t seed, std::uint64_t index) noexcept;

// k distinct values from [0, n) in draw order (partial Fisher-Yates).
std::vector<std::size_t> sample_without_replacement(Rng64& rng, std::size_t n, std::size_t k);

}  // namespace cpes
