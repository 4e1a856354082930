#include "cpes/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "cpes/error.hpp"

namespace cpes {

Mat64 Mat64::transposed() const {
  Mat64 out(cols, rows);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out(c, r) = (*this)(r, c);
  return out;
}

double dot(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw Error(ErrorCode::DimensionMismatch,
                "dot of lengths " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) acc += u[i] * v[i];
  return acc;
}

double norm(std::span<const double> u) {
  double acc = 0.0;
  for (double x : u) acc += x * x;
  return std::sqrt(acc);
}

double cosine(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw Error(ErrorCode::DimensionMismatch,
                "cosine of lengths " + std::to_string(u.size()) + " and " + std::to_string(v.size()));
  if (u.empty()) throw Error(ErrorCode::EmptyInput, "cosine of empty vectors");
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu < kDegenerateNorm || nv < kDegenerateNorm) return 0.0;
  const double c = dot(u, v) / (nu * nv);
  return std::clamp(c, -1.0, 1.0);
}

Vec64 softmax(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::EmptyInput, "softmax of empty score vector");
  const double peak = *std::max_element(scores.begin(), scores.end());
  Vec64 out(scores.size());
  double total = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::exp(scores[i] - peak);
    total += out[i];
  }
  for (double& p : out) p /= total;
  return out;
}

double cross_entropy(std::span<const double> probs, std::size_t target) {
  if (target >= probs.size())
    throw Error(ErrorCode::IndexOutOfRange, "target " + std::to_string(target) + " with " +
                                                std::to_string(probs.size()) + " classes");
  return -std::log(std::max(probs[target], 1e-300));
}

bool all_finite(std::span<const double> values) noexcept {
  return std::all_of(values.begin(), values.end(), [](double x) { return std::isfinite(x); });
}

std::uint64_t mix64(std::uint64_t x) noexcept {
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ULL;
  x ^= x >> 27;
  x *= 0x94d049bb133111ebULL;
  x ^= x >> 31;
  return x;
}

namespace {
constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;
}

std::uint64_t Rng64::next() noexcept {
  state_ += kGolden;
  return mix64(state_);
}

double Rng64::uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng64::uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng64::below(std::uint64_t bound) noexcept {
  // Rejection on the top of the range keeps every residue equally likely.
  const std::uint64_t limit = max() - max() % bound;
  std::uint64_t x;
  do {
    x = next();
  } while (x >= limit);
  return x % bound;
}

double Rng64::normal() noexcept {
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

Rng64 rng_split(std::uint64_t seed, std::uint64_t index) noexcept {
  return Rng64(mix64(mix64(seed) ^ mix64(index * kGolden + 0x632be59bd9b4e019ULL)));
}

std::vector<std::size_t> sample_without_replacement(Rng64& rng, std::size_t n, std::size_t k) {
  if (k > n)
    throw Error(ErrorCode::IndexOutOfRange,
                "cannot draw " + std::to_string(k) + " of " + std::to_string(n));
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  return pool;
}

}  // namespace cpes
