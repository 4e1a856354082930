#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "cpes/numerics.hpp"

namespace cpes {

// One image: class embedding plus M patch embeddings of length D.
struct EmbeddingRecord {
  std::uint64_t record_id = 0;
  std::uint32_t label = 0;
  std::size_t dim = 0;
  Vec64 class_embedding;  // dim
  Vec64 patches;          // patch_count() x dim, row-major

  std::size_t patch_count() const { return dim == 0 ? 0 : patches.size() / dim; }
  std::span<const double> patch(std::size_t j) const { return {patches.data() + j * dim, dim}; }
  std::span<double> patch(std::size_t j) { return {patches.data() + j * dim, dim}; }

  bool operator==(const EmbeddingRecord&) const = default;
};

struct EmbeddingStore {
  std::uint32_t dim_d = 0;
  std::uint32_t patches_m = 0;
  std::uint32_t class_count = 0;
  std::vector<EmbeddingRecord> records;
  // Per-record signal patch indices; present only for synthetic stores.
  std::optional<std::vector<std::vector<std::uint16_t>>> ground_truth;

  bool operator==(const EmbeddingStore&) const = default;
};

// Throws InvalidStore on any broken invariant, NonFiniteValue on NaN/Inf.
void validate(const EmbeddingStore& store);

// Record positions grouped by label, in store order.
std::vector<std::vector<std::size_t>> records_by_class(const EmbeddingStore& store);

std::optional<std::size_t> find_record(const EmbeddingStore& store, std::uint64_t record_id);

// Every value rounded through float, i.e. what a write/read cycle yields.
EmbeddingStore round_to_f32(EmbeddingStore store);

// CPEM format: little-endian header, f32 payload, optional ground-truth tail.
inline constexpr char kStoreMagic[4] = {'C', 'P', 'E', 'M'};
inline constexpr std::uint16_t kStoreVersion = 1;
inline constexpr std::size_t kStoreHeaderBytes = 4 + 2 + 2 + 4 + 4 + 4 + 8;

std::uint64_t write_store(const EmbeddingStore& store, std::ostream& out);
EmbeddingStore read_store(std::istream& in);

std::uint64_t write_store_file(const EmbeddingStore& store, const std::filesystem::path& path);
EmbeddingStore read_store_file(const std::filesystem::path& path);

struct SyntheticConfig {
  std::uint32_t class_count = 5;
  std::uint32_t records_per_class = 20;
  std::uint32_t dim = 32;
  std::uint32_t patches = 16;
  std::uint32_t signal_patches = 4;
  double signal_noise = 0.1;
  std::uint32_t distractor_pool_size = 8;
  double distractor_noise = 0.1;
  std::uint64_t seed = 0;
};

/// Planted-signal store. Each class c owns a unit direction g_c; a pool of B
/// distractor directions is Gram-Schmidt orthonormalized against the signal
/// span (and each other). Every record places s noisy copies of g_c at random
/// patch positions (recorded as ground truth), fills the rest with noisy
/// distractors drawn from the shared pool, and uses the patch mean as its
/// class embedding.
///
/// Throws InvalidConfig for out-of-range fields and InfeasibleConfig when
/// B + C > D.
EmbeddingStore generate_synthetic(const SyntheticConfig& cfg);

}  // namespace cpes
