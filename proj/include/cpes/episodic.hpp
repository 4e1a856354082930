#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpes/embed_store.hpp"

namespace cpes {

inline constexpr std::uint32_t kDefaultQueriesPerClass = 15;

struct EpisodeSpec {
  std::uint32_t n_way = 5;
  std::uint32_t k_shot = 1;
  std::uint32_t queries_per_class = kDefaultQueriesPerClass;
  std::uint64_t task_index = 0;
  std::uint64_t base_seed = 0;
};

struct Episode {
  // class_map[n] is the store label behind episode-local class n.
  std::vector<std::uint32_t> class_map;
  // One averaged support record per local class; label = local class.
  std::vector<EmbeddingRecord> prototypes;
  // n_way * queries_per_class records, label = local class.
  std::vector<EmbeddingRecord> queries;
  std::vector<std::uint64_t> support_ids;
  // Store positions of the sampled records, K per class and Q per class.
  std::vector<std::size_t> support_positions;
  std::vector<std::size_t> query_positions;
};

// Precomputed label -> record positions, reusable across many episodes.
class ClassIndex {
 public:
  explicit ClassIndex(const EmbeddingStore& store) : by_class_(records_by_class(store)) {}
  const std::vector<std::vector<std::size_t>>& by_class() const { return by_class_; }

 private:
  std::vector<std::vector<std::size_t>> by_class_;
};

// Deterministic in (store, spec): all randomness comes from
// rng_split(base_seed, task_index).
Episode sample_episode(const EmbeddingStore& store, const EpisodeSpec& spec);
Episode sample_episode(const EmbeddingStore& store, const ClassIndex& index,
                       const EpisodeSpec& spec);

// Position-wise mean of the class embeddings and of each patch slot.
EmbeddingRecord build_prototype(std::span<const EmbeddingRecord> supports);
EmbeddingRecord build_prototype(std::span<const EmbeddingRecord* const> supports);

}  // namespace cpes
