#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cpes/embed_store.hpp"
#include "cpes/numerics.hpp"

namespace cpes {

// How a patch is compared against its image's class embedding. ABS and SQR
// are distances and are negated, so larger always means more relevant.
enum class DistanceKind { Cos, Dot, Abs, Sqr };

std::string_view to_string(DistanceKind kind) noexcept;
std::optional<DistanceKind> parse_distance(std::string_view name) noexcept;
inline constexpr DistanceKind kAllDistanceKinds[] = {DistanceKind::Cos, DistanceKind::Dot,
                                                     DistanceKind::Abs, DistanceKind::Sqr};

double similarity(std::span<const double> u, std::span<const double> v, DistanceKind kind);

// Entry j compares the class embedding with patch j.
Vec64 similarity_sequence(const EmbeddingRecord& record, DistanceKind kind);

struct SelectionResult {
  std::vector<std::size_t> indices;  // descending similarity, ties by ascending index
  Vec64 similarities;                // full length-M sequence
};

// Top m entries of `similarities`. m == 0 yields no indices; m > M throws
// SelectionOutOfRange.
SelectionResult select_top(Vec64 similarities, std::size_t m);

// Fused rows, one per selected patch: patch + kFusionWeight * class.
struct FusedRepresentation {
  std::size_t dim = 0;
  Mat64 rows;
  std::vector<std::size_t> source_indices;

  std::size_t row_count() const { return rows.rows; }
};

inline constexpr double kFusionWeight = 2.0;

// An empty selection falls back to the class embedding as a single row.
FusedRepresentation fuse(const EmbeddingRecord& record, const SelectionResult& selection);

// similarity_sequence -> select_top -> fuse.
FusedRepresentation select_and_fuse(const EmbeddingRecord& record, std::size_t m,
                                    DistanceKind kind);

// Mask artifacts: {record_id, m, indices, similarities} as JSON, and a P2
// PGM (selected = 255) when M is a perfect square.
std::string mask_json(const EmbeddingRecord& record, const SelectionResult& selection);
std::optional<std::string> mask_pgm(std::size_t patch_count, const SelectionResult& selection);

}  // namespace cpes
