#include "cpes/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "cpes/error.hpp"

namespace cpes {

std::string_view to_string(DistanceKind kind) noexcept {
  switch (kind) {
    case DistanceKind::Cos: return "cos";
    case DistanceKind::Dot: return "dot";
    case DistanceKind::Abs: return "abs";
    case DistanceKind::Sqr: return "sqr";
  }
  return "cos";
}

std::optional<DistanceKind> parse_distance(std::string_view name) noexcept {
  for (auto kind : kAllDistanceKinds)
    if (to_string(kind) == name) return kind;
  return std::nullopt;
}

double similarity(std::span<const double> u, std::span<const double> v, DistanceKind kind) {
  if (u.size() != v.size()) throw Error(ErrorCode::DimensionMismatch, "similarity operands differ");
  switch (kind) {
    case DistanceKind::Cos:
      return cosine(u, v);
    case DistanceKind::Dot:
      return dot(u, v);
    case DistanceKind::Abs: {
      double acc = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) acc += std::abs(u[i] - v[i]);
      return -acc;
    }
    case DistanceKind::Sqr: {
      double acc = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) acc += (u[i] - v[i]) * (u[i] - v[i]);
      return -acc;
    }
  }
  return 0.0;
}

Vec64 similarity_sequence(const EmbeddingRecord& record, DistanceKind kind) {
  const std::size_t m = record.patch_count();
  Vec64 out(m);
  for (std::size_t j = 0; j < m; ++j) out[j] = similarity(record.class_embedding, record.patch(j), kind);
  return out;
}

SelectionResult select_top(Vec64 similarities, std::size_t m) {
  if (m > similarities.size())
    throw Error(ErrorCode::SelectionOutOfRange, "m = " + std::to_string(m) + " exceeds M = " +
                                                    std::to_string(similarities.size()));
  std::vector<std::size_t> order(similarities.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const auto& s = similarities;
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(m), order.end(),
                    [&s](std::size_t a, std::size_t b) { return s[a] > s[b] || (s[a] == s[b] && a < b); });
  order.resize(m);
  return {std::move(order), std::move(similarities)};
}

FusedRepresentation fuse(const EmbeddingRecord& record, const SelectionResult& selection) {
  const std::size_t d = record.dim;
  FusedRepresentation out;
  out.dim = d;
  if (selection.indices.empty()) {
    out.rows = Mat64(1, d);
    std::copy(record.class_embedding.begin(), record.class_embedding.end(), out.rows.values.begin());
    return out;
  }
  const std::size_t count = record.patch_count();
  out.rows = Mat64(selection.indices.size(), d);
  for (std::size_t k = 0; k < selection.indices.size(); ++k) {
    const std::size_t j = selection.indices[k];
    if (j >= count)
      throw Error(ErrorCode::IndexOutOfRange,
                  "patch index " + std::to_string(j) + " with M = " + std::to_string(count));
    const auto patch = record.patch(j);
    auto row = out.rows.row(k);
    for (std::size_t i = 0; i < d; ++i) row[i] = patch[i] + kFusionWeight * record.class_embedding[i];
  }
  out.source_indices = selection.indices;
  return out;
}

FusedRepresentation select_and_fuse(const EmbeddingRecord& record, std::size_t m,
                                    DistanceKind kind) {
  return fuse(record, select_top(similarity_sequence(record, kind), m));
}

std::string mask_json(const EmbeddingRecord& record, const SelectionResult& selection) {
  nlohmann::json j;
  j["record_id"] = record.record_id;
  j["m"] = selection.indices.size();
  j["indices"] = selection.indices;
  j["similarities"] = selection.similarities;
  return j.dump(2) + "\n";
}

std::optional<std::string> mask_pgm(std::size_t patch_count, const SelectionResult& selection) {
  const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(patch_count))));
  if (side * side != patch_count) return std::nullopt;
  std::vector<int> cells(patch_count, 0);
  for (auto j : selection.indices) {
    if (j >= patch_count) throw Error(ErrorCode::IndexOutOfRange, "mask index out of range");
    cells[j] = 255;
  }
  std::ostringstream out;
  out << "P2\n" << side << ' ' << side << "\n255\n";
  for (std::size_t r = 0; r < side; ++r) {
    for (std::size_t c = 0; c < side; ++c) out << (c ? " " : "") << cells[r * side + c];
    out << '\n';
  }
  return out.str();
}

}  // namespace cpes
