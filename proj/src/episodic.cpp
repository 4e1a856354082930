#include "cpes/episodic.hpp"

#include <string>

#include "cpes/error.hpp"

namespace cpes {

namespace {

void check_spec(const EpisodeSpec& spec) {
  if (spec.n_way < 2) throw Error(ErrorCode::InvalidConfig, "n_way must be >= 2");
  if (spec.k_shot < 1) throw Error(ErrorCode::InvalidConfig, "k_shot must be >= 1");
  if (spec.queries_per_class < 1)
    throw Error(ErrorCode::InvalidConfig, "queries_per_class must be >= 1");
}

}  // namespace

Episode sample_episode(const EmbeddingStore& store, const EpisodeSpec& spec) {
  return sample_episode(store, ClassIndex(store), spec);
}

Episode sample_episode(const EmbeddingStore& store, const ClassIndex& index,
                       const EpisodeSpec& spec) {
  check_spec(spec);
  const auto& by_class = index.by_class();
  const std::size_t per_class = std::size_t{spec.k_shot} + spec.queries_per_class;

  std::vector<std::uint32_t> eligible;
  for (std::size_t c = 0; c < by_class.size(); ++c)
    if (!by_class[c].empty()) eligible.push_back(static_cast<std::uint32_t>(c));
  if (eligible.size() < spec.n_way)
    throw Error(ErrorCode::InsufficientClasses, "store has " + std::to_string(eligible.size()) +
                                                    " classes, episode needs " +
                                                    std::to_string(spec.n_way));

  Rng64 rng = rng_split(spec.base_seed, spec.task_index);
  Episode ep;
  for (auto pick : sample_without_replacement(rng, eligible.size(), spec.n_way))
    ep.class_map.push_back(eligible[pick]);

  ep.prototypes.reserve(spec.n_way);
  ep.queries.reserve(std::size_t{spec.n_way} * spec.queries_per_class);
  std::vector<const EmbeddingRecord*> supports;
  for (std::uint32_t local = 0; local < spec.n_way; ++local) {
    const auto& members = by_class[ep.class_map[local]];
    if (members.size() < per_class)
      throw Error(ErrorCode::InsufficientRecords,
                  "class " + std::to_string(ep.class_map[local]) + " has " +
                      std::to_string(members.size()) + " records, episode needs " +
                      std::to_string(per_class));
    const auto picks = sample_without_replacement(rng, members.size(), per_class);

    supports.clear();
    for (std::size_t i = 0; i < spec.k_shot; ++i) {
      ep.support_positions.push_back(members[picks[i]]);
      supports.push_back(&store.records[members[picks[i]]]);
      ep.support_ids.push_back(supports.back()->record_id);
    }
    auto proto = build_prototype(std::span<const EmbeddingRecord* const>(supports));
    proto.label = local;
    ep.prototypes.push_back(std::move(proto));

    for (std::size_t i = spec.k_shot; i < per_class; ++i) {
      ep.query_positions.push_back(members[picks[i]]);
      EmbeddingRecord q = store.records[members[picks[i]]];
      q.label = local;
      ep.queries.push_back(std::move(q));
    }
  }
  return ep;
}

EmbeddingRecord build_prototype(std::span<const EmbeddingRecord* const> supports) {
  if (supports.empty()) throw Error(ErrorCode::EmptyInput, "prototype of zero supports");
  const EmbeddingRecord& first = *supports.front();
  if (supports.size() == 1) return first;

  EmbeddingRecord proto = first;
  // Running mean: exact for identical supports, unlike sum-then-divide.
  for (std::size_t k = 1; k < supports.size(); ++k) {
    const auto* rec = supports[k];
    if (rec->dim != first.dim || rec->class_embedding.size() != first.class_embedding.size() ||
        rec->patches.size() != first.patches.size())
      throw Error(ErrorCode::DimensionMismatch, "support records differ in shape");
    const double w = 1.0 / static_cast<double>(k + 1);
    for (std::size_t i = 0; i < proto.class_embedding.size(); ++i)
      proto.class_embedding[i] += (rec->class_embedding[i] - proto.class_embedding[i]) * w;
    for (std::size_t i = 0; i < proto.patches.size(); ++i)
      proto.patches[i] += (rec->patches[i] - proto.patches[i]) * w;
  }
  return proto;
}

EmbeddingRecord build_prototype(std::span<const EmbeddingRecord> supports) {
  std::vector<const EmbeddingRecord*> ptrs;
  ptrs.reserve(supports.size());
  for (const auto& r : supports) ptrs.push_back(&r);
  return build_prototype(std::span<const EmbeddingRecord* const>(ptrs));
}

}  // namespace cpes
