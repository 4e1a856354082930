#include "cpes/embed_store.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <string>

#include "binary_io.hpp"
#include "cpes/error.hpp"

namespace cpes {

void validate(const EmbeddingStore& store) {
  const std::size_t d = store.dim_d;
  const std::size_t m = store.patches_m;
  if (d == 0) throw Error(ErrorCode::InvalidStore, "dim_d must be positive");
  std::vector<bool> seen(store.class_count, false);
  for (const auto& rec : store.records) {
    const std::string where = "record " + std::to_string(rec.record_id);
    if (rec.label >= store.class_count)
      throw Error(ErrorCode::InvalidStore, where + " label " + std::to_string(rec.label) +
                                               " >= class_count " +
                                               std::to_string(store.class_count));
    if (rec.dim != d || rec.class_embedding.size() != d || rec.patches.size() != m * d)
      throw Error(ErrorCode::InvalidStore, where + " shape does not match store");
    if (!all_finite(rec.class_embedding) || !all_finite(rec.patches))
      throw Error(ErrorCode::NonFiniteValue, where + " has non-finite entries");
    seen[rec.label] = true;
  }
  if (!store.records.empty()) {
    for (std::size_t c = 0; c < seen.size(); ++c)
      if (!seen[c])
        throw Error(ErrorCode::InvalidStore, "class " + std::to_string(c) + " has no records");
  }
  if (store.ground_truth) {
    if (store.ground_truth->size() != store.records.size())
      throw Error(ErrorCode::InvalidStore, "ground truth does not cover every record");
    for (const auto& idx : *store.ground_truth) {
      std::set<std::uint16_t> uniq(idx.begin(), idx.end());
      if (uniq.size() != idx.size())
        throw Error(ErrorCode::InvalidStore, "duplicate ground-truth index");
      if (!idx.empty() && *uniq.rbegin() >= m)
        throw Error(ErrorCode::InvalidStore, "ground-truth index out of range");
    }
  }
}

std::vector<std::vector<std::size_t>> records_by_class(const EmbeddingStore& store) {
  std::vector<std::vector<std::size_t>> by_class(store.class_count);
  for (std::size_t i = 0; i < store.records.size(); ++i) {
    const auto label = store.records[i].label;
    if (label >= store.class_count)
      throw Error(ErrorCode::InvalidStore, "label out of range");
    by_class[label].push_back(i);
  }
  return by_class;
}

std::optional<std::size_t> find_record(const EmbeddingStore& store, std::uint64_t record_id) {
  for (std::size_t i = 0; i < store.records.size(); ++i)
    if (store.records[i].record_id == record_id) return i;
  return std::nullopt;
}

EmbeddingStore round_to_f32(EmbeddingStore store) {
  auto round = [](Vec64& v) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  };
  for (auto& rec : store.records) {
    round(rec.class_embedding);
    round(rec.patches);
  }
  return store;
}

using detail::ByteReader;
using detail::ByteWriter;
using detail::slurp;

std::uint64_t write_store(const EmbeddingStore& store, std::ostream& out) {
  validate(store);
  if (store.ground_truth && store.patches_m > 0xffffu)
    throw Error(ErrorCode::InvalidStore, "ground truth requires patches_m <= 65535");

  ByteWriter w;
  w.put_raw(kStoreMagic, 4);
  w.put<std::uint16_t>(kStoreVersion);
  w.put<std::uint16_t>(store.ground_truth ? 1u : 0u);
  w.put<std::uint32_t>(store.dim_d);
  w.put<std::uint32_t>(store.patches_m);
  w.put<std::uint32_t>(store.class_count);
  w.put<std::uint64_t>(store.records.size());
  for (const auto& rec : store.records) {
    w.put<std::uint64_t>(rec.record_id);
    w.put<std::uint32_t>(rec.label);
    for (double x : rec.class_embedding) w.put_f32(x);
    for (double x : rec.patches) w.put_f32(x);
  }
  if (store.ground_truth) {
    for (const auto& idx : *store.ground_truth) {
      w.put<std::uint16_t>(static_cast<std::uint16_t>(idx.size()));
      for (auto i : idx) w.put<std::uint16_t>(i);
    }
  }
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw Error(ErrorCode::IoFailure, "write failed");
  return w.bytes().size();
}

EmbeddingStore read_store(std::istream& in) {
  ByteReader r(slurp(in));
  char magic[4];
  r.get_raw(magic, 4);
  if (std::memcmp(magic, kStoreMagic, 4) != 0)
    throw Error(ErrorCode::BadMagic, "not a CPEM store");
  const auto version = r.get<std::uint16_t>();
  if (version != kStoreVersion)
    throw Error(ErrorCode::UnsupportedVersion, "CPEM version " + std::to_string(version));
  const auto flags = r.get<std::uint16_t>();

  EmbeddingStore store;
  store.dim_d = r.get<std::uint32_t>();
  store.patches_m = r.get<std::uint32_t>();
  store.class_count = r.get<std::uint32_t>();
  const auto count = r.get<std::uint64_t>();

  const std::uint64_t d = store.dim_d;
  const std::uint64_t m = store.patches_m;
  const std::uint64_t record_bytes = 8 + 4 + 4 * d * (1 + m);
  if (count > 0 && r.remaining() / record_bytes < count)
    throw Error(ErrorCode::TruncatedFile, "header declares " + std::to_string(count) +
                                              " records but payload holds fewer");

  store.records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    EmbeddingRecord rec;
    rec.record_id = r.get<std::uint64_t>();
    rec.label = r.get<std::uint32_t>();
    rec.dim = d;
    rec.class_embedding.resize(d);
    for (auto& x : rec.class_embedding) x = r.get_f32();
    rec.patches.resize(m * d);
    for (auto& x : rec.patches) x = r.get_f32();
    store.records.push_back(std::move(rec));
  }
  if (flags & 1u) {
    std::vector<std::vector<std::uint16_t>> gt(count);
    for (auto& idx : gt) {
      idx.resize(r.get<std::uint16_t>());
      for (auto& i : idx) i = r.get<std::uint16_t>();
    }
    store.ground_truth = std::move(gt);
  }
  if (r.remaining() != 0)
    throw Error(ErrorCode::TrailingData, std::to_string(r.remaining()) + " bytes after payload");
  validate(store);
  return store;
}

std::uint64_t write_store_file(const EmbeddingStore& store, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  return write_store(store, out);
}

EmbeddingStore read_store_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  return read_store(in);
}

namespace {

void normalize_in_place(std::span<double> v) {
  const double n = norm(v);
  for (double& x : v) x /= n;
}

Vec64 random_unit(Rng64& rng, std::size_t d) {
  Vec64 v(d);
  do {
    for (double& x : v) x = rng.normal();
  } while (norm(v) < 1e-6);
  normalize_in_place(v);
  return v;
}

// Removes components along each (orthonormal) basis vector, twice for stability.
void project_out(Vec64& v, const std::vector<Vec64>& basis) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& b : basis) {
      const double c = dot(v, b);
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= c * b[i];
    }
}

}  // namespace

EmbeddingStore generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.class_count == 0 || cfg.records_per_class == 0 || cfg.dim == 0 || cfg.patches == 0)
    throw Error(ErrorCode::InvalidConfig, "class_count, records_per_class, dim and patches must be positive");
  if (cfg.signal_patches < 1 || cfg.signal_patches > cfg.patches)
    throw Error(ErrorCode::InvalidConfig, "signal_patches must lie in [1, patches]");
  if (cfg.patches > 0xffffu)
    throw Error(ErrorCode::InvalidConfig, "patches must fit in u16 ground-truth indices");
  if (!(cfg.signal_noise >= 0.0) || !(cfg.distractor_noise >= 0.0))
    throw Error(ErrorCode::InvalidConfig, "noise scales must be >= 0");
  if (cfg.signal_patches < cfg.patches && cfg.distractor_pool_size == 0)
    throw Error(ErrorCode::InvalidConfig, "distractor pool is empty but records need distractors");
  if (std::uint64_t{cfg.distractor_pool_size} + cfg.class_count > cfg.dim)
    throw Error(ErrorCode::InfeasibleConfig,
                "B + C = " + std::to_string(cfg.distractor_pool_size + cfg.class_count) +
                    " exceeds D = " + std::to_string(cfg.dim));

  const std::size_t d = cfg.dim;
  const std::size_t m = cfg.patches;
  Rng64 rng = rng_split(cfg.seed, 0);

  std::vector<Vec64> signal(cfg.class_count);
  for (auto& g : signal) g = random_unit(rng, d);

  std::vector<Vec64> basis;
  for (const auto& g : signal) {
    Vec64 v = g;
    project_out(v, basis);
    if (norm(v) > 1e-9) {
      normalize_in_place(v);
      basis.push_back(std::move(v));
    }
  }

  std::vector<Vec64> distractors;
  while (distractors.size() < cfg.distractor_pool_size) {
    Vec64 v = random_unit(rng, d);
    project_out(v, basis);
    if (norm(v) < 1e-6) continue;
    normalize_in_place(v);
    basis.push_back(v);
    distractors.push_back(std::move(v));
  }

  EmbeddingStore store;
  store.dim_d = cfg.dim;
  store.patches_m = cfg.patches;
  store.class_count = cfg.class_count;
  std::vector<std::vector<std::uint16_t>> gt;
  store.records.reserve(std::size_t{cfg.class_count} * cfg.records_per_class);

  auto noisy_unit = [&](const Vec64& base, double sigma, std::span<double> out) {
    for (std::size_t i = 0; i < d; ++i) out[i] = base[i] + sigma * rng.normal();
    if (norm(out) < kDegenerateNorm) std::copy(base.begin(), base.end(), out.begin());
    normalize_in_place(out);
  };

  std::uint64_t next_id = 0;
  for (std::uint32_t c = 0; c < cfg.class_count; ++c) {
    for (std::uint32_t r = 0; r < cfg.records_per_class; ++r) {
      EmbeddingRecord rec;
      rec.record_id = next_id++;
      rec.label = c;
      rec.dim = d;
      rec.patches.assign(m * d, 0.0);

      auto positions = sample_without_replacement(rng, m, cfg.signal_patches);
      std::vector<bool> is_signal(m, false);
      for (auto p : positions) is_signal[p] = true;
      for (std::size_t j = 0; j < m; ++j) {
        if (is_signal[j]) {
          noisy_unit(signal[c], cfg.signal_noise, rec.patch(j));
        } else {
          const auto& b = distractors[rng.below(distractors.size())];
          noisy_unit(b, cfg.distractor_noise, rec.patch(j));
        }
      }

      rec.class_embedding.assign(d, 0.0);
      for (std::size_t j = 0; j < m; ++j) {
        const auto p = rec.patch(j);
        for (std::size_t i = 0; i < d; ++i) rec.class_embedding[i] += p[i];
      }
      for (double& x : rec.class_embedding) x /= static_cast<double>(m);

      std::vector<std::uint16_t> idx(positions.begin(), positions.end());
      std::sort(idx.begin(), idx.end());
      gt.push_back(std::move(idx));
      store.records.push_back(std::move(rec));
    }
  }
  store.ground_truth = std::move(gt);
  return store;
}

}  // namespace cpes
