#pragma once

#include <filesystem>
#include <string>

#include <unistd.h>

#include "cpes/embed_store.hpp"
#include "cpes/numerics.hpp"

namespace cpes::testing {

// Gaussian record with per-patch random scale so norms are not uniform.
inline EmbeddingRecord random_record(Rng64& rng, std::size_t dim, std::size_t patches,
                                     std::uint64_t id = 0, std::uint32_t label = 0,
                                     bool vary_norms = false) {
  EmbeddingRecord rec;
  rec.record_id = id;
  rec.label = label;
  rec.dim = dim;
  rec.class_embedding.resize(dim);
  for (double& x : rec.class_embedding) x = rng.normal();
  rec.patches.resize(dim * patches);
  for (std::size_t j = 0; j < patches; ++j) {
    const double scale = vary_norms ? rng.uniform(0.1, 5.0) : 1.0;
    for (double& x : rec.patch(j)) x = scale * rng.normal();
  }
  return rec;
}

inline EmbeddingStore random_store(Rng64& rng, std::uint32_t dim, std::uint32_t patches,
                                   std::uint32_t classes, std::uint32_t per_class,
                                   bool with_truth) {
  EmbeddingStore store;
  store.dim_d = dim;
  store.patches_m = patches;
  store.class_count = classes;
  std::uint64_t id = 1000;
  for (std::uint32_t c = 0; c < classes; ++c)
    for (std::uint32_t r = 0; r < per_class; ++r)
      store.records.push_back(random_record(rng, dim, patches, id++, c));
  if (with_truth) {
    std::vector<std::vector<std::uint16_t>> gt;
    for (std::size_t i = 0; i < store.records.size(); ++i) {
      const auto picks = sample_without_replacement(rng, patches, rng.below(patches + 1));
      gt.emplace_back(picks.begin(), picks.end());
    }
    store.ground_truth = std::move(gt);
  }
  return store;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("cpes_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace cpes::testing
