#include <algorithm>
#include <map>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "json.hpp"

#include "cpes/error.hpp"
#include "cpes/selection.hpp"
#include "test_support.hpp"

using namespace cpes;
using cpes::testing::random_record;

namespace {

EmbeddingRecord tiny(Vec64 cls, std::vector<Vec64> patches) {
  EmbeddingRecord rec;
  rec.dim = cls.size();
  rec.class_embedding = std::move(cls);
  for (const auto& p : patches) rec.patches.insert(rec.patches.end(), p.begin(), p.end());
  return rec;
}

// Brute force: sort every (similarity, index) pair and truncate.
std::vector<std::size_t> oracle_top(const Vec64& sims, std::size_t m) {
  std::vector<std::pair<double, std::size_t>> pairs;
  for (std::size_t i = 0; i < sims.size(); ++i) pairs.emplace_back(-sims[i], i);
  std::sort(pairs.begin(), pairs.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < m; ++i) out.push_back(pairs[i].second);
  return out;
}

}  // namespace

TEST_CASE("similarity sequence examples") {
  const auto same = tiny({1, 2}, {{1, 2}, {1, 2}, {1, 2}});
  for (double r : similarity_sequence(same, DistanceKind::Cos)) CHECK(r == doctest::Approx(1.0).epsilon(1e-15));

  const auto basis = tiny({1, 0}, {{1, 0}, {0, 1}});
  CHECK(similarity_sequence(basis, DistanceKind::Dot) == Vec64{1.0, 0.0});
  CHECK(similarity_sequence(basis, DistanceKind::Abs) == Vec64{0.0, -2.0});
  CHECK(similarity_sequence(basis, DistanceKind::Sqr) == Vec64{0.0, -2.0});
  CHECK(similarity_sequence(basis, DistanceKind::Cos) == Vec64{1.0, 0.0});
}

TEST_CASE("distance names") {
  for (auto kind : kAllDistanceKinds) CHECK(parse_distance(to_string(kind)) == kind);
  CHECK_FALSE(parse_distance("l2").has_value());
}

TEST_CASE("select_top examples") {
  CHECK(select_top({0.1, 0.9, 0.5}, 2).indices == std::vector<std::size_t>{1, 2});
  CHECK(select_top({0.5, 0.5, 0.1}, 1).indices == std::vector<std::size_t>{0});
  CHECK(select_top({0.2, 0.7, 0.7, -1.0}, 4).indices == std::vector<std::size_t>{1, 2, 0, 3});
  CHECK(select_top({0.3, 0.1}, 0).indices.empty());
  const auto r = select_top({0.3, 0.1}, 1);
  CHECK(r.similarities == Vec64{0.3, 0.1});
  try {
    select_top({0.3, 0.1}, 3);
    FAIL("m > M accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SelectionOutOfRange);
  }
}

TEST_CASE("select_top matches the sort-and-truncate oracle") {
  Rng64 rng(31);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t len = 1 + rng.below(32);
    Vec64 sims(len);
    for (auto& s : sims) s = rng.normal();
    // Inject ties by copying values and by snapping onto a coarse grid.
    if (trial % 3 == 0)
      for (auto& s : sims) s = std::round(s * 2.0) / 2.0;
    if (len > 2 && trial % 3 == 1) sims[rng.below(len)] = sims[rng.below(len)];
    const std::size_t m = rng.below(len + 1);
    const auto got = select_top(sims, m);
    CHECK(got.indices == oracle_top(sims, m));
    if (m > 0 && m < len) {
      double min_sel = 1e300, max_rest = -1e300;
      std::vector<bool> chosen(len, false);
      for (auto i : got.indices) {
        chosen[i] = true;
        min_sel = std::min(min_sel, sims[i]);
      }
      for (std::size_t i = 0; i < len; ++i)
        if (!chosen[i]) max_rest = std::max(max_rest, sims[i]);
      CHECK(min_sel >= max_rest);
    }
  }
}

TEST_CASE("fuse examples") {
  const auto rec = tiny({3, 4}, {{1, 2}, {0, 0}});
  const auto both = fuse(rec, select_top({0.9, 0.1}, 2));
  CHECK(both.row_count() == 2);
  CHECK(std::vector<double>(both.rows.row(0).begin(), both.rows.row(0).end()) == Vec64{7, 10});
  CHECK(std::vector<double>(both.rows.row(1).begin(), both.rows.row(1).end()) == Vec64{6, 8});
  CHECK(both.source_indices == std::vector<std::size_t>{0, 1});
  CHECK(kFusionWeight == 2.0);

  const auto class_only = fuse(rec, select_top({0.9, 0.1}, 0));
  CHECK(class_only.row_count() == 1);
  CHECK(class_only.rows.values == Vec64{3, 4});
  CHECK(class_only.source_indices.empty());

  SelectionResult bogus{{5}, {0.0, 0.0}};
  CHECK_THROWS_AS(fuse(rec, bogus), Error);
}

TEST_CASE("cosine selection ignores class-embedding scale") {
  Rng64 rng(12);
  for (int trial = 0; trial < 200; ++trial) {
    auto rec = random_record(rng, 8, 10);
    const std::size_t m = 1 + rng.below(10);
    const auto base = select_top(similarity_sequence(rec, DistanceKind::Cos), m).indices;
    for (double alpha : {0.01, 0.5, 3.0, 1000.0}) {
      auto scaled = rec;
      for (auto& x : scaled.class_embedding) x *= alpha;
      CHECK(select_top(similarity_sequence(scaled, DistanceKind::Cos), m).indices == base);
    }
  }
}

TEST_CASE("selection is permutation equivariant") {
  Rng64 rng(13);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t patches = 2 + rng.below(12);
    const auto rec = random_record(rng, 6, patches, 0, 0, true);
    // perm[new] = old
    std::vector<std::size_t> perm(patches);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = patches - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    auto shuffled = rec;
    for (std::size_t j = 0; j < patches; ++j) {
      const auto src = rec.patch(perm[j]);
      std::copy(src.begin(), src.end(), shuffled.patch(j).begin());
    }
    const std::size_t m = rng.below(patches + 1);
    for (auto kind : kAllDistanceKinds) {
      const auto a = select_and_fuse(rec, m, kind);
      const auto b = select_and_fuse(shuffled, m, kind);
      // Random Gaussian similarities are distinct, so rank fully determines order.
      REQUIRE(a.source_indices.size() == b.source_indices.size());
      for (std::size_t k = 0; k < a.source_indices.size(); ++k)
        CHECK(perm[b.source_indices[k]] == a.source_indices[k]);
      CHECK(a.rows == b.rows);
    }
  }
}

TEST_CASE("mask artifacts") {
  Rng64 rng(14);
  auto rec = random_record(rng, 4, 9, 77);
  const auto sims = similarity_sequence(rec, DistanceKind::Cos);

  const auto all = mask_pgm(9, select_top(sims, 9));
  REQUIRE(all);
  CHECK(*all == "P2\n3 3\n255\n255 255 255\n255 255 255\n255 255 255\n");
  CHECK(*mask_pgm(9, select_top(sims, 0)) == "P2\n3 3\n255\n0 0 0\n0 0 0\n0 0 0\n");

  const auto sel = select_top(Vec64{0, 0, 5, 0, 9, 0, 0, 0, 1}, 2);
  CHECK(*mask_pgm(9, sel) == "P2\n3 3\n255\n0 0 255\n0 255 0\n0 0 0\n");
  CHECK_FALSE(mask_pgm(8, select_top(Vec64(8, 0.0), 2)).has_value());

  const auto j = nlohmann::json::parse(mask_json(rec, select_top(sims, 3)));
  CHECK(j["record_id"] == 77);
  CHECK(j["m"] == 3);
  CHECK(j["indices"].size() == 3);
  CHECK(j["similarities"].get<Vec64>() == sims);
}
