#include <cmath>
#include <numeric>
#include <sstream>

#include "doctest.h"

#include "cpes/episodic.hpp"
#include "cpes/error.hpp"
#include "cpes/scorer.hpp"
#include "gradient_oracle.hpp"
#include "test_support.hpp"

using namespace cpes;
using namespace std::string_literals;
using cpes::testing::random_record;

namespace {

FusedRepresentation random_fused(Rng64& rng, std::size_t rows, std::size_t dim) {
  FusedRepresentation f;
  f.dim = dim;
  f.rows = Mat64(rows, dim);
  for (auto& x : f.rows.values) x = rng.normal();
  return f;
}

MlpHead hand_head(std::size_t input, std::size_t hidden) {
  MlpHead head = init_head(input, hidden, 0);
  head.params = HeadParams::zeros(input, hidden);
  return head;
}

std::vector<double> flat(HeadParams p) {
  std::vector<double> out;
  cpes::testing::for_each_param(p, [&](double& x) { out.push_back(x); });
  return out;
}

}  // namespace

TEST_CASE("score matrix examples") {
  Rng64 rng(1);
  const auto q = random_fused(rng, 4, 6);
  const auto same = score_matrix(q, q);
  for (std::size_t i = 0; i < 4; ++i) CHECK(same(i, i) == doctest::Approx(1.0).epsilon(1e-14));

  FusedRepresentation a, b;
  a.dim = b.dim = 4;
  a.rows = Mat64(2, 4);
  b.rows = Mat64(2, 4);
  a.rows(0, 0) = 1;
  a.rows(1, 1) = 2;
  b.rows(0, 2) = 3;
  b.rows(1, 3) = -1;
  CHECK(score_matrix(a, b).values == Vec64(4, 0.0));

  auto neg = q;
  for (auto& x : neg.rows.values) x = -x;
  const auto p = random_fused(rng, 3, 6);
  CHECK(score_matrix(neg, p) == score_matrix(q, p));

  CHECK_THROWS_AS(score_matrix(q, random_fused(rng, 2, 5)), Error);
}

TEST_CASE("score matrix properties over random pairs") {
  Rng64 rng(2);
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t dim = 1 + rng.below(12);
    const auto q = random_fused(rng, 1 + rng.below(5), dim);
    const auto p = random_fused(rng, 1 + rng.below(5), dim);
    const auto s = score_matrix(q, p);
    for (double v : s.values) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(score_matrix(p, q) == s.transposed());
  }
}

TEST_CASE("mlp forward examples") {
  auto head = hand_head(4, 3);
  head.params.b2 = 0.7;
  Rng64 rng(3);
  Mat64 s(2, 2);
  for (auto& x : s.values) x = rng.uniform();
  CHECK(mlp_forward(head, s) == 0.7);

  // m = 2, flat(S) = [1,0,0,1], one hidden unit averaging its inputs.
  auto tiny = hand_head(4, 1);
  tiny.params.w1.values = {0.5, 0.5, 0.5, 0.5};
  tiny.params.w2 = {1.0};
  Mat64 eye(2, 2);
  eye(0, 0) = eye(1, 1) = 1.0;
  CHECK(mlp_forward(tiny, eye) == 1.0);
  CHECK(mlp_forward(tiny, eye) == cpes::testing::reference_score(tiny.params, [] {
          FusedRepresentation f;
          f.dim = 2;
          f.rows = Mat64(2, 2);
          f.rows(0, 0) = f.rows(1, 1) = 1.0;
          return f;
        }(), [] {
          FusedRepresentation f;
          f.dim = 2;
          f.rows = Mat64(2, 2);
          f.rows(0, 0) = f.rows(1, 1) = 1.0;
          return f;
        }()));

  // Hidden layer fully inactive: only the output bias survives.
  auto dead = init_head(4, 8, 5);
  for (auto& b : dead.params.b1) b = -100.0;
  CHECK(mlp_forward(dead, s) == dead.params.b2);

  CHECK_THROWS_AS(mlp_forward(head, Mat64(3, 3)), Error);
}

TEST_CASE("head initialization") {
  const auto head = init_head(16, 64, 9);
  CHECK(head == init_head(16, 64, 9));
  CHECK_FALSE(head == init_head(16, 64, 10));
  for (double w : head.params.w1.values) CHECK(std::abs(w) <= 0.25);
  for (double w : head.params.w2) CHECK(std::abs(w) <= 0.125);
  CHECK(head.step == 0);
  CHECK(head_input_dim(0) == 1);
  CHECK(head_input_dim(4) == 16);
}

TEST_CASE("loss is ln N when every prototype scores the same") {
  Rng64 rng(4);
  const auto q = random_fused(rng, 3, 5);
  const auto p = random_fused(rng, 3, 5);
  const std::vector<FusedRepresentation> protos(5, p);
  const auto head = init_head(9, 16, 1);
  for (std::size_t target = 0; target < 5; ++target) {
    const auto r = episode_loss_and_grads(head, q, protos, target);
    CHECK(r.loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    // Uniform softmax: dL/ds_n = 1/N - [n == target] sums to zero, so b2's gradient vanishes.
    CHECK(std::abs(r.grads.b2) < 1e-15);
  }
}

TEST_CASE("zero output weights give zero first-layer gradients") {
  Rng64 rng(5);
  auto head = init_head(4, 8, 2);
  std::fill(head.params.w2.begin(), head.params.w2.end(), 0.0);
  const auto q = random_fused(rng, 2, 6);
  std::vector<FusedRepresentation> protos{random_fused(rng, 2, 6), random_fused(rng, 2, 6)};
  const auto r = episode_loss_and_grads(head, q, protos, 1);
  for (double g : r.grads.w1.values) CHECK(g == 0.0);
  for (double g : r.grads.b1) CHECK(g == 0.0);
}

TEST_CASE("analytic gradients match central differences") {
  SyntheticConfig cfg{10, 8, 16, 9, 3, 0.2, 4, 0.3, 21};
  const auto store = generate_synthetic(cfg);
  const ClassIndex index(store);
  int checked = 0;
  for (std::uint64_t task = 0; checked < 20; ++task) {
    const std::size_t m = task % 3 == 0 ? 0 : 1 + task % 5;
    auto head = init_head(head_input_dim(m), 12, task);
    const auto ep = sample_episode(store, index, {5, 1 + static_cast<std::uint32_t>(task % 2), 1, task, 3});
    std::vector<FusedRepresentation> protos;
    for (const auto& p : ep.prototypes) protos.push_back(select_and_fuse(p, m, DistanceKind::Cos));
    const auto query = select_and_fuse(ep.queries[0], m, DistanceKind::Cos);

    // Skip points within reach of the ReLU kink.
    bool near_kink = false;
    for (const auto& p : protos) {
      const auto s = score_matrix(query, p);
      for (std::size_t h = 0; h < head.hidden; ++h) {
        double z = head.params.b1[h];
        for (std::size_t i = 0; i < s.values.size(); ++i) z += head.params.w1(h, i) * s.values[i];
        near_kink |= std::abs(z) < 1e-4;
      }
    }
    if (near_kink) continue;
    ++checked;

    const auto analytic = episode_loss_and_grads(head, query, protos, ep.queries[0].label);
    CHECK(analytic.loss == doctest::Approx(cpes::testing::reference_loss(head.params, query, protos, ep.queries[0].label)).epsilon(1e-12));
    const auto numeric = cpes::testing::numeric_gradient(head.params, query, protos, ep.queries[0].label, 1e-6);
    const auto a = flat(analytic.grads);
    const auto n = flat(numeric);
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double denom = std::max(std::abs(a[i]), std::abs(n[i]));
      if (denom < 1e-6)
        CHECK(std::abs(a[i] - n[i]) <= 1e-8);
      else
        CHECK(std::abs(a[i] - n[i]) / denom <= 1e-5);
    }
  }
}

TEST_CASE("AdamW first step") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  cfg.schedule = LrSchedule::Constant;
  auto head = hand_head(1, 1);
  head.params.w1.values = {1.0};
  HeadParams g = HeadParams::zeros(1, 1);
  g.w1.values = {1.0};
  optimizer_step(head, g, cfg);
  // m_hat = v_hat = 1, so the step is lr * 1 / (1 + eps).
  CHECK(std::abs(head.params.w1.values[0] - 0.9) <= 1e-6);
  CHECK(head.step == 1);
  CHECK(head.first_moment.w1.values[0] == doctest::Approx(0.1));
  CHECK(head.second_moment.w1.values[0] == doctest::Approx(0.001));
}

TEST_CASE("AdamW leaves parameters alone on zero gradient without decay") {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.0;
  auto head = init_head(9, 5, 3);
  const auto before = head.params;
  for (int i = 0; i < 5; ++i) optimizer_step(head, HeadParams::zeros(9, 5), cfg);
  CHECK(head.params == before);
  CHECK(head.step == 5);
}

TEST_CASE("weight decay is decoupled") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.01;
  cfg.weight_decay = 0.5;
  cfg.schedule = LrSchedule::Constant;
  auto head = hand_head(1, 1);
  head.params.b2 = 2.0;
  optimizer_step(head, HeadParams::zeros(1, 1), cfg);
  CHECK(head.params.b2 == doctest::Approx(2.0 - 0.01 * 0.5 * 2.0).epsilon(1e-15));
}

TEST_CASE("learning rate schedule") {
  OptimizerConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.floor_lr = 1e-6;
  cfg.total_steps = 100;
  CHECK(learning_rate_at(cfg, 0) == 1e-3);
  CHECK(learning_rate_at(cfg, 50) == doctest::Approx(1e-6 + 0.5 * (1e-3 - 1e-6)).epsilon(1e-12));
  CHECK(learning_rate_at(cfg, 100) == 1e-6);
  CHECK(learning_rate_at(cfg, 250) == 1e-6);
  for (std::uint64_t t = 1; t <= 100; ++t) CHECK(learning_rate_at(cfg, t) <= learning_rate_at(cfg, t - 1));
  cfg.schedule = LrSchedule::Constant;
  CHECK(learning_rate_at(cfg, 100) == 1e-3);
}

TEST_CASE("optimizer rejects bad input") {
  auto head = init_head(4, 2, 0);
  auto g = HeadParams::zeros(4, 2);
  g.b1[1] = std::nan("");
  try {
    optimizer_step(head, g, OptimizerConfig{});
    FAIL("NaN gradient accepted");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFiniteGradient);
  }
  CHECK_THROWS_AS(optimizer_step(head, HeadParams::zeros(3, 2), OptimizerConfig{}), Error);

  OptimizerConfig bad;
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(validate(bad), Error);
  bad = {};
  bad.floor_lr = 1.0;
  CHECK_THROWS_AS(validate(bad), Error);
  bad = {};
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(validate(bad), Error);
}

TEST_CASE("loss trends down on a fixed episode batch") {
  SyntheticConfig cfg{8, 10, 24, 9, 3, 0.1, 6, 0.5, 5};
  const auto store = generate_synthetic(cfg);
  const ClassIndex index(store);
  const std::size_t m = 3;
  struct Prepared {
    FusedRepresentation query;
    std::vector<FusedRepresentation> protos;
    std::size_t target;
  };
  std::vector<Prepared> batch;
  for (std::uint64_t task = 0; task < 4; ++task) {
    const auto ep = sample_episode(store, index, {5, 1, 3, task, 8});
    std::vector<FusedRepresentation> protos;
    for (const auto& p : ep.prototypes) protos.push_back(select_and_fuse(p, m, DistanceKind::Cos));
    for (const auto& q : ep.queries) batch.push_back({select_and_fuse(q, m, DistanceKind::Cos), protos, q.label});
  }
  auto head = init_head(head_input_dim(m), 32, 4);
  OptimizerConfig opt;
  opt.learning_rate = 1e-2;
  opt.total_steps = 50;
  std::vector<double> losses;
  for (int step = 0; step < 51; ++step) {
    auto grads = HeadParams::zeros(head.input_dim, head.hidden);
    double loss = 0.0;
    Vec64 probs;
    for (const auto& item : batch) loss += accumulate_loss_and_grads(head, item.query, item.protos, item.target, grads, probs);
    grads.scale(1.0 / static_cast<double>(batch.size()));
    losses.push_back(loss / static_cast<double>(batch.size()));
    if (step < 50) optimizer_step(head, grads, opt);
  }
  int rises = 0;
  for (std::size_t i = 1; i < losses.size(); ++i) rises += losses[i] > losses[i - 1];
  CHECK(rises <= 5);
  CHECK(losses.back() < losses.front());
}

TEST_CASE("query score does not depend on patch storage order") {
  Rng64 rng(6);
  const auto head = init_head(head_input_dim(4), 16, 7);
  for (int trial = 0; trial < 100; ++trial) {
    const auto q = random_record(rng, 8, 10, 0, 0, true);
    const auto p = random_record(rng, 8, 10, 1, 0, true);
    auto shuffled = q;
    std::vector<std::size_t> perm(10);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (std::size_t i = 9; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    for (std::size_t j = 0; j < 10; ++j) {
      const auto src = q.patch(perm[j]);
      std::copy(src.begin(), src.end(), shuffled.patch(j).begin());
    }
    const auto proto = select_and_fuse(p, 4, DistanceKind::Cos);
    const double a = mlp_forward(head, score_matrix(select_and_fuse(q, 4, DistanceKind::Cos), proto));
    const double b = mlp_forward(head, score_matrix(select_and_fuse(shuffled, 4, DistanceKind::Cos), proto));
    CHECK(a == b);
  }
}

TEST_CASE("checkpoint round trip is exact (fuzzed)") {
  Rng64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto head = init_head(1 + rng.below(40), 1 + rng.below(20), trial);
    for (auto* p : {&head.first_moment, &head.second_moment})
      cpes::testing::for_each_param(*p, [&](double& x) { x = rng.normal() * 1e-3; });
    head.step = rng.next();
    std::ostringstream out;
    const auto bytes = write_head(head, out);
    CHECK(bytes == out.str().size());
    CHECK(out.str().substr(0, 4) == "CPEH");
    std::istringstream in(out.str());
    CHECK(read_head(in) == head);
  }
}

TEST_CASE("corrupt checkpoints raise the designated errors") {
  std::ostringstream out;
  write_head(init_head(4, 3, 1), out);
  const std::string good = out.str();
  auto code_of = [](const std::string& bytes) {
    std::istringstream in(bytes);
    try {
      read_head(in);
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::IoFailure;
  };
  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(code_of(bad_magic) == ErrorCode::BadMagic);
  auto bad_version = good;
  bad_version[4] = 9;
  CHECK(code_of(bad_version) == ErrorCode::UnsupportedVersion);
  CHECK(code_of(good.substr(0, good.size() - 3)) == ErrorCode::TruncatedFile);
  CHECK(code_of(good.substr(0, 7)) == ErrorCode::TruncatedFile);
  CHECK(code_of(good + "\0\0"s) == ErrorCode::TrailingData);
  auto inf_payload = good;
  // First W1 weight: +inf.
  for (int i = 0; i < 6; ++i) inf_payload[14 + i] = 0;
  inf_payload[20] = static_cast<char>(0xf0);
  inf_payload[21] = 0x7f;
  CHECK(code_of(inf_payload) == ErrorCode::NonFiniteValue);
}
