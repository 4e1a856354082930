#include "cpes/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <ostream>
#include <string>

#include "binary_io.hpp"
#include "cpes/error.hpp"

namespace cpes {

namespace {

Vec64 row_norms(const Mat64& m) {
  Vec64 out(m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) out[r] = norm(m.row(r));
  return out;
}

}  // namespace

Mat64 score_matrix(const FusedRepresentation& query, const FusedRepresentation& proto) {
  if (query.rows.cols != proto.rows.cols)
    throw Error(ErrorCode::DimensionMismatch, "fused rows have dims " +
                                                  std::to_string(query.rows.cols) + " and " +
                                                  std::to_string(proto.rows.cols));
  if (query.rows.rows == 0 || proto.rows.rows == 0)
    throw Error(ErrorCode::EmptyInput, "score matrix needs at least one row per side");
  const Vec64 qn = row_norms(query.rows);
  const Vec64 pn = row_norms(proto.rows);
  Mat64 s(query.rows.rows, proto.rows.rows);
  for (std::size_t i = 0; i < s.rows; ++i) {
    const auto q = query.rows.row(i);
    for (std::size_t j = 0; j < s.cols; ++j) {
      // Same arithmetic as cosine(), with norms hoisted out of the loop.
      double c = 0.0;
      if (qn[i] >= kDegenerateNorm && pn[j] >= kDegenerateNorm)
        c = std::clamp(dot(q, proto.rows.row(j)) / (qn[i] * pn[j]), -1.0, 1.0);
      s(i, j) = c * c;
    }
  }
  return s;
}

HeadParams HeadParams::zeros(std::size_t input_dim, std::size_t hidden) {
  HeadParams p;
  p.w1 = Mat64(hidden, input_dim);
  p.b1.assign(hidden, 0.0);
  p.w2.assign(hidden, 0.0);
  return p;
}

bool HeadParams::all_finite() const {
  return cpes::all_finite(w1.values) && cpes::all_finite(b1) && cpes::all_finite(w2) &&
         std::isfinite(b2);
}

void HeadParams::scale(double factor) {
  for (double& x : w1.values) x *= factor;
  for (double& x : b1) x *= factor;
  for (double& x : w2) x *= factor;
  b2 *= factor;
}

void HeadParams::add(const HeadParams& other) {
  for (std::size_t i = 0; i < w1.values.size(); ++i) w1.values[i] += other.w1.values[i];
  for (std::size_t i = 0; i < b1.size(); ++i) b1[i] += other.b1[i];
  for (std::size_t i = 0; i < w2.size(); ++i) w2[i] += other.w2[i];
  b2 += other.b2;
}

std::size_t head_input_dim(std::size_t m) { return std::max<std::size_t>(m, 1) * std::max<std::size_t>(m, 1); }

MlpHead init_head(std::size_t input_dim, std::size_t hidden, std::uint64_t seed) {
  if (input_dim == 0 || hidden == 0)
    throw Error(ErrorCode::InvalidConfig, "head needs positive input and hidden widths");
  MlpHead head;
  head.input_dim = input_dim;
  head.hidden = hidden;
  head.params = HeadParams::zeros(input_dim, hidden);
  head.first_moment = HeadParams::zeros(input_dim, hidden);
  head.second_moment = HeadParams::zeros(input_dim, hidden);

  Rng64 rng = rng_split(seed, 0x4845414455ULL);
  const double lim1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double lim2 = 1.0 / std::sqrt(static_cast<double>(hidden));
  for (double& x : head.params.w1.values) x = rng.uniform(-lim1, lim1);
  for (double& x : head.params.b1) x = rng.uniform(-lim1, lim1);
  for (double& x : head.params.w2) x = rng.uniform(-lim2, lim2);
  head.params.b2 = rng.uniform(-lim2, lim2);
  return head;
}

namespace {

void check_input(const MlpHead& head, const Mat64& scores) {
  if (scores.values.size() != head.input_dim)
    throw Error(ErrorCode::DimensionMismatch,
                "score matrix " + std::to_string(scores.rows) + "x" + std::to_string(scores.cols) +
                    " does not flatten to head input " + std::to_string(head.input_dim));
}

// Hidden pre-activations for flattened input x.
void hidden_pre(const MlpHead& head, std::span<const double> x, Vec64& z) {
  z.resize(head.hidden);
  for (std::size_t h = 0; h < head.hidden; ++h) {
    const auto w = head.params.w1.row(h);
    double acc = head.params.b1[h];
    for (std::size_t i = 0; i < x.size(); ++i) acc += w[i] * x[i];
    z[h] = acc;
  }
}

double output(const MlpHead& head, const Vec64& z) {
  double out = head.params.b2;
  for (std::size_t h = 0; h < head.hidden; ++h)
    if (z[h] > 0.0) out += head.params.w2[h] * z[h];
  return out;
}

}  // namespace

double mlp_forward(const MlpHead& head, const Mat64& scores) {
  check_input(head, scores);
  Vec64 z;
  hidden_pre(head, scores.values, z);
  return output(head, z);
}

Vec64 class_scores(const MlpHead& head, const FusedRepresentation& query,
                   std::span<const FusedRepresentation> protos) {
  Vec64 out;
  out.reserve(protos.size());
  for (const auto& p : protos) out.push_back(mlp_forward(head, score_matrix(query, p)));
  return out;
}

double accumulate_loss_and_grads(const MlpHead& head, const FusedRepresentation& query,
                                 std::span<const FusedRepresentation> protos, std::size_t target,
                                 HeadParams& grads, Vec64& probs) {
  if (protos.empty()) throw Error(ErrorCode::EmptyInput, "no prototypes");
  if (target >= protos.size())
    throw Error(ErrorCode::IndexOutOfRange, "target " + std::to_string(target));

  const std::size_t n = protos.size();
  std::vector<Mat64> inputs;
  std::vector<Vec64> pre(n);
  Vec64 scores(n);
  inputs.reserve(n);
  for (std::size_t c = 0; c < n; ++c) {
    inputs.push_back(score_matrix(query, protos[c]));
    check_input(head, inputs.back());
    hidden_pre(head, inputs.back().values, pre[c]);
    scores[c] = output(head, pre[c]);
  }
  probs = softmax(scores);
  const double loss = cross_entropy(probs, target);

  for (std::size_t c = 0; c < n; ++c) {
    const double g = probs[c] - (c == target ? 1.0 : 0.0);
    if (g == 0.0) continue;
    grads.b2 += g;
    const auto& x = inputs[c].values;
    for (std::size_t h = 0; h < head.hidden; ++h) {
      const double z = pre[c][h];
      if (z <= 0.0) continue;
      grads.w2[h] += g * z;
      const double dz = g * head.params.w2[h];
      grads.b1[h] += dz;
      auto row = grads.w1.row(h);
      for (std::size_t i = 0; i < x.size(); ++i) row[i] += dz * x[i];
    }
  }
  return loss;
}

LossAndGrads episode_loss_and_grads(const MlpHead& head, const FusedRepresentation& query,
                                    std::span<const FusedRepresentation> protos,
                                    std::size_t target) {
  LossAndGrads out;
  out.grads = HeadParams::zeros(head.input_dim, head.hidden);
  out.loss = accumulate_loss_and_grads(head, query, protos, target, out.grads, out.probs);
  return out;
}

void validate(const OptimizerConfig& cfg) {
  if (!(cfg.learning_rate > 0.0) || !std::isfinite(cfg.learning_rate))
    throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
    throw Error(ErrorCode::InvalidConfig, "betas must lie in [0, 1)");
  if (!(cfg.epsilon > 0.0)) throw Error(ErrorCode::InvalidConfig, "epsilon must be > 0");
  if (!(cfg.weight_decay >= 0.0)) throw Error(ErrorCode::InvalidConfig, "weight_decay must be >= 0");
  if (!(cfg.floor_lr >= 0.0 && cfg.floor_lr <= cfg.learning_rate))
    throw Error(ErrorCode::InvalidConfig, "floor_lr must lie in [0, learning_rate]");
}

double learning_rate_at(const OptimizerConfig& cfg, std::uint64_t t) {
  if (cfg.schedule == LrSchedule::Constant) return cfg.learning_rate;
  if (cfg.total_steps == 0 || t >= cfg.total_steps) return cfg.floor_lr;
  const double progress = static_cast<double>(t) / static_cast<double>(cfg.total_steps);
  return cfg.floor_lr +
         0.5 * (cfg.learning_rate - cfg.floor_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

namespace {

void adamw_update(std::span<double> param, std::span<double> m, std::span<double> v,
                  std::span<const double> g, double lr, double c1, double c2,
                  const OptimizerConfig& cfg) {
  for (std::size_t i = 0; i < param.size(); ++i) {
    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
    const double m_hat = m[i] / c1;
    const double v_hat = v[i] / c2;
    param[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.epsilon)) + lr * cfg.weight_decay * param[i];
  }
}

}  // namespace

void optimizer_step(MlpHead& head, const HeadParams& grads, const OptimizerConfig& cfg) {
  if (grads.w1.values.size() != head.params.w1.values.size() ||
      grads.b1.size() != head.hidden || grads.w2.size() != head.hidden)
    throw Error(ErrorCode::DimensionMismatch, "gradient shapes do not match head");
  if (!grads.all_finite()) throw Error(ErrorCode::NonFiniteGradient, "gradient has NaN/Inf");

  const double lr = learning_rate_at(cfg, head.step);
  const double t = static_cast<double>(head.step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  auto& p = head.params;
  auto& m = head.first_moment;
  auto& v = head.second_moment;
  adamw_update(p.w1.values, m.w1.values, v.w1.values, grads.w1.values, lr, c1, c2, cfg);
  adamw_update(p.b1, m.b1, v.b1, grads.b1, lr, c1, c2, cfg);
  adamw_update(p.w2, m.w2, v.w2, grads.w2, lr, c1, c2, cfg);
  adamw_update({&p.b2, 1}, {&m.b2, 1}, {&v.b2, 1}, {&grads.b2, 1}, lr, c1, c2, cfg);
  head.step += 1;
}

namespace {

void put_params(detail::ByteWriter& w, const HeadParams& p) {
  for (double x : p.w1.values) w.put_f64(x);
  for (double x : p.b1) w.put_f64(x);
  for (double x : p.w2) w.put_f64(x);
  w.put_f64(p.b2);
}

HeadParams get_params(detail::ByteReader& r, std::size_t input_dim, std::size_t hidden) {
  auto p = HeadParams::zeros(input_dim, hidden);
  for (double& x : p.w1.values) x = r.get_f64();
  for (double& x : p.b1) x = r.get_f64();
  for (double& x : p.w2) x = r.get_f64();
  p.b2 = r.get_f64();
  return p;
}

}  // namespace

std::uint64_t write_head(const MlpHead& head, std::ostream& out) {
  if (!head.params.all_finite())
    throw Error(ErrorCode::NonFiniteValue, "head parameters are not finite");
  detail::ByteWriter w;
  w.put_raw(kHeadMagic, 4);
  w.put<std::uint16_t>(kHeadVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(head.input_dim));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(head.hidden));
  put_params(w, head.params);
  put_params(w, head.first_moment);
  put_params(w, head.second_moment);
  w.put<std::uint64_t>(head.step);
  out.write(w.bytes().data(), static_cast<std::streamsize>(w.bytes().size()));
  if (!out) throw Error(ErrorCode::IoFailure, "write failed");
  return w.bytes().size();
}

MlpHead read_head(std::istream& in) {
  detail::ByteReader r(detail::slurp(in));
  char magic[4];
  r.get_raw(magic, 4);
  if (std::memcmp(magic, kHeadMagic, 4) != 0) throw Error(ErrorCode::BadMagic, "not a CPEH checkpoint");
  const auto version = r.get<std::uint16_t>();
  if (version != kHeadVersion)
    throw Error(ErrorCode::UnsupportedVersion, "CPEH version " + std::to_string(version));
  MlpHead head;
  head.input_dim = r.get<std::uint32_t>();
  head.hidden = r.get<std::uint32_t>();
  if (head.input_dim == 0 || head.hidden == 0)
    throw Error(ErrorCode::TruncatedFile, "checkpoint declares an empty head");
  const std::uint64_t per_set = 8 * (std::uint64_t{head.hidden} * (head.input_dim + 2) + 1);
  if (r.remaining() < 3 * per_set + 8)
    throw Error(ErrorCode::TruncatedFile, "checkpoint payload shorter than declared shape");
  head.params = get_params(r, head.input_dim, head.hidden);
  head.first_moment = get_params(r, head.input_dim, head.hidden);
  head.second_moment = get_params(r, head.input_dim, head.hidden);
  head.step = r.get<std::uint64_t>();
  if (r.remaining() != 0)
    throw Error(ErrorCode::TrailingData, std::to_string(r.remaining()) + " bytes after payload");
  return head;
}

std::uint64_t write_head_file(const MlpHead& head, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  return write_head(head, out);
}

MlpHead read_head_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  return read_head(in);
}

}  // namespace cpes
