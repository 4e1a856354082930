#include "cpes/harness.hpp"

#include <chrono>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <sstream>
#include <thread>

#include "cpes/error.hpp"

namespace cpes {

namespace {

// Runs fn(i) for i in [0, n). Work is split statically; callers write results
// into per-index slots so the outcome never depends on `threads`.
template <typename Fn>
void parallel_for(std::size_t n, std::uint32_t threads, Fn&& fn) {
  const std::size_t workers = std::min<std::size_t>(std::max<std::uint32_t>(threads, 1), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

std::vector<FusedRepresentation> fuse_all(const EmbeddingStore& store, std::size_t m,
                                          DistanceKind kind, std::uint32_t threads) {
  std::vector<FusedRepresentation> out(store.records.size());
  parallel_for(out.size(), threads,
               [&](std::size_t i) { out[i] = select_and_fuse(store.records[i], m, kind); });
  return out;
}

// Fused prototypes for an episode; K = 1 reuses the per-record cache.
std::vector<FusedRepresentation> episode_prototypes(const Episode& ep,
                                                    const std::vector<FusedRepresentation>& cache,
                                                    std::uint32_t k_shot, std::size_t m,
                                                    DistanceKind kind) {
  std::vector<FusedRepresentation> protos;
  protos.reserve(ep.prototypes.size());
  for (std::size_t n = 0; n < ep.prototypes.size(); ++n) {
    if (k_shot == 1)
      protos.push_back(cache[ep.support_positions[n]]);
    else
      protos.push_back(select_and_fuse(ep.prototypes[n], m, kind));
  }
  return protos;
}

EpisodeSpec episode_spec(const RunConfig& cfg, std::uint64_t task_index, std::uint64_t base_seed) {
  EpisodeSpec spec;
  spec.n_way = cfg.n_way;
  spec.k_shot = cfg.k_shot;
  spec.queries_per_class = cfg.queries_per_class;
  spec.task_index = task_index;
  spec.base_seed = base_seed;
  return spec;
}

constexpr std::size_t kGradientBlock = 8;

}  // namespace

void validate(const RunConfig& cfg) {
  if (cfg.n_way < 2) throw Error(ErrorCode::InvalidConfig, "n_way must be >= 2");
  if (cfg.k_shot < 1) throw Error(ErrorCode::InvalidConfig, "k_shot must be >= 1");
  if (cfg.queries_per_class < 1) throw Error(ErrorCode::InvalidConfig, "queries must be >= 1");
  if (cfg.episodes_per_epoch < 1)
    throw Error(ErrorCode::InvalidConfig, "episodes_per_epoch must be >= 1");
  if (cfg.eval_tasks < 1) throw Error(ErrorCode::InvalidConfig, "eval_tasks must be >= 1");
  if (cfg.hidden < 1) throw Error(ErrorCode::InvalidConfig, "hidden must be >= 1");
  if (cfg.threads < 1) throw Error(ErrorCode::InvalidConfig, "threads must be >= 1");
  validate(cfg.optimizer);
}

std::uint32_t resolve_m(const RunConfig& cfg, const EmbeddingStore& store) {
  const std::uint32_t patches = store.patches_m;
  if (cfg.m) {
    if (*cfg.m > patches)
      throw Error(ErrorCode::SelectionOutOfRange,
                  "m = " + std::to_string(*cfg.m) + " exceeds M = " + std::to_string(patches));
    return *cfg.m;
  }
  if (store.ground_truth && !store.ground_truth->empty())
    return std::min<std::uint32_t>(static_cast<std::uint32_t>(store.ground_truth->front().size()),
                                   patches);
  if (patches == 196) return 96;
  const auto scaled = static_cast<std::uint32_t>(std::lround(patches * 96.0 / 196.0));
  return std::clamp<std::uint32_t>(scaled, std::min<std::uint32_t>(1, patches), patches);
}

nlohmann::json to_json(const RunConfig& cfg) {
  nlohmann::json j;
  j["store"] = cfg.store_path;
  j["eval_store"] = cfg.eval_store_path.empty() ? cfg.store_path : cfg.eval_store_path;
  j["n_way"] = cfg.n_way;
  j["k_shot"] = cfg.k_shot;
  j["queries"] = cfg.queries_per_class;
  j["m"] = cfg.m ? nlohmann::json(*cfg.m) : nlohmann::json(nullptr);
  j["distance"] = std::string(to_string(cfg.distance));
  j["epochs"] = cfg.epochs;
  j["episodes_per_epoch"] = cfg.episodes_per_epoch;
  j["tasks"] = cfg.eval_tasks;
  j["seed"] = cfg.seed;
  j["hidden"] = cfg.hidden;
  const auto& o = cfg.optimizer;
  j["optimizer"] = {{"lr", o.learning_rate},
                    {"beta1", o.beta1},
                    {"beta2", o.beta2},
                    {"epsilon", o.epsilon},
                    {"weight_decay", o.weight_decay},
                    {"schedule", o.schedule == LrSchedule::Cosine ? "cosine" : "constant"},
                    {"floor_lr", o.floor_lr}};
  return j;
}

std::uint64_t head_seed(std::uint64_t seed) { return rng_split(seed, 0).next(); }
std::uint64_t train_episode_seed(std::uint64_t seed) { return rng_split(seed, 1).next(); }
std::uint64_t eval_episode_seed(std::uint64_t seed) { return rng_split(seed, 2).next(); }

TrainResult train(const RunConfig& cfg, const EmbeddingStore& store) {
  validate(cfg);
  const std::size_t m = resolve_m(cfg, store);
  TrainResult result;
  result.head = init_head(head_input_dim(m), cfg.hidden, head_seed(cfg.seed));
  if (cfg.epochs == 0) return result;

  OptimizerConfig opt = cfg.optimizer;
  opt.total_steps = std::uint64_t{cfg.epochs} * cfg.episodes_per_epoch;

  const ClassIndex index(store);
  const auto cache = fuse_all(store, m, cfg.distance, cfg.threads);
  const std::uint64_t base_seed = train_episode_seed(cfg.seed);
  MlpHead& head = result.head;

  const std::size_t query_count = std::size_t{cfg.n_way} * cfg.queries_per_class;
  const std::size_t blocks = (query_count + kGradientBlock - 1) / kGradientBlock;
  std::vector<HeadParams> block_grads(blocks, HeadParams::zeros(head.input_dim, head.hidden));
  std::vector<double> block_loss(blocks);
  std::vector<std::size_t> block_correct(blocks);

  for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    double acc_sum = 0.0;
    for (std::uint32_t e = 0; e < cfg.episodes_per_epoch; ++e) {
      const std::uint64_t task = std::uint64_t{epoch} * cfg.episodes_per_epoch + e;
      const Episode ep = sample_episode(store, index, episode_spec(cfg, task, base_seed));
      const auto protos = episode_prototypes(ep, cache, cfg.k_shot, m, cfg.distance);

      parallel_for(blocks, cfg.threads, [&](std::size_t b) {
        HeadParams& g = block_grads[b];
        g.scale(0.0);
        block_loss[b] = 0.0;
        block_correct[b] = 0;
        Vec64 probs;
        const std::size_t end = std::min(query_count, (b + 1) * kGradientBlock);
        for (std::size_t q = b * kGradientBlock; q < end; ++q) {
          const std::size_t target = ep.queries[q].label;
          block_loss[b] +=
              accumulate_loss_and_grads(head, cache[ep.query_positions[q]], protos, target, g, probs);
          if (argmax_lowest(probs) == target) ++block_correct[b];
        }
      });

      HeadParams total = block_grads[0];
      double loss = block_loss[0];
      std::size_t correct = block_correct[0];
      for (std::size_t b = 1; b < blocks; ++b) {
        total.add(block_grads[b]);
        loss += block_loss[b];
        correct += block_correct[b];
      }
      const double inv = 1.0 / static_cast<double>(query_count);
      total.scale(inv);
      optimizer_step(head, total, opt);
      loss_sum += loss * inv;
      acc_sum += static_cast<double>(correct) * inv;
    }
    const double episodes = cfg.episodes_per_epoch;
    result.log.push_back({epoch + 1, loss_sum / episodes, acc_sum / episodes});
  }
  return result;
}

double mean_of(std::span<const double> values) {
  if (values.empty()) throw Error(ErrorCode::EmptyInput, "mean of no values");
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc / static_cast<double>(values.size());
}

double ci95_half_width(std::span<const double> values) {
  if (values.size() < 2) return 0.0;
  const double mu = mean_of(values);
  double ss = 0.0;
  for (double v : values) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  return 1.96 * sd / std::sqrt(static_cast<double>(values.size()));
}

EvalReport evaluate(const MlpHead& head, const RunConfig& cfg, const EmbeddingStore& store) {
  const auto start = std::chrono::steady_clock::now();
  validate(cfg);
  const std::size_t m = resolve_m(cfg, store);
  if (head.input_dim != head_input_dim(m))
    throw Error(ErrorCode::DimensionMismatch,
                "head expects input " + std::to_string(head.input_dim) + " but m = " +
                    std::to_string(m) + " gives " + std::to_string(head_input_dim(m)));

  const ClassIndex index(store);
  const auto cache = fuse_all(store, m, cfg.distance, cfg.threads);
  const std::uint64_t base_seed = eval_episode_seed(cfg.seed);

  EvalReport report;
  report.per_task_accuracy.assign(cfg.eval_tasks, 0.0);
  parallel_for(cfg.eval_tasks, cfg.threads, [&](std::size_t t) {
    const Episode ep = sample_episode(store, index, episode_spec(cfg, t, base_seed));
    const auto protos = episode_prototypes(ep, cache, cfg.k_shot, m, cfg.distance);
    std::size_t correct = 0;
    for (std::size_t q = 0; q < ep.queries.size(); ++q) {
      const Vec64 probs = softmax(class_scores(head, cache[ep.query_positions[q]], protos));
      if (argmax_lowest(probs) == ep.queries[q].label) ++correct;
    }
    report.per_task_accuracy[t] = static_cast<double>(correct) / static_cast<double>(ep.queries.size());
  });
  report.mean_accuracy = mean_of(report.per_task_accuracy);
  report.ci95_half_width = ci95_half_width(report.per_task_accuracy);
  report.config = to_json(cfg);
  report.config["m"] = m;
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

SweepReport sweep_m(const RunConfig& cfg, const EmbeddingStore& train_store,
                    const EmbeddingStore& eval_store, const std::vector<std::uint32_t>& values) {
  SweepReport out;
  out.axis = "m";
  for (std::size_t i = 0; i < values.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (values[i] == values[j])
        throw Error(ErrorCode::InvalidConfig, "duplicate m value " + std::to_string(values[i]));
  for (auto m : values) {
    RunConfig point = cfg;
    point.m = m;
    resolve_m(point, train_store);
    resolve_m(point, eval_store);
  }
  for (auto m : values) {
    RunConfig point = cfg;
    point.m = m;
    const auto trained = train(point, train_store);
    out.points.push_back({std::to_string(m), evaluate(trained.head, point, eval_store)});
  }
  return out;
}

SweepReport sweep_distance(const RunConfig& cfg, const EmbeddingStore& train_store,
                           const EmbeddingStore& eval_store,
                           const std::vector<DistanceKind>& kinds) {
  SweepReport out;
  out.axis = "distance";
  for (std::size_t i = 0; i < kinds.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (kinds[i] == kinds[j])
        throw Error(ErrorCode::InvalidConfig,
                    "duplicate distance " + std::string(to_string(kinds[i])));
  for (auto kind : kinds) {
    RunConfig point = cfg;
    point.distance = kind;
    const auto trained = train(point, train_store);
    out.points.push_back({std::string(to_string(kind)), evaluate(trained.head, point, eval_store)});
  }
  return out;
}

std::vector<std::filesystem::path> export_masks(const EmbeddingStore& store, const RunConfig& cfg,
                                                const std::vector<std::uint64_t>& record_ids,
                                                const std::filesystem::path& out_dir) {
  const std::size_t m = resolve_m(cfg, store);
  std::vector<std::size_t> positions;
  for (auto id : record_ids) {
    const auto pos = find_record(store, id);
    if (!pos) throw Error(ErrorCode::UnknownRecord, "record " + std::to_string(id) + " not in store");
    positions.push_back(*pos);
  }
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + out_dir.string());

  std::vector<std::filesystem::path> written;
  for (auto pos : positions) {
    const auto& rec = store.records[pos];
    const auto selection = select_top(similarity_sequence(rec, cfg.distance), m);
    const std::string stem = "mask_" + std::to_string(rec.record_id);
    written.push_back(out_dir / (stem + ".json"));
    write_text_file(written.back(), mask_json(rec, selection));
    if (auto pgm = mask_pgm(rec.patch_count(), selection)) {
      written.push_back(out_dir / (stem + ".pgm"));
      write_text_file(written.back(), *pgm);
    }
  }
  return written;
}

nlohmann::json to_json(const EvalReport& report, bool include_timing) {
  nlohmann::json j;
  j["per_task_accuracy"] = report.per_task_accuracy;
  j["mean_accuracy"] = report.mean_accuracy;
  j["ci95_half_width"] = report.ci95_half_width;
  j["tasks"] = report.per_task_accuracy.size();
  j["config"] = report.config;
  if (include_timing) j["wall_time_seconds"] = report.wall_time_seconds;
  return j;
}

nlohmann::json to_json(const SweepReport& report, bool include_timing) {
  nlohmann::json j;
  j["axis"] = report.axis;
  j["points"] = nlohmann::json::array();
  for (const auto& p : report.points)
    j["points"].push_back({{"setting", p.setting}, {"report", to_json(p.report, include_timing)}});
  return j;
}

nlohmann::json to_json(const std::vector<TrainLogEntry>& log) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : log)
    j.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}, {"mean_accuracy", e.mean_accuracy}});
  return j;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(2) << "accuracy " << 100.0 * report.mean_accuracy
      << " +- " << 100.0 * report.ci95_half_width << " % over " << report.per_task_accuracy.size()
      << " tasks\n";
  return out.str();
}

std::string format_table(const SweepReport& report) {
  std::ostringstream out;
  out << std::left << std::setw(12) << report.axis << std::right << std::setw(12) << "accuracy"
      << std::setw(10) << "ci95" << std::setw(8) << "tasks" << '\n';
  out << std::fixed << std::setprecision(2);
  for (const auto& p : report.points) {
    out << std::left << std::setw(12) << p.setting << std::right << std::setw(12)
        << 100.0 * p.report.mean_accuracy << std::setw(10) << 100.0 * p.report.ci95_half_width
        << std::setw(8) << p.report.per_task_accuracy.size() << '\n';
  }
  return out.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorCode::IoFailure, "write to " + path.string() + " failed");
}

}  // namespace cpes
