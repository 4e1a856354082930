#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cpes/embed_store.hpp"
#include "cpes/episodic.hpp"
#include "cpes/scorer.hpp"
#include "cpes/selection.hpp"

namespace cpes {

inline constexpr std::uint32_t kDefaultEvalTasks = 1000;

struct RunConfig {
  std::string store_path;
  // Store used by evaluation; falls back to store_path when empty.
  std::string eval_store_path;
  std::uint32_t n_way = 5;
  std::uint32_t k_shot = 1;
  std::uint32_t queries_per_class = kDefaultQueriesPerClass;
  std::optional<std::uint32_t> m;  // resolved per store when unset
  DistanceKind distance = DistanceKind::Cos;
  std::uint32_t epochs = 5;
  std::uint32_t episodes_per_epoch = 50;
  std::uint32_t eval_tasks = kDefaultEvalTasks;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  std::uint32_t hidden = kDefaultHidden;
  std::uint32_t threads = 1;
};

// Checks counts and optimizer ranges; does not touch the store.
void validate(const RunConfig& cfg);

/// Patch count used for a store when the config leaves m unset: the planted
/// signal count for synthetic stores, 96 for 196-patch stores, and the same
/// 96/196 fraction otherwise. An explicit m above patches_m throws
/// SelectionOutOfRange.
std::uint32_t resolve_m(const RunConfig& cfg, const EmbeddingStore& store);

nlohmann::json to_json(const RunConfig& cfg);

struct TrainLogEntry {
  std::uint32_t epoch = 0;
  double mean_loss = 0.0;
  double mean_accuracy = 0.0;
};

struct TrainResult {
  MlpHead head;
  std::vector<TrainLogEntry> log;
};

// Seeds derived from RunConfig::seed for the independent random streams.
std::uint64_t head_seed(std::uint64_t seed);
std::uint64_t train_episode_seed(std::uint64_t seed);
std::uint64_t eval_episode_seed(std::uint64_t seed);

/// Episodic head training: one AdamW step per episode on the query-averaged
/// gradient. Query gradients are reduced in fixed blocks in query order, so
/// the result is identical for any thread count.
TrainResult train(const RunConfig& cfg, const EmbeddingStore& store);

struct EvalReport {
  std::vector<double> per_task_accuracy;
  double mean_accuracy = 0.0;
  double ci95_half_width = 0.0;
  nlohmann::json config;
  double wall_time_seconds = 0.0;
};

// 1.96 * sample std (ddof = 1) / sqrt(T); zero when T == 1.
double ci95_half_width(std::span<const double> values);
double mean_of(std::span<const double> values);

// Tasks 0..eval_tasks-1; a query counts as correct when the argmax class
// probability (lowest index on ties) is its true local label.
EvalReport evaluate(const MlpHead& head, const RunConfig& cfg, const EmbeddingStore& store);

struct SweepPoint {
  std::string setting;
  EvalReport report;
};

struct SweepReport {
  std::string axis;
  std::vector<SweepPoint> points;
};

// Full train + evaluate per setting, all sharing cfg.seed.
SweepReport sweep_m(const RunConfig& cfg, const EmbeddingStore& train_store,
                    const EmbeddingStore& eval_store, const std::vector<std::uint32_t>& values);
SweepReport sweep_distance(const RunConfig& cfg, const EmbeddingStore& train_store,
                           const EmbeddingStore& eval_store,
                           const std::vector<DistanceKind>& kinds);

// Writes mask_<id>.json (and mask_<id>.pgm for square patch grids) per
// record; returns the written paths. Throws UnknownRecord.
std::vector<std::filesystem::path> export_masks(const EmbeddingStore& store, const RunConfig& cfg,
                                                const std::vector<std::uint64_t>& record_ids,
                                                const std::filesystem::path& out_dir);

// Timing is left out unless asked for so that report files are reproducible.
nlohmann::json to_json(const EvalReport& report, bool include_timing = false);
nlohmann::json to_json(const SweepReport& report, bool include_timing = false);
nlohmann::json to_json(const std::vector<TrainLogEntry>& log);

std::string format_table(const SweepReport& report);
std::string format_report(const EvalReport& report);

void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace cpes
