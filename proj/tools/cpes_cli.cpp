// cpes: command-line front end for class-relevant patch selection few-shot runs.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cpes/embed_store.hpp"
#include "cpes/error.hpp"
#include "cpes/harness.hpp"

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Splices `--config file.json` into the argument list: every key of the flat
// JSON object ("n-way" or "n_way") becomes a flag unless that flag was given
// explicitly. Returns the arguments after argv[0], in order.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::string config_path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      config_path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
      break;
    }
    if (args[i].rfind("--config=", 0) == 0) {
      config_path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      break;
    }
  }
  if (config_path.empty()) return args;

  std::ifstream in(config_path);
  if (!in) throw cpes::Error(cpes::ErrorCode::IoFailure, "cannot open config " + config_path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + config_path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + config_path + ": top level must be an object");

  std::set<std::string> explicit_flags;
  for (const auto& a : args) {
    if (a.rfind("--", 0) != 0) continue;
    const auto eq = a.find('=');
    explicit_flags.insert(a.substr(2, eq == std::string::npos ? std::string::npos : eq - 2));
  }

  auto scalar = [](const nlohmann::json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  };
  for (const auto& [key, value] : j.items()) {
    std::string name = key;
    for (auto& c : name)
      if (c == '_') c = '-';
    if (explicit_flags.count(name)) continue;
    if (value.is_boolean()) {
      if (value.get<bool>()) args.push_back("--" + name);
      continue;
    }
    args.push_back("--" + name);
    if (value.is_array()) {
      std::string joined;
      for (const auto& v : value) joined += (joined.empty() ? "" : ",") + scalar(v);
      args.push_back(joined);
    } else {
      args.push_back(scalar(value));
    }
  }
  return args;
}

struct RunFlags {
  cpes::RunConfig cfg;
  std::uint32_t m = 0;
  std::string distance = "cos";
  std::string schedule = "cosine";
};

// Only documents the flag; expand_config() consumes it before parsing.
void add_config_option(CLI::App* sub) {
  sub->add_option("--config", "JSON file supplying any flag; explicit flags win");
}

void add_selection_flags(CLI::App* sub, RunFlags& f) {
  sub->add_option("--m", f.m, "Selected patches per image (default: per store)");
  sub->add_option("--distance", f.distance, "Patch ranking function")
      ->check(CLI::IsMember({"cos", "dot", "abs", "sqr"}))
      ->capture_default_str();
}

void add_run_flags(CLI::App* sub, RunFlags& f) {
  auto& c = f.cfg;
  add_selection_flags(sub, f);
  sub->add_option("--n-way", c.n_way)->capture_default_str();
  sub->add_option("--k-shot", c.k_shot)->capture_default_str();
  sub->add_option("--queries", c.queries_per_class, "Queries per class")->capture_default_str();
  sub->add_option("--tasks", c.eval_tasks, "Evaluation tasks")->capture_default_str();
  sub->add_option("--seed", c.seed)->capture_default_str();
  sub->add_option("--epochs", c.epochs)->capture_default_str();
  sub->add_option("--episodes-per-epoch", c.episodes_per_epoch)->capture_default_str();
  sub->add_option("--lr", c.optimizer.learning_rate, "Peak learning rate")->capture_default_str();
  sub->add_option("--floor-lr", c.optimizer.floor_lr)->capture_default_str();
  sub->add_option("--weight-decay", c.optimizer.weight_decay)->capture_default_str();
  sub->add_option("--schedule", f.schedule)
      ->check(CLI::IsMember({"cosine", "constant"}))
      ->capture_default_str();
  sub->add_option("--hidden", c.hidden, "MLP hidden width")->capture_default_str();
  sub->add_option("--threads", c.threads)->capture_default_str();
}

cpes::RunConfig finish(RunFlags& f, const CLI::App* sub) {
  cpes::RunConfig cfg = f.cfg;
  if (sub->count("--m") > 0) cfg.m = f.m;
  cfg.distance = *cpes::parse_distance(f.distance);
  cfg.optimizer.schedule = f.schedule == "constant" ? cpes::LrSchedule::Constant : cpes::LrSchedule::Cosine;
  return cfg;
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  cpes::write_text_file(path, j.dump(2) + "\n");
}

nlohmann::json describe(const cpes::EmbeddingStore& store) {
  std::map<std::uint32_t, std::size_t> per_class;
  for (const auto& r : store.records) ++per_class[r.label];
  nlohmann::json j;
  j["dim_d"] = store.dim_d;
  j["patches_m"] = store.patches_m;
  j["class_count"] = store.class_count;
  j["record_count"] = store.records.size();
  j["ground_truth"] = store.ground_truth.has_value();
  if (!per_class.empty()) {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& [label, n] : per_class) {
      lo = std::min(lo, n);
      hi = std::max(hi, n);
    }
    j["records_per_class_min"] = lo;
    j["records_per_class_max"] = hi;
  }
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-relevant patch embedding selection: few-shot head training and evaluation", "cpes"};
  app.require_subcommand(1);

  // gen-synthetic
  cpes::SyntheticConfig syn;
  std::string syn_out;
  auto* gen = app.add_subcommand("gen-synthetic", "Write a planted-signal CPEM store");
  add_config_option(gen);
  gen->add_option("--classes", syn.class_count)->capture_default_str();
  gen->add_option("--records-per-class", syn.records_per_class)->capture_default_str();
  gen->add_option("--dim", syn.dim)->capture_default_str();
  gen->add_option("--patches", syn.patches)->capture_default_str();
  gen->add_option("--signal", syn.signal_patches, "Signal patches per record")->capture_default_str();
  gen->add_option("--signal-noise", syn.signal_noise)->capture_default_str();
  gen->add_option("--distractors", syn.distractor_pool_size, "Distractor pool size")->capture_default_str();
  gen->add_option("--distractor-noise", syn.distractor_noise)->capture_default_str();
  gen->add_option("--seed", syn.seed)->capture_default_str();
  gen->add_option("--out", syn_out, "Output .cpem path")->required();

  // train
  RunFlags train_flags;
  std::string train_out, train_log;
  auto* train = app.add_subcommand("train", "Train the scoring head on a store");
  add_config_option(train);
  train->add_option("--store", train_flags.cfg.store_path)->required();
  add_run_flags(train, train_flags);
  train->add_option("--out", train_out, "Checkpoint (.cpeh) path")->required();
  train->add_option("--log", train_log, "Training log JSON (default: <out>.log.json)");

  // eval
  RunFlags eval_flags;
  std::string eval_head, eval_out;
  bool eval_timing = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint over sampled tasks");
  add_config_option(eval);
  eval->add_option("--store", eval_flags.cfg.store_path)->required();
  eval->add_option("--head", eval_head, "Checkpoint from `train`")->required();
  add_run_flags(eval, eval_flags);
  eval->add_option("--out", eval_out, "Report JSON path");
  eval->add_flag("--timing", eval_timing, "Include wall time in the report file");

  // sweeps
  RunFlags sweep_flags;
  std::vector<std::uint32_t> m_values;
  std::vector<std::string> kind_names;
  std::string sweep_out;
  bool sweep_timing = false;
  auto add_sweep = [&](const char* name, const char* help) {
    auto* sub = app.add_subcommand(name, help);
    add_config_option(sub);
    sub->add_option("--store", sweep_flags.cfg.store_path, "Training store")->required();
    sub->add_option("--eval-store", sweep_flags.cfg.eval_store_path, "Evaluation store (default: --store)");
    add_run_flags(sub, sweep_flags);
    sub->add_option("--out", sweep_out, "Sweep report JSON path");
    sub->add_flag("--timing", sweep_timing, "Include wall times in the report file");
    return sub;
  };
  auto* sweep_m = add_sweep("sweep-m", "Train and evaluate once per selected-patch count");
  sweep_m->add_option("--values", m_values, "m values, in report order")->required()->delimiter(',');
  auto* sweep_d = add_sweep("sweep-distance", "Train and evaluate once per ranking function");
  sweep_d->add_option("--kinds", kind_names, "Distance kinds (default: cos,dot,abs,sqr)")
      ->delimiter(',')
      ->check(CLI::IsMember({"cos", "dot", "abs", "sqr"}));

  // export-masks
  RunFlags mask_flags;
  std::vector<std::uint64_t> mask_ids;
  std::string mask_out;
  auto* masks = app.add_subcommand("export-masks", "Write per-record selection masks (JSON + PGM)");
  add_config_option(masks);
  masks->add_option("--store", mask_flags.cfg.store_path)->required();
  add_selection_flags(masks, mask_flags);
  masks->add_option("--records", mask_ids, "Record ids")->required()->delimiter(',');
  masks->add_option("--out", mask_out, "Output directory")->required();

  // inspect-store
  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect-store", "Print a store summary as JSON");
  inspect->add_option("--store", inspect_path)->required();

  try {
    auto args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const cpes::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  }

  try {
    if (*gen) {
      const auto store = cpes::generate_synthetic(syn);
      const auto bytes = cpes::write_store_file(store, syn_out);
      std::cout << "wrote " << store.records.size() << " records (" << bytes << " bytes) to "
                << syn_out << '\n';
    } else if (*train) {
      auto cfg = finish(train_flags, train);
      const auto store = cpes::read_store_file(cfg.store_path);
      const auto result = cpes::train(cfg, store);
      cpes::write_head_file(result.head, train_out);
      write_json(train_log.empty() ? train_out + ".log.json" : train_log, cpes::to_json(result.log));
      for (const auto& e : result.log)
        std::cout << "epoch " << e.epoch << "  loss " << e.mean_loss << "  acc " << e.mean_accuracy << '\n';
      std::cout << "checkpoint " << train_out << '\n';
    } else if (*eval) {
      auto cfg = finish(eval_flags, eval);
      const auto store = cpes::read_store_file(cfg.store_path);
      const auto head = cpes::read_head_file(eval_head);
      const auto report = cpes::evaluate(head, cfg, store);
      if (!eval_out.empty()) write_json(eval_out, cpes::to_json(report, eval_timing));
      std::cout << cpes::format_report(report) << "wall time " << report.wall_time_seconds << " s\n";
    } else if (*sweep_m || *sweep_d) {
      auto cfg = finish(sweep_flags, *sweep_m ? sweep_m : sweep_d);
      const auto train_store = cpes::read_store_file(cfg.store_path);
      const auto eval_store = cfg.eval_store_path.empty() ? train_store : cpes::read_store_file(cfg.eval_store_path);
      cpes::SweepReport report;
      if (*sweep_m) {
        report = cpes::sweep_m(cfg, train_store, eval_store, m_values);
      } else {
        std::vector<cpes::DistanceKind> kinds;
        for (const auto& n : kind_names) kinds.push_back(*cpes::parse_distance(n));
        if (kinds.empty()) kinds.assign(std::begin(cpes::kAllDistanceKinds), std::end(cpes::kAllDistanceKinds));
        report = cpes::sweep_distance(cfg, train_store, eval_store, kinds);
      }
      if (!sweep_out.empty()) write_json(sweep_out, cpes::to_json(report, sweep_timing));
      std::cout << cpes::format_table(report);
    } else if (*masks) {
      auto cfg = finish(mask_flags, masks);
      const auto store = cpes::read_store_file(cfg.store_path);
      for (const auto& p : cpes::export_masks(store, cfg, mask_ids, mask_out)) std::cout << p.string() << '\n';
    } else if (*inspect) {
      std::cout << describe(cpes::read_store_file(inspect_path)).dump(2) << '\n';
    }
  } catch (const cpes::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cpes::is_io_or_format(e.code()) ? kExitIo : kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return 0;
}
