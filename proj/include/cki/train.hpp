#pragma once

#include <string>
#include <vector>

#include "cki/config.hpp"
#include "cki/losses.hpp"
#include "cki/metrics.hpp"

namespace cki {

struct EpochLog {
  int64_t epoch = 0;
  double lr = 0.0;
  double lambda = 0.0;
  LossReport mean_losses;
  double eval_oa = 0.0, eval_aa = 0.0, eval_kappa = 0.0;
};

struct RunRecord {
  RunConfig config;
  std::vector<EpochLog> epochs;
  EvalReport final_eval;
  EvalPath eval_path = EvalPath::student;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
  bool has_weight_stats = false;
  WeightStats weight_stats;  // filled on synthetic runs (shared classes known)
};

/// Full training loop: paired source/target mini-batches, scheduled
/// adversarial weight and learning rate, one AdamW instance over every
/// component. Deterministic in the config seed. When output_dir is set,
/// emits losses.csv, eval.csv, metrics files, checkpoints and run.lock.
RunRecord train(const RunConfig& cfg);

/// Student-path predictions over the manifest's test coordinates.
EvalReport evaluate(const std::string& checkpoint_path, const std::string& scene_header,
                    const std::string& manifest_path);

EvalReport evaluate_model(CkiModel& model, const SceneCube& scene,
                          const std::vector<std::pair<int64_t, int64_t>>& coords,
                          EvalPath path, int64_t window, int64_t eval_batch);

struct AblationRow {
  std::string label;
  AblationFlags flags;
  std::vector<RunRecord> runs;  // one per seed
  double mean_oa = 0.0, mean_aa = 0.0, mean_kappa = 0.0, std_oa = 0.0;
};

/// The five cumulative component configurations, each trained once per
/// seed (seeds shared across rows). Writes ablation.csv when the base
/// config has an output_dir.
std::vector<AblationRow> ablate(const RunConfig& base, const std::vector<uint64_t>& seeds,
                                int workers = 0);

struct TauRow {
  double tau = 0.0;
  std::vector<double> oas;
  double mean_oa = 0.0, std_oa = 0.0;
};

/// One run per (tau, seed) with shared seeds; emits tau_sweep.csv/.json
/// under the base output_dir.
std::vector<TauRow> sweep_temperature(const RunConfig& base, const std::vector<double>& taus,
                                      const std::vector<uint64_t>& seeds, int workers = 0);

/// Helper shared by the drivers and tests: take rows of a window batch.
WindowBatch subset(const WindowBatch& all, const std::vector<int64_t>& idx);

}  // namespace cki
