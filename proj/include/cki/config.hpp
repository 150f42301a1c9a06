#pragma once

#include <optional>
#include <string>

#include "cki/data.hpp"
#include "cki/ifss.hpp"
#include "cki/model.hpp"

namespace cki {

enum class RunMode { cki, target_only };

/// One experiment: scenes (file headers or an inline synthetic spec),
/// split protocol, schedules, model sizing and loss configuration.
struct RunConfig {
  std::string source_scene;  // header path; empty when synth is set
  std::string target_scene;
  std::optional<SynthSpec> synth;
  std::string source_manifest;  // optional externally supplied splits
  std::string target_manifest;

  int shots_per_class = 10;
  int64_t epochs = 60;
  int64_t warmup_epochs = 20;
  int64_t batch_size = 64;
  double lr = 5e-4;
  double weight_decay = 5e-3;
  double lr_step_gamma = 0.9;
  LossWeights loss_weights;
  PatchConfig patch;
  AblationFlags flags = AblationFlags::all();
  uint64_t seed = 1;
  std::string output_dir;

  int64_t window = 8;
  int64_t common_channels = 16;
  bool normalize = true;
  RunMode mode = RunMode::cki;
  int64_t steps_per_epoch = 0;  // 0 = one pass over the source training set
  int64_t eval_batch = 128;

  void validate() const;
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);
std::string run_config_to_json(const RunConfig& cfg);

}  // namespace cki
