#pragma once

#include <cmath>
#include <cstdint>

#include "cki/data.hpp"

namespace cki {

/// Adversarial-weight warm-up: min(1, epoch / warmup_epochs); 1 when the
/// warm-up is disabled.
inline double lambda_schedule(int64_t epoch, int64_t warmup_epochs) {
  if (epoch < 0) throw ConfigError("lambda_schedule: negative epoch");
  if (warmup_epochs <= 0) return 1.0;
  return std::min(1.0, static_cast<double>(epoch) / static_cast<double>(warmup_epochs));
}

/// Step decay: base_lr * gamma^floor(epoch / (total_epochs/10)).
inline double lr_schedule(double base_lr, int64_t epoch, int64_t total_epochs, double gamma) {
  if (total_epochs < 10) throw ConfigError("lr_schedule: total_epochs must be >= 10");
  if (epoch < 0) throw ConfigError("lr_schedule: negative epoch");
  const double decade = static_cast<double>(total_epochs) / 10.0;
  const double k = std::floor(static_cast<double>(epoch) / decade);
  return base_lr * std::pow(gamma, k);
}

}  // namespace cki
