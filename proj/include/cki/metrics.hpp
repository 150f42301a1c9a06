#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cki/data.hpp"

namespace cki {

/// Confusion-matrix based evaluation for one scene/split.
struct EvalReport {
  int num_classes = 0;
  std::vector<int64_t> confusion;  // K*K, rows = true, cols = predicted
  std::vector<double> per_class_acc;
  std::vector<bool> class_present;  // row had samples
  double oa = 0.0;
  double aa = 0.0;
  double kappa = 0.0;
  int64_t n = 0;

  int64_t cell(int t, int p) const {
    return confusion[static_cast<std::size_t>(t * num_classes + p)];
  }
  std::string text() const;
  std::string to_json() const;
};

/// Counts (true, predicted) pairs; labels are 1-based and validated.
std::vector<int64_t> confusion_matrix(const std::vector<int>& true_labels,
                                      const std::vector<int>& pred_labels, int num_classes);

/// OA = trace/n, per-class accuracy = diagonal/row-sum (empty rows flagged
/// and excluded from AA), kappa = (p_o - p_e) / (1 - p_e).
EvalReport compute_metrics(const std::vector<int64_t>& confusion, int num_classes);

void save_report(const EvalReport& r, const std::string& dir);

}  // namespace cki
