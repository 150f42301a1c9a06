#include "cki/metrics.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

namespace cki {

std::vector<int64_t> confusion_matrix(const std::vector<int>& true_labels,
                                      const std::vector<int>& pred_labels, int num_classes) {
  if (true_labels.size() != pred_labels.size())
    throw DataError("confusion_matrix: label vectors differ in length");
  std::vector<int64_t> m(static_cast<std::size_t>(num_classes) * num_classes, 0);
  for (std::size_t i = 0; i < true_labels.size(); ++i) {
    const int t = true_labels[i], p = pred_labels[i];
    if (t < 1 || t > num_classes || p < 1 || p > num_classes)
      throw DataError("confusion_matrix: label outside 1..K");
    ++m[static_cast<std::size_t>((t - 1) * num_classes + (p - 1))];
  }
  return m;
}

EvalReport compute_metrics(const std::vector<int64_t>& confusion, int num_classes) {
  if (static_cast<int>(confusion.size()) != num_classes * num_classes)
    throw DataError("compute_metrics: matrix size mismatch");
  EvalReport r;
  r.num_classes = num_classes;
  r.confusion = confusion;

  int64_t n = 0, trace = 0;
  std::vector<int64_t> row(static_cast<std::size_t>(num_classes), 0);
  std::vector<int64_t> col(static_cast<std::size_t>(num_classes), 0);
  for (int t = 0; t < num_classes; ++t)
    for (int p = 0; p < num_classes; ++p) {
      const int64_t c = confusion[static_cast<std::size_t>(t * num_classes + p)];
      if (c < 0) throw DataError("compute_metrics: negative count");
      n += c;
      row[static_cast<std::size_t>(t)] += c;
      col[static_cast<std::size_t>(p)] += c;
      if (t == p) trace += c;
    }
  if (n == 0) throw DataError("compute_metrics: empty confusion matrix");
  r.n = n;
  r.oa = static_cast<double>(trace) / static_cast<double>(n);

  r.per_class_acc.resize(static_cast<std::size_t>(num_classes), 0.0);
  r.class_present.resize(static_cast<std::size_t>(num_classes), false);
  double acc_sum = 0.0;
  int present = 0;
  for (int k = 0; k < num_classes; ++k) {
    if (row[static_cast<std::size_t>(k)] > 0) {
      r.class_present[static_cast<std::size_t>(k)] = true;
      r.per_class_acc[static_cast<std::size_t>(k)] =
          static_cast<double>(confusion[static_cast<std::size_t>(k * num_classes + k)]) /
          static_cast<double>(row[static_cast<std::size_t>(k)]);
      acc_sum += r.per_class_acc[static_cast<std::size_t>(k)];
      ++present;
    }
  }
  r.aa = present > 0 ? acc_sum / present : 0.0;

  double pe = 0.0;
  const double dn = static_cast<double>(n);
  for (int k = 0; k < num_classes; ++k)
    pe += static_cast<double>(row[static_cast<std::size_t>(k)]) *
          static_cast<double>(col[static_cast<std::size_t>(k)]) / (dn * dn);
  if (1.0 - pe < 1e-15) {
    r.kappa = r.oa >= 1.0 - 1e-15 ? 1.0 : 0.0;
  } else {
    r.kappa = (r.oa - pe) / (1.0 - pe);
  }
  return r;
}

std::string EvalReport::text() const {
  std::ostringstream os;
  os << "n " << n << "\n";
  os << "oa " << oa << "\n";
  os << "aa " << aa << "\n";
  os << "kappa " << kappa << "\n";
  for (int k = 0; k < num_classes; ++k) {
    os << "class_acc " << (k + 1) << " ";
    if (class_present[static_cast<std::size_t>(k)])
      os << per_class_acc[static_cast<std::size_t>(k)];
    else
      os << "absent";
    os << "\n";
  }
  os << "confusion rows=true cols=predicted\n";
  for (int t = 0; t < num_classes; ++t) {
    for (int p = 0; p < num_classes; ++p) {
      if (p > 0) os << " ";
      os << cell(t, p);
    }
    os << "\n";
  }
  return os.str();
}

std::string EvalReport::to_json() const {
  nlohmann::json j;
  j["n"] = n;
  j["oa"] = oa;
  j["aa"] = aa;
  j["kappa"] = kappa;
  j["per_class_acc"] = per_class_acc;
  std::vector<int> present(class_present.begin(), class_present.end());
  j["class_present"] = present;
  j["confusion"] = confusion;
  j["num_classes"] = num_classes;
  return j.dump(2);
}

void save_report(const EvalReport& r, const std::string& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(std::filesystem::path(dir) / "metrics.txt");
    out << r.text();
  }
  {
    std::ofstream out(std::filesystem::path(dir) / "metrics.json");
    out << r.to_json() << "\n";
  }
  {
    std::ofstream out(std::filesystem::path(dir) / "confusion.txt");
    for (int t = 0; t < r.num_classes; ++t) {
      for (int p = 0; p < r.num_classes; ++p) {
        if (p > 0) out << " ";
        out << r.cell(t, p);
      }
      out << "\n";
    }
  }
}

}  // namespace cki
