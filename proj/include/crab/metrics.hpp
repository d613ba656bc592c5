#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace crab {

// Rows are true classes, columns predictions.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::int64_t> counts;  // row-major classes x classes

  std::int64_t at(std::size_t truth, std::size_t predicted) const { return counts[truth * classes + predicted]; }
  std::int64_t total() const;
};

ConfusionMatrix confusion(std::span<const int> labels, std::span<const int> predictions, std::size_t classes);

struct MetricReport {
  double war = 0.0;       // overall accuracy
  double uar = 0.0;       // mean recall over classes with support
  double macro_f1 = 0.0;  // mean F1 over classes with support
  std::vector<double> recall;
  std::vector<double> precision;  // 0 when a class is never predicted
  std::vector<double> f1;         // 0 when precision and recall are both 0
  std::vector<std::int64_t> support;
};

MetricReport report(const ConfusionMatrix& cm);

nlohmann::json to_json(const MetricReport& r, const std::vector<std::string>& class_names);

// Writes <dir>/metrics.json and <dir>/confusion.csv. The CSV has a header
// line "true\pred,<class names...>" followed by one row per true class.
void emit_report(const MetricReport& r, const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                 const std::filesystem::path& dir);

ConfusionMatrix read_confusion_csv(const std::filesystem::path& path);

}  // namespace crab
