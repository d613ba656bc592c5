#include "crab/metrics.hpp"

#include <fstream>
#include <numeric>
#include <sstream>

#include "crab/errors.hpp"

namespace crab {

std::int64_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::int64_t{0}); }

ConfusionMatrix confusion(std::span<const int> labels, std::span<const int> predictions, std::size_t classes) {
  if (labels.size() != predictions.size()) throw DimensionError("labels and predictions differ in length");
  ConfusionMatrix cm{classes, std::vector<std::int64_t>(classes * classes, 0)};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    const int p = predictions[i];
    if (y < 0 || p < 0 || static_cast<std::size_t>(y) >= classes || static_cast<std::size_t>(p) >= classes) {
      throw ContractError("label/prediction outside [0, " + std::to_string(classes) + ")");
    }
    ++cm.counts[static_cast<std::size_t>(y) * classes + static_cast<std::size_t>(p)];
  }
  return cm;
}

MetricReport report(const ConfusionMatrix& cm) {
  const std::size_t e = cm.classes;
  const auto total = cm.total();
  if (e == 0 || total == 0) throw DegenerateInputError("metrics of an empty confusion matrix");
  MetricReport r;
  r.recall.assign(e, 0.0);
  r.precision.assign(e, 0.0);
  r.f1.assign(e, 0.0);
  r.support.assign(e, 0);
  std::int64_t trace = 0;
  std::size_t supported = 0;
  double recall_sum = 0.0;
  double f1_sum = 0.0;
  for (std::size_t j = 0; j < e; ++j) {
    std::int64_t row = 0;
    std::int64_t col = 0;
    for (std::size_t k = 0; k < e; ++k) {
      row += cm.at(j, k);
      col += cm.at(k, j);
    }
    const auto hit = cm.at(j, j);
    trace += hit;
    r.support[j] = row;
    r.recall[j] = row > 0 ? static_cast<double>(hit) / static_cast<double>(row) : 0.0;
    r.precision[j] = col > 0 ? static_cast<double>(hit) / static_cast<double>(col) : 0.0;
    const double denom = r.precision[j] + r.recall[j];
    r.f1[j] = denom > 0.0 ? 2.0 * r.precision[j] * r.recall[j] / denom : 0.0;
    if (row > 0) {
      ++supported;
      recall_sum += r.recall[j];
      f1_sum += r.f1[j];
    }
  }
  r.war = static_cast<double>(trace) / static_cast<double>(total);
  r.uar = recall_sum / static_cast<double>(supported);
  r.macro_f1 = f1_sum / static_cast<double>(supported);
  return r;
}

nlohmann::json to_json(const MetricReport& r, const std::vector<std::string>& class_names) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t j = 0; j < r.recall.size(); ++j) {
    per_class.push_back({{"class", j < class_names.size() ? class_names[j] : std::to_string(j)},
                         {"recall", r.recall[j]},
                         {"precision", r.precision[j]},
                         {"f1", r.f1[j]},
                         {"support", r.support[j]}});
  }
  return {{"war", r.war}, {"uar", r.uar}, {"macro_f1", r.macro_f1}, {"per_class", per_class}};
}

void emit_report(const MetricReport& r, const ConfusionMatrix& cm, const std::vector<std::string>& class_names,
                 const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "metrics.json", std::ios::trunc);
    out << to_json(r, class_names).dump(2) << '\n';
    if (!out) throw DataError("failed writing " + (dir / "metrics.json").string());
  }
  std::ofstream csv(dir / "confusion.csv", std::ios::trunc);
  csv << "true\\pred";
  for (std::size_t j = 0; j < cm.classes; ++j) csv << ',' << (j < class_names.size() ? class_names[j] : std::to_string(j));
  csv << '\n';
  for (std::size_t i = 0; i < cm.classes; ++i) {
    csv << (i < class_names.size() ? class_names[i] : std::to_string(i));
    for (std::size_t j = 0; j < cm.classes; ++j) csv << ',' << cm.at(i, j);
    csv << '\n';
  }
  if (!csv) throw DataError("failed writing " + (dir / "confusion.csv").string());
}

ConfusionMatrix read_confusion_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<std::vector<std::int64_t>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');  // row label
    std::vector<std::int64_t> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stoll(cell));
    rows.push_back(std::move(row));
  }
  ConfusionMatrix cm{rows.size(), {}};
  for (const auto& row : rows) {
    if (row.size() != rows.size()) throw DataError("confusion CSV is not square: " + path.string());
    cm.counts.insert(cm.counts.end(), row.begin(), row.end());
  }
  return cm;
}

}  // namespace crab
