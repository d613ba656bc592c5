#pragma once

#include <cstdint>
#include <exception>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "crab/data.hpp"
#include "crab/losses.hpp"
#include "crab/metrics.hpp"
#include "crab/model.hpp"
#include "crab/optim.hpp"

namespace crab {

// Either an existing manifest or a synthetic spec that is generated into
// <output_dir>/data before training.
struct DataSource {
  std::optional<std::filesystem::path> manifest;
  std::optional<SynthSpec> synth;
};

struct RunConfig {
  ModelConfig model;  // speech_dim/text_dim/num_classes of 0 are taken from the data
  OptimConfig optim;
  LossConfig loss;    // class_weights are filled from train counts when weighted_ce
  bool weighted_ce = true;
  DataSource data;
  std::vector<std::string> label_map;  // empty: derived from the manifest
  std::filesystem::path output_dir;
  std::vector<std::string> eval_splits{"test"};
  std::uint64_t seed = 0;
  std::size_t eval_batch_size = 64;

  void validate() const;  // ConfigError
};

nlohmann::json to_json(const OptimConfig& cfg);
OptimConfig optim_config_from_json(const nlohmann::json& j);

// Round-trips through run_config_from_json; class weights are not stored.
nlohmann::json to_json(const RunConfig& cfg);
// Unknown keys anywhere are ConfigErrors. Relative paths are resolved
// against `base_dir`.
RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_run_config(const std::filesystem::path& path);

struct RunData {
  Manifest manifest;
  LabelMap labels;
  Dataset train;
  Dataset dev;
  std::map<std::string, Dataset> eval;
};

// Generates synthetic data if requested and loads train, dev and eval splits.
RunData prepare_data(const RunConfig& cfg);

struct EvalResult {
  std::vector<int> predictions;
  std::vector<int> labels;
  Tensor logits;  // [N, E], sample order
  ConfusionMatrix confusion;
  MetricReport report;
};

// Deterministic inference; argmax ties go to the lowest class index.
// Batches may be spread over CRAB_NUM_THREADS workers (default 1); the
// result does not depend on the worker count.
EvalResult evaluate(const CrabParams& params, const Dataset& data, std::size_t batch_size);

int argmax_lowest(std::span<const Real> row);

struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown train;  // means over micro-batches
  std::vector<double> lrs;
  MetricReport dev;
  bool has_dev = false;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_dev_uar = 0.0;
  std::map<std::string, MetricReport> eval;  // per eval split, best checkpoint
  CrabParams best;
  std::filesystem::path run_log;
};

// Trains, writes <output_dir>/{run_log.jsonl, timing.json, checkpoints/best,
// checkpoints/last, eval/<split>/...}. run_log.jsonl has one record per epoch
// plus one final record holding the resolved config and eval metrics; it is
// bit-identical across reruns of the same config. Wall-clock lives in
// timing.json.
TrainResult train(const RunConfig& cfg, const RunData* preloaded = nullptr);

// "start:stop:step" (inclusive) or a comma-separated list.
std::vector<double> parse_alpha_list(const std::string& text);

struct SummaryRow {
  std::string label;
  double alpha = 0.0;
  Objective objective = Objective::MLCS;
  MetricReport report;
};

// One run per alpha under <output_dir>/alpha_<value>; writes
// <output_dir>/alpha_sweep.csv (alpha,war,uar,macro_f1) on the first eval split.
std::vector<SummaryRow> sweep_alpha(const RunConfig& base, const std::vector<double>& alphas);

// Variants: CE, CE+MPCL, MLS+CE, MLCS, MLCS_SCL, MLCS_flat_lr.
RunConfig ablation_variant(const RunConfig& base, const std::string& variant);
std::vector<std::string> parse_variant_list(const std::string& text);
// Writes <output_dir>/ablation.csv (variant,objective,war,uar,macro_f1).
std::vector<SummaryRow> ablate(const RunConfig& base, const std::vector<std::string>& variants);

// 0 success, 2 config, 3 data, 4 numeric, 1 anything else.
int exit_code_for(const std::exception& e);

}  // namespace crab
