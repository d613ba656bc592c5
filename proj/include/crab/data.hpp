#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "crab/batch.hpp"
#include "crab/tensor.hpp"

namespace crab {

// ---------------------------------------------------------------------------
// CRFT feature shards
//
//   offset  size        field
//   0       4           magic "CRFT"
//   4       4           version, u32 LE (1)
//   8       4           ndim, u32 LE (2)
//   12      8 * ndim    dims, u64 LE (rows, cols)
//   12+8n   4 * prod    payload, IEEE-754 binary32 LE, row-major

inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderBytes = 4 + 4 + 4 + 2 * 8;

std::vector<std::uint8_t> encode_shard(const Tensor& matrix);
// Decodes one record starting at bytes[0]. `consumed` receives the record
// length; `base_offset` is added to offsets reported in errors.
Tensor decode_shard(std::span<const std::uint8_t> bytes, std::size_t* consumed = nullptr,
                    std::size_t base_offset = 0);

void write_shard(const std::filesystem::path& path, const Tensor& matrix);
// The file must hold exactly one record.
Tensor read_shard(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Labels and manifests

class LabelMap {
 public:
  LabelMap() = default;
  explicit LabelMap(std::vector<std::string> names);

  int index_of(const std::string& label) const;  // DataError when unknown
  const std::string& name(int index) const;
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

 private:
  std::vector<std::string> names_;
};

struct ManifestRecord {
  std::string id;
  std::string label;
  std::string speech_path;  // relative to the manifest directory
  std::string text_path;
  std::string split;        // train | dev | test
};

struct Manifest {
  std::filesystem::path root;  // directory holding manifest.jsonl
  std::vector<ManifestRecord> records;
};

// One JSON object per line.
Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

// Label order: the generator sidecar (generator.json) when present next to
// the manifest, otherwise labels sorted lexicographically.
LabelMap label_map_for(const Manifest& manifest);

// Counts in label-map order; zeros for an empty split.
std::vector<std::int64_t> count_labels(const Manifest& manifest, const LabelMap& labels, const std::string& split);

// ---------------------------------------------------------------------------
// Synthetic bimodal data

enum class ClassSampling {
  Stratified,  // per-split class counts fixed by largest-remainder rounding
  Iid          // labels drawn independently from the proportions
};

struct SynthSpec {
  std::string preset = "custom";
  std::vector<std::string> class_names;
  std::vector<double> class_proportions;
  double between = 1.0;    // centroid scale
  double within = 1.0;     // per-frame/per-token noise std
  double agreement = 1.0;  // P(text cluster == speech class)
  std::size_t speech_len_min = 8;
  std::size_t speech_len_max = 16;
  std::size_t text_len_min = 4;
  std::size_t text_len_max = 10;
  std::size_t speech_dim = 32;
  std::size_t text_dim = 32;
  std::size_t train_count = 0;
  std::size_t dev_count = 0;
  std::size_t test_count = 0;
  ClassSampling sampling = ClassSampling::Stratified;
  std::uint64_t seed = 0;

  std::size_t num_classes() const { return class_names.size(); }
  void validate() const;  // ConfigError on any violation
};

nlohmann::json to_json(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j);

// "meld-like" (7 classes), "iemocap-like" (4 classes) or "balanced"
// (num_classes equal shares; default 4).
SynthSpec synth_preset(const std::string& name, std::size_t num_classes = 4);

struct GenerationLog {
  std::map<std::string, std::vector<std::int64_t>> class_draws;  // per split
};

// Writes manifest.jsonl, speech/*.crft, text/*.crft and generator.json
// (spec, label names, class centroids, draw counts) under out_dir.
Manifest generate_synthetic(const SynthSpec& spec, const std::filesystem::path& out_dir,
                            GenerationLog* log = nullptr);

// ---------------------------------------------------------------------------
// In-memory datasets and batching

struct Sample {
  std::string id;
  int label = 0;
  Tensor speech;  // [F, D_s]
  Tensor text;    // [L, D_t]
};

struct Dataset {
  LabelMap labels;
  std::vector<Sample> samples;

  std::size_t speech_dim() const;
  std::size_t text_dim() const;
};

// Reads every shard of a split; errors name the offending utterance id.
Dataset load_split(const Manifest& manifest, const LabelMap& labels, const std::string& split);

// Right-pads each batch to its own max lengths. Order is the sample order, or
// a permutation determined by (seed, epoch) when shuffling. The last partial
// batch is kept.
std::vector<Batch> make_batches(const Dataset& data, std::size_t batch_size,
                                std::optional<std::uint64_t> shuffle_seed = std::nullopt, std::uint64_t epoch = 0);

std::vector<Batch> make_batches(const Manifest& manifest, const std::string& split, std::size_t batch_size,
                                std::optional<std::uint64_t> shuffle_seed = std::nullopt, std::uint64_t epoch = 0);

Batch collate(std::span<const Sample* const> samples);

}  // namespace crab
