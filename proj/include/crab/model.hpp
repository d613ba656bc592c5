#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "crab/batch.hpp"
#include "crab/layers.hpp"
#include "crab/tensor.hpp"

namespace crab {

enum class ModalityMode { Bimodal, SpeechOnly, TextOnly };

std::string to_string(ModalityMode mode);
ModalityMode modality_from_string(const std::string& name);

struct ModelConfig {
  std::size_t speech_dim = 0;
  std::size_t text_dim = 0;
  std::size_t hidden = 512;
  std::size_t attention_heads = 1;
  std::size_t num_classes = 0;
  std::size_t csl_dim = 128;
  ModalityMode mode = ModalityMode::Bimodal;
  // Trainable square projection per modality, initialized to identity, that
  // stands in for a fine-tuned pretrained encoder.
  bool encoder_stub = false;
  // Linear probe per supervised leg (used by the MLS+CE objective).
  bool probe_heads = false;

  // Width of the fused vector fed to the classifier: 4h bimodal, 2h otherwise.
  std::size_t fused_dim() const;
  std::size_t leg_count() const;
  // Input width of each supervised leg, in leg order.
  std::vector<std::size_t> leg_input_dims() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ModalityParams {
  std::optional<LinearParams> encoder_stub;
  LinearParams projection;  // D -> h
  LayerNormParams norm;
  GruParams gru;            // h -> 2h
  AttentionPoolingParams pool;
};

struct CrabParams {
  ModelConfig config;
  std::optional<ModalityParams> speech;
  std::optional<ModalityParams> text;
  // Bimodal only: speech queries attending over text, and the reverse.
  std::optional<CrossAttentionParams> speech_to_text;
  std::optional<CrossAttentionParams> text_to_speech;
  LayerNormParams classifier_norm;
  LinearParams classifier_fc1;  // D_f -> h
  LinearParams classifier_fc2;  // h -> E
  // Training-only heads. Order: speech unimodal, text unimodal, speech
  // pooled, text pooled, classifier (unimodal modes: unimodal, pooled,
  // classifier). Empty when a checkpoint was loaded without them.
  std::vector<CslParams> legs;
  std::vector<LinearParams> probes;
};

CrabParams init_params(const ModelConfig& cfg, std::uint64_t seed);

enum class ParamGroup { Main, Encoder };

std::string to_string(ParamGroup group);

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group;
};

// Stable order; names are unique.
std::vector<NamedParam> named_parameters(const CrabParams& params);

struct ParameterGroups {
  std::vector<NamedParam> main;
  std::vector<NamedParam> encoder;
};

ParameterGroups parameter_groups(const CrabParams& params);

std::size_t count_parameters(const CrabParams& params);
// Closed-form count for a freshly initialized model (see README).
std::size_t expected_parameter_count(const ModelConfig& cfg);

struct CrabOutput {
  Tensor logits;                       // [B, E]
  std::vector<Tensor> csl_embeddings;  // [B, csl_dim] each, training only
  std::vector<Tensor> probe_logits;    // [B, E] each, training with probes
  Tensor fused;                        // [B, D_f]
  std::vector<Tensor> pooling_weights; // [B, T] per modality present
};

enum class ForwardMode {
  Train,     // evaluates supervised legs (and probes when present)
  Inference  // legs are never executed
};

CrabOutput forward(const CrabParams& params, const Batch& batch, ForwardMode mode = ForwardMode::Train);

// Checkpoint = <dir>/params.bin (concatenated CRFT records, 1-D tensors stored
// as 1 x n) plus <dir>/params.json: model config, caller metadata and an
// index of {name, shape, group, offset}.
void save_checkpoint(const CrabParams& params, const std::filesystem::path& dir,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  CrabParams params;
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, bool with_legs = true);

}  // namespace crab
