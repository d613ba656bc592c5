#include "crab/model.hpp"

#include <fstream>
#include <iterator>
#include <set>

#include "crab/data.hpp"
#include "crab/errors.hpp"
#include "crab/ops.hpp"

namespace crab {

namespace {

bool uses_speech(ModalityMode m) { return m != ModalityMode::TextOnly; }
bool uses_text(ModalityMode m) { return m != ModalityMode::SpeechOnly; }

ModalityParams make_modality(std::size_t input_dim, const ModelConfig& cfg, Rng& rng) {
  ModalityParams p;
  if (cfg.encoder_stub) p.encoder_stub = make_identity_linear(input_dim);
  p.projection = make_linear(input_dim, cfg.hidden, rng);
  p.norm = make_layer_norm(cfg.hidden);
  p.gru = make_gru(cfg.hidden, cfg.hidden, rng);
  p.pool = make_attention_pooling(2 * cfg.hidden, rng);
  return p;
}

void push_linear(std::vector<NamedParam>& out, const std::string& prefix, const LinearParams& p,
                 ParamGroup group = ParamGroup::Main) {
  out.push_back({prefix + ".weight", p.weight, group});
  out.push_back({prefix + ".bias", p.bias, group});
}

void push_norm(std::vector<NamedParam>& out, const std::string& prefix, const LayerNormParams& p) {
  out.push_back({prefix + ".gain", p.gain, ParamGroup::Main});
  out.push_back({prefix + ".shift", p.shift, ParamGroup::Main});
}

void push_modality(std::vector<NamedParam>& out, const std::string& prefix, const ModalityParams& p) {
  if (p.encoder_stub) push_linear(out, prefix + ".encoder_stub", *p.encoder_stub, ParamGroup::Encoder);
  push_linear(out, prefix + ".projection", p.projection);
  push_norm(out, prefix + ".norm", p.norm);
  for (auto [dir, d] : {std::pair{"fwd", &p.gru.forward}, std::pair{"bwd", &p.gru.backward}}) {
    const std::string base = prefix + ".gru." + dir;
    out.push_back({base + ".input_weights", d->input_weights, ParamGroup::Main});
    out.push_back({base + ".hidden_weights", d->hidden_weights, ParamGroup::Main});
    out.push_back({base + ".bias", d->bias, ParamGroup::Main});
  }
  out.push_back({prefix + ".pool.query", p.pool.query, ParamGroup::Main});
}

void push_attention(std::vector<NamedParam>& out, const std::string& prefix, const CrossAttentionParams& p) {
  out.push_back({prefix + ".query", p.query, ParamGroup::Main});
  out.push_back({prefix + ".key", p.key, ParamGroup::Main});
  out.push_back({prefix + ".value", p.value, ParamGroup::Main});
  out.push_back({prefix + ".output", p.output, ParamGroup::Main});
}

struct UnimodalResult {
  Tensor sequence;  // bi-GRU output [B, T, 2h]
  Tensor mask;
};

UnimodalResult run_unimodal(const ModalityParams& p, const Tensor& x, const Tensor& mask, std::size_t feat_dim,
                            const char* name) {
  if (x.rank() != 3 || x.dim(2) != feat_dim) {
    throw DimensionError(std::string(name) + " features must be [B, T, " + std::to_string(feat_dim) + "], got " +
                         shape_str(x.shape()));
  }
  Tensor h = x;
  if (p.encoder_stub) h = linear(*p.encoder_stub, h);
  h = layer_norm(p.norm, linear(p.projection, h));
  return {bi_gru(p.gru, h, mask), mask};
}

Tensor masked_time_mean(const Tensor& seq, const Tensor& mask) {
  Tensor m({mask.dim(0), mask.dim(1), 1}, std::vector<Real>(mask.data().begin(), mask.data().end()));
  return mean(seq, 1, m);
}

}  // namespace

std::string to_string(ModalityMode mode) {
  switch (mode) {
    case ModalityMode::Bimodal: return "bimodal";
    case ModalityMode::SpeechOnly: return "speech_only";
    case ModalityMode::TextOnly: return "text_only";
  }
  return "?";
}

ModalityMode modality_from_string(const std::string& name) {
  if (name == "bimodal" || name == "BIMODAL") return ModalityMode::Bimodal;
  if (name == "speech_only" || name == "SPEECH_ONLY") return ModalityMode::SpeechOnly;
  if (name == "text_only" || name == "TEXT_ONLY") return ModalityMode::TextOnly;
  throw ConfigError("unknown modality mode '" + name + "'");
}

std::string to_string(ParamGroup group) { return group == ParamGroup::Main ? "MAIN" : "ENCODER"; }

std::size_t ModelConfig::fused_dim() const { return mode == ModalityMode::Bimodal ? 4 * hidden : 2 * hidden; }

std::size_t ModelConfig::leg_count() const { return mode == ModalityMode::Bimodal ? 5 : 3; }

std::vector<std::size_t> ModelConfig::leg_input_dims() const {
  if (mode == ModalityMode::Bimodal) return {2 * hidden, 2 * hidden, 2 * hidden, 2 * hidden, hidden};
  return {2 * hidden, 2 * hidden, hidden};
}

void ModelConfig::validate() const {
  if (hidden == 0) throw ConfigError("model.hidden must be > 0");
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
  if (csl_dim == 0) throw ConfigError("model.csl_dim must be > 0");
  if (attention_heads == 0 || (2 * hidden) % attention_heads != 0) {
    throw ConfigError("attention heads must divide 2 * hidden");
  }
  if (uses_speech(mode) && speech_dim == 0) throw ConfigError("speech feature dim is zero");
  if (uses_text(mode) && text_dim == 0) throw ConfigError("text feature dim is zero");
}

nlohmann::json to_json(const ModelConfig& cfg) {
  return {{"speech_dim", cfg.speech_dim},         {"text_dim", cfg.text_dim},
          {"hidden", cfg.hidden},                 {"attention_heads", cfg.attention_heads},
          {"num_classes", cfg.num_classes},       {"csl_dim", cfg.csl_dim},
          {"modality_mode", to_string(cfg.mode)}, {"encoder_stub", cfg.encoder_stub},
          {"probe_heads", cfg.probe_heads}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {"speech_dim",  "text_dim",      "hidden",       "attention_heads",
                                              "num_classes", "csl_dim",       "modality_mode", "encoder_stub",
                                              "probe_heads"};
  if (!j.is_object()) throw ConfigError("model config must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown model config key '" + key + "'");
  }
  ModelConfig cfg;
  try {
    cfg.speech_dim = j.value("speech_dim", cfg.speech_dim);
    cfg.text_dim = j.value("text_dim", cfg.text_dim);
    cfg.hidden = j.value("hidden", cfg.hidden);
    cfg.attention_heads = j.value("attention_heads", cfg.attention_heads);
    cfg.num_classes = j.value("num_classes", cfg.num_classes);
    cfg.csl_dim = j.value("csl_dim", cfg.csl_dim);
    if (j.contains("modality_mode")) cfg.mode = modality_from_string(j.at("modality_mode").get<std::string>());
    cfg.encoder_stub = j.value("encoder_stub", cfg.encoder_stub);
    cfg.probe_heads = j.value("probe_heads", cfg.probe_heads);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return cfg;
}

CrabParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  CrabParams p;
  p.config = cfg;
  if (uses_speech(cfg.mode)) p.speech = make_modality(cfg.speech_dim, cfg, rng);
  if (uses_text(cfg.mode)) p.text = make_modality(cfg.text_dim, cfg, rng);
  if (cfg.mode == ModalityMode::Bimodal) {
    p.speech_to_text = make_cross_attention(2 * cfg.hidden, cfg.attention_heads, rng);
    p.text_to_speech = make_cross_attention(2 * cfg.hidden, cfg.attention_heads, rng);
  }
  p.classifier_norm = make_layer_norm(cfg.fused_dim());
  p.classifier_fc1 = make_linear(cfg.fused_dim(), cfg.hidden, rng);
  p.classifier_fc2 = make_linear(cfg.hidden, cfg.num_classes, rng);
  for (auto dim : cfg.leg_input_dims()) p.legs.push_back(make_csl(dim, dim, cfg.csl_dim, rng));
  if (cfg.probe_heads) {
    for (auto dim : cfg.leg_input_dims()) p.probes.push_back(make_linear(dim, cfg.num_classes, rng));
  }
  return p;
}

std::vector<NamedParam> named_parameters(const CrabParams& p) {
  std::vector<NamedParam> out;
  if (p.speech) push_modality(out, "speech", *p.speech);
  if (p.text) push_modality(out, "text", *p.text);
  if (p.speech_to_text) push_attention(out, "cross.speech_to_text", *p.speech_to_text);
  if (p.text_to_speech) push_attention(out, "cross.text_to_speech", *p.text_to_speech);
  push_norm(out, "classifier.norm", p.classifier_norm);
  push_linear(out, "classifier.fc1", p.classifier_fc1);
  push_linear(out, "classifier.fc2", p.classifier_fc2);
  for (std::size_t i = 0; i < p.legs.size(); ++i) {
    push_linear(out, "csl" + std::to_string(i) + ".fc1", p.legs[i].fc1);
    push_linear(out, "csl" + std::to_string(i) + ".fc2", p.legs[i].fc2);
  }
  for (std::size_t i = 0; i < p.probes.size(); ++i) push_linear(out, "probe" + std::to_string(i), p.probes[i]);
  return out;
}

ParameterGroups parameter_groups(const CrabParams& params) {
  ParameterGroups groups;
  for (auto& np : named_parameters(params)) {
    (np.group == ParamGroup::Encoder ? groups.encoder : groups.main).push_back(np);
  }
  return groups;
}

std::size_t count_parameters(const CrabParams& params) {
  std::size_t n = 0;
  for (const auto& np : named_parameters(params)) n += np.tensor.size();
  return n;
}

std::size_t expected_parameter_count(const ModelConfig& cfg) {
  const std::size_t h = cfg.hidden;
  const std::size_t e = cfg.num_classes;
  auto modality = [&](std::size_t d) {
    std::size_t n = cfg.encoder_stub ? d * d + d : 0;
    n += d * h + h;           // projection
    n += 2 * h;               // layer norm
    n += 12 * h * h + 6 * h;  // two GRU directions: 3h(h) + 3h(h) + 3h each
    n += 2 * h;               // pooling vector
    return n;
  };
  std::size_t total = 0;
  if (uses_speech(cfg.mode)) total += modality(cfg.speech_dim);
  if (uses_text(cfg.mode)) total += modality(cfg.text_dim);
  if (cfg.mode == ModalityMode::Bimodal) total += 2 * 4 * (2 * h) * (2 * h);
  const std::size_t df = cfg.fused_dim();
  total += 2 * df + df * h + h + h * e + e;
  for (auto n : cfg.leg_input_dims()) {
    total += n * n + n + n * cfg.csl_dim + cfg.csl_dim;
    if (cfg.probe_heads) total += n * e + e;
  }
  return total;
}

CrabOutput forward(const CrabParams& params, const Batch& batch, ForwardMode mode) {
  const auto& cfg = params.config;
  const bool train = mode == ForwardMode::Train;
  CrabOutput out;
  std::vector<Tensor> taps;

  std::optional<UnimodalResult> speech, text;
  if (params.speech) {
    speech = run_unimodal(*params.speech, batch.speech, batch.speech_mask, cfg.speech_dim, "speech");
    if (train) taps.push_back(masked_time_mean(speech->sequence, speech->mask));
  }
  if (params.text) {
    text = run_unimodal(*params.text, batch.text, batch.text_mask, cfg.text_dim, "text");
    if (train) taps.push_back(masked_time_mean(text->sequence, text->mask));
  }
  if (speech && text && speech->sequence.dim(0) != text->sequence.dim(0)) {
    throw DimensionError("speech and text batch sizes differ");
  }

  std::vector<Tensor> pooled;
  if (cfg.mode == ModalityMode::Bimodal) {
    auto speech_aligned =
        add(cross_attention(*params.speech_to_text, speech->sequence, text->sequence, text->mask), speech->sequence);
    auto text_aligned =
        add(cross_attention(*params.text_to_speech, text->sequence, speech->sequence, speech->mask), text->sequence);
    auto ps = attention_pool(params.speech->pool, speech_aligned, speech->mask);
    auto pt = attention_pool(params.text->pool, text_aligned, text->mask);
    pooled = {ps.pooled, pt.pooled};
    out.pooling_weights = {ps.weights, pt.weights};
  } else {
    const auto& mod = speech ? *params.speech : *params.text;
    const auto& res = speech ? *speech : *text;
    auto p = attention_pool(mod.pool, res.sequence, res.mask);
    pooled = {p.pooled};
    out.pooling_weights = {p.weights};
  }
  if (train) taps.insert(taps.end(), pooled.begin(), pooled.end());

  out.fused = pooled.size() == 1 ? pooled.front() : concat(pooled, -1);
  auto hidden = linear(params.classifier_fc1, layer_norm(params.classifier_norm, out.fused));
  if (train) taps.push_back(hidden);
  out.logits = linear(params.classifier_fc2, relu(hidden));

  if (train) {
    if (!params.legs.empty()) {
      if (params.legs.size() != taps.size()) throw ContractError("supervised leg count does not match the model");
      for (std::size_t i = 0; i < taps.size(); ++i) out.csl_embeddings.push_back(csl_forward(params.legs[i], taps[i]));
    }
    if (!params.probes.empty()) {
      for (std::size_t i = 0; i < taps.size(); ++i) out.probe_logits.push_back(linear(params.probes[i], taps[i]));
    }
  }
  return out;
}

void save_checkpoint(const CrabParams& params, const std::filesystem::path& dir, const nlohmann::json& metadata) {
  std::filesystem::create_directories(dir);
  std::ofstream bin(dir / "params.bin", std::ios::binary | std::ios::trunc);
  if (!bin) throw DataError("cannot write " + (dir / "params.bin").string());
  nlohmann::json index = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& np : named_parameters(params)) {
    const auto& shape = np.tensor.shape();
    Shape stored = shape.size() == 1 ? Shape{1, shape[0]} : shape;
    auto bytes = encode_shard(Tensor(stored, std::vector<Real>(np.tensor.data().begin(), np.tensor.data().end())));
    bin.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    index.push_back({{"name", np.name}, {"shape", shape}, {"group", to_string(np.group)}, {"offset", offset}});
    offset += bytes.size();
  }
  if (!bin) throw DataError("failed writing " + (dir / "params.bin").string());
  nlohmann::json doc = {{"format", "crab-checkpoint"},
                        {"version", 1},
                        {"model", to_json(params.config)},
                        {"metadata", metadata},
                        {"tensors", index}};
  std::ofstream js(dir / "params.json", std::ios::trunc);
  js << doc.dump(2) << '\n';
  if (!js) throw DataError("failed writing " + (dir / "params.json").string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, bool with_legs) {
  std::ifstream js(dir / "params.json");
  if (!js) throw DataError("cannot open " + (dir / "params.json").string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(js);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint index " + (dir / "params.json").string() + ": " + e.what());
  }
  if (doc.value("format", "") != "crab-checkpoint") throw DataError("not a checkpoint index: " + dir.string());

  std::ifstream bin(dir / "params.bin", std::ios::binary);
  if (!bin) throw DataError("cannot open " + (dir / "params.bin").string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  const auto cfg = model_config_from_json(doc.at("model"));
  LoadedCheckpoint loaded;
  loaded.params = init_params(cfg, 0);
  loaded.metadata = doc.value("metadata", nlohmann::json::object());

  std::map<std::string, const nlohmann::json*> entries;
  for (const auto& e : doc.at("tensors")) entries[e.at("name").get<std::string>()] = &e;

  // Legs and probes are training-only and may be absent.
  bool legs_present = true, probes_present = true;
  for (auto np : named_parameters(loaded.params)) {
    const bool is_leg = np.name.rfind("csl", 0) == 0;
    const bool is_probe = np.name.rfind("probe", 0) == 0;
    auto it = entries.find(np.name);
    if (it == entries.end()) {
      if (is_leg || is_probe) {
        (is_leg ? legs_present : probes_present) = false;
        continue;
      }
      throw DataError("checkpoint is missing tensor '" + np.name + "'");
    }
    if ((is_leg || is_probe) && !with_legs) continue;
    const auto offset = it->second->at("offset").get<std::size_t>();
    const auto shape = it->second->at("shape").get<Shape>();
    if (shape != np.tensor.shape()) {
      throw DimensionError("checkpoint tensor '" + np.name + "' has shape " + shape_str(shape) + ", model expects " +
                           shape_str(np.tensor.shape()));
    }
    if (offset > bytes.size()) throw FormatError("tensor '" + np.name + "' offset beyond params.bin");
    auto t = decode_shard(std::span<const std::uint8_t>(bytes).subspan(offset), nullptr, offset);
    if (t.size() != np.tensor.size()) throw FormatError("tensor '" + np.name + "' payload size mismatch");
    auto dst = np.tensor.data();
    std::copy(t.data().begin(), t.data().end(), dst.begin());
  }
  if (!with_legs || !legs_present) loaded.params.legs.clear();
  if (!with_legs || !probes_present) loaded.params.probes.clear();
  return loaded;
}

}  // namespace crab
