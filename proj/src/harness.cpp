#include "crab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include "crab/errors.hpp"

namespace crab {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.is_absolute() || base.empty()) return p;
  return base / p;
}

json report_json(const MetricReport& r) {
  return {{"war", r.war}, {"uar", r.uar}, {"macro_f1", r.macro_f1}};
}

json breakdown_json(const LossBreakdown& b) { return {{"wce", b.wce}, {"legs", b.legs}, {"total", b.total}}; }

std::size_t worker_count() {
  const char* env = std::getenv("CRAB_NUM_THREADS");
  if (!env || !*env) return 1;
  try {
    const long n = std::stol(env);
    return n > 0 ? static_cast<std::size_t>(n) : 1;
  } catch (const std::exception&) {
    throw ConfigError(std::string("CRAB_NUM_THREADS is not a positive integer: ") + env);
  }
}

// Snapshot/restore of parameter values, used to keep the best epoch in memory.
std::vector<std::vector<Real>> snapshot(const CrabParams& params) {
  std::vector<std::vector<Real>> out;
  for (const auto& np : named_parameters(params)) {
    const auto d = np.tensor.data();
    out.emplace_back(d.begin(), d.end());
  }
  return out;
}

CrabParams restore(const CrabParams& like, const std::vector<std::vector<Real>>& values) {
  CrabParams out = init_params(like.config, 0);
  auto dst = named_parameters(out);
  if (dst.size() != values.size()) throw ContractError("parameter snapshot does not match model layout");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto d = dst[i].tensor.data();
    std::copy(values[i].begin(), values[i].end(), d.begin());
  }
  return out;
}

std::string format_alpha(double a) {
  std::ostringstream ss;
  ss << std::setprecision(6) << a;
  return ss.str();
}

void write_summary(const std::filesystem::path& path, const std::string& first_column,
                   const std::vector<SummaryRow>& rows, bool with_objective) {
  std::ofstream out(path, std::ios::trunc);
  out << first_column;
  if (with_objective) out << ",objective";
  out << ",war,uar,macro_f1\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << (first_column == "alpha" ? format_alpha(r.alpha) : r.label);
    if (with_objective) out << ',' << to_string(r.objective);
    out << ',' << r.report.war << ',' << r.report.uar << ',' << r.report.macro_f1 << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::validate() const {
  if (!data.manifest && !data.synth) throw ConfigError("data: either manifest or synth is required");
  if (data.manifest && data.synth) throw ConfigError("data: manifest and synth are mutually exclusive");
  if (data.synth) data.synth->validate();
  if (output_dir.empty()) throw ConfigError("output_dir is required");
  if (optim.epochs == 0) throw ConfigError("optim.epochs must be > 0");
  if (optim.batch_size == 0) throw ConfigError("optim.batch_size must be > 0");
  if (optim.grad_accum == 0) throw ConfigError("optim.grad_accum must be > 0");
  if (!(optim.lr_main > 0.0) || !(optim.lr_encoder >= 0.0)) throw ConfigError("learning rates must be positive");
  if (!(optim.beta1 >= 0.0 && optim.beta1 < 1.0 && optim.beta2 >= 0.0 && optim.beta2 < 1.0)) {
    throw ConfigError("optim betas must lie in [0, 1)");
  }
  if (!(optim.eps > 0.0)) throw ConfigError("optim.eps must be > 0");
  if (!(optim.weight_decay >= 0.0)) throw ConfigError("optim.weight_decay must be >= 0");
  if (!(optim.eta_min >= 0.0) || optim.eta_min > optim.lr_main) throw ConfigError("optim.eta_min out of range");
  if (!(loss.alpha >= 0.0) || !std::isfinite(loss.alpha)) throw ConfigError("loss.alpha must be finite and >= 0");
  if (!(loss.contrastive.tau > 0.0)) throw ConfigError("loss.tau must be > 0");
  if (eval_batch_size == 0) throw ConfigError("eval_batch_size must be > 0");
  for (const auto& s : eval_splits) {
    if (s != "train" && s != "dev" && s != "test") throw ConfigError("unknown eval split '" + s + "'");
  }
  if (model.hidden == 0 || model.csl_dim == 0 || model.attention_heads == 0) {
    throw ConfigError("model.hidden, csl_dim and attention_heads must be > 0");
  }
  if (model.hidden * 2 % model.attention_heads != 0) throw ConfigError("attention_heads must divide 2*hidden");
}

nlohmann::json to_json(const OptimConfig& c) {
  return {{"lr_main", c.lr_main},       {"lr_encoder", c.lr_encoder}, {"beta1", c.beta1},
          {"beta2", c.beta2},           {"eps", c.eps},               {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},         {"batch_size", c.batch_size}, {"grad_accum", c.grad_accum},
          {"eta_min", c.eta_min}};
}

OptimConfig optim_config_from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"lr_main", "lr_encoder", "beta1", "beta2", "eps", "weight_decay", "epochs", "batch_size",
                  "grad_accum", "eta_min"},
                 "optim");
  OptimConfig c;
  try {
    c.lr_main = j.value("lr_main", c.lr_main);
    c.lr_encoder = j.value("lr_encoder", c.lr_encoder);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.grad_accum = j.value("grad_accum", c.grad_accum);
    c.eta_min = j.value("eta_min", c.eta_min);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("optim: ") + e.what());
  }
  return c;
}

nlohmann::json to_json(const RunConfig& c) {
  json data = json::object();
  if (c.data.manifest) data["manifest"] = c.data.manifest->string();
  if (c.data.synth) data["synth"] = to_json(*c.data.synth);
  json j = {{"model", to_json(c.model)},
            {"optim", to_json(c.optim)},
            {"loss",
             {{"objective", to_string(c.loss.objective)},
              {"alpha", c.loss.alpha},
              {"tau", c.loss.contrastive.tau},
              {"weighted_ce", c.weighted_ce}}},
            {"data", data},
            {"output_dir", c.output_dir.string()},
            {"eval_splits", c.eval_splits},
            {"eval_batch_size", c.eval_batch_size},
            {"seed", c.seed}};
  if (!c.label_map.empty()) j["label_map"] = c.label_map;
  return j;
}

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  reject_unknown(j, {"model", "optim", "loss", "data", "label_map", "output_dir", "eval_splits", "eval_batch_size", "seed"},
                 "run config");
  RunConfig c;
  try {
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("optim")) c.optim = optim_config_from_json(j.at("optim"));
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      reject_unknown(l, {"objective", "alpha", "tau", "weighted_ce"}, "loss");
      if (l.contains("objective")) c.loss.objective = objective_from_string(l.at("objective").get<std::string>());
      c.loss.alpha = l.value("alpha", c.loss.alpha);
      c.loss.contrastive.tau = l.value("tau", c.loss.contrastive.tau);
      c.weighted_ce = l.value("weighted_ce", c.weighted_ce);
    }
    if (!j.contains("data")) throw ConfigError("run config: 'data' is required");
    const auto& d = j.at("data");
    reject_unknown(d, {"manifest", "synth", "preset"}, "data");
    if (d.contains("manifest")) c.data.manifest = resolve(d.at("manifest").get<std::string>(), base_dir);
    if (d.contains("synth")) c.data.synth = synth_spec_from_json(d.at("synth"));
    if (d.contains("preset")) {
      if (c.data.synth) throw ConfigError("data: synth and preset are mutually exclusive");
      c.data.synth = synth_preset(d.at("preset").get<std::string>());
      c.data.synth->seed = j.value("seed", std::uint64_t{0});
    }
    if (j.contains("label_map")) c.label_map = j.at("label_map").get<std::vector<std::string>>();
    if (!j.contains("output_dir")) throw ConfigError("run config: 'output_dir' is required");
    c.output_dir = resolve(j.at("output_dir").get<std::string>(), base_dir);
    if (j.contains("eval_splits")) c.eval_splits = j.at("eval_splits").get<std::vector<std::string>>();
    c.eval_batch_size = j.value("eval_batch_size", c.eval_batch_size);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, std::filesystem::absolute(path).parent_path());
}

// ---------------------------------------------------------------------------
// Data

RunData prepare_data(const RunConfig& cfg) {
  RunData rd;
  if (cfg.data.synth) {
    rd.manifest = generate_synthetic(*cfg.data.synth, cfg.output_dir / "data");
  } else {
    rd.manifest = read_manifest(*cfg.data.manifest);
  }
  rd.labels = cfg.label_map.empty() ? label_map_for(rd.manifest) : LabelMap(cfg.label_map);
  rd.train = load_split(rd.manifest, rd.labels, "train");
  if (rd.train.samples.empty()) throw DataError("train split is empty");
  rd.dev = load_split(rd.manifest, rd.labels, "dev");
  for (const auto& s : cfg.eval_splits) {
    if (s == "train") rd.eval[s] = rd.train;
    else if (s == "dev") rd.eval[s] = rd.dev;
    else rd.eval[s] = load_split(rd.manifest, rd.labels, s);
  }
  return rd;
}

// ---------------------------------------------------------------------------
// Evaluation

int argmax_lowest(std::span<const Real> row) {
  int best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[static_cast<std::size_t>(best)]) best = static_cast<int>(j);
  }
  return best;
}

EvalResult evaluate(const CrabParams& params, const Dataset& data, std::size_t batch_size) {
  if (data.samples.empty()) throw DegenerateInputError("evaluation split is empty");
  const auto batches = make_batches(data, batch_size);
  const std::size_t classes = params.config.num_classes;
  std::vector<Tensor> logits(batches.size());
  auto run = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < batches.size(); i += stride) {
      logits[i] = forward(params, batches[i], ForwardMode::Inference).logits.detach();
    }
  };
  const std::size_t workers = std::min(worker_count(), batches.size());
  if (workers <= 1) {
    run(0, 1);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          run(w, workers);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  EvalResult r;
  std::vector<Real> all;
  all.reserve(data.samples.size() * classes);
  for (std::size_t i = 0; i < batches.size(); ++i) {
    const auto d = logits[i].data();
    all.insert(all.end(), d.begin(), d.end());
    r.labels.insert(r.labels.end(), batches[i].labels.begin(), batches[i].labels.end());
  }
  const std::size_t n = r.labels.size();
  for (std::size_t b = 0; b < n; ++b) {
    r.predictions.push_back(argmax_lowest(std::span<const Real>(all.data() + b * classes, classes)));
  }
  r.logits = Tensor({n, classes}, std::move(all));
  r.confusion = confusion(r.labels, r.predictions, classes);
  r.report = report(r.confusion);
  return r;
}

// ---------------------------------------------------------------------------
// Training

TrainResult train(const RunConfig& cfg_in, const RunData* preloaded) {
  const auto t_start = std::chrono::steady_clock::now();
  cfg_in.validate();
  RunConfig cfg = cfg_in;
  std::optional<RunData> owned;
  if (!preloaded) owned = prepare_data(cfg);
  const RunData& rd = preloaded ? *preloaded : *owned;

  // Fill data-dependent model fields.
  if (cfg.model.speech_dim == 0) cfg.model.speech_dim = rd.train.speech_dim();
  if (cfg.model.text_dim == 0) cfg.model.text_dim = rd.train.text_dim();
  if (cfg.model.num_classes == 0) cfg.model.num_classes = rd.labels.size();
  if (cfg.model.num_classes != rd.labels.size()) {
    throw ConfigError("model.num_classes " + std::to_string(cfg.model.num_classes) + " != " +
                      std::to_string(rd.labels.size()) + " labels in the data");
  }
  if (cfg.model.speech_dim != rd.train.speech_dim() || cfg.model.text_dim != rd.train.text_dim()) {
    throw ConfigError("model feature dims do not match the data");
  }
  if (cfg.loss.objective == Objective::MLS_CE) cfg.model.probe_heads = true;
  cfg.model.validate();

  LossConfig loss = cfg.loss;
  loss.contrastive.variant =
      loss.objective == Objective::MLCS_SCL ? ContrastiveVariant::SCL : ContrastiveVariant::MPCL;
  if (cfg.weighted_ce) {
    const auto counts = count_labels(rd.manifest, rd.labels, "train");
    loss.class_weights = class_weights_from_counts(counts);
  }

  std::filesystem::create_directories(cfg.output_dir);
  const json snapshot_cfg = to_json(cfg);

  CrabParams params = init_params(cfg.model, cfg.seed);
  const auto groups = parameter_groups(params);
  std::vector<ParamGroupSpec> specs;
  {
    ParamGroupSpec main{"main", {}, cfg.optim.lr_main};
    for (const auto& np : groups.main) main.params.push_back(np.tensor);
    specs.push_back(std::move(main));
    if (!groups.encoder.empty()) {
      ParamGroupSpec enc{"encoder", {}, cfg.optim.lr_encoder};
      for (const auto& np : groups.encoder) enc.params.push_back(np.tensor);
      specs.push_back(std::move(enc));
    }
  }
  AdamW opt(std::move(specs), cfg.optim);

  const std::size_t micro_per_epoch = (rd.train.samples.size() + cfg.optim.batch_size - 1) / cfg.optim.batch_size;
  const std::size_t steps_per_epoch = (micro_per_epoch + cfg.optim.grad_accum - 1) / cfg.optim.grad_accum;
  const std::size_t total_steps = steps_per_epoch * cfg.optim.epochs;

  // CE (and alpha = 0) never reads the legs, so they are skipped entirely.
  const bool needs_legs = cfg.loss.objective != Objective::CE && cfg.loss.alpha != 0.0;
  const ForwardMode train_mode = needs_legs ? ForwardMode::Train : ForwardMode::Inference;

  const auto log_path = cfg.output_dir / "run_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw DataError("cannot write " + log_path.string());

  TrainResult result;
  result.run_log = log_path;
  std::vector<std::vector<Real>> best_values;
  bool have_best = false;
  std::size_t step = 0;
  std::vector<double> lrs = opt.scheduled_lrs(0, total_steps);
  const json ckpt_meta = {{"labels", rd.labels.names()}, {"seed", cfg.seed}};

  for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const auto batches = make_batches(rd.train, cfg.optim.batch_size, cfg.seed, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t micro = 0;
    for (std::size_t i = 0; i < batches.size(); ++i) {
      const Batch& batch = batches[i];
      ObjectiveResult obj;
      try {
        Tape tape;
        const auto out = forward(params, batch, train_mode);
        const auto& legs = cfg.loss.objective == Objective::MLS_CE ? out.probe_logits : out.csl_embeddings;
        obj = combined_objective(out.logits, legs, batch.labels, loss);
        if (!std::isfinite(obj.breakdown.total)) throw NumericError("non-finite loss");
        tape.backward(obj.total);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + " step " + std::to_string(step) + " micro-batch " +
                           std::to_string(i) + ": " + e.what());
      }
      rec.train.wce += obj.breakdown.wce;
      rec.train.total += obj.breakdown.total;
      if (rec.train.legs.size() < obj.breakdown.legs.size()) rec.train.legs.resize(obj.breakdown.legs.size(), 0.0);
      for (std::size_t k = 0; k < obj.breakdown.legs.size(); ++k) rec.train.legs[k] += obj.breakdown.legs[k];
      ++micro;
      if (micro == cfg.optim.grad_accum || i + 1 == batches.size()) {
        lrs = opt.scheduled_lrs(step, total_steps);
        accumulate_and_step(opt, micro, lrs);
        ++step;
        micro = 0;
      }
    }
    const double n = static_cast<double>(batches.size());
    rec.train.wce /= n;
    rec.train.total /= n;
    for (auto& v : rec.train.legs) v /= n;
    rec.lrs = lrs;

    json line = {{"type", "epoch"},
                 {"epoch", epoch},
                 {"steps", step},
                 {"train", breakdown_json(rec.train)},
                 {"lr", {{"main", lrs[0]}, {"encoder", lrs.size() > 1 ? lrs[1] : cfg.optim.lr_encoder}}}};
    if (!rd.dev.samples.empty()) {
      rec.dev = evaluate(params, rd.dev, cfg.eval_batch_size).report;
      rec.has_dev = true;
      line["dev"] = report_json(rec.dev);
    } else {
      line["dev"] = nullptr;
    }
    // Best by dev UAR (strict improvement keeps the earliest); without a dev
    // split the last epoch wins.
    const bool better = !have_best || !rec.has_dev || rec.dev.uar > result.best_dev_uar;
    if (better) {
      have_best = true;
      result.best_epoch = epoch;
      result.best_dev_uar = rec.has_dev ? rec.dev.uar : 0.0;
      best_values = snapshot(params);
      json meta = ckpt_meta;
      meta["epoch"] = epoch;
      save_checkpoint(params, cfg.output_dir / "checkpoints" / "best", meta);
    }
    line["best_epoch"] = result.best_epoch;
    log << line.dump() << '\n';
    log.flush();
    result.epochs.push_back(std::move(rec));
  }
  {
    json meta = ckpt_meta;
    meta["epoch"] = cfg.optim.epochs - 1;
    save_checkpoint(params, cfg.output_dir / "checkpoints" / "last", meta);
  }

  result.best = restore(params, best_values);
  json evals = json::object();
  for (const auto& [split, data] : rd.eval) {
    if (data.samples.empty()) continue;
    const auto ev = evaluate(result.best, data, cfg.eval_batch_size);
    emit_report(ev.report, ev.confusion, rd.labels.names(), cfg.output_dir / "eval" / split);
    result.eval[split] = ev.report;
    evals[split] = to_json(ev.report, rd.labels.names());
  }
  json final_line = {{"type", "final"},
                     {"best_epoch", result.best_epoch},
                     {"best_dev_uar", result.best_dev_uar},
                     {"eval", evals},
                     {"config", snapshot_cfg}};
  log << final_line.dump() << '\n';
  if (!log) throw DataError("failed writing " + log_path.string());

  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  std::ofstream timing(cfg.output_dir / "timing.json", std::ios::trunc);
  timing << json{{"wall_clock_seconds", seconds}}.dump() << '\n';
  return result;
}

// ---------------------------------------------------------------------------
// Sweeps and ablations

std::vector<double> parse_alpha_list(const std::string& text) {
  std::vector<double> out;
  auto to_double = [&](const std::string& s) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw ConfigError("");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("bad alpha value '" + s + "' in '" + text + "'");
    }
  };
  if (text.find(':') != std::string::npos) {
    std::vector<std::string> parts;
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ':')) parts.push_back(part);
    if (parts.size() != 3) throw ConfigError("alpha range must be start:stop:step, got '" + text + "'");
    const double start = to_double(parts[0]);
    const double stop = to_double(parts[1]);
    const double step = to_double(parts[2]);
    if (!(step > 0.0) || stop < start) throw ConfigError("alpha range needs step > 0 and stop >= start");
    const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
    for (std::size_t i = 0; i < count; ++i) out.push_back(start + static_cast<double>(i) * step);
  } else {
    std::stringstream ss(text);
    std::string part;
    while (std::getline(ss, part, ',')) {
      if (!part.empty()) out.push_back(to_double(part));
    }
  }
  if (out.empty()) throw ConfigError("empty alpha list");
  for (double a : out) {
    if (a < 0.0) throw ConfigError("alpha must be >= 0");
  }
  return out;
}

std::vector<SummaryRow> sweep_alpha(const RunConfig& base, const std::vector<double>& alphas) {
  base.validate();
  if (base.eval_splits.empty()) throw ConfigError("sweep needs at least one eval split");
  const auto data = prepare_data(base);
  std::vector<SummaryRow> rows;
  for (double a : alphas) {
    RunConfig cfg = base;
    cfg.loss.alpha = a;
    cfg.output_dir = base.output_dir / ("alpha_" + format_alpha(a));
    cfg.data = DataSource{base.output_dir / "data" / "manifest.jsonl", std::nullopt};
    if (base.data.manifest) cfg.data.manifest = base.data.manifest;
    const auto res = train(cfg, &data);
    rows.push_back({format_alpha(a), a, cfg.loss.objective, res.eval.at(base.eval_splits.front())});
  }
  write_summary(base.output_dir / "alpha_sweep.csv", "alpha", rows, false);
  return rows;
}

RunConfig ablation_variant(const RunConfig& base, const std::string& variant) {
  RunConfig cfg = base;
  if (variant == "MLCS_flat_lr") {
    cfg.loss.objective = Objective::MLCS;
    cfg.optim.lr_encoder = cfg.optim.lr_main;
  } else {
    cfg.loss.objective = objective_from_string(variant);
  }
  return cfg;
}

std::vector<std::string> parse_variant_list(const std::string& text) {
  static const std::set<std::string> known = {"CE", "CE+MPCL", "MLS+CE", "MLCS", "MLCS_SCL", "MLCS_flat_lr"};
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    if (!known.count(part)) throw ConfigError("unknown ablation variant '" + part + "'");
    out.push_back(part);
  }
  if (out.empty()) throw ConfigError("empty variant list");
  return out;
}

std::vector<SummaryRow> ablate(const RunConfig& base, const std::vector<std::string>& variants) {
  base.validate();
  if (base.eval_splits.empty()) throw ConfigError("ablation needs at least one eval split");
  for (const auto& v : variants) (void)ablation_variant(base, v);  // fail fast on unknown names
  const auto data = prepare_data(base);
  std::vector<SummaryRow> rows;
  for (const auto& v : variants) {
    RunConfig cfg = ablation_variant(base, v);
    std::string dir = v;
    std::replace(dir.begin(), dir.end(), '+', '_');
    cfg.output_dir = base.output_dir / dir;
    if (base.data.synth) cfg.data = DataSource{base.output_dir / "data" / "manifest.jsonl", std::nullopt};
    const auto res = train(cfg, &data);
    rows.push_back({v, cfg.loss.alpha, cfg.loss.objective, res.eval.at(base.eval_splits.front())});
  }
  write_summary(base.output_dir / "ablation.csv", "variant", rows, true);
  return rows;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e) || dynamic_cast<const FormatError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace crab
