#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "crab/errors.hpp"
#include "crab/harness.hpp"

namespace fs = std::filesystem;

namespace {

int gen_data(const std::string& spec_file, const std::string& preset, std::size_t classes, const std::string& out,
             std::optional<std::uint64_t> seed) {
  crab::SynthSpec spec;
  if (!spec_file.empty()) {
    std::ifstream in(spec_file);
    if (!in) throw crab::ConfigError("cannot open spec " + spec_file);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw crab::ConfigError("spec " + spec_file + " is not valid JSON: " + e.what());
    }
    spec = crab::synth_spec_from_json(j);
  } else {
    spec = crab::synth_preset(preset, classes);
  }
  if (seed) spec.seed = *seed;
  spec.validate();
  const auto m = crab::generate_synthetic(spec, out);
  std::cout << "wrote " << m.records.size() << " utterances to " << out << '\n';
  return 0;
}

int eval(const std::string& checkpoint, const std::string& manifest_path, const std::string& split,
         const std::string& out, std::size_t batch_size, bool without_legs) {
  auto loaded = crab::load_checkpoint(checkpoint, !without_legs);
  const auto manifest = crab::read_manifest(manifest_path);
  crab::LabelMap labels;
  if (loaded.metadata.contains("labels")) {
    labels = crab::LabelMap(loaded.metadata.at("labels").get<std::vector<std::string>>());
  } else {
    labels = crab::label_map_for(manifest);
  }
  if (labels.size() != loaded.params.config.num_classes) {
    throw crab::ConfigError("checkpoint has " + std::to_string(loaded.params.config.num_classes) +
                            " classes but the label map has " + std::to_string(labels.size()));
  }
  const auto data = crab::load_split(manifest, labels, split);
  if (!data.samples.empty() && (data.speech_dim() != loaded.params.config.speech_dim ||
                                data.text_dim() != loaded.params.config.text_dim)) {
    throw crab::ConfigError("feature dims of split '" + split + "' do not match the checkpoint");
  }
  const auto result = crab::evaluate(loaded.params, data, batch_size);
  crab::emit_report(result.report, result.confusion, labels.names(), out);
  std::cout << "split=" << split << " war=" << result.report.war << " uar=" << result.report.uar
            << " macro_f1=" << result.report.macro_f1 << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Crab bimodal emotion classifier"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic bimodal corpus");
  std::string spec_file, preset = "meld-like", gen_out;
  std::size_t classes = 4;
  std::optional<std::uint64_t> gen_seed;
  auto* spec_opt = gen->add_option("--spec", spec_file, "SynthSpec JSON file");
  gen->add_option("--preset", preset, "meld-like | iemocap-like | balanced")->excludes(spec_opt);
  gen->add_option("--classes", classes, "Class count for the balanced preset");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--seed", gen_seed, "Generator seed");

  auto* tr = app.add_subcommand("train", "Train from a run config");
  std::string train_config;
  tr->add_option("--config", train_config, "Run config JSON")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string checkpoint, manifest, split = "test", eval_out;
  std::size_t eval_batch = 64;
  bool without_legs = false;
  ev->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  ev->add_option("--manifest", manifest, "manifest.jsonl")->required();
  ev->add_option("--split", split, "train | dev | test");
  ev->add_option("--out", eval_out, "Report directory")->required();
  ev->add_option("--batch-size", eval_batch, "Evaluation batch size");
  ev->add_flag("--without-legs", without_legs, "Skip loading the training-only heads");

  auto* sw = app.add_subcommand("sweep-alpha", "Train once per alpha value");
  std::string sweep_config, alphas = "0.25:3.0:0.25";
  sw->add_option("--config", sweep_config, "Run config JSON")->required();
  sw->add_option("--alphas", alphas, "start:stop:step or a comma list");

  auto* ab = app.add_subcommand("ablate", "Compare training objectives");
  std::string ablate_config, variants = "CE,CE+MPCL,MLS+CE,MLCS,MLCS_SCL,MLCS_flat_lr";
  ab->add_option("--config", ablate_config, "Run config JSON")->required();
  ab->add_option("--variants", variants, "Comma-separated variant names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*gen) return gen_data(spec_file, preset, classes, gen_out, gen_seed);
    if (*tr) {
      const auto res = crab::train(crab::load_run_config(train_config));
      std::cout << "best epoch " << res.best_epoch << " dev uar " << res.best_dev_uar << '\n';
      for (const auto& [s, r] : res.eval) std::cout << s << ": war=" << r.war << " uar=" << r.uar << '\n';
      return 0;
    }
    if (*ev) return eval(checkpoint, manifest, split, eval_out, eval_batch, without_legs);
    if (*sw) {
      const auto cfg = crab::load_run_config(sweep_config);
      for (const auto& row : crab::sweep_alpha(cfg, crab::parse_alpha_list(alphas))) {
        std::cout << "alpha=" << row.label << " war=" << row.report.war << " uar=" << row.report.uar << '\n';
      }
      return 0;
    }
    if (*ab) {
      const auto cfg = crab::load_run_config(ablate_config);
      for (const auto& row : crab::ablate(cfg, crab::parse_variant_list(variants))) {
        std::cout << row.label << " war=" << row.report.war << " uar=" << row.report.uar << '\n';
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return crab::exit_code_for(e);
  }
  return 0;
}
