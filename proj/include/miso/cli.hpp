#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "miso/analysis.hpp"
#include "miso/checkpoint.hpp"
#include "miso/datagen.hpp"
#include "miso/training.hpp"

namespace miso::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitRuntime = 3;

// Everything a training run needs; parsed from JSON, then overridden by flags.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string data;
  std::string out;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                           const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw ConfigError("unknown field '" + key + "' in " + where);
  }
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig t) {
  reject_unknown(j,
                 {"mode", "include_full", "learning_rate", "batch_size", "epochs", "seed",
                  "chunk_probabilities", "warmup_ratio", "init_stddev", "max_steps"},
                 "train config");
  if (j.contains("mode")) t.mode = train_mode_from_string(j["mode"].get<std::string>());
  t.include_full = j.value("include_full", t.include_full);
  t.learning_rate = j.value("learning_rate", t.learning_rate);
  t.batch_size = j.value("batch_size", t.batch_size);
  t.epochs = j.value("epochs", t.epochs);
  t.seed = j.value("seed", t.seed);
  t.warmup_ratio = j.value("warmup_ratio", t.warmup_ratio);
  t.init_stddev = j.value("init_stddev", t.init_stddev);
  if (j.contains("max_steps")) t.max_steps = j["max_steps"].get<std::size_t>();
  if (j.contains("chunk_probabilities")) {
    const auto probs = j["chunk_probabilities"].get<std::vector<double>>();
    if (probs.size() != 4) throw ConfigError("chunk_probabilities needs 4 entries");
    std::copy(probs.begin(), probs.end(), t.chunk_probabilities.probabilities.begin());
  }
  return t;
}

}  // namespace detail

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, {"model", "train", "data", "out"}, "run config");
  RunConfig rc;
  try {
    if (j.contains("model")) rc.model = j["model"].get<ModelConfig>();
    if (j.contains("train")) rc.train = detail::train_config_from_json(j["train"], rc.train);
    rc.data = j.value("data", rc.data);
    rc.out = j.value("out", rc.out);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed run config: ") + e.what());
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

inline void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") out << text;
  else write_text_file(path, text);
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"MISO multi-input attention toolkit"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-constraint JSONL dataset");
  std::size_t count = 1000, min_c = 1, max_c = 4;
  std::uint64_t gen_seed = 0;
  std::string gen_out, split = "train";
  gen->add_option("--count", count, "Number of instances")->required();
  gen->add_option("--min-constraints", min_c, "Minimum constraints per instance");
  gen->add_option("--max-constraints", max_c, "Maximum constraints per instance");
  gen->add_option("--seed", gen_seed, "Generator seed");
  gen->add_option("--split", split, "Seed partition (train or eval)")
      ->check(CLI::IsMember({"train", "eval"}));
  gen->add_option("--out", gen_out, "Output JSONL path")->required();

  // train
  auto* tr = app.add_subcommand("train", "Fine-tune the toy model in one of the training modes");
  std::string cfg_path, mode_flag, data_flag, out_flag;
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::size_t> epochs_flag, batch_flag, steps_flag;
  std::optional<double> lr_flag;
  bool no_full = false;
  tr->add_option("--config", cfg_path, "JSON run config");
  tr->add_option("--mode", mode_flag, "sft | miso-para | miso-succ | miso-fid-para | no-miso");
  tr->add_option("--seed", seed_flag, "Run seed (data order, init, chunk sampling)");
  tr->add_option("--data", data_flag, "Training JSONL");
  tr->add_option("--out", out_flag, "Output directory");
  tr->add_option("--epochs", epochs_flag);
  tr->add_option("--batch-size", batch_flag);
  tr->add_option("--lr", lr_flag);
  tr->add_option("--max-steps", steps_flag);
  tr->add_flag("--no-full", no_full, "Drop the full-instruction segment (para modes)");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint with standard inference");
  std::string ckpt, eval_data, eval_out;
  std::size_t eval_max_new = 16;
  ev->add_option("--ckpt", ckpt)->required();
  ev->add_option("--data", eval_data)->required();
  ev->add_option("--out", eval_out, "Report path (stdout when omitted)");
  ev->add_option("--max-new", eval_max_new);

  // analyze
  auto* an = app.add_subcommand("analyze", "Attention-dilution and complexity measurements");
  an->require_subcommand(1);
  auto* dil = an->add_subcommand("dilution", "Sweep the number of inputs and measure A_out");
  std::vector<std::size_t> n_values{1, 2, 4, 8, 16, 32, 64};
  std::string score_model = "identical", dil_out;
  double a_share = 0.5, sigma = 1.0;
  std::size_t trials = 1;
  std::uint64_t dil_seed = 0;
  dil->add_option("--n", n_values, "Input counts")->delimiter(',');
  dil->add_option("--score-model", score_model)->check(CLI::IsMember({"identical", "gaussian"}));
  dil->add_option("--a", a_share, "Per-pair output share for the identical model");
  dil->add_option("--sigma", sigma, "Score std-dev for the gaussian model");
  dil->add_option("--trials", trials);
  dil->add_option("--seed", dil_seed);
  dil->add_option("--out", dil_out, "CSV path (stdout when omitted)");
  auto* fl = an->add_subcommand("flops", "Attention multiply-accumulate counts, full vs chunked");
  std::size_t n_i = 1024, n_o = 128, d_model = 64;
  std::vector<std::size_t> ks{1, 2, 3, 4, 5, 6, 7, 8};
  std::string fl_out;
  fl->add_option("--ni", n_i);
  fl->add_option("--no", n_o);
  fl->add_option("--k", ks)->delimiter(',');
  fl->add_option("--d", d_model);
  fl->add_option("--out", fl_out, "CSV path (stdout when omitted)");

  // generate
  auto* ge = app.add_subcommand("generate", "Greedy single-sequence generation from a checkpoint");
  std::string gen_ckpt, prompt_file;
  std::size_t max_new = 16;
  ge->add_option("--ckpt", gen_ckpt)->required();
  ge->add_option("--prompt-file", prompt_file)->required();
  ge->add_option("--max-new", max_new);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) {
      if (min_c > max_c || max_c > kMaxConstraints)
        throw ArgumentError("constraint range must satisfy min <= max <= " +
                            std::to_string(kMaxConstraints));
      write_jsonl(gen_out, gen_dataset(count, min_c, max_c, gen_seed, split));
      return kExitOk;
    }
    if (*tr) {
      RunConfig rc = cfg_path.empty() ? RunConfig{} : load_run_config(cfg_path);
      if (!mode_flag.empty()) rc.train.mode = train_mode_from_string(mode_flag);
      if (seed_flag) rc.train.seed = *seed_flag;
      if (!data_flag.empty()) rc.data = data_flag;
      if (!out_flag.empty()) rc.out = out_flag;
      if (epochs_flag) rc.train.epochs = *epochs_flag;
      if (batch_flag) rc.train.batch_size = *batch_flag;
      if (lr_flag) rc.train.learning_rate = *lr_flag;
      if (steps_flag) rc.train.max_steps = *steps_flag;
      if (no_full) rc.train.include_full = false;
      if (rc.data.empty()) throw ArgumentError("train needs --data (or 'data' in the config)");
      if (rc.out.empty()) throw ArgumentError("train needs --out (or 'out' in the config)");
      rc.model.validate();
      rc.train.validate();
      const auto dataset = read_jsonl(rc.data);
      const TrainResult res = train(rc.train, rc.model, dataset);
      std::filesystem::create_directories(rc.out);
      const std::filesystem::path dir(rc.out);
      save_checkpoint(res.params, res.model_config, dir / "model.ckpt");
      write_loss_csv(dir / "loss.csv", rc.train.mode, res.curve);
      out << "trained " << to_string(rc.train.mode) << " on " << res.example_count
          << " examples for " << res.curve.size() << " steps; final loss "
          << (res.curve.empty() ? 0.0 : res.curve.back().loss) << "\n";
      return kExitOk;
    }
    if (*ev) {
      const auto [params, config] = load_checkpoint(ckpt);
      const auto data = read_jsonl(eval_data);
      const EvalReport rep = evaluate(config, params, data, eval_max_new);
      write_text(eval_out, to_json_value(rep).dump(2) + "\n", out);
      return kExitOk;
    }
    if (*dil) {
      ScoreModel model = score_model == "identical" ? ScoreModel{IdenticalScores{a_share}}
                                                    : ScoreModel{GaussianScores{sigma}};
      const auto recs = dilution_sweep(n_values, model, trials, dil_seed);
      write_text(dil_out, to_csv(std::span<const DilutionRecord>(recs)), out);
      return kExitOk;
    }
    if (*fl) {
      std::vector<FlopReport> reps;
      for (std::size_t k : ks) reps.push_back(flop_count(n_i, n_o, k, d_model));
      write_text(fl_out, to_csv(std::span<const FlopReport>(reps)), out);
      return kExitOk;
    }
    if (*ge) {
      if (max_new < 1) throw ArgumentError("--max-new must be >= 1");
      std::ifstream in(prompt_file);
      if (!in) throw IoError("cannot open prompt file: " + prompt_file);
      std::stringstream ss;
      ss << in.rdbuf();
      const auto [params, config] = load_checkpoint(gen_ckpt);
      out << respond(config, params, ss.str(), max_new) << "\n";
      return kExitOk;
    }
  } catch (const ArgumentError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace miso::cli
