#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "muse/gradcheck_suite.hpp"
#include "muse/harness.hpp"

namespace muse {

namespace cli_detail {

inline const std::vector<std::string>& config_fields() {
  static const std::vector<std::string> fields{
      "task",   "variant",   "d",       "num_layers",   "heads",         "ffn_hidden", "mu",         "eta",
      "theta",  "alpha",     "beta",    "lr",           "crf_lr",        "batch_size", "epochs",     "dropout",
      "head_dropout", "noise_enabled", "seed", "train_size", "val_size", "test_size", "noise_pixels", "qlevels",
      "data_dir", "out_dir"};
  return fields;
}

inline bool is_string_field(const std::string& f) {
  return f == "task" || f == "variant" || f == "data_dir" || f == "out_dir";
}

inline std::string flag_name(std::string field) {
  for (char& c : field) {
    if (c == '_') c = '-';
  }
  return "--" + field;
}

/// Config file plus per-field flag overrides for one subcommand.
struct ConfigFlags {
  std::string config_path;
  std::map<std::string, std::string> raw;

  void attach(CLI::App& app) {
    app.add_option("--config", config_path, "JSON config file; flags override its values");
    for (const auto& f : config_fields()) {
      std::string names = flag_name(f);
      if (f == "out_dir") names += ",--out";
      if (f == "data_dir") names += ",--data";
      app.add_option(names, raw[f]);
    }
  }

  RunConfig resolve(const CLI::App& app) const {
    RunConfig cfg;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw ConfigError("config: cannot read " + config_path);
      try {
        cfg.merge_json(nlohmann::json::parse(in));
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    }
    nlohmann::json overrides = nlohmann::json::object();
    for (const auto& f : config_fields()) {
      if (app.count(flag_name(f)) == 0) continue;
      const std::string& v = raw.at(f);
      if (is_string_field(f)) {
        overrides[f] = v;
        continue;
      }
      auto parsed = nlohmann::json::parse(v, nullptr, false);
      if (parsed.is_discarded()) throw ConfigError(f + ": cannot parse '" + v + "'");
      overrides[f] = parsed;
    }
    cfg.merge_json(overrides);
    cfg.validate();
    return cfg;
  }
};

inline std::vector<double> parse_values(const std::string& list) {
  std::vector<double> values;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      std::size_t used = 0;
      values.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError("values: cannot parse '" + item + "'");
    }
  }
  if (values.empty()) throw ConfigError("values: empty list");
  return values;
}

inline void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw InputError("cannot write " + path);
  f << text;
}

inline const std::vector<SynthExample>& pick_split(const Dataset& ds, const std::string& split) {
  if (split == "train") return ds.train;
  if (split == "val") return ds.val;
  if (split == "test") return ds.test;
  throw ConfigError("split: expected train, val or test");
}

/// MNER files carry per-token "labels", MSA files a single "label".
inline Task detect_task(const std::string& data_dir) {
  const auto path = (std::filesystem::path(data_dir) / "train.jsonl").string();
  std::ifstream in(path);
  std::string line;
  if (!in || !std::getline(in, line)) throw InputError("cannot read " + path);
  const auto j = nlohmann::json::parse(line, nullptr, false);
  if (j.is_object() && j.contains("labels")) return Task::mner;
  if (j.is_object() && j.contains("label")) return Task::msa;
  throw InputError(path + ": first record has neither labels nor label");
}

}  // namespace cli_detail

/// Entry point shared by the executable and tests. Returns the process exit
/// code: 0 success, 1 invalid config or failed run, 2 usage error.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  using namespace cli_detail;
  CLI::App app{"MuSE text-vision fusion toolkit", "muse"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset as JSON lines");
  ConfigFlags gen_flags;
  gen_flags.attach(*gen);

  auto* train_cmd = app.add_subcommand("train", "Train one model and write checkpoint, log and metrics");
  ConfigFlags train_flags;
  train_flags.attach(*train_cmd);
  bool quiet = false;
  train_cmd->add_flag("--quiet", quiet, "Suppress per-epoch progress");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ckpt, split = "test", eval_data, eval_out;
  bool force = false;
  eval_cmd->add_option("--checkpoint", ckpt, "Checkpoint prefix (without .json)")->required();
  eval_cmd->add_option("--data", eval_data, "Dataset directory; regenerated from the checkpoint config if omitted");
  eval_cmd->add_option("--split", split, "train, val or test");
  eval_cmd->add_option("--out", eval_out, "Also write metrics JSON here");
  eval_cmd->add_flag("--force", force, "Load despite a config hash mismatch");

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient table");
  double step = 1e-3;
  grad_cmd->add_option("--step", step, "Central-difference step");

  auto* sweep_cmd = app.add_subcommand("sweep", "Train once per value of one hyper-parameter");
  ConfigFlags sweep_flags;
  sweep_flags.attach(*sweep_cmd);
  std::string sweep_param, sweep_values, sweep_csv_path;
  sweep_cmd->add_option("--param", sweep_param, "theta, mu, eta, alpha, beta, lr, ...")->required();
  sweep_cmd->add_option("--values", sweep_values, "Comma-separated values")->required();
  sweep_cmd->add_option("--csv", sweep_csv_path, "CSV path (default <out>/sweep_<param>.csv, else stdout)");

  auto* inspect_cmd = app.add_subcommand("inspect-exchange", "Dump the exchange trace of one sample as JSON");
  std::string inspect_ckpt, inspect_split = "test", inspect_data, inspect_out;
  std::size_t sample = 0;
  bool inspect_force = false;
  inspect_cmd->add_option("--checkpoint", inspect_ckpt, "Checkpoint prefix")->required();
  inspect_cmd->add_option("--sample", sample, "Example index within the split");
  inspect_cmd->add_option("--split", inspect_split, "train, val or test");
  inspect_cmd->add_option("--data", inspect_data, "Dataset directory");
  inspect_cmd->add_option("--out", inspect_out, "Write JSON here instead of stdout");
  inspect_cmd->add_flag("--force", inspect_force, "Load despite a config hash mismatch");

  auto* ablate_cmd = app.add_subcommand("ablate", "Train every model variant and write a comparison CSV");
  ConfigFlags ablate_flags;
  ablate_flags.attach(*ablate_cmd);
  std::string ablate_csv_path;
  ablate_cmd->add_option("--csv", ablate_csv_path, "CSV path (default <out>/ablation_<task>.csv, else stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return 2;
  }

  auto dataset_for = [](const RunConfig& cfg, const std::string& data_dir) {
    RunConfig c = cfg;
    if (!data_dir.empty()) {
      c.data_dir = data_dir;
      c.task = detect_task(data_dir);
    }
    return load_or_generate(c);
  };

  try {
    if (*gen) {
      RunConfig cfg = gen_flags.resolve(*gen);
      if (cfg.out_dir.empty()) throw ConfigError("out_dir: gen-data needs --out");
      const Dataset ds = generate_task(cfg.task_config());
      const std::filesystem::path dir(cfg.out_dir);
      std::filesystem::create_directories(dir);
      write_jsonl((dir / "train.jsonl").string(), ds.train, ds.task);
      write_jsonl((dir / "val.jsonl").string(), ds.val, ds.task);
      write_jsonl((dir / "test.jsonl").string(), ds.test, ds.task);
      out << "wrote " << ds.train.size() << '/' << ds.val.size() << '/' << ds.test.size() << ' '
          << to_string(ds.task) << " examples to " << dir.string() << '\n';
    } else if (*train_cmd) {
      RunConfig cfg = train_flags.resolve(*train_cmd);
      const Dataset ds = load_or_generate(cfg);
      TrainOptions opt;
      opt.verbose = !quiet;
      opt.log = &err;
      TrainResult r = train(cfg, ds, opt);
      nlohmann::json summary{{"best_epoch", r.best_epoch}, {"val", r.best_val.to_json()}, {"test", r.test.to_json()}};
      out << summary.dump(2) << '\n';
    } else if (*eval_cmd) {
      auto model = load_model(ckpt, force);
      RunConfig cfg = load_checkpoint(ckpt).config;
      const Dataset ds = dataset_for(cfg, eval_data);
      const Metrics m = evaluate(*model, pick_split(ds, split), ds.task);
      out << m.to_json().dump(2) << '\n';
      if (!eval_out.empty()) write_text(eval_out, m.to_json().dump(2) + "\n");
    } else if (*grad_cmd) {
      const GradcheckReport report = run_gradcheck_suite(step);
      out << report.table();
      out << "seconds: " << report.seconds << '\n';
      return report.all_passed() ? 0 : 1;
    } else if (*sweep_cmd) {
      RunConfig cfg = sweep_flags.resolve(*sweep_cmd);
      const auto values = parse_values(sweep_values);
      const Dataset ds = load_or_generate(cfg);
      const std::string csv = sweep_csv(run_sweep(cfg, sweep_param, values, ds));
      std::string path = sweep_csv_path;
      if (path.empty() && !cfg.out_dir.empty()) {
        path = (std::filesystem::path(cfg.out_dir) / ("sweep_" + sweep_param + ".csv")).string();
      }
      if (path.empty()) {
        out << csv;
      } else {
        write_text(path, csv);
        out << "wrote " << path << '\n';
      }
    } else if (*inspect_cmd) {
      auto model = load_model(inspect_ckpt, inspect_force);
      RunConfig cfg = load_checkpoint(inspect_ckpt).config;
      const Dataset ds = dataset_for(cfg, inspect_data);
      const auto& examples = pick_split(ds, inspect_split);
      if (sample >= examples.size()) {
        throw IndexError("sample: index " + std::to_string(sample) + " outside split of " +
                         std::to_string(examples.size()));
      }
      Tape tape;
      tape.set_grad_enabled(false);
      ForwardOptions fo;
      fo.compute_aux = false;
      const ForwardOutput f = model->forward(tape, examples[sample], fo);
      nlohmann::json j = f.trace.to_json();
      j["sample"] = sample;
      j["split"] = inspect_split;
      j["theta"] = cfg.theta;
      j["mu"] = cfg.mu;
      j["eta"] = cfg.eta;
      if (inspect_out.empty()) {
        out << j.dump(2) << '\n';
      } else {
        write_text(inspect_out, j.dump(2) + "\n");
        out << "wrote " << inspect_out << '\n';
      }
    } else if (*ablate_cmd) {
      RunConfig cfg = ablate_flags.resolve(*ablate_cmd);
      const Dataset ds = load_or_generate(cfg);
      const std::string csv = ablation_csv(run_ablation(cfg, ds));
      std::string path = ablate_csv_path;
      if (path.empty() && !cfg.out_dir.empty()) {
        path = (std::filesystem::path(cfg.out_dir) / ("ablation_" + to_string(cfg.task) + ".csv")).string();
      }
      if (path.empty()) {
        out << csv;
      } else {
        write_text(path, csv);
        out << "wrote " << path << '\n';
      }
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace muse
