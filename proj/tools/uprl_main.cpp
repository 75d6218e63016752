// SPDX-License-Identifier: Apache-2.0
//
// uprl: train and evaluate an uncertainty-penalized RLHF pipeline on a
// synthetic prompt-echo task. Subcommands mirror the pipeline stages:
//   gen-data, sft, train-rm, rl, eval, experiment
// Every key=value config entry is also exposed as a --key flag; flags
// override the --config file, duplicates are rejected.
// Exit codes: 0 success, 1 usage, 2 IO, 3 numeric failure.
#include <CLI11.hpp>

#include <iostream>

#include "uprl/commands.hpp"

namespace {

struct Invocation {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;  // flag order
  std::vector<std::string> checkpoints;                        // eval only
};

void add_config_options(CLI::App* sub, Invocation& inv) {
  sub->add_option("--config", inv.config_path,
                  "key=value config file applied before flags");
  for (const auto& key : uprl::ExperimentConfig::keys()) {
    auto* opt = sub->add_option(
        "--" + key.name,
        [&inv, name = key.name](const std::vector<std::string>& vals) {
          inv.overrides.emplace_back(name, vals.front());
          return true;
        },
        key.doc + " [" + key.type + "]");
    opt->expected(1);
  }
}

uprl::ExperimentConfig resolve(const Invocation& inv) {
  uprl::ExperimentConfig cfg;
  if (!inv.config_path.empty()) cfg.load_file(inv.config_path);
  for (const auto& [key, value] : inv.overrides) cfg.set(key, value);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "uncertainty-penalized RLHF pipeline on a synthetic gold-reward task"};
  app.require_subcommand(1);
  app.footer(
      "Config keys (all usable as --key value flags):\n" + [] {
        std::string out;
        for (const auto& k : uprl::ExperimentConfig::keys())
          out += "  " + k.name + " (" + k.type + "): " + k.doc + "\n";
        return out;
      }());

  Invocation inv;

  auto* cmd_gen = app.add_subcommand("gen-data",
                                     "generate the SFT/preference/RL splits");
  auto* cmd_sft = app.add_subcommand("sft", "supervised fine-tuning (step 1)");
  auto* cmd_rm = app.add_subcommand("train-rm",
                                    "train the diverse reward LoRA ensemble "
                                    "(step 2)");
  auto* cmd_rl = app.add_subcommand("rl",
                                    "uncertainty-penalized RL fine-tuning "
                                    "(step 3)");
  auto* cmd_eval = app.add_subcommand("eval",
                                      "calibration, OOD curve and summary");
  auto* cmd_exp = app.add_subcommand("experiment",
                                     "full pipeline plus the beta2 ablation "
                                     "over the seed list");
  for (auto* sub : {cmd_gen, cmd_sft, cmd_rm, cmd_rl, cmd_eval, cmd_exp})
    add_config_options(sub, inv);
  cmd_eval->add_option("checkpoints", inv.checkpoints,
                       "rl checkpoint files for the OOD curve (default: scan "
                       "out_dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    app.exit(e);
    return 1;
  }

  try {
    const uprl::ExperimentConfig cfg = resolve(inv);
    if (cmd_gen->parsed()) uprl::cmd::gen_data(cfg);
    if (cmd_sft->parsed()) uprl::cmd::sft(cfg);
    if (cmd_rm->parsed()) uprl::cmd::train_rm(cfg);
    if (cmd_rl->parsed()) uprl::cmd::rl(cfg);
    if (cmd_eval->parsed()) uprl::cmd::eval(cfg, inv.checkpoints);
    if (cmd_exp->parsed()) uprl::cmd::experiment(cfg);
    return 0;
  } catch (const uprl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const uprl::cmd::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
