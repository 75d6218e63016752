// SPDX-License-Identifier: Apache-2.0
//
// Experiment runner commands behind the CLI: one function per subcommand.
// All outputs are deterministic functions of the configuration; stages of
// the combined experiment are content-addressed so interrupted runs resume
// without recomputing finished work.
#pragma once

#include <string>
#include <vector>

#include "uprl/config.hpp"

namespace uprl::cmd {

// IO-category failure (missing/corrupt inputs, unwritable outputs): exit 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void gen_data(const ExperimentConfig& cfg);
void sft(const ExperimentConfig& cfg);
void train_rm(const ExperimentConfig& cfg);
void rl(const ExperimentConfig& cfg);
// `checkpoints` lists rl checkpoint files for the OOD curve; empty means
// scan cfg.out_dir for rl_ckpt_*.ckpt.
void eval(const ExperimentConfig& cfg, std::vector<std::string> checkpoints);
void experiment(const ExperimentConfig& cfg);

// artifact locations under cfg.out_dir
std::string data_dir(const ExperimentConfig& cfg);
std::string sft_ckpt_path(const ExperimentConfig& cfg);
std::string rm_ckpt_path(const ExperimentConfig& cfg);
std::string policy_ckpt_path(const ExperimentConfig& cfg);

// loaded artifacts (shape-checked against the config); IoError on failure
PolicyModel load_policy(const ExperimentConfig& cfg, const std::string& path);
RewardEnsemble load_ensemble(const ExperimentConfig& cfg,
                             const std::string& path);

// trailing-window summary used for comparison.csv and the acceptance gate:
// final = mean of the last `window` values, max = max over trailing means.
struct CurveSummary {
  double final_value{0.0};
  double max_value{0.0};
};
CurveSummary summarize_curve(const std::vector<double>& values, int window = 10);

}  // namespace uprl::cmd
