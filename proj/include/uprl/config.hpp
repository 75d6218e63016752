// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value experiment configuration. Every tunable default lives here;
// unknown keys are rejected and parse -> serialize -> parse is idempotent.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "uprl/model.hpp"
#include "uprl/pipeline.hpp"
#include "uprl/rl.hpp"
#include "uprl/synthdata.hpp"

namespace uprl {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ExperimentConfig {
  // run
  std::string out_dir{"runs/exp"};
  std::uint64_t seed{0};          // master seed: data, sft and rm stages
  std::string seeds{"1,2,3,4"};   // rl seeds for the experiment protocol
  // task
  int content_vocab{16};
  int prompt_len{5};
  int response_cap{12};
  double gold_match_bonus{2.0};
  double gold_len_penalty{0.5};
  int gold_len_threshold{8};
  double gold_repeat_penalty{1.5};
  int prompt_budget{2000};
  double sft_noise{0.1};
  double pref_noise{0.35};
  // model
  int embed_dim{32};
  int n_heads{2};
  int ffn_dim{64};
  int n_layers{1};
  int max_seq_len{20};
  // sft
  int sft_epochs{10};
  int sft_batch{32};
  double sft_lr{3e-3};
  // reward model
  int rm_epochs{5};
  int rm_batch{32};
  double rm_lr{1e-2};
  double lambda{0.1};
  int members{5};
  int lora_rank{4};
  double lora_a_std{0.2};
  // rl
  int rl_steps{300};
  int rl_batch{16};
  int samples_per_prompt{1};
  double temperature{1.0};
  double rl_lr{1e-3};
  double beta1{0.1};
  double beta2{1.0};
  double baseline_decay{0.95};
  bool clip_enabled{false};
  double clip_epsilon{0.2};
  int checkpoint_every{10};
  // eval
  int eval_prompts{100};
  int eval_samples{2};

  struct KeyInfo {
    std::string name;
    std::string type;  // "int" | "float" | "string" | "u64" | "bool"
    std::string doc;
  };
  static const std::vector<KeyInfo>& keys();

  // Throws ConfigError on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  // key=value lines; '#' comments and blank lines allowed.
  void load_file(const std::string& path);    // ConfigError / IO runtime_error
  void apply_line(const std::string& line);
  std::string serialize() const;

  // derived views
  TaskSpec task() const;
  BackboneConfig backbone() const;
  SftConfig sft() const;
  RmTrainConfig rm() const;
  RlConfig rl() const;
  std::vector<std::uint64_t> seed_list() const;  // parsed from `seeds`

  void validate() const;  // cross-field invariants; throws ConfigError
};

}  // namespace uprl
