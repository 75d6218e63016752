// SPDX-License-Identifier: Apache-2.0
//
// Synthetic task with a programmatic gold reward: responses earn credit for
// echoing prompt tokens (each prompt occurrence creditable once) and lose it
// for running long or stuttering. Generates the SFT / preference / RL-prompt
// splits with disjoint prompt pools.
#pragma once

#include <span>
#include <string>
#include <vector>

#include "uprl/rng.hpp"

namespace uprl {

struct TaskSpec {
  int content_vocab{16};
  int prompt_len{5};
  int response_cap{12};
  double match_bonus{2.0};
  double len_penalty{0.5};  // per token beyond len_threshold
  int len_threshold{8};
  double repeat_penalty{1.5};  // per immediate repetition

  int bos_id() const { return content_vocab; }
  int eos_id() const { return content_vocab + 1; }
  int model_vocab() const { return content_vocab + 2; }
};

// Scoring stops at the first EOS; the EOS itself is not scored, and tokens
// after it are ignored. Response must contain EOS.
double gold_reward(const TaskSpec& spec, std::span<const int> prompt,
                   std::span<const int> response);

// Emits a shuffled subset of the prompt tokens (length 4..6 for the default
// prompt length) then EOS; each position is replaced by a uniform random
// content token with probability `noise`.
std::vector<int> scripted_reference_policy(const TaskSpec& spec,
                                           std::span<const int> prompt,
                                           double noise, Rng rng);

struct SftPair {
  std::vector<int> prompt;
  std::vector<int> response;  // ends with EOS
};

struct PreferenceTriple {
  std::vector<int> prompt;
  std::vector<int> winner;  // ends with EOS
  std::vector<int> loser;   // ends with EOS; gold(winner) > gold(loser)
};

struct DatasetBundle {
  std::vector<SftPair> sft_set;
  std::vector<PreferenceTriple> pref_train;
  std::vector<PreferenceTriple> pref_test;
  std::vector<std::vector<int>> rl_prompts;
};

// 20% of the prompt budget becomes SFT pairs (scripted policy, noise
// `sft_noise`), 40% preference triples (two scripted samples at
// `pref_noise`, gold-labeled, ties resampled up to 10 times then skipped,
// 90/10 train/test split), 40% RL prompts. Prompt pools are disjoint.
DatasetBundle build_bundle(const TaskSpec& spec, int prompt_budget,
                           std::uint64_t seed, double sft_noise = 0.1,
                           double pref_noise = 0.35);

// Line-delimited persistence: "x:<ids>\ty:<ids>" for SFT pairs,
// "x:<ids>\tw:<ids>\tl:<ids>" for preference triples, "x:<ids>" for prompts.
void save_bundle(const std::string& dir, const DatasetBundle& bundle);
DatasetBundle load_bundle(const std::string& dir);

}  // namespace uprl
