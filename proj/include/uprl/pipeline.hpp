// SPDX-License-Identifier: Apache-2.0
//
// Steps 1-2: supervised fine-tuning of the policy, and joint training of the
// reward LoRA ensemble with the Bradley-Terry rank loss minus the weighted
// nuclear-norm diversity term (the NNM gradient enters outside the tape).
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uprl/ensemble.hpp"
#include "uprl/model.hpp"
#include "uprl/synthdata.hpp"

namespace uprl {

struct SftConfig {
  int epochs{10};
  int batch{32};
  double lr{3e-3};
  std::uint64_t seed{0};
};

struct SftResult {
  std::vector<double> epoch_loss;  // mean per-token NLL per epoch
};

// Minimizes mean per-token NLL of the response given the prompt. Zero epochs
// return the model untouched. Throws std::runtime_error when the loss stops
// being finite.
SftResult sft_train(PolicyModel& model, const std::vector<SftPair>& data,
                    const SftConfig& cfg);

// Mean over the batch of -log sigma(mean_reward(w) - mean_reward(l)); always
// >= 0, and exactly log 2 when every reward is constant.
Tensor rank_loss_t(const RewardEnsemble& e,
                   std::span<const PreferenceTriple> batch);
double rank_loss(const RewardEnsemble& e,
                 std::span<const PreferenceTriple> batch);

struct RmTrainConfig {
  int epochs{5};
  int batch{32};
  double lr{1e-2};
  double lambda{0.1};  // NNM diversity weight
  int members{5};
  int lora_rank{4};
  double lora_a_std{0.2};
  std::uint64_t seed{0};
};

struct RmEpochRow {
  int epoch{0};
  double rank_loss{0.0};
  double diversity{0.0};
  double holdout_acc{0.0};
  double holdout_ece{0.0};
};

struct RmTrainResult {
  std::vector<RmEpochRow> trace;
};

// Fresh ensemble on the SFT backbone: frozen W0, Gaussian A (per-member
// derived seeds), zero B, zero heads.
RewardEnsemble make_reward_ensemble(const PolicyModel& sft,
                                    const RmTrainConfig& cfg);

// Joint training of all members: minimizes rank_loss - lambda * diversity.
// Only LoRA A/B and the heads update; the backbone stays frozen.
RmTrainResult rm_train(RewardEnsemble& e,
                       std::span<const PreferenceTriple> train,
                       std::span<const PreferenceTriple> holdout,
                       const RmTrainConfig& cfg);

}  // namespace uprl
