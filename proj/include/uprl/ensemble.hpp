// SPDX-License-Identifier: Apache-2.0
//
// Diverse reward LoRA ensemble: one shared frozen backbone, N members each
// owning a LoRA unit per adapted matrix plus a scalar value head. Member
// forwards run end-to-end independently; the mean and the population
// standard deviation of the member scores give the proxy reward and its
// uncertainty.
#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uprl/linalg.hpp"
#include "uprl/model.hpp"

namespace uprl {

double population_std(std::span<const double> values);

class RewardEnsemble {
 public:
  // Copies (and freezes) the given backbone; members get fresh LoRA units
  // (A Gaussian with a per-member derived seed, B zero) and zero heads, so
  // every member starts identical and the ensemble uncertainty starts at 0.
  RewardEnsemble(const Backbone& sft_backbone, int n_members, int lora_rank,
                 Rng rng, double a_stddev = 0.02);

  int members() const { return static_cast<int>(heads_.size()); }
  int adapted_count() const { return static_cast<int>(targets_.size()); }
  const std::vector<std::string>& targets() const { return targets_; }
  int lora_rank() const { return rank_; }

  // Full forward with member n's adapters, read through member n's head.
  Tensor member_reward_t(int n, std::span<const int> prompt,
                         std::span<const int> response) const;
  double member_reward(int n, std::span<const int> prompt,
                       std::span<const int> response) const;
  std::vector<double> member_rewards(std::span<const int> prompt,
                                     std::span<const int> response) const;

  Tensor mean_reward_t(std::span<const int> prompt,
                       std::span<const int> response) const;
  double mean_reward(std::span<const int> prompt,
                     std::span<const int> response) const;

  // Population standard deviation (divisor N) of the member rewards.
  double uncertainty(std::span<const int> prompt,
                     std::span<const int> response) const;
  std::pair<double, double> mean_and_uncertainty(
      std::span<const int> prompt, std::span<const int> response) const;

  // Vertical stack of the N members' A matrices for one target, [N*r, d_in].
  linalg::Mat concat_a(const std::string& target) const;

  struct DiversityTerm {
    double value{0.0};
    // raw nnm_ratio gradients per target, w.r.t. the concatenated matrix
    std::vector<std::pair<std::string, linalg::Mat>> concat_grads;
  };
  // value = (1/M) sum over adapted matrices of ||concat A||_* / ||.||_F.
  DiversityTerm diversity_term() const;
  // Adds coeff * d(value)/dA_n into each member's A gradient buffer.
  void add_diversity_grads(const DiversityTerm& dt, double coeff);

  LoraUnit& unit(int member, int target_index);
  const LoraUnit& unit(int member, int target_index) const;
  Tensor head(int member) { return heads_[static_cast<std::size_t>(member)]; }
  const Backbone& backbone() const { return backbone_; }
  Backbone& backbone_mut() { return backbone_; }

  std::vector<Tensor> trainable_parameters();
  NamedTensors named_parameters();  // backbone/... then member{n}/...
  std::size_t trainable_count() const;
  std::size_t total_count() const;

  void swap_members(int i, int j);  // test hook: relabels two members

 private:
  void check_member(int n) const;
  LoraMap lora_map(int n) const;

  Backbone backbone_;
  std::vector<std::string> targets_;
  int rank_{0};
  std::vector<std::vector<LoraUnit>> units_;  // [member][target]
  std::vector<Tensor> heads_;                 // [member], each [d,1]
};

}  // namespace uprl
