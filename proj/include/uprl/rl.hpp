// SPDX-License-Identifier: Apache-2.0
//
// Step 3: REINFORCE-style fine-tuning on uncertainty-penalized rewards
// r - beta2*(u - u_bar) with an EMA baseline, plus the separated squared
// log-ratio KL objective optimized directly by gradient descent. An optional
// single-epoch clipped-ratio variant approximates a trust region. The reward
// ensemble is read-only throughout; gold rewards are logged, never trained on.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "uprl/ensemble.hpp"
#include "uprl/model.hpp"
#include "uprl/synthdata.hpp"

namespace uprl {

struct RlConfig {
  int steps{300};
  int prompts_per_batch{16};
  int samples_per_prompt{1};
  double temperature{1.0};
  double lr{1e-3};
  double beta1{0.1};   // KL weight; squared log-ratio estimator
  double beta2{1.0};   // uncertainty weight; 0 reproduces plain RLHF
  double baseline_decay{0.95};
  bool clip_enabled{false};
  double clip_epsilon{0.2};
  int response_cap{12};
  std::uint64_t seed{0};

  void validate() const;  // throws std::invalid_argument
};

struct RolloutSample {
  std::vector<int> prompt;
  std::vector<int> response;         // ends with EOS
  std::vector<double> policy_logps;  // per token, under pi_theta at sampling
  std::vector<double> sft_logps;     // per token, under frozen pi_SFT
  double proxy_reward{0.0};          // ensemble mean
  double uncertainty{0.0};           // ensemble std
  double gold{0.0};                  // evaluation only
  bool truncated{false};
};

struct RolloutBatch {
  std::vector<RolloutSample> samples;
};

// Running mean over every uncertainty seen so far (exact sum / count).
class UncertaintyTracker {
 public:
  void update(std::span<const double> values);
  double mean() const { return count_ == 0 ? 0.0 : sum_ / static_cast<double>(count_); }
  std::int64_t count() const { return count_; }

 private:
  double sum_{0.0};
  std::int64_t count_{0};
};

// r - beta2 * (u - u_bar).
double penalized_reward(double r, double u, double u_bar, double beta2);

// beta1 * mean_i (sum_t log pi(y_t) - sum_t log sft(y_t))^2, differentiable
// through the live policy log-probs only. Always >= 0.
Tensor kl_objective(const PolicyModel& pi, const RolloutBatch& batch,
                    double beta1);

struct StepMetrics {
  double proxy_mean{0.0};
  double gold_mean{0.0};
  double u_mean{0.0};
  double u_running_mean{0.0};
  double kl_objective_value{0.0};
  double kl_measured{0.0};  // exact per-position categorical KL on the batch
};

// Samples one batch from the current policy; per-sample log-probs under both
// policies, ensemble reward/uncertainty, gold score.
RolloutBatch sample_rollouts(const PolicyModel& pi, const PolicyModel& sft,
                             const RewardEnsemble& e, const TaskSpec& task,
                             std::span<const std::vector<int>> prompt_pool,
                             const RlConfig& cfg, Rng rng);

// Owns optimizer state, the uncertainty tracker and the EMA baseline. The
// tracker absorbs each batch before its penalties are computed, so the first
// batch is centered on its own mean.
class RlTrainer {
 public:
  RlTrainer(PolicyModel& policy, const PolicyModel& sft_ref,
            const RlConfig& cfg);
  StepMetrics update(const RolloutBatch& batch);
  const UncertaintyTracker& tracker() const { return tracker_; }
  double baseline() const { return ema_; }

 private:
  PolicyModel& policy_;
  const PolicyModel& sft_ref_;
  RlConfig cfg_;
  Adam opt_;
  UncertaintyTracker tracker_;
  double ema_{0.0};
  bool ema_ready_{false};
};

struct RlTraceRow {
  int step{0};
  double proxy_reward{0.0};
  double gold_reward{0.0};
  double kl_measured{0.0};
  double u_mean{0.0};
  double u_running_mean{0.0};
  double kl_objective_value{0.0};
};

struct RlTrainResult {
  std::vector<RlTraceRow> trace;
};

// Called with (step, policy) at step 0 (the untouched copy of pi_SFT) and
// after every update; gives the caller checkpointing without coupling.
using RlCheckpointHook = std::function<void(int, const PolicyModel&)>;

// Runs cfg.steps updates starting from a copy of sft. The ensemble and sft
// are never mutated.
PolicyModel rl_train(const PolicyModel& sft, const RewardEnsemble& e,
                     std::span<const std::vector<int>> rl_prompts,
                     const TaskSpec& task, const RlConfig& cfg,
                     RlTrainResult* result = nullptr,
                     const RlCheckpointHook& hook = nullptr);

}  // namespace uprl
