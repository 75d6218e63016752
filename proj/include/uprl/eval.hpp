// SPDX-License-Identifier: Apache-2.0
//
// Reward-model calibration (confidence-binned ECE), exact per-position KL
// measurement between policies, OOD-uncertainty curves, and the closed-form
// KL-regularized optimal policy used as a training oracle.
#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "uprl/ensemble.hpp"
#include "uprl/model.hpp"
#include "uprl/synthdata.hpp"

namespace uprl {

struct ScoredPair {
  double delta{0.0};    // r(y_w|x) - r(y_l|x)
  double correct{0.0};  // 1 if delta > 0, 0.5 on ties, else 0
};

struct BinStat {
  int count{0};
  double acc{0.0};
  double conf{0.0};
};

struct CalibrationReport {
  double scale{1.0};  // s with sigma(s * max|delta|) = 0.99
  std::vector<BinStat> bins;
  double ece{0.0};
  double accuracy{0.0};
};

// Bradley-Terry preference probability sigma(delta).
double preference_prob(double delta);

// s = log(99) / max|delta|; throws std::domain_error when all deltas are 0.
double calibration_scale(std::span<const double> deltas);

// Confidence sigma(s|delta|) in [0.5, 1), binned into `bins` equal-width
// intervals over [0.5, 1.0]; empty bins contribute nothing to the ECE.
// An all-zero delta set degenerates to conf = 0.5 with scale 1.
CalibrationReport ece_report(std::span<const ScoredPair> pairs, int bins = 15);

std::vector<ScoredPair> score_pairs(const RewardEnsemble& e,
                                    std::span<const PreferenceTriple> triples);

// Fraction of triples with mean_reward(winner) > mean_reward(loser), ties 0.5.
double rm_accuracy(const RewardEnsemble& e,
                   std::span<const PreferenceTriple> triples);

// Exact categorical KL(pi(.|state) || ref(.|state)) summed over the response
// positions of one trajectory.
double trajectory_kl(const PolicyModel& pi, const PolicyModel& ref,
                     std::span<const int> prompt,
                     std::span<const int> response);

// Monte-Carlo estimate of E_x E_{y~pi} sum_t KL(pi || ref) with the
// per-position KL computed exactly from both full distributions.
double measure_kl(const PolicyModel& pi, const PolicyModel& ref,
                  std::span<const std::vector<int>> prompts,
                  int samples_per_prompt, int response_cap, Rng rng,
                  double temperature = 1.0);

struct OodRow {
  std::string label;
  double kl{0.0};
  double u_mean{0.0};
  double gold_mean{0.0};
};

// Fresh rollouts per checkpoint: measured KL against the reference, mean
// ensemble uncertainty and mean gold reward of the sampled responses.
std::vector<OodRow> ood_curve(
    const std::vector<std::pair<std::string, const PolicyModel*>>& checkpoints,
    const PolicyModel& sft_ref, const RewardEnsemble& e,
    std::span<const std::vector<int>> prompts, const TaskSpec& task,
    int samples_per_prompt, Rng rng);

// pi*(k) proportional to pi_d(k) * exp(r_k / beta), exactly normalized.
// beta must be positive; pi_d must be a distribution.
std::vector<double> closed_form_policy(std::span<const double> pi_d,
                                       std::span<const double> rewards,
                                       double beta);

// Spearman rank correlation with average ranks on ties.
double spearman(std::span<const double> a, std::span<const double> b);

}  // namespace uprl
