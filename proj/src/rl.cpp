// SPDX-License-Identifier: Apache-2.0
#include "uprl/rl.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "uprl/eval.hpp"

namespace uprl {

void RlConfig::validate() const {
  if (steps < 0 || prompts_per_batch < 1 || samples_per_prompt < 1)
    throw std::invalid_argument("rl: bad batch geometry");
  if (!(temperature > 0.0))
    throw std::invalid_argument("rl: temperature must be positive");
  if (beta1 < 0.0 || beta2 < 0.0)
    throw std::invalid_argument("rl: beta coefficients must be non-negative");
  if (baseline_decay < 0.0 || baseline_decay >= 1.0)
    throw std::invalid_argument("rl: baseline decay must be in [0,1)");
  if (clip_epsilon <= 0.0)
    throw std::invalid_argument("rl: clip epsilon must be positive");
}

void UncertaintyTracker::update(std::span<const double> values) {
  for (double v : values) {
    sum_ += v;
    ++count_;
  }
}

double penalized_reward(double r, double u, double u_bar, double beta2) {
  return r - beta2 * (u - u_bar);
}

namespace {

// Shared by the standalone objective and the trainer so both spellings are
// the same arithmetic.
Tensor kl_objective_from(const std::vector<Tensor>& live_lp_sums,
                         const std::vector<double>& sft_lp_sums,
                         double beta1) {
  std::vector<Tensor> sq;
  sq.reserve(live_lp_sums.size());
  for (std::size_t i = 0; i < live_lp_sums.size(); ++i)
    sq.push_back(square(sub(live_lp_sums[i], Tensor::scalar(sft_lp_sums[i]))));
  return scale(add_n(sq), beta1 / static_cast<double>(live_lp_sums.size()));
}

double sum_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}

}  // namespace

Tensor kl_objective(const PolicyModel& pi, const RolloutBatch& batch,
                    double beta1) {
  if (batch.samples.empty()) throw std::invalid_argument("kl_objective: empty batch");
  if (beta1 < 0.0) throw std::invalid_argument("kl_objective: negative beta1");
  std::vector<Tensor> live;
  std::vector<double> ref;
  live.reserve(batch.samples.size());
  ref.reserve(batch.samples.size());
  for (const auto& s : batch.samples) {
    live.push_back(sum(pi.response_token_logprobs(s.prompt, s.response)));
    ref.push_back(sum_of(s.sft_logps));
  }
  return kl_objective_from(live, ref, beta1);
}

RolloutBatch sample_rollouts(const PolicyModel& pi, const PolicyModel& sft,
                             const RewardEnsemble& e, const TaskSpec& task,
                             std::span<const std::vector<int>> prompt_pool,
                             const RlConfig& cfg, Rng rng) {
  if (prompt_pool.empty())
    throw std::invalid_argument("rollout: empty prompt pool");
  RolloutBatch batch;
  for (int p = 0; p < cfg.prompts_per_batch; ++p) {
    const auto& prompt = prompt_pool[rng.uniform_below(
        static_cast<std::uint32_t>(prompt_pool.size()))];
    for (int s = 0; s < cfg.samples_per_prompt; ++s) {
      Rng sample_rng = rng.derived(
          static_cast<std::uint64_t>(p) * 131071ULL + static_cast<std::uint64_t>(s));
      RolloutSample out;
      out.prompt = prompt;
      auto sample =
          pi.sample(prompt, cfg.temperature, cfg.response_cap, sample_rng);
      out.response = std::move(sample.response);
      out.policy_logps = std::move(sample.logprobs);
      out.truncated = sample.truncated;
      out.sft_logps = sft.token_logprobs(prompt, out.response);
      auto [mean, u] = e.mean_and_uncertainty(prompt, out.response);
      out.proxy_reward = mean;
      out.uncertainty = u;
      out.gold = gold_reward(task, prompt, out.response);
      batch.samples.push_back(std::move(out));
    }
  }
  return batch;
}

RlTrainer::RlTrainer(PolicyModel& policy, const PolicyModel& sft_ref,
                     const RlConfig& cfg)
    : policy_(policy), sft_ref_(sft_ref), cfg_(cfg),
      opt_(policy.parameters(), {.lr = cfg.lr}) {
  cfg_.validate();
}

StepMetrics RlTrainer::update(const RolloutBatch& batch) {
  if (batch.samples.empty()) throw std::invalid_argument("update: empty batch");
  const std::size_t n = batch.samples.size();

  // tracker first: the running mean includes this batch before penalization
  std::vector<double> us;
  us.reserve(n);
  for (const auto& s : batch.samples) us.push_back(s.uncertainty);
  tracker_.update(us);
  const double u_bar = tracker_.mean();

  std::vector<double> penalized(n);
  double batch_mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    penalized[i] = penalized_reward(batch.samples[i].proxy_reward,
                                    batch.samples[i].uncertainty, u_bar,
                                    cfg_.beta2);
    batch_mean += penalized[i];
  }
  batch_mean /= static_cast<double>(n);
  if (!ema_ready_) {
    ema_ = batch_mean;
    ema_ready_ = true;
  } else {
    ema_ = cfg_.baseline_decay * ema_ + (1.0 - cfg_.baseline_decay) * batch_mean;
  }

  // one graph: policy-gradient term plus the separated KL objective
  std::vector<Tensor> live_lp_sums;
  std::vector<double> sft_lp_sums;
  live_lp_sums.reserve(n);
  sft_lp_sums.reserve(n);
  for (const auto& s : batch.samples) {
    live_lp_sums.push_back(
        sum(policy_.response_token_logprobs(s.prompt, s.response)));
    sft_lp_sums.push_back(sum_of(s.sft_logps));
  }

  std::vector<Tensor> pg_terms;
  pg_terms.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double adv = penalized[i] - ema_;
    if (cfg_.clip_enabled) {
      Tensor ratio = exp(sub(live_lp_sums[i],
                             Tensor::scalar(sum_of(batch.samples[i].policy_logps))));
      Tensor unclipped = scale(ratio, adv);
      Tensor clipped = scale(
          clamp(ratio, 1.0 - cfg_.clip_epsilon, 1.0 + cfg_.clip_epsilon), adv);
      pg_terms.push_back(scale(min_elem(unclipped, clipped),
                               -1.0 / static_cast<double>(n)));
    } else {
      pg_terms.push_back(
          scale(live_lp_sums[i], -adv / static_cast<double>(n)));
    }
  }
  Tensor kl_term = kl_objective_from(live_lp_sums, sft_lp_sums, cfg_.beta1);
  Tensor loss = add(add_n(pg_terms), kl_term);

  if (!std::isfinite(loss.value())) {
    std::ostringstream dump;
    dump << "rl: non-finite loss; batch dump:";
    for (const auto& s : batch.samples) {
      dump << " [x:";
      for (int t : s.prompt) dump << ' ' << t;
      dump << " y:";
      for (int t : s.response) dump << ' ' << t;
      dump << " r=" << s.proxy_reward << " u=" << s.uncertainty << "]";
    }
    throw std::runtime_error(dump.str());
  }

  // measured KL reflects the policy that produced the batch
  StepMetrics m;
  m.u_running_mean = u_bar;
  m.kl_objective_value = kl_term.value();
  for (std::size_t i = 0; i < n; ++i) {
    m.proxy_mean += batch.samples[i].proxy_reward;
    m.gold_mean += batch.samples[i].gold;
    m.u_mean += batch.samples[i].uncertainty;
    m.kl_measured += trajectory_kl(policy_, sft_ref_, batch.samples[i].prompt,
                                   batch.samples[i].response);
  }
  m.proxy_mean /= static_cast<double>(n);
  m.gold_mean /= static_cast<double>(n);
  m.u_mean /= static_cast<double>(n);
  m.kl_measured /= static_cast<double>(n);

  backward(loss);
  opt_.step();
  opt_.zero_grad();
  return m;
}

PolicyModel rl_train(const PolicyModel& sft, const RewardEnsemble& e,
                     std::span<const std::vector<int>> rl_prompts,
                     const TaskSpec& task, const RlConfig& cfg,
                     RlTrainResult* result, const RlCheckpointHook& hook) {
  cfg.validate();
  PolicyModel policy = sft.clone();
  policy.set_trainable(true);
  if (hook) hook(0, policy);

  RlTrainer trainer(policy, sft, cfg);
  Rng root(cfg.seed);
  for (int step = 1; step <= cfg.steps; ++step) {
    RolloutBatch batch =
        sample_rollouts(policy, sft, e, task, rl_prompts, cfg,
                        root.derived("step").derived(static_cast<std::uint64_t>(step)));
    StepMetrics m = trainer.update(batch);
    if (result)
      result->trace.push_back({step, m.proxy_mean, m.gold_mean, m.kl_measured,
                               m.u_mean, m.u_running_mean,
                               m.kl_objective_value});
    if (hook) hook(step, policy);
  }
  return policy;
}

}  // namespace uprl
