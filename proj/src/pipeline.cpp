// SPDX-License-Identifier: Apache-2.0
#include "uprl/pipeline.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "uprl/eval.hpp"

namespace uprl {

namespace {

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  return order;
}

}  // namespace

SftResult sft_train(PolicyModel& model, const std::vector<SftPair>& data,
                    const SftConfig& cfg) {
  if (data.empty()) throw std::invalid_argument("sft: empty dataset");
  if (cfg.batch < 1) throw std::invalid_argument("sft: batch must be positive");

  Rng root(cfg.seed);
  Adam opt(model.parameters(), {.lr = cfg.lr});

  SftResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order =
        shuffled_indices(data.size(), root.derived("epoch").derived(
                                          static_cast<std::uint64_t>(epoch)));
    double epoch_nll = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<Tensor> sample_nll;
      std::size_t batch_tokens = 0;
      for (std::size_t k = start; k < end; ++k) {
        const auto& pair = data[order[k]];
        Tensor lp = model.response_token_logprobs(pair.prompt, pair.response);
        batch_tokens += pair.response.size();
        sample_nll.push_back(scale(sum(lp), -1.0));
      }
      Tensor loss = scale(add_n(sample_nll),
                          1.0 / static_cast<double>(batch_tokens));
      const double loss_val = loss.value();
      if (!std::isfinite(loss_val))
        throw std::runtime_error("sft: loss diverged at epoch " +
                                 std::to_string(epoch));
      backward(loss);
      opt.step();
      opt.zero_grad();
      epoch_nll += loss_val * static_cast<double>(batch_tokens);
      epoch_tokens += batch_tokens;
    }
    result.epoch_loss.push_back(epoch_nll / static_cast<double>(epoch_tokens));
  }
  return result;
}

Tensor rank_loss_t(const RewardEnsemble& e,
                   std::span<const PreferenceTriple> batch) {
  if (batch.empty()) throw std::invalid_argument("rank_loss: empty batch");
  std::vector<Tensor> terms;
  terms.reserve(batch.size());
  for (const auto& t : batch) {
    Tensor delta = sub(e.mean_reward_t(t.prompt, t.winner),
                       e.mean_reward_t(t.prompt, t.loser));
    terms.push_back(scale(log_sigmoid(delta), -1.0));
  }
  return scale(add_n(terms), 1.0 / static_cast<double>(batch.size()));
}

double rank_loss(const RewardEnsemble& e,
                 std::span<const PreferenceTriple> batch) {
  NoGradGuard ng;
  return rank_loss_t(e, batch).value();
}

RewardEnsemble make_reward_ensemble(const PolicyModel& sft,
                                    const RmTrainConfig& cfg) {
  return RewardEnsemble(sft.backbone(), cfg.members, cfg.lora_rank,
                        Rng(cfg.seed).derived("rm_ensemble"), cfg.lora_a_std);
}

RmTrainResult rm_train(RewardEnsemble& e,
                       std::span<const PreferenceTriple> train,
                       std::span<const PreferenceTriple> holdout,
                       const RmTrainConfig& cfg) {
  if (train.empty()) throw std::invalid_argument("rm: empty training set");
  if (cfg.lambda < 0.0)
    throw std::invalid_argument("rm: negative diversity weight");

  Rng root(cfg.seed);
  Adam opt(e.trainable_parameters(), {.lr = cfg.lr});

  RmTrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order =
        shuffled_indices(train.size(), root.derived("epoch").derived(
                                           static_cast<std::uint64_t>(epoch)));
    double epoch_rank = 0.0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      std::vector<PreferenceTriple> batch;
      batch.reserve(end - start);
      for (std::size_t k = start; k < end; ++k)
        batch.push_back(train[order[k]]);

      Tensor loss = rank_loss_t(e, batch);
      const double loss_val = loss.value();
      if (!std::isfinite(loss_val))
        throw std::runtime_error("rm: rank loss diverged at epoch " +
                                 std::to_string(epoch));
      backward(loss);
      if (cfg.lambda > 0.0)
        e.add_diversity_grads(e.diversity_term(), -cfg.lambda);
      opt.step();
      opt.zero_grad();
      epoch_rank += loss_val * static_cast<double>(batch.size());
      seen += batch.size();
    }

    RmEpochRow row;
    row.epoch = epoch;
    row.rank_loss = epoch_rank / static_cast<double>(seen);
    row.diversity = e.diversity_term().value;
    if (!holdout.empty()) {
      auto report = ece_report(score_pairs(e, holdout));
      row.holdout_acc = report.accuracy;
      row.holdout_ece = report.ece;
    }
    result.trace.push_back(row);
  }
  return result;
}

}  // namespace uprl
