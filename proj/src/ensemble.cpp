// SPDX-License-Identifier: Apache-2.0
#include "uprl/ensemble.hpp"

#include <cmath>
#include <stdexcept>

namespace uprl {

double population_std(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("population_std: empty");
  double m = 0.0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - m) * (v - m);
  return std::sqrt(ss / static_cast<double>(values.size()));
}

RewardEnsemble::RewardEnsemble(const Backbone& sft_backbone, int n_members,
                               int lora_rank, Rng rng, double a_stddev)
    : backbone_(sft_backbone.clone()), rank_(lora_rank) {
  if (n_members < 2)
    throw std::invalid_argument("ensemble: need at least 2 members");
  backbone_.set_trainable(false);
  targets_ = backbone_.lora_targets();
  const int d = backbone_.config().embed_dim;
  units_.reserve(static_cast<std::size_t>(n_members));
  heads_.reserve(static_cast<std::size_t>(n_members));
  for (int n = 0; n < n_members; ++n) {
    Rng member_rng = rng.derived("member" + std::to_string(n));
    std::vector<LoraUnit> member_units;
    member_units.reserve(targets_.size());
    for (const auto& target : targets_) {
      auto [din, dout] = backbone_.target_dims(target);
      member_units.push_back(LoraUnit::create(
          target, din, dout, lora_rank, member_rng.derived(target), a_stddev));
    }
    units_.push_back(std::move(member_units));
    heads_.push_back(Tensor::zeros({d, 1}, true));
  }
}

void RewardEnsemble::check_member(int n) const {
  if (n < 0 || n >= members())
    throw std::logic_error("ensemble: member index " + std::to_string(n) +
                           " out of range [0," + std::to_string(members()) +
                           ")");
}

LoraMap RewardEnsemble::lora_map(int n) const {
  LoraMap map;
  for (const auto& u : units_[static_cast<std::size_t>(n)])
    map.emplace(u.target, &u);
  return map;
}

Tensor RewardEnsemble::member_reward_t(int n, std::span<const int> prompt,
                                       std::span<const int> response) const {
  check_member(n);
  LoraMap map = lora_map(n);
  return reward_forward(backbone_, &map, heads_[static_cast<std::size_t>(n)],
                        prompt, response);
}

double RewardEnsemble::member_reward(int n, std::span<const int> prompt,
                                     std::span<const int> response) const {
  NoGradGuard ng;
  return member_reward_t(n, prompt, response).value();
}

std::vector<double> RewardEnsemble::member_rewards(
    std::span<const int> prompt, std::span<const int> response) const {
  NoGradGuard ng;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(members()));
  for (int n = 0; n < members(); ++n)
    out.push_back(member_reward_t(n, prompt, response).value());
  return out;
}

Tensor RewardEnsemble::mean_reward_t(std::span<const int> prompt,
                                     std::span<const int> response) const {
  std::vector<Tensor> parts;
  parts.reserve(static_cast<std::size_t>(members()));
  for (int n = 0; n < members(); ++n)
    parts.push_back(member_reward_t(n, prompt, response));
  return scale(add_n(parts), 1.0 / members());
}

double RewardEnsemble::mean_reward(std::span<const int> prompt,
                                   std::span<const int> response) const {
  NoGradGuard ng;
  return mean_reward_t(prompt, response).value();
}

double RewardEnsemble::uncertainty(std::span<const int> prompt,
                                   std::span<const int> response) const {
  return population_std(member_rewards(prompt, response));
}

std::pair<double, double> RewardEnsemble::mean_and_uncertainty(
    std::span<const int> prompt, std::span<const int> response) const {
  const auto rewards = member_rewards(prompt, response);
  double m = 0.0;
  for (double r : rewards) m += r;
  m /= static_cast<double>(rewards.size());
  return {m, population_std(rewards)};
}

linalg::Mat RewardEnsemble::concat_a(const std::string& target) const {
  int target_idx = -1;
  for (std::size_t i = 0; i < targets_.size(); ++i)
    if (targets_[i] == target) target_idx = static_cast<int>(i);
  if (target_idx < 0)
    throw std::logic_error("ensemble: unknown adapter target '" + target + "'");
  const int n = members();
  const Tensor& a0 = units_[0][static_cast<std::size_t>(target_idx)].a;
  const int r = a0.rows(), d = a0.cols();
  linalg::Mat out(n * r, d);
  for (int m = 0; m < n; ++m) {
    const Tensor& a = units_[static_cast<std::size_t>(m)]
                            [static_cast<std::size_t>(target_idx)].a;
    auto src = a.data();
    std::copy(src.begin(), src.end(),
              out.v.begin() + static_cast<std::size_t>(m) * r * d);
  }
  return out;
}

RewardEnsemble::DiversityTerm RewardEnsemble::diversity_term() const {
  DiversityTerm out;
  for (const auto& target : targets_) {
    auto res = linalg::nnm_ratio_with_grad(concat_a(target));
    out.value += res.value / adapted_count();
    out.concat_grads.emplace_back(target, std::move(res.grad));
  }
  return out;
}

void RewardEnsemble::add_diversity_grads(const DiversityTerm& dt,
                                         double coeff) {
  const double c = coeff / adapted_count();
  for (const auto& [target, grad] : dt.concat_grads) {
    int target_idx = -1;
    for (std::size_t i = 0; i < targets_.size(); ++i)
      if (targets_[i] == target) target_idx = static_cast<int>(i);
    if (target_idx < 0)
      throw std::logic_error("ensemble: diversity gradient for unknown target");
    for (int m = 0; m < members(); ++m) {
      Tensor& a = units_[static_cast<std::size_t>(m)]
                        [static_cast<std::size_t>(target_idx)].a;
      const int r = a.rows(), d = a.cols();
      std::vector<double> block(static_cast<std::size_t>(r) * d);
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < d; ++j)
          block[static_cast<std::size_t>(i) * d + j] =
              c * grad.at(m * r + i, j);
      a.accumulate_grad(block);
    }
  }
}

LoraUnit& RewardEnsemble::unit(int member, int target_index) {
  check_member(member);
  return units_[static_cast<std::size_t>(member)]
               [static_cast<std::size_t>(target_index)];
}
const LoraUnit& RewardEnsemble::unit(int member, int target_index) const {
  check_member(member);
  return units_[static_cast<std::size_t>(member)]
               [static_cast<std::size_t>(target_index)];
}

std::vector<Tensor> RewardEnsemble::trainable_parameters() {
  std::vector<Tensor> out;
  for (int m = 0; m < members(); ++m) {
    for (auto& u : units_[static_cast<std::size_t>(m)]) {
      out.push_back(u.a);
      out.push_back(u.b);
    }
    out.push_back(heads_[static_cast<std::size_t>(m)]);
  }
  return out;
}

NamedTensors RewardEnsemble::named_parameters() {
  NamedTensors out;
  for (auto& [name, t] : backbone_.named_parameters())
    out.emplace_back("backbone/" + name, t);
  for (int m = 0; m < members(); ++m) {
    const std::string p = "member" + std::to_string(m) + "/";
    for (auto& u : units_[static_cast<std::size_t>(m)]) {
      out.emplace_back(p + "lora/" + u.target + "/A", u.a);
      out.emplace_back(p + "lora/" + u.target + "/B", u.b);
    }
    out.emplace_back(p + "head", heads_[static_cast<std::size_t>(m)]);
  }
  return out;
}

std::size_t RewardEnsemble::trainable_count() const {
  std::size_t n = 0;
  for (const auto& member : units_)
    for (const auto& u : member) n += u.a.size() + u.b.size();
  for (const auto& h : heads_) n += h.size();
  return n;
}

std::size_t RewardEnsemble::total_count() const {
  std::size_t n = trainable_count();
  for (auto& [name, t] :
       const_cast<RewardEnsemble*>(this)->backbone_.named_parameters())
    n += t.size();
  return n;
}

void RewardEnsemble::swap_members(int i, int j) {
  check_member(i);
  check_member(j);
  std::swap(units_[static_cast<std::size_t>(i)], units_[static_cast<std::size_t>(j)]);
  std::swap(heads_[static_cast<std::size_t>(i)], heads_[static_cast<std::size_t>(j)]);
}

}  // namespace uprl
