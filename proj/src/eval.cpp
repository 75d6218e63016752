// SPDX-License-Identifier: Apache-2.0
#include "uprl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace uprl {

double preference_prob(double delta) {
  if (!std::isfinite(delta))
    throw std::domain_error("preference_prob: non-finite delta");
  return delta >= 0.0 ? 1.0 / (1.0 + std::exp(-delta))
                      : std::exp(delta) / (1.0 + std::exp(delta));
}

double calibration_scale(std::span<const double> deltas) {
  if (deltas.empty())
    throw std::domain_error("calibration_scale: empty delta set");
  double mx = 0.0;
  for (double d : deltas) mx = std::max(mx, std::abs(d));
  if (mx <= 0.0)
    throw std::domain_error("calibration_scale: all reward differences are 0");
  return std::log(99.0) / mx;
}

CalibrationReport ece_report(std::span<const ScoredPair> pairs, int bins) {
  if (pairs.empty()) throw std::invalid_argument("ece: no pairs");
  if (bins < 1) throw std::invalid_argument("ece: bins must be positive");

  double mx = 0.0;
  for (const auto& p : pairs) mx = std::max(mx, std::abs(p.delta));
  CalibrationReport rep;
  rep.scale = mx > 0.0 ? std::log(99.0) / mx : 1.0;

  rep.bins.assign(static_cast<std::size_t>(bins), BinStat{});
  std::vector<double> conf_sum(static_cast<std::size_t>(bins), 0.0);
  std::vector<double> acc_sum(static_cast<std::size_t>(bins), 0.0);
  const double width = 0.5 / bins;
  double correct_total = 0.0;
  for (const auto& p : pairs) {
    const double conf = preference_prob(rep.scale * std::abs(p.delta));
    int b = static_cast<int>((conf - 0.5) / width);
    b = std::min(bins - 1, std::max(0, b));
    ++rep.bins[static_cast<std::size_t>(b)].count;
    conf_sum[static_cast<std::size_t>(b)] += conf;
    acc_sum[static_cast<std::size_t>(b)] += p.correct;
    correct_total += p.correct;
  }

  for (int b = 0; b < bins; ++b) {
    auto& stat = rep.bins[static_cast<std::size_t>(b)];
    if (stat.count > 0) {
      stat.acc = acc_sum[static_cast<std::size_t>(b)] / stat.count;
      stat.conf = conf_sum[static_cast<std::size_t>(b)] / stat.count;
      rep.ece += (static_cast<double>(stat.count) /
                  static_cast<double>(pairs.size())) *
                 std::abs(stat.acc - stat.conf);
    }
  }
  rep.accuracy = correct_total / static_cast<double>(pairs.size());
  return rep;
}

std::vector<ScoredPair> score_pairs(const RewardEnsemble& e,
                                    std::span<const PreferenceTriple> triples) {
  std::vector<ScoredPair> out;
  out.reserve(triples.size());
  for (const auto& t : triples) {
    const double delta = e.mean_reward(t.prompt, t.winner) -
                         e.mean_reward(t.prompt, t.loser);
    out.push_back(
        {delta, delta > 0.0 ? 1.0 : (delta < 0.0 ? 0.0 : 0.5)});
  }
  return out;
}

double rm_accuracy(const RewardEnsemble& e,
                   std::span<const PreferenceTriple> triples) {
  if (triples.empty()) throw std::invalid_argument("rm_accuracy: empty set");
  double total = 0.0;
  for (const auto& p : score_pairs(e, triples)) total += p.correct;
  return total / static_cast<double>(triples.size());
}

double trajectory_kl(const PolicyModel& pi, const PolicyModel& ref,
                     std::span<const int> prompt,
                     std::span<const int> response) {
  NoGradGuard ng;
  Tensor rows_pi = pi.response_logprob_rows(prompt, response);
  Tensor rows_ref = ref.response_logprob_rows(prompt, response);
  double total = 0.0;
  for (int i = 0; i < rows_pi.rows(); ++i)
    for (int j = 0; j < rows_pi.cols(); ++j) {
      const double lp = rows_pi.at(i, j);
      total += std::exp(lp) * (lp - rows_ref.at(i, j));
    }
  return total;
}

double measure_kl(const PolicyModel& pi, const PolicyModel& ref,
                  std::span<const std::vector<int>> prompts,
                  int samples_per_prompt, int response_cap, Rng rng,
                  double temperature) {
  if (prompts.empty() || samples_per_prompt < 1)
    throw std::invalid_argument("measure_kl: nothing to sample");
  double total = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (int s = 0; s < samples_per_prompt; ++s) {
      Rng sample_rng = rng.derived(i * 1000003ULL + static_cast<std::uint64_t>(s));
      auto sample = pi.sample(prompts[i], temperature, response_cap, sample_rng);
      total += trajectory_kl(pi, ref, prompts[i], sample.response);
      ++count;
    }
  }
  return total / count;
}

std::vector<OodRow> ood_curve(
    const std::vector<std::pair<std::string, const PolicyModel*>>& checkpoints,
    const PolicyModel& sft_ref, const RewardEnsemble& e,
    std::span<const std::vector<int>> prompts, const TaskSpec& task,
    int samples_per_prompt, Rng rng) {
  if (checkpoints.size() < 2)
    throw std::logic_error("ood_curve: need at least 2 checkpoints");
  std::vector<OodRow> out;
  for (const auto& [label, model] : checkpoints) {
    Rng ck_rng = rng.derived(label);
    double kl = 0.0, u = 0.0, gold = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
      for (int s = 0; s < samples_per_prompt; ++s) {
        Rng sample_rng =
            ck_rng.derived(i * 1000003ULL + static_cast<std::uint64_t>(s));
        auto sample =
            model->sample(prompts[i], 1.0, task.response_cap, sample_rng);
        kl += trajectory_kl(*model, sft_ref, prompts[i], sample.response);
        u += e.uncertainty(prompts[i], sample.response);
        gold += gold_reward(task, prompts[i], sample.response);
        ++count;
      }
    }
    out.push_back({label, kl / count, u / count, gold / count});
  }
  return out;
}

std::vector<double> closed_form_policy(std::span<const double> pi_d,
                                       std::span<const double> rewards,
                                       double beta) {
  if (!(beta > 0.0))
    throw std::domain_error("closed_form_policy: beta must be positive");
  if (pi_d.size() != rewards.size() || pi_d.empty())
    throw std::invalid_argument("closed_form_policy: size mismatch");
  double total = 0.0;
  for (double p : pi_d) {
    if (p < 0.0)
      throw std::domain_error("closed_form_policy: negative probability");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw std::domain_error("closed_form_policy: pi_d does not sum to 1");

  // log-space for stability; shifting rewards by a constant cancels exactly
  std::vector<double> logw(pi_d.size(), -1e300);
  double mx = -1e300;
  for (std::size_t k = 0; k < pi_d.size(); ++k) {
    if (pi_d[k] > 0.0) {
      logw[k] = std::log(pi_d[k]) + rewards[k] / beta;
      mx = std::max(mx, logw[k]);
    }
  }
  double z = 0.0;
  std::vector<double> out(pi_d.size(), 0.0);
  for (std::size_t k = 0; k < pi_d.size(); ++k) {
    if (pi_d[k] > 0.0) {
      out[k] = std::exp(logw[k] - mx);
      z += out[k];
    }
  }
  for (auto& p : out) p /= z;
  return out;
}

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2)
    throw std::invalid_argument("spearman: need two equal-length series");
  auto ranks = [](std::span<const double> v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto ra = ranks(a);
  const auto rb = ranks(b);
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += ra[i];
    mb += rb[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cov += (ra[i] - ma) * (rb[i] - mb);
    va += (ra[i] - ma) * (ra[i] - ma);
    vb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (va <= 0.0 || vb <= 0.0) return 0.0;  // constant series carry no ranking
  return cov / std::sqrt(va * vb);
}

}  // namespace uprl
