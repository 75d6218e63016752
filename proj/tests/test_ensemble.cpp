// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "uprl/ensemble.hpp"

using namespace uprl;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.vocab_size = 8;
  cfg.embed_dim = 8;
  cfg.n_heads = 2;
  cfg.ffn_dim = 8;
  cfg.n_layers = 1;
  cfg.max_seq_len = 8;
  return cfg;
}

const std::vector<int> kPrompt = {1, 2};
const std::vector<int> kResponse = {3, 4, 7};  // 7 == EOS for tiny config

// EOS hidden state under member n's adapters.
std::vector<double> eos_hidden(RewardEnsemble& e, int n,
                               std::span<const int> prompt,
                               std::span<const int> response) {
  LoraMap map;
  for (int i = 0; i < e.adapted_count(); ++i)
    map.emplace(e.unit(n, i).target, &e.unit(n, i));
  std::vector<int> ids;
  ids.push_back(e.backbone().config().bos_id());
  ids.insert(ids.end(), prompt.begin(), prompt.end());
  ids.insert(ids.end(), response.begin(), response.end());
  NoGradGuard ng;
  Tensor h = e.backbone().hidden_rows(ids, &map);
  const int pos = static_cast<int>(ids.size()) - 1;  // response ends with EOS
  std::vector<double> out(static_cast<std::size_t>(h.cols()));
  for (int j = 0; j < h.cols(); ++j) out[static_cast<std::size_t>(j)] = h.at(pos, j);
  return out;
}

// Sets member n's head so that its reward on (prompt, response) is `value`.
void pin_member_reward(RewardEnsemble& e, int n, double value) {
  auto h = eos_hidden(e, n, kPrompt, kResponse);
  double ss = 0.0;
  for (double x : h) ss += x * x;
  auto head = e.head(n).raw_data();
  for (std::size_t j = 0; j < h.size(); ++j) head[j] = value * h[j] / ss;
}

}  // namespace

TEST_CASE("ensemble: construction contracts") {
  Backbone bb(tiny_config(), Rng(1));
  CHECK_THROWS_AS(RewardEnsemble(bb, 1, 2, Rng(2)), std::invalid_argument);
  RewardEnsemble e(bb, 3, 2, Rng(2));
  CHECK(e.members() == 3);
  CHECK(e.adapted_count() == 2);  // wq and wv of the single layer
  CHECK_THROWS_AS(e.member_reward(3, kPrompt, kResponse), std::logic_error);
  CHECK_THROWS_AS(e.member_reward(-1, kPrompt, kResponse), std::logic_error);
}

TEST_CASE("ensemble: fresh members return identical rewards; uncertainty 0") {
  Backbone bb(tiny_config(), Rng(3));
  RewardEnsemble e(bb, 4, 2, Rng(4));
  auto rewards = e.member_rewards(kPrompt, kResponse);
  for (double r : rewards) CHECK(r == 0.0);  // zero heads
  CHECK(e.uncertainty(kPrompt, kResponse) == 0.0);

  // with equal nonzero heads, B=0 still forces agreement
  Rng hr(5);
  std::vector<double> head(8);
  for (auto& x : head) x = hr.gaussian(0, 1);
  for (int n = 0; n < 4; ++n)
    std::copy(head.begin(), head.end(), e.head(n).raw_data().begin());
  rewards = e.member_rewards(kPrompt, kResponse);
  for (int n = 1; n < 4; ++n) CHECK(rewards[static_cast<std::size_t>(n)] == rewards[0]);
  CHECK(e.uncertainty(kPrompt, kResponse) == 0.0);
}

TEST_CASE("ensemble: member reward is isolated from other members") {
  Backbone bb(tiny_config(), Rng(6));
  RewardEnsemble e(bb, 3, 2, Rng(7));
  Rng hr(8);
  for (int n = 0; n < 3; ++n) {
    for (auto& x : e.head(n).raw_data()) x = hr.gaussian(0, 1);
    for (int t = 0; t < e.adapted_count(); ++t)
      for (auto& x : e.unit(n, t).b.raw_data()) x = hr.gaussian(0, 0.2);
  }
  const double r0 = e.member_reward(0, kPrompt, kResponse);
  // perturb everything member 1 owns
  for (auto& x : e.head(1).raw_data()) x += 1.0;
  for (int t = 0; t < e.adapted_count(); ++t) {
    for (auto& x : e.unit(1, t).a.raw_data()) x += 0.5;
    for (auto& x : e.unit(1, t).b.raw_data()) x += 0.5;
  }
  CHECK(e.member_reward(0, kPrompt, kResponse) == r0);
}

TEST_CASE("ensemble: member forward matches a standalone single-LoRA model") {
  Backbone bb(tiny_config(), Rng(9));
  RewardEnsemble e(bb, 2, 2, Rng(10));
  Rng hr(11);
  for (auto& x : e.head(1).raw_data()) x = hr.gaussian(0, 1);
  for (int t = 0; t < e.adapted_count(); ++t)
    for (auto& x : e.unit(1, t).b.raw_data()) x = hr.gaussian(0, 0.3);

  LoraMap map;
  for (int t = 0; t < e.adapted_count(); ++t)
    map.emplace(e.unit(1, t).target, &e.unit(1, t));
  NoGradGuard ng;
  const double standalone =
      reward_forward(e.backbone(), &map, e.head(1), kPrompt, kResponse).value();
  CHECK(std::abs(e.member_reward(1, kPrompt, kResponse) - standalone) < 1e-12);
}

TEST_CASE("ensemble: mean reward equals the brute-force loop") {
  Backbone bb(tiny_config(), Rng(12));
  RewardEnsemble e(bb, 2, 2, Rng(13));
  pin_member_reward(e, 0, 1.0);
  pin_member_reward(e, 1, 3.0);
  CHECK(e.mean_reward(kPrompt, kResponse) == doctest::Approx(2.0).epsilon(1e-12));

  double loop = 0.0;
  for (int n = 0; n < e.members(); ++n)
    loop += e.member_reward(n, kPrompt, kResponse);
  loop /= e.members();
  CHECK(std::abs(e.mean_reward(kPrompt, kResponse) - loop) < 1e-14);
}

TEST_CASE("ensemble: uncertainty hand values (population std, divisor N)") {
  Backbone bb(tiny_config(), Rng(14));
  {
    RewardEnsemble e(bb, 2, 2, Rng(15));
    pin_member_reward(e, 0, 0.0);
    pin_member_reward(e, 1, 2.0);
    CHECK(e.uncertainty(kPrompt, kResponse) == doctest::Approx(1.0).epsilon(1e-12));
  }
  {
    RewardEnsemble e(bb, 5, 2, Rng(16));
    for (int n = 0; n < 5; ++n) pin_member_reward(e, n, n + 1.0);
    CHECK(e.uncertainty(kPrompt, kResponse) ==
          doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  }
  CHECK(population_std(std::vector<double>{1, 2, 3, 4, 5}) ==
        doctest::Approx(std::sqrt(2.0)).epsilon(1e-15));
}

TEST_CASE("ensemble: uncertainty is permutation invariant") {
  Backbone bb(tiny_config(), Rng(17));
  RewardEnsemble e(bb, 4, 2, Rng(18));
  Rng hr(19);
  for (int n = 0; n < 4; ++n) {
    for (auto& x : e.head(n).raw_data()) x = hr.gaussian(0, 1);
    for (int t = 0; t < e.adapted_count(); ++t)
      for (auto& x : e.unit(n, t).b.raw_data()) x = hr.gaussian(0, 0.2);
  }
  const double u0 = e.uncertainty(kPrompt, kResponse);
  e.swap_members(0, 3);
  e.swap_members(1, 2);
  CHECK(std::abs(e.uncertainty(kPrompt, kResponse) - u0) < 1e-12);
}

TEST_CASE("ensemble: shift leaves uncertainty fixed, scaling scales it") {
  Backbone bb(tiny_config(), Rng(20));
  RewardEnsemble e(bb, 5, 2, Rng(21));
  for (int n = 0; n < 5; ++n) pin_member_reward(e, n, 0.5 * n - 1.0);
  const double u0 = e.uncertainty(kPrompt, kResponse);
  CHECK(u0 > 0.0);

  // add a constant c to every member via head manipulation
  const double c = 3.25;
  for (int n = 0; n < 5; ++n) {
    auto h = eos_hidden(e, n, kPrompt, kResponse);
    double ss = 0.0;
    for (double x : h) ss += x * x;
    auto head = e.head(n).raw_data();
    for (std::size_t j = 0; j < h.size(); ++j) head[j] += c * h[j] / ss;
  }
  CHECK(e.uncertainty(kPrompt, kResponse) == doctest::Approx(u0).epsilon(1e-9));

  // scale every head by c: rewards scale, uncertainty scales by |c|
  const double u_before = e.uncertainty(kPrompt, kResponse);
  for (int n = 0; n < 5; ++n)
    for (auto& x : e.head(n).raw_data()) x *= -2.0;
  CHECK(e.uncertainty(kPrompt, kResponse) ==
        doctest::Approx(2.0 * u_before).epsilon(1e-9));
}

TEST_CASE("ensemble: concat_a shape and row blocks") {
  BackboneConfig cfg;  // defaults: d=32
  Backbone bb(cfg, Rng(22));
  RewardEnsemble e(bb, 2, 4, Rng(23));
  auto c = e.concat_a("layer0.attn.wq");
  CHECK(c.rows == 8);
  CHECK(c.cols == 32);
  for (int n = 0; n < 2; ++n) {
    const Tensor& a = e.unit(n, 0).a;
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 32; ++j)
        CHECK(c.at(n * 4 + i, j) == a.at(i, j));
  }
  CHECK_THROWS_AS(e.concat_a("nope"), std::logic_error);
}

TEST_CASE("ensemble: identical members collapse the diversity value") {
  Backbone bb(tiny_config(), Rng(24));
  RewardEnsemble e(bb, 3, 2, Rng(25));
  // copy member 0's A into all members
  for (int t = 0; t < e.adapted_count(); ++t) {
    auto src = e.unit(0, t).a.data();
    for (int n = 1; n < 3; ++n)
      std::copy(src.begin(), src.end(), e.unit(n, t).a.raw_data().begin());
  }
  double single = 0.0;
  for (int t = 0; t < e.adapted_count(); ++t) {
    linalg::Mat m(e.unit(0, t).a.rows(), e.unit(0, t).a.cols(),
                  {e.unit(0, t).a.data().begin(), e.unit(0, t).a.data().end()});
    single += linalg::nnm_ratio(m) / e.adapted_count();
  }
  auto dt = e.diversity_term();
  CHECK(std::abs(dt.value - single) < 1e-10);
}

TEST_CASE("ensemble: orthogonal equal-norm members maximize the ratio") {
  Backbone bb(tiny_config(), Rng(26));
  RewardEnsemble e(bb, 2, 2, Rng(27));
  // member n's A rows = distinct standard basis vectors
  for (int t = 0; t < e.adapted_count(); ++t)
    for (int n = 0; n < 2; ++n) {
      auto a = e.unit(n, t).a.raw_data();
      std::fill(a.begin(), a.end(), 0.0);
      const int d = e.unit(n, t).a.cols();
      a[static_cast<std::size_t>(0) * d + (2 * n + 0)] = 1.0;
      a[static_cast<std::size_t>(1) * d + (2 * n + 1)] = 1.0;
    }
  auto dt = e.diversity_term();
  CHECK(dt.value == doctest::Approx(2.0).epsilon(1e-9));  // sqrt(min(4, 8))
}

TEST_CASE("ensemble: diversity value stays in [1, sqrt(min(Nr, d))]") {
  Backbone bb(tiny_config(), Rng(28));
  Rng pr(29);
  for (int trial = 0; trial < 10; ++trial) {
    RewardEnsemble e(bb, 3, 2, Rng(30 + static_cast<std::uint64_t>(trial)));
    for (int n = 0; n < 3; ++n)
      for (int t = 0; t < e.adapted_count(); ++t)
        for (auto& x : e.unit(n, t).a.raw_data()) x += pr.gaussian(0, 0.05);
    auto dt = e.diversity_term();
    CHECK(dt.value >= 1.0 - 1e-12);
    CHECK(dt.value <= std::sqrt(6.0) + 1e-12);  // min(N*r, d) = min(6, 8)
  }
}

TEST_CASE("ensemble: diversity gradient matches finite differences") {
  Backbone bb(tiny_config(), Rng(31));
  RewardEnsemble e(bb, 3, 2, Rng(32));
  Tensor a0 = e.unit(0, 0).a;
  std::vector<double> x0(a0.data().begin(), a0.data().end());

  auto dt = e.diversity_term();
  e.add_diversity_grads(dt, 1.0);
  std::vector<double> analytic(a0.grad().begin(), a0.grad().end());

  auto f = [&](std::span<const double> x) {
    std::copy(x.begin(), x.end(), e.unit(0, 0).a.raw_data().begin());
    return e.diversity_term().value;
  };
  const double err = oracles::max_fd_rel_error(f, x0, analytic);
  std::copy(x0.begin(), x0.end(), e.unit(0, 0).a.raw_data().begin());
  CHECK(err < 1e-4);
}

TEST_CASE("ensemble: duplicated members keep concat ratio equal to single") {
  Backbone bb(tiny_config(), Rng(33));
  RewardEnsemble e(bb, 2, 3, Rng(34));
  for (int t = 0; t < e.adapted_count(); ++t) {
    auto src = e.unit(0, t).a.data();
    std::copy(src.begin(), src.end(), e.unit(1, t).a.raw_data().begin());
  }
  const Tensor& a = e.unit(0, 0).a;
  linalg::Mat single(a.rows(), a.cols(), {a.data().begin(), a.data().end()});
  CHECK(std::abs(linalg::nnm_ratio(e.concat_a("layer0.attn.wq")) -
                 linalg::nnm_ratio(single)) < 1e-10);
}
