// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "uprl/eval.hpp"
#include "uprl/pipeline.hpp"

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

TaskSpec tiny_task() {
  TaskSpec t;
  t.content_vocab = 6;
  t.prompt_len = 2;
  t.response_cap = 3;
  return t;
}

std::vector<double> snapshot(NamedTensors params) {
  std::vector<double> out;
  for (auto& [name, t] : params)
    out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

// points every head along a direction that makes mean_reward(w)-mean_reward(l)
// equal exactly `target_delta` for the given triple
void pin_delta(RewardEnsemble& e, const PreferenceTriple& t,
               double target_delta) {
  NoGradGuard ng;
  const auto& cfg = e.backbone().config();
  auto ids_of = [&](const std::vector<int>& y) {
    std::vector<int> ids = {cfg.bos_id()};
    ids.insert(ids.end(), t.prompt.begin(), t.prompt.end());
    ids.insert(ids.end(), y.begin(), y.end());
    return ids;
  };
  const auto iw = ids_of(t.winner);
  const auto il = ids_of(t.loser);
  Tensor hw = e.backbone().hidden_rows(iw);
  Tensor hl = e.backbone().hidden_rows(il);
  const int d = cfg.embed_dim;
  std::vector<double> diff(static_cast<std::size_t>(d));
  double ss = 0.0;
  for (int j = 0; j < d; ++j) {
    diff[static_cast<std::size_t>(j)] =
        hw.at(static_cast<int>(iw.size()) - 1, j) -
        hl.at(static_cast<int>(il.size()) - 1, j);
    ss += diff[static_cast<std::size_t>(j)] * diff[static_cast<std::size_t>(j)];
  }
  REQUIRE(ss > 0);
  for (int n = 0; n < e.members(); ++n) {
    auto head = e.head(n).raw_data();
    for (int j = 0; j < d; ++j)
      head[static_cast<std::size_t>(j)] =
          target_delta * diff[static_cast<std::size_t>(j)] / ss;
  }
}

}  // namespace

TEST_CASE("rank_loss: log 2 at initialization (constant rewards)") {
  Backbone bb(tiny_config(), Rng(1));
  RewardEnsemble e(bb, 3, 2, Rng(2));
  std::vector<PreferenceTriple> batch = {{{1, 2}, {3, 7}, {4, 7}},
                                         {{0, 5}, {2, 7}, {1, 7}}};
  CHECK(rank_loss(e, batch) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(rank_loss(e, {}), std::invalid_argument);
}

TEST_CASE("rank_loss: hand values at pinned reward differences") {
  Backbone bb(tiny_config(), Rng(3));
  PreferenceTriple t{{1, 2}, {3, 7}, {4, 7}};
  std::vector<PreferenceTriple> batch = {t};
  {
    RewardEnsemble e(bb, 2, 2, Rng(4));
    pin_delta(e, t, -std::log(3.0));
    CHECK(rank_loss(e, batch) == doctest::Approx(std::log(4.0)).epsilon(1e-10));
  }
  {
    RewardEnsemble e(bb, 2, 2, Rng(5));
    pin_delta(e, t, 60.0);  // difference -> +inf drives the loss to 0
    CHECK(rank_loss(e, batch) < 1e-12);
    CHECK(rank_loss(e, batch) >= 0.0);
  }
}

TEST_CASE("sft: zero epochs leave the model untouched") {
  PolicyModel pm(tiny_config(), Rng(6));
  const auto before = snapshot(pm.named_parameters());
  auto bundle_task = tiny_task();
  std::vector<SftPair> data = {{{1, 2}, {1, bundle_task.eos_id()}}};
  auto result = sft_train(pm, data, {.epochs = 0, .batch = 4, .lr = 1e-3, .seed = 1});
  CHECK(result.epoch_loss.empty());
  CHECK(snapshot(pm.named_parameters()) == before);
  CHECK_THROWS_AS(sft_train(pm, {}, SftConfig{}), std::invalid_argument);
}

TEST_CASE("sft: overfits a single repeated pair below 0.1 NLL in 200 steps") {
  BackboneConfig cfg;  // full-size backbone
  TaskSpec task;
  PolicyModel pm(cfg, Rng(7));
  std::vector<SftPair> data(4, SftPair{{1, 2, 3, 4, 5}, {2, 1, 5, task.eos_id()}});
  auto result =
      sft_train(pm, data, {.epochs = 200, .batch = 4, .lr = 3e-3, .seed = 2});
  REQUIRE(result.epoch_loss.size() == 200);
  CHECK(result.epoch_loss.back() < 0.1);
  CHECK(result.epoch_loss.back() < result.epoch_loss.front());
}

TEST_CASE("sft: deterministic given the seed") {
  TaskSpec task = tiny_task();
  std::vector<SftPair> data;
  for (std::uint64_t i = 0; i < 12; ++i) {
    auto x = std::vector<int>{static_cast<int>(i % 6), static_cast<int>((i + 2) % 6)};
    data.push_back({x, scripted_reference_policy(task, x, 0.2, Rng(i))});
  }
  auto run = [&] {
    PolicyModel pm(tiny_config(), Rng(8));
    sft_train(pm, data, {.epochs = 3, .batch = 4, .lr = 1e-3, .seed = 9});
    return snapshot(pm.named_parameters());
  };
  CHECK(run() == run());
}

TEST_CASE("rm_train: backbone stays bit-identical; sft model untouched") {
  TaskSpec task = tiny_task();
  PolicyModel sft(tiny_config(), Rng(10));
  const auto sft_before = snapshot(sft.named_parameters());

  std::vector<PreferenceTriple> train, holdout;
  for (std::uint64_t i = 0; i < 24; ++i) {
    std::vector<int> x = {static_cast<int>(i % 6), static_cast<int>((i * 3 + 1) % 6)};
    auto a = scripted_reference_policy(task, x, 0.4, Rng(100 + i));
    auto b = scripted_reference_policy(task, x, 0.4, Rng(200 + i));
    if (gold_reward(task, x, a) == gold_reward(task, x, b)) continue;
    if (gold_reward(task, x, a) < gold_reward(task, x, b)) std::swap(a, b);
    (i % 5 == 4 ? holdout : train).push_back({x, a, b});
  }
  REQUIRE(train.size() > 8);

  RmTrainConfig cfg{.epochs = 2, .batch = 8, .lr = 1e-3, .lambda = 0.1,
                    .members = 3, .lora_rank = 2, .seed = 11};
  RewardEnsemble e = make_reward_ensemble(sft, cfg);
  const auto backbone_before = snapshot(e.backbone_mut().named_parameters());

  auto result = rm_train(e, train, holdout, cfg);
  REQUIRE(result.trace.size() == 2);
  CHECK(snapshot(e.backbone_mut().named_parameters()) == backbone_before);
  CHECK(snapshot(sft.named_parameters()) == sft_before);
  for (const auto& row : result.trace) {
    CHECK(row.rank_loss >= 0.0);
    CHECK(row.diversity >= 1.0 - 1e-12);
  }
}

TEST_CASE("rm_train: NNM weight raises the final diversity value") {
  TaskSpec task = tiny_task();
  PolicyModel sft(tiny_config(), Rng(12));
  std::vector<PreferenceTriple> train;
  for (std::uint64_t i = 0; i < 32; ++i) {
    std::vector<int> x = {static_cast<int>((i * 5 + 2) % 6), static_cast<int>(i % 6)};
    auto a = scripted_reference_policy(task, x, 0.4, Rng(300 + i));
    auto b = scripted_reference_policy(task, x, 0.4, Rng(400 + i));
    if (gold_reward(task, x, a) == gold_reward(task, x, b)) continue;
    if (gold_reward(task, x, a) < gold_reward(task, x, b)) std::swap(a, b);
    train.push_back({x, a, b});
  }
  auto run = [&](double lambda) {
    RmTrainConfig cfg{.epochs = 3, .batch = 8, .lr = 1e-3, .lambda = lambda,
                      .members = 3, .lora_rank = 2, .seed = 13};
    RewardEnsemble e = make_reward_ensemble(sft, cfg);
    auto result = rm_train(e, train, {}, cfg);
    return result.trace.back().diversity;
  };
  CHECK(run(0.5) > run(0.0));
}

TEST_CASE("rm objective gradient matches finite differences end to end") {
  TaskSpec task = tiny_task();
  PolicyModel sft(tiny_config(), Rng(14));
  std::vector<PreferenceTriple> batch;
  for (std::uint64_t i = 0; i < 4; ++i) {
    std::vector<int> x = {static_cast<int>(i % 6), static_cast<int>((i + 3) % 6)};
    auto a = scripted_reference_policy(task, x, 0.4, Rng(500 + i));
    auto b = scripted_reference_policy(task, x, 0.4, Rng(600 + i));
    if (gold_reward(task, x, a) == gold_reward(task, x, b)) continue;
    if (gold_reward(task, x, a) < gold_reward(task, x, b)) std::swap(a, b);
    batch.push_back({x, a, b});
  }
  REQUIRE(!batch.empty());

  const double lambda = 0.3;
  RmTrainConfig cfg{.epochs = 1, .batch = 4, .lr = 1e-3, .lambda = lambda,
                    .members = 3, .lora_rank = 2, .seed = 15};
  RewardEnsemble e = make_reward_ensemble(sft, cfg);
  // move off the B=0 saddle so the A gradient is alive
  Rng hr(16);
  for (int n = 0; n < e.members(); ++n) {
    for (auto& v : e.head(n).raw_data()) v = hr.gaussian(0, 0.4);
    for (int t = 0; t < e.adapted_count(); ++t)
      for (auto& v : e.unit(n, t).b.raw_data()) v = hr.gaussian(0, 0.2);
  }

  Tensor loss = rank_loss_t(e, batch);
  backward(loss);
  e.add_diversity_grads(e.diversity_term(), -lambda);
  Tensor a0 = e.unit(1, 0).a;
  std::vector<double> analytic(a0.grad().begin(), a0.grad().end());
  std::vector<double> x0(a0.data().begin(), a0.data().end());

  auto f = [&](std::span<const double> x) {
    std::copy(x.begin(), x.end(), e.unit(1, 0).a.raw_data().begin());
    return rank_loss(e, batch) - lambda * e.diversity_term().value;
  };
  const double err = oracles::max_fd_rel_error(f, x0, analytic);
  std::copy(x0.begin(), x0.end(), e.unit(1, 0).a.raw_data().begin());
  CHECK(err < 1e-4);
}

TEST_CASE("rm_train: deterministic given the seed") {
  TaskSpec task = tiny_task();
  PolicyModel sft(tiny_config(), Rng(17));
  std::vector<PreferenceTriple> train;
  for (std::uint64_t i = 0; i < 16; ++i) {
    std::vector<int> x = {static_cast<int>((i * 7 + 1) % 6), static_cast<int>(i % 6)};
    auto a = scripted_reference_policy(task, x, 0.4, Rng(700 + i));
    auto b = scripted_reference_policy(task, x, 0.4, Rng(800 + i));
    if (gold_reward(task, x, a) == gold_reward(task, x, b)) continue;
    if (gold_reward(task, x, a) < gold_reward(task, x, b)) std::swap(a, b);
    train.push_back({x, a, b});
  }
  auto run = [&] {
    RmTrainConfig cfg{.epochs = 2, .batch = 8, .lr = 1e-3, .lambda = 0.1,
                      .members = 2, .lora_rank = 2, .seed = 18};
    RewardEnsemble e = make_reward_ensemble(sft, cfg);
    rm_train(e, train, {}, cfg);
    std::vector<double> out;
    for (auto& [name, t] : e.named_parameters())
      out.insert(out.end(), t.data().begin(), t.data().end());
    return out;
  };
  CHECK(run() == run());
}
