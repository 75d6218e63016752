// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "oracles.hpp"
#include "uprl/checkpoint.hpp"
#include "uprl/model.hpp"

using namespace uprl;

namespace {

BackboneConfig tiny_config() {
  BackboneConfig cfg;
  cfg.vocab_size = 8;  // 6 content + BOS + EOS
  cfg.embed_dim = 8;
  cfg.n_heads = 2;
  cfg.ffn_dim = 8;
  cfg.n_layers = 1;
  cfg.max_seq_len = 8;
  return cfg;
}

// Dense-composition oracle: (W0 + B*A) * z computed with plain loops.
std::vector<double> dense_lora_oracle(const Tensor& w0, const Tensor& a,
                                      const Tensor& b, const Tensor& z) {
  const int dout = w0.rows(), din = w0.cols(), r = a.rows(), k = z.cols();
  std::vector<double> w(static_cast<std::size_t>(dout) * din);
  for (int i = 0; i < dout; ++i)
    for (int j = 0; j < din; ++j) {
      double dw = 0.0;
      for (int p = 0; p < r; ++p) dw += b.at(i, p) * a.at(p, j);
      w[static_cast<std::size_t>(i) * din + j] = w0.at(i, j) + dw;
    }
  std::vector<double> out(static_cast<std::size_t>(dout) * k, 0.0);
  for (int i = 0; i < dout; ++i)
    for (int j = 0; j < k; ++j)
      for (int p = 0; p < din; ++p)
        out[static_cast<std::size_t>(i) * k + j] +=
            w[static_cast<std::size_t>(i) * din + p] * z.at(p, j);
  return out;
}

}  // namespace

TEST_CASE("lora_forward: fresh unit (B=0) is the base map exactly") {
  Rng rng(1);
  Tensor w0 = Tensor::gaussian({6, 5}, rng, 0, 1);
  Tensor z = Tensor::gaussian({5, 3}, rng, 0, 1);
  LoraUnit u = LoraUnit::create("t", 5, 6, 2, Rng(2));
  Tensor out = lora_forward(w0, u, z);
  Tensor base = matmul(w0, z);
  for (std::size_t i = 0; i < out.size(); ++i)
    CHECK(out.data()[i] == base.data()[i]);
}

TEST_CASE("lora_forward: zero base with identity adapters is the identity") {
  const int d = 4;
  Tensor w0 = Tensor::zeros({d, d});
  LoraUnit u = LoraUnit::create("t", d, d, d, Rng(3));
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      u.a.raw_data()[static_cast<std::size_t>(i) * d + j] = i == j ? 1.0 : 0.0;
      u.b.raw_data()[static_cast<std::size_t>(i) * d + j] = i == j ? 1.0 : 0.0;
    }
  Rng rng(4);
  Tensor z = Tensor::gaussian({d, 2}, rng, 0, 1);
  Tensor out = lora_forward(w0, u, z);
  for (std::size_t i = 0; i < z.size(); ++i)
    CHECK(out.data()[i] == doctest::Approx(z.data()[i]).epsilon(1e-15));
}

TEST_CASE("lora_forward: matches the dense (W0+BA)z oracle") {
  Rng rng(5);
  Tensor w0 = Tensor::gaussian({6, 5}, rng, 0, 1);
  Tensor z = Tensor::gaussian({5, 3}, rng, 0, 1);
  LoraUnit u = LoraUnit::create("t", 5, 6, 2, Rng(6));
  for (auto& x : u.b.raw_data()) x = rng.gaussian(0, 1);

  Tensor out = lora_forward(w0, u, z);
  auto ref = dense_lora_oracle(w0, u.a, u.b, z);
  for (std::size_t i = 0; i < ref.size(); ++i)
    CHECK(std::abs(out.data()[i] - ref[i]) < 1e-12);
}

TEST_CASE("lora_forward: shape mismatch raises") {
  Tensor w0 = Tensor::zeros({6, 5});
  LoraUnit u = LoraUnit::create("t", 4, 6, 2, Rng(7));
  CHECK_THROWS_AS(lora_forward(w0, u, Tensor::zeros({5, 2})),
                  std::invalid_argument);
}

TEST_CASE("backbone: fresh LoRA units leave every forward unchanged") {
  BackboneConfig cfg = tiny_config();
  Backbone bb(cfg, Rng(10));
  LoraUnit q = LoraUnit::create("layer0.attn.wq", cfg.embed_dim, cfg.embed_dim,
                                2, Rng(11));
  LoraUnit v = LoraUnit::create("layer0.attn.wv", cfg.embed_dim, cfg.embed_dim,
                                2, Rng(12));
  LoraMap lora{{q.target, &q}, {v.target, &v}};
  std::vector<int> ids = {cfg.bos_id(), 1, 2, 3, cfg.eos_id()};
  Tensor h0 = bb.hidden_rows(ids);
  Tensor h1 = bb.hidden_rows(ids, &lora);
  for (std::size_t i = 0; i < h0.size(); ++i)
    CHECK(h0.data()[i] == h1.data()[i]);
}

TEST_CASE("policy: zeroed language head gives the uniform distribution") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(20));
  std::vector<int> prompt = {1, 2};
  std::vector<int> response = {3, cfg.eos_id()};
  auto lps = pm.token_logprobs(prompt, response);
  for (double lp : lps)
    CHECK(lp == doctest::Approx(std::log(1.0 / cfg.vocab_size)).epsilon(1e-12));
}

TEST_CASE("policy: per-position distributions normalize") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(21));
  // non-trivial head
  Rng hr(22);
  for (auto& x : pm.lm_head().raw_data()) x = hr.gaussian(0, 0.5);
  std::vector<int> prompt = {1, 2};
  std::vector<int> response = {3, 4, cfg.eos_id()};
  NoGradGuard ng;
  Tensor rows = pm.response_logprob_rows(prompt, response);
  for (int i = 0; i < rows.rows(); ++i) {
    double total = 0.0;
    for (int j = 0; j < rows.cols(); ++j) total += std::exp(rows.at(i, j));
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("policy: token log-probs match a step-by-step oracle") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(23));
  Rng hr(24);
  for (auto& x : pm.lm_head().raw_data()) x = hr.gaussian(0, 0.7);

  std::vector<int> prompt = {0, 5};
  std::vector<int> response = {2, 2, 4, cfg.eos_id()};
  auto lps = pm.token_logprobs(prompt, response);

  NoGradGuard ng;
  double total = 0.0;
  std::vector<int> ids;
  ids.push_back(cfg.bos_id());
  ids.insert(ids.end(), prompt.begin(), prompt.end());
  for (std::size_t t = 0; t < response.size(); ++t) {
    Tensor logits = pm.logit_rows(ids);
    const int last = logits.rows() - 1;
    double mx = logits.at(last, 0);
    for (int j = 0; j < logits.cols(); ++j) mx = std::max(mx, logits.at(last, j));
    double se = 0.0;
    for (int j = 0; j < logits.cols(); ++j)
      se += std::exp(logits.at(last, j) - mx);
    const double lp = (logits.at(last, response[t]) - mx) - std::log(se);
    total += lp;
    CHECK(std::abs(lp - lps[t]) < 1e-10);
    ids.push_back(response[t]);
  }
  double sum_lp = 0.0;
  for (double lp : lps) sum_lp += lp;
  CHECK(std::abs(sum_lp - total) < 1e-10);
}

TEST_CASE("policy: contract errors for malformed inputs") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(25));
  std::vector<int> prompt = {1, 2};
  CHECK_THROWS_AS(pm.token_logprobs(prompt, std::vector<int>{3, 4}),
                  std::logic_error);  // no EOS
  CHECK_THROWS_AS(
      pm.token_logprobs(std::vector<int>{1, 2, 3, 4, 5, 6},
                        std::vector<int>{3, 4, 3, 4, cfg.eos_id()}),
      std::logic_error);  // overlength
  CHECK_THROWS_AS(pm.token_logprobs(std::vector<int>{99},
                                    std::vector<int>{cfg.eos_id()}),
                  std::logic_error);  // id out of range
}

TEST_CASE("policy sample: tiny temperature equals greedy argmax") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(26));
  Rng hr(27);
  for (auto& x : pm.lm_head().raw_data()) x = hr.gaussian(0, 1.0);
  std::vector<int> prompt = {1, 4};

  Rng s1(100);
  auto greedy = pm.sample(prompt, 1e-12, 4, s1);

  // reference greedy decode
  NoGradGuard ng;
  std::vector<int> ids = {cfg.bos_id(), 1, 4};
  std::vector<int> expect;
  for (int step = 0; step < 4; ++step) {
    Tensor logits = pm.logit_rows(ids);
    const int last = logits.rows() - 1;
    int arg = 0;
    for (int j = 1; j < logits.cols(); ++j)
      if (logits.at(last, j) > logits.at(last, arg)) arg = j;
    expect.push_back(arg);
    ids.push_back(arg);
    if (arg == cfg.eos_id()) break;
  }
  if (expect.empty() || expect.back() != cfg.eos_id())
    expect.push_back(cfg.eos_id());
  CHECK(greedy.response == expect);
}

TEST_CASE("policy sample: fixed seed reproduces, temperature must be positive") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(28));
  std::vector<int> prompt = {2, 3};
  Rng a(7), b(7);
  auto r1 = pm.sample(prompt, 1.0, 4, a);
  auto r2 = pm.sample(prompt, 1.0, 4, b);
  CHECK(r1.response == r2.response);
  CHECK(r1.logprobs == r2.logprobs);
  Rng c(8);
  CHECK_THROWS_AS(pm.sample(prompt, 0.0, 4, c), std::domain_error);
}

TEST_CASE("policy sample: first-token frequencies match softmax within 3 sigma") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(29));
  Rng hr(30);
  for (auto& x : pm.lm_head().raw_data()) x = hr.gaussian(0, 0.8);
  std::vector<int> prompt = {1, 2};

  // exact first-step distribution
  NoGradGuard ng;
  std::vector<int> ids = {cfg.bos_id(), 1, 2};
  Tensor logits = pm.logit_rows(ids);
  const int last = logits.rows() - 1;
  std::vector<double> p(static_cast<std::size_t>(cfg.vocab_size));
  double mx = logits.at(last, 0);
  for (int j = 0; j < cfg.vocab_size; ++j) mx = std::max(mx, logits.at(last, j));
  double se = 0.0;
  for (int j = 0; j < cfg.vocab_size; ++j) {
    p[static_cast<std::size_t>(j)] = std::exp(logits.at(last, j) - mx);
    se += p[static_cast<std::size_t>(j)];
  }
  for (auto& v : p) v /= se;

  const int n = 50000;
  std::vector<int> counts(static_cast<std::size_t>(cfg.vocab_size), 0);
  Rng rng(314159);
  for (int i = 0; i < n; ++i) {
    auto s = pm.sample(prompt, 1.0, 1, rng);
    ++counts[static_cast<std::size_t>(s.response.front())];
  }
  for (int j = 0; j < cfg.vocab_size; ++j) {
    const double mu = n * p[static_cast<std::size_t>(j)];
    const double sd = std::sqrt(
        n * p[static_cast<std::size_t>(j)] * (1 - p[static_cast<std::size_t>(j)]));
    CHECK(std::abs(counts[static_cast<std::size_t>(j)] - mu) <= 3.0 * sd + 1.0);
  }
}

TEST_CASE("policy sample: cap truncation appends EOS and sets the flag") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(31));  // zero head: uniform over 8 tokens
  std::vector<int> prompt = {1, 2};
  bool saw_truncated = false, saw_natural = false;
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    Rng rng(seed);
    auto s = pm.sample(prompt, 1.0, 2, rng);
    REQUIRE(s.response.back() == cfg.eos_id());
    REQUIRE(s.logprobs.size() == s.response.size());
    if (s.truncated) {
      saw_truncated = true;
      CHECK(s.response.size() == 3);  // cap tokens plus the forced EOS
      CHECK(s.response[0] != cfg.eos_id());
      CHECK(s.response[1] != cfg.eos_id());
    } else {
      saw_natural = true;
    }
  }
  CHECK(saw_truncated);
  CHECK(saw_natural);
}

TEST_CASE("reward: zero head scores zero everywhere") {
  BackboneConfig cfg = tiny_config();
  Backbone bb(cfg, Rng(40));
  Tensor head = Tensor::zeros({cfg.embed_dim, 1});
  std::vector<int> prompt = {1, 2};
  std::vector<int> response = {3, cfg.eos_id()};
  NoGradGuard ng;
  CHECK(reward_forward(bb, nullptr, head, prompt, response).value() == 0.0);
}

TEST_CASE("reward: invariant to padding beyond EOS") {
  BackboneConfig cfg = tiny_config();
  Backbone bb(cfg, Rng(41));
  Rng hr(42);
  Tensor head = Tensor::gaussian({cfg.embed_dim, 1}, hr, 0, 1);
  std::vector<int> prompt = {1, 2};
  std::vector<int> response = {3, cfg.eos_id()};
  std::vector<int> padded = {3, cfg.eos_id(), 0, 5};
  NoGradGuard ng;
  const double a = reward_forward(bb, nullptr, head, prompt, response).value();
  const double b = reward_forward(bb, nullptr, head, prompt, padded).value();
  CHECK(a == b);
}

TEST_CASE("reward: gradient w.r.t. a LoRA A entry matches finite differences") {
  BackboneConfig cfg = tiny_config();
  Backbone bb(cfg, Rng(43));
  bb.set_trainable(false);
  Rng hr(44);
  Tensor head = Tensor::gaussian({cfg.embed_dim, 1}, hr, 0, 0.7);
  LoraUnit q = LoraUnit::create("layer0.attn.wq", cfg.embed_dim, cfg.embed_dim,
                                2, Rng(45), 0.1);
  for (auto& x : q.b.raw_data()) x = hr.gaussian(0, 0.3);
  LoraMap lora{{q.target, &q}};
  std::vector<int> prompt = {1, 2};
  std::vector<int> response = {3, 4, cfg.eos_id()};

  Tensor r = reward_forward(bb, &lora, head, prompt, response);
  backward(r);
  std::vector<double> analytic(q.a.grad().begin(), q.a.grad().end());
  std::vector<double> a0(q.a.data().begin(), q.a.data().end());

  auto f = [&](std::span<const double> x) {
    NoGradGuard ng;
    std::copy(x.begin(), x.end(), q.a.raw_data().begin());
    const double v = reward_forward(bb, &lora, head, prompt, response).value();
    return v;
  };
  const double err = oracles::max_fd_rel_error(f, a0, analytic);
  std::copy(a0.begin(), a0.end(), q.a.raw_data().begin());
  CHECK(err < 1e-4);
}

TEST_CASE("backbone: causality under suffix perturbation") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(46));
  Rng hr(47);
  for (auto& x : pm.lm_head().raw_data()) x = hr.gaussian(0, 0.5);
  NoGradGuard ng;
  std::vector<int> ids = {cfg.bos_id(), 1, 2, 3, 4, 5};
  Tensor base = pm.logit_rows(ids);
  std::vector<int> perturbed = ids;
  perturbed[4] = 0;  // position 4 changed; rows 0..3 must be bit-identical
  Tensor mod = pm.logit_rows(perturbed);
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < base.cols(); ++j)
      CHECK(base.at(i, j) == mod.at(i, j));
}

TEST_CASE("checkpoint: round-trip is byte-identical and value-exact") {
  BackboneConfig cfg = tiny_config();
  PolicyModel pm(cfg, Rng(48));
  Rng hr(49);
  for (auto& x : pm.lm_head().raw_data()) x = hr.gaussian(0, 0.5);

  const std::string p1 = "test_model_ckpt_a.bin";
  const std::string p2 = "test_model_ckpt_b.bin";
  save_checkpoint(p1, pm.named_parameters());

  PolicyModel other(cfg, Rng(999));
  auto params = other.named_parameters();
  load_checkpoint_into(p1, params);
  save_checkpoint(p2, other.named_parameters());

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), {});
  std::string b2((std::istreambuf_iterator<char>(f2)), {});
  CHECK(b1 == b2);
  CHECK(!b1.empty());
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint: corrupt magic and truncation are rejected") {
  const std::string path = "test_model_ckpt_bad.bin";
  {
    std::ofstream f(path, std::ios::binary);
    f << "NOPE1234";
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "UPRL";  // truncated before version
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());
}
