// SPDX-License-Identifier: Apache-2.0
//
// Tiny causal autoregressive backbone plus LoRA adapter units, a language
// head (policy) and scalar value heads (reward). Hidden states are row
// matrices [seq, d]; weights are stored [d_in, d_out].
#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "uprl/checkpoint.hpp"
#include "uprl/rng.hpp"
#include "uprl/tensor.hpp"

namespace uprl {

struct BackboneConfig {
  int vocab_size{18};  // 16 content tokens + BOS + EOS
  int embed_dim{32};
  int n_heads{2};
  int ffn_dim{64};
  int n_layers{1};
  int max_seq_len{20};

  int bos_id() const { return vocab_size - 2; }
  int eos_id() const { return vocab_size - 1; }
  void validate() const;  // throws std::invalid_argument
};

// One low-rank adapter attached to a named base matrix. A is Gaussian at
// construction, B starts exactly zero, so a fresh unit is a no-op.
struct LoraUnit {
  std::string target;
  int rank{4};
  Tensor a;  // [rank, d_in]
  Tensor b;  // [d_out, rank]

  static LoraUnit create(std::string target, int d_in, int d_out, int rank,
                         Rng rng, double a_stddev = 0.02);
};

// z_out = W0 z_in + B (A z_in), column convention:
// w0 [d_out, d_in], z_in [d_in, k]. Gradients flow into A and B only when
// W0 is frozen by the caller.
Tensor lora_forward(const Tensor& w0, const LoraUnit& unit, const Tensor& z_in);

using LoraMap = std::map<std::string, const LoraUnit*>;

class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, Rng rng);

  // Final hidden states [len(ids), d]; `lora` optionally adapts the
  // attention query/value projections by target name.
  Tensor hidden_rows(std::span<const int> ids,
                     const LoraMap* lora = nullptr) const;

  const BackboneConfig& config() const { return cfg_; }
  NamedTensors named_parameters();
  std::vector<Tensor> parameters();
  void set_trainable(bool on);
  Backbone clone() const;

  // Adapted matrices, in fixed order: layer{i}.attn.wq, layer{i}.attn.wv.
  std::vector<std::string> lora_targets() const;
  // (d_in, d_out) of a target, for LoraUnit construction.
  std::pair<int, int> target_dims(const std::string& target) const;

 private:
  Backbone() = default;
  struct Layer {
    Tensor wq, wk, wv, wo;  // [d, d]
    Tensor w1, b1, w2, b2;  // [d, ffn], [ffn], [ffn, d], [d]
  };
  BackboneConfig cfg_;
  Tensor tok_embed_;  // [vocab, d]
  Tensor pos_embed_;  // [max_seq, d]
  std::vector<Layer> layers_;
};

struct SampleResult {
  std::vector<int> response;     // ends with EOS
  std::vector<double> logprobs;  // un-tempered log-probs, one per token
  bool truncated{false};         // cap hit, EOS appended
};

class PolicyModel {
 public:
  PolicyModel(const BackboneConfig& cfg, Rng rng);  // lm_head starts zero

  // Next-token logits at every position, [len(ids), vocab].
  Tensor logit_rows(std::span<const int> ids) const;

  // Log-probability rows for each response token including EOS, [T, vocab].
  Tensor response_logprob_rows(std::span<const int> prompt,
                               std::span<const int> response) const;
  // log pi(y_t | x, y_<t) per response token, [T]; sum is log pi(y|x).
  Tensor response_token_logprobs(std::span<const int> prompt,
                                 std::span<const int> response) const;
  std::vector<double> token_logprobs(std::span<const int> prompt,
                                     std::span<const int> response) const;

  // Ancestral sampling until EOS or `cap` content tokens (then EOS is
  // appended and the sample flagged). Temperature shapes sampling only;
  // returned log-probs are from the un-tempered distribution.
  SampleResult sample(std::span<const int> prompt, double temperature, int cap,
                      Rng& rng) const;

  const BackboneConfig& config() const { return backbone_.config(); }
  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  Tensor lm_head() { return lm_head_; }
  NamedTensors named_parameters();
  std::vector<Tensor> parameters();
  void set_trainable(bool on);
  PolicyModel clone() const;

 private:
  explicit PolicyModel(Backbone b, Tensor head)
      : backbone_(std::move(b)), lm_head_(std::move(head)) {}
  Backbone backbone_;
  Tensor lm_head_;  // [d, vocab]
};

// Scalar reward read through `head` [d, 1] at the first-EOS hidden state of
// the response. Tokens after that EOS cannot affect the value (causality).
Tensor reward_forward(const Backbone& backbone, const LoraMap* lora,
                      const Tensor& head, std::span<const int> prompt,
                      std::span<const int> response);

// Draws one index from logits/temperature; log-prob bookkeeping is the
// caller's (sampling and scoring distributions differ when temperature != 1).
int sample_categorical(std::span<const double> logits, double temperature,
                       Rng& rng);

}  // namespace uprl
