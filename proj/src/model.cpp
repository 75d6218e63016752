// SPDX-License-Identifier: Apache-2.0
#include "uprl/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace uprl {

namespace {

constexpr double kInitStd = 0.08;

void check_ids(std::span<const int> ids, int vocab, const char* what) {
  for (int id : ids)
    if (id < 0 || id >= vocab)
      throw std::logic_error(std::string(what) + ": token id " +
                             std::to_string(id) + " out of range [0," +
                             std::to_string(vocab) + ")");
}

Tensor linear_adapted(const Tensor& x, const Tensor& w, const LoraUnit* u) {
  Tensor out = matmul(x, w);
  if (u)
    out = add(out, matmul(matmul(x, transpose(u->a)), transpose(u->b)));
  return out;
}

}  // namespace

void BackboneConfig::validate() const {
  if (vocab_size < 3)
    throw std::invalid_argument("backbone: vocab_size must cover BOS and EOS");
  if (embed_dim <= 0 || n_heads <= 0 || ffn_dim <= 0 || n_layers <= 0 ||
      max_seq_len < 3)
    throw std::invalid_argument("backbone: non-positive dimension");
  if (embed_dim % n_heads != 0)
    throw std::invalid_argument("backbone: embed_dim must divide by n_heads");
}

LoraUnit LoraUnit::create(std::string target, int d_in, int d_out, int rank,
                          Rng rng, double a_stddev) {
  if (rank <= 0 || rank > std::min(d_in, d_out))
    throw std::invalid_argument("lora: rank " + std::to_string(rank) +
                                " invalid for " + std::to_string(d_in) + "x" +
                                std::to_string(d_out));
  LoraUnit u;
  u.target = std::move(target);
  u.rank = rank;
  u.a = Tensor::gaussian({rank, d_in}, rng, 0.0, a_stddev, true);
  u.b = Tensor::zeros({d_out, rank}, true);
  return u;
}

Tensor lora_forward(const Tensor& w0, const LoraUnit& unit, const Tensor& z_in) {
  if (w0.cols() != z_in.rows() || unit.a.cols() != z_in.rows() ||
      unit.b.rows() != w0.rows())
    throw std::invalid_argument(
        "lora_forward: inconsistent shapes w0=" + shape_str(w0.shape()) +
        " a=" + shape_str(unit.a.shape()) + " b=" + shape_str(unit.b.shape()) +
        " z=" + shape_str(z_in.shape()));
  return add(matmul(w0, z_in), matmul(unit.b, matmul(unit.a, z_in)));
}

Backbone::Backbone(const BackboneConfig& cfg, Rng rng) : cfg_(cfg) {
  cfg.validate();
  const int d = cfg.embed_dim;
  tok_embed_ = Tensor::gaussian({cfg.vocab_size, d}, rng, 0.0, kInitStd, true);
  pos_embed_ = Tensor::gaussian({cfg.max_seq_len, d}, rng, 0.0, kInitStd, true);
  layers_.reserve(static_cast<std::size_t>(cfg.n_layers));
  for (int i = 0; i < cfg.n_layers; ++i) {
    Layer l;
    l.wq = Tensor::gaussian({d, d}, rng, 0.0, kInitStd, true);
    l.wk = Tensor::gaussian({d, d}, rng, 0.0, kInitStd, true);
    l.wv = Tensor::gaussian({d, d}, rng, 0.0, kInitStd, true);
    l.wo = Tensor::gaussian({d, d}, rng, 0.0, kInitStd, true);
    l.w1 = Tensor::gaussian({d, cfg.ffn_dim}, rng, 0.0, kInitStd, true);
    l.b1 = Tensor::zeros({cfg.ffn_dim}, true);
    l.w2 = Tensor::gaussian({cfg.ffn_dim, d}, rng, 0.0, kInitStd, true);
    l.b2 = Tensor::zeros({d}, true);
    layers_.push_back(std::move(l));
  }
}

Tensor Backbone::hidden_rows(std::span<const int> ids,
                             const LoraMap* lora) const {
  if (ids.empty()) throw std::logic_error("backbone: empty sequence");
  if (static_cast<int>(ids.size()) > cfg_.max_seq_len)
    throw std::logic_error("backbone: sequence length " +
                           std::to_string(ids.size()) + " exceeds max " +
                           std::to_string(cfg_.max_seq_len));
  check_ids(ids, cfg_.vocab_size, "backbone");

  const int L = static_cast<int>(ids.size());
  const int dh = cfg_.embed_dim / cfg_.n_heads;
  auto adapter = [&](const std::string& name) -> const LoraUnit* {
    if (!lora) return nullptr;
    auto it = lora->find(name);
    return it == lora->end() ? nullptr : it->second;
  };

  Tensor x = add(embedding_rows(tok_embed_, ids), slice_rows(pos_embed_, 0, L));
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const Layer& l = layers_[li];
    const std::string prefix = "layer" + std::to_string(li) + ".attn.";
    Tensor xn = rmsnorm_rows(x);
    Tensor q = linear_adapted(xn, l.wq, adapter(prefix + "wq"));
    Tensor k = matmul(xn, l.wk);
    Tensor v = linear_adapted(xn, l.wv, adapter(prefix + "wv"));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(cfg_.n_heads));
    for (int h = 0; h < cfg_.n_heads; ++h) {
      Tensor qh = slice_cols(q, h * dh, dh);
      Tensor kh = slice_cols(k, h * dh, dh);
      Tensor vh = slice_cols(v, h * dh, dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(dh));
      Tensor probs = softmax_rows(causal_mask(scores));
      heads.push_back(matmul(probs, vh));
    }
    x = add(x, matmul(concat_cols(heads), l.wo));
    Tensor h1 = relu(add_bias_row(matmul(rmsnorm_rows(x), l.w1), l.b1));
    x = add(x, add_bias_row(matmul(h1, l.w2), l.b2));
  }
  return rmsnorm_rows(x);
}

NamedTensors Backbone::named_parameters() {
  NamedTensors out;
  out.emplace_back("tok_embed", tok_embed_);
  out.emplace_back("pos_embed", pos_embed_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    out.emplace_back(p + "attn.wq", layers_[i].wq);
    out.emplace_back(p + "attn.wk", layers_[i].wk);
    out.emplace_back(p + "attn.wv", layers_[i].wv);
    out.emplace_back(p + "attn.wo", layers_[i].wo);
    out.emplace_back(p + "mlp.w1", layers_[i].w1);
    out.emplace_back(p + "mlp.b1", layers_[i].b1);
    out.emplace_back(p + "mlp.w2", layers_[i].w2);
    out.emplace_back(p + "mlp.b2", layers_[i].b2);
  }
  return out;
}

std::vector<Tensor> Backbone::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void Backbone::set_trainable(bool on) {
  for (auto& [name, t] : named_parameters()) t.set_requires_grad(on);
}

Backbone Backbone::clone() const {
  Backbone out;
  out.cfg_ = cfg_;
  out.tok_embed_ = tok_embed_.clone_detached(tok_embed_.requires_grad());
  out.pos_embed_ = pos_embed_.clone_detached(pos_embed_.requires_grad());
  for (const Layer& l : layers_) {
    Layer c;
    c.wq = l.wq.clone_detached(l.wq.requires_grad());
    c.wk = l.wk.clone_detached(l.wk.requires_grad());
    c.wv = l.wv.clone_detached(l.wv.requires_grad());
    c.wo = l.wo.clone_detached(l.wo.requires_grad());
    c.w1 = l.w1.clone_detached(l.w1.requires_grad());
    c.b1 = l.b1.clone_detached(l.b1.requires_grad());
    c.w2 = l.w2.clone_detached(l.w2.requires_grad());
    c.b2 = l.b2.clone_detached(l.b2.requires_grad());
    out.layers_.push_back(std::move(c));
  }
  return out;
}

std::vector<std::string> Backbone::lora_targets() const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    out.push_back("layer" + std::to_string(i) + ".attn.wq");
    out.push_back("layer" + std::to_string(i) + ".attn.wv");
  }
  return out;
}

std::pair<int, int> Backbone::target_dims(const std::string& target) const {
  for (const auto& t : lora_targets())
    if (t == target) return {cfg_.embed_dim, cfg_.embed_dim};
  throw std::logic_error("backbone: unknown adapter target '" + target + "'");
}

// ---- policy ---------------------------------------------------------------

PolicyModel::PolicyModel(const BackboneConfig& cfg, Rng rng)
    : backbone_(cfg, rng.derived("backbone")),
      lm_head_(Tensor::zeros({cfg.embed_dim, cfg.vocab_size}, true)) {}

Tensor PolicyModel::logit_rows(std::span<const int> ids) const {
  return matmul(backbone_.hidden_rows(ids), lm_head_);
}

namespace {
std::vector<int> assemble_ids(const BackboneConfig& cfg,
                              std::span<const int> prompt,
                              std::span<const int> response) {
  if (response.empty() || response.back() != cfg.eos_id())
    throw std::logic_error("policy: response must end with EOS");
  if (1 + prompt.size() + response.size() >
      static_cast<std::size_t>(cfg.max_seq_len))
    throw std::logic_error("policy: prompt+response exceed max_seq_len");
  std::vector<int> ids;
  ids.reserve(1 + prompt.size() + response.size());
  ids.push_back(cfg.bos_id());
  ids.insert(ids.end(), prompt.begin(), prompt.end());
  ids.insert(ids.end(), response.begin(), response.end());
  return ids;
}
}  // namespace

Tensor PolicyModel::response_logprob_rows(std::span<const int> prompt,
                                          std::span<const int> response) const {
  const auto ids = assemble_ids(config(), prompt, response);
  Tensor logits = logit_rows(ids);
  const int p = static_cast<int>(prompt.size());
  const int t = static_cast<int>(response.size());
  return log_softmax_rows(slice_rows(logits, p, t));
}

Tensor PolicyModel::response_token_logprobs(
    std::span<const int> prompt, std::span<const int> response) const {
  Tensor rows = response_logprob_rows(prompt, response);
  std::vector<int> cols(response.begin(), response.end());
  return gather_coords(rows, cols);
}

std::vector<double> PolicyModel::token_logprobs(
    std::span<const int> prompt, std::span<const int> response) const {
  NoGradGuard ng;
  Tensor lp = response_token_logprobs(prompt, response);
  return {lp.data().begin(), lp.data().end()};
}

int sample_categorical(std::span<const double> logits, double temperature,
                       Rng& rng) {
  if (!(temperature > 0.0))
    throw std::domain_error("sample: temperature must be positive");
  double mx = logits[0] / temperature;
  for (double v : logits) mx = std::max(mx, v / temperature);
  double total = 0.0;
  std::vector<double> w(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    w[i] = std::exp(logits[i] / temperature - mx);
    total += w[i];
  }
  const double u = rng.uniform01() * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    acc += w[i];
    if (u < acc) return static_cast<int>(i);
  }
  return static_cast<int>(w.size()) - 1;
}

SampleResult PolicyModel::sample(std::span<const int> prompt,
                                 double temperature, int cap, Rng& rng) const {
  if (!(temperature > 0.0))
    throw std::domain_error("sample: temperature must be positive");
  if (cap < 0) throw std::logic_error("sample: negative response cap");
  const auto& cfg = config();
  check_ids(prompt, cfg.vocab_size, "sample");

  NoGradGuard ng;
  std::vector<int> ids;
  ids.push_back(cfg.bos_id());
  ids.insert(ids.end(), prompt.begin(), prompt.end());

  SampleResult out;
  auto last_row_logits = [&]() {
    Tensor logits = logit_rows(ids);
    const int last = logits.rows() - 1;
    std::vector<double> row(static_cast<std::size_t>(logits.cols()));
    for (int j = 0; j < logits.cols(); ++j) row[static_cast<std::size_t>(j)] = logits.at(last, j);
    return row;
  };
  auto untempered_logprob = [&](const std::vector<double>& row, int token) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double se = 0.0;
    for (double v : row) se += std::exp(v - mx);
    return (row[static_cast<std::size_t>(token)] - mx) - std::log(se);
  };

  for (int step = 0; step < cap; ++step) {
    const auto row = last_row_logits();
    const int token = sample_categorical(row, temperature, rng);
    out.response.push_back(token);
    out.logprobs.push_back(untempered_logprob(row, token));
    ids.push_back(token);
    if (token == cfg.eos_id()) return out;
  }
  // cap reached without EOS: append it and record its model log-prob
  const auto row = last_row_logits();
  out.response.push_back(cfg.eos_id());
  out.logprobs.push_back(untempered_logprob(row, cfg.eos_id()));
  out.truncated = true;
  return out;
}

NamedTensors PolicyModel::named_parameters() {
  NamedTensors out = backbone_.named_parameters();
  out.emplace_back("lm_head", lm_head_);
  return out;
}

std::vector<Tensor> PolicyModel::parameters() {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

void PolicyModel::set_trainable(bool on) {
  backbone_.set_trainable(on);
  lm_head_.set_requires_grad(on);
}

PolicyModel PolicyModel::clone() const {
  return PolicyModel(backbone_.clone(),
                     lm_head_.clone_detached(lm_head_.requires_grad()));
}

// ---- reward ---------------------------------------------------------------

Tensor reward_forward(const Backbone& backbone, const LoraMap* lora,
                      const Tensor& head, std::span<const int> prompt,
                      std::span<const int> response) {
  const auto& cfg = backbone.config();
  if (head.shape() != Shape{cfg.embed_dim, 1})
    throw std::invalid_argument("reward: head must be [" +
                                std::to_string(cfg.embed_dim) + ",1], got " +
                                shape_str(head.shape()));
  int eos_pos = -1;
  for (std::size_t i = 0; i < response.size(); ++i)
    if (response[i] == cfg.eos_id()) {
      eos_pos = static_cast<int>(i);
      break;
    }
  if (eos_pos < 0)
    throw std::logic_error("reward: response does not contain EOS");
  if (1 + prompt.size() + response.size() >
      static_cast<std::size_t>(cfg.max_seq_len))
    throw std::logic_error("reward: prompt+response exceed max_seq_len");

  std::vector<int> ids;
  ids.reserve(1 + prompt.size() + response.size());
  ids.push_back(cfg.bos_id());
  ids.insert(ids.end(), prompt.begin(), prompt.end());
  ids.insert(ids.end(), response.begin(), response.end());

  Tensor hidden = backbone.hidden_rows(ids, lora);
  const int pos = 1 + static_cast<int>(prompt.size()) + eos_pos;
  Tensor h_eos = slice_rows(hidden, pos, 1);  // [1, d]
  return sum(matmul(h_eos, head));            // scalar
}

}  // namespace uprl
