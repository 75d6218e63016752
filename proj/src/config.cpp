// SPDX-License-Identifier: Apache-2.0
#include "uprl/config.hpp"

#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace uprl {

namespace {

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Field {
  ExperimentConfig::KeyInfo info;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&)> set;
};

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const int out = std::stoi(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" +
                      v + "'");
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v +
                      "'");
  }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const auto out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key +
                      "' expects an unsigned integer, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "0" || v == "false") return false;
  if (v == "1" || v == "true") return true;
  throw ConfigError("config: key '" + key + "' expects 0/1, got '" + v + "'");
}

#define FIELD_INT(member, doc)                                              \
  Field{{#member, "int", doc},                                              \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }, \
        [](ExperimentConfig& c, const std::string& v) {                     \
          c.member = parse_int(#member, v);                                 \
        }}
#define FIELD_DOUBLE(member, doc)                                      \
  Field{{#member, "float", doc},                                       \
        [](const ExperimentConfig& c) { return fmt_double(c.member); }, \
        [](ExperimentConfig& c, const std::string& v) {                \
          c.member = parse_double(#member, v);                         \
        }}
#define FIELD_STRING(member, doc)                            \
  Field{{#member, "string", doc},                            \
        [](const ExperimentConfig& c) { return c.member; },  \
        [](ExperimentConfig& c, const std::string& v) { c.member = v; }}
#define FIELD_U64(member, doc)                                              \
  Field{{#member, "u64", doc},                                              \
        [](const ExperimentConfig& c) { return std::to_string(c.member); }, \
        [](ExperimentConfig& c, const std::string& v) {                     \
          c.member = parse_u64(#member, v);                                 \
        }}
#define FIELD_BOOL(member, doc)                                         \
  Field{{#member, "bool", doc},                                         \
        [](const ExperimentConfig& c) {                                 \
          return std::string(c.member ? "1" : "0");                     \
        },                                                              \
        [](ExperimentConfig& c, const std::string& v) {                 \
          c.member = parse_bool(#member, v);                            \
        }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      FIELD_STRING(out_dir, "output directory for all artifacts"),
      FIELD_U64(seed, "master seed for the data, sft and reward-model stages"),
      FIELD_STRING(seeds, "comma-separated rl seeds for the experiment command"),
      FIELD_INT(content_vocab, "number of content tokens in the task"),
      FIELD_INT(prompt_len, "tokens per prompt"),
      FIELD_INT(response_cap, "max response tokens before EOS is forced"),
      FIELD_DOUBLE(gold_match_bonus, "gold reward per matched prompt token"),
      FIELD_DOUBLE(gold_len_penalty, "gold penalty per token beyond threshold"),
      FIELD_INT(gold_len_threshold, "response length where the penalty starts"),
      FIELD_DOUBLE(gold_repeat_penalty, "gold penalty per immediate repetition"),
      FIELD_INT(prompt_budget, "unique prompts split 20/40/40 across stages"),
      FIELD_DOUBLE(sft_noise, "scripted-policy noise for SFT demonstrations"),
      FIELD_DOUBLE(pref_noise, "scripted-policy noise for preference pairs"),
      FIELD_INT(embed_dim, "backbone hidden width"),
      FIELD_INT(n_heads, "attention heads"),
      FIELD_INT(ffn_dim, "feedforward width"),
      FIELD_INT(n_layers, "transformer layers"),
      FIELD_INT(max_seq_len, "maximum sequence length incl BOS and EOS"),
      FIELD_INT(sft_epochs, "supervised fine-tuning epochs"),
      FIELD_INT(sft_batch, "SFT batch size"),
      FIELD_DOUBLE(sft_lr, "SFT Adam learning rate"),
      FIELD_INT(rm_epochs, "reward-model training epochs"),
      FIELD_INT(rm_batch, "reward-model batch size"),
      FIELD_DOUBLE(rm_lr, "reward-model Adam learning rate"),
      FIELD_DOUBLE(lambda, "NNM diversity weight in the RM loss"),
      FIELD_INT(members, "ensemble members"),
      FIELD_INT(lora_rank, "LoRA rank"),
      FIELD_DOUBLE(lora_a_std, "stddev of the Gaussian LoRA A initialization"),
      FIELD_INT(rl_steps, "RL optimization steps"),
      FIELD_INT(rl_batch, "prompts per RL batch"),
      FIELD_INT(samples_per_prompt, "rollouts per prompt per step"),
      FIELD_DOUBLE(temperature, "sampling temperature during rollouts"),
      FIELD_DOUBLE(rl_lr, "RL Adam learning rate"),
      FIELD_DOUBLE(beta1, "KL regularization weight"),
      FIELD_DOUBLE(beta2, "uncertainty penalty weight; 0 is plain RLHF"),
      FIELD_DOUBLE(baseline_decay, "EMA decay of the reward baseline"),
      FIELD_BOOL(clip_enabled, "use the clipped-ratio update variant"),
      FIELD_DOUBLE(clip_epsilon, "clip range for the ratio variant"),
      FIELD_INT(checkpoint_every, "steps between saved rl checkpoints"),
      FIELD_INT(eval_prompts, "prompts used by evaluation rollouts"),
      FIELD_INT(eval_samples, "samples per prompt in evaluation rollouts"),
  };
  return table;
}

#undef FIELD_INT
#undef FIELD_DOUBLE
#undef FIELD_STRING
#undef FIELD_U64
#undef FIELD_BOOL

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.info.name == key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

const std::vector<ExperimentConfig::KeyInfo>& ExperimentConfig::keys() {
  static const std::vector<KeyInfo> infos = [] {
    std::vector<KeyInfo> out;
    for (const auto& f : fields()) out.push_back(f.info);
    return out;
  }();
  return infos;
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  find_field(key).set(*this, value);
}

std::string ExperimentConfig::get(const std::string& key) const {
  return find_field(key).get(*this);
}

void ExperimentConfig::apply_line(const std::string& line) {
  std::string trimmed = line;
  const auto hash = trimmed.find('#');
  if (hash != std::string::npos) trimmed.resize(hash);
  const auto begin = trimmed.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return;
  const auto end = trimmed.find_last_not_of(" \t\r\n");
  trimmed = trimmed.substr(begin, end - begin + 1);

  const auto eq = trimmed.find('=');
  if (eq == std::string::npos)
    throw ConfigError("config: expected key=value, got '" + trimmed + "'");
  auto strip = [](std::string s) {
    const auto b = s.find_first_not_of(" \t");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t");
    return s.substr(b, e - b + 1);
  };
  set(strip(trimmed.substr(0, eq)), strip(trimmed.substr(eq + 1)));
}

void ExperimentConfig::load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::string line;
  while (std::getline(f, line)) apply_line(line);
}

std::string ExperimentConfig::serialize() const {
  std::string out;
  for (const auto& f : fields()) {
    out += f.info.name;
    out += "=";
    out += f.get(*this);
    out += "\n";
  }
  return out;
}

TaskSpec ExperimentConfig::task() const {
  TaskSpec t;
  t.content_vocab = content_vocab;
  t.prompt_len = prompt_len;
  t.response_cap = response_cap;
  t.match_bonus = gold_match_bonus;
  t.len_penalty = gold_len_penalty;
  t.len_threshold = gold_len_threshold;
  t.repeat_penalty = gold_repeat_penalty;
  return t;
}

BackboneConfig ExperimentConfig::backbone() const {
  BackboneConfig b;
  b.vocab_size = content_vocab + 2;
  b.embed_dim = embed_dim;
  b.n_heads = n_heads;
  b.ffn_dim = ffn_dim;
  b.n_layers = n_layers;
  b.max_seq_len = max_seq_len;
  return b;
}

SftConfig ExperimentConfig::sft() const {
  return {sft_epochs, sft_batch, sft_lr, Rng(seed).derived("sft").next_u64()};
}

RmTrainConfig ExperimentConfig::rm() const {
  return {rm_epochs, rm_batch,  rm_lr,      lambda,
          members,   lora_rank, lora_a_std, Rng(seed).derived("rm").next_u64()};
}

RlConfig ExperimentConfig::rl() const {
  RlConfig r;
  r.steps = rl_steps;
  r.prompts_per_batch = rl_batch;
  r.samples_per_prompt = samples_per_prompt;
  r.temperature = temperature;
  r.lr = rl_lr;
  r.beta1 = beta1;
  r.beta2 = beta2;
  r.baseline_decay = baseline_decay;
  r.clip_enabled = clip_enabled;
  r.clip_epsilon = clip_epsilon;
  r.response_cap = response_cap;
  r.seed = seed;  // standalone rl; the experiment overrides per run
  return r;
}

std::vector<std::uint64_t> ExperimentConfig::seed_list() const {
  std::vector<std::uint64_t> out;
  std::stringstream ss(seeds);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(parse_u64("seeds", item));
  if (out.empty()) throw ConfigError("config: 'seeds' must list at least one seed");
  return out;
}

void ExperimentConfig::validate() const {
  backbone().validate();
  rl().validate();
  if (prompt_len + response_cap + 2 > max_seq_len)
    throw ConfigError(
        "config: prompt_len + response_cap + 2 must fit in max_seq_len");
  if (content_vocab < 2) throw ConfigError("config: content_vocab too small");
  if (prompt_budget < 100) throw ConfigError("config: prompt_budget below 100");
  if (sft_noise < 0 || sft_noise > 1 || pref_noise < 0 || pref_noise > 1)
    throw ConfigError("config: noise levels must be in [0,1]");
  if (members < 2) throw ConfigError("config: members must be at least 2");
  if (lambda < 0) throw ConfigError("config: lambda must be non-negative");
  if (lora_rank < 1 || lora_rank > embed_dim)
    throw ConfigError("config: lora_rank out of range");
  if (sft_epochs < 0 || rm_epochs < 0 || sft_batch < 1 || rm_batch < 1)
    throw ConfigError("config: bad epoch/batch values");
  if (checkpoint_every < 1) throw ConfigError("config: checkpoint_every < 1");
  if (eval_prompts < 1 || eval_samples < 1)
    throw ConfigError("config: evaluation needs prompts and samples");
  seed_list();
}

}  // namespace uprl
