// SPDX-License-Identifier: Apache-2.0
#include "uprl/synthdata.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

namespace uprl {

double gold_reward(const TaskSpec& spec, std::span<const int> prompt,
                   std::span<const int> response) {
  std::size_t len = 0;
  while (len < response.size() && response[len] != spec.eos_id()) ++len;
  if (len == response.size())
    throw std::logic_error("gold_reward: response does not contain EOS");

  // multiset match: each prompt token occurrence creditable once
  std::map<int, int> budget;
  for (int t : prompt) ++budget[t];
  int matches = 0;
  for (std::size_t i = 0; i < len; ++i) {
    auto it = budget.find(response[i]);
    if (it != budget.end() && it->second > 0) {
      --it->second;
      ++matches;
    }
  }

  int repeats = 0;
  for (std::size_t i = 1; i < len; ++i)
    if (response[i] == response[i - 1]) ++repeats;

  const double over =
      std::max(0, static_cast<int>(len) - spec.len_threshold);
  return spec.match_bonus * matches - spec.len_penalty * over -
         spec.repeat_penalty * repeats;
}

std::vector<int> scripted_reference_policy(const TaskSpec& spec,
                                           std::span<const int> prompt,
                                           double noise, Rng rng) {
  if (noise < 0.0 || noise > 1.0)
    throw std::domain_error("scripted policy: noise must be in [0,1]");
  const int p = static_cast<int>(prompt.size());

  // target length 4..6 clamped to what the prompt allows (at most one reuse)
  const int lo = std::min(4, p);
  const int hi = std::min(6, p + 1);
  const int len = lo + static_cast<int>(rng.uniform_below(
                           static_cast<std::uint32_t>(hi - lo + 1)));

  std::vector<int> order(static_cast<std::size_t>(p));
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);

  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(len) + 1);
  for (int i = 0; i < std::min(len, p); ++i)
    out.push_back(prompt[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])]);
  if (len > p && p > 0) {
    // one extra prompt token, chosen to avoid an immediate repeat if possible
    int extra = prompt[rng.uniform_below(static_cast<std::uint32_t>(p))];
    for (int tries = 0; tries < 8 && extra == out.back(); ++tries)
      extra = prompt[rng.uniform_below(static_cast<std::uint32_t>(p))];
    out.push_back(extra);
  }

  for (auto& t : out)
    if (rng.uniform01() < noise)
      t = static_cast<int>(
          rng.uniform_below(static_cast<std::uint32_t>(spec.content_vocab)));

  out.push_back(spec.eos_id());
  return out;
}

DatasetBundle build_bundle(const TaskSpec& spec, int prompt_budget,
                           std::uint64_t seed, double sft_noise,
                           double pref_noise) {
  if (prompt_budget < 100)
    throw std::invalid_argument("build_bundle: prompt budget below 100");

  Rng root(seed);
  Rng prompt_rng = root.derived("prompts");

  // unique prompts in generation order, then a disjoint 20/40/40 partition
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> prompts;
  long long misses = 0;
  while (static_cast<int>(prompts.size()) < prompt_budget) {
    std::vector<int> x(static_cast<std::size_t>(spec.prompt_len));
    for (auto& t : x)
      t = static_cast<int>(prompt_rng.uniform_below(
          static_cast<std::uint32_t>(spec.content_vocab)));
    if (seen.insert(x).second) {
      prompts.push_back(std::move(x));
    } else if (++misses > 200LL * prompt_budget) {
      throw std::invalid_argument(
          "build_bundle: prompt space too small for the requested budget");
    }
  }

  const int n_sft = prompt_budget / 5;
  const int n_pref = 2 * prompt_budget / 5;

  DatasetBundle out;
  for (int i = 0; i < n_sft; ++i) {
    const auto& x = prompts[static_cast<std::size_t>(i)];
    out.sft_set.push_back(
        {x, scripted_reference_policy(spec, x, sft_noise,
                                      root.derived("sft").derived(
                                          static_cast<std::uint64_t>(i)))});
  }

  std::vector<PreferenceTriple> triples;
  for (int i = 0; i < n_pref; ++i) {
    const auto& x = prompts[static_cast<std::size_t>(n_sft + i)];
    Rng pair_rng = root.derived("pref").derived(static_cast<std::uint64_t>(i));
    for (int attempt = 0; attempt < 10; ++attempt) {
      auto ya = scripted_reference_policy(spec, x, pref_noise,
                                          pair_rng.derived("a").derived(
                                              static_cast<std::uint64_t>(attempt)));
      auto yb = scripted_reference_policy(spec, x, pref_noise,
                                          pair_rng.derived("b").derived(
                                              static_cast<std::uint64_t>(attempt)));
      const double ga = gold_reward(spec, x, ya);
      const double gb = gold_reward(spec, x, yb);
      if (ga == gb) continue;  // tie: resample, give up after 10 tries
      if (ga > gb)
        triples.push_back({x, std::move(ya), std::move(yb)});
      else
        triples.push_back({x, std::move(yb), std::move(ya)});
      break;
    }
  }
  for (std::size_t i = 0; i < triples.size(); ++i) {
    if (i % 10 == 9)
      out.pref_test.push_back(std::move(triples[i]));
    else
      out.pref_train.push_back(std::move(triples[i]));
  }

  for (int i = n_sft + n_pref; i < prompt_budget; ++i)
    out.rl_prompts.push_back(prompts[static_cast<std::size_t>(i)]);
  return out;
}

// ---- persistence -----------------------------------------------------------

namespace {

void write_ids(std::ostream& os, std::span<const int> ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) os << ' ';
    os << ids[i];
  }
}

std::vector<int> parse_ids(const std::string& s) {
  std::vector<int> out;
  std::istringstream is(s);
  int v;
  while (is >> v) out.push_back(v);
  return out;
}

// splits "x:1 2\tw:3 4" into field map by single-letter keys
std::map<char, std::vector<int>> parse_line(const std::string& line,
                                            const char* where) {
  std::map<char, std::vector<int>> out;
  std::istringstream is(line);
  std::string field;
  while (std::getline(is, field, '\t')) {
    if (field.size() < 2 || field[1] != ':')
      throw std::runtime_error(std::string("dataset: malformed field in ") +
                               where + ": '" + field + "'");
    out[field[0]] = parse_ids(field.substr(2));
  }
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("dataset: cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(f, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

}  // namespace

void save_bundle(const std::string& dir, const DatasetBundle& bundle) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream f(dir + "/sft.txt");
    if (!f) throw std::runtime_error("dataset: cannot write " + dir + "/sft.txt");
    for (const auto& p : bundle.sft_set) {
      f << "x:";
      write_ids(f, p.prompt);
      f << "\ty:";
      write_ids(f, p.response);
      f << "\n";
    }
  }
  auto write_pref = [&](const std::string& path,
                        const std::vector<PreferenceTriple>& triples) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("dataset: cannot write " + path);
    for (const auto& t : triples) {
      f << "x:";
      write_ids(f, t.prompt);
      f << "\tw:";
      write_ids(f, t.winner);
      f << "\tl:";
      write_ids(f, t.loser);
      f << "\n";
    }
  };
  write_pref(dir + "/pref_train.txt", bundle.pref_train);
  write_pref(dir + "/pref_test.txt", bundle.pref_test);
  {
    std::ofstream f(dir + "/rl_prompts.txt");
    if (!f)
      throw std::runtime_error("dataset: cannot write " + dir + "/rl_prompts.txt");
    for (const auto& x : bundle.rl_prompts) {
      f << "x:";
      write_ids(f, x);
      f << "\n";
    }
  }
}

DatasetBundle load_bundle(const std::string& dir) {
  DatasetBundle out;
  for (const auto& line : read_lines(dir + "/sft.txt")) {
    auto fields = parse_line(line, "sft.txt");
    out.sft_set.push_back({fields.at('x'), fields.at('y')});
  }
  auto load_pref = [&](const std::string& path,
                       std::vector<PreferenceTriple>& dst) {
    for (const auto& line : read_lines(path)) {
      auto fields = parse_line(line, path.c_str());
      dst.push_back({fields.at('x'), fields.at('w'), fields.at('l')});
    }
  };
  load_pref(dir + "/pref_train.txt", out.pref_train);
  load_pref(dir + "/pref_test.txt", out.pref_test);
  for (const auto& line : read_lines(dir + "/rl_prompts.txt")) {
    auto fields = parse_line(line, "rl_prompts.txt");
    out.rl_prompts.push_back(fields.at('x'));
  }
  return out;
}

}  // namespace uprl
