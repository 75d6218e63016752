// SPDX-License-Identifier: Apache-2.0
#include "uprl/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "uprl/checkpoint.hpp"
#include "uprl/eval.hpp"
#include "uprl/rl.hpp"

namespace uprl::cmd {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 0xCBF29CE484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw IoError("write failed: " + path);
}

std::string config_subset(const ExperimentConfig& cfg,
                          const std::vector<std::string>& keys) {
  std::string out;
  for (const auto& k : keys) {
    out += k;
    out += "=";
    out += cfg.get(k);
    out += "\n";
  }
  return out;
}

const std::vector<std::string> kTaskKeys = {
    "content_vocab", "prompt_len", "response_cap", "gold_match_bonus",
    "gold_len_penalty", "gold_len_threshold", "gold_repeat_penalty",
    "prompt_budget", "sft_noise", "pref_noise", "seed"};
const std::vector<std::string> kModelKeys = {
    "embed_dim", "n_heads", "ffn_dim", "n_layers", "max_seq_len"};
const std::vector<std::string> kSftKeys = {"sft_epochs", "sft_batch", "sft_lr"};
const std::vector<std::string> kRmKeys = {
    "rm_epochs", "rm_batch", "rm_lr", "lambda", "members", "lora_rank",
    "lora_a_std"};
const std::vector<std::string> kRlKeys = {
    "rl_steps", "rl_batch", "samples_per_prompt", "temperature", "rl_lr",
    "beta1", "baseline_decay", "clip_enabled", "clip_epsilon",
    "checkpoint_every"};

DatasetBundle load_data(const ExperimentConfig& cfg) {
  try {
    return load_bundle(data_dir(cfg));
  } catch (const std::runtime_error& e) {
    throw IoError(std::string(e.what()) + " (run gen-data first)");
  }
}

void write_rl_trace(const std::string& path, const RlTrainResult& result) {
  std::string csv =
      "step,proxy_reward,gold_reward,kl_measured,u_mean,u_running_mean,"
      "kl_objective_value\n";
  for (const auto& r : result.trace) {
    csv += std::to_string(r.step) + "," + fmt(r.proxy_reward) + "," +
           fmt(r.gold_reward) + "," + fmt(r.kl_measured) + "," + fmt(r.u_mean) +
           "," + fmt(r.u_running_mean) + "," + fmt(r.kl_objective_value) + "\n";
  }
  write_text(path, csv);
}

// one rl run (used by both the subcommand and the experiment protocol)
RlTrainResult run_rl(const ExperimentConfig& cfg, const PolicyModel& sft_model,
                     const RewardEnsemble& ensemble,
                     const DatasetBundle& bundle, RlConfig rl_cfg,
                     const std::string& dir) {
  ensure_dir(dir);
  RlTrainResult result;
  PolicyModel trained = rl_train(
      sft_model, ensemble, bundle.rl_prompts, cfg.task(), rl_cfg, &result,
      [&](int step, const PolicyModel& m) {
        if (step % cfg.checkpoint_every == 0 || step == rl_cfg.steps) {
          PolicyModel snap = m.clone();
          save_checkpoint(dir + "/rl_ckpt_" + std::to_string(step) + ".ckpt",
                          snap.named_parameters());
        }
      });
  save_checkpoint(dir + "/policy.ckpt", trained.named_parameters());
  write_rl_trace(dir + "/rl_trace.csv", result);
  return result;
}

}  // namespace

std::string data_dir(const ExperimentConfig& cfg) { return cfg.out_dir + "/data"; }
std::string sft_ckpt_path(const ExperimentConfig& cfg) {
  return cfg.out_dir + "/sft.ckpt";
}
std::string rm_ckpt_path(const ExperimentConfig& cfg) {
  return cfg.out_dir + "/rm.ckpt";
}
std::string policy_ckpt_path(const ExperimentConfig& cfg) {
  return cfg.out_dir + "/policy.ckpt";
}

PolicyModel load_policy(const ExperimentConfig& cfg, const std::string& path) {
  PolicyModel model(cfg.backbone(), Rng(0));
  auto params = model.named_parameters();
  try {
    load_checkpoint_into(path, params);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
  return model;
}

RewardEnsemble load_ensemble(const ExperimentConfig& cfg,
                             const std::string& path) {
  Backbone bb(cfg.backbone(), Rng(0));
  RewardEnsemble ensemble(bb, cfg.members, cfg.lora_rank, Rng(0),
                          cfg.lora_a_std);
  auto params = ensemble.named_parameters();
  try {
    load_checkpoint_into(path, params);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
  return ensemble;
}

CurveSummary summarize_curve(const std::vector<double>& values, int window) {
  if (values.empty()) return {};
  CurveSummary out;
  out.max_value = -1e300;
  double best = -1e300;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t lo = i + 1 >= static_cast<std::size_t>(window)
                               ? i + 1 - static_cast<std::size_t>(window)
                               : 0;
    double s = 0.0;
    for (std::size_t k = lo; k <= i; ++k) s += values[k];
    const double mean = s / static_cast<double>(i - lo + 1);
    best = std::max(best, mean);
    if (i + 1 == values.size()) out.final_value = mean;
  }
  out.max_value = best;
  return out;
}

void gen_data(const ExperimentConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  const auto task = cfg.task();
  DatasetBundle bundle =
      build_bundle(task, cfg.prompt_budget, Rng(cfg.seed).derived("data").next_u64(),
                   cfg.sft_noise, cfg.pref_noise);
  save_bundle(data_dir(cfg), bundle);

  std::string manifest;
  manifest += "sft_pairs=" + std::to_string(bundle.sft_set.size()) + "\n";
  manifest += "pref_train=" + std::to_string(bundle.pref_train.size()) + "\n";
  manifest += "pref_test=" + std::to_string(bundle.pref_test.size()) + "\n";
  manifest += "rl_prompts=" + std::to_string(bundle.rl_prompts.size()) + "\n";
  manifest += "seed=" + std::to_string(cfg.seed) + "\n";
  manifest += "prompt_budget=" + std::to_string(cfg.prompt_budget) + "\n";
  manifest += "gold_match_bonus=" + fmt(cfg.gold_match_bonus) + "\n";
  manifest += "gold_len_penalty=" + fmt(cfg.gold_len_penalty) + "\n";
  manifest += "gold_len_threshold=" + std::to_string(cfg.gold_len_threshold) + "\n";
  manifest += "gold_repeat_penalty=" + fmt(cfg.gold_repeat_penalty) + "\n";
  manifest += "sft_noise=" + fmt(cfg.sft_noise) + "\n";
  manifest += "pref_noise=" + fmt(cfg.pref_noise) + "\n";
  write_text(data_dir(cfg) + "/manifest.txt", manifest);
  std::cout << "gen-data: " << bundle.sft_set.size() << " sft pairs, "
            << bundle.pref_train.size() << "+" << bundle.pref_test.size()
            << " preference triples, " << bundle.rl_prompts.size()
            << " rl prompts -> " << data_dir(cfg) << "\n";
}

void sft(const ExperimentConfig& cfg) {
  cfg.validate();
  const DatasetBundle bundle = load_data(cfg);
  PolicyModel model(cfg.backbone(), Rng(cfg.seed).derived("sft_init"));
  SftResult result = sft_train(model, bundle.sft_set, cfg.sft());
  save_checkpoint(sft_ckpt_path(cfg), model.named_parameters());
  std::string csv = "epoch,loss\n";
  for (std::size_t i = 0; i < result.epoch_loss.size(); ++i)
    csv += std::to_string(i) + "," + fmt(result.epoch_loss[i]) + "\n";
  write_text(cfg.out_dir + "/sft_trace.csv", csv);
  std::cout << "sft: " << result.epoch_loss.size() << " epochs, final loss "
            << (result.epoch_loss.empty() ? std::string("n/a")
                                          : fmt(result.epoch_loss.back()))
            << " -> " << sft_ckpt_path(cfg) << "\n";
}

void train_rm(const ExperimentConfig& cfg) {
  cfg.validate();
  const DatasetBundle bundle = load_data(cfg);
  PolicyModel sft_model = load_policy(cfg, sft_ckpt_path(cfg));
  RewardEnsemble ensemble = make_reward_ensemble(sft_model, cfg.rm());
  RmTrainResult result =
      rm_train(ensemble, bundle.pref_train, bundle.pref_test, cfg.rm());
  save_checkpoint(rm_ckpt_path(cfg), ensemble.named_parameters());
  std::string csv = "epoch,rank_loss,diversity_value,holdout_acc,holdout_ece\n";
  for (const auto& r : result.trace)
    csv += std::to_string(r.epoch) + "," + fmt(r.rank_loss) + "," +
           fmt(r.diversity) + "," + fmt(r.holdout_acc) + "," +
           fmt(r.holdout_ece) + "\n";
  write_text(cfg.out_dir + "/rm_trace.csv", csv);
  const double frac = static_cast<double>(ensemble.trainable_count()) /
                      static_cast<double>(ensemble.total_count());
  std::cout << "train-rm: " << result.trace.size() << " epochs, holdout acc "
            << (result.trace.empty() ? std::string("n/a")
                                     : fmt(result.trace.back().holdout_acc))
            << ", trainable fraction " << fmt(frac) << " -> "
            << rm_ckpt_path(cfg) << "\n";
}

void rl(const ExperimentConfig& cfg) {
  cfg.validate();
  const DatasetBundle bundle = load_data(cfg);
  PolicyModel sft_model = load_policy(cfg, sft_ckpt_path(cfg));
  RewardEnsemble ensemble = load_ensemble(cfg, rm_ckpt_path(cfg));
  RlTrainResult result =
      run_rl(cfg, sft_model, ensemble, bundle, cfg.rl(), cfg.out_dir);
  std::cout << "rl: " << result.trace.size() << " steps, final gold "
            << (result.trace.empty() ? std::string("n/a")
                                     : fmt(result.trace.back().gold_reward))
            << " -> " << policy_ckpt_path(cfg) << "\n";
}

void eval(const ExperimentConfig& cfg, std::vector<std::string> checkpoints) {
  cfg.validate();
  const DatasetBundle bundle = load_data(cfg);
  PolicyModel sft_model = load_policy(cfg, sft_ckpt_path(cfg));
  RewardEnsemble ensemble = load_ensemble(cfg, rm_ckpt_path(cfg));

  if (checkpoints.empty()) {
    std::vector<std::pair<long, std::string>> found;
    if (fs::exists(cfg.out_dir))
      for (const auto& entry : fs::directory_iterator(cfg.out_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("rl_ckpt_", 0) == 0 && name.size() > 13 &&
            name.substr(name.size() - 5) == ".ckpt")
          found.emplace_back(
              std::stol(name.substr(8, name.size() - 13)),
              entry.path().string());
      }
    std::sort(found.begin(), found.end());
    for (auto& [step, path] : found) checkpoints.push_back(path);
    if (checkpoints.empty())
      throw IoError("eval: no rl_ckpt_*.ckpt files in " + cfg.out_dir +
                    " and no checkpoints given");
  }

  // calibration of the reward ensemble on the held-out preference slice
  auto report = ece_report(score_pairs(ensemble, bundle.pref_test));
  std::string cal = "bin,count,acc,conf\n";
  for (std::size_t b = 0; b < report.bins.size(); ++b)
    cal += std::to_string(b) + "," + std::to_string(report.bins[b].count) +
           "," + fmt(report.bins[b].acc) + "," + fmt(report.bins[b].conf) +
           "\n";
  ensure_dir(cfg.out_dir);
  write_text(cfg.out_dir + "/calibration.csv", cal);

  // OOD curve over the given checkpoints
  std::vector<std::unique_ptr<PolicyModel>> models;
  std::vector<std::pair<std::string, const PolicyModel*>> labeled;
  for (const auto& path : checkpoints) {
    models.push_back(std::make_unique<PolicyModel>(load_policy(cfg, path)));
    labeled.emplace_back(fs::path(path).filename().string(), models.back().get());
  }
  const int n_prompts = std::min<int>(cfg.eval_prompts,
                                      static_cast<int>(bundle.rl_prompts.size()));
  std::vector<std::vector<int>> prompts(bundle.rl_prompts.begin(),
                                        bundle.rl_prompts.begin() + n_prompts);
  std::vector<OodRow> rows;
  if (labeled.size() >= 2) {
    rows = ood_curve(labeled, sft_model, ensemble, prompts, cfg.task(),
                     cfg.eval_samples, Rng(cfg.seed).derived("eval"));
  } else {
    // single checkpoint: emit the one row without the curve contract
    Rng rng = Rng(cfg.seed).derived("eval").derived(labeled[0].first);
    double kl = 0, u = 0, gold = 0;
    int count = 0;
    for (std::size_t i = 0; i < prompts.size(); ++i)
      for (int s = 0; s < cfg.eval_samples; ++s) {
        Rng sr = rng.derived(i * 1000003ULL + static_cast<std::uint64_t>(s));
        auto sample = labeled[0].second->sample(prompts[i], 1.0,
                                                cfg.response_cap, sr);
        kl += trajectory_kl(*labeled[0].second, sft_model, prompts[i],
                            sample.response);
        u += ensemble.uncertainty(prompts[i], sample.response);
        gold += gold_reward(cfg.task(), prompts[i], sample.response);
        ++count;
      }
    rows.push_back({labeled[0].first, kl / count, u / count, gold / count});
  }
  std::string ood = "checkpoint,kl,u_mean,gold_mean\n";
  for (const auto& r : rows)
    ood += r.label + "," + fmt(r.kl) + "," + fmt(r.u_mean) + "," +
           fmt(r.gold_mean) + "\n";
  write_text(cfg.out_dir + "/ood_curve.csv", ood);

  std::string summary;
  summary += "final_gold=" + fmt(rows.back().gold_mean) + "\n";
  summary += "final_kl=" + fmt(rows.back().kl) + "\n";
  summary += "final_u=" + fmt(rows.back().u_mean) + "\n";
  summary += "ece=" + fmt(report.ece) + "\n";
  summary += "accuracy=" + fmt(report.accuracy) + "\n";
  summary += "calibration_scale=" + fmt(report.scale) + "\n";
  summary += "note=accuracy credits ties as 0.5\n";
  write_text(cfg.out_dir + "/summary.txt", summary);
  std::cout << "eval: ece " << fmt(report.ece) << ", accuracy "
            << fmt(report.accuracy) << ", final gold "
            << fmt(rows.back().gold_mean) << " -> " << cfg.out_dir << "\n";
}

void experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  ensure_dir(cfg.out_dir);
  write_text(cfg.out_dir + "/experiment_config.txt", cfg.serialize());

  auto stage_done = [&](const std::string& marker, const std::string& hash) {
    std::ifstream f(marker);
    if (!f) return false;
    std::string got;
    std::getline(f, got);
    return got == hash;
  };
  auto mark = [&](const std::string& marker, const std::string& hash) {
    write_text(marker, hash + "\n");
  };

  const std::string h_data = hex64(fnv1a(config_subset(cfg, kTaskKeys)));
  if (stage_done(cfg.out_dir + "/.done_data", h_data)) {
    std::cout << "[skip] gen-data (up to date)\n";
  } else {
    gen_data(cfg);
    mark(cfg.out_dir + "/.done_data", h_data);
  }

  const std::string h_sft = hex64(
      fnv1a(h_data + config_subset(cfg, kModelKeys) + config_subset(cfg, kSftKeys)));
  if (stage_done(cfg.out_dir + "/.done_sft", h_sft)) {
    std::cout << "[skip] sft (up to date)\n";
  } else {
    sft(cfg);
    mark(cfg.out_dir + "/.done_sft", h_sft);
  }

  const std::string h_rm = hex64(fnv1a(h_sft + config_subset(cfg, kRmKeys)));
  if (stage_done(cfg.out_dir + "/.done_rm", h_rm)) {
    std::cout << "[skip] train-rm (up to date)\n";
  } else {
    train_rm(cfg);
    mark(cfg.out_dir + "/.done_rm", h_rm);
  }

  const DatasetBundle bundle = load_data(cfg);
  PolicyModel sft_model = load_policy(cfg, sft_ckpt_path(cfg));
  RewardEnsemble ensemble = load_ensemble(cfg, rm_ckpt_path(cfg));

  struct RunRow {
    std::uint64_t seed;
    std::string variant;
    double final_gold, max_gold, final_kl;
  };
  std::vector<RunRow> rows;
  for (std::uint64_t s : cfg.seed_list()) {
    for (const double b2 : {0.0, cfg.beta2}) {
      const std::string variant = b2 == 0.0 ? "plain" : "up";
      const std::string dir =
          cfg.out_dir + "/rl_s" + std::to_string(s) + "_" + variant;
      const std::string h_run = hex64(fnv1a(
          h_rm + config_subset(cfg, kRlKeys) + std::to_string(s) + "/" + fmt(b2)));
      RlConfig rl_cfg = cfg.rl();
      rl_cfg.seed = s;
      rl_cfg.beta2 = b2;

      RlTrainResult result;
      if (stage_done(dir + "/.done", h_run)) {
        std::cout << "[skip] rl seed " << s << " " << variant
                  << " (up to date)\n";
        // reload the trace for the comparison csv
        std::ifstream f(dir + "/rl_trace.csv");
        if (!f) throw IoError("missing trace for finished stage: " + dir);
        std::string line;
        std::getline(f, line);  // header
        while (std::getline(f, line)) {
          RlTraceRow row{};
          std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf,%lf,%lf", &row.step,
                      &row.proxy_reward, &row.gold_reward, &row.kl_measured,
                      &row.u_mean, &row.u_running_mean,
                      &row.kl_objective_value);
          result.trace.push_back(row);
        }
      } else {
        result = run_rl(cfg, sft_model, ensemble, bundle, rl_cfg, dir);
        mark(dir + "/.done", h_run);
        std::cout << "rl seed " << s << " " << variant << ": final gold "
                  << (result.trace.empty()
                          ? std::string("n/a")
                          : fmt(result.trace.back().gold_reward))
                  << "\n";
      }

      std::vector<double> gold, kl;
      for (const auto& r : result.trace) {
        gold.push_back(r.gold_reward);
        kl.push_back(r.kl_measured);
      }
      const CurveSummary gsum = summarize_curve(gold);
      const CurveSummary ksum = summarize_curve(kl);
      rows.push_back({s, variant, gsum.final_value, gsum.max_value,
                      ksum.final_value});
    }
  }

  std::string csv = "seed,variant,final_gold,max_gold,final_kl\n";
  for (const auto& r : rows)
    csv += std::to_string(r.seed) + "," + r.variant + "," + fmt(r.final_gold) +
           "," + fmt(r.max_gold) + "," + fmt(r.final_kl) + "\n";
  write_text(cfg.out_dir + "/comparison.csv", csv);
  std::cout << "experiment: comparison written to " << cfg.out_dir
            << "/comparison.csv\n";
}

}  // namespace uprl::cmd
