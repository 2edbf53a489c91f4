#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "opdlab/errors.hpp"
#include "opdlab/format.hpp"
#include "opdlab/policy.hpp"
#include "opdlab/random.hpp"
#include "opdlab/sparse_grad.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab {

// Population-std normalization; an all-equal group gets all-zero advantages.
inline std::vector<double> compute_advantages(const std::vector<int>& rewards) {
  if (rewards.size() < 2) throw ConfigError("group size must be >= 2 for advantage normalization");
  const double n = static_cast<double>(rewards.size());
  double mean = 0.0;
  for (int r : rewards) mean += r;
  mean /= n;
  double var = 0.0;
  for (int r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> adv(rewards.size(), 0.0);
  if (sd == 0.0) return adv;
  for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
  return adv;
}

struct RolloutGroup {
  std::string task_id;
  std::vector<Trajectory> trajectories;
  std::vector<int> rewards;
  std::vector<double> advantages;
};

struct GrpoConfig {
  int group_size = 8;
  int prompts_per_batch = 16;
  double learning_rate = 0.05;
  double clip_ratio = 0.2;
  double kl_coeff = 5e-4;
  int epochs_per_batch = 1;
  int minibatch_size = 0;  // prompts per minibatch, 0 = whole batch
  double grad_clip_norm = 1.0;
  int max_prompt_len = 16;
  int max_response_len = 4;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  std::uint64_t seed = 0;

  void validate() const {
    if (group_size < 2) throw ConfigError("grpo.group_size must be >= 2");
    if (prompts_per_batch < 1) throw ConfigError("grpo.prompts_per_batch must be >= 1");
    if (!(learning_rate >= 0.0)) throw ConfigError("grpo.learning_rate must be >= 0");
    if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) throw ConfigError("grpo.clip_ratio must lie in (0, 1)");
    if (!(kl_coeff >= 0.0)) throw ConfigError("grpo.kl_coeff must be >= 0");
    if (epochs_per_batch < 1) throw ConfigError("grpo.epochs_per_batch must be >= 1");
    if (minibatch_size < 0) throw ConfigError("grpo.minibatch_size must be >= 0");
    if (!(grad_clip_norm >= 0.0)) throw ConfigError("grpo.grad_clip_norm must be >= 0");
    if (max_prompt_len < 1 || max_response_len < 1) throw ConfigError("grpo length limits must be >= 1");
  }

  StepConfig step_config() const {
    StepConfig s;
    s.learning_rate = learning_rate;
    s.grad_clip_norm = grad_clip_norm;
    s.optimizer = optimizer;
    return s;
  }
};

// G rollouts of `actor` on one prompt, with rewards and advantages filled in.
inline RolloutGroup make_group(const Policy& actor, const TaskInstance& task, const Vocab& vocab, int group_size,
                               RngStream& rng) {
  RolloutGroup g;
  g.task_id = task.id;
  for (int i = 0; i < group_size; ++i) {
    g.trajectories.push_back(sample_trajectory(actor, task, vocab, rng));
    g.rewards.push_back(g.trajectories.back().reward);
  }
  g.advantages = compute_advantages(g.rewards);
  return g;
}

struct SurrogateStats {
  double objective = 0.0;
  std::int64_t tokens = 0;
  std::int64_t clipped_tokens = 0;
  double kl_sum = 0.0;  // per-token KL(pi_new || pi_ref) summed over visited states
};

// Objective, averaged over all trajectories in `groups`:
//   sum_t min(r_t A, clip(r_t, 1-eps, 1+eps) A) - kl_coeff * sum_t KL_t,
// with r_t against the stored actor log-probs. When `grad` is non-null its
// gradient is accumulated there.
inline SurrogateStats grpo_surrogate(const Policy& actor, const Policy& reference,
                                     const std::vector<const RolloutGroup*>& groups, const GrpoConfig& cfg,
                                     SparseGrad* grad) {
  SurrogateStats st;
  std::size_t n_traj = 0;
  for (const auto* g : groups) n_traj += g->trajectories.size();
  if (n_traj == 0) return st;
  const double w = 1.0 / static_cast<double>(n_traj);
  const double temp = actor.spec().temperature;
  const auto v = static_cast<std::size_t>(actor.vocab_size());
  std::vector<double> lp(v), lq(v);
  for (const auto* g : groups) {
    for (std::size_t i = 0; i < g->trajectories.size(); ++i) {
      const auto& traj = g->trajectories[i];
      const double adv = g->advantages[i];
      const std::span<const Token> resp(traj.response);
      for (std::size_t t = 0; t < resp.size(); ++t) {
        const auto row = actor.row_of(traj.prompt, resp.first(t));
        actor.row_log_probs(row, lp);
        const auto y = static_cast<std::size_t>(resp[t]);
        const double ratio = std::exp(lp[y] - traj.logprob_actor[t]);
        const double clipped = std::clamp(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio);
        const double unclipped_term = ratio * adv;
        const double clipped_term = clipped * adv;
        const bool clip_active = clipped_term < unclipped_term;
        st.objective += w * std::min(unclipped_term, clipped_term);
        ++st.tokens;
        if (clip_active) ++st.clipped_tokens;

        double kl = 0.0;
        if (cfg.kl_coeff > 0.0 || grad == nullptr) {
          reference.row_log_probs(reference.row_of(traj.prompt, resp.first(t)), lq);
          for (std::size_t j = 0; j < v; ++j) kl += std::exp(lp[j]) * (lp[j] - lq[j]);
          st.kl_sum += kl;
          st.objective -= w * cfg.kl_coeff * kl;
        }
        if (grad == nullptr) continue;
        auto& gr = grad->row(row);
        if (!clip_active && adv != 0.0) {
          const double s = w * adv * ratio / temp;
          for (std::size_t j = 0; j < v; ++j) gr[j] -= s * std::exp(lp[j]);
          gr[y] += s;
        }
        if (cfg.kl_coeff > 0.0) {
          const double s = w * cfg.kl_coeff / temp;
          for (std::size_t j = 0; j < v; ++j) {
            const double p = std::exp(lp[j]);
            gr[j] -= s * p * (lp[j] - lq[j] - kl);
          }
        }
      }
    }
  }
  return st;
}

struct GrpoStepReport {
  double mean_reward = 0.0;
  double clipped_fraction = 0.0;
  double kl_to_ref = 0.0;  // mean per-token KL at visited states, after the update
  double grad_norm = 0.0;
  int updates = 0;
};

// Runs epochs_per_batch passes over `batch`, one optimizer update per minibatch.
inline GrpoStepReport grpo_step(Policy& actor, const Policy& reference, const std::vector<RolloutGroup>& batch,
                                const GrpoConfig& cfg, OptimizerState& opt, const std::string& where = "grpo") {
  GrpoStepReport rep;
  if (batch.empty()) return rep;
  std::int64_t n = 0, hits = 0;
  for (const auto& g : batch)
    for (int r : g.rewards) {
      hits += r;
      ++n;
    }
  rep.mean_reward = n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
  const std::size_t mb = cfg.minibatch_size > 0 ? static_cast<std::size_t>(cfg.minibatch_size) : batch.size();
  std::int64_t tokens = 0, clipped = 0;
  for (int epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
    for (std::size_t start = 0; start < batch.size(); start += mb) {
      std::vector<const RolloutGroup*> groups;
      for (std::size_t i = start; i < std::min(batch.size(), start + mb); ++i) groups.push_back(&batch[i]);
      SparseGrad grad(static_cast<std::size_t>(actor.vocab_size()));
      const auto st = grpo_surrogate(actor, reference, groups, cfg, &grad);
      if (!std::isfinite(st.objective) || !grad.all_finite()) {
        std::string ids;
        for (const auto* g : groups) ids += (ids.empty() ? "" : ",") + g->task_id;
        throw RuntimeFailure("non-finite GRPO loss in " + where + " (groups " + ids + ")");
      }
      tokens += st.tokens;
      clipped += st.clipped_tokens;
      const auto info = apply_update_inplace(actor, grad, opt, cfg.step_config(), where);
      rep.grad_norm = info.grad_norm;
      ++rep.updates;
    }
  }
  rep.clipped_fraction = tokens ? static_cast<double>(clipped) / static_cast<double>(tokens) : 0.0;
  std::vector<const RolloutGroup*> all;
  for (const auto& g : batch) all.push_back(&g);
  const auto after = grpo_surrogate(actor, reference, all, cfg, nullptr);
  rep.kl_to_ref = after.tokens ? after.kl_sum / static_cast<double>(after.tokens) : 0.0;
  return rep;
}

struct CurveRecord {
  std::int64_t batch_index = 0;
  double mean_reward = 0.0;
  double kl_to_ref = 0.0;
  double clipped_fraction = 0.0;
  double eval = std::numeric_limits<double>::quiet_NaN();  // NaN when no hook ran
};

struct BudgetCounters {
  std::int64_t batches = 0;
  std::int64_t prompt_draws = 0;    // batches * prompts_per_batch
  std::int64_t prompt_updates = 0;  // prompt_draws * epochs_per_batch
  std::int64_t rollouts = 0;
  std::int64_t optimizer_steps = 0;

  BudgetCounters& operator+=(const BudgetCounters& o) {
    batches += o.batches;
    prompt_draws += o.prompt_draws;
    prompt_updates += o.prompt_updates;
    rollouts += o.rollouts;
    optimizer_steps += o.optimizer_steps;
    return *this;
  }
  bool operator==(const BudgetCounters&) const = default;
};

struct GrpoResult {
  Policy policy;
  std::vector<CurveRecord> curve;
  BudgetCounters budget;
  std::map<std::string, std::int64_t> draws_per_prompt;
};

using EvalHook = std::function<double(const Policy&, std::int64_t batch_index)>;

// Prompt order: a fresh seeded shuffle of `tasks` on every pass. Rollouts for a
// prompt use a stream derived from (seed, task id, batch index), so results do
// not depend on generation order.
inline GrpoResult train_grpo(const Policy& actor, const Policy& reference,
                             const std::vector<const TaskInstance*>& tasks, const Vocab& vocab,
                             const GrpoConfig& cfg, std::int64_t budget, const EvalHook& eval_hook = {},
                             std::int64_t eval_every = 0, const std::string& where = "grpo") {
  cfg.validate();
  if (budget < 1) throw ConfigError("grpo budget must be >= 1 batch");
  if (tasks.empty()) throw ConfigError("grpo needs a non-empty task split");
  GrpoResult res{actor, {}, {}, {}};
  OptimizerState opt;
  std::vector<std::size_t> order(tasks.size());
  std::size_t cursor = order.size();
  std::uint64_t pass = 0;
  for (std::int64_t b = 0; b < budget; ++b) {
    std::vector<RolloutGroup> batch;
    for (int i = 0; i < cfg.prompts_per_batch; ++i) {
      if (cursor == order.size()) {
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
        RngStream shuffler(derive_seed({cfg.seed, hash_string("grpo-order"), pass++}));
        shuffler.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      const TaskInstance& task = *tasks[order[cursor++]];
      res.draws_per_prompt[task.id]++;
      RngStream rng(derive_seed({cfg.seed, hash_string(task.id), static_cast<std::uint64_t>(b)}));
      batch.push_back(make_group(res.policy, task, vocab, cfg.group_size, rng));
    }
    const auto rep = grpo_step(res.policy, reference, batch, cfg, opt, where + " batch " + std::to_string(b));
    CurveRecord rec{b, rep.mean_reward, rep.kl_to_ref, rep.clipped_fraction};
    if (eval_hook && eval_every > 0 && ((b + 1) % eval_every == 0 || b + 1 == budget))
      rec.eval = eval_hook(res.policy, b);
    res.curve.push_back(rec);
    res.budget.batches += 1;
    res.budget.prompt_draws += cfg.prompts_per_batch;
    res.budget.prompt_updates += static_cast<std::int64_t>(cfg.prompts_per_batch) * cfg.epochs_per_batch;
    res.budget.rollouts += static_cast<std::int64_t>(cfg.prompts_per_batch) * cfg.group_size;
    res.budget.optimizer_steps += rep.updates;
  }
  return res;
}

inline void write_curve_csv(std::ostream& os, const std::vector<CurveRecord>& curve) {
  os << "schema_version,batch_index,mean_reward,kl_to_ref,clipped_fraction,eval\n";
  for (const auto& r : curve) {
    os << 1 << ',' << r.batch_index << ',' << format_real(r.mean_reward) << ',' << format_real(r.kl_to_ref) << ','
       << format_real(r.clipped_fraction) << ',';
    if (!std::isnan(r.eval)) os << format_real(r.eval);
    os << '\n';
  }
}

}  // namespace opdlab
