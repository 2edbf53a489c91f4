#pragma once

// Exact identity checks bundled for `oracle-check` and the acceptance run.
// Everything here is enumerated or finite-differenced in double precision.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "opdlab/distill.hpp"
#include "opdlab/grpo.hpp"
#include "opdlab/oracle.hpp"
#include "opdlab/policy.hpp"
#include "opdlab/sparse_grad.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab {

struct CheckResult {
  int criterion = 0;  // acceptance criterion this line belongs to
  std::string name;
  double measured = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

inline std::string check_line(const CheckResult& c) {
  return std::string(c.passed ? "PASS " : "FAIL ") + c.name + " measured=" + format_real(c.measured) +
         " tol=" + format_real(c.tolerance) + (c.detail.empty() ? "" : " (" + c.detail + ")");
}

// Central differences of f over every logit row; rows with an all-zero numeric
// gradient are dropped so the result lines up with sparse analytic gradients.
inline SparseGrad finite_difference_gradient(const Policy& p, const std::function<double(const Policy&)>& f,
                                             double h = 1e-5) {
  const int v = p.vocab_size();
  SparseGrad out(static_cast<std::size_t>(v));
  Policy q = p;
  auto& params = q.mutable_params();
  for (std::size_t row = 0; row < p.spec().row_count(); ++row) {
    std::vector<double> g(static_cast<std::size_t>(v), 0.0);
    bool any = false;
    for (int j = 0; j < v; ++j) {
      const std::size_t i = row * static_cast<std::size_t>(v) + static_cast<std::size_t>(j);
      const double orig = params[i];
      params[i] = orig + h;
      const double up = f(q);
      params[i] = orig - h;
      const double down = f(q);
      params[i] = orig;
      g[static_cast<std::size_t>(j)] = (up - down) / (2 * h);
      any = any || g[static_cast<std::size_t>(j)] != 0.0;
    }
    if (any) out.row(row) = g;
  }
  return out;
}

// Bimodal teacher over V = {p, a, b, eos}: "ab<eos>" or "ba<eos>" with equal
// weight. A one-token-context student cannot hold both modes.
inline Policy bimodal_teacher() {
  const PolicySpec spec{2, 4, 1.0};
  std::vector<double> params(spec.param_count(), 0.0);
  const Token pad = spec.pad_id(), p = 0, a = 1, b = 2, eos = 3;
  auto at = [](Token x, Token y, Token next) { return (static_cast<std::size_t>(x) * 4 + y) * 4 + next; };
  params[at(pad, p, a)] = 5.0;
  params[at(pad, p, b)] = 5.0;
  params[at(p, a, b)] = 12.0;
  params[at(a, b, eos)] = 12.0;
  params[at(p, b, a)] = 12.0;
  params[at(b, a, eos)] = 12.0;
  return Policy(spec, params, RoleTag::kTeacherRl);
}

inline double first_token_mass(const Policy& p, Token tok) {
  return next_token_dist(p, TokenSeq{0})[static_cast<std::size_t>(tok)];
}

// Largest per-coordinate relative error max_i |a_i - b_i| / max(|a_i|, |b_i|),
// over coordinates where either side is nonzero.
inline double max_coordinate_relative_error(const SparseGrad& a, const SparseGrad& b) {
  double worst = 0.0;
  auto visit = [&](const SparseGrad& x, const SparseGrad& y) {
    for (const auto& [r, vals] : x.rows())
      for (std::size_t c = 0; c < vals.size(); ++c) {
        const double u = vals[c], w = y.at(r, c);
        const double scale = std::max(std::abs(u), std::abs(w));
        if (scale > 0.0) worst = std::max(worst, std::abs(u - w) / scale);
      }
  };
  visit(a, b);
  visit(b, a);
  return worst;
}

namespace detail {

inline Policy random_check_policy(int k, int v, RngStream& gen, double scale = 1.5) {
  return init_policy({k, v, 0.7 + 0.6 * gen.uniform()}, gen.next(), scale);
}

inline CheckResult at_most(int criterion, std::string name, double measured, double tol, std::string detail = "") {
  return {criterion, std::move(name), measured, tol, measured <= tol, std::move(detail)};
}

}  // namespace detail

// The exact identities, one result line each. Fast (well under a second).
inline std::vector<CheckResult> oracle_checks(std::uint64_t seed = 2024) {
  using detail::at_most;
  std::vector<CheckResult> out;
  RngStream gen(seed);

  // Random (student, teacher, task) triples, V = 3, T_max = 3.
  const auto v3 = Vocab::generic(2);
  struct Triple {
    Policy student, teacher;
    TaskInstance task;
    double beta;
  };
  std::vector<Triple> triples;
  for (int i = 0; i < 24; ++i) {
    auto s = detail::random_check_policy(1 + i % 2, 3, gen);
    auto t = detail::random_check_policy(1 + static_cast<int>(gen.below(2)), 3, gen);
    TaskInstance task{"triple" + std::to_string(i), {static_cast<Token>(gen.below(2))}, {}, 3};
    triples.push_back({std::move(s), std::move(t), std::move(task), 0.25 + 1.5 * gen.uniform()});
  }
  double identity = 0.0, score = 0.0, beta_lin = 0.0;
  for (const auto& tr : triples) {
    const auto pair = exact_opd_gradient(tr.student, tr.teacher, tr.task, v3, tr.beta);
    identity = std::max(identity, max_coordinate_relative_error(pair.kl_route, pair.implicit_reward_route));
    score = std::max(score, score_function_expectation(tr.student, tr.task, v3).max_abs());
    const auto twice = exact_opd_gradient(tr.student, tr.teacher, tr.task, v3, 2 * tr.beta);
    SparseGrad a = pair.kl_route, b = pair.implicit_reward_route;
    a.scale(2.0);
    b.scale(2.0);
    beta_lin = std::max({beta_lin, relative_max_difference(a, twice.kl_route),
                         relative_max_difference(b, twice.implicit_reward_route)});
  }
  const std::string n_triples = std::to_string(triples.size()) + " triples, V=3, T_max=3";
  out.push_back(at_most(1, "opd-gradient-identity", identity, 1e-8, n_triples));
  out.push_back(at_most(2, "score-function-zero-mean", score, 1e-10, n_triples));

  // Reward-shaped target on arithmetic prompts (V=16, T_max=3).
  const auto va = Vocab::arithmetic();
  double norm_err = 0.0, zero_err = 0.0, partition_err = 0.0;
  for (const char* expr : {"9-5=", "3+4=", "6*7="}) {
    auto task = make_arithmetic_task(va, expr);
    task.max_response_len = 3;
    const auto ref = detail::random_check_policy(2, 16, gen);
    const auto base = sequence_distribution(ref, task, va);
    for (double beta : {0.1, 0.5, 2.0}) {
      const auto target = reward_shaped_target(ref, task, va, beta);
      norm_err = std::max(norm_err, std::abs(target.total_mass() - 1.0));
      const double lhs = exact_kl(target, base);
      const double rhs = exact_expected_reward(target, task, va) / beta - target.log_partition;
      partition_err = std::max(partition_err, std::abs(lhs - rhs));
      const auto flat = reward_shaped_target(ref, task, va, beta, [](const TokenSeq&) { return 0.0; });
      for (std::size_t i = 0; i < base.probs.size(); ++i)
        zero_err = std::max(zero_err, std::abs(flat.probs[i] - base.probs[i]));
      zero_err = std::max(zero_err, std::abs(flat.log_partition));
    }
  }
  out.push_back(at_most(3, "reward-shaped-normalization", norm_err, 1e-10));
  out.push_back(at_most(3, "reward-shaped-zero-reward-is-reference", zero_err, 1e-12, "up to renormalization rounding"));
  out.push_back(at_most(3, "reward-shaped-kl-partition-identity", partition_err, 1e-8));

  // Loss gradients against central differences, step 1e-5.
  {
    const auto tasks = generate_tasks(va, seed, 12, 1);
    std::vector<const TaskInstance*> ptrs;
    for (const auto& t : tasks) ptrs.push_back(&t);
    const auto teacher = init_policy({2, 16, 0.8}, derive_seed({seed, 1}), 2.0);
    const auto student = init_policy({1, 16, 1.2}, derive_seed({seed, 2}), 1.0);
    const auto recs = build_teacher_cache(teacher, ptrs, va, 2, derive_seed({seed, 3}));
    std::vector<const TeacherCacheRecord*> rp;
    std::vector<std::pair<const TokenSeq*, const TokenSeq*>> sp;
    for (const auto& r : recs) {
      rp.push_back(&r);
      sp.emplace_back(&r.prompt, &r.response);
    }
    std::vector<Trajectory> trajs;
    RngStream rng(derive_seed({seed, 4}));
    for (const auto& t : tasks) trajs.push_back(sample_trajectory(student, t, va, rng));
    std::vector<const Trajectory*> tp;
    for (const auto& t : trajs) tp.push_back(&t);
    SparseGrad g_fkl(16), g_sft(16), g_rkl(16);
    fkl_loss(student, rp, &g_fkl);
    sft_loss(student, sp, &g_sft);
    rkl_loss(student, teacher, tp, &g_rkl);
    // analytic gradients ascend -loss
    const auto fd_fkl = finite_difference_gradient(student, [&](const Policy& q) { return -fkl_loss(q, rp); });
    const auto fd_sft = finite_difference_gradient(student, [&](const Policy& q) { return -sft_loss(q, sp); });
    const auto fd_rkl = finite_difference_gradient(student, [&](const Policy& q) { return -rkl_loss(q, teacher, tp); });
    out.push_back(at_most(4, "fkl-gradient-vs-finite-difference", relative_max_difference(g_fkl, fd_fkl), 1e-4));
    out.push_back(at_most(4, "rkl-gradient-vs-finite-difference", relative_max_difference(g_rkl, fd_rkl), 1e-4));
    out.push_back(at_most(4, "sft-gradient-vs-finite-difference", relative_max_difference(g_sft, fd_sft), 1e-4));

    const auto old = init_policy({2, 16, 0.9}, derive_seed({seed, 5}), 1.0);
    const auto ref = init_policy({2, 16, 0.9}, derive_seed({seed, 6}), 1.0);
    std::vector<RolloutGroup> batch;
    RngStream brng(derive_seed({seed, 7}));
    for (std::size_t i = 0; i < 2; ++i) {
      auto g = make_group(old, tasks[i], va, 4, brng);
      g.rewards = {1, 0, 0, 1};
      g.advantages = compute_advantages(g.rewards);
      batch.push_back(std::move(g));
    }
    std::vector<const RolloutGroup*> groups{&batch[0], &batch[1]};
    GrpoConfig cfg;
    cfg.kl_coeff = 0.3;
    double worst = 0.0;
    for (const double shift : {0.0, 0.15, 0.6}) {  // larger shifts push ratios out of the clip band
      auto actor = old;
      RngStream jitter(derive_seed({seed, 8}));
      for (double& x : actor.mutable_params()) x += shift * (2 * jitter.uniform() - 1);
      SparseGrad g(16);
      grpo_surrogate(actor, ref, groups, cfg, &g);
      const auto fd = finite_difference_gradient(
          actor, [&](const Policy& q) { return grpo_surrogate(q, ref, groups, cfg, nullptr).objective; });
      worst = std::max(worst, relative_max_difference(g, fd));
    }
    out.push_back(at_most(4, "grpo-surrogate-gradient-vs-finite-difference", worst, 1e-4));
  }

  out.push_back(at_most(5, "beta-linearity-both-routes", beta_lin, 1e-12, n_triples));

  // Live teacher vs cache file contents: final parameters bit-identical.
  {
    const auto tasks = generate_tasks(va, derive_seed({seed, 9}), 12, 1);
    std::vector<const TaskInstance*> ptrs;
    for (const auto& t : tasks) ptrs.push_back(&t);
    const auto teacher = init_policy({2, 16, 1.0}, derive_seed({seed, 10}), 2.0, RoleTag::kTeacherRl);
    FklConfig cfg;
    cfg.rollouts_per_prompt = 4;
    cfg.epochs = 3;
    cfg.prompts_per_batch = 5;
    cfg.learning_rate = 0.3;
    auto live = init_policy({2, 16, 1.0}, derive_seed({seed, 11}), 0.1);
    auto cached = live;
    const std::uint64_t fkl_seed = derive_seed({seed, 12});
    fkl_warmup(live, teacher, ptrs, va, cfg, fkl_seed);
    const auto bytes = encode_cache(build_teacher_cache(teacher, ptrs, va, cfg.rollouts_per_prompt, fkl_seed), 16,
                                    teacher.fingerprint());
    fkl_warmup(cached, decode_cache(bytes, teacher.fingerprint()), cfg, fkl_seed);
    std::size_t differing = 0;
    for (std::size_t i = 0; i < live.params().size(); ++i) differing += live.params()[i] != cached.params()[i];
    out.push_back(at_most(6, "fkl-cache-equivalence", static_cast<double>(differing), 0.0,
                          "differing parameters out of " + std::to_string(live.params().size())));
  }
  return out;
}

}  // namespace opdlab
