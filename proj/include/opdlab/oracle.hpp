#pragma once

// Exact enumeration over every response of a small instance: the reward-shaped
// target, its partition function, sequence and per-state KLs, expected rewards,
// and the two exact forms of the on-policy distillation gradient.
//
// Support: every token sequence of length <= T_max that ends in <eos>, plus
// the (V-1)^T_max sequences truncated at T_max without <eos>.

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "opdlab/errors.hpp"
#include "opdlab/policy.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab {

inline constexpr std::size_t kDefaultEnumerationCap = 2'000'000;

struct Response {
  TokenSeq tokens;
  bool truncated = false;
  bool operator==(const Response&) const = default;
};

// sum_{t=1..T} (V-1)^(t-1) eos-terminated sequences + (V-1)^T truncated ones.
inline double support_size(int vocab_size, int max_len) {
  const double c = vocab_size - 1.0;
  double total = 0.0;
  for (int t = 1; t <= max_len; ++t) total += std::pow(c, t - 1);
  return total + std::pow(c, max_len);
}

inline void check_enumerable(int vocab_size, int max_len, std::size_t cap) {
  if (max_len < 1) throw ConfigError("max_response_len must be >= 1");
  const double n = support_size(vocab_size, max_len);
  if (n > static_cast<double>(cap))
    throw OracleCapError("instance too large for oracle: " + std::to_string(static_cast<long long>(n)) +
                         " responses exceed the enumeration cap of " + std::to_string(cap));
}

namespace detail {

// Depth-first walk of the response tree. At each open prefix <eos> is visited
// first, then content tokens in ascending id order.
template <typename Leaf>
void walk_tree(int vocab_size, Token eos, int max_len, TokenSeq& prefix, Leaf& leaf) {
  prefix.push_back(eos);
  leaf(prefix, false);
  prefix.pop_back();
  for (Token t = 0; t < vocab_size; ++t) {
    if (t == eos) continue;
    prefix.push_back(t);
    if (static_cast<int>(prefix.size()) == max_len)
      leaf(prefix, true);
    else
      walk_tree(vocab_size, eos, max_len, prefix, leaf);
    prefix.pop_back();
  }
}

}  // namespace detail

inline std::vector<Response> enumerate_responses(int vocab_size, Token eos, int max_len,
                                                 std::size_t cap = kDefaultEnumerationCap) {
  check_enumerable(vocab_size, max_len, cap);
  std::vector<Response> out;
  TokenSeq prefix;
  auto leaf = [&](const TokenSeq& seq, bool truncated) { out.push_back({seq, truncated}); };
  detail::walk_tree(vocab_size, eos, max_len, prefix, leaf);
  return out;
}

inline std::vector<Response> enumerate_responses(const TaskInstance& task, const Vocab& vocab,
                                                 std::size_t cap = kDefaultEnumerationCap) {
  return enumerate_responses(vocab.size(), vocab.eos(), task.max_response_len, cap);
}

// Visits every response with its log-probability under `policy`, reusing
// prefix log-probabilities. Same order as enumerate_responses.
template <typename Leaf>
void for_each_response(const Policy& policy, const TaskInstance& task, Token eos, Leaf&& leaf,
                       std::size_t cap = kDefaultEnumerationCap) {
  check_enumerable(policy.vocab_size(), task.max_response_len, cap);
  const int v = policy.vocab_size();
  const int max_len = task.max_response_len;
  TokenSeq prefix;
  std::function<void(double)> rec = [&](double lp_prefix) {
    const auto lp = policy.row_log_probs(policy.row_of(task.prompt, prefix));
    prefix.push_back(eos);
    leaf(static_cast<const TokenSeq&>(prefix), lp_prefix + lp[static_cast<std::size_t>(eos)], false);
    prefix.pop_back();
    for (Token t = 0; t < v; ++t) {
      if (t == eos) continue;
      prefix.push_back(t);
      const double lpt = lp_prefix + lp[static_cast<std::size_t>(t)];
      if (static_cast<int>(prefix.size()) == max_len)
        leaf(static_cast<const TokenSeq&>(prefix), lpt, true);
      else
        rec(lpt);
      prefix.pop_back();
    }
  };
  rec(0.0);
}

// Visits every open state (a prefix at which a token is still emitted) with its
// reach probability under `occupancy`.
template <typename Node>
void for_each_state(const Policy& occupancy, const TaskInstance& task, Token eos, Node&& node,
                    std::size_t cap = kDefaultEnumerationCap) {
  check_enumerable(occupancy.vocab_size(), task.max_response_len, cap);
  const int v = occupancy.vocab_size();
  TokenSeq prefix;
  std::function<void(double)> rec = [&](double reach) {
    node(static_cast<const TokenSeq&>(prefix), reach);
    if (static_cast<int>(prefix.size()) + 1 >= task.max_response_len) return;
    const auto p = occupancy.row_probs(occupancy.row_of(task.prompt, prefix));
    for (Token t = 0; t < v; ++t) {
      if (t == eos) continue;
      prefix.push_back(t);
      rec(reach * p[static_cast<std::size_t>(t)]);
      prefix.pop_back();
    }
  };
  rec(1.0);
}

struct ExactDistribution {
  std::string task_id;
  std::vector<Response> support;
  std::vector<double> log_probs;
  std::vector<double> probs;
  double log_partition = 0.0;  // log Z_R for a reward-shaped target, 0 otherwise
  double beta = 0.0;

  double total_mass() const {
    double s = 0.0;
    for (double p : probs) s += p;
    return s;
  }
};

inline ExactDistribution sequence_distribution(const Policy& policy, const TaskInstance& task,
                                               const Vocab& vocab,
                                               std::size_t cap = kDefaultEnumerationCap) {
  ExactDistribution d;
  d.task_id = task.id;
  for_each_response(
      policy, task, vocab.eos(),
      [&](const TokenSeq& seq, double lp, bool truncated) {
        d.support.push_back({seq, truncated});
        d.log_probs.push_back(lp);
        d.probs.push_back(std::exp(lp));
      },
      cap);
  return d;
}

inline double log_sum_exp(const std::vector<double>& xs) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : xs) m = std::max(m, x);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

using SequenceReward = std::function<double(const TokenSeq&)>;

// pi*_R(y|x) = pi_ref(y|x) exp(R(x,y)/beta) / Z_R(x), normalized in log space.
inline ExactDistribution reward_shaped_target(const Policy& ref, const TaskInstance& task,
                                              const Vocab& vocab, double beta,
                                              const SequenceReward& reward,
                                              std::size_t cap = kDefaultEnumerationCap) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  ExactDistribution d = sequence_distribution(ref, task, vocab, cap);
  std::vector<double> shaped(d.log_probs.size());
  for (std::size_t i = 0; i < shaped.size(); ++i)
    shaped[i] = d.log_probs[i] + reward(d.support[i].tokens) / beta;
  d.log_partition = log_sum_exp(shaped);
  d.beta = beta;
  for (std::size_t i = 0; i < shaped.size(); ++i) {
    d.log_probs[i] = shaped[i] - d.log_partition;
    d.probs[i] = std::exp(d.log_probs[i]);
  }
  return d;
}

// Reward-shaped target under the task verifier.
inline ExactDistribution reward_shaped_target(const Policy& ref, const TaskInstance& task,
                                              const Vocab& vocab, double beta,
                                              std::size_t cap = kDefaultEnumerationCap) {
  return reward_shaped_target(
      ref, task, vocab, beta,
      [&](const TokenSeq& y) { return static_cast<double>(verify(vocab, task, y)); }, cap);
}

// Sequence-level KL(p || q) in nats over a shared support.
inline double exact_kl(const ExactDistribution& p, const ExactDistribution& q) {
  if (p.support.size() != q.support.size())
    throw ConfigError("exact_kl: support mismatch between '" + p.task_id + "' and '" + q.task_id + "'");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.support.size(); ++i) {
    if (!(p.support[i] == q.support[i])) throw ConfigError("exact_kl: support mismatch");
    if (p.probs[i] == 0.0) continue;
    kl += p.probs[i] * (p.log_probs[i] - q.log_probs[i]);
  }
  return kl;
}

inline double exact_kl(const Policy& p, const Policy& q, const TaskInstance& task, const Vocab& vocab,
                       std::size_t cap = kDefaultEnumerationCap) {
  return exact_kl(sequence_distribution(p, task, vocab, cap), sequence_distribution(q, task, vocab, cap));
}

// KL between two next-token distributions given as log-probabilities.
inline double token_kl(std::span<const double> log_p, std::span<const double> log_q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < log_p.size(); ++i) kl += std::exp(log_p[i]) * (log_p[i] - log_q[i]);
  return kl;
}

struct OccupancyKl {
  double weighted_sum = 0.0;  // sum_s d(s) KL_s, the expected per-sequence sum
  double occupancy = 0.0;     // sum_s d(s), the expected number of emitted tokens
  double mean() const { return occupancy > 0.0 ? weighted_sum / occupancy : 0.0; }
};

// Per-token KL(from(.|s) || to(.|s)) weighted by the visit distribution of
// `occupancy` over open states.
inline OccupancyKl exact_occupancy_kl(const Policy& occupancy, const Policy& from, const Policy& to,
                                      const TaskInstance& task, const Vocab& vocab,
                                      std::size_t cap = kDefaultEnumerationCap) {
  OccupancyKl out;
  for_each_state(
      occupancy, task, vocab.eos(),
      [&](const TokenSeq& prefix, double reach) {
        if (reach == 0.0) return;
        const auto lf = from.row_log_probs(from.row_of(task.prompt, prefix));
        const auto lt = to.row_log_probs(to.row_of(task.prompt, prefix));
        out.weighted_sum += reach * token_kl(lf, lt);
        out.occupancy += reach;
      },
      cap);
  return out;
}

inline double exact_expected_reward(const ExactDistribution& d, const TaskInstance& task,
                                    const Vocab& vocab) {
  double r = 0.0;
  for (std::size_t i = 0; i < d.support.size(); ++i)
    if (verify(vocab, task, d.support[i].tokens)) r += d.probs[i];
  return r;
}

inline double exact_expected_reward(const Policy& policy, const TaskInstance& task, const Vocab& vocab,
                                    std::size_t cap = kDefaultEnumerationCap) {
  double r = 0.0;
  for_each_response(
      policy, task, vocab.eos(),
      [&](const TokenSeq& seq, double lp, bool) {
        if (verify(vocab, task, seq)) r += std::exp(lp);
      },
      cap);
  return r;
}

// sum_y pi(y) grad log pi(y): zero at any parameter value.
inline SparseGrad score_function_expectation(const Policy& policy, const TaskInstance& task,
                                             const Vocab& vocab, std::size_t cap = kDefaultEnumerationCap) {
  SparseGrad total(static_cast<std::size_t>(policy.vocab_size()));
  for_each_response(
      policy, task, vocab.eos(),
      [&](const TokenSeq& seq, double lp, bool) {
        total.add_scaled(grad_log_prob(policy, task.prompt, seq), std::exp(lp));
      },
      cap);
  return total;
}

struct OpdGradientPair {
  // -beta * grad KL(pi_theta || pi_T), by backward recursion over the prefix tree.
  SparseGrad kl_route;
  // E_{y~pi_k}[R~(y) grad log pi_theta(y)], by enumeration with grad_log_prob.
  SparseGrad implicit_reward_route;
};

// Gradient of the sequence-level KL(student || teacher) with respect to the
// student's logit table, differentiated through the tree recursion
//   V(s) = sum_y pi(y|s) [log pi(y|s) - log pi_T(y|s) + V(s.y)].
// A table row shared by several states receives the sum of their local terms.
inline SparseGrad exact_reverse_kl_gradient(const Policy& student, const Policy& teacher,
                                            const TaskInstance& task, const Vocab& vocab,
                                            double* kl_out = nullptr,
                                            std::size_t cap = kDefaultEnumerationCap) {
  check_enumerable(student.vocab_size(), task.max_response_len, cap);
  const int v = student.vocab_size();
  const Token eos = vocab.eos();
  const double temp = student.spec().temperature;
  SparseGrad grad(static_cast<std::size_t>(v));
  TokenSeq prefix;
  std::function<double(double)> value = [&](double reach) -> double {
    const auto row = student.row_of(task.prompt, prefix);
    const auto ls = student.row_log_probs(row);
    const auto lt = teacher.row_log_probs(teacher.row_of(task.prompt, prefix));
    std::vector<double> q(static_cast<std::size_t>(v));
    double expected_q = 0.0;
    for (Token y = 0; y < v; ++y) {
      const auto yi = static_cast<std::size_t>(y);
      const double p = std::exp(ls[yi]);
      double cont = 0.0;
      if (y != eos && static_cast<int>(prefix.size()) + 1 < task.max_response_len) {
        prefix.push_back(y);
        cont = value(reach * p);
        prefix.pop_back();
      }
      q[yi] = ls[yi] - lt[yi] + cont;
      expected_q += p * q[yi];
    }
    auto& g = grad.row(row);
    for (std::size_t j = 0; j < q.size(); ++j) g[j] += reach * std::exp(ls[j]) * (q[j] - expected_q) / temp;
    return expected_q;
  };
  const double kl = value(1.0);
  if (kl_out) *kl_out = kl;
  return grad;
}

// Both exact forms of the distillation gradient, packaged for comparison. The
// anchor pi_k is the student itself (the identity is local at theta_k).
inline OpdGradientPair exact_opd_gradient(const Policy& student, const Policy& teacher,
                                          const TaskInstance& task, const Vocab& vocab, double beta,
                                          std::size_t cap = kDefaultEnumerationCap) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  OpdGradientPair out;
  out.kl_route = exact_reverse_kl_gradient(student, teacher, task, vocab, nullptr, cap);
  out.kl_route.scale(-beta);

  out.implicit_reward_route = SparseGrad(static_cast<std::size_t>(student.vocab_size()));
  for_each_response(
      student, task, vocab.eos(),
      [&](const TokenSeq& seq, double lp_student, bool) {
        const double lp_teacher = log_prob(teacher, task.prompt, seq).total;
        const double reward = beta * (lp_teacher - lp_student);
        out.implicit_reward_route.add_scaled(grad_log_prob(student, task.prompt, seq),
                                             std::exp(lp_student) * reward);
      },
      cap);
  return out;
}

struct ImplicitRewardTrace {
  std::string task_id;
  std::vector<double> per_token;  // beta * log(pi_T(y_t|s_t) / pi_k(y_t|s_t))
  double total = 0.0;
};

// `anchor` must be a frozen snapshot of the student, not the live policy.
inline ImplicitRewardTrace implicit_reward(std::string task_id, std::span<const Token> prompt,
                                           std::span<const Token> response, const Policy& teacher,
                                           const Policy& anchor, double beta) {
  ImplicitRewardTrace trace;
  trace.task_id = std::move(task_id);
  const auto lt = log_prob(teacher, prompt, response);
  const auto la = log_prob(anchor, prompt, response);
  for (std::size_t t = 0; t < response.size(); ++t) {
    trace.per_token.push_back(beta * (lt.per_token[t] - la.per_token[t]));
    trace.total += trace.per_token.back();
  }
  return trace;
}

inline ImplicitRewardTrace implicit_reward(const Trajectory& traj, const Policy& teacher,
                                           const Policy& anchor, double beta) {
  return implicit_reward(traj.task_id, traj.prompt, traj.response, teacher, anchor, beta);
}

// Exact sampler for pi*_R by rejection from pi_ref: R is binary, so accepting
// with probability exp((R - 1) / beta) yields pi_ref * exp(R / beta) / Z_R.
inline Trajectory sample_reward_shaped(const Policy& ref, const TaskInstance& task, const Vocab& vocab,
                                       double beta, RngStream& rng, int max_attempts = 1'000'000) {
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  const double reject_accept = std::exp(-1.0 / beta);
  for (int i = 0; i < max_attempts; ++i) {
    Trajectory traj = sample_trajectory(ref, task, vocab, rng);
    if (traj.reward == 1 || rng.uniform() < reject_accept) return traj;
  }
  throw RuntimeFailure("reward-shaped sampler exhausted its attempt budget on '" + task.id + "'");
}

struct OracleRecord {
  std::string task_id;
  double beta = 0.0;
  double log_partition = 0.0;
  double kl_target_to_ref = 0.0;
  double expected_reward_ref = 0.0;
  double expected_reward_target = 0.0;
};

inline OracleRecord oracle_record(const Policy& ref, const TaskInstance& task, const Vocab& vocab,
                                  double beta, std::size_t cap = kDefaultEnumerationCap) {
  const auto base = sequence_distribution(ref, task, vocab, cap);
  const auto target = reward_shaped_target(ref, task, vocab, beta, cap);
  return {task.id,
          beta,
          target.log_partition,
          exact_kl(target, base),
          exact_expected_reward(base, task, vocab),
          exact_expected_reward(target, task, vocab)};
}

}  // namespace opdlab
