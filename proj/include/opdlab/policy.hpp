#pragma once

// Autoregressive context-table softmax policies.
//
// A policy with context length k owns one logit row per possible window of the
// last k tokens (V^k rows of V logits). Windows shorter than k are left-padded
// with the <eos> id, which never occurs inside a live state because sampling
// stops at <eos>.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "opdlab/binary_io.hpp"
#include "opdlab/errors.hpp"
#include "opdlab/random.hpp"
#include "opdlab/sparse_grad.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab {

enum class RoleTag : std::uint32_t {
  kReference = 0,
  kTeacherRaw = 1,
  kTeacherSft = 2,
  kTeacherRl = 3,
  kStudent = 4,
  kStudentBridged = 5,
  kStudentFinal = 6,
};

inline std::string to_string(RoleTag r) {
  switch (r) {
    case RoleTag::kReference: return "REFERENCE";
    case RoleTag::kTeacherRaw: return "TEACHER_RAW";
    case RoleTag::kTeacherSft: return "TEACHER_SFT";
    case RoleTag::kTeacherRl: return "TEACHER_RL";
    case RoleTag::kStudent: return "STUDENT";
    case RoleTag::kStudentBridged: return "STUDENT_BRIDGED";
    case RoleTag::kStudentFinal: return "STUDENT_FINAL";
  }
  return "?";
}

struct PolicySpec {
  int context_len = 2;
  int vocab_size = 16;
  double temperature = 1.0;

  Token pad_id() const { return static_cast<Token>(vocab_size - 1); }

  std::size_t row_count() const {
    std::size_t rows = 1;
    for (int i = 0; i < context_len; ++i) rows *= static_cast<std::size_t>(vocab_size);
    return rows;
  }
  std::size_t param_count() const { return row_count() * static_cast<std::size_t>(vocab_size); }

  void validate() const {
    if (context_len < 1) throw ConfigError("policy context_len must be >= 1");
    if (vocab_size < 2) throw ConfigError("policy vocab_size must be >= 2");
    if (!(temperature > 0.0) || !std::isfinite(temperature))
      throw ConfigError("policy temperature must be positive");
    if (static_cast<double>(param_count()) > 6.0e7)
      throw ConfigError("policy table too large: vocab_size^(context_len+1) exceeds 6e7");
  }

  bool operator==(const PolicySpec&) const = default;
};

// Row index of the state prompt ++ prefix: the last k tokens, oldest first, in
// base-V positional order (row-major context order).
inline std::size_t context_row(const PolicySpec& spec, std::span<const Token> prompt,
                               std::span<const Token> prefix) {
  const auto k = static_cast<std::size_t>(spec.context_len);
  const auto v = static_cast<std::size_t>(spec.vocab_size);
  const std::size_t total = prompt.size() + prefix.size();
  std::size_t row = 0;
  for (std::size_t i = 0; i < k; ++i) {
    // position in the concatenated state, counting from the window start
    const std::size_t back = k - i;  // 1-based distance from the end
    Token tok = spec.pad_id();
    if (back <= total) {
      const std::size_t idx = total - back;
      tok = idx < prompt.size() ? prompt[idx] : prefix[idx - prompt.size()];
    }
    row = row * v + static_cast<std::size_t>(tok);
  }
  return row;
}

// In-place log-softmax of logits / temperature.
inline void log_softmax(std::span<const double> logits, double temperature, std::span<double> out) {
  double m = -std::numeric_limits<double>::infinity();
  for (double z : logits) m = std::max(m, z / temperature);
  double s = 0.0;
  for (double z : logits) s += std::exp(z / temperature - m);
  const double lse = m + std::log(s);
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] / temperature - lse;
}

class Policy {
 public:
  Policy() = default;
  Policy(PolicySpec spec, std::vector<double> params, RoleTag role)
      : spec_(spec), params_(std::move(params)), role_(role) {
    spec_.validate();
    if (params_.size() != spec_.param_count())
      throw ConfigError("parameter vector size does not match the policy spec");
  }

  const PolicySpec& spec() const { return spec_; }
  RoleTag role() const { return role_; }
  const std::vector<double>& params() const { return params_; }
  std::vector<double>& mutable_params() { return params_; }
  int vocab_size() const { return spec_.vocab_size; }

  void set_role(RoleTag role) { role_ = role; }

  Policy with_role(RoleTag role) const {
    Policy p = *this;
    p.role_ = role;
    return p;
  }

  std::span<const double> logits(std::size_t row) const {
    return {params_.data() + row * static_cast<std::size_t>(spec_.vocab_size),
            static_cast<std::size_t>(spec_.vocab_size)};
  }

  std::size_t row_of(std::span<const Token> prompt, std::span<const Token> prefix) const {
    return context_row(spec_, prompt, prefix);
  }

  void row_log_probs(std::size_t row, std::span<double> out) const {
    log_softmax(logits(row), spec_.temperature, out);
  }

  std::vector<double> row_log_probs(std::size_t row) const {
    std::vector<double> out(static_cast<std::size_t>(spec_.vocab_size));
    row_log_probs(row, out);
    return out;
  }

  std::vector<double> row_probs(std::size_t row) const {
    auto lp = row_log_probs(row);
    for (double& x : lp) x = std::exp(x);
    return lp;
  }

  // Stable 64-bit content hash of spec and parameters.
  std::uint64_t fingerprint() const {
    std::string buf;
    binio::put_u32(buf, static_cast<std::uint32_t>(spec_.context_len));
    binio::put_u32(buf, static_cast<std::uint32_t>(spec_.vocab_size));
    binio::put_f64(buf, spec_.temperature);
    for (double p : params_) binio::put_f64(buf, p);
    return hash_string(buf);
  }

  bool operator==(const Policy&) const = default;

 private:
  PolicySpec spec_;
  std::vector<double> params_;
  RoleTag role_ = RoleTag::kStudent;
};

// Logits i.i.d. uniform in [-init_scale, +init_scale]; zero scale gives the uniform policy.
inline Policy init_policy(const PolicySpec& spec, std::uint64_t init_seed, double init_scale,
                          RoleTag role = RoleTag::kStudent) {
  spec.validate();
  if (!(init_scale >= 0.0)) throw ConfigError("init_scale must be nonnegative");
  std::vector<double> params(spec.param_count(), 0.0);
  if (init_scale > 0.0) {
    RngStream rng(derive_seed({init_seed, 0x1417ULL}));
    for (double& p : params) p = rng.uniform(-init_scale, init_scale);
  }
  return Policy(spec, std::move(params), role);
}

inline std::vector<double> next_token_dist(const Policy& policy, std::span<const Token> state) {
  if (state.empty()) throw ConfigError("next_token_dist needs a nonempty state");
  return policy.row_probs(policy.row_of(state, {}));
}

struct Trajectory {
  std::string task_id;
  TokenSeq prompt;
  TokenSeq response;
  std::vector<double> logprob_actor;
  int reward = 0;
  bool truncated = false;
  RoleTag actor_tag = RoleTag::kStudent;

  double logprob_sum() const {
    double s = 0.0;
    for (double x : logprob_actor) s += x;
    return s;
  }
};

inline Trajectory sample_trajectory(const Policy& policy, const TaskInstance& task, const Vocab& vocab,
                                    RngStream& rng) {
  if (vocab.size() != policy.vocab_size())
    throw ConfigError("policy and vocabulary sizes differ");
  Trajectory traj;
  traj.task_id = task.id;
  traj.prompt = task.prompt;
  traj.actor_tag = policy.role();
  std::vector<double> lp(static_cast<std::size_t>(policy.vocab_size()));
  std::vector<double> probs(lp.size());
  for (int t = 0; t < task.max_response_len; ++t) {
    policy.row_log_probs(policy.row_of(task.prompt, traj.response), lp);
    for (std::size_t i = 0; i < lp.size(); ++i) probs[i] = std::exp(lp[i]);
    const auto tok = static_cast<Token>(rng.categorical(probs));
    traj.response.push_back(tok);
    traj.logprob_actor.push_back(lp[static_cast<std::size_t>(tok)]);
    if (tok == vocab.eos()) break;
  }
  traj.truncated = traj.response.empty() || traj.response.back() != vocab.eos();
  traj.reward = verify(vocab, task, traj.response);
  return traj;
}

struct LogProbResult {
  std::vector<double> per_token;
  double total = 0.0;
};

inline LogProbResult log_prob(const Policy& policy, std::span<const Token> prompt,
                              std::span<const Token> response) {
  LogProbResult out;
  std::vector<double> lp(static_cast<std::size_t>(policy.vocab_size()));
  for (std::size_t t = 0; t < response.size(); ++t) {
    if (response[t] < 0 || response[t] >= policy.vocab_size())
      throw ConfigError("response token outside the vocabulary");
    policy.row_log_probs(policy.row_of(prompt, response.first(t)), lp);
    out.per_token.push_back(lp[static_cast<std::size_t>(response[t])]);
    out.total += out.per_token.back();
  }
  return out;
}

inline LogProbResult log_prob(const Policy& policy, const Trajectory& traj) {
  return log_prob(policy, traj.prompt, traj.response);
}

// Adds scale * d/dlogits log pi(token | row) = scale * (onehot(token) - p) / T.
inline void accumulate_token_score(const Policy& policy, std::size_t row, Token token, double scale,
                                   SparseGrad& grad) {
  auto probs = policy.row_probs(row);
  auto& g = grad.row(row);
  const double s = scale / policy.spec().temperature;
  for (std::size_t j = 0; j < probs.size(); ++j) g[j] -= s * probs[j];
  g[static_cast<std::size_t>(token)] += s;
}

// Gradient of sum_t log pi(y_t | s_t) with respect to the logit table.
inline SparseGrad grad_log_prob(const Policy& policy, std::span<const Token> prompt,
                                std::span<const Token> response) {
  SparseGrad grad(static_cast<std::size_t>(policy.vocab_size()));
  for (std::size_t t = 0; t < response.size(); ++t)
    accumulate_token_score(policy, policy.row_of(prompt, response.first(t)), response[t], 1.0, grad);
  return grad;
}

inline SparseGrad grad_log_prob(const Policy& policy, const Trajectory& traj) {
  return grad_log_prob(policy, traj.prompt, traj.response);
}

enum class OptimizerKind { kSgd, kAdam };

struct StepConfig {
  double learning_rate = 0.05;
  double grad_clip_norm = 1.0;  // <= 0 disables clipping
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

struct OptimizerState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::int64_t steps = 0;
};

struct UpdateInfo {
  double grad_norm = 0.0;
  double applied_norm = 0.0;
};

// Gradient ascent: params move along +gradient after norm clipping. Adam is the
// lazy variant that only touches rows present in the gradient.
inline UpdateInfo apply_update_inplace(Policy& policy, const SparseGrad& gradient, OptimizerState& state,
                                       const StepConfig& cfg, std::string_view where) {
  if (gradient.width() != 0 && gradient.width() != static_cast<std::size_t>(policy.vocab_size()))
    throw ConfigError("gradient row width does not match the policy");
  if (!gradient.all_finite())
    throw RuntimeFailure("non-finite gradient in " + std::string(where));
  UpdateInfo info;
  info.grad_norm = gradient.norm();
  double factor = cfg.learning_rate;
  info.applied_norm = info.grad_norm;
  if (cfg.grad_clip_norm > 0.0 && info.grad_norm > cfg.grad_clip_norm) {
    factor *= cfg.grad_clip_norm / info.grad_norm;
    info.applied_norm = cfg.grad_clip_norm;
  }
  if (cfg.learning_rate == 0.0 || gradient.empty()) return info;
  auto& params = policy.mutable_params();
  const std::size_t width = gradient.width();
  if (cfg.optimizer == OptimizerKind::kSgd) {
    for (const auto& [r, g] : gradient.rows())
      for (std::size_t c = 0; c < width; ++c) params[r * width + c] += factor * g[c];
    return info;
  }
  if (state.first_moment.size() != params.size()) {
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  ++state.steps;
  const double clip_scale = factor / cfg.learning_rate;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.steps));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.steps));
  for (const auto& [r, g] : gradient.rows()) {
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t i = r * width + c;
      const double gi = g[c] * clip_scale;
      state.first_moment[i] = cfg.adam_beta1 * state.first_moment[i] + (1 - cfg.adam_beta1) * gi;
      state.second_moment[i] = cfg.adam_beta2 * state.second_moment[i] + (1 - cfg.adam_beta2) * gi * gi;
      params[i] += cfg.learning_rate * (state.first_moment[i] / bc1) /
                   (std::sqrt(state.second_moment[i] / bc2) + cfg.adam_eps);
    }
  }
  return info;
}

inline Policy apply_update(const Policy& policy, const SparseGrad& gradient, OptimizerState& state,
                           const StepConfig& cfg, std::string_view where) {
  Policy next = policy;
  apply_update_inplace(next, gradient, state, cfg, where);
  return next;
}

// Checkpoint: "OPDLCKPT", u32 version, u32 context_len, u32 vocab_size,
// u32 pad_id, f64 temperature, u32 role_tag, u64 param count, then the
// parameters as little-endian f64 in row-major context order.
inline constexpr char kCheckpointMagic[8] = {'O', 'P', 'D', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::string encode_checkpoint(const Policy& policy) {
  std::string buf(kCheckpointMagic, 8);
  binio::put_u32(buf, kCheckpointVersion);
  binio::put_u32(buf, static_cast<std::uint32_t>(policy.spec().context_len));
  binio::put_u32(buf, static_cast<std::uint32_t>(policy.spec().vocab_size));
  binio::put_u32(buf, static_cast<std::uint32_t>(policy.spec().pad_id()));
  binio::put_f64(buf, policy.spec().temperature);
  binio::put_u32(buf, static_cast<std::uint32_t>(policy.role()));
  binio::put_u64(buf, policy.params().size());
  buf.reserve(buf.size() + policy.params().size() * 8);
  for (double p : policy.params()) binio::put_f64(buf, p);
  return buf;
}

inline Policy decode_checkpoint(const std::string& buf) {
  if (buf.size() < 8 || buf.compare(0, 8, kCheckpointMagic, 8) != 0)
    throw RuntimeFailure("not a policy checkpoint (bad magic)");
  binio::Reader rd(buf);
  rd.bytes(8);
  if (rd.u32() != kCheckpointVersion) throw RuntimeFailure("unsupported checkpoint version");
  PolicySpec spec;
  spec.context_len = static_cast<int>(rd.u32());
  spec.vocab_size = static_cast<int>(rd.u32());
  const auto pad = rd.u32();
  spec.temperature = rd.f64();
  const auto role = static_cast<RoleTag>(rd.u32());
  const auto n = rd.u64();
  if (!rd.ok()) throw RuntimeFailure("truncated checkpoint header");
  if (pad != static_cast<std::uint32_t>(spec.pad_id()) || n != spec.param_count() ||
      rd.remaining() != n * 8)
    throw RuntimeFailure("checkpoint header inconsistent with its payload");
  std::vector<double> params(n);
  for (auto& p : params) p = rd.f64();
  return Policy(spec, std::move(params), role);
}

inline void save_checkpoint(const std::string& path, const Policy& policy) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot write checkpoint '" + path + "'");
  const auto buf = encode_checkpoint(policy);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline Policy load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeFailure("cannot read checkpoint '" + path + "'");
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(buf);
}

}  // namespace opdlab
