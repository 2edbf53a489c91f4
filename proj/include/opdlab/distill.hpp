#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "opdlab/binary_io.hpp"
#include "opdlab/errors.hpp"
#include "opdlab/format.hpp"
#include "opdlab/grpo.hpp"
#include "opdlab/policy.hpp"
#include "opdlab/random.hpp"
#include "opdlab/sparse_grad.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab {

enum class AnchorRefresh { kEveryStep, kFixed };
enum class OpdEstimator { kExact, kImplicitReward };

inline std::string to_string(AnchorRefresh a) { return a == AnchorRefresh::kEveryStep ? "EVERY_STEP" : "FIXED"; }
inline std::string to_string(OpdEstimator e) { return e == OpdEstimator::kExact ? "EXACT" : "IMPLICIT_REWARD"; }

struct FklConfig {
  int rollouts_per_prompt = 8;
  int epochs = 4;
  int prompts_per_batch = 16;
  double learning_rate = 0.05;
  double grad_clip_norm = 1.0;
  OptimizerKind optimizer = OptimizerKind::kSgd;
};

struct OpdConfig {
  int rollouts_per_prompt = 8;
  int steps = 100;
  int prompts_per_batch = 16;
  double learning_rate = 0.05;
  double grad_clip_norm = 1.0;
  OptimizerKind optimizer = OptimizerKind::kSgd;
  double beta = 1.0;
  AnchorRefresh anchor = AnchorRefresh::kEveryStep;
  OpdEstimator estimator = OpdEstimator::kExact;
};

struct BridgeConfig {
  FklConfig fkl;
  OpdConfig opd;
  bool use_cache = false;
  std::uint64_t seed = 0;

  void validate() const {
    if (fkl.rollouts_per_prompt < 1 || fkl.epochs < 1 || fkl.prompts_per_batch < 1)
      throw ConfigError("bridge.fkl counts must be >= 1");
    if (opd.rollouts_per_prompt < 1 || opd.steps < 1 || opd.prompts_per_batch < 1)
      throw ConfigError("bridge.opd counts must be >= 1");
    if (!(fkl.learning_rate >= 0.0) || !(opd.learning_rate >= 0.0))
      throw ConfigError("bridge learning rates must be >= 0");
    if (!(opd.beta > 0.0)) throw ConfigError("bridge.opd.beta must be > 0");
  }
};

inline StepConfig make_step(double lr, double clip, OptimizerKind opt) {
  StepConfig s;
  s.learning_rate = lr;
  s.grad_clip_norm = clip;
  s.optimizer = opt;
  return s;
}

// ---------------------------------------------------------------- teacher cache

struct TeacherCacheRecord {
  std::string task_id;
  TokenSeq prompt;
  TokenSeq response;
  bool truncated = false;
  std::vector<std::vector<double>> dists;  // teacher next-token distribution per response position
  std::uint64_t fingerprint = 0;
  bool operator==(const TeacherCacheRecord&) const = default;
};

inline constexpr char kCacheMagic[8] = {'O', 'P', 'D', 'L', 'C', 'A', 'C', 'H'};
inline constexpr std::uint32_t kCacheVersion = 1;

// K teacher rollouts per task, sorted by (task id, rollout index). Each task
// draws from its own stream, so the records do not depend on task order.
inline std::vector<TeacherCacheRecord> build_teacher_cache(const Policy& teacher,
                                                           const std::vector<const TaskInstance*>& tasks,
                                                           const Vocab& vocab, int rollouts_per_prompt,
                                                           std::uint64_t seed) {
  std::vector<const TaskInstance*> sorted = tasks;
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });
  const auto fp = teacher.fingerprint();
  std::vector<TeacherCacheRecord> out;
  for (const auto* task : sorted) {
    RngStream rng(derive_seed({seed, hash_string("teacher-rollout"), hash_string(task->id)}));
    for (int k = 0; k < rollouts_per_prompt; ++k) {
      const auto traj = sample_trajectory(teacher, *task, vocab, rng);
      TeacherCacheRecord rec{task->id, task->prompt, traj.response, traj.truncated, {}, fp};
      const std::span<const Token> resp(traj.response);
      for (std::size_t t = 0; t < resp.size(); ++t)
        rec.dists.push_back(teacher.row_probs(teacher.row_of(task->prompt, resp.first(t))));
      out.push_back(std::move(rec));
    }
  }
  return out;
}

inline std::string encode_cache(const std::vector<TeacherCacheRecord>& records, int vocab_size,
                                std::uint64_t fingerprint) {
  std::string out(kCacheMagic, 8);
  binio::put_u32(out, kCacheVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(vocab_size));
  binio::put_u64(out, fingerprint);
  binio::put_u64(out, records.size());
  for (const auto& r : records) {
    if (r.fingerprint != fingerprint) throw ConfigError("cache record from a different teacher checkpoint");
    std::string body;
    binio::put_u32(body, static_cast<std::uint32_t>(r.task_id.size()));
    body += r.task_id;
    binio::put_u32(body, static_cast<std::uint32_t>(r.prompt.size()));
    for (Token t : r.prompt) binio::put_u32(body, static_cast<std::uint32_t>(t));
    binio::put_u32(body, static_cast<std::uint32_t>(r.response.size()));
    for (Token t : r.response) binio::put_u32(body, static_cast<std::uint32_t>(t));
    binio::put_u32(body, r.truncated ? 1u : 0u);
    for (const auto& d : r.dists) {
      if (static_cast<int>(d.size()) != vocab_size) throw ConfigError("cache distribution has wrong width");
      for (double p : d) binio::put_f64(body, p);
    }
    binio::put_u32(out, static_cast<std::uint32_t>(body.size()));
    out += body;
  }
  return out;
}

// `expected_fingerprint` of 0 skips the checkpoint check.
inline std::vector<TeacherCacheRecord> decode_cache(const std::string& buf, std::uint64_t expected_fingerprint,
                                                    int* vocab_size_out = nullptr) {
  binio::Reader rd(buf);
  if (rd.bytes(8) != std::string(kCacheMagic, 8)) throw CacheError(CacheErrorKind::kCorrupt, "bad cache magic");
  const auto version = rd.u32();
  if (!rd.ok()) throw CacheError(CacheErrorKind::kCorrupt, "cache header truncated");
  if (version != kCacheVersion)
    throw CacheError(CacheErrorKind::kVersionMismatch, "cache version " + std::to_string(version) +
                                                           " is not supported (expected " +
                                                           std::to_string(kCacheVersion) + ")");
  const auto v = rd.u32();
  const auto fp = rd.u64();
  const auto count = rd.u64();
  if (!rd.ok() || v == 0) throw CacheError(CacheErrorKind::kCorrupt, "cache header truncated");
  if (expected_fingerprint != 0 && fp != expected_fingerprint)
    throw CacheError(CacheErrorKind::kFingerprintMismatch, "cache was written by a different teacher checkpoint");
  if (vocab_size_out) *vocab_size_out = static_cast<int>(v);
  std::vector<TeacherCacheRecord> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = rd.u32();
    const std::string body = rd.bytes(len);
    if (!rd.ok()) throw CacheError(CacheErrorKind::kCorrupt, "cache truncated at record " + std::to_string(i));
    binio::Reader br(body);
    TeacherCacheRecord r;
    r.fingerprint = fp;
    r.task_id = br.bytes(br.u32());
    const auto np = br.u32();
    if (np > body.size()) throw CacheError(CacheErrorKind::kCorrupt, "corrupt record length");
    for (std::uint32_t j = 0; j < np; ++j) r.prompt.push_back(static_cast<Token>(br.u32()));
    const auto nr = br.u32();
    if (nr > body.size()) throw CacheError(CacheErrorKind::kCorrupt, "corrupt record length");
    for (std::uint32_t j = 0; j < nr; ++j) r.response.push_back(static_cast<Token>(br.u32()));
    r.truncated = br.u32() != 0;
    for (std::uint32_t j = 0; j < nr; ++j) {
      std::vector<double> d(v);
      double s = 0.0;
      for (auto& p : d) {
        p = br.f64();
        s += p;
      }
      if (!(std::abs(s - 1.0) <= 1e-9))
        throw CacheError(CacheErrorKind::kCorrupt, "cache distribution does not sum to 1 in record " +
                                                        std::to_string(i));
      r.dists.push_back(std::move(d));
    }
    if (!br.ok() || br.remaining() != 0)
      throw CacheError(CacheErrorKind::kCorrupt, "malformed cache record " + std::to_string(i));
    out.push_back(std::move(r));
  }
  if (rd.remaining() != 0) throw CacheError(CacheErrorKind::kCorrupt, "trailing bytes after cache records");
  return out;
}

inline void write_cache(const std::string& path, const std::vector<TeacherCacheRecord>& records, int vocab_size,
                        std::uint64_t fingerprint) {
  const auto buf = encode_cache(records, vocab_size, fingerprint);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw RuntimeFailure("cannot write cache " + path);
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw RuntimeFailure("cannot write cache " + path);
}

inline std::vector<TeacherCacheRecord> read_cache(const std::string& path, std::uint64_t expected_fingerprint) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw RuntimeFailure("cannot open cache " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_cache(ss.str(), expected_fingerprint);
}

// ---------------------------------------------------------------- losses

// Mean over records of sum_t KL(teacher(.|s_t) || student(.|s_t)).
inline double fkl_loss(const Policy& student, const std::vector<const TeacherCacheRecord*>& recs,
                       SparseGrad* grad = nullptr) {
  if (recs.empty()) return 0.0;
  const double w = 1.0 / static_cast<double>(recs.size());
  const double temp = student.spec().temperature;
  std::vector<double> ls(static_cast<std::size_t>(student.vocab_size()));
  double loss = 0.0;
  for (const auto* r : recs) {
    const std::span<const Token> resp(r->response);
    for (std::size_t t = 0; t < resp.size(); ++t) {
      const auto row = student.row_of(r->prompt, resp.first(t));
      student.row_log_probs(row, ls);
      const auto& pt = r->dists[t];
      for (std::size_t j = 0; j < pt.size(); ++j)
        if (pt[j] > 0.0) loss += w * pt[j] * (std::log(pt[j]) - ls[j]);
      if (grad) {
        auto& g = grad->row(row);
        for (std::size_t j = 0; j < pt.size(); ++j) g[j] -= w * (std::exp(ls[j]) - pt[j]) / temp;
      }
    }
  }
  return loss;
}

// Hard-target negative log-likelihood of the response tokens, averaged over sequences.
inline double sft_loss(const Policy& student, const std::vector<std::pair<const TokenSeq*, const TokenSeq*>>& seqs,
                       SparseGrad* grad = nullptr) {
  if (seqs.empty()) return 0.0;
  const double w = 1.0 / static_cast<double>(seqs.size());
  double loss = 0.0;
  for (const auto& [prompt, response] : seqs) {
    loss -= w * log_prob(student, *prompt, *response).total;
    if (grad) {
      const std::span<const Token> resp(*response);
      for (std::size_t t = 0; t < resp.size(); ++t)
        accumulate_token_score(student, student.row_of(*prompt, resp.first(t)), resp[t], w, *grad);
    }
  }
  return loss;
}

// Mean over trajectories of sum_t KL(student(.|s_t) || teacher(.|s_t)) with the
// visited states held fixed. The gradient (if requested) is the negative,
// per-state part only.
inline double rkl_loss(const Policy& student, const Policy& teacher, const std::vector<const Trajectory*>& trajs,
                       SparseGrad* grad = nullptr) {
  if (trajs.empty()) return 0.0;
  const double w = 1.0 / static_cast<double>(trajs.size());
  const double temp = student.spec().temperature;
  const auto v = static_cast<std::size_t>(student.vocab_size());
  std::vector<double> ls(v), lt(v);
  double loss = 0.0;
  for (const auto* tr : trajs) {
    const std::span<const Token> resp(tr->response);
    for (std::size_t t = 0; t < resp.size(); ++t) {
      const auto row = student.row_of(tr->prompt, resp.first(t));
      student.row_log_probs(row, ls);
      teacher.row_log_probs(teacher.row_of(tr->prompt, resp.first(t)), lt);
      double kl = 0.0;
      for (std::size_t j = 0; j < v; ++j) kl += std::exp(ls[j]) * (ls[j] - lt[j]);
      loss += w * kl;
      if (grad) {
        auto& g = grad->row(row);
        for (std::size_t j = 0; j < v; ++j) g[j] -= w * std::exp(ls[j]) * (ls[j] - lt[j] - kl) / temp;
      }
    }
  }
  return loss;
}

// ---------------------------------------------------------------- stage drivers

struct DistillCounters {
  std::int64_t prompts = 0;         // distinct prompts drawn from the split
  std::int64_t prompt_updates = 0;  // prompt uses summed over epochs/steps
  std::int64_t rollouts = 0;
  std::int64_t optimizer_steps = 0;
};

struct FklReport {
  double fkl_before = 0.0;  // mean per-token FKL over the rollout set
  double fkl_after = 0.0;
  std::vector<double> epoch_loss;  // mean sequence FKL at the start of each epoch
  DistillCounters counters;
};

namespace detail {

inline double per_token_fkl(const Policy& student, const std::vector<TeacherCacheRecord>& recs) {
  std::vector<const TeacherCacheRecord*> all;
  std::size_t tokens = 0;
  for (const auto& r : recs) {
    all.push_back(&r);
    tokens += r.response.size();
  }
  if (tokens == 0) return 0.0;
  return fkl_loss(student, all) * static_cast<double>(all.size()) / static_cast<double>(tokens);
}

// Groups record indices by task id, keeping first-appearance order.
template <typename T, typename Key>
std::vector<std::vector<std::size_t>> group_by(const std::vector<T>& items, Key key) {
  std::map<std::string, std::size_t> slot;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const std::string& k = key(items[i]);
    auto it = slot.find(k);
    if (it == slot.end()) {
      it = slot.emplace(k, groups.size()).first;
      groups.emplace_back();
    }
    groups[it->second].push_back(i);
  }
  return groups;
}

// Epoch loop shared by the soft- and hard-target trainers: each epoch visits
// prompt groups in a seeded shuffled order, one update per minibatch.
template <typename GradFn>
void minibatch_epochs(Policy& student, const std::vector<std::vector<std::size_t>>& groups, int epochs,
                      int prompts_per_batch, std::uint64_t seed, const std::string& tag, const StepConfig& step,
                      DistillCounters& counters, GradFn&& grad_fn) {
  OptimizerState opt;
  std::vector<std::size_t> order(groups.size());
  for (int e = 0; e < epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    RngStream shuffler(derive_seed({seed, hash_string(tag + "-order"), static_cast<std::uint64_t>(e)}));
    shuffler.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(prompts_per_batch)) {
      std::vector<std::size_t> members;
      for (std::size_t i = start; i < std::min(order.size(), start + static_cast<std::size_t>(prompts_per_batch)); ++i)
        members.insert(members.end(), groups[order[i]].begin(), groups[order[i]].end());
      SparseGrad g(static_cast<std::size_t>(student.vocab_size()));
      grad_fn(members, g);
      apply_update_inplace(student, g, opt, step, tag + " epoch " + std::to_string(e));
      ++counters.optimizer_steps;
    }
    counters.prompt_updates += static_cast<std::int64_t>(groups.size());
  }
}

}  // namespace detail

// Soft-target training against the teacher's full next-token distributions.
inline FklReport fkl_warmup(Policy& student, const std::vector<TeacherCacheRecord>& records, const FklConfig& cfg,
                            std::uint64_t seed) {
  FklReport rep;
  const auto groups = detail::group_by(records, [](const TeacherCacheRecord& r) -> const std::string& { return r.task_id; });
  rep.counters.prompts = static_cast<std::int64_t>(groups.size());
  rep.counters.rollouts = static_cast<std::int64_t>(records.size());
  rep.fkl_before = detail::per_token_fkl(student, records);
  const auto step = make_step(cfg.learning_rate, cfg.grad_clip_norm, cfg.optimizer);
  std::vector<const TeacherCacheRecord*> all;
  for (const auto& r : records) all.push_back(&r);
  for (int e = 0; e < cfg.epochs; ++e) {
    rep.epoch_loss.push_back(fkl_loss(student, all));
    detail::minibatch_epochs(student, groups, 1, cfg.prompts_per_batch,
                             derive_seed({seed, static_cast<std::uint64_t>(e)}), "fkl", step, rep.counters,
                             [&](const std::vector<std::size_t>& members, SparseGrad& g) {
                               std::vector<const TeacherCacheRecord*> recs;
                               for (auto i : members) recs.push_back(&records[i]);
                               fkl_loss(student, recs, &g);
                             });
  }
  rep.fkl_after = detail::per_token_fkl(student, records);
  return rep;
}

// Live-teacher form: materializes the same records a cache would hold.
inline FklReport fkl_warmup(Policy& student, const Policy& teacher, const std::vector<const TaskInstance*>& tasks,
                            const Vocab& vocab, const FklConfig& cfg, std::uint64_t seed) {
  if (teacher.vocab_size() != student.vocab_size()) throw ConfigError("teacher and student vocabularies differ");
  const auto recs = build_teacher_cache(teacher, tasks, vocab, cfg.rollouts_per_prompt, seed);
  return fkl_warmup(student, recs, cfg, seed);
}

struct SftReport {
  double loss_before = 0.0;
  double loss_after = 0.0;
  std::vector<double> epoch_loss;  // full-set loss before each epoch
  DistillCounters counters;
};

struct SftExample {
  std::string task_id;
  TokenSeq prompt;
  TokenSeq response;
};

// Hard-target next-token training on fixed sequences.
inline SftReport hard_target_train(Policy& student, const std::vector<SftExample>& examples, const FklConfig& cfg,
                                   std::uint64_t seed, const std::string& tag = "sft") {
  SftReport rep;
  std::vector<std::pair<const TokenSeq*, const TokenSeq*>> all;
  for (const auto& e : examples) all.emplace_back(&e.prompt, &e.response);
  const auto groups = detail::group_by(examples, [](const SftExample& e) -> const std::string& { return e.task_id; });
  rep.counters.prompts = static_cast<std::int64_t>(groups.size());
  rep.counters.rollouts = static_cast<std::int64_t>(examples.size());
  rep.loss_before = sft_loss(student, all);
  const auto step = make_step(cfg.learning_rate, cfg.grad_clip_norm, cfg.optimizer);
  for (int e = 0; e < cfg.epochs; ++e) {
    rep.epoch_loss.push_back(sft_loss(student, all));
    detail::minibatch_epochs(student, groups, 1, cfg.prompts_per_batch,
                             derive_seed({seed, static_cast<std::uint64_t>(e)}), tag, step, rep.counters,
                             [&](const std::vector<std::size_t>& members, SparseGrad& g) {
                               std::vector<std::pair<const TokenSeq*, const TokenSeq*>> batch;
                               for (auto i : members) batch.emplace_back(&examples[i].prompt, &examples[i].response);
                               sft_loss(student, batch, &g);
                             });
  }
  rep.loss_after = sft_loss(student, all);
  return rep;
}

inline std::vector<SftExample> to_sft_examples(const std::vector<TeacherCacheRecord>& records) {
  std::vector<SftExample> out;
  for (const auto& r : records) out.push_back({r.task_id, r.prompt, r.response});
  return out;
}

// Bridge control: hard targets on the teacher's sampled tokens.
inline SftReport teacher_sample_sft(Policy& student, const std::vector<TeacherCacheRecord>& records,
                                    const FklConfig& cfg, std::uint64_t seed) {
  return hard_target_train(student, to_sft_examples(records), cfg, seed, "teacher-sft");
}

inline SftReport teacher_sample_sft(Policy& student, const Policy& teacher,
                                    const std::vector<const TaskInstance*>& tasks, const Vocab& vocab,
                                    const FklConfig& cfg, std::uint64_t seed) {
  return teacher_sample_sft(student, build_teacher_cache(teacher, tasks, vocab, cfg.rollouts_per_prompt, seed), cfg,
                            seed);
}

// ---------------------------------------------------------------- on-policy distillation

struct OpdStepReport {
  std::int64_t step = 0;
  double fkl = 0.0;           // mean per-token KL(teacher || student) at visited states
  double rkl = 0.0;           // mean per-token KL(student || teacher) at visited states
  double ir_mean = 0.0;       // implicit-reward per-token mean
  double ir_var = 0.0;        // implicit-reward per-token population variance
  double grad_norm = 0.0;
};

// Ascent direction for one batch of student rollouts.
//  EXACT: per-state exact gradient of -beta * KL_t plus the score term
//         -beta * grad log pi(y_t|s_t) * sum_{t'>t} KL_t', which together are an
//         unbiased estimate of -beta * grad KL(pi_theta || pi_T) at sequence level.
//  IMPLICIT_REWARD: grad log pi_theta(y) * R~(y) with R~ = beta * sum_t log(pi_T / pi_anchor).
inline SparseGrad opd_gradient(const Policy& student, const Policy& teacher, const Policy& anchor,
                               const std::vector<const Trajectory*>& trajs, const OpdConfig& cfg,
                               OpdStepReport* rep = nullptr) {
  const auto v = static_cast<std::size_t>(student.vocab_size());
  SparseGrad grad(v);
  if (trajs.empty()) return grad;
  const double w = 1.0 / static_cast<double>(trajs.size());
  const double temp = student.spec().temperature;
  std::vector<double> ls(v), lt(v), la(v);
  double fkl_sum = 0.0, rkl_sum = 0.0, ir_sum = 0.0, ir_sq = 0.0;
  std::int64_t tokens = 0;
  for (const auto* tr : trajs) {
    const std::span<const Token> resp(tr->response);
    const std::size_t n = resp.size();
    std::vector<std::size_t> rows(n);
    std::vector<double> kl(n), ir(n);
    double ir_total = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      rows[t] = student.row_of(tr->prompt, resp.first(t));
      student.row_log_probs(rows[t], ls);
      teacher.row_log_probs(teacher.row_of(tr->prompt, resp.first(t)), lt);
      anchor.row_log_probs(anchor.row_of(tr->prompt, resp.first(t)), la);
      double k = 0.0, f = 0.0;
      for (std::size_t j = 0; j < v; ++j) {
        k += std::exp(ls[j]) * (ls[j] - lt[j]);
        f += std::exp(lt[j]) * (lt[j] - ls[j]);
      }
      kl[t] = k;
      const auto y = static_cast<std::size_t>(resp[t]);
      ir[t] = cfg.beta * (lt[y] - la[y]);
      ir_total += ir[t];
      fkl_sum += f;
      rkl_sum += k;
      ir_sum += ir[t];
      ir_sq += ir[t] * ir[t];
      ++tokens;
      if (cfg.estimator == OpdEstimator::kExact) {
        auto& g = grad.row(rows[t]);
        for (std::size_t j = 0; j < v; ++j) g[j] -= w * cfg.beta * std::exp(ls[j]) * (ls[j] - lt[j] - k) / temp;
      }
    }
    if (cfg.estimator == OpdEstimator::kExact) {
      double to_go = 0.0;
      for (std::size_t t = n; t-- > 0;) {
        if (to_go != 0.0) accumulate_token_score(student, rows[t], resp[t], -w * cfg.beta * to_go, grad);
        to_go += kl[t];
      }
    } else {
      for (std::size_t t = 0; t < n; ++t) accumulate_token_score(student, rows[t], resp[t], w * ir_total, grad);
    }
  }
  if (rep && tokens > 0) {
    const double nt = static_cast<double>(tokens);
    rep->fkl = fkl_sum / nt;
    rep->rkl = rkl_sum / nt;
    rep->ir_mean = ir_sum / nt;
    rep->ir_var = std::max(0.0, ir_sq / nt - rep->ir_mean * rep->ir_mean);
  }
  return grad;
}

struct OpdResult {
  Policy policy;
  std::vector<OpdStepReport> steps;
  DistillCounters counters;
};

// Stage 2b. Rollouts always come from the current student (actor tag STUDENT);
// the teacher is only queried at those prefixes.
inline OpdResult train_opd(const Policy& student, const Policy& teacher, const std::vector<const TaskInstance*>& tasks,
                           const Vocab& vocab, const OpdConfig& cfg, std::uint64_t seed) {
  if (tasks.empty()) throw ConfigError("opd needs a non-empty task split");
  if (!(cfg.beta > 0.0)) throw ConfigError("opd beta must be > 0");
  if (teacher.vocab_size() != student.vocab_size()) throw ConfigError("teacher and student vocabularies differ");
  OpdResult res{student, {}, {}};
  const Policy fixed_anchor = student;
  OptimizerState opt;
  const auto step_cfg = make_step(cfg.learning_rate, cfg.grad_clip_norm, cfg.optimizer);
  std::vector<std::size_t> order(tasks.size());
  std::size_t cursor = order.size();
  std::uint64_t pass = 0;
  std::map<std::string, int> seen;
  for (int s = 0; s < cfg.steps; ++s) {
    std::vector<Trajectory> trajs;
    for (int i = 0; i < cfg.prompts_per_batch; ++i) {
      if (cursor == order.size()) {
        for (std::size_t j = 0; j < order.size(); ++j) order[j] = j;
        RngStream shuffler(derive_seed({seed, hash_string("opd-order"), pass++}));
        shuffler.shuffle(std::span<std::size_t>(order));
        cursor = 0;
      }
      const TaskInstance& task = *tasks[order[cursor++]];
      seen[task.id]++;
      RngStream rng(derive_seed({seed, hash_string("opd"), hash_string(task.id), static_cast<std::uint64_t>(s)}));
      for (int k = 0; k < cfg.rollouts_per_prompt; ++k) {
        trajs.push_back(sample_trajectory(res.policy, task, vocab, rng));
        trajs.back().actor_tag = RoleTag::kStudent;
      }
    }
    std::vector<const Trajectory*> ptrs;
    for (const auto& t : trajs) ptrs.push_back(&t);
    OpdStepReport rep;
    rep.step = s;
    const Policy& anchor = cfg.anchor == AnchorRefresh::kEveryStep ? res.policy : fixed_anchor;
    // With EVERY_STEP the anchor is the pre-step snapshot: the gradient is
    // computed before the update, so `res.policy` is still that snapshot here.
    const auto grad = opd_gradient(res.policy, teacher, anchor, ptrs, cfg, &rep);
    const auto info = apply_update_inplace(res.policy, grad, opt, step_cfg, "opd step " + std::to_string(s));
    rep.grad_norm = info.grad_norm;
    res.steps.push_back(rep);
    res.counters.prompt_updates += cfg.prompts_per_batch;
    res.counters.rollouts += static_cast<std::int64_t>(trajs.size());
    ++res.counters.optimizer_steps;
  }
  res.counters.prompts = static_cast<std::int64_t>(seen.size());
  return res;
}

inline void write_opd_csv(std::ostream& os, const std::vector<OpdStepReport>& steps) {
  os << "schema_version,step,fkl,rkl,implicit_reward_mean,implicit_reward_var\n";
  for (const auto& r : steps)
    os << 1 << ',' << r.step << ',' << format_real(r.fkl) << ',' << format_real(r.rkl) << ',' << format_real(r.ir_mean) << ','
       << format_real(r.ir_var) << '\n';
}

}  // namespace opdlab
