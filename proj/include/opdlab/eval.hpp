#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "opdlab/errors.hpp"
#include "opdlab/format.hpp"
#include "opdlab/oracle.hpp"
#include "opdlab/policy.hpp"
#include "opdlab/random.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab {

inline constexpr int kCsvSchemaVersion = 1;

// Sample std (n-1 denominator) over sqrt(n); 0 for fewer than two values.
inline double standard_error(const std::vector<double>& xs) {
  const std::size_t n = xs.size();
  if (n < 2) return 0.0;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(n - 1)) / std::sqrt(static_cast<double>(n));
}

inline double mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

struct EvalReport {
  std::string checkpoint_id;
  std::string split;
  int k = 0;
  std::vector<std::string> task_ids;
  std::vector<double> per_problem_scores;
  double aggregate = 0.0;
  double se = 0.0;
  double decode_temperature = 1.0;
  std::uint64_t decode_seed = 0;
  bool operator==(const EvalReport&) const = default;
};

inline EvalReport summarize_scores(std::vector<double> scores, int k) {
  EvalReport r;
  r.k = k;
  r.aggregate = mean_of(scores);
  r.se = standard_error(scores);
  r.per_problem_scores = std::move(scores);
  return r;
}

// avg@K: K independent samples per problem, each problem on its own stream.
inline EvalReport evaluate(const Policy& policy, const std::vector<const TaskInstance*>& tasks, const Vocab& vocab,
                           int k, std::uint64_t decode_seed, const std::string& checkpoint_id = "",
                           const std::string& split = "EVAL") {
  if (tasks.empty()) throw ConfigError("evaluate: empty split '" + split + "'");
  if (k < 1) throw ConfigError("evaluate: K must be >= 1");
  std::vector<double> scores;
  std::vector<std::string> ids;
  for (const auto* task : tasks) {
    RngStream rng(derive_seed({decode_seed, hash_string("eval"), hash_string(task->id)}));
    int hits = 0;
    for (int i = 0; i < k; ++i) hits += sample_trajectory(policy, *task, vocab, rng).reward;
    scores.push_back(static_cast<double>(hits) / static_cast<double>(k));
    ids.push_back(task->id);
  }
  auto r = summarize_scores(std::move(scores), k);
  r.checkpoint_id = checkpoint_id;
  r.split = split;
  r.task_ids = std::move(ids);
  r.decode_temperature = policy.spec().temperature;
  r.decode_seed = decode_seed;
  return r;
}

inline void write_eval_csv_header(std::ostream& os) { os << "schema_version,run_id,checkpoint,split,K,aggregate,se\n"; }

inline void write_eval_csv_row(std::ostream& os, const std::string& run_id, const EvalReport& r) {
  os << kCsvSchemaVersion << ',' << run_id << ',' << r.checkpoint_id << ',' << r.split << ',' << r.k << ','
     << format_real(r.aggregate) << ',' << format_real(r.se) << '\n';
}

// ---------------------------------------------------------------- diagnostics

struct C1Terms {
  double reward_gap = 0.0;    // E_target[R] - E_teacher[R]
  double kl_to_target = 0.0;  // KL(teacher || target)
};

inline C1Terms c1_terms(const ExactDistribution& teacher, const ExactDistribution& target, const TaskInstance& task,
                        const Vocab& vocab) {
  return {exact_expected_reward(target, task, vocab) - exact_expected_reward(teacher, task, vocab),
          exact_kl(teacher, target)};
}

struct DiagnosticsReport {
  double c1_reward_gap = 0.0;
  double c1_kl_to_target = 0.0;
  double c2_kl = 0.0;     // exact, student-occupancy-weighted per-token KL(teacher || student) on probes
  double c2_kl_mc = 0.0;  // the same quantity estimated from student rollouts
  double c2_kl_se = 0.0;
  double implicit_reward_mean = 0.0;
  double implicit_reward_variance = 0.0;
  std::int64_t sampled_tokens = 0;
  int probes = 0;
};

// Exact occupancy-weighted C2 divergence averaged over probe tasks.
inline double c2_divergence(const Policy& student, const Policy& teacher, const std::vector<const TaskInstance*>& probes,
                            const Vocab& vocab) {
  double total = 0.0;
  for (const auto* t : probes) total += exact_occupancy_kl(student, teacher, student, *t, vocab).mean();
  return probes.empty() ? 0.0 : total / static_cast<double>(probes.size());
}

// Per-token implicit-reward values beta*log(pi_T/pi_student) on student rollouts.
inline std::vector<double> sample_implicit_rewards(const Policy& student, const Policy& teacher,
                                                   const std::vector<const TaskInstance*>& probes, const Vocab& vocab,
                                                   double beta, std::int64_t token_budget, std::uint64_t seed,
                                                   std::vector<double>* token_kls = nullptr) {
  std::vector<double> out;
  if (probes.empty()) return out;
  RngStream rng(derive_seed({seed, hash_string("diagnose")}));
  const auto v = static_cast<std::size_t>(student.vocab_size());
  std::vector<double> ls(v), lt(v);
  std::size_t i = 0;
  while (static_cast<std::int64_t>(out.size()) < token_budget) {
    const TaskInstance& task = *probes[i++ % probes.size()];
    const auto traj = sample_trajectory(student, task, vocab, rng);
    const std::span<const Token> resp(traj.response);
    for (std::size_t t = 0; t < resp.size() && static_cast<std::int64_t>(out.size()) < token_budget; ++t) {
      student.row_log_probs(student.row_of(task.prompt, resp.first(t)), ls);
      teacher.row_log_probs(teacher.row_of(task.prompt, resp.first(t)), lt);
      const auto y = static_cast<std::size_t>(resp[t]);
      out.push_back(beta * (lt[y] - ls[y]));
      if (token_kls) token_kls->push_back(token_kl(lt, ls));
    }
  }
  return out;
}

inline double population_variance(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  const double m = mean_of(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return ss / static_cast<double>(xs.size());
}

// C1 terms use pi*_R built on `reference` (usually the student the teacher is
// transferred to). Oracle terms are exact; sampled terms carry SEs.
inline DiagnosticsReport diagnose(const Policy& student, const Policy& teacher, const Policy& reference,
                                  const std::vector<const TaskInstance*>& probes, const Vocab& vocab, double beta,
                                  std::int64_t sample_budget, std::uint64_t seed) {
  if (probes.empty()) throw ConfigError("diagnose: no probe tasks");
  DiagnosticsReport d;
  d.probes = static_cast<int>(probes.size());
  for (const auto* t : probes) {
    const auto target = reward_shaped_target(reference, *t, vocab, beta);
    const auto c1 = c1_terms(sequence_distribution(teacher, *t, vocab), target, *t, vocab);
    d.c1_reward_gap += c1.reward_gap / d.probes;
    d.c1_kl_to_target += c1.kl_to_target / d.probes;
  }
  d.c2_kl = c2_divergence(student, teacher, probes, vocab);
  std::vector<double> kls;
  const auto ir = sample_implicit_rewards(student, teacher, probes, vocab, beta, sample_budget, seed, &kls);
  d.sampled_tokens = static_cast<std::int64_t>(ir.size());
  d.implicit_reward_mean = mean_of(ir);
  d.implicit_reward_variance = population_variance(ir);
  d.c2_kl_mc = mean_of(kls);
  d.c2_kl_se = standard_error(kls);
  return d;
}

inline void write_diagnostics_csv_header(std::ostream& os) {
  os << "schema_version,run_id,stage,c1_reward_gap,c1_kl_to_target,c2_kl,c2_kl_mc,c2_kl_se,ir_mean,ir_variance\n";
}

inline void write_diagnostics_csv_row(std::ostream& os, const std::string& run_id, const std::string& stage,
                                      const DiagnosticsReport& d) {
  os << kCsvSchemaVersion << ',' << run_id << ',' << stage << ',' << format_real(d.c1_reward_gap) << ','
     << format_real(d.c1_kl_to_target) << ',' << format_real(d.c2_kl) << ',' << format_real(d.c2_kl_mc) << ','
     << format_real(d.c2_kl_se) << ',' << format_real(d.implicit_reward_mean) << ','
     << format_real(d.implicit_reward_variance) << '\n';
}

// ---------------------------------------------------------------- tables

struct TableCell {
  double value = 0.0;
  double se = 0.0;
};

struct ComparisonTable {
  std::vector<std::string> columns;  // eval split / benchmark names
  std::vector<std::string> row_labels;
  std::vector<std::string> run_ids;
  std::vector<std::vector<TableCell>> cells;  // [row][column]

  std::string to_csv() const {
    std::ostringstream os;
    os << "schema_version,row_label,run_id";
    for (const auto& c : columns) os << ',' << c << ',' << c << "_se";
    os << '\n';
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
      os << kCsvSchemaVersion << ',' << row_labels[r] << ',' << run_ids[r];
      for (const auto& cell : cells[r]) os << ',' << format_real(cell.value) << ',' << format_real(cell.se);
      os << '\n';
    }
    return os.str();
  }

  // Percentages to one decimal; column maxima (all ties) wrapped in **bold**.
  std::string to_text() const {
    std::vector<double> best(columns.size(), -std::numeric_limits<double>::infinity());
    for (const auto& row : cells)
      for (std::size_t c = 0; c < row.size(); ++c) best[c] = std::max(best[c], row[c].value);
    std::vector<std::vector<std::string>> text;
    std::vector<std::string> header{"Configuration"};
    header.insert(header.end(), columns.begin(), columns.end());
    text.push_back(header);
    for (std::size_t r = 0; r < row_labels.size(); ++r) {
      std::vector<std::string> line{row_labels[r]};
      for (std::size_t c = 0; c < columns.size(); ++c) {
        std::string s = format_fixed(100.0 * cells[r][c].value, 1) + " ± " + format_fixed(100.0 * cells[r][c].se, 1);
        if (cells[r][c].value == best[c]) s = "**" + s + "**";
        line.push_back(s);
      }
      text.push_back(line);
    }
    std::vector<std::size_t> width(header.size(), 0);
    auto display_len = [](const std::string& s) {
      std::size_t n = 0;
      for (unsigned char ch : s) n += (ch & 0xC0) != 0x80;  // count UTF-8 code points
      return n;
    };
    for (const auto& line : text)
      for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], display_len(line[c]));
    std::ostringstream os;
    for (std::size_t l = 0; l < text.size(); ++l) {
      for (std::size_t c = 0; c < text[l].size(); ++c) {
        os << (c ? " | " : "") << text[l][c];
        if (c + 1 < text[l].size()) os << std::string(width[c] - display_len(text[l][c]), ' ');
      }
      os << '\n';
      if (l == 0) {
        for (std::size_t c = 0; c < width.size(); ++c) os << (c ? "-|-" : "") << std::string(width[c], '-');
        os << '\n';
      }
    }
    return os.str();
  }
};

struct TableRowSource {
  std::string label;
  std::string run_id;
  std::map<std::string, EvalReport> reports;  // column -> report; missing entries mean the run is incomplete
};

inline ComparisonTable build_table(const std::vector<TableRowSource>& rows, const std::vector<std::string>& columns) {
  ComparisonTable t;
  t.columns = columns;
  std::vector<std::string> missing;
  for (const auto& r : rows)
    for (const auto& c : columns)
      if (!r.reports.count(c)) missing.push_back(r.run_id + ":" + c);
  if (!missing.empty()) {
    std::string msg = "table references incomplete runs:";
    for (const auto& m : missing) msg += " " + m;
    throw RuntimeFailure(msg);
  }
  for (const auto& r : rows) {
    t.row_labels.push_back(r.label);
    t.run_ids.push_back(r.run_id);
    std::vector<TableCell> line;
    for (const auto& c : columns) line.push_back({r.reports.at(c).aggregate, r.reports.at(c).se});
    t.cells.push_back(std::move(line));
  }
  return t;
}

// ---------------------------------------------------------------- ordering tests

struct ContrastSummary {
  std::string lower;
  std::string higher;
  double mean_delta = 0.0;  // mean over seeds of higher - lower
  double se_delta = 0.0;
  int strict = 0;  // seeds with higher > lower
  int ties = 0;
};

struct OrderingReport {
  std::vector<std::string> hypothesis;  // claimed ascending order
  int seeds = 0;
  int passes = 0;  // strict ordering holds
  int ties = 0;    // no pair reversed but at least one tie
  double pass_rate = 0.0;
  double tie_rate = 0.0;
  std::vector<ContrastSummary> contrasts;
};

// `per_seed[s][label]` is the aggregate for one row on seed s.
inline OrderingReport ordering_test(const std::vector<std::map<std::string, double>>& per_seed,
                                    const std::vector<std::string>& ascending) {
  if (ascending.size() < 2) throw ConfigError("ordering hypothesis needs at least two rows");
  OrderingReport rep;
  rep.hypothesis = ascending;
  rep.seeds = static_cast<int>(per_seed.size());
  for (std::size_t i = 0; i + 1 < ascending.size(); ++i) rep.contrasts.push_back({ascending[i], ascending[i + 1]});
  std::vector<std::vector<double>> deltas(rep.contrasts.size());
  for (const auto& seed : per_seed) {
    bool reversed = false, tie = false;
    for (std::size_t i = 0; i + 1 < ascending.size(); ++i) {
      const auto lo = seed.find(ascending[i]);
      const auto hi = seed.find(ascending[i + 1]);
      if (lo == seed.end() || hi == seed.end())
        throw ConfigError("ordering test: seed is missing row '" + (lo == seed.end() ? ascending[i] : ascending[i + 1]) +
                          "'");
      const double d = hi->second - lo->second;
      deltas[i].push_back(d);
      if (d > 0) ++rep.contrasts[i].strict;
      else if (d == 0) {
        ++rep.contrasts[i].ties;
        tie = true;
      } else {
        reversed = true;
      }
    }
    if (!reversed && !tie) ++rep.passes;
    else if (!reversed) ++rep.ties;
  }
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    rep.contrasts[i].mean_delta = mean_of(deltas[i]);
    rep.contrasts[i].se_delta = standard_error(deltas[i]);
  }
  if (rep.seeds > 0) {
    rep.pass_rate = static_cast<double>(rep.passes) / rep.seeds;
    rep.tie_rate = static_cast<double>(rep.ties) / rep.seeds;
  }
  return rep;
}

inline std::string ordering_to_text(const OrderingReport& r) {
  std::ostringstream os;
  os << "hypothesis:";
  for (std::size_t i = 0; i < r.hypothesis.size(); ++i) os << (i ? " < " : " ") << r.hypothesis[i];
  os << "\nseeds " << r.seeds << ", strict passes " << r.passes << " (" << format_fixed(r.pass_rate, 2) << "), ties "
     << r.ties << '\n';
  for (const auto& c : r.contrasts)
    os << "  " << c.higher << " - " << c.lower << ": " << format_fixed(100 * c.mean_delta, 2) << " ± "
       << format_fixed(100 * c.se_delta, 2) << " pts, higher on " << c.strict << '/' << r.seeds << ", ties " << c.ties
       << '\n';
  return os.str();
}

}  // namespace opdlab
