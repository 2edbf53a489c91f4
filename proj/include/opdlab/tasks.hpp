#pragma once

// Synthetic verifiable tasks: modular integer arithmetic rendered in tokens,
// a binary outcome verifier, and deterministic train/eval half-splits.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "opdlab/errors.hpp"
#include "opdlab/random.hpp"

namespace opdlab {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

class Vocab {
 public:
  // Arithmetic vocabulary: digits 0-9, + - *, '=', answer marker '#', <eos>.
  static Vocab arithmetic() {
    std::vector<std::string> names;
    for (int d = 0; d < 10; ++d) names.push_back(std::to_string(d));
    for (const char* s : {"+", "-", "*", "=", "#", "<eos>"}) names.emplace_back(s);
    return Vocab(std::move(names));
  }

  // Abstract vocabulary of `content` tokens (a, b, c, ...) plus <eos>, used for
  // exactly enumerable oracle instances.
  static Vocab generic(int content) {
    std::vector<std::string> names;
    for (int i = 0; i < content; ++i) names.push_back(std::string(1, static_cast<char>('a' + i)));
    names.emplace_back("<eos>");
    return Vocab(std::move(names));
  }

  int size() const { return static_cast<int>(names_.size()); }
  Token eos() const { return static_cast<Token>(names_.size() - 1); }
  const std::string& name(Token t) const { return names_.at(static_cast<std::size_t>(t)); }
  const std::vector<std::string>& names() const { return names_; }

  std::optional<Token> find(const std::string& symbol) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == symbol) return static_cast<Token>(i);
    return std::nullopt;
  }

  Token require(const std::string& symbol) const {
    auto t = find(symbol);
    if (!t) throw ConfigError("vocabulary has no symbol '" + symbol + "'");
    return *t;
  }

  // Answer-start marker; absent in generic vocabularies.
  std::optional<Token> answer_marker() const { return find("#"); }

  bool contains(Token t) const { return t >= 0 && t < size(); }

  std::string render(std::span<const Token> seq) const {
    std::string out;
    for (Token t : seq) out += contains(t) ? name(t) : "?";
    return out;
  }

  bool operator==(const Vocab&) const = default;

 private:
  explicit Vocab(std::vector<std::string> names) : names_(std::move(names)) {}
  std::vector<std::string> names_;
};

struct TaskInstance {
  std::string id;
  TokenSeq prompt;
  TokenSeq target;
  int max_response_len = 4;

  bool operator==(const TaskInstance&) const = default;
};

struct GeneratorOptions {
  int first_operand_max = 99;  // inclusive; only its units digit reaches a mod-10 answer
  int operand_max = 9;         // inclusive, for every later operand
  int answer_digits = 1;       // answers reduced modulo 10^answer_digits
  int max_response_len = 4;
  int max_prompt_len = 16;
};

namespace detail {

inline std::int64_t positive_mod(std::int64_t v, std::int64_t m) { return ((v % m) + m) % m; }

// Evaluates operands joined by operators with * binding tighter than + and -.
inline std::int64_t evaluate_expression(const std::vector<std::int64_t>& operands,
                                        const std::vector<char>& ops) {
  std::vector<std::int64_t> terms{operands[0]};
  std::vector<char> signs;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    if (ops[i] == '*') {
      terms.back() *= operands[i + 1];
    } else {
      signs.push_back(ops[i]);
      terms.push_back(operands[i + 1]);
    }
  }
  std::int64_t total = terms[0];
  for (std::size_t i = 0; i < signs.size(); ++i)
    total = signs[i] == '+' ? total + terms[i + 1] : total - terms[i + 1];
  return total;
}

inline void append_number(const Vocab& vocab, std::int64_t value, TokenSeq& out) {
  for (char c : std::to_string(value)) out.push_back(vocab.require(std::string(1, c)));
}

inline TokenSeq render_answer(const Vocab& vocab, std::int64_t value) {
  TokenSeq out;
  append_number(vocab, value, out);
  return out;
}

}  // namespace detail

// Builds a task from an expression such as "3+4=" (the trailing '=' optional).
inline TaskInstance make_arithmetic_task(const Vocab& vocab, const std::string& expression,
                                         const GeneratorOptions& opts = {}) {
  std::vector<std::int64_t> operands;
  std::vector<char> ops;
  std::string number;
  for (char c : expression) {
    if (c >= '0' && c <= '9') {
      number += c;
    } else if (c == '+' || c == '-' || c == '*') {
      if (number.empty()) throw ConfigError("malformed expression '" + expression + "'");
      operands.push_back(std::stoll(number));
      number.clear();
      ops.push_back(c);
    } else if (c != '=') {
      throw ConfigError("unsupported character in expression '" + expression + "'");
    }
  }
  if (number.empty()) throw ConfigError("malformed expression '" + expression + "'");
  operands.push_back(std::stoll(number));

  std::int64_t modulus = 1;
  for (int i = 0; i < opts.answer_digits; ++i) modulus *= 10;
  const auto answer = detail::positive_mod(detail::evaluate_expression(operands, ops), modulus);

  TaskInstance task;
  std::string canonical;
  for (std::size_t i = 0; i < operands.size(); ++i) {
    detail::append_number(vocab, operands[i], task.prompt);
    canonical += std::to_string(operands[i]);
    if (i < ops.size()) {
      task.prompt.push_back(vocab.require(std::string(1, ops[i])));
      canonical += ops[i];
    }
  }
  task.prompt.push_back(vocab.require("="));
  task.id = "d" + std::to_string(ops.size()) + ":" + canonical;
  task.target = detail::render_answer(vocab, answer);
  task.max_response_len = opts.max_response_len;
  return task;
}

// Number of distinct prompts the generator can produce at a difficulty.
inline double prompt_space_size(int difficulty, const GeneratorOptions& opts) {
  return (opts.first_operand_max + 1.0) *
         std::pow(3.0 * (opts.operand_max + 1.0), static_cast<double>(difficulty));
}

// Deterministic, duplicate-free task generation. `difficulty` is the number of
// binary operations in each prompt.
inline std::vector<TaskInstance> generate_tasks(const Vocab& vocab, std::uint64_t seed, int count,
                                                int difficulty, const GeneratorOptions& opts = {}) {
  if (difficulty < 1 || difficulty > 4)
    throw ConfigError("difficulty must be in 1..4, got " + std::to_string(difficulty));
  if (count < 1) throw ConfigError("task count must be >= 1");
  if (opts.answer_digits < 1 || opts.answer_digits > 4)
    throw ConfigError("answer_digits must be in 1..4");
  if (static_cast<double>(count) > prompt_space_size(difficulty, opts))
    throw ConfigError("requested " + std::to_string(count) +
                      " distinct tasks but the generator range only has " +
                      std::to_string(static_cast<long long>(prompt_space_size(difficulty, opts))));

  static constexpr char kOps[] = {'+', '-', '*'};
  RngStream rng(derive_seed({seed, static_cast<std::uint64_t>(difficulty), 0x7A5CULL}));
  std::set<std::string> seen;
  std::vector<TaskInstance> tasks;
  tasks.reserve(static_cast<std::size_t>(count));
  while (static_cast<int>(tasks.size()) < count) {
    std::string expr = std::to_string(rng.below(static_cast<std::uint64_t>(opts.first_operand_max) + 1));
    for (int i = 0; i < difficulty; ++i) {
      expr += kOps[rng.below(3)];
      expr += std::to_string(rng.below(static_cast<std::uint64_t>(opts.operand_max) + 1));
    }
    if (!seen.insert(expr).second) continue;
    TaskInstance task = make_arithmetic_task(vocab, expr + "=", opts);
    if (static_cast<int>(task.prompt.size()) > opts.max_prompt_len)
      throw ConfigError("generated prompt exceeds max_prompt_len");
    tasks.push_back(std::move(task));
  }
  return tasks;
}

// Outcome verifier. The response must terminate in <eos>; the tokens between the
// last answer marker and <eos> must equal the target. Anything else scores 0.
inline int verify(const Vocab& vocab, const TaskInstance& task, std::span<const Token> response) {
  const auto marker = vocab.answer_marker();
  if (!marker || response.empty() || response.back() != vocab.eos()) return 0;
  const auto body = response.first(response.size() - 1);
  auto it = std::find(body.rbegin(), body.rend(), *marker);
  if (it == body.rend()) return 0;
  const auto start = static_cast<std::size_t>(body.rend() - it);
  const auto answer = body.subspan(start);
  return std::equal(answer.begin(), answer.end(), task.target.begin(), task.target.end()) ? 1 : 0;
}

enum class SplitName { kTrainFull, kTrain1H, kTrain2H, kEval };

inline std::string to_string(SplitName s) {
  switch (s) {
    case SplitName::kTrainFull: return "TRAIN_FULL";
    case SplitName::kTrain1H: return "TRAIN_1H";
    case SplitName::kTrain2H: return "TRAIN_2H";
    case SplitName::kEval: return "EVAL";
  }
  return "?";
}

inline SplitName split_from_string(const std::string& s) {
  for (auto n : {SplitName::kTrainFull, SplitName::kTrain1H, SplitName::kTrain2H, SplitName::kEval})
    if (to_string(n) == s) return n;
  throw ConfigError("unknown split '" + s + "' (expected TRAIN_FULL, TRAIN_1H, TRAIN_2H or EVAL)");
}

struct TaskSplit {
  SplitName name = SplitName::kTrainFull;
  std::vector<std::string> instance_ids;
};

struct SplitSet {
  TaskSplit train_full{SplitName::kTrainFull, {}};
  TaskSplit train_1h{SplitName::kTrain1H, {}};
  TaskSplit train_2h{SplitName::kTrain2H, {}};
  TaskSplit eval{SplitName::kEval, {}};

  const TaskSplit& get(SplitName n) const {
    switch (n) {
      case SplitName::kTrainFull: return train_full;
      case SplitName::kTrain1H: return train_1h;
      case SplitName::kTrain2H: return train_2h;
      case SplitName::kEval: return eval;
    }
    return train_full;
  }
};

// EVAL is drawn first; the remaining tasks are TRAIN_FULL, halved into 1H/2H
// (1H takes the extra task when the count is odd).
inline SplitSet make_splits(std::span<const TaskInstance> tasks, std::uint64_t split_seed,
                            double eval_fraction) {
  if (tasks.size() < 4) throw ConfigError("make_splits needs at least 4 tasks");
  if (!(eval_fraction > 0.0 && eval_fraction <= 0.5))
    throw ConfigError("eval_fraction must be in (0, 0.5]");
  const std::size_t n = tasks.size();
  auto n_eval = static_cast<std::size_t>(std::llround(static_cast<double>(n) * eval_fraction));
  n_eval = std::clamp<std::size_t>(n_eval, 1, n - 2);

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  RngStream rng(derive_seed({split_seed, 0xE7A1ULL}));
  rng.shuffle(std::span<std::size_t>(order));

  SplitSet out;
  std::vector<bool> is_eval(n, false);
  for (std::size_t i = 0; i < n_eval; ++i) is_eval[order[i]] = true;
  for (std::size_t i = 0; i < n; ++i) {
    (is_eval[i] ? out.eval : out.train_full).instance_ids.push_back(tasks[i].id);
  }
  // 1H/2H depends only on (TRAIN_FULL, split_seed).
  std::vector<std::string> pool = out.train_full.instance_ids;
  RngStream half_rng(derive_seed({split_seed, 0x1A2BULL}));
  half_rng.shuffle(std::span<std::string>(pool));
  const std::size_t n_1h = (pool.size() + 1) / 2;
  std::set<std::string> in_1h(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_1h));
  for (const auto& id : out.train_full.instance_ids)
    (in_1h.count(id) ? out.train_1h : out.train_2h).instance_ids.push_back(id);
  return out;
}

// Id-indexed task collection.
class TaskSet {
 public:
  TaskSet() = default;
  explicit TaskSet(std::vector<TaskInstance> tasks) : tasks_(std::move(tasks)) {
    for (std::size_t i = 0; i < tasks_.size(); ++i) {
      if (!index_.emplace(tasks_[i].id, i).second)
        throw ConfigError("duplicate task id '" + tasks_[i].id + "'");
    }
  }

  const std::vector<TaskInstance>& all() const { return tasks_; }
  std::size_t size() const { return tasks_.size(); }

  const TaskInstance& at(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ConfigError("unknown task id '" + id + "'");
    return tasks_[it->second];
  }

  std::vector<const TaskInstance*> select(const TaskSplit& split) const {
    std::vector<const TaskInstance*> out;
    out.reserve(split.instance_ids.size());
    for (const auto& id : split.instance_ids) out.push_back(&at(id));
    return out;
  }

 private:
  std::vector<TaskInstance> tasks_;
  std::map<std::string, std::size_t> index_;
};

// Line-delimited JSON task file: one object per line with fields
// schema_version, id, prompt, target, max_response_len.
inline constexpr int kTaskFileSchemaVersion = 1;

inline void write_tasks(const std::string& path, std::span<const TaskInstance> tasks) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot open '" + path + "' for writing");
  for (const auto& t : tasks) {
    nlohmann::json j{{"schema_version", kTaskFileSchemaVersion},
                     {"id", t.id},
                     {"prompt", t.prompt},
                     {"target", t.target},
                     {"max_response_len", t.max_response_len}};
    out << j.dump() << '\n';
  }
}

inline std::vector<TaskInstance> read_tasks(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw RuntimeFailure("cannot open '" + path + "'");
  std::vector<TaskInstance> tasks;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto j = nlohmann::json::parse(line);
    if (j.at("schema_version").get<int>() != kTaskFileSchemaVersion)
      throw RuntimeFailure("task file schema version mismatch in '" + path + "'");
    TaskInstance t{j.at("id").get<std::string>(), j.at("prompt").get<TokenSeq>(),
                   j.at("target").get<TokenSeq>(), j.at("max_response_len").get<int>()};
    for (Token tok : t.prompt)
      if (!vocab.contains(tok)) throw RuntimeFailure("task '" + t.id + "' has out-of-vocab token");
    tasks.push_back(std::move(t));
  }
  return tasks;
}

}  // namespace opdlab
