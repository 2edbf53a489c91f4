#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "opdlab/distill.hpp"
#include "opdlab/errors.hpp"
#include "opdlab/grpo.hpp"
#include "opdlab/policy.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab {

using Json = nlohmann::ordered_json;

enum class StageKind { kTeacherRl, kTeacherSftBuild, kFkl, kSampleSft, kOpd, kStudentRl, kStudentRlReplay };
enum class TeacherVariant { kRaw, kSft, kRl };

inline std::string to_string(StageKind s) {
  switch (s) {
    case StageKind::kTeacherRl: return "TEACHER_RL";
    case StageKind::kTeacherSftBuild: return "TEACHER_SFT_BUILD";
    case StageKind::kFkl: return "FKL";
    case StageKind::kSampleSft: return "SAMPLE_SFT";
    case StageKind::kOpd: return "OPD";
    case StageKind::kStudentRl: return "STUDENT_RL";
    case StageKind::kStudentRlReplay: return "STUDENT_RL_REPLAY";
  }
  return "?";
}

inline std::string to_string(TeacherVariant v) {
  switch (v) {
    case TeacherVariant::kRaw: return "RAW";
    case TeacherVariant::kSft: return "SFT";
    case TeacherVariant::kRl: return "RL";
  }
  return "?";
}

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "ADAM" : "SGD"; }

namespace detail {

template <typename E>
E parse_enum(const std::string& s, std::initializer_list<E> values, const std::string& what) {
  std::string options;
  for (E v : values) {
    if (to_string(v) == s) return v;
    options += (options.empty() ? "" : ", ") + to_string(v);
  }
  throw ConfigError("unknown " + what + " '" + s + "' (expected one of " + options + ")");
}

}  // namespace detail

inline StageKind stage_from_string(const std::string& s) {
  using S = StageKind;
  return detail::parse_enum(s, {S::kTeacherRl, S::kTeacherSftBuild, S::kFkl, S::kSampleSft, S::kOpd, S::kStudentRl,
                                S::kStudentRlReplay},
                            "stage");
}
inline TeacherVariant variant_from_string(const std::string& s) {
  return detail::parse_enum(s, {TeacherVariant::kRaw, TeacherVariant::kSft, TeacherVariant::kRl}, "teacher variant");
}
inline OptimizerKind optimizer_from_string(const std::string& s) {
  return detail::parse_enum(s, {OptimizerKind::kSgd, OptimizerKind::kAdam}, "optimizer");
}
inline AnchorRefresh anchor_from_string(const std::string& s) {
  return detail::parse_enum(s, {AnchorRefresh::kEveryStep, AnchorRefresh::kFixed}, "anchor refresh");
}
inline OpdEstimator estimator_from_string(const std::string& s) {
  return detail::parse_enum(s, {OpdEstimator::kExact, OpdEstimator::kImplicitReward}, "opd estimator");
}

// Stages that consume verifier labels count against the labeled-data budget.
inline bool uses_labels(StageKind s) {
  return s == StageKind::kTeacherRl || s == StageKind::kTeacherSftBuild || s == StageKind::kStudentRl ||
         s == StageKind::kStudentRlReplay;
}
inline bool is_teacher_stage(StageKind s) { return s == StageKind::kTeacherRl || s == StageKind::kTeacherSftBuild; }
inline bool is_bridge_stage(StageKind s) {
  return s == StageKind::kFkl || s == StageKind::kSampleSft || s == StageKind::kOpd;
}
inline bool is_student_rl(StageKind s) { return s == StageKind::kStudentRl || s == StageKind::kStudentRlReplay; }

struct StageConfig {
  StageKind stage = StageKind::kFkl;
  SplitName data = SplitName::kTrainFull;
  bool enabled = true;
  bool operator==(const StageConfig&) const = default;
};

struct TaskSettings {
  int count = 1000;
  int difficulty = 1;
  double eval_fraction = 0.2;
  std::uint64_t pool_seed = 7;  // the task pool is fixed; splits follow the run seed
  GeneratorOptions gen;
};

struct ModelSettings {
  PolicySpec spec{4, 16, 1.0};
  double init_scale = 0.5;
};

// Generic format pass that turns a random table into the raw teacher:
// "d # d <eos>" with d uniform, no verifier filtering.
struct PretrainSettings {
  int samples_per_prompt = 4;
  FklConfig train{8, 10, 16, 0.1, 1.0, OptimizerKind::kAdam};
};

struct SftBuildSettings {
  double beta = 0.3;
  int traces_per_prompt = 4;
  FklConfig train{8, 8, 16, 0.1, 1.0, OptimizerKind::kAdam};
};

struct RlSettings {
  GrpoConfig grpo;
  std::int64_t batches = 400;
};

struct EvalSettings {
  int k = 16;
  std::uint64_t decode_seed = 2024;
  std::vector<SplitName> splits{SplitName::kEval};
  bool diagnostics = true;
  int probes = 6;
  double diag_beta = 1.0;
  std::int64_t diag_samples = 2000;
};

struct OutputSettings {
  std::string dir;  // empty: nothing is written
  bool save_checkpoints = true;
};

struct RunConfig {
  std::string run_id = "run";
  std::uint64_t seed = 1;
  TaskSettings tasks;
  ModelSettings teacher;
  TeacherVariant variant = TeacherVariant::kRl;
  ModelSettings student;
  PretrainSettings pretrain;
  RlSettings teacher_rl;
  SftBuildSettings sft_build;
  FklConfig fkl{8, 10, 16, 0.3, 1.0, OptimizerKind::kAdam};
  bool fkl_use_cache = false;
  OpdConfig opd;
  RlSettings grpo;  // student-side RL (Stage 3 and the cold baseline)
  std::vector<StageConfig> stages;
  EvalSettings eval;
  OutputSettings output;

  RunConfig() {
    teacher_rl.grpo.learning_rate = 0.1;
    teacher_rl.grpo.optimizer = OptimizerKind::kAdam;
    teacher_rl.batches = 1000;
    grpo.grpo.learning_rate = 0.1;
    grpo.grpo.optimizer = OptimizerKind::kAdam;
    grpo.batches = 400;
    opd.learning_rate = 0.3;
    opd.optimizer = OptimizerKind::kAdam;
    opd.steps = 400;
    stages = {{StageKind::kTeacherRl, SplitName::kTrainFull, true},
              {StageKind::kFkl, SplitName::kTrainFull, true},
              {StageKind::kSampleSft, SplitName::kTrainFull, false},
              {StageKind::kOpd, SplitName::kTrainFull, true},
              {StageKind::kStudentRl, SplitName::kTrainFull, false}};
  }

  const StageConfig* find(StageKind kind) const {
    for (const auto& s : stages)
      if (s.stage == kind) return &s;
    return nullptr;
  }
  StageConfig* find(StageKind kind) {
    for (auto& s : stages)
      if (s.stage == kind) return &s;
    return nullptr;
  }
  bool enabled(StageKind kind) const {
    const auto* s = find(kind);
    return s && s->enabled;
  }

  // Throws ConfigError; called before any compute.
  void validate() const;
};

// ---------------------------------------------------------------- JSON

namespace detail {

inline Json fkl_to_json(const FklConfig& c) {
  return Json{{"rollouts_per_prompt", c.rollouts_per_prompt}, {"epochs", c.epochs},
              {"prompts_per_batch", c.prompts_per_batch},     {"learning_rate", c.learning_rate},
              {"grad_clip_norm", c.grad_clip_norm},           {"optimizer", to_string(c.optimizer)}};
}

inline Json grpo_to_json(const RlSettings& r) {
  const auto& g = r.grpo;
  return Json{{"group_size", g.group_size},
              {"prompts_per_batch", g.prompts_per_batch},
              {"learning_rate", g.learning_rate},
              {"clip_ratio", g.clip_ratio},
              {"kl_coeff", g.kl_coeff},
              {"epochs_per_batch", g.epochs_per_batch},
              {"minibatch_size", g.minibatch_size},
              {"grad_clip_norm", g.grad_clip_norm},
              {"optimizer", to_string(g.optimizer)},
              {"batches", r.batches}};
}

inline Json model_to_json(const ModelSettings& m) {
  return Json{{"context_len", m.spec.context_len}, {"temperature", m.spec.temperature}, {"init_scale", m.init_scale}};
}

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) {
    try {
      out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
  }
}

template <typename E, typename Parse>
void read_enum(const Json& j, const char* key, E& out, Parse parse) {
  if (j.contains(key)) {
    if (!j.at(key).is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
    out = parse(j.at(key).get<std::string>());
  }
}

inline void fkl_from_json(const Json& j, FklConfig& c) {
  read(j, "rollouts_per_prompt", c.rollouts_per_prompt);
  read(j, "epochs", c.epochs);
  read(j, "prompts_per_batch", c.prompts_per_batch);
  read(j, "learning_rate", c.learning_rate);
  read(j, "grad_clip_norm", c.grad_clip_norm);
  read_enum(j, "optimizer", c.optimizer, optimizer_from_string);
}

inline void grpo_from_json(const Json& j, RlSettings& r) {
  auto& g = r.grpo;
  read(j, "group_size", g.group_size);
  read(j, "prompts_per_batch", g.prompts_per_batch);
  read(j, "learning_rate", g.learning_rate);
  read(j, "clip_ratio", g.clip_ratio);
  read(j, "kl_coeff", g.kl_coeff);
  read(j, "epochs_per_batch", g.epochs_per_batch);
  read(j, "minibatch_size", g.minibatch_size);
  read(j, "grad_clip_norm", g.grad_clip_norm);
  read_enum(j, "optimizer", g.optimizer, optimizer_from_string);
  read(j, "batches", r.batches);
}

inline void model_from_json(const Json& j, ModelSettings& m) {
  read(j, "context_len", m.spec.context_len);
  read(j, "temperature", m.spec.temperature);
  read(j, "init_scale", m.init_scale);
}

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  using namespace detail;
  Json stages = Json::array();
  for (const auto& s : c.stages)
    stages.push_back(Json{{"stage", to_string(s.stage)}, {"data", to_string(s.data)}, {"enabled", s.enabled}});
  Json splits = Json::array();
  for (auto s : c.eval.splits) splits.push_back(to_string(s));
  Json fkl = fkl_to_json(c.fkl);
  fkl["use_cache"] = c.fkl_use_cache;
  const auto& o = c.opd;
  return Json{
      {"run_id", c.run_id},
      {"seed", c.seed},
      {"tasks",
       {{"count", c.tasks.count},
        {"difficulty", c.tasks.difficulty},
        {"eval_fraction", c.tasks.eval_fraction},
        {"pool_seed", c.tasks.pool_seed},
        {"first_operand_max", c.tasks.gen.first_operand_max},
        {"operand_max", c.tasks.gen.operand_max},
        {"answer_digits", c.tasks.gen.answer_digits},
        {"max_response_len", c.tasks.gen.max_response_len},
        {"max_prompt_len", c.tasks.gen.max_prompt_len}}},
      {"teacher", [&] {
         Json t = model_to_json(c.teacher);
         t["variant"] = to_string(c.variant);
         return t;
       }()},
      {"student", model_to_json(c.student)},
      {"pretrain", [&] {
         Json p = fkl_to_json(c.pretrain.train);
         p.erase("rollouts_per_prompt");
         p["samples_per_prompt"] = c.pretrain.samples_per_prompt;
         return p;
       }()},
      {"teacher_rl", grpo_to_json(c.teacher_rl)},
      {"sft_build", [&] {
         Json p = fkl_to_json(c.sft_build.train);
         p.erase("rollouts_per_prompt");
         p["beta"] = c.sft_build.beta;
         p["traces_per_prompt"] = c.sft_build.traces_per_prompt;
         return p;
       }()},
      {"fkl", fkl},
      {"opd",
       {{"rollouts_per_prompt", o.rollouts_per_prompt},
        {"steps", o.steps},
        {"prompts_per_batch", o.prompts_per_batch},
        {"learning_rate", o.learning_rate},
        {"grad_clip_norm", o.grad_clip_norm},
        {"optimizer", to_string(o.optimizer)},
        {"beta", o.beta},
        {"anchor", to_string(o.anchor)},
        {"estimator", to_string(o.estimator)}}},
      {"grpo", grpo_to_json(c.grpo)},
      {"stages", stages},
      {"eval",
       {{"k", c.eval.k},
        {"decode_seed", c.eval.decode_seed},
        {"splits", splits},
        {"diagnostics", c.eval.diagnostics},
        {"probes", c.eval.probes},
        {"diag_beta", c.eval.diag_beta},
        {"diag_samples", c.eval.diag_samples}}},
      {"output", {{"dir", c.output.dir}, {"save_checkpoints", c.output.save_checkpoints}}}};
}

// ---------------------------------------------------------------- key checking

namespace detail {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

// Dotted leaf paths of a schema document; array elements appear as "<i>".
inline void collect_paths(const Json& j, const std::string& prefix, std::vector<std::string>& out) {
  if (j.is_object() && !j.empty()) {
    for (const auto& [k, v] : j.items()) collect_paths(v, prefix.empty() ? k : prefix + "." + k, out);
  } else if (j.is_array() && !j.empty() && j.front().is_object()) {
    collect_paths(j.front(), prefix + ".<i>", out);
  } else {
    out.push_back(prefix);
  }
}

inline std::string normalize_indices(const std::string& path) {
  std::string out, part;
  auto flush = [&] {
    const bool numeric = !part.empty() && std::all_of(part.begin(), part.end(), [](char ch) { return ch >= '0' && ch <= '9'; });
    out += (out.empty() ? "" : ".") + (numeric ? std::string("<i>") : part);
    part.clear();
  };
  for (char ch : path) {
    if (ch == '.') flush();
    else part += ch;
  }
  flush();
  return out;
}

inline std::string nearest_key(const std::string& key, const std::vector<std::string>& candidates) {
  const std::string probe = normalize_indices(key);
  std::string best;
  std::size_t best_d = SIZE_MAX;
  for (const auto& c : candidates) {
    const auto d = edit_distance(probe, c);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

inline void check_keys(const Json& input, const Json& schema, const std::string& prefix,
                       const std::vector<std::string>& all_paths) {
  if (input.is_object() && schema.is_object()) {
    for (const auto& [k, v] : input.items()) {
      const std::string path = prefix.empty() ? k : prefix + "." + k;
      if (!schema.contains(k))
        throw ConfigError("unknown config key '" + path + "' (nearest valid key: '" + nearest_key(path, all_paths) +
                          "')");
      check_keys(v, schema.at(k), path, all_paths);
    }
  } else if (input.is_array() && schema.is_array() && !schema.empty() && schema.front().is_object()) {
    for (std::size_t i = 0; i < input.size(); ++i)
      check_keys(input[i], schema.front(), prefix + "." + std::to_string(i), all_paths);
  }
}

}  // namespace detail

inline std::vector<std::string> config_key_paths() {
  std::vector<std::string> out;
  detail::collect_paths(to_json(RunConfig{}), "", out);
  return out;
}

// Strict reader: unknown keys are rejected with the nearest valid key; absent
// keys keep their defaults. Validation is left to the caller.
inline RunConfig run_config_from_json(const Json& j) {
  using namespace detail;
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  check_keys(j, to_json(RunConfig{}), "", config_key_paths());
  RunConfig c;
  read(j, "run_id", c.run_id);
  read(j, "seed", c.seed);
  if (j.contains("tasks")) {
    const auto& t = j.at("tasks");
    read(t, "count", c.tasks.count);
    read(t, "difficulty", c.tasks.difficulty);
    read(t, "eval_fraction", c.tasks.eval_fraction);
    read(t, "pool_seed", c.tasks.pool_seed);
    read(t, "first_operand_max", c.tasks.gen.first_operand_max);
    read(t, "operand_max", c.tasks.gen.operand_max);
    read(t, "answer_digits", c.tasks.gen.answer_digits);
    read(t, "max_response_len", c.tasks.gen.max_response_len);
    read(t, "max_prompt_len", c.tasks.gen.max_prompt_len);
  }
  if (j.contains("teacher")) {
    model_from_json(j.at("teacher"), c.teacher);
    read_enum(j.at("teacher"), "variant", c.variant, variant_from_string);
  }
  if (j.contains("student")) model_from_json(j.at("student"), c.student);
  if (j.contains("pretrain")) {
    fkl_from_json(j.at("pretrain"), c.pretrain.train);
    read(j.at("pretrain"), "samples_per_prompt", c.pretrain.samples_per_prompt);
  }
  if (j.contains("teacher_rl")) grpo_from_json(j.at("teacher_rl"), c.teacher_rl);
  if (j.contains("sft_build")) {
    const auto& s = j.at("sft_build");
    fkl_from_json(s, c.sft_build.train);
    read(s, "beta", c.sft_build.beta);
    read(s, "traces_per_prompt", c.sft_build.traces_per_prompt);
  }
  if (j.contains("fkl")) {
    fkl_from_json(j.at("fkl"), c.fkl);
    read(j.at("fkl"), "use_cache", c.fkl_use_cache);
  }
  if (j.contains("opd")) {
    const auto& o = j.at("opd");
    read(o, "rollouts_per_prompt", c.opd.rollouts_per_prompt);
    read(o, "steps", c.opd.steps);
    read(o, "prompts_per_batch", c.opd.prompts_per_batch);
    read(o, "learning_rate", c.opd.learning_rate);
    read(o, "grad_clip_norm", c.opd.grad_clip_norm);
    read_enum(o, "optimizer", c.opd.optimizer, optimizer_from_string);
    read(o, "beta", c.opd.beta);
    read_enum(o, "anchor", c.opd.anchor, anchor_from_string);
    read_enum(o, "estimator", c.opd.estimator, estimator_from_string);
  }
  if (j.contains("grpo")) grpo_from_json(j.at("grpo"), c.grpo);
  if (j.contains("stages")) {
    if (!j.at("stages").is_array()) throw ConfigError("config key 'stages' must be a list");
    c.stages.clear();
    for (const auto& s : j.at("stages")) {
      StageConfig sc;
      read_enum(s, "stage", sc.stage, stage_from_string);
      read_enum(s, "data", sc.data, split_from_string);
      read(s, "enabled", sc.enabled);
      c.stages.push_back(sc);
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    read(e, "k", c.eval.k);
    read(e, "decode_seed", c.eval.decode_seed);
    if (e.contains("splits")) {
      if (!e.at("splits").is_array()) throw ConfigError("config key 'eval.splits' must be a list");
      c.eval.splits.clear();
      for (const auto& s : e.at("splits")) {
        if (!s.is_string()) throw ConfigError("config key 'eval.splits' must list split names");
        c.eval.splits.push_back(split_from_string(s.get<std::string>()));
      }
    }
    read(e, "diagnostics", c.eval.diagnostics);
    read(e, "probes", c.eval.probes);
    read(e, "diag_beta", c.eval.diag_beta);
    read(e, "diag_samples", c.eval.diag_samples);
  }
  if (j.contains("output")) {
    read(j.at("output"), "dir", c.output.dir);
    read(j.at("output"), "save_checkpoints", c.output.save_checkpoints);
  }
  return c;
}

// `path` is dotted ("grpo.clip_ratio", "stages.2.enabled"). The value text is
// parsed as JSON when possible and taken as a bare string otherwise.
inline void apply_override(Json& doc, const std::string& path, const std::string& value_text) {
  Json value;
  try {
    value = Json::parse(value_text);
  } catch (const nlohmann::json::exception&) {
    value = value_text;
  }
  const auto paths = config_key_paths();
  Json* node = &doc;
  std::string walked, part;
  std::vector<std::string> parts;
  for (char ch : path) {
    if (ch == '.') {
      parts.push_back(part);
      part.clear();
    } else {
      part += ch;
    }
  }
  parts.push_back(part);
  auto unknown = [&] {
    return ConfigError("unknown config key '" + path + "' (nearest valid key: '" + detail::nearest_key(path, paths) +
                       "')");
  };
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& p = parts[i];
    const bool last = i + 1 == parts.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        std::size_t used = 0;
        idx = std::stoul(p, &used);
        if (used != p.size()) throw unknown();
      } catch (const std::logic_error&) {
        throw unknown();
      }
      if (idx >= node->size()) throw ConfigError("index " + p + " out of range in '" + path + "'");
      node = &(*node)[idx];
    } else if (node->is_object()) {
      if (!node->contains(p)) throw unknown();
      node = &(*node)[p];
    } else {
      throw unknown();
    }
    if (last) *node = value;
  }
}

// Leaf-level differences between two configs, as dotted paths.
inline std::vector<std::string> config_diff(const RunConfig& a, const RunConfig& b) {
  std::vector<std::string> out;
  const auto patch = Json::diff(to_json(a), to_json(b));
  for (const auto& op : patch) {
    std::string p = op.at("path").get<std::string>();
    std::replace(p.begin(), p.end(), '/', '.');
    if (!p.empty() && p.front() == '.') p.erase(0, 1);
    out.push_back(p);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// ---------------------------------------------------------------- validation

inline void RunConfig::validate() const {
  if (run_id.empty() || run_id.find_first_of("/\\ ") != std::string::npos)
    throw ConfigError("run_id must be non-empty without slashes or spaces");
  if (tasks.count < 4) throw ConfigError("tasks.count must be >= 4");
  if (tasks.difficulty < 1 || tasks.difficulty > 4) throw ConfigError("tasks.difficulty must be in [1, 4]");
  if (!(tasks.eval_fraction > 0.0 && tasks.eval_fraction <= 0.5))
    throw ConfigError("tasks.eval_fraction must lie in (0, 0.5]");
  auto check_model = [](const ModelSettings& m, const std::string& who) {
    try {
      PolicySpec s = m.spec;
      s.vocab_size = 16;
      s.validate();
    } catch (const ConfigError& e) {
      throw ConfigError(who + ": " + e.what());
    }
    if (!(m.init_scale >= 0.0)) throw ConfigError(who + ".init_scale must be >= 0");
  };
  check_model(teacher, "teacher");
  check_model(student, "student");
  auto check_fkl = [](const FklConfig& f, const std::string& who) {
    if (f.epochs < 1 || f.prompts_per_batch < 1 || f.rollouts_per_prompt < 1)
      throw ConfigError(who + " counts must be >= 1");
    if (!(f.learning_rate >= 0.0) || !(f.grad_clip_norm >= 0.0))
      throw ConfigError(who + " learning_rate and grad_clip_norm must be >= 0");
  };
  check_fkl(pretrain.train, "pretrain");
  check_fkl(sft_build.train, "sft_build");
  check_fkl(fkl, "fkl");
  if (pretrain.samples_per_prompt < 1) throw ConfigError("pretrain.samples_per_prompt must be >= 1");
  if (!(sft_build.beta > 0.0)) throw ConfigError("sft_build.beta must be > 0");
  if (sft_build.traces_per_prompt < 1) throw ConfigError("sft_build.traces_per_prompt must be >= 1");
  BridgeConfig{fkl, opd, fkl_use_cache, seed}.validate();
  teacher_rl.grpo.validate();
  grpo.grpo.validate();
  if (teacher_rl.batches < 1) throw ConfigError("teacher_rl.batches must be >= 1");
  if (grpo.batches < 1) throw ConfigError("grpo.batches must be >= 1");
  if (eval.k < 1) throw ConfigError("eval.k must be >= 1");
  if (eval.splits.empty()) throw ConfigError("eval.splits must name at least one split");
  if (eval.probes < 1) throw ConfigError("eval.probes must be >= 1");
  if (!(eval.diag_beta > 0.0)) throw ConfigError("eval.diag_beta must be > 0");
  if (eval.diag_samples < 1) throw ConfigError("eval.diag_samples must be >= 1");

  // Stage list: each kind at most once, training stages never read EVAL, and
  // the workflow partial order holds.
  std::set<StageKind> seen;
  int last_teacher = -1, first_bridge = -1, fkl_pos = -1, opd_pos = -1, sft_pos = -1, first_rl = -1, last_other = -1;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    const int pos = static_cast<int>(i);
    if (!seen.insert(s.stage).second) throw ConfigError("stage " + to_string(s.stage) + " listed twice");
    if (s.data == SplitName::kEval)
      throw ConfigError("stage " + to_string(s.stage) + " cannot train on the EVAL split");
    if (is_teacher_stage(s.stage)) last_teacher = pos;
    if (is_bridge_stage(s.stage) && first_bridge < 0) first_bridge = pos;
    if (s.stage == StageKind::kFkl) fkl_pos = pos;
    if (s.stage == StageKind::kOpd) opd_pos = pos;
    if (s.stage == StageKind::kSampleSft) sft_pos = pos;
    if (is_student_rl(s.stage)) {
      if (first_rl < 0) first_rl = pos;
    } else {
      last_other = pos;
    }
  }
  if (last_teacher >= 0 && first_bridge >= 0 && last_teacher > first_bridge)
    throw ConfigError("stage order: teacher stages must precede FKL/SAMPLE_SFT/OPD");
  if (fkl_pos >= 0 && opd_pos >= 0 && fkl_pos > opd_pos) throw ConfigError("stage order: FKL must precede OPD");
  if (sft_pos >= 0 && opd_pos >= 0 && sft_pos > opd_pos) throw ConfigError("stage order: SAMPLE_SFT must precede OPD");
  if (first_rl >= 0 && last_other > first_rl) throw ConfigError("stage order: student RL stages must come last");
  if (enabled(StageKind::kTeacherRl) && enabled(StageKind::kTeacherSftBuild))
    throw ConfigError("TEACHER_RL and TEACHER_SFT_BUILD cannot both be enabled");
  const TeacherVariant implied = enabled(StageKind::kTeacherRl)        ? TeacherVariant::kRl
                                 : enabled(StageKind::kTeacherSftBuild) ? TeacherVariant::kSft
                                                                        : TeacherVariant::kRaw;
  if (implied != variant)
    throw ConfigError("teacher.variant is " + to_string(variant) + " but the enabled stages build a " +
                      to_string(implied) + " teacher");
  if (variant != TeacherVariant::kRaw) {
    bool any_bridge = false;
    for (const auto& s : stages) any_bridge |= s.enabled && is_bridge_stage(s.stage);
    if (!any_bridge) throw ConfigError("a trained teacher is configured but no FKL/SAMPLE_SFT/OPD stage uses it");
  }
}

inline RunConfig load_run_config(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace opdlab
