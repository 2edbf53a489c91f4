#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "opdlab/distill.hpp"
#include "opdlab/errors.hpp"
#include "opdlab/eval.hpp"
#include "opdlab/format.hpp"
#include "opdlab/grpo.hpp"
#include "opdlab/oracle.hpp"
#include "opdlab/policy.hpp"
#include "opdlab/random.hpp"
#include "opdlab/run_config.hpp"
#include "opdlab/tasks.hpp"

namespace opdlab {

// ---------------------------------------------------------------- budget ledger

struct LedgerEntry {
  std::string stage;
  SplitName data = SplitName::kTrainFull;
  bool enabled = false;
  bool labeled = false;
  std::int64_t distinct_prompts = 0;
  std::int64_t prompt_draws = 0;    // prompts drawn from the split, repeats included
  std::int64_t prompt_updates = 0;  // draws times passes over each draw
  std::int64_t rollouts = 0;
  std::int64_t optimizer_steps = 0;
  bool operator==(const LedgerEntry&) const = default;
};

struct BudgetLedger {
  std::vector<LedgerEntry> entries;
  std::set<std::string> labeled_ids;  // every prompt whose verifier label some stage consumed

  LedgerEntry total() const {
    LedgerEntry t;
    t.stage = "TOTAL";
    t.enabled = true;
    for (const auto& e : entries) {
      t.prompt_draws += e.prompt_draws;
      t.prompt_updates += e.prompt_updates;
      t.rollouts += e.rollouts;
      t.optimizer_steps += e.optimizer_steps;
      t.distinct_prompts += e.distinct_prompts;
    }
    return t;
  }
  std::int64_t labeled_prompt_draws() const {
    std::int64_t n = 0;
    for (const auto& e : entries)
      if (e.labeled) n += e.prompt_draws;
    return n;
  }
  std::int64_t distinct_labeled_prompts() const { return static_cast<std::int64_t>(labeled_ids.size()); }
  const LedgerEntry* find(const std::string& stage) const {
    for (const auto& e : entries)
      if (e.stage == stage) return &e;
    return nullptr;
  }

  void write_csv(std::ostream& os) const {
    os << "schema_version,stage,data,enabled,labeled,distinct_prompts,prompt_draws,prompt_updates,rollouts,"
          "optimizer_steps\n";
    auto row = [&](const LedgerEntry& e, const std::string& data) {
      os << kCsvSchemaVersion << ',' << e.stage << ',' << data << ',' << (e.enabled ? 1 : 0) << ','
         << (e.labeled ? 1 : 0) << ',' << e.distinct_prompts << ',' << e.prompt_draws << ',' << e.prompt_updates << ','
         << e.rollouts << ',' << e.optimizer_steps << '\n';
    };
    for (const auto& e : entries) row(e, to_string(e.data));
    row(total(), "ALL");
    LedgerEntry lab;
    lab.stage = "LABELED";
    lab.enabled = true;
    lab.labeled = true;
    lab.distinct_prompts = distinct_labeled_prompts();
    lab.prompt_draws = labeled_prompt_draws();
    for (const auto& e : entries)
      if (e.labeled) {
        lab.prompt_updates += e.prompt_updates;
        lab.rollouts += e.rollouts;
        lab.optimizer_steps += e.optimizer_steps;
      }
    row(lab, "ALL");
  }
};

// ---------------------------------------------------------------- environment

// Everything a run derives from (tasks, seed): the pool, its splits and probes.
struct RunEnvironment {
  Vocab vocab = Vocab::arithmetic();
  TaskSet tasks;
  SplitSet splits;

  std::vector<const TaskInstance*> select(SplitName n) const { return tasks.select(splits.get(n)); }
  // Fixed small enumerable subset of EVAL: its first ids in split order.
  std::vector<const TaskInstance*> probes(int count) const {
    auto ev = select(SplitName::kEval);
    if (static_cast<int>(ev.size()) > count) ev.resize(static_cast<std::size_t>(count));
    return ev;
  }
};

inline RunEnvironment make_environment(const RunConfig& cfg) {
  RunEnvironment env;
  auto all = generate_tasks(env.vocab, cfg.tasks.pool_seed, cfg.tasks.count, cfg.tasks.difficulty, cfg.tasks.gen);
  env.splits = make_splits(all, derive_seed({cfg.seed, hash_string("splits")}), cfg.tasks.eval_fraction);
  env.tasks = TaskSet(std::move(all));
  return env;
}

inline std::uint64_t stage_seed(const RunConfig& cfg, const std::string& what) {
  return derive_seed({cfg.seed, hash_string(what)});
}

// ---------------------------------------------------------------- teacher variants

struct TeacherBuild {
  TeacherVariant variant = TeacherVariant::kRaw;
  Policy raw;
  Policy teacher;  // equals `raw` for the RAW variant
  std::vector<LedgerEntry> ledger;
  std::set<std::string> labeled_ids;
  std::map<std::string, std::string> metrics;  // file name -> CSV text
};

// RAW: random table plus a generic format pass ("d # d <eos>", d uniform, no
// verifier). SFT: RAW plus hard targets on verifier-correct traces drawn from
// pi*_R over RAW. RL: RAW plus GRPO against RAW as the KL reference.
inline TeacherBuild build_teacher_variant(TeacherVariant variant, const RunConfig& cfg,
                                          const std::vector<const TaskInstance*>& data, const Vocab& vocab,
                                          SplitName data_name = SplitName::kTrainFull) {
  if (data.empty()) throw ConfigError("teacher build needs a non-empty split");
  PolicySpec spec = cfg.teacher.spec;
  spec.vocab_size = vocab.size();
  const auto marker = vocab.answer_marker();
  if (!marker) throw ConfigError("teacher pretraining needs an answer marker in the vocabulary");

  TeacherBuild out{variant, init_policy(spec, stage_seed(cfg, "teacher-init"), cfg.teacher.init_scale,
                                        RoleTag::kTeacherRaw),
                   Policy{}, {}, {}, {}};
  {
    std::vector<SftExample> corpus;
    RngStream rng(stage_seed(cfg, "pretrain-corpus"));
    const int content = vocab.size() - 1;
    std::vector<Token> digits;
    for (Token t = 0; t < content; ++t)
      if (vocab.name(t).size() == 1 && vocab.name(t)[0] >= '0' && vocab.name(t)[0] <= '9') digits.push_back(t);
    if (digits.empty()) throw ConfigError("teacher pretraining needs digit tokens");
    for (const auto* task : data)
      for (int i = 0; i < cfg.pretrain.samples_per_prompt; ++i) {
        TokenSeq body;
        for (std::size_t d = 0; d < task->target.size(); ++d) body.push_back(digits[rng.below(digits.size())]);
        TokenSeq resp = body;
        resp.push_back(*marker);
        resp.insert(resp.end(), body.begin(), body.end());
        resp.push_back(vocab.eos());
        corpus.push_back({task->id, task->prompt, resp});
      }
    const auto rep = hard_target_train(out.raw, corpus, cfg.pretrain.train, stage_seed(cfg, "pretrain"), "pretrain");
    out.ledger.push_back({"TEACHER_PRETRAIN", data_name, true, false, rep.counters.prompts, rep.counters.prompts,
                          rep.counters.prompt_updates, rep.counters.rollouts, rep.counters.optimizer_steps});
    std::ostringstream os;
    os << "schema_version,epoch,loss\n";
    for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
      os << kCsvSchemaVersion << ',' << e << ',' << format_real(rep.epoch_loss[e]) << '\n';
    os << kCsvSchemaVersion << ',' << rep.epoch_loss.size() << ',' << format_real(rep.loss_after) << '\n';
    out.metrics["teacher_pretrain.csv"] = os.str();
  }
  out.raw.set_role(RoleTag::kTeacherRaw);
  out.teacher = out.raw;

  if (variant == TeacherVariant::kRl) {
    GrpoConfig g = cfg.teacher_rl.grpo;
    g.seed = stage_seed(cfg, "teacher-rl");
    g.max_response_len = cfg.tasks.gen.max_response_len;
    auto res = train_grpo(out.raw, out.raw, data, vocab, g, cfg.teacher_rl.batches, {}, 0, "teacher rl");
    out.teacher = std::move(res.policy);
    out.teacher.set_role(RoleTag::kTeacherRl);
    out.ledger.push_back({to_string(StageKind::kTeacherRl), data_name, true, true,
                          static_cast<std::int64_t>(res.draws_per_prompt.size()), res.budget.prompt_draws,
                          res.budget.prompt_updates, res.budget.rollouts, res.budget.optimizer_steps});
    for (const auto& [id, n] : res.draws_per_prompt) out.labeled_ids.insert(id);
    std::ostringstream os;
    write_curve_csv(os, res.curve);
    out.metrics["teacher_rl_curve.csv"] = os.str();
  } else if (variant == TeacherVariant::kSft) {
    std::vector<SftExample> traces;
    std::int64_t drawn = 0;
    for (const auto* task : data) {
      RngStream rng(derive_seed({stage_seed(cfg, "sft-build"), hash_string(task->id)}));
      for (int i = 0; i < cfg.sft_build.traces_per_prompt; ++i) {
        const auto tr = sample_reward_shaped(out.raw, *task, vocab, cfg.sft_build.beta, rng);
        ++drawn;
        if (tr.reward == 1) traces.push_back({task->id, task->prompt, tr.response});
      }
    }
    if (traces.empty())
      throw RuntimeFailure("SFT teacher build found no verifier-correct traces in " + std::to_string(drawn) +
                           " draws; raise sft_build.traces_per_prompt or lower sft_build.beta");
    const auto rep = hard_target_train(out.teacher, traces, cfg.sft_build.train, stage_seed(cfg, "sft-train"),
                                       "teacher-sft");
    out.teacher.set_role(RoleTag::kTeacherSft);
    out.ledger.push_back({to_string(StageKind::kTeacherSftBuild), data_name, true, true,
                          static_cast<std::int64_t>(data.size()), static_cast<std::int64_t>(data.size()),
                          rep.counters.prompt_updates, drawn, rep.counters.optimizer_steps});
    for (const auto* t : data) out.labeled_ids.insert(t->id);
    std::ostringstream os;
    os << "schema_version,epoch,loss,correct_traces,drawn_traces\n";
    for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
      os << kCsvSchemaVersion << ',' << e << ',' << format_real(rep.epoch_loss[e]) << ',' << traces.size() << ','
         << drawn << '\n';
    out.metrics["teacher_sft.csv"] = os.str();
  }
  return out;
}

// Shares teacher builds between runs of one suite. Concurrent requests for the
// same key wait for a single build.
class TeacherMemo {
 public:
  std::shared_ptr<const TeacherBuild> get(const std::string& key,
                                          const std::function<TeacherBuild()>& build) {
    std::shared_future<std::shared_ptr<const TeacherBuild>> fut;
    std::shared_ptr<std::promise<std::shared_ptr<const TeacherBuild>>> mine;
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = slots_.find(key);
      if (it == slots_.end()) {
        mine = std::make_shared<std::promise<std::shared_ptr<const TeacherBuild>>>();
        fut = mine->get_future().share();
        slots_.emplace(key, fut);
      } else {
        fut = it->second;
      }
    }
    if (mine) {
      try {
        mine->set_value(std::make_shared<const TeacherBuild>(build()));
      } catch (...) {
        mine->set_exception(std::current_exception());
      }
    }
    return fut.get();
  }
  void clear() {
    std::lock_guard<std::mutex> lock(mu_);
    slots_.clear();
  }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_future<std::shared_ptr<const TeacherBuild>>> slots_;
};

// Everything a teacher build depends on, as a stable key.
inline std::string teacher_key(const RunConfig& cfg, TeacherVariant variant, SplitName split) {
  const Json j = to_json(cfg);
  Json key{{"seed", cfg.seed},       {"tasks", j["tasks"]},         {"teacher", j["teacher"]},
           {"pretrain", j["pretrain"]}, {"variant", to_string(variant)}, {"split", to_string(split)}};
  key["teacher"].erase("variant");
  if (variant == TeacherVariant::kRl) key["stage"] = j["teacher_rl"];
  if (variant == TeacherVariant::kSft) key["stage"] = j["sft_build"];
  return key.dump();
}

// ---------------------------------------------------------------- runs

struct CheckpointRecord {
  std::string id;
  std::string stage;
  std::string parent;   // empty for roots
  std::string teacher;  // teacher checkpoint that supervised this one, if any
  RoleTag role = RoleTag::kStudent;
  std::uint64_t fingerprint = 0;
  bool operator==(const CheckpointRecord&) const = default;
};

struct RunSummary {
  std::string run_id;
  std::vector<CheckpointRecord> lineage;
  std::vector<EvalReport> evals;
  std::vector<std::pair<std::string, DiagnosticsReport>> diagnostics;
  BudgetLedger ledger;
  std::string final_student;  // checkpoint id of the last student boundary
  std::map<std::string, std::string> metrics;

  const EvalReport* find_eval(const std::string& checkpoint, const std::string& split) const {
    for (const auto& e : evals)
      if (e.checkpoint_id == checkpoint && e.split == split) return &e;
    return nullptr;
  }
  const EvalReport& final_eval(const std::string& split = "EVAL") const {
    const auto* e = find_eval(final_student, split);
    if (!e) throw RuntimeFailure("run " + run_id + " has no " + split + " evaluation of " + final_student);
    return *e;
  }
  const DiagnosticsReport* find_diagnostics(const std::string& checkpoint) const {
    for (const auto& [id, d] : diagnostics)
      if (id == checkpoint) return &d;
    return nullptr;
  }
};

struct RunResult : RunSummary {
  Policy student;
  std::optional<Policy> teacher;
};

namespace detail {

inline std::string student_checkpoint_id(StageKind s) {
  switch (s) {
    case StageKind::kFkl: return "STUDENT_WARM";
    case StageKind::kSampleSft: return "STUDENT_SFT";
    case StageKind::kOpd: return "STUDENT_BRIDGED";
    default: return "STUDENT_FINAL";
  }
}

inline RoleTag student_role(StageKind s) {
  switch (s) {
    case StageKind::kFkl: return RoleTag::kStudent;
    case StageKind::kSampleSft:
    case StageKind::kOpd: return RoleTag::kStudentBridged;
    default: return RoleTag::kStudentFinal;
  }
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  f << text;
  if (!f) throw RuntimeFailure("cannot write " + p.string());
}

inline std::string lineage_csv(const std::vector<CheckpointRecord>& lineage) {
  std::ostringstream os;
  os << "schema_version,checkpoint,stage,parent,teacher,role,fingerprint\n";
  for (const auto& c : lineage)
    os << kCsvSchemaVersion << ',' << c.id << ',' << c.stage << ',' << c.parent << ',' << c.teacher << ','
       << to_string(c.role) << ',' << c.fingerprint << '\n';
  return os.str();
}

}  // namespace detail

// Every parent and teacher reference points at an earlier checkpoint.
inline bool lineage_is_dag(const std::vector<CheckpointRecord>& lineage) {
  std::set<std::string> seen;
  for (const auto& c : lineage) {
    if (!c.parent.empty() && !seen.count(c.parent)) return false;
    if (!c.teacher.empty() && !seen.count(c.teacher)) return false;
    if (!seen.insert(c.id).second) return false;
  }
  return true;
}

// Executes the enabled stages in order, checkpointing and evaluating at every
// boundary. Fully determined by the config.
inline RunResult run_workflow(const RunConfig& cfg, TeacherMemo* memo = nullptr) {
  cfg.validate();
  const RunEnvironment env = make_environment(cfg);
  const Vocab& vocab = env.vocab;
  for (auto s : cfg.eval.splits)
    if (env.splits.get(s).instance_ids.empty()) throw ConfigError("eval split " + to_string(s) + " is empty");

  RunResult res;
  res.run_id = cfg.run_id;
  std::vector<std::pair<std::string, Policy>> students;  // kept for end-of-run diagnostics

  auto eval_checkpoint = [&](const Policy& p, const std::string& id) {
    for (auto s : cfg.eval.splits)
      res.evals.push_back(evaluate(p, env.select(s), vocab, cfg.eval.k, cfg.eval.decode_seed, id, to_string(s)));
  };
  auto record = [&](const Policy& p, const std::string& id, const std::string& stage, const std::string& parent,
                    const std::string& teacher) {
    res.lineage.push_back({id, stage, parent, teacher, p.role(), p.fingerprint()});
    eval_checkpoint(p, id);
    if (!cfg.output.dir.empty() && cfg.output.save_checkpoints) {
      const auto dir = std::filesystem::path(cfg.output.dir) / cfg.run_id / "checkpoints";
      std::filesystem::create_directories(dir);
      save_checkpoint((dir / (id + ".bin")).string(), p);
    }
  };
  if (!cfg.output.dir.empty()) std::filesystem::create_directories(std::filesystem::path(cfg.output.dir) / cfg.run_id);

  PolicySpec sspec = cfg.student.spec;
  sspec.vocab_size = vocab.size();
  Policy student = init_policy(sspec, stage_seed(cfg, "student-init"), cfg.student.init_scale, RoleTag::kStudent);
  std::string student_id = "STUDENT_COLD";
  record(student, student_id, "INIT", "", "");
  students.emplace_back(student_id, student);

  std::optional<Policy> teacher;
  std::string teacher_id;
  auto teacher_split = [&] {
    for (const auto& s : cfg.stages)
      if (s.enabled && is_teacher_stage(s.stage)) return s.data;
    for (const auto& s : cfg.stages)
      if (s.enabled && is_bridge_stage(s.stage)) return s.data;
    return SplitName::kTrainFull;
  };
  auto ensure_teacher = [&] {
    if (teacher) return;
    const SplitName split = teacher_split();
    const auto data = env.select(split);
    auto build = [&] { return build_teacher_variant(cfg.variant, cfg, data, vocab, split); };
    std::shared_ptr<const TeacherBuild> tb =
        memo ? memo->get(teacher_key(cfg, cfg.variant, split), build) : std::make_shared<const TeacherBuild>(build());
    for (const auto& e : tb->ledger) res.ledger.entries.push_back(e);
    res.ledger.labeled_ids.insert(tb->labeled_ids.begin(), tb->labeled_ids.end());
    for (const auto& [k, v] : tb->metrics) res.metrics[k] = v;
    record(tb->raw, "TEACHER_RAW", "TEACHER_PRETRAIN", "", "");
    teacher_id = "TEACHER_RAW";
    if (cfg.variant != TeacherVariant::kRaw) {
      teacher_id = cfg.variant == TeacherVariant::kRl ? "TEACHER_RL" : "TEACHER_SFT";
      record(tb->teacher, teacher_id,
             to_string(cfg.variant == TeacherVariant::kRl ? StageKind::kTeacherRl : StageKind::kTeacherSftBuild),
             "TEACHER_RAW", "");
    }
    teacher = tb->teacher;
  };

  for (const auto& st : cfg.stages) {
    if (!st.enabled) {
      res.ledger.entries.push_back({to_string(st.stage), st.data, false, uses_labels(st.stage)});
      continue;
    }
    const auto data = env.select(st.data);
    if (data.empty()) throw ConfigError("stage " + to_string(st.stage) + " has an empty split");
    const std::string stage_name = to_string(st.stage);
    switch (st.stage) {
      case StageKind::kTeacherRl:
      case StageKind::kTeacherSftBuild:
        ensure_teacher();
        continue;
      case StageKind::kFkl:
      case StageKind::kSampleSft: {
        ensure_teacher();
        // SAMPLE_SFT draws the same teacher rollouts FKL would, then trains on hard targets.
        const auto seed = stage_seed(cfg, "fkl");
        auto records = build_teacher_cache(*teacher, data, vocab, cfg.fkl.rollouts_per_prompt, seed);
        if (st.stage == StageKind::kFkl && cfg.fkl_use_cache) {
          const auto fp = teacher->fingerprint();
          const auto blob = encode_cache(records, vocab.size(), fp);
          if (!cfg.output.dir.empty())
            detail::write_text(std::filesystem::path(cfg.output.dir) / cfg.run_id / "cache" / "fkl.bin", blob);
          records = decode_cache(blob, fp, nullptr);
        }
        DistillCounters counters;
        std::ostringstream os;
        os << "schema_version,epoch,loss\n";
        if (st.stage == StageKind::kFkl) {
          const auto rep = fkl_warmup(student, records, cfg.fkl, seed);
          counters = rep.counters;
          for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
            os << kCsvSchemaVersion << ',' << e << ',' << format_real(rep.epoch_loss[e]) << '\n';
          res.metrics["fkl.csv"] = os.str();
        } else {
          const auto rep = teacher_sample_sft(student, records, cfg.fkl, seed);
          counters = rep.counters;
          for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e)
            os << kCsvSchemaVersion << ',' << e << ',' << format_real(rep.epoch_loss[e]) << '\n';
          res.metrics["sample_sft.csv"] = os.str();
        }
        res.ledger.entries.push_back({stage_name, st.data, true, false, counters.prompts, counters.prompts,
                                      counters.prompt_updates, counters.rollouts, counters.optimizer_steps});
        break;
      }
      case StageKind::kOpd: {
        ensure_teacher();
        auto out = train_opd(student, *teacher, data, vocab, cfg.opd, stage_seed(cfg, "opd"));
        student = std::move(out.policy);
        std::ostringstream os;
        write_opd_csv(os, out.steps);
        res.metrics["opd.csv"] = os.str();
        res.ledger.entries.push_back({stage_name, st.data, true, false, out.counters.prompts,
                                      out.counters.prompt_updates, out.counters.prompt_updates,
                                      out.counters.rollouts, out.counters.optimizer_steps});
        break;
      }
      case StageKind::kStudentRl:
      case StageKind::kStudentRlReplay: {
        GrpoConfig g = cfg.grpo.grpo;
        g.seed = stage_seed(cfg, "student-rl");  // shared by fresh and replay arms
        g.max_response_len = cfg.tasks.gen.max_response_len;
        const Policy reference = student;
        auto out = train_grpo(student, reference, data, vocab, g, cfg.grpo.batches, {}, 0, stage_name);
        student = std::move(out.policy);
        std::ostringstream os;
        write_curve_csv(os, out.curve);
        res.metrics["student_rl_curve.csv"] = os.str();
        res.ledger.entries.push_back({stage_name, st.data, true, true,
                                      static_cast<std::int64_t>(out.draws_per_prompt.size()), out.budget.prompt_draws,
                                      out.budget.prompt_updates, out.budget.rollouts, out.budget.optimizer_steps});
        for (const auto& [id, n] : out.draws_per_prompt) res.ledger.labeled_ids.insert(id);
        break;
      }
    }
    const std::string id = detail::student_checkpoint_id(st.stage);
    student.set_role(detail::student_role(st.stage));
    record(student, id, stage_name, student_id, is_bridge_stage(st.stage) ? teacher_id : "");
    student_id = id;
    students.emplace_back(id, student);
  }
  res.final_student = student_id;

  if (teacher && cfg.eval.diagnostics) {
    const auto probes = env.probes(cfg.eval.probes);
    for (const auto& [id, p] : students)
      res.diagnostics.emplace_back(id, diagnose(p, *teacher, p, probes, vocab, cfg.eval.diag_beta,
                                                cfg.eval.diag_samples, stage_seed(cfg, "diagnose")));
  }

  if (!cfg.output.dir.empty()) {
    const auto root = std::filesystem::path(cfg.output.dir) / cfg.run_id;
    detail::write_text(root / "config.json", to_json(cfg).dump(2) + "\n");
    std::ostringstream ledger;
    res.ledger.write_csv(ledger);
    detail::write_text(root / "ledger.csv", ledger.str());
    detail::write_text(root / "lineage.csv", detail::lineage_csv(res.lineage));
    std::ostringstream ev;
    write_eval_csv_header(ev);
    for (const auto& e : res.evals) write_eval_csv_row(ev, cfg.run_id, e);
    detail::write_text(root / "metrics" / "eval.csv", ev.str());
    if (!res.diagnostics.empty()) {
      std::ostringstream dg;
      write_diagnostics_csv_header(dg);
      for (const auto& [id, d] : res.diagnostics) write_diagnostics_csv_row(dg, cfg.run_id, id, d);
      detail::write_text(root / "metrics" / "diagnostics.csv", dg.str());
    }
    for (const auto& [name, text] : res.metrics) detail::write_text(root / "metrics" / name, text);
  }
  res.student = std::move(student);
  res.teacher = std::move(teacher);
  return res;
}

// ---------------------------------------------------------------- suites

struct SuiteEntry {
  std::string row;    // stable key, e.g. "no_stage2a"
  std::string label;  // table row text
  RunConfig config;
};

inline RunConfig same_size_teacher(RunConfig cfg) {
  cfg.teacher.spec = cfg.student.spec;
  cfg.teacher.init_scale = cfg.student.init_scale;
  return cfg;
}

inline RunConfig with_seed(RunConfig cfg, std::uint64_t seed) {
  cfg.seed = seed;
  cfg.run_id += "-s" + std::to_string(seed);
  return cfg;
}

namespace detail {

// The canonical stage list every suite row is expressed in, so configs differ
// only in the ablated fields.
inline std::vector<StageConfig> canonical_stages(SplitName bridge, SplitName stage3) {
  return {{StageKind::kTeacherRl, bridge, true},  {StageKind::kTeacherSftBuild, bridge, false},
          {StageKind::kFkl, bridge, true},        {StageKind::kSampleSft, bridge, false},
          {StageKind::kOpd, bridge, true},        {StageKind::kStudentRl, stage3, false}};
}
inline constexpr std::size_t kStageTeacherRl = 0, kStageTeacherSft = 1, kStageFkl = 2, kStageSampleSft = 3,
                             kStageOpd = 4, kStageStudentRl = 5;

inline RunConfig suite_row(const RunConfig& base, const std::string& row, SplitName bridge, SplitName stage3) {
  RunConfig c = base;
  c.run_id = base.run_id + "-" + row;
  c.variant = TeacherVariant::kRl;
  c.stages = canonical_stages(bridge, stage3);
  return c;
}

}  // namespace detail

// The eight component-ablation rows for one teacher: five pre-Stage-3 rows on
// TRAIN_FULL, then the half-split trio.
inline std::vector<SuiteEntry> build_ablation_suite(const RunConfig& base) {
  base.validate();
  if (base.variant != TeacherVariant::kRl || !base.enabled(StageKind::kTeacherRl) || !base.enabled(StageKind::kFkl) ||
      !base.enabled(StageKind::kOpd))
    throw ConfigError("ablation suite needs a full-bridge base (TEACHER_RL, FKL and OPD enabled)");
  using namespace detail;
  const auto F = SplitName::kTrainFull, H1 = SplitName::kTrain1H, H2 = SplitName::kTrain2H;
  std::vector<SuiteEntry> out;

  out.push_back({"full_bridge", "Full bridge (Stage 1 + FKL + OPD)", suite_row(base, "full_bridge", F, F)});

  auto raw = suite_row(base, "no_stage1", F, F);
  raw.variant = TeacherVariant::kRaw;
  raw.stages[kStageTeacherRl].enabled = false;
  out.push_back({"no_stage1", "- Stage 1 (raw teacher)", raw});

  auto no2a = suite_row(base, "no_stage2a", F, F);
  no2a.stages[kStageFkl].enabled = false;
  out.push_back({"no_stage2a", "- Stage 2a (OPD only)", no2a});

  auto no2b = suite_row(base, "no_stage2b", F, F);
  no2b.stages[kStageFkl].enabled = false;
  no2b.stages[kStageSampleSft].enabled = true;
  no2b.stages[kStageOpd].enabled = false;
  out.push_back({"no_stage2b", "- Stage 2b (teacher-sample SFT only)", no2b});

  auto cold = suite_row(base, "cold_grpo", F, F);
  cold.variant = TeacherVariant::kRaw;
  for (auto i : {kStageTeacherRl, kStageFkl, kStageOpd}) cold.stages[i].enabled = false;
  cold.stages[kStageStudentRl].enabled = true;
  out.push_back({"cold_grpo", "- Entire pipeline (cold GRPO)", cold});

  auto half = suite_row(base, "half_full", H1, H2);
  half.stages[kStageStudentRl].enabled = true;
  out.push_back({"half_full", "Bridge (1H) + Stage 3 (2H)", half});

  out.push_back({"half_bridge_only", "- Stage 3 (bridge only on 1H)", suite_row(base, "half_bridge_only", H1, H2)});

  auto replay = suite_row(base, "half_replay", H1, H1);
  replay.stages[kStageStudentRl] = {StageKind::kStudentRlReplay, H1, true};
  out.push_back({"half_replay", "Replay control (Stage 3 on 1H)", replay});
  return out;
}

// Bridged students from RAW, SFT and RL teachers built on 1H, no Stage 3.
inline std::vector<SuiteEntry> build_teacher_variant_suite(const RunConfig& base) {
  base.validate();
  using namespace detail;
  const auto H1 = SplitName::kTrain1H;
  std::vector<SuiteEntry> out;
  auto raw = suite_row(base, "teacher_raw", H1, SplitName::kTrain2H);
  raw.variant = TeacherVariant::kRaw;
  raw.stages[kStageTeacherRl].enabled = false;
  out.push_back({"teacher_raw", "Raw teacher, bridge (1H)", raw});
  auto sft = suite_row(base, "teacher_sft", H1, SplitName::kTrain2H);
  sft.variant = TeacherVariant::kSft;
  sft.stages[kStageTeacherRl].enabled = false;
  sft.stages[kStageTeacherSft].enabled = true;
  out.push_back({"teacher_sft", "SFT teacher, bridge (1H)", sft});
  out.push_back({"teacher_rl", "RL teacher, bridge (1H)", suite_row(base, "teacher_rl", H1, SplitName::kTrain2H)});
  return out;
}

// Fields each ablation row may change relative to the full bridge (run_id always differs).
inline std::vector<std::string> ablation_dimension(const std::string& row) {
  if (row == "full_bridge") return {};
  if (row == "no_stage1") return {"stages.0.enabled", "teacher.variant"};
  if (row == "no_stage2a") return {"stages.2.enabled"};
  if (row == "no_stage2b") return {"stages.2.enabled", "stages.3.enabled", "stages.4.enabled"};
  if (row == "cold_grpo")
    return {"stages.0.enabled", "stages.2.enabled", "stages.4.enabled", "stages.5.enabled", "teacher.variant"};
  if (row == "half_full" || row == "half_bridge_only" || row == "half_replay") return {"stages"};
  if (row == "teacher_raw") return {"stages.0.enabled", "teacher.variant"};
  if (row == "teacher_sft") return {"stages.0.enabled", "stages.1.enabled", "teacher.variant"};
  if (row == "teacher_rl") return {};
  throw ConfigError("unknown suite row '" + row + "'");
}

struct SuiteManifestEntry {
  std::string run_id;
  std::string row;
  std::string label;
  std::uint64_t seed = 0;
};

inline Json manifest_to_json(const std::string& suite, const std::vector<SuiteManifestEntry>& entries) {
  Json runs = Json::array();
  for (const auto& e : entries)
    runs.push_back(Json{{"run_id", e.run_id}, {"row", e.row}, {"label", e.label}, {"seed", e.seed}});
  return Json{{"schema_version", kCsvSchemaVersion}, {"suite", suite}, {"runs", runs}};
}

inline std::vector<SuiteManifestEntry> manifest_from_json(const Json& j) {
  if (!j.is_object() || !j.contains("runs")) throw ConfigError("suite manifest lacks a 'runs' list");
  if (j.value("schema_version", 0) != kCsvSchemaVersion) throw ConfigError("unsupported suite manifest version");
  std::vector<SuiteManifestEntry> out;
  for (const auto& r : j.at("runs"))
    out.push_back({r.at("run_id").get<std::string>(), r.at("row").get<std::string>(), r.at("label").get<std::string>(),
                   r.at("seed").get<std::uint64_t>()});
  return out;
}

// Runs configs on up to `jobs` threads; results come back in input order.
// Runs sharing a seed share teacher builds.
inline std::vector<RunSummary> run_many(const std::vector<RunConfig>& configs, int jobs) {
  for (const auto& c : configs) c.validate();
  std::vector<RunSummary> out(configs.size());
  std::map<std::uint64_t, std::vector<std::size_t>> by_seed;
  for (std::size_t i = 0; i < configs.size(); ++i) by_seed[configs[i].seed].push_back(i);
  const auto workers = static_cast<std::size_t>(std::max(1, jobs));
  for (const auto& [seed, idx] : by_seed) {
    TeacherMemo memo;
    std::mutex mu;
    std::size_t next = 0;
    std::exception_ptr failure;
    auto work = [&] {
      for (;;) {
        std::size_t k;
        {
          std::lock_guard<std::mutex> lock(mu);
          if (next == idx.size() || failure) return;
          k = idx[next++];
        }
        try {
          out[k] = static_cast<RunSummary&&>(run_workflow(configs[k], &memo));
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 1; w < std::min(workers, idx.size()); ++w) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
  }
  return out;
}

struct SuiteResult {
  std::vector<SuiteManifestEntry> manifest;
  std::vector<RunSummary> runs;  // manifest order

  const RunSummary& at(const std::string& row, std::uint64_t seed) const {
    for (std::size_t i = 0; i < manifest.size(); ++i)
      if (manifest[i].row == row && manifest[i].seed == seed) return runs[i];
    throw RuntimeFailure("suite has no run for row " + row + " seed " + std::to_string(seed));
  }
};

// Replicates `entries` over seeds; writes suite_manifest.json when the base
// output directory is set.
inline SuiteResult run_suite(const std::string& suite_name, const std::vector<SuiteEntry>& entries,
                             const std::vector<std::uint64_t>& seeds, int jobs) {
  SuiteResult res;
  std::vector<RunConfig> configs;
  for (auto seed : seeds)
    for (const auto& e : entries) {
      configs.push_back(with_seed(e.config, seed));
      res.manifest.push_back({configs.back().run_id, e.row, e.label, seed});
    }
  res.runs = run_many(configs, jobs);
  if (!entries.empty() && !entries.front().config.output.dir.empty())
    detail::write_text(std::filesystem::path(entries.front().config.output.dir) / "suite_manifest.json",
                       manifest_to_json(suite_name, res.manifest).dump(2) + "\n");
  return res;
}

// Per-seed final EVAL aggregates keyed by row, as ordering_test expects.
inline std::vector<std::map<std::string, double>> per_seed_aggregates(const SuiteResult& suite,
                                                                      const std::string& split = "EVAL") {
  std::map<std::uint64_t, std::map<std::string, double>> by_seed;
  for (std::size_t i = 0; i < suite.manifest.size(); ++i)
    by_seed[suite.manifest[i].seed][suite.manifest[i].row] = suite.runs[i].final_eval(split).aggregate;
  std::vector<std::map<std::string, double>> out;
  for (auto& [seed, m] : by_seed) out.push_back(std::move(m));
  return out;
}

// ---------------------------------------------------------------- allocation

struct AllocationReport {
  RunSummary teacher_side;  // Stage 1 + bridge on TRAIN_FULL, no Stage 3
  RunSummary student_side;  // Stage 1 + bridge on 1H, Stage 3 on 2H
  std::int64_t labeled_prompts = 0;
  std::int64_t labeled_draws = 0;
  double difference = 0.0;  // teacher-side minus student-side EVAL aggregate
  double difference_se = 0.0;
  bool significant = false;  // |difference| > 1.96 SE

  std::string to_csv() const {
    std::ostringstream os;
    os << "schema_version,arm,run_id,aggregate,se,labeled_prompts,labeled_draws\n";
    for (const auto* r : {&teacher_side, &student_side}) {
      const auto& e = r->final_eval();
      os << kCsvSchemaVersion << ',' << (r == &teacher_side ? "teacher_side" : "student_side") << ',' << r->run_id
         << ',' << format_real(e.aggregate) << ',' << format_real(e.se) << ',' << r->ledger.distinct_labeled_prompts()
         << ',' << r->ledger.labeled_prompt_draws() << '\n';
    }
    os << kCsvSchemaVersion << ",difference,," << format_real(difference) << ',' << format_real(difference_se) << ','
       << (significant ? "significant" : "not_significant") << ",\n";
    return os.str();
  }
};

// Teacher-side arm gets Stage-1 batches = student-side Stage-1 + Stage-3
// batches, so both arms consume the same labeled prompts and draws.
inline std::pair<RunConfig, RunConfig> allocation_arms(const RunConfig& base) {
  base.validate();
  if (base.teacher_rl.grpo.prompts_per_batch != base.grpo.grpo.prompts_per_batch)
    throw ConfigError("allocation needs teacher_rl and grpo to draw the same prompts_per_batch");
  using namespace detail;
  auto student_side = suite_row(base, "alloc_student_side", SplitName::kTrain1H, SplitName::kTrain2H);
  student_side.stages[kStageStudentRl].enabled = true;
  auto teacher_side = suite_row(base, "alloc_teacher_side", SplitName::kTrainFull, SplitName::kTrain2H);
  teacher_side.teacher_rl.batches = base.teacher_rl.batches + base.grpo.batches;
  return {teacher_side, student_side};
}

inline AllocationReport allocation_experiment(const RunConfig& base, int jobs = 1) {
  const auto [t_cfg, s_cfg] = allocation_arms(base);
  auto runs = run_many({t_cfg, s_cfg}, jobs);
  AllocationReport rep;
  rep.teacher_side = std::move(runs[0]);
  rep.student_side = std::move(runs[1]);
  const auto& tl = rep.teacher_side.ledger;
  const auto& sl = rep.student_side.ledger;
  if (tl.distinct_labeled_prompts() != sl.distinct_labeled_prompts() ||
      tl.labeled_prompt_draws() != sl.labeled_prompt_draws())
    throw RuntimeFailure("allocation arms consumed different labeled budgets: teacher side " +
                         std::to_string(tl.distinct_labeled_prompts()) + " prompts / " +
                         std::to_string(tl.labeled_prompt_draws()) + " draws, student side " +
                         std::to_string(sl.distinct_labeled_prompts()) + " prompts / " +
                         std::to_string(sl.labeled_prompt_draws()) + " draws");
  rep.labeled_prompts = tl.distinct_labeled_prompts();
  rep.labeled_draws = tl.labeled_prompt_draws();
  const auto& a = rep.teacher_side.final_eval();
  const auto& b = rep.student_side.final_eval();
  rep.difference = a.aggregate - b.aggregate;
  rep.difference_se = std::sqrt(a.se * a.se + b.se * b.se);
  rep.significant = std::abs(rep.difference) > 1.96 * rep.difference_se;
  if (!base.output.dir.empty())
    detail::write_text(std::filesystem::path(base.output.dir) / "allocation.csv", rep.to_csv());
  return rep;
}

}  // namespace opdlab
