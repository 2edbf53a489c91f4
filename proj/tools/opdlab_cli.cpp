// opdlab command-line driver.
//
// Exit status: 0 success, 1 configuration error, 2 runtime error,
// 3 oracle-check failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "opdlab/checks.hpp"
#include "opdlab/report.hpp"
#include "opdlab/run_config.hpp"
#include "opdlab/workflow.hpp"

using namespace opdlab;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0, kExitConfig = 1, kExitRuntime = 2, kExitCheck = 3;

struct ConfigFlags {
  std::string path;
  std::vector<std::string> sets;
  std::string out;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f) {
  cmd->add_option("--config", f.path, "JSON run config (defaults apply when omitted)");
  cmd->add_option("--set", f.sets, "dotted override key=value, repeatable")->take_all();
  cmd->add_option("--out", f.out, "output directory (overrides output.dir)");
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Loads, overrides and validates before any compute.
RunConfig load_config(const ConfigFlags& f) {
  Json doc;
  if (f.path.empty()) {
    doc = to_json(RunConfig{});
  } else {
    try {
      doc = Json::parse(slurp(f.path));
    } catch (const Json::exception& e) {
      throw ConfigError("config '" + f.path + "' is not valid JSON: " + e.what());
    }
  }
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_override(doc, s.substr(0, eq), s.substr(eq + 1));
  }
  RunConfig cfg = run_config_from_json(doc);
  if (!f.out.empty()) cfg.output.dir = f.out;
  if (cfg.output.dir.empty()) cfg.output.dir = "runs";
  cfg.validate();
  return cfg;
}

SplitName stage_data(const RunConfig& cfg, std::initializer_list<StageKind> kinds) {
  for (auto k : kinds)
    if (const auto* s = cfg.find(k); s && s->enabled) return s->data;
  return SplitName::kTrainFull;
}

std::vector<std::uint64_t> seed_list(const RunConfig& cfg, int n) {
  if (n < 1) throw ConfigError("--seeds must be >= 1");
  std::vector<std::uint64_t> out;
  for (int i = 0; i < n; ++i) out.push_back(cfg.seed + static_cast<std::uint64_t>(i));
  return out;
}

void print_evals(const RunSummary& r) {
  for (const auto& e : r.evals)
    std::cout << r.run_id << ' ' << e.checkpoint_id << ' ' << e.split << " avg@" << e.k << ' '
              << format_fixed(100 * e.aggregate, 1) << " ± " << format_fixed(100 * e.se, 1) << '\n';
}

void write_eval_file(const fs::path& path, const std::string& run_id, const std::vector<EvalReport>& evals) {
  std::ostringstream os;
  write_eval_csv_header(os);
  for (const auto& e : evals) write_eval_csv_row(os, run_id, e);
  detail::write_text(path, os.str());
}

Policy load_policy(const std::string& path) {
  if (path.empty()) throw ConfigError("a checkpoint path is required");
  return load_checkpoint(path);
}

int cmd_gen_tasks(const ConfigFlags& f) {
  const auto cfg = load_config(f);
  const auto env = make_environment(cfg);
  const fs::path dir = fs::path(cfg.output.dir) / cfg.run_id;
  fs::create_directories(dir);
  write_tasks((dir / "tasks.jsonl").string(), env.tasks.all());
  std::ostringstream os;
  os << "schema_version,split,task_id\n";
  for (auto s : {SplitName::kTrainFull, SplitName::kTrain1H, SplitName::kTrain2H, SplitName::kEval})
    for (const auto& id : env.splits.get(s).instance_ids) os << kCsvSchemaVersion << ',' << to_string(s) << ',' << id << '\n';
  detail::write_text(dir / "splits.csv", os.str());
  std::cout << env.tasks.size() << " tasks -> " << (dir / "tasks.jsonl").string() << '\n';
  for (auto s : {SplitName::kTrainFull, SplitName::kTrain1H, SplitName::kTrain2H, SplitName::kEval})
    std::cout << to_string(s) << ' ' << env.splits.get(s).instance_ids.size() << '\n';
  return kExitOk;
}

int cmd_train_teacher(const ConfigFlags& f) {
  const auto cfg = load_config(f);
  const auto env = make_environment(cfg);
  const auto data = stage_data(cfg, {StageKind::kTeacherRl, StageKind::kTeacherSftBuild});
  const auto build = build_teacher_variant(cfg.variant, cfg, env.select(data), env.vocab, data);
  const fs::path dir = fs::path(cfg.output.dir) / cfg.run_id;
  const std::string id = "TEACHER_" + to_string(cfg.variant);
  fs::create_directories(dir / "checkpoints");
  save_checkpoint((dir / "checkpoints" / (id + ".bin")).string(), build.teacher);
  std::vector<EvalReport> evals;
  for (auto s : cfg.eval.splits)
    evals.push_back(evaluate(build.teacher, env.select(s), env.vocab, cfg.eval.k, cfg.eval.decode_seed, id, to_string(s)));
  write_eval_file(dir / "metrics" / "eval.csv", cfg.run_id, evals);
  BudgetLedger ledger;
  ledger.entries = build.ledger;
  ledger.labeled_ids = build.labeled_ids;
  std::ostringstream os;
  ledger.write_csv(os);
  detail::write_text(dir / "ledger.csv", os.str());
  for (const auto& [name, text] : build.metrics) detail::write_text(dir / "metrics" / name, text);
  detail::write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  RunSummary shown;
  shown.run_id = cfg.run_id;
  shown.evals = evals;
  print_evals(shown);
  return kExitOk;
}

int run_and_print(const RunConfig& cfg) {
  const auto res = run_workflow(cfg);
  print_evals(res);
  std::cout << "final checkpoint " << res.final_student << " -> " << (fs::path(cfg.output.dir) / cfg.run_id).string()
            << '\n';
  return kExitOk;
}

int cmd_bridge(const ConfigFlags& f) {
  auto cfg = load_config(f);
  for (auto& s : cfg.stages)
    if (is_student_rl(s.stage)) s.enabled = false;
  cfg.validate();
  return run_and_print(cfg);
}

int cmd_student_rl(const ConfigFlags& f, const std::string& init) {
  const auto cfg = load_config(f);
  const auto env = make_environment(cfg);
  const auto data = stage_data(cfg, {StageKind::kStudentRl, StageKind::kStudentRlReplay});
  PolicySpec spec = cfg.student.spec;
  spec.vocab_size = env.vocab.size();
  Policy student = init.empty() ? init_policy(spec, stage_seed(cfg, "student-init"), cfg.student.init_scale)
                                : load_policy(init);
  GrpoConfig g = cfg.grpo.grpo;
  g.seed = stage_seed(cfg, "student-rl");
  g.max_response_len = cfg.tasks.gen.max_response_len;
  const Policy reference = student;
  auto out = train_grpo(student, reference, env.select(data), env.vocab, g, cfg.grpo.batches, {}, 0, "STUDENT_RL");
  auto trained = std::move(out.policy);
  trained.set_role(RoleTag::kStudentFinal);
  const fs::path dir = fs::path(cfg.output.dir) / cfg.run_id;
  fs::create_directories(dir / "checkpoints");
  save_checkpoint((dir / "checkpoints" / "STUDENT_FINAL.bin").string(), trained);
  std::ostringstream curve;
  write_curve_csv(curve, out.curve);
  detail::write_text(dir / "metrics" / "student_rl_curve.csv", curve.str());
  RunSummary shown;
  shown.run_id = cfg.run_id;
  for (auto s : cfg.eval.splits)
    shown.evals.push_back(
        evaluate(trained, env.select(s), env.vocab, cfg.eval.k, cfg.eval.decode_seed, "STUDENT_FINAL", to_string(s)));
  write_eval_file(dir / "metrics" / "eval.csv", cfg.run_id, shown.evals);
  detail::write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
  print_evals(shown);
  return kExitOk;
}

int cmd_ablation_suite(const ConfigFlags& f, int seeds, int jobs, bool variants) {
  const auto cfg = load_config(f);
  auto entries = variants ? build_teacher_variant_suite(cfg) : build_ablation_suite(cfg);
  const std::string name = variants ? "teacher_variants" : "ablation";
  const auto res = run_suite(name, entries, seed_list(cfg, seeds), jobs);
  std::cout << res.runs.size() << " runs -> " << cfg.output.dir << '\n';
  const auto per_seed = per_seed_aggregates(res);
  for (const auto& o : standard_orderings(per_seed))
    std::cout << '\n' << o.name << '\n' << ordering_to_text(o.report);
  return kExitOk;
}

int cmd_allocation(const ConfigFlags& f, int jobs) {
  const auto cfg = load_config(f);
  const auto rep = allocation_experiment(cfg, jobs);
  std::cout << rep.to_csv();
  return kExitOk;
}

int cmd_eval(const ConfigFlags& f, const std::string& checkpoint) {
  const auto cfg = load_config(f);
  const auto env = make_environment(cfg);
  const auto policy = load_policy(checkpoint);
  const std::string id = fs::path(checkpoint).stem().string();
  std::vector<EvalReport> evals;
  for (auto s : cfg.eval.splits)
    evals.push_back(evaluate(policy, env.select(s), env.vocab, cfg.eval.k, cfg.eval.decode_seed, id, to_string(s)));
  write_eval_csv_header(std::cout);
  for (const auto& e : evals) write_eval_csv_row(std::cout, cfg.run_id, e);
  if (!f.out.empty()) write_eval_file(fs::path(f.out) / (id + "_eval.csv"), cfg.run_id, evals);
  return kExitOk;
}

int cmd_diagnose(const ConfigFlags& f, const std::string& student_path, const std::string& teacher_path) {
  const auto cfg = load_config(f);
  const auto env = make_environment(cfg);
  const auto student = load_policy(student_path);
  const auto teacher = load_policy(teacher_path);
  const auto d = diagnose(student, teacher, student, env.probes(cfg.eval.probes), env.vocab, cfg.eval.diag_beta,
                          cfg.eval.diag_samples, stage_seed(cfg, "diagnose"));
  const std::string id = fs::path(student_path).stem().string();
  std::ostringstream os;
  write_diagnostics_csv_header(os);
  write_diagnostics_csv_row(os, cfg.run_id, id, d);
  std::cout << os.str();
  if (!f.out.empty()) detail::write_text(fs::path(f.out) / (id + "_diagnostics.csv"), os.str());
  return kExitOk;
}

int cmd_oracle_check(std::uint64_t seed) {
  const auto start = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& c : oracle_checks(seed)) {
    std::cout << check_line(c) << '\n';
    ok = ok && c.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::cout << (ok ? "all identities hold" : "identity check failed") << " in " << format_fixed(secs, 2) << " s\n";
  return ok ? kExitOk : kExitCheck;
}

int cmd_report(const std::string& suite, const std::vector<std::string>& formats, const std::string& config_of) {
  if (suite.empty()) throw ConfigError("report needs --suite DIR");
  if (!config_of.empty()) {
    const auto path = fs::path(suite) / config_of / "config.json";
    if (!fs::exists(path)) throw RuntimeFailure("no config.json for run '" + config_of + "'");
    std::cout << detail::read_file(path);
    return kExitOk;
  }
  std::set<ReportFormat> fmts;
  for (const auto& s : formats) fmts.insert(report_format_from_string(s));
  if (fmts.empty()) fmts = {ReportFormat::kCsv, ReportFormat::kSvg, ReportFormat::kText};
  for (const auto& p : emit_report(suite, fmts)) std::cout << p.string() << '\n';
  const auto mean_txt = fs::path(suite) / "report" / "table_mean.txt";
  if (fs::exists(mean_txt)) std::cout << '\n' << detail::read_file(mean_txt);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"opdlab: teacher-to-student bridge experiments on a toy arithmetic task"};
  app.require_subcommand(1);
  ConfigFlags flags;
  int jobs = 1, seeds = 1;
  bool variants = false;
  std::string checkpoint, student, teacher, init, suite, config_of;
  std::vector<std::string> formats;
  std::uint64_t check_seed = 2024;

  auto* gen = app.add_subcommand("gen-tasks", "generate the task pool and its splits");
  auto* tt = app.add_subcommand("train-teacher", "build the configured teacher variant");
  auto* br = app.add_subcommand("bridge", "run the teacher and bridge stages (no student RL)");
  auto* srl = app.add_subcommand("student-rl", "GRPO on the student");
  auto* rw = app.add_subcommand("run-workflow", "run every enabled stage of a config");
  auto* ab = app.add_subcommand("ablation-suite", "the eight-row component ablation over seeds");
  auto* al = app.add_subcommand("allocation", "teacher-side vs student-side labeled budget placement");
  auto* ev = app.add_subcommand("eval", "avg@K of a checkpoint");
  auto* dg = app.add_subcommand("diagnose", "C1/C2 diagnostics of a student against a teacher");
  auto* oc = app.add_subcommand("oracle-check", "exact identity checks");
  auto* rp = app.add_subcommand("report", "tables and figure from a finished suite directory");

  for (auto* c : {gen, tt, br, srl, rw, ab, al, ev, dg}) add_config_flags(c, flags);
  srl->add_option("--init", init, "starting checkpoint (cold student when omitted)");
  ab->add_option("--seeds", seeds, "number of seeds, counting up from the config seed");
  ab->add_option("--jobs", jobs, "worker threads");
  ab->add_flag("--teacher-variants", variants, "run the raw/SFT/RL teacher-variant suite instead");
  al->add_option("--jobs", jobs, "worker threads");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  dg->add_option("--student", student, "student checkpoint")->required();
  dg->add_option("--teacher", teacher, "teacher checkpoint")->required();
  oc->add_option("--seed", check_seed, "seed for the random instances");
  rp->add_option("--suite", suite, "suite directory (holds suite_manifest.json)")->required();
  rp->add_option("--format", formats, "csv, svg, text (default: all)")->delimiter(',');
  rp->add_option("--config-of", config_of, "print the stored config of one run instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (gen->parsed()) return cmd_gen_tasks(flags);
    if (tt->parsed()) return cmd_train_teacher(flags);
    if (br->parsed()) return cmd_bridge(flags);
    if (srl->parsed()) return cmd_student_rl(flags, init);
    if (rw->parsed()) return run_and_print(load_config(flags));
    if (ab->parsed()) return cmd_ablation_suite(flags, seeds, jobs, variants);
    if (al->parsed()) return cmd_allocation(flags, jobs);
    if (ev->parsed()) return cmd_eval(flags, checkpoint);
    if (dg->parsed()) return cmd_diagnose(flags, student, teacher);
    if (oc->parsed()) return cmd_oracle_check(check_seed);
    if (rp->parsed()) return cmd_report(suite, formats, config_of);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitConfig;
}
