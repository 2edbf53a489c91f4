#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "opdlab/oracle.hpp"
#include "opdlab/workflow.hpp"

using namespace opdlab;

namespace {

// Small budgets: structure and bookkeeping only.
RunConfig tiny_config() {
  RunConfig c;
  c.run_id = "tiny";
  c.tasks.count = 120;
  c.pretrain.train.epochs = 2;
  c.teacher_rl.batches = 20;
  c.sft_build.train.epochs = 1;
  c.fkl.epochs = 1;
  c.fkl.rollouts_per_prompt = 2;
  c.opd.steps = 5;
  c.opd.rollouts_per_prompt = 2;
  c.grpo.batches = 6;
  c.eval.k = 2;
  c.eval.probes = 2;
  c.eval.diag_samples = 100;
  return c;
}

std::vector<std::string> ids(const RunSummary& r) {
  std::vector<std::string> out;
  for (const auto& c : r.lineage) out.push_back(c.id);
  return out;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

bool within(const std::string& path, const std::vector<std::string>& allowed) {
  if (path == "run_id") return true;
  for (const auto& a : allowed)
    if (path == a || path.rfind(a + ".", 0) == 0) return true;
  return false;
}

}  // namespace

TEST(RunConfigTest, JsonRoundTripIsLossless) {
  RunConfig c = tiny_config();
  c.opd.estimator = OpdEstimator::kImplicitReward;
  c.eval.splits = {SplitName::kEval, SplitName::kTrain2H};
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_TRUE(config_diff(c, back).empty());
}

TEST(RunConfigTest, UnknownKeyNamesNearestValidKey) {
  Json j = to_json(RunConfig{});
  j["grpo"]["clip_ratoi"] = 0.2;
  try {
    run_config_from_json(j);
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("grpo.clip_ratoi"), std::string::npos);
    EXPECT_NE(msg.find("grpo.clip_ratio"), std::string::npos);
  }
}

TEST(RunConfigTest, OverridesApplyAndValidate) {
  Json j = to_json(RunConfig{});
  apply_override(j, "grpo.clip_ratio", "1.5");
  const auto c = run_config_from_json(j);
  EXPECT_THROW(c.validate(), ConfigError);
  apply_override(j, "stages.1.enabled", "false");
  apply_override(j, "run_id", "plain-text");
  const auto d = run_config_from_json(j);
  EXPECT_FALSE(d.stages[1].enabled);
  EXPECT_EQ(d.run_id, "plain-text");
  EXPECT_THROW(apply_override(j, "grpo.clipratio", "0.1"), ConfigError);
  EXPECT_THROW(apply_override(j, "stages.99.enabled", "true"), ConfigError);
}

TEST(RunConfigTest, StageOrderViolationsAreConfigErrors) {
  auto swap_check = [](std::size_t a, std::size_t b) {
    RunConfig c;
    std::swap(c.stages[a], c.stages[b]);
    EXPECT_THROW(c.validate(), ConfigError) << a << "<->" << b;
  };
  swap_check(0, 1);  // FKL before TEACHER_RL
  swap_check(1, 3);  // OPD before FKL
  RunConfig late;
  late.stages[4].enabled = true;
  std::swap(late.stages[3], late.stages[4]);  // STUDENT_RL before OPD
  EXPECT_THROW(late.validate(), ConfigError);

  RunConfig mismatch;
  mismatch.variant = TeacherVariant::kRaw;  // but TEACHER_RL is enabled
  EXPECT_THROW(mismatch.validate(), ConfigError);
  RunConfig dup;
  dup.stages.push_back(dup.stages[1]);
  EXPECT_THROW(dup.validate(), ConfigError);
  RunConfig on_eval;
  on_eval.stages[1].data = SplitName::kEval;
  EXPECT_THROW(on_eval.validate(), ConfigError);
  EXPECT_NO_THROW(RunConfig{}.validate());
}

TEST(WorkflowTest, AllStagesDisabledYieldsOnlyColdStudentEval) {
  RunConfig c = tiny_config();
  c.variant = TeacherVariant::kRaw;
  for (auto& s : c.stages) s.enabled = false;
  const auto r = run_workflow(c);
  ASSERT_EQ(r.evals.size(), 1u);
  EXPECT_EQ(r.evals[0].checkpoint_id, "STUDENT_COLD");
  EXPECT_EQ(ids(r), std::vector<std::string>{"STUDENT_COLD"});
  EXPECT_TRUE(r.diagnostics.empty());
  EXPECT_FALSE(r.teacher.has_value());
  for (const auto& e : r.ledger.entries) {
    EXPECT_FALSE(e.enabled);
    EXPECT_EQ(e.prompt_draws, 0);
    EXPECT_EQ(e.prompt_updates, 0);
  }
  EXPECT_EQ(r.ledger.total().prompt_draws, 0);
}

TEST(WorkflowTest, FullBridgeCheckpointsAndLineage) {
  const auto r = run_workflow(tiny_config());
  const auto got = ids(r);
  for (const char* want : {"STUDENT_COLD", "TEACHER_RAW", "TEACHER_RL", "STUDENT_WARM", "STUDENT_BRIDGED"}) {
    EXPECT_NE(std::find(got.begin(), got.end(), want), got.end()) << want;
    EXPECT_NE(r.find_eval(want, "EVAL"), nullptr) << want;
  }
  EXPECT_EQ(r.final_student, "STUDENT_BRIDGED");
  EXPECT_TRUE(lineage_is_dag(r.lineage));
  for (const auto& c : r.lineage) {
    if (c.id == "STUDENT_BRIDGED") {
      EXPECT_EQ(c.parent, "STUDENT_WARM");
      EXPECT_EQ(c.teacher, "TEACHER_RL");
      EXPECT_EQ(c.role, RoleTag::kStudentBridged);
    }
    if (c.id == "TEACHER_RL") {
      EXPECT_EQ(c.parent, "TEACHER_RAW");
      EXPECT_EQ(c.role, RoleTag::kTeacherRl);
    }
  }
  EXPECT_EQ(r.student.role(), RoleTag::kStudentBridged);
  ASSERT_TRUE(r.teacher.has_value());
  EXPECT_EQ(r.teacher->role(), RoleTag::kTeacherRl);
  EXPECT_NE(r.find_diagnostics("STUDENT_COLD"), nullptr);
  EXPECT_NE(r.find_diagnostics("STUDENT_BRIDGED"), nullptr);
}

TEST(WorkflowTest, LedgerSumsAndLabels) {
  RunConfig c = tiny_config();
  c.stages[4].enabled = true;
  const auto r = run_workflow(c);
  const auto total = r.ledger.total();
  std::int64_t draws = 0, labeled = 0;
  for (const auto& e : r.ledger.entries) {
    draws += e.prompt_draws;
    if (e.labeled) labeled += e.prompt_draws;
    if (!e.enabled) {
      EXPECT_EQ(e.prompt_draws, 0) << e.stage;
    }
  }
  EXPECT_EQ(total.prompt_draws, draws);
  EXPECT_EQ(r.ledger.labeled_prompt_draws(), labeled);
  const auto* rl = r.ledger.find("TEACHER_RL");
  ASSERT_NE(rl, nullptr);
  EXPECT_EQ(rl->prompt_draws, c.teacher_rl.batches * c.teacher_rl.grpo.prompts_per_batch);
  const auto* fkl = r.ledger.find("FKL");
  ASSERT_NE(fkl, nullptr);
  EXPECT_FALSE(fkl->labeled);
  const auto* s3 = r.ledger.find("STUDENT_RL");
  ASSERT_NE(s3, nullptr);
  EXPECT_EQ(s3->prompt_draws, c.grpo.batches * c.grpo.grpo.prompts_per_batch);
}

TEST(WorkflowTest, SameSeedReproducesEvalReportsAndFiles) {
  const auto root = std::filesystem::temp_directory_path() / "opdlab_wf_determinism";
  std::filesystem::remove_all(root);
  RunConfig a = tiny_config();
  a.output.dir = (root / "a").string();
  RunConfig b = a;
  b.output.dir = (root / "b").string();
  const auto ra = run_workflow(a);
  const auto rb = run_workflow(b);
  ASSERT_EQ(ra.evals.size(), rb.evals.size());
  for (std::size_t i = 0; i < ra.evals.size(); ++i) EXPECT_EQ(ra.evals[i], rb.evals[i]);
  EXPECT_EQ(ra.lineage, rb.lineage);
  for (const char* f : {"ledger.csv", "lineage.csv", "metrics/eval.csv", "metrics/diagnostics.csv", "metrics/opd.csv",
                        "checkpoints/STUDENT_BRIDGED.bin"}) {
    const auto fa = read_file(std::filesystem::path(a.output.dir) / "tiny" / f);
    EXPECT_FALSE(fa.empty()) << f;
    EXPECT_EQ(fa, read_file(std::filesystem::path(b.output.dir) / "tiny" / f)) << f;
  }
  const auto ck = load_checkpoint((std::filesystem::path(a.output.dir) / "tiny" / "checkpoints" / "TEACHER_RL.bin").string());
  EXPECT_EQ(ck.role(), RoleTag::kTeacherRl);
  EXPECT_EQ(ck, *ra.teacher);
  std::filesystem::remove_all(root);
}

TEST(WorkflowTest, CacheModeMatchesLiveMode) {
  RunConfig live = tiny_config();
  RunConfig cached = live;
  cached.fkl_use_cache = true;
  EXPECT_EQ(run_workflow(live).student, run_workflow(cached).student);
}

TEST(AblationSuiteTest, EightRowsDifferOnlyInTheirDimension) {
  const RunConfig base = tiny_config();
  const auto suite = build_ablation_suite(base);
  ASSERT_EQ(suite.size(), 8u);
  const RunConfig& full = suite[0].config;
  for (const auto& e : suite) {
    EXPECT_NO_THROW(e.config.validate()) << e.row;
    for (const auto& p : config_diff(full, e.config))
      EXPECT_TRUE(within(p, ablation_dimension(e.row))) << e.row << " changed " << p;
  }
  const auto& no2a = suite[2].config;
  EXPECT_FALSE(no2a.enabled(StageKind::kFkl));
  EXPECT_TRUE(no2a.enabled(StageKind::kOpd));
  EXPECT_EQ(to_json(no2a)["opd"], to_json(full)["opd"]);
}

TEST(AblationSuiteTest, ReplayDiffersFromHalfSplitOnlyInStage3) {
  const auto suite = build_ablation_suite(tiny_config());
  const RunConfig* half = nullptr;
  const RunConfig* replay = nullptr;
  for (const auto& e : suite) {
    if (e.row == "half_full") half = &e.config;
    if (e.row == "half_replay") replay = &e.config;
  }
  ASSERT_TRUE(half && replay);
  auto diff = config_diff(*half, *replay);
  diff.erase(std::remove(diff.begin(), diff.end(), "run_id"), diff.end());
  EXPECT_EQ(diff, (std::vector<std::string>{"stages.5.data", "stages.5.stage"}));
  EXPECT_EQ(half->stages[5].data, SplitName::kTrain2H);
  EXPECT_EQ(replay->stages[5].data, SplitName::kTrain1H);
}

TEST(AblationSuiteTest, RejectsNonBridgeBase) {
  RunConfig c = tiny_config();
  c.stages[3].enabled = false;
  EXPECT_THROW(build_ablation_suite(c), ConfigError);
}

TEST(AblationSuiteTest, ReplayAndFreshArmsHaveMatchedStage3Budgets) {
  const auto suite = build_ablation_suite(tiny_config());
  auto res = run_suite("t", {suite[5], suite[7]}, {3}, 1);
  const auto* fresh = res.runs[0].ledger.find("STUDENT_RL");
  const auto* replay = res.runs[1].ledger.find("STUDENT_RL_REPLAY");
  ASSERT_TRUE(fresh && replay);
  EXPECT_EQ(fresh->prompt_draws, replay->prompt_draws);
  EXPECT_EQ(fresh->prompt_updates, replay->prompt_updates);
  EXPECT_EQ(fresh->rollouts, replay->rollouts);
  EXPECT_EQ(fresh->optimizer_steps, replay->optimizer_steps);
  EXPECT_EQ(fresh->data, SplitName::kTrain2H);
  EXPECT_EQ(replay->data, SplitName::kTrain1H);
  // Both arms start from the same bridged checkpoint.
  auto bridged = [](const RunSummary& r) {
    for (const auto& c : r.lineage)
      if (c.id == "STUDENT_BRIDGED") return c.fingerprint;
    return std::uint64_t{0};
  };
  EXPECT_EQ(bridged(res.runs[0]), bridged(res.runs[1]));
}

TEST(SuiteTest, ManifestAndRunDirectories) {
  const auto root = std::filesystem::temp_directory_path() / "opdlab_wf_suite";
  std::filesystem::remove_all(root);
  RunConfig base = tiny_config();
  base.output.dir = root.string();
  base.output.save_checkpoints = false;
  base.eval.diagnostics = false;
  const auto suite = build_ablation_suite(base);
  const auto res = run_suite("ablation", suite, {1, 2}, 2);
  ASSERT_EQ(res.manifest.size(), 16u);
  const auto manifest = manifest_from_json(Json::parse(read_file(root / "suite_manifest.json")));
  ASSERT_EQ(manifest.size(), 16u);
  for (const auto& m : manifest) EXPECT_TRUE(std::filesystem::exists(root / m.run_id / "metrics" / "eval.csv"));
  EXPECT_EQ(manifest[0].row, "full_bridge");
  EXPECT_EQ(manifest[8].seed, 2u);
  std::filesystem::remove_all(root);
}

TEST(AllocationTest, ArmsHaveEqualLabeledBudgets) {
  RunConfig base = tiny_config();
  base.tasks.count = 80;
  base.eval.diagnostics = false;
  base.teacher_rl.batches = 4;  // 1H has 32 prompts: 4 batches of 16 cover it
  base.grpo.batches = 2;        // 2H has 32 prompts
  const auto rep = allocation_experiment(base);
  EXPECT_EQ(rep.teacher_side.ledger.distinct_labeled_prompts(), rep.student_side.ledger.distinct_labeled_prompts());
  EXPECT_EQ(rep.labeled_prompts, 64);
  EXPECT_EQ(rep.labeled_draws, (4 + 2) * 16);
  EXPECT_NEAR(rep.difference,
              rep.teacher_side.final_eval().aggregate - rep.student_side.final_eval().aggregate, 0.0);
  const auto csv = rep.to_csv();
  EXPECT_NE(csv.find("teacher_side"), std::string::npos);
  EXPECT_NE(csv.find("student_side"), std::string::npos);
}

TEST(AllocationTest, UncoveredSplitIsABudgetMismatch) {
  RunConfig base = tiny_config();
  base.tasks.count = 80;
  base.eval.diagnostics = false;
  base.teacher_rl.batches = 3;  // covers 1H; one Stage-3 batch covers half of 2H
  base.grpo.batches = 1;        // while the FULL arm's 4 batches cover all 64 prompts
  EXPECT_THROW(allocation_experiment(base), RuntimeFailure);
  base.grpo.grpo.prompts_per_batch = 8;
  EXPECT_THROW(allocation_arms(base), ConfigError);
}

TEST(TeacherVariantTest, SameVariantAndSeedGiveIdenticalCheckpoint) {
  const RunConfig c = tiny_config();
  const auto env = make_environment(c);
  const auto data = env.select(SplitName::kTrain1H);
  for (auto v : {TeacherVariant::kRaw, TeacherVariant::kSft, TeacherVariant::kRl}) {
    const auto a = build_teacher_variant(v, c, data, env.vocab);
    const auto b = build_teacher_variant(v, c, data, env.vocab);
    EXPECT_EQ(a.teacher, b.teacher) << to_string(v);
  }
}

TEST(TeacherVariantTest, SftWithoutCorrectTracesFails) {
  RunConfig c = tiny_config();
  c.pretrain.train.learning_rate = 0.0;  // raw teacher stays a random table
  c.sft_build.beta = 1e9;                // accept every draw
  c.sft_build.traces_per_prompt = 1;
  const auto env = make_environment(c);
  try {
    build_teacher_variant(TeacherVariant::kSft, c, env.select(SplitName::kTrain1H), env.vocab);
    FAIL() << "expected RuntimeFailure";
  } catch (const RuntimeFailure& e) {
    EXPECT_NE(std::string(e.what()).find("traces_per_prompt"), std::string::npos);
  }
}

// Reference budgets, 10 seeds: RL beats RAW in exact expected reward on train
// tasks on >= 9 seeds, SFT sits strictly between them on >= 7.
TEST(TeacherVariantTest, RlAboveRawAndSftBetween) {
  int rl_wins = 0, sft_between = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    RunConfig c;
    c.seed = seed;
    const auto env = make_environment(c);
    const auto data = env.select(SplitName::kTrain1H);
    const auto rl = build_teacher_variant(TeacherVariant::kRl, c, data, env.vocab);
    const auto sft = build_teacher_variant(TeacherVariant::kSft, c, data, env.vocab);
    double r_raw = 0, r_sft = 0, r_rl = 0;
    const std::size_t n = 24;
    for (std::size_t i = 0; i < n; ++i) {
      r_raw += exact_expected_reward(rl.raw, *data[i], env.vocab);
      r_sft += exact_expected_reward(sft.teacher, *data[i], env.vocab);
      r_rl += exact_expected_reward(rl.teacher, *data[i], env.vocab);
    }
    rl_wins += r_rl > r_raw;
    sft_between += r_raw < r_sft && r_sft < r_rl;
  }
  EXPECT_GE(rl_wins, 9);
  EXPECT_GE(sft_between, 7);
}

// k=1 student after the generic format pass: GRPO mean reward over the last
// 10 of the first 50 batches exceeds that of the first 10, on >= 8/10 seeds.
TEST(StudentRlSanityTest, ContextOnePolicyLearnsOnDifficultyOne) {
  int rises = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    RunConfig c;
    c.seed = seed;
    c.teacher.spec.context_len = 1;
    const auto env = make_environment(c);
    const auto data = env.select(SplitName::kTrainFull);
    const auto start = build_teacher_variant(TeacherVariant::kRaw, c, data, env.vocab).raw;
    GrpoConfig g = c.grpo.grpo;
    g.seed = seed;
    const auto res = train_grpo(start, start, data, env.vocab, g, 50);
    double first = 0, last = 0;
    for (int i = 0; i < 10; ++i) {
      first += res.curve[static_cast<std::size_t>(i)].mean_reward;
      last += res.curve[static_cast<std::size_t>(40 + i)].mean_reward;
    }
    rises += last > first;
  }
  EXPECT_GE(rises, 8);
}
