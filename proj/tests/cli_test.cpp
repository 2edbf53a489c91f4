#include <gtest/gtest.h>

#include <sys/wait.h>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <sstream>

#include "opdlab/checks.hpp"
#include "opdlab/report.hpp"
#include "opdlab/workflow.hpp"

using namespace opdlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string output;  // stdout and stderr
};

Outcome run_cli(const std::string& args, const fs::path& cwd) {
  const std::string cmd = "cd '" + cwd.string() + "' && '" + std::string(OPDLAB_CLI) + "' " + args + " 2>&1";
  Outcome o;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return o;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) o.output.append(buf, n);
  const int status = pclose(pipe);
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

std::string tiny_config_path() { return std::string(OPDLAB_CONFIG_DIR) + "/tiny.json"; }

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("opdlab_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Tag-balance and quoting check, enough to reject malformed markup.
bool well_formed_xml(const std::string& s, std::string& why) {
  std::vector<std::string> stack;
  std::size_t i = 0;
  bool root_seen = false;
  while (i < s.size()) {
    if (s[i] == '&') {
      const auto semi = s.find(';', i);
      const std::string ent = semi == std::string::npos ? "" : s.substr(i, semi - i + 1);
      if (ent != "&amp;" && ent != "&lt;" && ent != "&gt;" && ent != "&quot;" && ent != "&apos;") {
        why = "bad entity at " + std::to_string(i);
        return false;
      }
      i = semi + 1;
      continue;
    }
    if (s[i] != '<') {
      if (stack.empty() && !std::isspace(static_cast<unsigned char>(s[i]))) {
        why = "text outside the root element";
        return false;
      }
      ++i;
      continue;
    }
    const auto close = s.find('>', i);
    if (close == std::string::npos) {
      why = "unterminated tag";
      return false;
    }
    std::string tag = s.substr(i + 1, close - i - 1);
    i = close + 1;
    if (tag.front() == '?') continue;
    if (tag.find('<') != std::string::npos) {
      why = "'<' inside a tag";
      return false;
    }
    std::size_t quotes = 0;
    for (char c : tag) quotes += c == '"';
    if (quotes % 2) {
      why = "unbalanced quotes in <" + tag + ">";
      return false;
    }
    if (tag.front() == '/') {
      const std::string name = tag.substr(1);
      if (stack.empty() || stack.back() != name) {
        why = "mismatched </" + name + ">";
        return false;
      }
      stack.pop_back();
      continue;
    }
    const bool self_closing = tag.back() == '/';
    const std::string name = tag.substr(0, tag.find_first_of(" \t\n/"));
    if (stack.empty()) {
      if (root_seen) {
        why = "second root element";
        return false;
      }
      root_seen = true;
    }
    if (!self_closing) stack.push_back(name);
  }
  if (!stack.empty()) why = "unclosed <" + stack.back() + ">";
  return stack.empty() && root_seen;
}

RunConfig small_config(const fs::path& out) {
  RunConfig c = load_run_config(slurp(tiny_config_path()));
  c.output.dir = out.string();
  return c;
}

}  // namespace

TEST(CliTest, OracleCheckPrintsOneLinePerIdentityAndExitsZero) {
  const auto dir = fresh_dir("oracle");
  const auto o = run_cli("oracle-check", dir);
  EXPECT_EQ(o.code, 0) << o.output;
  std::istringstream is(o.output);
  std::string line;
  int pass = 0, fail = 0;
  while (std::getline(is, line)) {
    pass += line.rfind("PASS ", 0) == 0;
    fail += line.rfind("FAIL ", 0) == 0;
  }
  EXPECT_EQ(pass, static_cast<int>(oracle_checks().size()));
  EXPECT_EQ(fail, 0);
}

TEST(CliTest, ClipRatioOutOfRangeIsConfigError) {
  const auto dir = fresh_dir("clip");
  const auto o = run_cli("run-workflow --config " + tiny_config_path() + " --set grpo.clip_ratio=1.5", dir);
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("clip_ratio must lie in (0, 1)"), std::string::npos) << o.output;
  EXPECT_FALSE(fs::exists(dir / "runs"));  // rejected before any compute
}

TEST(CliTest, UnknownKeyNamesNearestValidKey) {
  const auto dir = fresh_dir("unknown");
  const auto o = run_cli("run-workflow --set opd.stpes=3", dir);
  EXPECT_EQ(o.code, 1);
  EXPECT_NE(o.output.find("'opd.stpes'"), std::string::npos) << o.output;
  EXPECT_NE(o.output.find("nearest valid key: 'opd.steps'"), std::string::npos) << o.output;
  EXPECT_EQ(run_cli("no-such-command", dir).code, 1);
  EXPECT_EQ(run_cli("eval --checkpoint missing.bin", dir).code, 2);
}

TEST(CliTest, AblationSuiteWithTenSeedsWritesEightyRuns) {
  const auto dir = fresh_dir("ablation");
  const auto o = run_cli("ablation-suite --config " + tiny_config_path() +
                             " --seeds 10 --jobs 2 --out suite --set eval.diagnostics=false"
                             " --set output.save_checkpoints=false --set teacher_rl.batches=10",
                         dir);
  ASSERT_EQ(o.code, 0) << o.output;
  int runs = 0;
  for (const auto& e : fs::directory_iterator(dir / "suite")) runs += e.is_directory();
  EXPECT_EQ(runs, 80);
  ASSERT_TRUE(fs::exists(dir / "suite" / "suite_manifest.json"));
  const auto manifest = manifest_from_json(Json::parse(slurp(dir / "suite" / "suite_manifest.json")));
  EXPECT_EQ(manifest.size(), 80u);
  for (const auto& m : manifest) EXPECT_TRUE(fs::exists(dir / "suite" / m.run_id / "metrics" / "eval.csv"));

  const auto rep = run_cli("report --suite suite", dir);
  ASSERT_EQ(rep.code, 0) << rep.output;
  const auto table = slurp(dir / "suite" / "report" / "table.csv");
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 81);
  const auto means = slurp(dir / "suite" / "report" / "table_mean.csv");
  EXPECT_EQ(std::count(means.begin(), means.end(), '\n'), 9);
}

TEST(ReportTest, SingleRunSuiteGivesOneRowAndOneBarPerPanel) {
  const auto dir = fresh_dir("single");
  auto cfg = small_config(dir);
  cfg.eval.diagnostics = false;
  const auto res = run_suite("single", {{"only", "Only run", cfg}}, {cfg.seed}, 1);
  emit_report(dir, {ReportFormat::kCsv, ReportFormat::kSvg, ReportFormat::kText});
  const auto suite = load_suite(dir);
  const auto table = suite_table(suite);
  ASSERT_EQ(table.row_labels.size(), 1u);
  ASSERT_EQ(table.columns.size(), cfg.eval.splits.size());
  const auto svg = slurp(dir / "report" / "figure.svg");
  std::string why;
  EXPECT_TRUE(well_formed_xml(svg, why)) << why;
  EXPECT_EQ(svg.find("<script"), std::string::npos);
  // one bar per panel: bars are the rects carrying a <title>
  std::size_t bars = 0;
  for (auto p = svg.find("\"><title>"); p != std::string::npos; p = svg.find("\"><title>", p + 1)) ++bars;
  EXPECT_EQ(bars, cfg.eval.splits.size());
  std::size_t panels = 0;
  for (auto p = svg.find("<g>"); p != std::string::npos; p = svg.find("<g>", p + 1)) ++panels;
  EXPECT_EQ(panels, cfg.eval.splits.size());
}

TEST(ReportTest, CsvValuesEqualEvalReportAggregatesExactly) {
  const auto dir = fresh_dir("exact");
  auto cfg = small_config(dir);
  cfg.eval.diagnostics = false;
  cfg.eval.k = 3;  // thirds are not exact binary fractions
  const auto res = run_suite("exact", {{"a", "Row A", cfg}}, {1, 2}, 1);
  emit_report(dir, {ReportFormat::kCsv});
  std::istringstream is(slurp(dir / "report" / "table.csv"));
  std::string line;
  std::getline(is, line);
  std::size_t row = 0;
  bool any_nonzero = false;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 3 + 2 * cfg.eval.splits.size());
    for (std::size_t s = 0; s < cfg.eval.splits.size(); ++s) {
      const auto& e = res.runs[row].final_eval(to_string(cfg.eval.splits[s]));
      double v = 0, se = 0;
      std::from_chars(cells[3 + 2 * s].data(), cells[3 + 2 * s].data() + cells[3 + 2 * s].size(), v);
      std::from_chars(cells[4 + 2 * s].data(), cells[4 + 2 * s].data() + cells[4 + 2 * s].size(), se);
      EXPECT_EQ(v, e.aggregate);
      EXPECT_EQ(se, e.se);
      any_nonzero = any_nonzero || e.aggregate != 0.0;
    }
    ++row;
  }
  EXPECT_EQ(row, 2u);
  EXPECT_TRUE(any_nonzero);
  // rounding happens only in the text render
  const auto text = suite_table(load_suite(dir)).to_text();
  EXPECT_TRUE(std::regex_search(text, std::regex("\\d+\\.\\d ± \\d+\\.\\d")));
}

TEST(ReportTest, IncompleteSuiteListsMissingRuns) {
  const auto dir = fresh_dir("incomplete");
  auto cfg = small_config(dir);
  cfg.eval.diagnostics = false;
  const auto res = run_suite("inc", {{"a", "Row A", cfg}}, {1, 2, 3}, 1);
  fs::remove_all(dir / res.manifest[0].run_id);
  fs::remove(dir / res.manifest[2].run_id / "metrics" / "eval.csv");
  try {
    load_suite(dir);
    FAIL() << "incomplete suite accepted";
  } catch (const RuntimeFailure& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(res.manifest[0].run_id), std::string::npos) << msg;
    EXPECT_NE(msg.find(res.manifest[2].run_id), std::string::npos) << msg;
    EXPECT_EQ(msg.find(res.manifest[1].run_id), std::string::npos) << msg;
  }
  const auto o = run_cli("report --suite .", dir);
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.output.find(res.manifest[0].run_id), std::string::npos);
}

TEST(CliTest, EchoedConfigReproducesRunBitForBit) {
  const auto dir = fresh_dir("echo");
  auto cfg = small_config(dir / "suite");
  run_suite("echo", {{"a", "Row A", cfg}}, {5}, 1);
  const std::string run_id = cfg.run_id + "-s5";
  const auto echoed = run_cli("report --suite suite --config-of " + run_id, dir);
  ASSERT_EQ(echoed.code, 0) << echoed.output;
  {
    std::ofstream f(dir / "echoed.json");
    f << echoed.output;
  }
  const auto rerun = run_cli("run-workflow --config echoed.json --out again", dir);
  ASSERT_EQ(rerun.code, 0) << rerun.output;
  for (const char* name : {"metrics/eval.csv", "metrics/diagnostics.csv", "ledger.csv", "lineage.csv"})
    EXPECT_EQ(slurp(dir / "suite" / run_id / name), slurp(dir / "again" / run_id / name)) << name;
  EXPECT_EQ(slurp(dir / "suite" / run_id / "checkpoints" / "STUDENT_BRIDGED.bin"),
            slurp(dir / "again" / run_id / "checkpoints" / "STUDENT_BRIDGED.bin"));
}

TEST(CliTest, ModuleCommandsRunEndToEnd) {
  const auto dir = fresh_dir("commands");
  const std::string c = " --config " + tiny_config_path() + " --out out";
  auto ok = [&](const std::string& args) {
    const auto o = run_cli(args, dir);
    EXPECT_EQ(o.code, 0) << args << "\n" << o.output;
    return o;
  };
  ok("gen-tasks" + c);
  EXPECT_TRUE(fs::exists(dir / "out" / "tiny" / "tasks.jsonl"));
  EXPECT_TRUE(fs::exists(dir / "out" / "tiny" / "splits.csv"));
  ok("train-teacher" + c);
  const auto teacher = dir / "out" / "tiny" / "checkpoints" / "TEACHER_RL.bin";
  ASSERT_TRUE(fs::exists(teacher));
  ok("bridge" + c + " --set run_id=bridged");
  const auto bridged = dir / "out" / "bridged" / "checkpoints" / "STUDENT_BRIDGED.bin";
  ASSERT_TRUE(fs::exists(bridged));
  ok("student-rl" + c + " --set run_id=rl --init " + bridged.string());
  EXPECT_TRUE(fs::exists(dir / "out" / "rl" / "checkpoints" / "STUDENT_FINAL.bin"));
  const auto ev = ok("eval" + c + " --checkpoint " + bridged.string());
  EXPECT_NE(ev.output.find("schema_version,run_id,checkpoint,split,K,aggregate,se"), std::string::npos);
  const auto dg = ok("diagnose" + c + " --student " + bridged.string() + " --teacher " + teacher.string());
  EXPECT_NE(dg.output.find("c1_reward_gap"), std::string::npos);
  ok("allocation" + c + " --set grpo.batches=4 --set teacher_rl.batches=8");
  EXPECT_TRUE(fs::exists(dir / "out" / "allocation.csv"));
  ok("ablation-suite --teacher-variants" + c + " --set output.save_checkpoints=false");
  EXPECT_TRUE(fs::exists(dir / "out" / "suite_manifest.json"));
}
