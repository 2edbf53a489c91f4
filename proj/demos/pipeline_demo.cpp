// Runs a small teacher -> FKL -> OPD pipeline in memory and prints what each
// checkpoint scores. Usage: pipeline_demo [config.json]
#include <fstream>
#include <iostream>
#include <sstream>

#include "opdlab/workflow.hpp"

int main(int argc, char** argv) {
  using namespace opdlab;
  RunConfig cfg;
  if (argc > 1) {
    std::ifstream in(argv[1]);
    std::stringstream ss;
    ss << in.rdbuf();
    cfg = load_run_config(ss.str());
  } else {
    cfg.tasks.count = 400;
    cfg.teacher_rl.batches = 500;
    cfg.opd.steps = 150;
    cfg.eval.k = 4;
  }
  cfg.output.dir.clear();  // keep everything in memory

  const auto res = run_workflow(cfg);
  for (const auto& rec : res.lineage)
    std::cout << rec.id << " <- " << (rec.parent.empty() ? "-" : rec.parent) << " (" << rec.stage << ")\n";
  std::cout << '\n';
  for (const auto& e : res.evals)
    std::cout << e.checkpoint_id << ' ' << e.split << " avg@" << e.k << " = " << 100.0 * e.aggregate << " +- "
              << 100.0 * e.se << '\n';
  for (const auto& [id, d] : res.diagnostics)
    std::cout << id << " KL(T||S) " << d.c2_kl << ", implicit-reward variance " << d.implicit_reward_variance << '\n';
  return 0;
}
