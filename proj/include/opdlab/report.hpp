#pragma once

// Post-hoc reporting over finished suite directories: tables, ordering
// summaries and a multi-panel SVG chart. Reads only files written by runs.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "opdlab/errors.hpp"
#include "opdlab/eval.hpp"
#include "opdlab/format.hpp"
#include "opdlab/workflow.hpp"

namespace opdlab {

struct LoadedRun {
  SuiteManifestEntry entry;
  std::string final_student;
  std::map<std::string, EvalReport> final_evals;  // split -> report of the final student
};

struct LoadedSuite {
  std::string name;
  std::vector<LoadedRun> runs;      // manifest order
  std::vector<std::string> splits;  // columns, in first-seen order
};

namespace detail {

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw RuntimeFailure("cannot read " + p.string());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

inline std::vector<std::vector<std::string>> read_csv_rows(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (;;) {
      const auto comma = line.find(',', start);
      cells.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline double parse_real(const std::string& s) {
  double x = 0.0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw RuntimeFailure("bad number '" + s + "' in CSV");
  return x;
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  return out;
}

// Returns false (and leaves `run` partly filled) when the run directory lacks
// the files a finished run writes.
inline bool load_run(const std::filesystem::path& root, LoadedRun& run, std::vector<std::string>& splits) {
  const auto dir = root / run.entry.run_id;
  if (!std::filesystem::exists(dir / "lineage.csv") || !std::filesystem::exists(dir / "metrics" / "eval.csv"))
    return false;
  for (const auto& row : read_csv_rows(read_file(dir / "lineage.csv")))
    if (row.size() > 1 && row[1].rfind("STUDENT_", 0) == 0) run.final_student = row[1];
  if (run.final_student.empty()) return false;
  const auto rows = read_csv_rows(read_file(dir / "metrics" / "eval.csv"));
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 7) throw RuntimeFailure("malformed eval.csv row in " + dir.string());
    if (r[2] != run.final_student) continue;
    EvalReport e;
    e.checkpoint_id = r[2];
    e.split = r[3];
    e.k = std::stoi(r[4]);
    e.aggregate = parse_real(r[5]);
    e.se = parse_real(r[6]);
    if (std::find(splits.begin(), splits.end(), e.split) == splits.end()) splits.push_back(e.split);
    run.final_evals[e.split] = e;
  }
  return !run.final_evals.empty();
}

}  // namespace detail

// Loads a suite directory; an incomplete suite throws, naming every missing run.
inline LoadedSuite load_suite(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "suite_manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw RuntimeFailure("no suite_manifest.json in " + dir.string());
  Json j;
  try {
    j = Json::parse(detail::read_file(manifest_path));
  } catch (const Json::exception& e) {
    throw RuntimeFailure("unreadable suite manifest: " + std::string(e.what()));
  }
  LoadedSuite suite;
  suite.name = j.value("suite", std::string{});
  std::vector<std::string> missing;
  for (auto& entry : manifest_from_json(j)) {
    LoadedRun run{entry, {}, {}};
    if (!detail::load_run(dir, run, suite.splits)) missing.push_back(entry.run_id);
    suite.runs.push_back(std::move(run));
  }
  if (!missing.empty()) {
    std::string msg = "incomplete suite, missing runs:";
    for (const auto& m : missing) msg += " " + m;
    throw RuntimeFailure(msg);
  }
  return suite;
}

// One row per run in manifest order.
inline ComparisonTable suite_table(const LoadedSuite& suite) {
  std::vector<TableRowSource> rows;
  for (const auto& r : suite.runs) rows.push_back({r.entry.label, r.entry.run_id, r.final_evals});
  return build_table(rows, suite.splits);
}

// One row per suite row: mean over seeds with the SE across seeds (the
// per-problem SE when only one seed exists).
inline ComparisonTable seed_mean_table(const LoadedSuite& suite) {
  ComparisonTable t;
  t.columns = suite.splits;
  std::vector<std::string> order;
  std::map<std::string, std::vector<const LoadedRun*>> by_row;
  for (const auto& r : suite.runs) {
    if (!by_row.count(r.entry.row)) order.push_back(r.entry.row);
    by_row[r.entry.row].push_back(&r);
  }
  for (const auto& row : order) {
    const auto& runs = by_row[row];
    t.row_labels.push_back(runs.front()->entry.label);
    t.run_ids.push_back(row);
    std::vector<TableCell> line;
    for (const auto& split : suite.splits) {
      std::vector<double> xs;
      for (const auto* r : runs) xs.push_back(r->final_evals.at(split).aggregate);
      line.push_back({mean_of(xs), runs.size() == 1 ? runs.front()->final_evals.at(split).se : standard_error(xs)});
    }
    t.cells.push_back(std::move(line));
  }
  return t;
}

inline std::vector<std::map<std::string, double>> per_seed_aggregates(const LoadedSuite& suite,
                                                                      const std::string& split = "EVAL") {
  std::map<std::uint64_t, std::map<std::string, double>> by_seed;
  for (const auto& r : suite.runs) by_seed[r.entry.seed][r.entry.row] = r.final_evals.at(split).aggregate;
  std::vector<std::map<std::string, double>> out;
  for (auto& [seed, m] : by_seed) out.push_back(std::move(m));
  return out;
}

inline double median_of(std::vector<double> xs) {
  if (xs.empty()) return 0.0;
  std::sort(xs.begin(), xs.end());
  const auto n = xs.size();
  return n % 2 ? xs[n / 2] : 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

// Per-row medians over seeds.
inline std::map<std::string, double> seed_medians(const std::vector<std::map<std::string, double>>& per_seed) {
  std::map<std::string, std::vector<double>> cols;
  for (const auto& s : per_seed)
    for (const auto& [row, v] : s) cols[row].push_back(v);
  std::map<std::string, double> out;
  for (auto& [row, xs] : cols) out[row] = median_of(xs);
  return out;
}

struct NamedOrdering {
  std::string name;
  OrderingReport report;
  bool median_holds = false;  // strict ordering of per-row medians
};

// The directional hypotheses the standard suites are built to probe; only
// those whose rows are all present are evaluated.
inline std::vector<NamedOrdering> standard_orderings(const std::vector<std::map<std::string, double>>& per_seed) {
  static const std::vector<std::pair<std::string, std::vector<std::string>>> hypotheses = {
      {"raw-teacher bridge < cold GRPO < RL-teacher bridge", {"no_stage1", "cold_grpo", "full_bridge"}},
      {"cold GRPO < full bridge", {"cold_grpo", "full_bridge"}},
      {"raw-teacher bridge < full bridge", {"no_stage1", "full_bridge"}},
      {"OPD only < full bridge", {"no_stage2a", "full_bridge"}},
      {"teacher-sample SFT only < full bridge", {"no_stage2b", "full_bridge"}},
      {"replay control < bridge(1H) + Stage 3(2H)", {"half_replay", "half_full"}},
      {"bridge only (1H) < bridge(1H) + Stage 3(2H)", {"half_bridge_only", "half_full"}},
      {"raw < SFT < RL teacher transfer", {"teacher_raw", "teacher_sft", "teacher_rl"}},
  };
  std::vector<NamedOrdering> out;
  if (per_seed.empty()) return out;
  const auto medians = seed_medians(per_seed);
  for (const auto& [name, rows] : hypotheses) {
    bool present = true;
    for (const auto& s : per_seed)
      for (const auto& r : rows) present = present && s.count(r);
    if (!present) continue;
    NamedOrdering o{name, ordering_test(per_seed, rows), true};
    for (std::size_t i = 0; i + 1 < rows.size(); ++i) o.median_holds = o.median_holds && medians.at(rows[i]) < medians.at(rows[i + 1]);
    out.push_back(std::move(o));
  }
  return out;
}

inline std::string orderings_to_text(const std::vector<NamedOrdering>& orderings,
                                     const std::map<std::string, double>& medians) {
  std::ostringstream os;
  os << "per-row medians over seeds:\n";
  for (const auto& [row, m] : medians) os << "  " << row << " " << format_fixed(100 * m, 2) << '\n';
  for (const auto& o : orderings)
    os << '\n' << o.name << '\n' << ordering_to_text(o.report) << "median ordering " << (o.median_holds ? "holds" : "does not hold") << '\n';
  return os.str();
}

// Multi-panel bar chart, one panel per column, each with its own zoomed value
// axis and SE whiskers. Static markup only.
inline std::string render_svg(const ComparisonTable& t, const std::string& title) {
  static const char* palette[] = {"#4C72B0", "#DD8452", "#55A868", "#C44E52", "#8172B3",
                                  "#937860", "#DA8BC3", "#8C8C8C", "#CCB974", "#64B5CD"};
  const double panel_w = std::max(240.0, 40.0 * static_cast<double>(t.row_labels.size()) + 90.0);
  const double panel_h = 300, plot_top = 50, plot_h = 170, left = 60, gap = 20;
  const double width = gap + static_cast<double>(t.columns.size()) * (panel_w + gap);
  const double height = panel_h + 40;
  std::ostringstream os;
  auto num = [](double x) { return format_fixed(x, 2); };
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(width) << "\" height=\"" << num(height)
     << "\" viewBox=\"0 0 " << num(width) << ' ' << num(height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
     << "<text x=\"" << num(width / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
     << detail::xml_escape(title) << "</text>\n";
  for (std::size_t c = 0; c < t.columns.size(); ++c) {
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const auto& row : t.cells) {
      lo = std::min(lo, row[c].value - row[c].se);
      hi = std::max(hi, row[c].value + row[c].se);
    }
    const double pad = hi > lo ? 0.15 * (hi - lo) : 0.02;
    lo = std::max(0.0, lo - pad);
    hi = std::min(1.0, hi + pad);
    if (hi <= lo) hi = lo + 0.01;
    const double x0 = gap + static_cast<double>(c) * (panel_w + gap);
    const double px = x0 + left, pw = panel_w - left - 10, py = plot_top, ph = plot_h;
    auto y_of = [&](double v) { return py + ph * (1.0 - (std::clamp(v, lo, hi) - lo) / (hi - lo)); };
    os << "<g>\n<text x=\"" << num(x0 + panel_w / 2) << "\" y=\"" << num(py - 10) << "\" text-anchor=\"middle\">"
       << detail::xml_escape(t.columns[c]) << "</text>\n";
    os << "<line x1=\"" << num(px) << "\" y1=\"" << num(py) << "\" x2=\"" << num(px) << "\" y2=\"" << num(py + ph)
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << num(px) << "\" y1=\"" << num(py + ph) << "\" x2=\"" << num(px + pw) << "\" y2=\""
       << num(py + ph) << "\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      const double v = lo + (hi - lo) * k / 4.0;
      const double y = y_of(v);
      os << "<line x1=\"" << num(px - 4) << "\" y1=\"" << num(y) << "\" x2=\"" << num(px) << "\" y2=\"" << num(y)
         << "\" stroke=\"black\"/>\n<text x=\"" << num(px - 6) << "\" y=\"" << num(y + 4)
         << "\" text-anchor=\"end\">" << format_fixed(100 * v, 1) << "</text>\n";
    }
    const double slot = pw / static_cast<double>(std::max<std::size_t>(1, t.row_labels.size()));
    for (std::size_t r = 0; r < t.row_labels.size(); ++r) {
      const auto& cell = t.cells[r][c];
      const double bx = px + slot * static_cast<double>(r) + slot * 0.15, bw = slot * 0.7;
      const double top = y_of(cell.value);
      os << "<rect x=\"" << num(bx) << "\" y=\"" << num(top) << "\" width=\"" << num(bw) << "\" height=\""
         << num(py + ph - top) << "\" fill=\"" << palette[r % 10] << "\"><title>"
         << detail::xml_escape(t.row_labels[r]) << ": " << format_fixed(100 * cell.value, 1) << "</title></rect>\n";
      const double cx = bx + bw / 2, y1 = y_of(cell.value - cell.se), y2 = y_of(cell.value + cell.se);
      os << "<line x1=\"" << num(cx) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(cx) << "\" y2=\"" << num(y2)
         << "\" stroke=\"black\"/>\n"
         << "<line x1=\"" << num(cx - 4) << "\" y1=\"" << num(y1) << "\" x2=\"" << num(cx + 4) << "\" y2=\"" << num(y1)
         << "\" stroke=\"black\"/>\n"
         << "<line x1=\"" << num(cx - 4) << "\" y1=\"" << num(y2) << "\" x2=\"" << num(cx + 4) << "\" y2=\"" << num(y2)
         << "\" stroke=\"black\"/>\n";
      const double ly = py + ph + 12;
      os << "<text x=\"" << num(cx) << "\" y=\"" << num(ly) << "\" text-anchor=\"end\" transform=\"rotate(-35 "
         << num(cx) << ' ' << num(ly) << ")\">" << detail::xml_escape(t.run_ids[r]) << "</text>\n";
    }
    os << "</g>\n";
  }
  os << "</svg>\n";
  return os.str();
}

enum class ReportFormat { kCsv, kSvg, kText };

inline ReportFormat report_format_from_string(const std::string& s) {
  if (s == "csv") return ReportFormat::kCsv;
  if (s == "svg") return ReportFormat::kSvg;
  if (s == "text") return ReportFormat::kText;
  throw ConfigError("unknown report format '" + s + "' (csv, svg, text)");
}

// Writes the requested formats under <suite>/report/ and returns the paths.
inline std::vector<std::filesystem::path> emit_report(const std::filesystem::path& suite_dir,
                                                      const std::set<ReportFormat>& formats) {
  const auto suite = load_suite(suite_dir);
  const auto runs = suite_table(suite);
  const auto means = seed_mean_table(suite);
  const auto out = suite_dir / "report";
  std::vector<std::filesystem::path> written;
  auto put = [&](const std::string& name, const std::string& text) {
    detail::write_text(out / name, text);
    written.push_back(out / name);
  };
  if (formats.count(ReportFormat::kCsv)) {
    put("table.csv", runs.to_csv());
    put("table_mean.csv", means.to_csv());
  }
  if (formats.count(ReportFormat::kText)) {
    put("table.txt", runs.to_text());
    put("table_mean.txt", means.to_text());
    if (std::find(suite.splits.begin(), suite.splits.end(), "EVAL") != suite.splits.end()) {
      const auto per_seed = per_seed_aggregates(suite);
      put("ordering.txt", orderings_to_text(standard_orderings(per_seed), seed_medians(per_seed)));
    }
  }
  if (formats.count(ReportFormat::kSvg)) put("figure.svg", render_svg(means, suite.name.empty() ? "suite" : suite.name));
  return written;
}

}  // namespace opdlab
