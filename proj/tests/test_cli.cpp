#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dpstride/cli.hpp"

using namespace dpstride;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int code = 0;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  CliResult r;
  r.code = cli::run(std::move(args), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string fresh_dir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "dpstride_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir.string();
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::istringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
}

}  // namespace

TEST_CASE("help and usage errors") {
  CliResult help = run_cli({"--help"});
  REQUIRE(help.code == 0);
  REQUIRE(help.out.find("train") != std::string::npos);
  REQUIRE(help.out.find("solve") != std::string::npos);
  REQUIRE(run_cli({}).code == 2);
  REQUIRE(run_cli({"frobnicate"}).code == 2);
  CliResult no_budget = run_cli({"eval", "--seed", "1"});
  REQUIRE(no_budget.code == 2);
  REQUIRE(no_budget.err.find("error[usage]") != std::string::npos);
}

TEST_CASE("stochastic commands require a seed") {
  std::string dir = fresh_dir("seedless");
  CliResult r = run_cli({"table", "--output-dir", dir, "--grid-steps", "4"});
  REQUIRE(r.code == 2);
  REQUIRE(r.err.find("error[config]") != std::string::npos);
  REQUIRE(r.err.find("--seed") != std::string::npos);
}

TEST_CASE("table, solve, and replay agree end to end") {
  std::string dir = fresh_dir("flow");
  CliResult t = run_cli({"table", "--seed", "5", "--output-dir", dir, "--grid-steps", "8",
                         "--n-table-samples", "64"});
  REQUIRE(t.code == 0);
  REQUIRE(t.out.find("512 forward passes (expected 512)") != std::string::npos);
  REQUIRE(fs::exists(fs::path(dir) / "table.bin"));

  CliResult s = run_cli({"solve", "--output-dir", dir});
  REQUIRE(s.code == 0);
  REQUIRE(s.out.find("K=8") != std::string::npos);
  REQUIRE(fs::exists(fs::path(dir) / "schedules.json"));

  CliResult e = run_cli({"eval", "--output-dir", dir, "--budget", "4", "--replay"});
  REQUIRE(e.code == 0);
  auto report = lines_of(read_file(fs::path(dir) / "report.csv"));
  REQUIRE(report.size() == 2);
  REQUIRE(report[0] == "K,stride_kind,nats,bits_per_dim,stderr");
  auto cells = split_csv(report[1]);
  REQUIRE(cells[0] == "4");
  REQUIRE(cells[1] == "dp");

  // the replayed bound equals the solved cost plus the endpoint term exactly
  CostTable table = load_table(fs::path(dir) / "table.bin");
  DpTables dp = solve_all_budgets(table);
  REQUIRE(std::stod(cells[2]) == dp.C(4, 8) + table.prior_term);

  auto transitions = lines_of(read_file(fs::path(dir) / "transitions.csv"));
  REQUIRE(transitions.size() == 5);
  REQUIRE(transitions[0] == "s,t,nats");
  REQUIRE(split_csv(transitions[1])[0] == "0");
  REQUIRE(split_csv(transitions.back())[1] == "1");
}

TEST_CASE("artifacts are byte-identical across reruns") {
  std::string a = fresh_dir("rerun_a");
  std::string b = fresh_dir("rerun_b");
  for (const std::string& dir : {a, b}) {
    REQUIRE(run_cli({"table", "--seed", "5", "--output-dir", dir, "--grid-steps", "8",
                     "--n-table-samples", "64", "--threads", dir == a ? "1" : "3"})
                .code == 0);
    REQUIRE(run_cli({"solve", "--output-dir", dir}).code == 0);
    REQUIRE(run_cli({"sample", "--seed", "7", "--output-dir", dir, "--budget", "8",
                     "--stride-kind", "dp", "--n-chains", "16"})
                .code == 0);
  }
  for (const char* name : {"table.bin", "schedules.json", "samples.csv"})
    REQUIRE(read_file(fs::path(a) / name) == read_file(fs::path(b) / name));
}

TEST_CASE("evaluation with fresh draws and fixed strides") {
  std::string dir = fresh_dir("fresh_eval");
  CliResult e = run_cli({"eval", "--seed", "11", "--output-dir", dir, "--budget", "4",
                         "--stride-kind", "even", "--grid-steps", "8", "--n-eval-samples", "128"});
  REQUIRE(e.code == 0);
  REQUIRE(e.out.find("n=128") != std::string::npos);
  auto report = lines_of(read_file(fs::path(dir) / "report.csv"));
  REQUIRE(split_csv(report[1])[1] == "even");
  REQUIRE(std::stod(split_csv(report[1])[4]) > 0.0);
}

TEST_CASE("config files load, override, and reject unknown keys") {
  std::string dir = fresh_dir("config");
  fs::path cfg = fs::path(dir) / "run.json";
  write_text(cfg, R"({"seed": 5, "grid": {"steps": 8}, "estimate": {"table_samples": 64}})");
  CliResult t = run_cli({"table", "--config", cfg.string(), "--output-dir", dir});
  REQUIRE(t.code == 0);
  REQUIRE(t.out.find("8 grid steps, 64 samples") != std::string::npos);

  // flags win over the file
  CliResult o = run_cli({"table", "--config", cfg.string(), "--output-dir", dir,
                         "--grid-steps", "4"});
  REQUIRE(o.code == 0);
  REQUIRE(o.out.find("4 grid steps") != std::string::npos);

  write_text(cfg, R"({"seed": 5, "grid": {"steps": 8, "bogus": 1}})");
  CliResult bad = run_cli({"table", "--config", cfg.string(), "--output-dir", dir});
  REQUIRE(bad.code == 2);
  REQUIRE(bad.err.find("bogus") != std::string::npos);

  write_text(cfg, "{not json");
  CliResult mangled = run_cli({"table", "--config", cfg.string(), "--output-dir", dir});
  REQUIRE(mangled.code == 2);
  REQUIRE(mangled.err.find("error[file]") != std::string::npos);
}

TEST_CASE("inconsistent settings exit with the config code") {
  std::string dir = fresh_dir("invalid");
  fs::path cfg = fs::path(dir) / "run.json";
  write_text(cfg, R"({"seed": 1, "model": {"kind": "mlp", "path": "m.bin"},
                      "estimate": {"clip_x0": "off"}})");
  REQUIRE(run_cli({"table", "--config", cfg.string(), "--output-dir", dir}).code == 2);
  REQUIRE(run_cli({"table", "--seed", "1", "--dataset", "mixture2d", "--output-dir", dir}).code == 2);
  REQUIRE(run_cli({"eval", "--seed", "1", "--budget", "99", "--grid-steps", "8",
                   "--stride-kind", "even", "--output-dir", dir})
              .code == 2);
  REQUIRE(run_cli({"solve", "--output-dir", dir, "--budgets", "16", "--grid-steps", "8"}).code == 2);
  REQUIRE(run_cli({"solve", "--output-dir", fresh_dir("empty"), "--table", "missing.bin"}).code == 2);
}

TEST_CASE("schedule construction failures exit with the numeric code") {
  std::string dir = fresh_dir("numeric");
  fs::path cfg = fs::path(dir) / "run.json";
  // f must decay; an increasing table is structurally valid JSON but not a
  // usable schedule
  write_text(cfg, R"({"seed": 1, "schedule": {"kind": "custom",
                      "times": [0.0, 0.5, 1.0], "f": [1.0, 2.0, 0.0], "g": [0.0, 0.5, 1.0]}})");
  CliResult r = run_cli({"table", "--config", cfg.string(), "--output-dir", dir,
                         "--grid-steps", "4"});
  REQUIRE(r.code == 3);
  REQUIRE(r.err.find("error[numeric]") != std::string::npos);
}

TEST_CASE("sampling writes one row per chain and counts passes") {
  std::string dir = fresh_dir("sample");
  CliResult r = run_cli({"sample", "--seed", "7", "--output-dir", dir, "--budget", "4",
                         "--stride-kind", "quadratic", "--grid-steps", "8", "--n-chains", "16"});
  REQUIRE(r.code == 0);
  REQUIRE(r.out.find("64 forward passes") != std::string::npos);
  auto rows = lines_of(read_file(fs::path(dir) / "samples.csv"));
  REQUIRE(rows.size() == 17);
  REQUIRE(rows[0] == "x0,x1");
  REQUIRE(split_csv(rows[1]).size() == 2);
}

TEST_CASE("compare grids dp against fixed strides") {
  std::string dir = fresh_dir("compare");
  CliResult r = run_cli({"compare", "--seed", "9", "--output-dir", dir, "--grid-steps", "8",
                         "--n-table-samples", "64", "--n-eval-samples", "64",
                         "--budgets", "2,4,8"});
  REQUIRE(r.code == 0);
  auto rows = lines_of(read_file(fs::path(dir) / "compare.csv"));
  REQUIRE(rows.size() == 10);
  REQUIRE(rows[0] == "K,stride_kind,nats,bits_per_dim,stderr");
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(split_csv(rows[1 + 3 * i])[1] == "dp");
    REQUIRE(split_csv(rows[2 + 3 * i])[1] == "even");
    REQUIRE(split_csv(rows[3 + 3 * i])[1] == "quadratic");
  }
  // K = T leaves no freedom, so all three strides see the same path and the
  // same paired draws
  REQUIRE(split_csv(rows[7])[2] == split_csv(rows[8])[2]);
  REQUIRE(split_csv(rows[8])[2] == split_csv(rows[9])[2]);
}

TEST_CASE("mc ablation emits one block per table size") {
  std::string dir = fresh_dir("ablate");
  CliResult r = run_cli({"ablate-mc", "--seed", "9", "--output-dir", dir, "--grid-steps", "8",
                         "--n-eval-samples", "64", "--budgets", "4", "--mc-counts", "16,64"});
  REQUIRE(r.code == 0);
  auto rows = lines_of(read_file(fs::path(dir) / "ablate_mc.csv"));
  REQUIRE(rows.size() == 3);
  REQUIRE(rows[0] == "n_samples,K,stride_kind,nats,bits_per_dim,stderr");
  REQUIRE(split_csv(rows[1])[0] == "16");
  REQUIRE(split_csv(rows[2])[0] == "64");
  CliResult bad = run_cli({"ablate-mc", "--seed", "9", "--output-dir", dir,
                           "--mc-counts", "64,64"});
  REQUIRE(bad.code == 2);
}

TEST_CASE("trained models drive the full pipeline") {
  std::string dir = fresh_dir("mlp_flow");
  fs::path cfg = fs::path(dir) / "run.json";
  write_text(cfg, R"({"seed": 3, "grid": {"steps": 8},
                      "dataset": {"kind": "mixture2d"},
                      "model": {"kind": "mlp", "hidden": [16], "time_features": 4},
                      "train": {"steps": 300},
                      "estimate": {"table_samples": 32, "eval_samples": 32}})");
  CliResult t = run_cli({"train", "--config", cfg.string(), "--output-dir", dir});
  REQUIRE(t.code == 0);
  REQUIRE(fs::exists(fs::path(dir) / "model.bin"));
  auto trace = lines_of(read_file(fs::path(dir) / "train_loss.csv"));
  REQUIRE(trace[0] == "step,loss");
  REQUIRE(trace.size() >= 3);
  double first = std::stod(split_csv(trace[1])[1]);
  double last = std::stod(split_csv(trace.back())[1]);
  REQUIRE(last < first);

  std::string model = (fs::path(dir) / "model.bin").string();
  REQUIRE(run_cli({"table", "--config", cfg.string(), "--output-dir", dir, "--model", model})
              .code == 0);
  REQUIRE(run_cli({"solve", "--output-dir", dir, "--budgets", "2,4,8", "--grid-steps", "8"})
              .code == 0);
  CliResult e = run_cli({"eval", "--config", cfg.string(), "--output-dir", dir, "--model", model,
                         "--budget", "4", "--replay"});
  REQUIRE(e.code == 0);
  CliResult sample = run_cli({"sample", "--config", cfg.string(), "--output-dir", dir, "--model",
                              model, "--budget", "4", "--n-chains", "8"});
  REQUIRE(sample.code == 0);
}
