#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "itupred/pipeline.h"
#include "support.h"

using namespace itupred;
namespace fs = std::filesystem;

namespace {

const char* const kSmall =
    " -s generator.ward=200 -s generator.planned=50 -s generator.unplanned=15"
    " -s split.planned_test=20 -s forest.n_trees=25 -s forest.runs=2 -s lstm.epochs=2"
    " -s lstm.hidden_size=8 -s lstm.runs=1 -s eval.resamples=50 -s explain.samples=5"
    " -s explain.background=20 -s explain.lime_perturbations=200";

struct Run {
  int code = -1;
  std::string out, err;
};

Run cli(const std::string& args, const fs::path& scratch) {
  const fs::path out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + ITUPRED_CLI + "\" " + args + " >\"" + out.string() +
                          "\" 2>\"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = testing::read_file(out);
  r.err = testing::read_file(err);
  return r;
}

std::string base_args(const fs::path& out) {
  return "-c \"" + (testing::config_dir() / "default.conf").string() + "\" -o \"" + out.string() + "\"" +
         kSmall;
}

std::vector<std::vector<std::string>> read_tsv(const fs::path& path) {
  std::ifstream in(path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '\t')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("stage by stage through the command line") {
  testing::TempDir dir("pipeline");
  const fs::path out = dir / "out";
  const std::string args = base_args(out);
  for (const char* stage :
       {"gen", "annotate", "build", "stats", "train-rf", "train-lstm", "eval", "explain", "report"}) {
    CAPTURE(stage);
    const Run r = cli(std::string(stage) + " " + args, dir.path());
    CHECK(r.code == 0);
    CHECK(r.err.empty());
    CHECK(r.out.rfind(std::string(stage) + ":", 0) == 0);
  }

  SUBCASE("ratio tables parse") {
    for (const char* name : {"ratio_ward_enriched.tsv", "ratio_itu_enriched.tsv"}) {
      const auto rows = read_tsv(out / "stats" / name);
      REQUIRE(rows.size() > 1);
      CHECK(rows[0] == std::vector<std::string>{"concept", "f_ward", "f_itu", "ratio", "chi2", "p"});
      for (std::size_t i = 1; i < rows.size(); ++i) {
        REQUIRE(rows[i].size() == 6);
        CHECK(std::stod(rows[i][5]) < 0.05);
        if (rows[i][3] != "NA") CHECK(std::stod(rows[i][3]) >= 0.0);
      }
    }
  }
  SUBCASE("every text artifact starts with the lineage header") {
    std::size_t checked = 0;
    for (const auto& e : fs::recursive_directory_iterator(out)) {
      if (!e.is_regular_file()) continue;
      const auto ext = e.path().extension();
      const std::string text = testing::read_file(e.path());
      CAPTURE(e.path().string());
      if (ext == ".tsv" || ext == ".jsonl") {
        CHECK(text.rfind("# itupred ", 0) == 0);
        ++checked;
      } else if (ext == ".svg") {
        CHECK(text.find("<!-- itupred report config_hash=") != std::string::npos);
        ++checked;
      }
      CHECK(text.find("config_hash=") != std::string::npos);
    }
    CHECK(checked > 20);
  }
  SUBCASE("run metrics load back") {
    const auto rows = load_run_metrics(out / "eval" / "run_metrics.tsv");
    CHECK(rows.size() == 12);
    for (const auto& r : rows)
      if (r.model == "rf" && r.group == "ITU") CHECK(r.values[1] > 0.5);
  }
  SUBCASE("rerunning a stage reproduces its bytes") {
    const std::string before = testing::read_file(out / "eval" / "metrics_rf.tsv");
    CHECK(cli("eval " + args, dir.path()).code == 0);
    CHECK(testing::read_file(out / "eval" / "metrics_rf.tsv") == before);
  }
  SUBCASE("a corrupt corpus is a data error") {
    testing::write_file(out / "corpus.jsonl", "{\"patient_id\": 3\n");
    const Run r = cli("annotate " + args, dir.path());
    CHECK(r.code == 4);
    CHECK(r.err.rfind("error: kind=parse code=4 message=\"", 0) == 0);
  }
}

TEST_CASE("all with an external corpus skips generation") {
  testing::TempDir dir("pipeline");
  REQUIRE(cli("gen " + base_args(dir / "first"), dir.path()).code == 0);
  const fs::path corpus = dir / "external.jsonl";
  fs::copy_file(dir / "first" / "corpus.jsonl", corpus);
  fs::copy_file(dir / "first" / "corpus.gold.jsonl", dir / "external.gold.jsonl");
  const Run r = cli("all " + base_args(dir / "second") + " -s paths.corpus=\"" + corpus.string() + "\"",
                    dir.path());
  CHECK(r.code == 0);
  CHECK(r.out.find("gen:") == std::string::npos);
  CHECK(r.out.find("report:") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "second" / "corpus.jsonl"));
  CHECK(fs::exists(dir / "second" / "report" / "calibration.svg"));
}

TEST_CASE("output directory from the environment") {
  testing::TempDir dir("pipeline");
  const fs::path out = dir / "from_env";
  const std::string cmd_args =
      "gen -c \"" + (testing::config_dir() / "default.conf").string() + "\"" + kSmall;
  ::setenv("ITUPRED_OUTPUT_DIR", out.c_str(), 1);
  const Run r = cli(cmd_args, dir.path());
  ::unsetenv("ITUPRED_OUTPUT_DIR");
  CHECK(r.code == 0);
  CHECK(fs::exists(out / "corpus.jsonl"));
}

TEST_CASE("error exit codes") {
  testing::TempDir dir("pipeline");
  const std::string args = base_args(dir / "out");

  SUBCASE("missing artifacts") {
    const Run r = cli("eval " + args, dir.path());
    CHECK(r.code == 3);
    CHECK(r.err.find("kind=missing_artifact code=3") != std::string::npos);
    CHECK(r.err.find("(run '") != std::string::npos);
  }
  SUBCASE("usage") {
    CHECK(cli("frobnicate", dir.path()).code == 1);
    CHECK(cli("", dir.path()).code == 1);
    CHECK(cli("gen --no-such-flag", dir.path()).code == 1);
  }
  SUBCASE("config") {
    const Run r = cli("gen " + args + " -s forest.n_tress=3", dir.path());
    CHECK(r.code == 2);
    CHECK(r.err.find("n_tress") != std::string::npos);
    CHECK(cli("gen -c \"" + (dir / "absent.conf").string() + "\"", dir.path()).code == 2);
    testing::write_file(dir / "broken.conf", "[forest\n");
    CHECK(cli("gen -c \"" + (dir / "broken.conf").string() + "\"", dir.path()).code == 2);
  }
  SUBCASE("help") {
    const Run r = cli("--help", dir.path());
    CHECK(r.code == 0);
    CHECK(r.out.find("train-lstm") != std::string::npos);
  }
}
