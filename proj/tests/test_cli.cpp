#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

const std::string kCli = CNFTPR_CLI_PATH;

int run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " " + kCli + " " + args + " >/tmp/cnftpr_cli_out.txt 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string last_output() {
  std::ifstream in("/tmp/cnftpr_cli_out.txt");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string strip_wall(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream out;
  std::string line;
  while (std::getline(in, line)) out << line.substr(0, line.rfind(',')) << "\n";
  return out.str();
}

const std::string kTinyArgs =
    " --iters 2 --batch 32 --test-points 200 --out /tmp/cnftpr_cli_run";

}  // namespace

TEST_CASE("cli: happy-path train writes the run artifacts") {
  fs::remove_all("/tmp/cnftpr_cli_run");
  CHECK(run("train --dataset rings --tpr on --seed 3" + kTinyArgs) == 0);
  for (const char* f : {"run.csv", "eval.csv", "checkpoint.json", "config.resolved.json"})
    CHECK(fs::exists(fs::path("/tmp/cnftpr_cli_run") / f));
}

TEST_CASE("cli: rerun from config.resolved.json reproduces the record") {
  fs::remove_all("/tmp/cnftpr_cli_a");
  fs::remove_all("/tmp/cnftpr_cli_b");
  CHECK(run("train --dataset moons --tpr on --iters 5 --batch 32 --test-points 100 --seed 9 "
            "--out /tmp/cnftpr_cli_a") == 0);
  CHECK(run("train --config /tmp/cnftpr_cli_a/config.resolved.json --out /tmp/cnftpr_cli_b") ==
        0);
  CHECK(strip_wall("/tmp/cnftpr_cli_a/run.csv") == strip_wall("/tmp/cnftpr_cli_b/run.csv"));
}

TEST_CASE("cli: bad dataset is a usage error naming the value") {
  CHECK(run("train --dataset nosuch") == 1);
  CHECK(last_output().find("nosuch") != std::string::npos);
}

TEST_CASE("cli: unknown flag is a usage error") {
  CHECK(run("train --dataset rings --frobnicate 2") == 1);
}

TEST_CASE("cli: eval prints JSON with the NLL") {
  CHECK(run("eval --checkpoint /tmp/cnftpr_cli_run/checkpoint.json --dataset rings --seed 4 "
            "--test-points 100") == 0);
  nlohmann::json j = nlohmann::json::parse(last_output());
  CHECK(j.contains("test_nll"));
  CHECK(j["dataset"] == "rings");
}

TEST_CASE("cli: export commands produce files") {
  CHECK(run("export-density --checkpoint /tmp/cnftpr_cli_run/checkpoint.json --out "
            "/tmp/cnftpr_cli_density.csv --lo -2 --hi 2 --resolution 5") == 0);
  std::ifstream d("/tmp/cnftpr_cli_density.csv");
  std::string header;
  std::getline(d, header);
  CHECK(header == "x0,x1,logq");

  CHECK(run("export-traj --checkpoint /tmp/cnftpr_cli_run/checkpoint.json --out "
            "/tmp/cnftpr_cli_traj.json --grid 3 --bound 1.5") == 0);
  std::ifstream t("/tmp/cnftpr_cli_traj.json");
  nlohmann::json j;
  t >> j;
  CHECK(j["trajectories"].size() == 9);
}

TEST_CASE("cli: CNFTPR_SEED is the default and flags win") {
  fs::remove_all("/tmp/cnftpr_cli_env");
  CHECK(run("train --dataset rings --iters 1 --batch 16 --test-points 50 --out "
            "/tmp/cnftpr_cli_env",
            "CNFTPR_SEED=77") == 0);
  {
    std::ifstream in("/tmp/cnftpr_cli_env/config.resolved.json");
    nlohmann::json j;
    in >> j;
    CHECK(j["seed"].get<uint64_t>() == 77);
  }
  fs::remove_all("/tmp/cnftpr_cli_env");
  CHECK(run("train --dataset rings --iters 1 --batch 16 --test-points 50 --seed 5 --out "
            "/tmp/cnftpr_cli_env",
            "CNFTPR_SEED=77") == 0);
  std::ifstream in("/tmp/cnftpr_cli_env/config.resolved.json");
  nlohmann::json j;
  in >> j;
  CHECK(j["seed"].get<uint64_t>() == 5);
}

TEST_CASE("cli: selftest passes clean and the mutation hooks trip it") {
  CHECK(run("selftest") == 0);
  CHECK(run("selftest --corrupt-tableau 0.01") == 2);
  {
    const std::string out = last_output();
    CHECK(out.find("solver-order") != std::string::npos);
    CHECK(out.find("FAIL") != std::string::npos);
  }
  CHECK(run("selftest --flip-alpha-sign") == 2);
  const std::string out = last_output();
  CHECK(out.find("loss-decomposition") != std::string::npos);
  CHECK(out.find("FAIL") != std::string::npos);
}

TEST_CASE("cli: theory-check prints a passing table") {
  CHECK(run("theory-check") == 0);
  const std::string out = last_output();
  CHECK(out.find("transport-bimodal-residual") != std::string::npos);
  CHECK(out.find("FAIL") == std::string::npos);
}
