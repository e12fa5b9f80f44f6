#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int code = -1;
  std::string output;  // stdout and stderr interleaved
};

// Runs the installed binary with stdout/stderr captured to a scratch file.
RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const std::string capture = "cli_capture_" + std::to_string(counter++) + ".txt";
  const std::string cmd = std::string(FMT_SEARCH_BIN) + " " + args + " > " + capture + " 2>&1";
  const int status = std::system(cmd.c_str());
  RunResult r;
#ifdef _WIN32
  r.code = status;
#else
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
#endif
  std::ifstream in(capture, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  r.output = ss.str();
  std::remove(capture.c_str());
  return r;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) lines.push_back(line);
  return lines;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::istringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  return cells;
}

const std::string kGenArgs =
    "--synth.n_identities=5 --synth.scenes_train=12 --synth.scenes_test=8 --synth.seed=9";

// Dataset shared by the cases below, generated once through the CLI itself.
const fs::path& dataset_dir() {
  static const fs::path dir = [] {
    const fs::path d = "cli_ds";
    fs::remove_all(d);
    const RunResult r = run_cli("gen-data --out " + d.string() + " " + kGenArgs);
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

void write_config(const fs::path& path, const nlohmann::json& j) {
  std::ofstream out(path);
  out << j.dump(2);
}

// One short training run reused by the eval/search cases.
const fs::path& run_dir() {
  static const fs::path dir = [] {
    const fs::path d = "cli_run";
    fs::remove_all(d);
    write_config("cli_train_cfg.json",
                 {{"train", {{"total_iters", 60}, {"rpn_batch", 8}, {"seed", 3}}}});
    const RunResult r = run_cli("--config cli_train_cfg.json train --data " +
                                dataset_dir().string() + " --out " + d.string());
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("gen-data writes a loadable dataset and reports where") {
  const RunResult r = run_cli("gen-data --out cli_ds_report " + kGenArgs);
  CHECK(r.code == 0);
  CHECK(r.output.find("cli_ds_report") != std::string::npos);
  CHECK(fs::exists("cli_ds_report/train/manifest.json"));
  CHECK(fs::exists("cli_ds_report/test/manifest.json"));

  // Byte identical to the shared dataset built from the same seed.
  CHECK(slurp("cli_ds_report/train/manifest.json") ==
        slurp(dataset_dir() / "train/manifest.json"));
  CHECK(slurp("cli_ds_report/test/manifest.json") == slurp(dataset_dir() / "test/manifest.json"));
  const nlohmann::json manifest =
      nlohmann::json::parse(slurp(dataset_dir() / "train/manifest.json"));
  const std::string rel = manifest["scenes"][0]["image_path"].get<std::string>();
  CHECK(slurp(fs::path("cli_ds_report/train") / rel) == slurp(dataset_dir() / "train" / rel));
  fs::remove_all("cli_ds_report");
}

TEST_CASE("gen-data rejects impossible configurations with exit 2") {
  const RunResult r = run_cli("gen-data --out cli_ds_bad --synth.n_identities=1");
  CHECK(r.code == 2);
  CHECK(r.output.find("config error") != std::string::npos);
  fs::remove_all("cli_ds_bad");
}

TEST_CASE("unknown override keys and subcommands exit 2") {
  CHECK(run_cli("gen-data --out cli_ds_bad --synth.no_such_knob=1").code == 2);
  CHECK(run_cli("frobnicate").code == 2);
  CHECK(run_cli("search --checkpoint x.json --image q.png --box 0,0,8,8 --gallery g.png "
                "--train.lr0=0.1")
            .code == 2);
  fs::remove_all("cli_ds_bad");
}

TEST_CASE("train writes a checkpoint and a stage-annotated loss log") {
  const std::vector<std::string> log = lines_of(slurp(run_dir() / "train_log.csv"));
  REQUIRE(log.size() == 61);  // header + one row per iteration
  CHECK(log[0] == "iter,stage,lr,l_cls,l_reg,l_oim,l_softmax,l_rpn,l_det,l_reid,l_total");

  // Stages 0/1/2 switch at total/5 and total/2; the identity losses obey them.
  for (std::size_t i = 1; i < log.size(); ++i) {
    const std::vector<std::string> cells = split_csv(log[i]);
    REQUIRE(cells.size() == 11);
    const int iter = std::stoi(cells[0]);
    const int stage = std::stoi(cells[1]);
    CHECK(iter == static_cast<int>(i) - 1);
    CHECK(stage == (iter < 12 ? 0 : iter < 30 ? 1 : 2));
    const double l_oim = std::stod(cells[5]);
    const double l_softmax = std::stod(cells[6]);
    if (stage == 0) CHECK(l_oim == 0.0);
    if (stage < 2) CHECK(l_softmax == 0.0);
  }
  CHECK(fs::exists(run_dir() / "checkpoint.json"));
}

TEST_CASE("training twice from one seed produces identical artifacts") {
  run_dir();
  const RunResult r = run_cli("--config cli_train_cfg.json train --data " +
                              dataset_dir().string() + " --out cli_run_again");
  REQUIRE(r.code == 0);
  CHECK(slurp("cli_run_again/checkpoint.json") == slurp(run_dir() / "checkpoint.json"));
  CHECK(slurp("cli_run_again/train_log.csv") == slurp(run_dir() / "train_log.csv"));
  fs::remove_all("cli_run_again");
}

TEST_CASE("eval emits matching csv and json reports") {
  write_config("cli_eval_cfg.json", {{"eval", {{"gallery_sizes", {2, 3}}}}});
  const RunResult r = run_cli("--config cli_eval_cfg.json eval --checkpoint " +
                              (run_dir() / "checkpoint.json").string() + " --data " +
                              dataset_dir().string() + " --out cli_eval");
  REQUIRE(r.code == 0);
  CHECK(r.output.find("gallery 2:") != std::string::npos);
  CHECK(r.output.find("gallery 3:") != std::string::npos);
  CHECK(r.output.find("det_recall") != std::string::npos);

  const std::vector<std::string> csv = lines_of(slurp("cli_eval/report.csv"));
  REQUIRE(csv.size() == 3);  // header + one row per gallery size
  CHECK(csv[0] == "gallery_size,mAP,top1,top5,top10,det_recall");

  const nlohmann::json j = nlohmann::json::parse(slurp("cli_eval/report.json"));
  REQUIRE(j["rows"].size() == 2);
  for (std::size_t s = 0; s < 2; ++s) {
    const std::vector<std::string> cells = split_csv(csv[s + 1]);
    REQUIRE(cells.size() == 6);
    CHECK(std::stoi(cells[0]) == j["rows"][s]["gallery_size"].get<int>());
    CHECK(std::stod(cells[1]) == j["rows"][s]["mAP"].get<double>());
    CHECK(std::stod(cells[2]) == j["rows"][s]["top1"].get<double>());
    CHECK(std::stod(cells[3]) == j["rows"][s]["top5"].get<double>());
    CHECK(std::stod(cells[4]) == j["rows"][s]["top10"].get<double>());
    CHECK(std::stod(cells[5]) == j["det_recall"].get<double>());
  }
  fs::remove_all("cli_eval");
}

TEST_CASE("eval without a checkpoint exits 2") {
  const RunResult r = run_cli("eval --checkpoint cli_nowhere.json --data " +
                              dataset_dir().string() + " --out cli_eval_bad");
  CHECK(r.code == 2);
  CHECK(r.output.find("checkpoint") != std::string::npos);
  fs::remove_all("cli_eval_bad");
}

TEST_CASE("search ranks gallery pngs deterministically") {
  const nlohmann::json manifest =
      nlohmann::json::parse(slurp(dataset_dir() / "test/manifest.json"));
  const auto& scenes = manifest["scenes"];
  const std::string query_png =
      (dataset_dir() / "test" / scenes[0]["image_path"].get<std::string>()).string();
  const auto& box = scenes[0]["boxes"][0];
  std::ostringstream box_arg;
  box_arg << box[0].get<double>() << "," << box[1].get<double>() << "," << box[2].get<double>()
          << "," << box[3].get<double>();
  const std::string gallery =
      (dataset_dir() / "test" / scenes[1]["image_path"].get<std::string>()).string() + " " +
      (dataset_dir() / "test" / scenes[2]["image_path"].get<std::string>()).string();

  const std::string args = "search --checkpoint " + (run_dir() / "checkpoint.json").string() +
                           " --image " + query_png + " --box " + box_arg.str() + " --gallery " +
                           gallery;
  const RunResult a = run_cli(args + " --top-n 3");
  const RunResult b = run_cli(args + " --top-n 3");
  REQUIRE(a.code == 0);
  CHECK(a.output == b.output);
  const std::size_t ranked = lines_of(a.output).size();
  CHECK(ranked <= 3);

  // A wider cut never returns fewer rows, and the prefix is unchanged.
  const RunResult c = run_cli(args + " --top-n 100");
  CHECK(c.code == 0);
  CHECK(lines_of(c.output).size() >= ranked);
  if (a.output.find("no detections") == std::string::npos) {
    CHECK(c.output.substr(0, a.output.size()) == a.output);
  }

  CHECK(run_cli(args + " --top-n 0").code == 2);
}

TEST_CASE("gradcheck passes clean and fails corrupted") {
  const RunResult ok = run_cli("gradcheck --seed 5 --instances 2");
  CHECK(ok.code == 0);
  CHECK(ok.output.find("all gradients within tolerance") != std::string::npos);

  const RunResult bad = run_cli("gradcheck --seed 5 --instances 2 --corrupt");
  CHECK(bad.code == 1);
  CHECK(bad.output.find("FAILED") != std::string::npos);
}

TEST_CASE("ablate compares the three supervision variants") {
  write_config("cli_ablate_cfg.json",
               {{"train", {{"total_iters", 40}, {"rpn_batch", 8}, {"seed", 3}}}});
  const RunResult r = run_cli("--config cli_ablate_cfg.json ablate --data " +
                              dataset_dir().string() + " --out cli_ablate --gallery-size 2");
  REQUIRE(r.code == 0);
  CHECK(r.output.find("baseline: mAP ") != std::string::npos);
  CHECK(r.output.find("plabel_rpn: mAP ") != std::string::npos);
  CHECK(r.output.find("fmt_full: mAP ") != std::string::npos);
  CHECK(r.output.find("delta mAP (fmt_full - baseline): ") != std::string::npos);

  const std::vector<std::string> csv = lines_of(slurp("cli_ablate/ablation.csv"));
  REQUIRE(csv.size() == 4);
  CHECK(csv[0] == "variant,mAP,top1,top5");
  CHECK(split_csv(csv[1])[0] == "baseline");
  CHECK(split_csv(csv[2])[0] == "plabel_rpn");
  CHECK(split_csv(csv[3])[0] == "fmt_full");
  for (const char* variant : {"baseline", "plabel_rpn", "fmt_full"}) {
    CHECK(fs::exists(fs::path("cli_ablate") / ("checkpoint_" + std::string(variant) + ".json")));
    CHECK(fs::exists(fs::path("cli_ablate") / ("train_log_" + std::string(variant) + ".csv")));
  }
  fs::remove_all("cli_ablate");
}
