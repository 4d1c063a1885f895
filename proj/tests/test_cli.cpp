#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cvl/synthdata.hpp"
#include "cvl/zeroshot.hpp"
#include "doctest.h"
#include "json.hpp"

namespace fs = std::filesystem;
namespace sd = cvl::synthdata;
namespace zs = cvl::zeroshot;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CVL_BIN) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

std::vector<std::string> lines_of(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::string fresh_dir(const std::string& stem) {
  const std::string dir = "/tmp/cvl_cli_" + stem;
  fs::remove_all(dir);
  return dir;
}

// Small everything: 8x8 images, one layer per stack, 12 steps per epoch.
const std::string kTinyModel =
    "--d_model 16 --heads 2 --vision_layers 1 --text_layers 1 --fusion_layers 1 "
    "--image_size 8 --patch_size 4 --proj_dim 8 --max_len 24";
const std::string kTinyTrain = "--batch_size 4 --queue_capacity 16";

std::string make_data(const std::string& stem, int n, int seed) {
  const std::string dir = fresh_dir(stem);
  REQUIRE(run_cli("gen-data --out " + dir + " --n " + std::to_string(n) + " --seed " +
                  std::to_string(seed) + " --image_size 8") == 0);
  return dir;
}

std::string make_run(const std::string& stem, const std::string& data, int epochs) {
  const std::string dir = fresh_dir(stem);
  REQUIRE(run_cli("train --data " + data + " --out " + dir + " --epochs " +
                  std::to_string(epochs) + " --warmup_epochs 1 " + kTinyModel + " " +
                  kTinyTrain) == 0);
  return dir;
}

}  // namespace

TEST_CASE("usage mistakes exit 2, help and version exit 0") {
  CHECK(run_cli("") == 2);                       // no subcommand
  CHECK(run_cli("no-such-command") == 2);
  CHECK(run_cli("gen-data") == 2);               // missing required --out
  CHECK(run_cli("gen-data --out /tmp/x --bogus 1") == 2);
  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("gen-data --help") == 0);
  CHECK(run_cli("--version") == 0);
}

TEST_CASE("gen-data writes disjoint 80/10/10 splits deterministically") {
  const std::string a = fresh_dir("gen_a");
  const std::string b = fresh_dir("gen_b");
  REQUIRE(run_cli("gen-data --out " + a + " --n 50 --seed 3 --image_size 8") == 0);
  REQUIRE(run_cli("gen-data --out " + b + " --n 50 --seed 3 --image_size 8") == 0);

  const auto train = sd::load_corpus(a + "/train.jsonl");
  const auto val = sd::load_corpus(a + "/val.jsonl");
  const auto test = sd::load_corpus(a + "/test.jsonl");
  CHECK(train.size() == 40);
  CHECK(val.size() == 5);
  CHECK(test.size() == 5);
  std::set<std::string> ids;
  for (const auto* split : {&train, &val, &test})
    for (const auto& s : *split) CHECK(ids.insert(s.study_id).second);

  for (const char* f : {"train.jsonl", "val.jsonl", "test.jsonl", "prompts.txt"})
    CHECK(slurp(a + "/" + f) == slurp(b + "/" + f));

  // A different seed must change the data.
  const std::string c = fresh_dir("gen_c");
  REQUIRE(run_cli("gen-data --out " + c + " --n 50 --seed 4 --image_size 8") == 0);
  CHECK(slurp(a + "/train.jsonl") != slurp(c + "/train.jsonl"));

  CHECK(fs::exists(a + "/manifest.json"));
  CHECK(zs::PromptSet::load(a + "/prompts.txt").classes.size() == sd::kNumClasses - 1);
}

TEST_CASE("gen-data refuses a non-empty directory unless forced") {
  const std::string dir = make_data("gen_force", 20, 0);
  CHECK(run_cli("gen-data --out " + dir + " --n 20 --seed 0 --image_size 8") == 3);
  CHECK(run_cli("gen-data --out " + dir + " --n 20 --seed 0 --image_size 8 --force") == 0);
}

TEST_CASE("config files feed flags and the command line wins") {
  const std::string cfg_path = "/tmp/cvl_cli_gen.cfg";
  {
    std::ofstream cfg(cfg_path);
    cfg << "n=30\nseed=11\nimage_size=8\n";
  }
  const std::string a = fresh_dir("cfg_a");
  REQUIRE(run_cli("gen-data --out " + a + " --config " + cfg_path) == 0);
  CHECK(sd::load_corpus(a + "/train.jsonl").size() == 24);

  // CLI flag overrides the config file's seed.
  const std::string b = fresh_dir("cfg_b");
  REQUIRE(run_cli("gen-data --out " + b + " --config " + cfg_path + " --seed 12") == 0);
  const std::string c = fresh_dir("cfg_c");
  REQUIRE(run_cli("gen-data --out " + c + " --n 30 --seed 12 --image_size 8") == 0);
  CHECK(slurp(b + "/train.jsonl") == slurp(c + "/train.jsonl"));
  CHECK(slurp(a + "/train.jsonl") != slurp(b + "/train.jsonl"));
}

TEST_CASE("zero-epoch training writes only the initial checkpoint") {
  const std::string data = make_data("train0_data", 20, 1);
  const std::string run = fresh_dir("train0_run");
  REQUIRE(run_cli("train --data " + data + " --out " + run +
                  " --epochs 0 --warmup_epochs 0 " + kTinyModel + " " + kTinyTrain) == 0);
  CHECK(fs::exists(run + "/checkpoint_final.ckpt"));
  CHECK(fs::exists(run + "/checkpoint_best.ckpt"));
  CHECK(fs::exists(run + "/vocab.txt"));
  CHECK(fs::exists(run + "/manifest.json"));
  CHECK(lines_of(run + "/steps.jsonl").empty());
  CHECK(slurp(run + "/checkpoint_final.ckpt") == slurp(run + "/checkpoint_best.ckpt"));
}

TEST_CASE("a resumed run reproduces the uninterrupted log and checkpoint") {
  const std::string data = make_data("resume_data", 40, 2);
  const std::string full = make_run("resume_full", data, 2);

  const std::string part = fresh_dir("resume_part");
  REQUIRE(run_cli("train --data " + data + " --out " + part + " --epochs 1 --warmup_epochs 1 " +
                  kTinyModel + " " + kTinyTrain) == 0);
  REQUIRE(run_cli("train --data " + data + " --out " + part + " --resume " + part +
                  "/checkpoint_final.ckpt --epochs 2 --warmup_epochs 1 " + kTinyModel + " " +
                  kTinyTrain) == 0);

  CHECK(slurp(part + "/steps.jsonl") == slurp(full + "/steps.jsonl"));
  CHECK(slurp(part + "/checkpoint_final.ckpt") == slurp(full + "/checkpoint_final.ckpt"));

  // Same flags, same seed: training is reproducible end to end.
  const std::string again = make_run("resume_again", data, 2);
  CHECK(slurp(again + "/steps.jsonl") == slurp(full + "/steps.jsonl"));
  CHECK(slurp(again + "/checkpoint_final.ckpt") == slurp(full + "/checkpoint_final.ckpt"));
}

TEST_CASE("eval-classify emits parsable scores and reports") {
  const std::string data = make_data("ec_data", 60, 5);
  const std::string run = make_run("ec_run", data, 1);
  const std::string out = fresh_dir("ec_out");
  REQUIRE(run_cli("eval-classify --run " + run + " --data " + data + "/test.jsonl --out " +
                  out + " --n_resamples 40") == 0);

  int simple = 0, detailed = 0;
  for (const auto& line : lines_of(out + "/scores.jsonl")) {
    const auto s = zs::score_from_json_line(line);  // throws on malformed lines
    (s.mode == "simple" ? simple : detailed)++;
  }
  CHECK(simple == detailed);
  CHECK(simple % static_cast<int>(sd::kNumClasses - 1) == 0);
  CHECK(simple > 0);

  int class_rows = 0, mean_rows = 0;
  for (const auto& line : lines_of(out + "/reports.jsonl")) {
    const auto j = nlohmann::json::parse(line);
    CHECK((j.at("name") == "auc" || j.at("name") == "f1"));
    CHECK(j.at("lower").get<double>() <= j.at("upper").get<double>());
    (j.at("class") == "mean" ? mean_rows : class_rows)++;
  }
  CHECK(mean_rows == 4);  // two modes, two metrics
  CHECK(class_rows % 2 == 0);
  CHECK(class_rows > 0);

  // Evaluating twice with the same seed reproduces every record.
  const std::string out2 = fresh_dir("ec_out2");
  REQUIRE(run_cli("eval-classify --run " + run + " --data " + data + "/test.jsonl --out " +
                  out2 + " --n_resamples 40") == 0);
  CHECK(slurp(out + "/scores.jsonl") == slurp(out2 + "/scores.jsonl"));
  CHECK(slurp(out + "/reports.jsonl") == slurp(out2 + "/reports.jsonl"));
}

TEST_CASE("eval-errors accounts for every study and rejects p=0") {
  const std::string data = make_data("ee_data", 60, 6);
  const std::string run = make_run("ee_run", data, 1);
  const std::string out = fresh_dir("ee_out");
  REQUIRE(run_cli("eval-errors --run " + run + " --data " + data + "/test.jsonl --out " + out +
                  " --p 1.0 --n_resamples 40") == 0);

  const auto counts = nlohmann::json::parse(slurp(out + "/counts.json"));
  int sum = 0;
  for (const char* type : {"none", "mismatch", "location", "extent", "false_negative",
                           "false_positive"})
    sum += counts.at(type).get<int>();
  CHECK(sum == counts.at("total").get<int>());
  CHECK(fs::exists(out + "/corrupted.jsonl"));
  // The saved set round-trips through the plain corpus reader too.
  CHECK(sd::load_corpus(out + "/corrupted.jsonl").size() ==
        static_cast<std::size_t>(counts.at("total").get<int>()));

  const std::string out0 = fresh_dir("ee_out0");
  CHECK(run_cli("eval-errors --run " + run + " --data " + data + "/test.jsonl --out " + out0 +
                " --p 0.0 --n_resamples 40") == 3);
}

TEST_CASE("correct logs substitutions and an impossible threshold makes none") {
  const std::string data = make_data("co_data", 60, 7);
  const std::string run = make_run("co_run", data, 1);
  const std::string ee = fresh_dir("co_ee");
  REQUIRE(run_cli("eval-errors --run " + run + " --data " + data + "/test.jsonl --out " + ee +
                  " --p 1.0 --n_resamples 40") == 0);

  const std::string out = fresh_dir("co_out");
  REQUIRE(run_cli("correct --run " + run + " --data " + ee + "/corrupted.jsonl --out " + out) ==
          0);
  for (const auto& line : lines_of(out + "/corrections.jsonl")) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.contains("study_id"));
    CHECK(j.contains("corrected"));
    for (const auto& s : j.at("substitutions")) {
      CHECK(s.at("position").get<int>() > 0);
      CHECK(s.at("before") != s.at("after"));
      CHECK(s.at("confidence").get<double>() >= 0.5);
    }
  }
  CHECK(fs::exists(out + "/summary.json"));

  // theta above 1 cannot be met by any probability.
  const std::string none = fresh_dir("co_none");
  REQUIRE(run_cli("correct --run " + run + " --data " + data + "/test.jsonl --plain --theta 1.5 "
                  "--out " + none) == 0);
  for (const auto& line : lines_of(none + "/corrections.jsonl"))
    CHECK(nlohmann::json::parse(line).at("substitutions").empty());
}

TEST_CASE("attend emits one heatmap file per non-special word") {
  const std::string data = make_data("at_data", 20, 8);
  const std::string run = make_run("at_run", data, 1);
  const std::string out = fresh_dir("at_out");
  REQUIRE(run_cli("attend --run " + run + " --data " + data + "/test.jsonl --out " + out +
                  " --limit 2") == 0);

  const auto side = lines_of(out + "/quadrants.jsonl");
  CHECK_FALSE(side.empty());
  for (const auto& line : side) {
    const auto j = nlohmann::json::parse(line);
    CHECK(fs::exists(out + "/" + j.at("file").get<std::string>()));
    double total = 0.0;
    for (const auto& m : j.at("quadrant_mass")) {
      CHECK(m.get<double>() >= 0.0);
      total += m.get<double>();
    }
    CHECK(total <= 1.0 + 1e-9);
  }
  // PGM files and sidecar lines pair up one to one.
  int pgms = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().extension() == ".pgm") ++pgms;
  CHECK(pgms == static_cast<int>(side.size()));

  // Requesting a fusion layer past the stack is a data error.
  const std::string bad = fresh_dir("at_bad");
  CHECK(run_cli("attend --run " + run + " --data " + data + "/test.jsonl --out " + bad +
                " --layer 7 --limit 1") == 3);
}
