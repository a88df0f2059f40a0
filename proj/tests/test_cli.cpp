#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "gnoc/datasets.hpp"

using nlohmann::json;

namespace {

struct CmdResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

CmdResult run_cli(const std::string& args) {
  const std::string err_path = "/tmp/gnoc_cli_test_stderr.txt";
  const std::string cmd =
      std::string(GNOC_CLI_PATH) + " " + args + " 2>" + err_path;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  CmdResult r;
  char buf[4096];
  std::size_t k;
  while ((k = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, k);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.err = slurp(err_path);
  return r;
}

std::string cfg_path(const char* name) {
  return std::string(GNOC_CONFIG_DIR) + "/" + name;
}

std::string work_dir(const char* stem) {
  const std::string d = std::string("/tmp/gnoc_cli_test_") + stem;
  std::filesystem::remove_all(d);
  std::filesystem::create_directories(d);
  return d;
}

}  // namespace

TEST_CASE("gen-data then profile round-trips the element inventory") {
  const auto dir = work_dir("gen");
  const auto gen = run_cli("gen-data -c " + cfg_path("toy_small.json") +
                           " --out " + dir + "/data");
  INFO(gen.err);
  REQUIRE(gen.code == 0);
  REQUIRE(std::filesystem::exists(dir + "/data/frames.txt"));
  REQUIRE(std::filesystem::exists(dir + "/data/train.txt"));
  REQUIRE(std::filesystem::exists(dir + "/data/manifest.json"));

  const auto declared = json::parse(slurp(dir + "/data/profile.json"));
  const auto prof = run_cli("profile --data " + dir + "/data/frames.txt");
  REQUIRE(prof.code == 0);
  const auto observed = json::parse(prof.out);

  // config toy_small.json declares z in [3, 5]
  CHECK(observed.at("elements") == json::array({3, 4, 5}));
  CHECK(observed.at("elements") == declared.at("elements"));
  CHECK(observed.at("digest") == declared.at("digest"));
  CHECK(observed.at("n_frames").get<int>() == 80);

  const auto manifest = json::parse(slurp(dir + "/data/manifest.json"));
  CHECK(manifest.at("status") == "ok");
  CHECK(manifest.at("command") == "gen-data");

  SECTION("seed override changes the generated data") {
    const auto gen2 = run_cli("gen-data -c " + cfg_path("toy_small.json") +
                              " --seed 5 --out " + dir + "/data5");
    REQUIRE(gen2.code == 0);
    const auto other = json::parse(slurp(dir + "/data5/profile.json"));
    CHECK(other.at("digest") != declared.at("digest"));
  }
}

TEST_CASE("train is deterministic, resumable, and evaluable") {
  const auto dir = work_dir("train");
  REQUIRE(run_cli("gen-data -c " + cfg_path("toy_small.json") + " --out " +
                  dir + "/data")
              .code == 0);
  const std::string data_flags =
      " --data " + dir + "/data/train.txt --val " + dir + "/data/val_id.txt";

  const auto t1 = run_cli("train -c " + cfg_path("toy_small.json") +
                          data_flags + " --out " + dir + "/run1");
  INFO(t1.err);
  REQUIRE(t1.code == 0);
  const auto t2 = run_cli("train -c " + cfg_path("toy_small.json") +
                          data_flags + " --out " + dir + "/run2");
  REQUIRE(t2.code == 0);

  const auto m1 = json::parse(slurp(dir + "/run1/metrics.json"));
  const auto m2 = json::parse(slurp(dir + "/run2/metrics.json"));
  CHECK(m1.at("param_digest") == m2.at("param_digest"));
  CHECK(m1.at("epochs_run") == 2);
  CHECK(std::filesystem::exists(dir + "/run1/best.ckpt"));
  CHECK(std::filesystem::exists(dir + "/run1/last.ckpt"));
  CHECK(std::filesystem::exists(dir + "/run1/curves.csv"));
  CHECK(slurp(dir + "/run1/last.ckpt") == slurp(dir + "/run2/last.ckpt"));

  const auto man1 = json::parse(slurp(dir + "/run1/manifest.json"));
  const auto man2 = json::parse(slurp(dir + "/run2/manifest.json"));
  CHECK(man1.at("status") == "ok");
  CHECK(man1.at("data").at("train").at("digest") ==
        man2.at("data").at("train").at("digest"));

  SECTION("a different seed trains different weights") {
    const auto t3 = run_cli("train -c " + cfg_path("toy_small.json") +
                            data_flags + " --seed 9 --out " + dir + "/run3");
    REQUIRE(t3.code == 0);
    const auto m3 = json::parse(slurp(dir + "/run3/metrics.json"));
    CHECK(m3.at("param_digest") != m1.at("param_digest"));
  }

  SECTION("resume continues to the new epoch budget") {
    // same config, larger epoch budget
    auto root = json::parse(slurp(cfg_path("toy_small.json")), nullptr, true,
                            /*ignore_comments=*/true);
    root["train"]["epochs"] = 3;
    std::ofstream(dir + "/more_epochs.json") << root.dump(2);
    const auto t4 = run_cli("train -c " + dir + "/more_epochs.json" +
                            data_flags + " --resume --out " + dir + "/run1");
    INFO(t4.err);
    REQUIRE(t4.code == 0);
    const auto m4 = json::parse(slurp(dir + "/run1/metrics.json"));
    CHECK(m4.at("epochs_run") == 1);  // epoch 3 only
  }

  SECTION("eval reproduces the training-time validation metrics") {
    const auto ev = run_cli("eval --ckpt " + dir + "/run1/best.ckpt" +
                            " --data " + dir + "/data/val_id.txt");
    REQUIRE(ev.code == 0);
    const auto metrics = json::parse(ev.out);
    CHECK_THAT(metrics.at("force_mae").get<double>(),
               Catch::Matchers::WithinRel(
                   m1.at("best_val_force_mae").get<double>(), 1e-10));
    CHECK(metrics.at("n_frames").get<int>() > 0);
  }

  SECTION("relax writes a summary and relaxed structures") {
    const auto rx =
        run_cli("relax -c " + cfg_path("toy_small.json") + " --ckpt " + dir +
                "/run1/best.ckpt --data " + dir +
                "/data/val_same_traj.txt --out " + dir + "/relaxed");
    INFO(rx.err);
    REQUIRE(rx.code == 0);
    const auto relaxed = gnoc::read_frames(dir + "/relaxed/relaxed.txt");
    const auto inputs = gnoc::read_frames(dir + "/data/val_same_traj.txt");
    CHECK(relaxed.size() == inputs.size());
    std::ifstream csv(dir + "/relaxed/relax.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header ==
          "index,trajectory_id,frame_index,converged,n_force_evals,"
          "final_fmax,final_energy");
  }
}

TEST_CASE("ablate runs the shipped aspect suite end to end") {
  const auto dir = work_dir("grid");
  const auto ab = run_cli("ablate -c " + cfg_path("aspect_suite.json") +
                          " --threads 2 --out " + dir + "/ablate");
  INFO(ab.err);
  REQUIRE(ab.code == 0);
  for (const char* f : {"records.csv", "tau.csv", "dendrogram.txt",
                        "improvements.csv", "throughput.csv", "long.csv",
                        "manifest.json"})
    CHECK(std::filesystem::exists(dir + "/ablate/" + f));

  std::ifstream rec(dir + "/ablate/records.csv");
  std::size_t rows = 0;
  for (std::string l; std::getline(rec, l);) ++rows;
  // (2 baseline seeds + 3 single-seed variants) x 4 datasets + header
  CHECK(rows == 21);

  std::ifstream tau(dir + "/ablate/tau.csv");
  std::string header;
  std::getline(tau, header);
  CHECK(header == "dataset,full,light_elements,small_systems,subset");

  const auto manifest = json::parse(slurp(dir + "/ablate/manifest.json"));
  CHECK(manifest.at("status") == "ok");
  CHECK(manifest.at("summary").at("n_failed") == 0);

  SECTION("correlate emits the correlation artifacts") {
    const auto co = run_cli("correlate -c " + cfg_path("aspect_suite.json") +
                            " --threads 2 --out " + dir + "/corr");
    REQUIRE(co.code == 0);
    CHECK(std::filesystem::exists(dir + "/corr/tau.csv"));
    CHECK(std::filesystem::exists(dir + "/corr/dendrogram.txt"));
    CHECK(std::filesystem::exists(dir + "/corr/records.csv"));
    CHECK(!std::filesystem::exists(dir + "/corr/improvements.csv"));
    // same spec, same seeds: identical measured MAEs
    CHECK(slurp(dir + "/corr/tau.csv") == slurp(dir + "/ablate/tau.csv"));
  }
}

TEST_CASE("config and usage errors exit 2, runtime failures exit 1") {
  const auto dir = work_dir("err");

  SECTION("malformed json") {
    std::ofstream(dir + "/bad.json") << "{ \"dataset\": { ";
    const auto r = run_cli("gen-data -c " + dir + "/bad.json --out " + dir +
                           "/out");
    CHECK(r.code == 2);
    CHECK(r.err.find("config error") != std::string::npos);
  }

  SECTION("unknown keys are rejected with their path") {
    std::ofstream(dir + "/unknown.json")
        << R"({"train": {"epochs": 1, "learning_rate": 0.1}})";
    const auto r = run_cli("train -c " + dir + "/unknown.json --data x --val y"
                           " --out " + dir + "/out");
    CHECK(r.code == 2);
    CHECK(r.err.find("config.train") != std::string::npos);
    CHECK(r.err.find("learning_rate") != std::string::npos);
  }

  SECTION("unknown section is rejected") {
    std::ofstream(dir + "/section.json") << R"({"trian": {}})";
    const auto r =
        run_cli("gen-data -c " + dir + "/section.json --out " + dir + "/out");
    CHECK(r.code == 2);
    CHECK(r.err.find("trian") != std::string::npos);
  }

  SECTION("bad flags and subcommands") {
    CHECK(run_cli("train").code == 2);           // missing required flags
    CHECK(run_cli("frobnicate").code == 2);      // no such subcommand
    CHECK(run_cli("").code == 2);                // subcommand required
    CHECK(run_cli("--help").code == 0);
  }

  SECTION("missing data file is a runtime failure") {
    const auto r = run_cli("train -c " + cfg_path("toy_small.json") +
                           " --data " + dir + "/nope.txt --val " + dir +
                           "/nope.txt --out " + dir + "/out");
    CHECK(r.code == 1);
    CHECK(!r.err.empty());
  }

  SECTION("config values out of range") {
    std::ofstream(dir + "/range.json") << R"({"split": {"train_frac": 1.5}})";
    const auto r =
        run_cli("gen-data -c " + dir + "/range.json --out " + dir + "/out");
    CHECK(r.code == 2);
  }
}
