#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "diffwave/serialize.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int status;
  std::string out, err;
};

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() / ("diffwave_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  static std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  }

  Result run(const std::string& args) const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && '" DIFFWAVE_CLI_PATH "' " + args + " >'" + out.string() +
                            "' 2>'" + err.string() + "'";
    const int raw = std::system(cmd.c_str());
    return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, slurp(out), slurp(err)};
  }

  void write(const std::string& name, const std::string& text) const { std::ofstream(dir_ / name) << text; }

  // Tiny corpus plus a few training steps, enough to exercise the sampling commands.
  void train_tiny() {
    ASSERT_EQ(run("make-corpus --out corpus -n 12 --seed 3").status, 0);
    write("run.json", R"({"model": {"layers": 2, "channels": 4, "dilation_cycle_length": 2, "T": 10},
      "training": {"steps": 6, "batch": 2, "crop": 256, "checkpoint_interval": 3},
      "audio": {"sample_rate": 4000},
      "paths": {"data_dir": "corpus", "output_dir": "run"}})");
    const auto r = run("train -c run.json");
    ASSERT_EQ(r.status, 0) << r.err;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(Cli, InspectScheduleFirstRow) {
  const auto r = run("inspect-schedule --T 200 --beta-start 1e-4 --beta-end 0.02");
  ASSERT_EQ(r.status, 0) << r.err;
  std::istringstream in(r.out);
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "t,beta,alpha_bar,beta_tilde,t_align");
  EXPECT_EQ(first, "1,1e-04,0.9999,1e-04,1");
  std::size_t rows = 1;
  for (std::string line; std::getline(in, line);) ++rows;
  EXPECT_EQ(rows, 200u);
}

TEST_F(Cli, InspectFastScheduleAlignedSteps) {
  const auto r = run("inspect-schedule --fast --set model.T=50");
  ASSERT_EQ(r.status, 0) << r.err;
  std::istringstream in(r.out);
  std::string line;
  std::size_t rows = 0;
  std::getline(in, line);
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6u);
  EXPECT_NE(r.out.find("\n1,1e-04,0.9999,1e-04,1\n"), std::string::npos);
}

TEST_F(Cli, ReceptiveFieldOfBaseModel) {
  const auto r = run("receptive-field");
  ASSERT_EQ(r.status, 0);
  EXPECT_EQ(r.out, "6139\n");
  EXPECT_EQ(run("receptive-field --layers 36 --cycle 12").out, "24571\n");
}

TEST_F(Cli, ConfigErrorsExitTwo) {
  write("bad.json", R"({"model": {"layerz": 3}})");
  auto r = run("receptive-field -c bad.json");
  EXPECT_EQ(r.status, 2);
  EXPECT_EQ(r.err.rfind("error: config: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);
  EXPECT_EQ(run("receptive-field --layers 7 --cycle 2").status, 2);
  EXPECT_EQ(run("no-such-command").status, 2);
  EXPECT_EQ(run("inspect-schedule --set schedule.beta_end=2").status, 2);
}

TEST_F(Cli, MissingFilesExitThree) {
  auto r = run("sample --checkpoint missing.bin --out out");
  EXPECT_EQ(r.status, 3);
  EXPECT_EQ(r.err.rfind("error: io: ", 0), 0u) << r.err;
  EXPECT_EQ(run("receptive-field -c missing.json").status, 3);
  write("notack.bin", "garbage");
  EXPECT_EQ(run("sample --checkpoint notack.bin --out out").status, 3);
}

TEST_F(Cli, StrictEscalatesWarnings) {
  EXPECT_EQ(run("make-corpus --out c -n 3 --frequencies 101.3").status, 0);
  EXPECT_EQ(run("--strict make-corpus --out c2 -n 3 --frequencies 101.3").status, 5);
}

TEST_F(Cli, MakeCorpusIsReproducible) {
  ASSERT_EQ(run("make-corpus --out a -n 4 --seed 9").status, 0);
  ASSERT_EQ(run("make-corpus --out b -n 4 --seed 9").status, 0);
  for (const char* f : {"utt_00000.wav", "utt_00003.wav", "manifest.tsv", "corpus.json"})
    EXPECT_EQ(slurp(dir_ / "a" / f), slurp(dir_ / "b" / f)) << f;
  const auto j = nlohmann::json::parse(slurp(dir_ / "a" / "corpus.json"));
  EXPECT_EQ(j["spec_version"], "1.0");
}

TEST_F(Cli, TrainWritesArtifactsAndResumes) {
  train_tiny();
  for (const char* f : {"run/checkpoint.bin", "run/loss.tsv", "run/train.json"}) EXPECT_TRUE(fs::exists(dir_ / f)) << f;
  const auto m = nlohmann::json::parse(slurp(dir_ / "run" / "train.json"));
  EXPECT_EQ(m["spec_version"], "1.0");
  EXPECT_EQ(m["config"]["model"]["layers"], 2);
  EXPECT_EQ(m["steps"], 6);

  ASSERT_EQ(run("train -c run.json --set training.steps=9 --resume").status, 0);
  const auto curve = slurp(dir_ / "run" / "loss.tsv");
  EXPECT_EQ(std::count(curve.begin(), curve.end(), '\n'), 9);

  // An uninterrupted 9-step run ends at the same state.
  write("run9.json", R"({"model": {"layers": 2, "channels": 4, "dilation_cycle_length": 2, "T": 10},
      "training": {"steps": 9, "batch": 2, "crop": 256, "checkpoint_interval": 3},
      "audio": {"sample_rate": 4000},
      "paths": {"data_dir": "corpus", "output_dir": "run9"}})");
  ASSERT_EQ(run("train -c run9.json").status, 0);
  EXPECT_EQ(slurp(dir_ / "run9" / "loss.tsv"), curve);
}

TEST_F(Cli, SampleIsByteIdenticalUnderSeed) {
  train_tiny();
  ASSERT_EQ(run("sample --checkpoint run/checkpoint.bin -n 3 --length 300 --seed 4 --out s1").status, 0);
  ASSERT_EQ(run("sample --checkpoint run/checkpoint.bin -n 3 --length 300 --seed 4 --out s2").status, 0);
  ASSERT_EQ(run("sample --checkpoint run/checkpoint.bin -n 3 --length 300 --seed 5 --out s3").status, 0);
  for (const char* f : {"sample_00000.wav", "sample_00002.wav", "sample.json"})
    EXPECT_EQ(slurp(dir_ / "s1" / f), slurp(dir_ / "s2" / f)) << f;
  EXPECT_NE(slurp(dir_ / "s1" / "sample_00000.wav"), slurp(dir_ / "s3" / "sample_00000.wav"));
  const auto m = nlohmann::json::parse(slurp(dir_ / "s1" / "sample.json"));
  EXPECT_EQ(m["spec_version"], "1.0");
  EXPECT_EQ(m["seed"], 4);
  EXPECT_EQ(m["files"].size(), 3u);
  EXPECT_EQ(m["config"]["model"]["T"], 10);
}

TEST_F(Cli, FastSampleDenoiseInterpolate) {
  train_tiny();
  auto r = run("fast-sample --checkpoint run/checkpoint.bin -n 2 --length 256 --out f --etas 0.001 0.1 0.6");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "f" / "sample_00001.wav"));
  EXPECT_EQ(nlohmann::json::parse(slurp(dir_ / "f" / "fast-sample.json"))["etas"].size(), 3u);

  r = run("denoise --checkpoint run/checkpoint.bin --input corpus/utt_00001.wav --output d.wav --t-start 4");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(fs::file_size(dir_ / "d.wav"), fs::file_size(dir_ / "corpus" / "utt_00001.wav"));
  EXPECT_EQ(run("denoise --checkpoint run/checkpoint.bin --input corpus/utt_00001.wav --output d.wav --t-start 11").status, 2);

  r = run("interpolate --checkpoint run/checkpoint.bin --a corpus/utt_00001.wav --b corpus/utt_00002.wav "
          "--t-mix 5 --lambdas 0 0.5 1 --out i");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "i" / "interp_002.wav"));
  EXPECT_EQ(run("interpolate --checkpoint run/checkpoint.bin --a corpus/utt_00001.wav --b corpus/utt_00002.wav "
                "--t-mix 5 --lambdas 1.5 --out i2")
                .status,
            2);
}

TEST_F(Cli, EvaluateWritesReport) {
  ASSERT_EQ(run("make-corpus --out ref -n 40 --seed 1").status, 0);
  ASSERT_EQ(run("make-corpus --out gen -n 20 --seed 2").status, 0);
  const auto r = run("evaluate --generated gen --reference ref --classifier-epochs 40 --ndb-bins 5 --out report.json "
                     "--save-classifier clf.dftb");
  ASSERT_EQ(r.status, 0) << r.err;
  const auto j = nlohmann::json::parse(slurp(dir_ / "report.json"));
  for (const char* k : {"spec_version", "fid", "is", "mis", "am", "ndb", "ndb_over_k", "fid_class_mean", "accuracy", "config"})
    EXPECT_TRUE(j.contains(k)) << k;
  EXPECT_GE(j["accuracy"].get<double>(), 0.9);
  EXPECT_TRUE(fs::exists(dir_ / "clf.dftb"));
  EXPECT_EQ(run("evaluate --generated gen --reference ref --classifier clf.dftb --ndb-bins 5 --out r2.json").status, 0);
  EXPECT_EQ(run("evaluate --generated gen --reference nowhere").status, 3);
}
