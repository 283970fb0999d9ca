#include "sewcal/sewcal.hpp"

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <regex>
#include <set>

namespace fs = std::filesystem;
using namespace sewcal;

namespace {

struct CliRun {
  int code = -1;
  std::string out, err;
};

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    dir_ = fs::temp_directory_path() / (std::string("sewcal_cli_") + info->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  CliRun run(const std::string& args) const {
    const auto out = dir_ / "stdout.txt", err = dir_ / "stderr.txt";
    const std::string cmd = "cd '" + dir_.string() + "' && '" + SEWCAL_CLI_PATH + "' " + args + " > '" +
                            out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    CliRun r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = detail::read_file(out.string());
    r.err = detail::read_file(err.string());
    return r;
  }

  std::string read(const std::string& rel) const { return detail::read_file((dir_ / rel).string()); }

  void make_corpus() const {
    const auto r = run("synth --ids 8 --seed 1 -o corpus.json");
    ASSERT_EQ(r.code, 0) << r.err;
  }

  void train_small(const std::string& out_dir, const std::string& extra = "") const {
    const auto r = run("train -q --corpus corpus.json --epochs 2 --batch-size 4 --embed-dim 8 --out-dir " + out_dir +
                       " " + extra);
    ASSERT_EQ(r.code, 0) << r.err;
  }

  fs::path dir_;
};

}  // namespace

TEST_F(CliTest, TrainFlagsAndConfigKeysAreBijective) {
  const auto r = run("train --help");
  ASSERT_EQ(r.code, 0);
  std::set<std::string> flags;
  const std::regex flag_re("--([a-z0-9-]+)");
  for (std::sregex_iterator it(r.out.begin(), r.out.end(), flag_re), end; it != end; ++it) flags.insert((*it)[1]);
  for (const char* own : {"help", "config", "quiet"}) EXPECT_EQ(flags.erase(own), 1u) << own;
  std::set<std::string> keys;
  for (const auto& f : config_fields()) {
    keys.insert(f.key);
    EXPECT_NE(r.out.find(f.help), std::string::npos) << "help text missing for --" << f.key;
  }
  EXPECT_EQ(flags, keys);
}

TEST_F(CliTest, EverySubcommandDocumentsItsFlags) {
  for (const char* sub : {"synth", "train", "eval", "analyze-gap", "dump-features", "grad-check"}) {
    const auto r = run(std::string(sub) + " --help");
    EXPECT_EQ(r.code, 0) << sub;
    EXPECT_NE(r.out.find("Options:"), std::string::npos) << sub;
  }
  const auto top = run("--help");
  for (const char* sub : {"synth", "train", "eval", "analyze-gap", "dump-features", "grad-check"}) {
    EXPECT_NE(top.out.find(sub), std::string::npos) << sub;
  }
}

TEST_F(CliTest, UsageErrorsExitTwo) {
  for (const char* args : {"", "train --epoch 3", "frobnicate", "eval --corpus x.json", "grad-check --loss nope"}) {
    const auto r = run(args);
    EXPECT_EQ(r.code, 2) << args;
    EXPECT_EQ(r.err.rfind("error[usage]: ", 0), 0u) << args << ": " << r.err;
  }
}

TEST_F(CliTest, RuntimeErrorsExitOneWithCategory) {
  auto r = run("train --corpus missing.json");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error[io]: ", 0), 0u) << r.err;
  EXPECT_EQ(std::count(r.err.begin(), r.err.end(), '\n'), 1);

  detail::write_file((dir_ / "bad.cfg").string(), "version = train_v1\nepoch = 3\n");
  r = run("train -c bad.cfg");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error[schema]: line 2: ", 0), 0u) << r.err;

  r = run("train --corpus c.json --batch-size 5");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error[value]: ", 0), 0u) << r.err;

  r = run("train --corpus c.json --epochs many");
  EXPECT_EQ(r.code, 1);
  EXPECT_EQ(r.err.rfind("error[parse]: ", 0), 0u) << r.err;
}

TEST_F(CliTest, PipelineWithConfigFileAndOverrides) {
  make_corpus();
  detail::write_file((dir_ / "train_v1.cfg").string(),
                     "version = train_v1\ncorpus = corpus.json\nout-dir = run\nepochs = 5\nbatch-size = 4\n"
                     "embed-dim = 8\nmcm = false\n");
  auto r = run("train -q -c train_v1.cfg --epochs 2 --mcm");
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"model.ckpt", "model.nodec.ckpt", "config.cfg", "report.csv", "report.json", "manifest.json"}) {
    EXPECT_TRUE(fs::exists(dir_ / "run" / f)) << f;
  }
  const auto cfg = parse_config(read("run/config.cfg"));
  EXPECT_EQ(cfg.train.epochs, 2);  // flag beats file
  EXPECT_TRUE(cfg.train.mcm_on);
  EXPECT_EQ(cfg.train.batch_size, 4);  // file beats default
  const auto report = nlohmann::json::parse(read("run/report.json"));
  EXPECT_EQ(report["epochs"], 2);
  EXPECT_GT(report["final_mcm"].get<double>(), 0.0);
  const auto manifest = nlohmann::json::parse(read("run/manifest.json"));
  EXPECT_EQ(manifest["seed"], 0);
  EXPECT_EQ(manifest["config_hash"].get<std::string>().size(), 16u);
  EXPECT_EQ(manifest["versions"]["config"], kConfigVersion);
  const auto csv = read("run/report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + report["steps"].get<long>());

  r = run("eval --checkpoint run/model.ckpt --corpus corpus.json -o metrics.json");
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = nlohmann::json::parse(read("metrics.json"));
  for (const char* k : {"rank1", "rank5", "rank10", "reranked", "gap"}) EXPECT_TRUE(metrics.contains(k)) << k;
  EXPECT_LE(metrics["rank1"].get<double>(), metrics["rank5"].get<double>());
}

TEST_F(CliTest, StripDecoderGivesIdenticalMetrics) {
  make_corpus();
  train_small("run");
  for (const std::string extra : {"", "--bn-at-eval", "--rerank --k1 5 --k2 2", "--split test"}) {
    ASSERT_EQ(run("eval --checkpoint run/model.ckpt --corpus corpus.json -o a.json " + extra).code, 0);
    ASSERT_EQ(run("eval --checkpoint run/model.ckpt --corpus corpus.json --strip-decoder -o b.json " + extra).code, 0);
    ASSERT_EQ(run("eval --checkpoint run/model.nodec.ckpt --corpus corpus.json -o c.json " + extra).code, 0);
    EXPECT_EQ(read("a.json"), read("b.json")) << extra;
    EXPECT_EQ(read("a.json"), read("c.json")) << extra;
  }
}

TEST_F(CliTest, SubcommandsAreDeterministic) {
  ASSERT_EQ(run("synth --ids 8 --seed 3 -o a.json").code, 0);
  ASSERT_EQ(run("synth --ids 8 --seed 3 -o b.json").code, 0);
  EXPECT_EQ(read("a.json"), read("b.json"));
  make_corpus();
  train_small("r1", "--seed 4");
  const std::string ckpt = read("r1/model.ckpt"), csv = read("r1/report.csv"), manifest = read("r1/manifest.json");
  train_small("r1", "--seed 4");
  EXPECT_EQ(read("r1/model.ckpt"), ckpt);
  EXPECT_EQ(read("r1/report.csv"), csv);
  EXPECT_EQ(read("r1/manifest.json"), manifest);
  train_small("r2", "--seed 4");
  EXPECT_EQ(read("r2/model.ckpt"), ckpt);
  ASSERT_EQ(run("analyze-gap --checkpoint r1/model.ckpt --corpus corpus.json -o g1.json").code, 0);
  ASSERT_EQ(run("analyze-gap --checkpoint r2/model.ckpt --corpus corpus.json -o g2.json").code, 0);
  EXPECT_EQ(read("g1.json"), read("g2.json"));
  const auto r = run("grad-check --loss cls --trials 20");
  const auto again = run("grad-check --loss cls --trials 20");
  EXPECT_EQ(r.out, again.out);
}

TEST_F(CliTest, DumpFeaturesReloadReproducesRankOne) {
  make_corpus();
  train_small("run");
  ASSERT_EQ(run("dump-features --checkpoint run/model.ckpt --corpus corpus.json -o feats.csv").code, 0);
  ASSERT_EQ(run("eval --checkpoint run/model.ckpt --corpus corpus.json -o m.json").code, 0);
  const auto f = features_from_csv(read("feats.csv"));
  const auto metrics = nlohmann::json::parse(read("m.json"));
  EXPECT_EQ(evaluate_features(f, {}).rank1, metrics["rank1"].get<double>());
  EXPECT_EQ(f.image_cls.rows(), 24);
  EXPECT_EQ(f.text_cls.rows(), 48);
}

TEST_F(CliTest, GradCheckReportsAndPasses) {
  const auto r = run("grad-check --loss sew");
  EXPECT_EQ(r.code, 0) << r.out << r.err;
  EXPECT_NE(r.out.find("sew: max_rel_err "), std::string::npos) << r.out;
}
