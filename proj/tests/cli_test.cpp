#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

// Spawns the installed command-line binary; ATAC_CLI_PATH is injected by the
// build so the suite always tests the freshly built tool.

namespace fs = std::filesystem;

namespace {

const std::string kCli = ATAC_CLI_PATH;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "atac_cli_test" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const std::string& text) {
  std::size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

struct RunResult {
  int exit_code = -1;
  std::string out, err;
};

RunResult run(const std::string& args) {
  static int serial = 0;
  const fs::path dir = fs::temp_directory_path() / "atac_cli_test";
  fs::create_directories(dir);
  const fs::path out = dir / ("out" + std::to_string(serial) + ".txt");
  const fs::path err = dir / ("err" + std::to_string(serial) + ".txt");
  ++serial;
  const std::string cmd = kCli + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(out);
  r.err = read_file(err);
  return r;
}

// Small and fast: 16x16 textures, a two-stage model.
const std::string kTinySets =
    " --set data.resolution=16 --set model.stage_channels=4,8"
    " --set model.attention_channels=8 --set synth.n_normal=4 --set synth.n_anomalous=2";

class CliEnv : public ::testing::Test {
 protected:
  void SetUp() override { unsetenv("ATAC_SEED"); }
};

using Cli = CliEnv;

}  // namespace

TEST_F(Cli, HelpExitsCleanly) {
  auto r = run("--help");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_NE(r.out.find("synth"), std::string::npos);
  EXPECT_NE(r.out.find("heatmap"), std::string::npos);
}

TEST_F(Cli, UsageMistakesExitTwo) {
  EXPECT_EQ(run("").exit_code, 2);
  EXPECT_EQ(run("score --nope").exit_code, 2);
  EXPECT_EQ(run("synth --out " + scratch("set_form").string() + " --set resolution=16").exit_code,
            2);
  auto unknown = run("synth --out " + scratch("set_key").string() + " --set synth.sparkle=1");
  EXPECT_EQ(unknown.exit_code, 2);
  EXPECT_NE(unknown.err.find("unknown key"), std::string::npos);
  EXPECT_EQ(run("train --data m.tsv --out o --two-pass --single-pass").exit_code, 2);
}

TEST_F(Cli, SynthRejectsAMissingParentDirectory) {
  auto r = run("synth --out /nonexistent_atac_root/deep/dataset");
  EXPECT_EQ(r.exit_code, 2);
  EXPECT_NE(r.err.find("/nonexistent_atac_root"), std::string::npos);
}

TEST_F(Cli, SynthIsByteDeterministicAcrossRuns) {
  const fs::path a = scratch("synth_a"), b = scratch("synth_b");
  ASSERT_EQ(run("synth --seed 5 --out " + a.string() + kTinySets).exit_code, 0);
  ASSERT_EQ(run("synth --seed 5 --out " + b.string() + kTinySets).exit_code, 0);
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(a)) {
    const std::string n = e.path().filename().string();
    if (n != "resolved.cfg") names.push_back(n);  // embeds the differing out dir
  }
  ASSERT_FALSE(names.empty());
  EXPECT_TRUE(fs::exists(a / "manifest.tsv"));
  EXPECT_TRUE(fs::exists(a / "resolved.cfg"));
  for (const auto& n : names) {
    ASSERT_TRUE(fs::exists(b / n)) << n;
    EXPECT_EQ(read_file(a / n), read_file(b / n)) << n;
  }
}

TEST_F(Cli, EvalRejectsScoresForUnknownIds) {
  const fs::path dir = scratch("eval_mismatch");
  {
    std::ofstream s(dir / "scores.csv");
    s << "id,score,topk1,topk2,x0,y0,x1,y1\nghost.pgm,0.5,0,0,0,0,16,16\n";
    std::ofstream m(dir / "labels.tsv");
    m << "other.pgm\t0\nmore.pgm\t1\n";
  }
  auto r = run("eval --scores " + (dir / "scores.csv").string() + " --labels " +
               (dir / "labels.tsv").string() + " --out " + (dir / "out").string());
  EXPECT_EQ(r.exit_code, 1);
  EXPECT_NE(r.err.find("ghost.pgm"), std::string::npos);
}

TEST_F(Cli, FullPipelineTrainsScoresEvaluatesAndExportsHeatmaps) {
  const fs::path data = scratch("pipe_data");
  ASSERT_EQ(run("synth --seed 5 --out " + data.string() + kTinySets).exit_code, 0);
  const std::string manifest = (data / "manifest.tsv").string();

  const std::string train_args = " --data " + manifest + " --anomalies 2 --epochs 2 --batch 4" +
                                 kTinySets + " --seed 5";
  const fs::path t1 = scratch("pipe_train1"), t2 = scratch("pipe_train2");
  auto tr = run("train --out " + t1.string() + train_args);
  ASSERT_EQ(tr.exit_code, 0) << tr.err;
  EXPECT_NE(tr.out.find("checkpoint "), std::string::npos);
  EXPECT_NE(tr.out.find("train separation"), std::string::npos);
  EXPECT_TRUE(fs::exists(t1 / "model.ckpt"));
  EXPECT_TRUE(fs::exists(t1 / "resolved.cfg"));
  const std::string log = read_file(t1 / "train_log.csv");
  EXPECT_EQ(log.rfind("epoch,lr,mean_loss,mean_score_normal,mean_score_anomaly\n", 0), 0u);
  EXPECT_EQ(line_count(log), 3u);  // header plus one row per epoch

  ASSERT_EQ(run("train --out " + t2.string() + train_args).exit_code, 0);
  EXPECT_EQ(read_file(t1 / "model.ckpt"), read_file(t2 / "model.ckpt"));

  const std::string ckpt = (t1 / "model.ckpt").string();
  const fs::path s1 = scratch("pipe_score1"), s2 = scratch("pipe_score2");
  const std::string score_args = "score --ckpt " + ckpt + " --data " + manifest + kTinySets;
  auto sc = run(score_args + " --out " + s1.string());
  ASSERT_EQ(sc.exit_code, 0) << sc.err;
  const std::string csv = read_file(s1 / "scores.csv");
  EXPECT_EQ(csv.rfind("id,score,topk1,topk2,x0,y0,x1,y1\n", 0), 0u);
  EXPECT_EQ(line_count(csv), 7u);  // header plus one row per sample
  ASSERT_EQ(run(score_args + " --out " + s2.string()).exit_code, 0);
  EXPECT_EQ(read_file(s2 / "scores.csv"), csv);

  const fs::path empty = scratch("pipe_empty");
  const fs::path se = scratch("pipe_score_empty");
  auto sce = run("score --ckpt " + ckpt + " --data " + empty.string() + kTinySets + " --out " +
                 se.string());
  ASSERT_EQ(sce.exit_code, 0) << sce.err;
  EXPECT_EQ(read_file(se / "scores.csv"), "id,score,topk1,topk2,x0,y0,x1,y1\n");

  const fs::path ev = scratch("pipe_eval");
  auto er = run("eval --scores " + (s1 / "scores.csv").string() + " --labels " + manifest +
                " --out " + ev.string() + " --bins 8");
  ASSERT_EQ(er.exit_code, 0) << er.err;
  EXPECT_EQ(er.out.rfind("AUROC ", 0), 0u);
  const std::string hist = read_file(ev / "histogram.csv");
  EXPECT_EQ(hist.rfind("bin_lo,bin_hi,normal,anomalous\n", 0), 0u);
  EXPECT_EQ(line_count(hist), 9u);

  const fs::path one = scratch("pipe_one_image");
  fs::copy_file(data / "normal_000.pgm", one / "normal_000.pgm");
  const fs::path hm = scratch("pipe_heatmap");
  auto hr = run("heatmap --ckpt " + ckpt + " --data " + one.string() + " --out " + hm.string() +
                " --source attention --mask" + kTinySets);
  ASSERT_EQ(hr.exit_code, 0) << hr.err;
  EXPECT_TRUE(fs::exists(hm / "normal_000.pgm_map.pgm"));
  EXPECT_TRUE(fs::exists(hm / "normal_000.pgm_overlay.ppm"));
  EXPECT_TRUE(fs::exists(hm / "normal_000.pgm_mask.pgm"));
}
