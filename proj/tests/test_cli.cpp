#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "orthonet/checkpoint.hpp"
#include "orthonet/dataset.hpp"
#include "orthonet/eval.hpp"
#include "orthonet/pipeline.hpp"

using namespace orthonet;
namespace fs = std::filesystem;

namespace {

fs::path work_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("orthonet_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p, std::ios::binary) << text; }

struct CliRun {
  int status = -1;
  std::string out, err;
};

// Runs the CLI inside `dir`, capturing both streams.
CliRun run_cli(const fs::path& dir, const std::string& args) {
  const std::string cmd = "cd '" + dir.string() + "' && '" ORTHONET_BIN "' " + args + " > stdout.txt 2> stderr.txt";
  const int raw = std::system(cmd.c_str());
  CliRun r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  r.out = read_text(dir / "stdout.txt");
  r.err = read_text(dir / "stderr.txt");
  return r;
}

// Entries of `dir` other than the captured streams.
std::size_t artifact_count(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    n += name != "stdout.txt" && name != "stderr.txt";
  }
  return n;
}

}  // namespace

TEST(CliUsage, UnknownFlagExitsTwoAndWritesNothing) {
  const fs::path dir = work_dir("unknown_flag");
  const CliRun r = run_cli(dir, "train --bogus 1 --out run");
  EXPECT_EQ(r.status, 2) << r.err;
  EXPECT_EQ(artifact_count(dir), 0u);
}

TEST(CliUsage, OtherUsageErrors) {
  const fs::path dir = work_dir("usage");
  EXPECT_EQ(run_cli(dir, "").status, 2);
  EXPECT_EQ(run_cli(dir, "frobnicate --out x").status, 2);
  EXPECT_EQ(run_cli(dir, "train").status, 2);  // --out is required
  EXPECT_EQ(run_cli(dir, "train --out x --config missing.cfg").status, 2);
  EXPECT_EQ(run_cli(dir, "train --out x --workers 2").status, 2);  // not a parallel command
  EXPECT_EQ(run_cli(dir, "evaluate --out x --workers many").status, 2);
  EXPECT_EQ(artifact_count(dir), 0u);
  const CliRun help = run_cli(dir, "--help");
  EXPECT_EQ(help.status, 0);
  EXPECT_NE(help.out.find("train-ortho"), std::string::npos);
}

TEST(CliErrors, DomainErrorsExitOne) {
  const fs::path dir = work_dir("domain");
  write_text(dir / "bad.cfg", "train.learning_rate = 0.1\n");
  CliRun r = run_cli(dir, "train --config bad.cfg --out run");
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("unknown key 'train.learning_rate'"), std::string::npos) << r.err;

  r = run_cli(dir, "train-ortho --out run2");  // no reference checkpoint
  EXPECT_EQ(r.status, 1);
  EXPECT_NE(r.err.find("reference.checkpoint"), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(dir / "run2" / "resolved.cfg"));

  r = run_cli(dir, "evaluate --out run3 --reference nowhere.orth");
  EXPECT_EQ(r.status, 1);
}

// The whole workflow on the stock data regime with the absolute penalty.
TEST(CliWorkflow, TrainOrthoEvaluateAttackDefendReport) {
  const fs::path dir = work_dir("workflow");
  write_text(dir / "c.cfg", "train.penalty = absolute  # see README\neval.n_samples = 200\n");

  CliRun r = run_cli(dir, "train --config c.cfg --out run1");
  ASSERT_EQ(r.status, 0) << r.err;
  r = run_cli(dir, "train-ortho --config c.cfg --reference run1/model.orth --lambda 30 --out run2");
  ASSERT_EQ(r.status, 0) << r.err;
  r = run_cli(dir, "train --config c.cfg --seed 2 --out run3");
  ASSERT_EQ(r.status, 0) << r.err;
  for (const char* run : {"run1", "run2", "run3"}) {
    EXPECT_TRUE(fs::exists(dir / run / "model.orth")) << run;
    EXPECT_TRUE(fs::exists(dir / run / "resolved.cfg")) << run;
    EXPECT_TRUE(fs::exists(dir / run / "train_log.csv")) << run;
  }

  // Similarity between the two checkpoints on the config's validation split.
  const Config cfg = Config::load((dir / "run2" / "resolved.cfg").string());
  EXPECT_EQ(cfg.get("train.lambda"), "30");
  EXPECT_EQ(cfg.get("reference.checkpoint"), "run1/model.orth");
  const auto [train, val] = load_datasets(cfg);
  const Checkpoint ref = load_checkpoint((dir / "run1" / "model.orth").string());
  const Checkpoint ortho = load_checkpoint((dir / "run2" / "model.orth").string());
  const PairSimilarity s = measure_pair_similarity(ref.model, ortho.model, val, val.size());
  EXPECT_LT(std::abs(s.mean), 0.05);
  EXPECT_NE(ortho.meta.seed, ref.meta.seed);
  EXPECT_EQ(ortho.meta.lambda, 30.0);
  EXPECT_EQ(ortho.meta.reference_hash, fnv1a_hex(read_file((dir / "run1" / "model.orth").string())));
  EXPECT_GT(ortho.meta.val_accuracy, ref.meta.val_accuracy - 0.05);

  // Rerunning with the logged config reproduces every file byte for byte.
  const std::string model_bytes = read_text(dir / "run2" / "model.orth");
  const std::string log_bytes = read_text(dir / "run2" / "train_log.csv");
  fs::copy_file(dir / "run2" / "resolved.cfg", dir / "rerun.cfg");
  r = run_cli(dir, "train-ortho --config rerun.cfg --out run2");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(read_text(dir / "run2" / "model.orth"), model_bytes);
  EXPECT_EQ(read_text(dir / "run2" / "train_log.csv"), log_bytes);

  // Transfer evaluation with a zero in the grid.
  const std::string eval_args =
      "evaluate --config c.cfg --reference run1/model.orth --target run3/model.orth --target run2/model.orth "
      "--eps 0,0.03,0.05 --attack fgsm,pgd ";
  r = run_cli(dir, eval_args + "--out ev1");
  ASSERT_EQ(r.status, 0) << r.err;
  r = run_cli(dir, eval_args + "--workers 3 --out ev2");
  ASSERT_EQ(r.status, 0) << r.err;
  const std::string csv = read_text(dir / "ev1" / "report.csv");
  EXPECT_EQ(csv, read_text(dir / "ev2" / "report.csv"));
  EXPECT_TRUE(fs::exists(dir / "ev1" / "report_plot.py"));
  const FoolingReport report = FoolingReport::parse_csv(csv);
  EXPECT_EQ(report.rows.size(), 2u * 3u * 3u);
  for (const FoolingRow& row : report.rows) {
    EXPECT_EQ(row.n, 200u);
    if (row.epsilon == 0.0) {
      EXPECT_EQ(row.n_fooled, 0u) << row.target << " " << row.attack;
    }
  }
  const FoolingRow* re = report.find("run3/model", "pgd", 0.05);
  const FoolingRow* orth = report.find("run2/model", "pgd", 0.05);
  ASSERT_TRUE(re && orth);
  EXPECT_LT(orth->fooling_ratio(), re->fooling_ratio());

  // Craft, then defend the crafted batch.
  r = run_cli(dir, "attack --config c.cfg --reference run1/model.orth --attack pgd --eps 0.03 --n-samples 50 --out adv");
  ASSERT_EQ(r.status, 0) << r.err;
  const Dataset adv = load_idx((dir / "adv" / "adv-images.idx").string(), (dir / "adv" / "adv-labels.idx").string());
  EXPECT_EQ(adv.size(), 50u);
  const std::string sidecar = read_text(dir / "adv" / "adv.csv");
  EXPECT_EQ(sidecar.substr(0, sidecar.find('\n')), "index,true_label,linf");
  std::istringstream lines(sidecar);
  std::string line;
  std::getline(lines, line);
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const double linf = std::stod(line.substr(line.rfind(',') + 1));
    EXPECT_LE(linf, 0.03 + 1e-9);
    ++count;
  }
  EXPECT_EQ(count, 50u);
  r = run_cli(dir, "attack --config c.cfg --reference run1/model.orth --eps 0.03 --out adv_bad");
  EXPECT_EQ(r.status, 1);  // four attacks configured, one needed

  r = run_cli(dir, "defend --config c.cfg --input adv/adv --defense bits:4 --out def");
  ASSERT_EQ(r.status, 0) << r.err;
  const Dataset defended =
      load_idx((dir / "def" / "defended-images.idx").string(), (dir / "def" / "defended-labels.idx").string());
  EXPECT_EQ(defended.labels, adv.labels);
  const Tensor expected = bit_reduce(adv.images, 4);
  EXPECT_EQ(std::vector<double>(defended.images.data().begin(), defended.images.data().end()),
            std::vector<double>(expected.data().begin(), expected.data().end()));

  // Defense table and report regeneration.
  r = run_cli(dir,
              "compare-defenses --config c.cfg --reference run1/model.orth --target run3/model.orth --target "
              "run2/model.orth --defense bits:3,jpeg:75 --eps 0.03 --attack fgsm --n-samples 100 --out cmp");
  ASSERT_EQ(r.status, 0) << r.err;
  const FoolingReport cmp = FoolingReport::parse_csv(read_text(dir / "cmp" / "report.csv"));
  EXPECT_EQ(cmp.rows.size(), 2u * 4u);
  EXPECT_EQ(cmp.find("run2/model", "clean", 0.0)->n_fooled, 0u);
  EXPECT_NE(read_text(dir / "cmp" / "table.txt").find("run3/model + jpeg:75"), std::string::npos);

  r = run_cli(dir, "report --input ev1/report.csv --out rep");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(read_text(dir / "rep" / "report.csv"), csv);
  EXPECT_TRUE(fs::exists(dir / "rep" / "report_plot.py"));
  EXPECT_NE(r.out.find("source run1/model"), std::string::npos);
}

TEST(CliWorkflow, SweepLambdaWritesOneRowPerLambda) {
  const fs::path dir = work_dir("sweep");
  write_text(dir / "c.cfg",
             "dataset.synth.n = 600\ntrain.max_epochs = 6\ntrain.epochs_check = 3\neval.n_samples = 40\n"
             "eval.eps_grid = 0,0.05\neval.attacks = fgsm\n");
  ASSERT_EQ(run_cli(dir, "train --config c.cfg --out ref").status, 0);
  const CliRun r = run_cli(dir, "sweep-lambda --config c.cfg --reference ref/model.orth --lambda 0,5 --out sweep");
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_NE(r.out.find("note: train.seed 1 is the reference's seed"), std::string::npos);
  const std::string table = read_text(dir / "sweep" / "lambda_sweep.csv");
  EXPECT_EQ(table.substr(0, table.find('\n')), "lambda,target,delta_mean,delta_mean_abs,delta_std,val_acc,epochs");
  EXPECT_NE(table.find("\n0,ortho-lambda-0,"), std::string::npos);
  EXPECT_NE(table.find("\n5,ortho-lambda-5,"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "sweep" / "ortho-lambda-5.orth"));
  const FoolingReport report = FoolingReport::parse_csv(read_text(dir / "sweep" / "report.csv"));
  EXPECT_EQ(report.rows.size(), 3u * 2u);
}
