#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "drtune/cli.hpp"
#include "drtune/config.hpp"

using namespace drtune;

namespace {

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str(const std::string& sub = "") const {
    return sub.empty() ? path.string() : (path / sub).string();
  }
};

ExperimentManifest parse_text(const std::string& text) {
  std::istringstream ss(text);
  return parse_manifest(ss, "<test>");
}

// Strips the trailing wall-clock column of summary.csv rows.
std::string summary_without_wall(const std::string& contents) {
  std::string out;
  for (const auto& line : split(contents, '\n')) {
    if (line.empty()) continue;
    const auto pos = line.rfind(',');
    out += line.substr(0, pos);
    out += '\n';
  }
  return out;
}

ExperimentManifest drifted_manifest(const std::string& out_dir) {
  ExperimentManifest m;
  m.dataset.kind = DatasetConfig::Kind::drifted;
  m.dataset.drift.classes = 4;
  m.dataset.drift.dim = 8;
  m.dataset.drift.train_per_class = 32;
  m.dataset.drift.test_per_class = 32;
  m.train.bank_size = 128;
  m.train.batch_size = 32;
  m.train.epochs = 4;
  m.train.seed = 9;
  m.out_dir = out_dir;
  return m;
}

}  // namespace

TEST_CASE("manifest parsing round-trips through the resolved echo") {
  const ExperimentManifest m = parse_text(
      "[run]\n"
      "method = l2sp\n"
      "seed = 42\n"
      "out = runs/x\n"
      "[train]\n"
      "epochs = 7\n"
      "batch = 16\n"
      "k = 96\n"
      "lr = 0.02\n"
      "schedule = linear\n"
      "ablate_sc = clt+cga\n"
      "[model]\n"
      "hidden = 32,16\n"
      "feature_dim = 8\n"
      "activation = tanh\n"
      "[dataset]\n"
      "kind = mixture\n"
      "classes = 5\n"
      "dim = 12\n");
  CHECK(m.train.method == Method::l2sp);
  CHECK(m.train.seed == 42);
  CHECK(m.train.epochs == 7);
  CHECK(m.train.bank_size == 96);
  CHECK(m.train.schedule == LrSchedule::linear);
  CHECK(m.train.switches.tag() == "clt+cga");
  CHECK(m.model.hidden == std::vector<std::size_t>{32, 16});
  CHECK(m.model.activation == Activation::tanh_fn);
  CHECK(m.dataset.kind == DatasetConfig::Kind::mixture);
  CHECK(m.dataset.classes == 5);

  std::ostringstream echoed;
  write_resolved_manifest(echoed, m);
  const ExperimentManifest back = parse_text(echoed.str());
  CHECK(back.train.method == m.train.method);
  CHECK(back.train.bank_size == m.train.bank_size);
  CHECK(back.dataset.kind == m.dataset.kind);
  CHECK(back.model.hidden == m.model.hidden);

  std::ostringstream echoed2;
  write_resolved_manifest(echoed2, back);
  CHECK(echoed.str() == echoed2.str());
}

TEST_CASE("manifest rejects unknown keys and malformed lines") {
  CHECK_THROWS_AS(parse_text("[dataset]\nflavor = spicy\n"), Error);
  CHECK_THROWS_AS(parse_text("[nonsense]\nx = 1\n"), Error);
  CHECK_THROWS_AS(parse_text("[train]\nepochs\n"), Error);
  CHECK_THROWS_AS(parse_text("[train]\nepochs = twelve\n"), Error);
  CHECK_THROWS_AS(parse_text("[run]\nmethod = sgd\n"), Error);

  // comments and blank lines are fine; empty values keep defaults
  const ExperimentManifest m = parse_text(
      "# a comment\n"
      "[train]\n"
      "epochs = 3  # trailing comment\n"
      "\n"
      "lambda_override =\n");
  CHECK(m.train.epochs == 3);
  CHECK(m.train.lambda_override < 0.0);
}

TEST_CASE("validate_manifest checks referenced paths before running") {
  ExperimentManifest m;
  m.dataset.kind = DatasetConfig::Kind::csv;
  m.dataset.classes = 3;
  m.dataset.train_csv = "/nonexistent/train.csv";
  m.dataset.test_csv = "/nonexistent/test.csv";
  CHECK_THROWS_AS(validate_manifest(m, "pretrain"), Error);

  ExperimentManifest f;  // transfer kind requires a checkpoint for finetune
  f.dataset.kind = DatasetConfig::Kind::transfer;
  CHECK_THROWS_AS(validate_manifest(f, "finetune"), Error);

  ExperimentManifest d = f;
  d.dataset.kind = DatasetConfig::Kind::drifted;
  d.checkpoint = "something.ckpt";  // drifted takes no checkpoint
  CHECK_THROWS_AS(validate_manifest(d, "finetune"), Error);

  ExperimentManifest p;
  p.dataset.kind = DatasetConfig::Kind::drifted;
  CHECK_THROWS_AS(validate_manifest(p, "pretrain"), Error);
}

TEST_CASE("failed validation writes nothing") {
  TempDir dir("drtune_cli_nothing");
  ExperimentManifest m;
  m.dataset.kind = DatasetConfig::Kind::csv;
  m.dataset.classes = 3;
  m.dataset.train_csv = dir.str("missing.csv");
  m.dataset.test_csv = dir.str("missing.csv");
  m.out_dir = dir.str("out");
  CHECK_THROWS_AS(cli::cmd_pretrain(m), Error);
  CHECK_THROWS_AS(cli::cmd_finetune(m), Error);
  CHECK_FALSE(fs::exists(dir.path / "out"));
}

TEST_CASE("cmd_pretrain writes a loadable checkpoint and sidecar") {
  TempDir dir("drtune_cli_pretrain");
  ExperimentManifest m;
  m.dataset.kind = DatasetConfig::Kind::mixture;
  m.dataset.classes = 3;
  m.dataset.dim = 6;
  m.dataset.train_per_class = 32;
  m.model.hidden = {16};
  m.model.feature_dim = 8;
  m.train.method = Method::ce;
  m.train.epochs = 3;
  m.train.batch_size = 16;
  m.out_dir = dir.str("pre");

  const auto path = cli::cmd_pretrain(m, {"rev-test"});
  REQUIRE(fs::exists(path));
  const Checkpoint ckpt = load_checkpoint(path);
  REQUIRE(ckpt.encoder.has_value());
  CHECK(ckpt.encoder->input_dim() == 6);
  CHECK(ckpt.encoder->output_dim() == 8);
  CHECK_FALSE(ckpt.head.has_value());  // the pretraining head is discarded

  const std::string meta = read_file(dir.path / "pre" / "pretrain_meta.txt");
  CHECK(meta.find("seed = 0") != std::string::npos);
  CHECK(meta.find("dims = 6,16,8") != std::string::npos);
  CHECK(meta.find("revision = rev-test") != std::string::npos);

  // reissuing the command reproduces the checkpoint byte-identically
  ExperimentManifest m2 = m;
  m2.out_dir = dir.str("pre2");
  const auto path2 = cli::cmd_pretrain(m2, {"rev-test"});
  CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("cmd_finetune on the drifted benchmark is byte-reproducible") {
  TempDir dir("drtune_cli_finetune");
  const ExperimentManifest m = drifted_manifest(dir.str("run1"));
  const auto outcome = cli::cmd_finetune(m);
  CHECK(outcome.report.epochs.size() == 4);

  for (const char* name : {"metrics.csv", "summary.csv", "final.ckpt",
                           "bank_pretrained.csv", "bank_downstream.csv",
                           "transform.csv", "config_resolved.ini"})
    CHECK(fs::exists(dir.path / "run1" / name));

  ExperimentManifest m2 = m;
  m2.out_dir = dir.str("run2");
  cli::cmd_finetune(m2);

  for (const char* name : {"metrics.csv", "final.ckpt", "bank_pretrained.csv",
                           "bank_downstream.csv", "transform.csv"})
    CHECK(read_file(dir.path / "run1" / name) == read_file(dir.path / "run2" / name));
  CHECK(summary_without_wall(read_file(dir.path / "run1" / "summary.csv")) ==
        summary_without_wall(read_file(dir.path / "run2" / "summary.csv")));

  // the final checkpoint of a paired run is head-only and reloads
  const Checkpoint final_ckpt = load_checkpoint(dir.path / "run1" / "final.ckpt");
  CHECK_FALSE(final_ckpt.encoder.has_value());
  REQUIRE(final_ckpt.head.has_value());
  CHECK(final_ckpt.head->num_classes() == 4);

  // metrics stream has the documented fixed header
  const std::string metrics = read_file(dir.path / "run1" / "metrics.csv");
  CHECK(metrics.rfind("epoch,ce,dr,lambda,total,train_acc,test_acc,mmd_raw,"
                      "mmd_calibrated,rot_orth_err\n", 0) == 0);
}

TEST_CASE("cmd_finetune k-sweep emits one row per K") {
  TempDir dir("drtune_cli_sweep");
  ExperimentManifest m = drifted_manifest(dir.str("sweep"));
  m.train.epochs = 2;
  m.k_sweep = {32, 64, 96, 128};
  const auto outcome = cli::cmd_finetune(m);
  REQUIRE(outcome.sweep.size() == 4);

  const std::string csv = read_file(dir.path / "sweep" / "k_sweep.csv");
  const auto lines = split(trim(csv), '\n');
  REQUIRE(lines.size() == 5);  // header + 4 rows
  CHECK(lines[0] == "k,accuracy");
  CHECK(lines[1].rfind("32,", 0) == 0);
  CHECK(lines[4].rfind("128,", 0) == 0);
  for (const std::size_t k : m.k_sweep)
    CHECK(fs::exists(dir.path / "sweep" / ("k" + std::to_string(k)) / "metrics.csv"));
}

TEST_CASE("cmd_finetune end-to-end transfer pipeline via checkpoint file") {
  TempDir dir("drtune_cli_pipeline");
  ExperimentManifest pre;
  pre.dataset.kind = DatasetConfig::Kind::transfer;
  pre.dataset.transfer.source_per_class = 40;
  pre.dataset.transfer.target_train_per_class = 8;
  pre.dataset.transfer.target_test_per_class = 8;
  pre.model.hidden = {16};
  pre.model.feature_dim = 8;
  pre.train.method = Method::ce;
  pre.train.epochs = 3;
  pre.train.batch_size = 32;
  pre.out_dir = dir.str("pre");
  const auto ckpt = cli::cmd_pretrain(pre);

  ExperimentManifest ft = pre;
  ft.train.method = Method::drtune;
  ft.train.bank_size = 32;
  ft.train.batch_size = 16;
  ft.train.epochs = 2;
  ft.checkpoint = ckpt.string();
  ft.out_dir = dir.str("ft");
  const auto outcome = cli::cmd_finetune(ft);
  CHECK(outcome.report.epochs.size() == 2);

  const Checkpoint final_ckpt = load_checkpoint(dir.path / "ft" / "final.ckpt");
  CHECK(final_ckpt.encoder.has_value());
  CHECK(final_ckpt.head.has_value());
}

TEST_CASE("cmd_diagnose computes drift diagnostics and PCA projections") {
  TempDir dir("drtune_cli_diag");

  // a drifted snapshot pair written through the bank serializer
  DriftBenchParams params;
  params.classes = 4;
  params.dim = 8;
  params.train_per_class = 48;
  params.test_per_class = 8;
  const DriftBenchmark bench = make_drift_benchmark(params, 33);
  PairedBanks banks(bench.train.size());
  for (std::size_t i = 0; i < bench.train.size(); ++i)
    banks.enqueue_pair(bench.train.pretrained.row_vector(i),
                       bench.train.downstream.row_vector(i), bench.train.labels[i]);
  save_bank_csv(dir.str("bank_p.csv"), dir.str("bank_d.csv"), banks);

  cli::DiagnoseArgs args;
  args.bank_pretrained = dir.str("bank_p.csv");
  args.bank_downstream = dir.str("bank_d.csv");
  args.out_dir = dir.str("diag");
  cli::cmd_diagnose(args);

  const std::string diag = read_file(dir.path / "diag" / "diagnostics.csv");
  double mmd_raw = -1.0, mmd_cal = -1.0;
  for (const auto& line : split(trim(diag), '\n')) {
    const auto cells = split(line, ',');
    if (cells[0] == "mmd_raw") mmd_raw = parse_double(cells[1], "diag");
    if (cells[0] == "mmd_calibrated") mmd_cal = parse_double(cells[1], "diag");
  }
  CHECK(mmd_raw > 0.0);
  CHECK(mmd_cal < mmd_raw);

  // PCA projection files: exactly 2 coordinate columns + label column
  for (const char* name : {"pca_pretrained.csv", "pca_downstream.csv",
                           "pca_calibrated.csv"}) {
    const std::string pca = read_file(dir.path / "diag" / name);
    const auto lines = split(trim(pca), '\n');
    CHECK(lines[0] == "pc1,pc2,label");
    REQUIRE(lines.size() == banks.size() + 1);
    for (std::size_t i = 1; i < lines.size(); ++i)
      CHECK(split(lines[i], ',').size() == 3);
  }

  // identical snapshots: mmd 0, zero center distances
  save_bank_csv(dir.str("same_p.csv"), dir.str("same_d.csv"), banks);
  cli::DiagnoseArgs same;
  same.bank_pretrained = dir.str("same_p.csv");
  same.bank_downstream = dir.str("same_p.csv");
  same.out_dir = dir.str("diag_same");
  cli::cmd_diagnose(same);
  const std::string diag2 = read_file(dir.path / "diag_same" / "diagnostics.csv");
  for (const auto& line : split(trim(diag2), '\n')) {
    const auto cells = split(line, ',');
    if (cells[0] == "mmd_raw" || cells[0] == "mean_center_dist")
      CHECK(std::abs(parse_double(cells[1], "diag2")) < 1e-9);
  }

  // run-dir form resolves the standard snapshot names
  cli::DiagnoseArgs bad;
  bad.run_dir = dir.str("missing_run");
  bad.out_dir = dir.str("d2");
  CHECK_THROWS_AS(cli::cmd_diagnose(bad), Error);
}

TEST_CASE("worker_limit respects DRIFT_TUNE_THREADS") {
  ::setenv("DRIFT_TUNE_THREADS", "2", 1);
  CHECK(cli::worker_limit(8) == 2);
  CHECK(cli::worker_limit(1) == 1);
  ::setenv("DRIFT_TUNE_THREADS", "frog", 1);
  CHECK_THROWS_AS(cli::worker_limit(8), Error);
  ::unsetenv("DRIFT_TUNE_THREADS");
  CHECK(cli::worker_limit(3) >= 1);
}
