#include <catch2/catch_amalgamated.hpp>

#include <random>
#include <sstream>

#include "drtune/data.hpp"
#include "drtune/trainer.hpp"

using namespace drtune;

namespace {

std::string metrics_string(const RunReport& report) {
  std::ostringstream ss;
  write_metrics_csv(ss, report);
  return ss.str();
}

TrainConfig small_drift_config() {
  TrainConfig c;
  c.method = Method::drtune;
  c.bank_size = 128;
  c.batch_size = 32;
  c.epochs = 6;
  c.lr_encoder = 0.01;
  c.seed = 7;
  return c;
}

DriftBenchParams small_drift_params() {
  DriftBenchParams p;
  p.classes = 4;
  p.dim = 8;
  p.train_per_class = 32;  // 128 = bank size
  p.test_per_class = 64;
  p.noise_sigma = 0.0;
  return p;
}

}  // namespace

TEST_CASE("config lambda and head-lr rules") {
  TrainConfig c;
  c.method = Method::drtune;
  c.bank_size = 2048;
  c.batch_size = 64;
  c.lr_encoder = 0.01;
  CHECK(c.lambda() == 32.0);
  CHECK(std::abs(c.lr_head() - 0.33) < 1e-12);

  c.bank_size = 768;
  CHECK(c.lambda() == 12.0);
  CHECK(std::abs(c.lr_head() - 0.13) < 1e-12);

  c.bank_size = 64;
  c.batch_size = 64;
  CHECK(c.lambda() == 1.0);  // K = B

  c.method = Method::ce;
  CHECK(c.lambda() == 0.0);
  CHECK(c.lr_head() == c.lr_encoder);

  c.method = Method::drtune;
  c.fixed_head_lr = true;
  CHECK(c.lr_head() == c.lr_encoder);

  c.fixed_head_lr = false;
  c.lambda_override = 0.0;
  CHECK(c.lambda() == 0.0);
  CHECK(c.lr_head() == c.lr_encoder);
}

TEST_CASE("config validation") {
  TrainConfig c;
  c.bank_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.momentum = 1.0;
  CHECK_THROWS_AS(c.validate(), Error);
  c = TrainConfig{};
  c.switches = CalibrationSwitches{false, false, true};
  CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("scheduled_lr endpoints") {
  CHECK(scheduled_lr(LrSchedule::cosine, 0.1, 0, 100) == 0.1);
  CHECK(scheduled_lr(LrSchedule::linear, 0.1, 0, 100) == 0.1);
  CHECK(scheduled_lr(LrSchedule::cosine, 0.1, 50, 100) == Catch::Approx(0.05));
  CHECK(scheduled_lr(LrSchedule::linear, 0.1, 50, 100) == Catch::Approx(0.05));
  CHECK(scheduled_lr(LrSchedule::cosine, 0.1, 99, 100) > 0.0);
}

TEST_CASE("evaluate basics") {
  // a head that points exactly at the true one-hot direction
  LinearHead head(3, 3);
  head.prototypes() = Matrix::identity(3);
  Matrix feats(3, 3);
  feats(0, 0) = 1;
  feats(1, 1) = 1;
  feats(2, 2) = 1;
  CHECK(evaluate_features(head, feats, {0, 1, 2}) == 1.0);

  // scaling every prototype leaves argmax unchanged
  LinearHead scaled_head = head;
  for (auto& x : scaled_head.prototypes().data()) x *= 3.0;
  CHECK(evaluate_features(scaled_head, feats, {0, 1, 2}) == 1.0);

  CHECK_THROWS_AS(evaluate_features(head, Matrix(0, 3), {}), Error);
}

TEST_CASE("random head on balanced random data sits at chance") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix feats(1000, 4);
  for (auto& x : feats.data()) x = gauss(rng);
  std::vector<int> ys(1000);
  for (std::size_t i = 0; i < ys.size(); ++i) ys[i] = static_cast<int>(i % 2);
  const LinearHead head = LinearHead::random_init(2, 4, rng);
  const double acc = evaluate_features(head, feats, ys);
  CHECK(acc > 0.45);
  CHECK(acc < 0.55);
}

TEST_CASE("finetune_paired is deterministic per seed") {
  const DriftBenchmark bench = make_drift_benchmark(small_drift_params(), 5);
  const TrainConfig config = small_drift_config();
  const auto a = finetune_paired(config, bench.train, bench.test, &bench.spec);
  const auto b = finetune_paired(config, bench.train, bench.test, &bench.spec);
  CHECK(metrics_string(a.report) == metrics_string(b.report));
  CHECK(a.head.prototypes().data() == b.head.prototypes().data());

  TrainConfig other = config;
  other.seed = 8;
  const auto c = finetune_paired(other, bench.train, bench.test, &bench.spec);
  CHECK(metrics_string(a.report) != metrics_string(c.report));
}

TEST_CASE("finetune (mlp mode) is deterministic per seed") {
  TransferParams tp;
  tp.source_per_class = 40;
  tp.target_train_per_class = 8;
  tp.target_test_per_class = 16;
  const TransferBenchmark bench = make_transfer_benchmark(tp, 2);

  std::mt19937_64 rng(11);
  const MlpEncoder enc({tp.input_dim, 16, 8}, Activation::relu, rng);
  TrainConfig config;
  config.method = Method::drtune;
  config.bank_size = 32;
  config.batch_size = 16;
  config.epochs = 4;
  config.seed = 3;
  const auto a = finetune(config, enc, bench.target_train, &bench.target_test);
  const auto b = finetune(config, enc, bench.target_train, &bench.target_test);
  CHECK(metrics_string(a.report) == metrics_string(b.report));
  REQUIRE(a.encoder.has_value());
  for (std::size_t l = 0; l < a.encoder->layers().size(); ++l)
    CHECK(a.encoder->layers()[l].weight.data() == b.encoder->layers()[l].weight.data());
}

TEST_CASE("drtune with lambda 0 and switches off reproduces ce bit-exactly") {
  TransferParams tp;
  tp.source_per_class = 40;
  tp.target_train_per_class = 8;
  tp.target_test_per_class = 16;
  const TransferBenchmark bench = make_transfer_benchmark(tp, 4);
  std::mt19937_64 rng(13);
  const MlpEncoder enc({tp.input_dim, 16, 8}, Activation::relu, rng);

  TrainConfig ce;
  ce.method = Method::ce;
  ce.bank_size = 32;
  ce.batch_size = 16;
  ce.epochs = 5;
  ce.seed = 17;

  TrainConfig dr = ce;
  dr.method = Method::drtune;
  dr.lambda_override = 0.0;  // lr_head derives to (1+0)*lr, matching ce

  const auto ce_run = finetune(ce, enc, bench.target_train, &bench.target_test);
  const auto dr_run = finetune(dr, enc, bench.target_train, &bench.target_test);

  REQUIRE(ce_run.report.epochs.size() == dr_run.report.epochs.size());
  for (std::size_t e = 0; e < ce_run.report.epochs.size(); ++e) {
    const auto& mc = ce_run.report.epochs[e];
    const auto& md = dr_run.report.epochs[e];
    CHECK(mc.ce == md.ce);
    CHECK(mc.total == md.total);
    CHECK(mc.train_acc == md.train_acc);
    CHECK(mc.test_acc == md.test_acc);
  }
  CHECK(ce_run.head.prototypes().data() == dr_run.head.prototypes().data());
  for (std::size_t l = 0; l < ce_run.encoder->layers().size(); ++l)
    CHECK(ce_run.encoder->layers()[l].weight.data() ==
          dr_run.encoder->layers()[l].weight.data());
}

TEST_CASE("isolation mode recovers the drift and reduces MMD") {
  const DriftBenchParams params = small_drift_params();
  const DriftBenchmark bench = make_drift_benchmark(params, 21);
  TrainConfig config = small_drift_config();
  config.switches = CalibrationSwitches::from_tag("clt");
  config.switches.use_global_rotation = true;  // GR + CLT, no CGA

  const auto run = finetune_paired(config, bench.train, bench.test, &bench.spec);
  REQUIRE(run.banks.has_value());
  run.banks->check_invariants();
  CHECK(run.banks->size() == config.bank_size);

  // after full bank turnover the transform matches the generator
  const auto& last = run.report.epochs.back();
  REQUIRE(last.rot_recovery_err.has_value());
  CHECK(*last.rot_recovery_err < 0.1);
  CHECK(*last.delta_recovery_err < 0.1);

  for (const auto& m : run.report.epochs) {
    CHECK(m.mmd_calibrated <= m.mmd_raw);
    CHECK(m.rot_orth_err < 1e-6);
  }
  CHECK(last.mmd_calibrated <= last.mmd_raw / 10.0);

  // report shape invariants
  CHECK(run.report.epochs.size() == config.epochs);
  for (const auto& m : run.report.epochs) {
    CHECK(m.train_acc >= 0.0);
    CHECK(m.train_acc <= 1.0);
    CHECK(m.test_acc >= 0.0);
    CHECK(m.test_acc <= 1.0);
    CHECK(std::abs(m.total - (m.ce + m.lambda * m.dr)) < 1e-12);
  }
}

TEST_CASE("paired mode rejects l2sp and oversized batches") {
  const DriftBenchmark bench = make_drift_benchmark(small_drift_params(), 23);
  TrainConfig config = small_drift_config();
  config.method = Method::l2sp;
  CHECK_THROWS_AS(finetune_paired(config, bench.train, bench.test, nullptr), Error);

  config = small_drift_config();
  config.batch_size = 100000;
  CHECK_THROWS_AS(finetune_paired(config, bench.train, bench.test, nullptr), Error);
}

TEST_CASE("finetune validates dims before training") {
  TransferParams tp;
  tp.source_per_class = 20;
  tp.target_train_per_class = 8;
  tp.target_test_per_class = 8;
  const TransferBenchmark bench = make_transfer_benchmark(tp, 6);
  std::mt19937_64 rng(29);
  const MlpEncoder wrong_dim({tp.input_dim + 1, 8, 4}, Activation::relu, rng);
  TrainConfig config;
  config.batch_size = 8;
  config.epochs = 1;
  CHECK_THROWS_AS(finetune(config, wrong_dim, bench.target_train, &bench.target_test),
                  Error);
}

TEST_CASE("freeze_encoder leaves the encoder bit-identical to the checkpoint") {
  TransferParams tp;
  tp.source_per_class = 40;
  tp.target_train_per_class = 8;
  tp.target_test_per_class = 8;
  const TransferBenchmark bench = make_transfer_benchmark(tp, 12);
  std::mt19937_64 rng(41);
  const MlpEncoder enc({tp.input_dim, 16, 8}, Activation::relu, rng);
  TrainConfig config;
  config.method = Method::drtune;
  config.bank_size = 32;
  config.batch_size = 16;
  config.epochs = 3;
  config.freeze_encoder = true;
  const auto run = finetune(config, enc, bench.target_train, &bench.target_test);
  REQUIRE(run.encoder.has_value());
  for (std::size_t l = 0; l < enc.layers().size(); ++l) {
    CHECK(run.encoder->layers()[l].weight.data() == enc.layers()[l].weight.data());
    CHECK(run.encoder->layers()[l].bias == enc.layers()[l].bias);
  }
}

TEST_CASE("l2sp stays closer to the pretrained weights than ce") {
  TransferParams tp;
  tp.source_per_class = 60;
  tp.target_train_per_class = 8;
  tp.target_test_per_class = 16;
  const TransferBenchmark bench = make_transfer_benchmark(tp, 8);
  std::mt19937_64 rng(31);
  const MlpEncoder enc({tp.input_dim, 16, 8}, Activation::relu, rng);

  TrainConfig ce;
  ce.method = Method::ce;
  ce.batch_size = 16;
  ce.epochs = 20;
  ce.lr_encoder = 0.05;
  ce.seed = 5;
  TrainConfig l2 = ce;
  l2.method = Method::l2sp;
  l2.l2sp_beta = 1.0;

  const auto ce_run = finetune(ce, enc, bench.target_train, &bench.target_test);
  const auto l2_run = finetune(l2, enc, bench.target_train, &bench.target_test);

  auto dist_to_ref = [&](const MlpEncoder& m) {
    double s = 0.0;
    for (std::size_t l = 0; l < m.layers().size(); ++l)
      s += squared_distance(m.layers()[l].weight.data(), enc.layers()[l].weight.data());
    return s;
  };
  CHECK(dist_to_ref(*l2_run.encoder) < dist_to_ref(*ce_run.encoder));
}

TEST_CASE("pretrain_source is deterministic and transfer beats scratch") {
  TransferParams tp;
  tp.source_per_class = 300;
  double sum_transfer = 0.0, sum_scratch = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const TransferBenchmark bench = make_transfer_benchmark(tp, seed);
    TrainConfig pre;
    pre.method = Method::ce;
    pre.epochs = 30;
    pre.batch_size = 64;
    pre.lr_encoder = 0.05;
    pre.seed = seed;
    const std::vector<std::size_t> dims = {tp.input_dim, 64, 64, 16};
    const MlpEncoder enc_p = pretrain_source(pre, dims, Activation::relu, bench.source);

    if (seed == 1) {
      const MlpEncoder again = pretrain_source(pre, dims, Activation::relu, bench.source);
      for (std::size_t l = 0; l < enc_p.layers().size(); ++l)
        CHECK(enc_p.layers()[l].weight.data() == again.layers()[l].weight.data());
    }

    TrainConfig ft;
    ft.method = Method::ce;
    ft.batch_size = 32;
    ft.epochs = 12;
    ft.lr_encoder = 0.01;
    ft.seed = seed + 100;
    const auto transfer = finetune(ft, enc_p, bench.target_train, &bench.target_test);

    std::mt19937_64 rng(mix_seed(seed, 77));
    const MlpEncoder scratch(dims, Activation::relu, rng);
    const auto cold = finetune(ft, scratch, bench.target_train, &bench.target_test);

    sum_transfer += transfer.report.final_test_acc;
    sum_scratch += cold.report.final_test_acc;
  }
  CHECK(sum_transfer / 5.0 > sum_scratch / 5.0);
}

TEST_CASE("ablation_grid emits one report per switch row") {
  const DriftBenchmark bench = make_drift_benchmark(small_drift_params(), 41);
  TrainConfig config = small_drift_config();
  config.epochs = 2;
  const auto rows = ablation_grid_paired(config, bench.train, bench.test);
  REQUIRE(rows.size() == 5);
  CHECK(rows[0].tag == "none");
  CHECK(rows[1].tag == "gr");
  CHECK(rows[2].tag == "clt");
  CHECK(rows[3].tag == "clt+cga");
  CHECK(rows[4].tag == "full");
  for (const auto& row : rows) CHECK(row.report.epochs.size() == config.epochs);
  // the no-SC row never rotates: its logged orthogonality error is exactly 0
  for (const auto& m : rows[0].report.epochs) CHECK(m.rot_orth_err == 0.0);
}

TEST_CASE("k_sweep emits one row per K and honors the fixed-lr mode") {
  const DriftBenchParams params = small_drift_params();
  TransferParams tp;
  tp.source_per_class = 40;
  tp.target_train_per_class = 8;
  tp.target_test_per_class = 8;
  const TransferBenchmark bench = make_transfer_benchmark(tp, 10);
  std::mt19937_64 rng(37);
  const MlpEncoder enc({tp.input_dim, 16, 8}, Activation::relu, rng);

  TrainConfig base;
  base.method = Method::drtune;
  base.batch_size = 16;
  base.epochs = 2;
  base.lr_encoder = 0.01;
  const std::vector<std::size_t> ks = {16, 16, 64};
  const auto rows = k_sweep(base, ks, enc, bench.target_train, bench.target_test);
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].k == 16);
  CHECK(rows[2].k == 64);
  CHECK(rows[0].accuracy == rows[1].accuracy);  // duplicated K, same seed
  (void)params;
}
