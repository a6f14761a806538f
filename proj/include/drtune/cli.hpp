#pragma once

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "drtune/calibration.hpp"
#include "drtune/config.hpp"
#include "drtune/data.hpp"
#include "drtune/error.hpp"
#include "drtune/feature_bank.hpp"
#include "drtune/io.hpp"
#include "drtune/model.hpp"
#include "drtune/trainer.hpp"

namespace drtune::cli {

struct RunContext {
  std::string build_revision = "unknown";
};

/// Worker cap for sweep fan-out; DRIFT_TUNE_THREADS overrides, floor 1.
inline std::size_t worker_limit(std::size_t jobs) {
  std::size_t cap = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DRIFT_TUNE_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) cap = static_cast<std::size_t>(v);
    } catch (...) {
      throw Error(ErrorKind::config,
                  std::string("DRIFT_TUNE_THREADS is not an integer: ") + env);
    }
  }
  return std::min(cap, std::max<std::size_t>(1, jobs));
}

namespace detail {

inline std::filesystem::path out_path(const ExperimentManifest& m,
                                      const std::string& name) {
  return std::filesystem::path(m.out_dir) / name;
}

inline void write_resolved(const ExperimentManifest& m) {
  std::ofstream out = open_output(out_path(m, "config_resolved.ini"));
  write_resolved_manifest(out, m);
}

inline DatasetSplit pretrain_dataset(const ExperimentManifest& m) {
  switch (m.dataset.kind) {
    case DatasetConfig::Kind::transfer:
      return make_transfer_benchmark(m.dataset.transfer, m.dataset.data_seed).source;
    case DatasetConfig::Kind::mixture:
      return make_gaussian_mixture(m.dataset.classes, m.dataset.dim,
                                   m.dataset.train_per_class, m.dataset.separation,
                                   m.dataset.data_seed);
    case DatasetConfig::Kind::csv:
      return load_csv_dataset(m.dataset.train_csv,
                              {m.dataset.classes, m.dataset.has_header});
    default:
      throw Error(ErrorKind::config, "pretrain: unsupported dataset kind");
  }
}

struct SplitPair {
  DatasetSplit train;
  DatasetSplit test;
};

inline SplitPair finetune_datasets(const ExperimentManifest& m) {
  switch (m.dataset.kind) {
    case DatasetConfig::Kind::transfer: {
      TransferBenchmark bench = make_transfer_benchmark(m.dataset.transfer,
                                                        m.dataset.data_seed);
      return {std::move(bench.target_train), std::move(bench.target_test)};
    }
    case DatasetConfig::Kind::mixture: {
      const DatasetSplit all = make_gaussian_mixture(
          m.dataset.classes, m.dataset.dim,
          m.dataset.train_per_class + m.dataset.test_per_class, m.dataset.separation,
          m.dataset.data_seed);
      auto [train, test] = split_train_test(all, m.dataset.train_per_class);
      return {std::move(train), std::move(test)};
    }
    case DatasetConfig::Kind::csv:
      return {load_csv_dataset(m.dataset.train_csv,
                               {m.dataset.classes, m.dataset.has_header}),
              load_csv_dataset(m.dataset.test_csv,
                               {m.dataset.classes, m.dataset.has_header})};
    default:
      throw Error(ErrorKind::config, "finetune: unsupported dataset kind");
  }
}

inline void write_summary(const ExperimentManifest& m, const RunReport& report,
                          const EpochMetrics& last) {
  std::ofstream out = open_output(out_path(m, "summary.csv"));
  // wall_seconds is deliberately the final column: everything before it is
  // byte-reproducible for a fixed manifest and seed.
  out << "best_test_acc,final_test_acc,mean_center_dist,rot_recovery_err,"
         "delta_recovery_err,wall_seconds\n";
  out << format_double(report.best_test_acc) << ','
      << format_double(report.final_test_acc) << ','
      << format_double(last.mean_center_dist) << ',';
  if (last.rot_recovery_err) out << format_double(*last.rot_recovery_err);
  out << ',';
  if (last.delta_recovery_err) out << format_double(*last.delta_recovery_err);
  out << ',' << format_double(report.wall_seconds) << '\n';
}

inline void write_run_outputs(const ExperimentManifest& m, const FinetuneResult& result) {
  {
    std::ofstream out = open_output(out_path(m, "metrics.csv"));
    write_metrics_csv(out, result.report);
  }
  write_summary(m, result.report, result.report.epochs.back());
  const MlpEncoder* enc = result.encoder ? &*result.encoder : nullptr;
  save_checkpoint(out_path(m, "final.ckpt"), enc, &result.head);
  if (result.banks) {
    save_bank_csv(out_path(m, "bank_pretrained.csv").string(),
                  out_path(m, "bank_downstream.csv").string(), *result.banks);
  }
  if (result.final_transform)
    save_transform_csv(out_path(m, "transform.csv").string(), *result.final_transform);
}

inline FinetuneResult run_single(const ExperimentManifest& m) {
  write_resolved(m);
  FinetuneResult result;
  if (m.dataset.kind == DatasetConfig::Kind::drifted) {
    const DriftBenchmark bench = make_drift_benchmark(m.dataset.drift,
                                                      m.dataset.data_seed);
    result = finetune_paired(m.train, bench.train, bench.test, &bench.spec);
  } else {
    const Checkpoint ckpt = load_checkpoint(m.checkpoint);
    require(ckpt.encoder.has_value(), ErrorKind::config,
            "finetune: checkpoint has no encoder: " + m.checkpoint);
    const SplitPair data = finetune_datasets(m);
    result = finetune(m.train, *ckpt.encoder, data.train, &data.test);
  }
  write_run_outputs(m, result);
  return result;
}

// 2-D PCA over the pooled rows: returns (column basis d x 2, column means).
inline std::pair<Matrix, Vector> pca_basis_2d(const Matrix& pooled) {
  require(pooled.rows() >= 2 && pooled.cols() >= 2, ErrorKind::invalid_argument,
          "pca: need at least 2 samples and 2 dims");
  const std::size_t d = pooled.cols();
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < pooled.rows(); ++i) {
    const auto row = pooled.row(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  }
  for (auto& x : mean) x /= static_cast<double>(pooled.rows());
  Matrix centered = pooled;
  for (std::size_t i = 0; i < centered.rows(); ++i) {
    auto row = centered.row(i);
    for (std::size_t j = 0; j < d; ++j) row[j] -= mean[j];
  }
  const SvdResult f = svd(centered);
  Matrix basis(d, 2);
  for (std::size_t j = 0; j < d; ++j) {
    basis(j, 0) = f.vt(0, j);
    basis(j, 1) = f.vt(1, j);
  }
  return {std::move(basis), std::move(mean)};
}

inline void write_pca_csv(const std::filesystem::path& path, const Matrix& data,
                          const std::vector<int>& labels, const Matrix& basis,
                          const Vector& mean) {
  std::ofstream out = open_output(path);
  out << "pc1,pc2,label\n";
  for (std::size_t i = 0; i < data.rows(); ++i) {
    const auto row = data.row(i);
    double p1 = 0.0, p2 = 0.0;
    for (std::size_t j = 0; j < data.cols(); ++j) {
      const double centered = row[j] - mean[j];
      p1 += centered * basis(j, 0);
      p2 += centered * basis(j, 1);
    }
    out << format_double(p1) << ',' << format_double(p2) << ',' << labels[i] << '\n';
  }
}

}  // namespace detail

/// Pretrains an encoder on the manifest's source dataset; writes
/// encoder.ckpt plus a metadata sidecar into the output directory.
inline std::filesystem::path cmd_pretrain(const ExperimentManifest& manifest,
                                          const RunContext& ctx = {}) {
  validate_manifest(manifest, "pretrain");
  const DatasetSplit source = detail::pretrain_dataset(manifest);
  const auto dims = manifest.model.encoder_dims(source.dim());
  const MlpEncoder encoder =
      pretrain_source(manifest.train, dims, manifest.model.activation, source);

  detail::write_resolved(manifest);
  const auto ckpt_path = detail::out_path(manifest, "encoder.ckpt");
  save_checkpoint(ckpt_path, encoder);
  {
    std::ofstream meta = open_output(detail::out_path(manifest, "pretrain_meta.txt"));
    meta << "seed = " << manifest.train.seed << '\n';
    meta << "dims = ";
    for (std::size_t i = 0; i < dims.size(); ++i) meta << (i ? "," : "") << dims[i];
    meta << '\n';
    meta << "activation = " << activation_name(manifest.model.activation) << '\n';
    meta << "dataset = " << dataset_kind_name(manifest.dataset.kind) << '\n';
    meta << "data_seed = " << manifest.dataset.data_seed << '\n';
    meta << "revision = " << ctx.build_revision << '\n';
  }
  return ckpt_path;
}

struct FinetuneOutcome {
  RunReport report;                  // single-run mode
  std::vector<KSweepRow> sweep;      // k-sweep mode
};

/// Fine-tunes per the manifest. With a non-empty k_sweep list, fans out one
/// run per K (bounded by DRIFT_TUNE_THREADS) into k<K>/ subdirectories and
/// writes an aggregate k_sweep.csv.
inline FinetuneOutcome cmd_finetune(const ExperimentManifest& manifest,
                                    const RunContext& = {}) {
  validate_manifest(manifest, "finetune");
  FinetuneOutcome outcome;
  if (manifest.k_sweep.empty()) {
    outcome.report = detail::run_single(manifest).report;
    return outcome;
  }

  detail::write_resolved(manifest);
  const std::size_t jobs = manifest.k_sweep.size();
  std::vector<KSweepRow> rows(jobs);
  std::vector<std::string> failures(jobs);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs) return;
      const std::size_t k = manifest.k_sweep[i];
      ExperimentManifest sub = manifest;
      sub.k_sweep.clear();
      sub.train.bank_size = k;
      sub.train.fixed_head_lr = true;  // the sweep pins the lr
      sub.out_dir = (std::filesystem::path(manifest.out_dir) /
                     ("k" + std::to_string(k)))
                        .string();
      try {
        rows[i] = {k, detail::run_single(sub).report.final_test_acc};
      } catch (const std::exception& e) {
        failures[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < worker_limit(jobs); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  for (const auto& f : failures)
    require(f.empty(), ErrorKind::non_convergence, "k-sweep worker failed: " + f);

  std::ofstream out = open_output(detail::out_path(manifest, "k_sweep.csv"));
  out << "k,accuracy\n";
  for (const auto& row : rows)
    out << row.k << ',' << format_double(row.accuracy) << '\n';
  outcome.sweep = rows;
  return outcome;
}

struct DiagnoseArgs {
  std::string bank_pretrained;
  std::string bank_downstream;
  std::string run_dir;  // alternative to explicit bank paths
  std::string out_dir;
};

/// Computes drift diagnostics from a pair of bank snapshots: raw/calibrated
/// MMD, per-class center distances, the estimated transform, and plot-ready
/// 2-D PCA projections of both feature sets (plus the calibrated one).
inline void cmd_diagnose(const DiagnoseArgs& args) {
  std::string path_p = args.bank_pretrained;
  std::string path_d = args.bank_downstream;
  if (!args.run_dir.empty()) {
    path_p = (std::filesystem::path(args.run_dir) / "bank_pretrained.csv").string();
    path_d = (std::filesystem::path(args.run_dir) / "bank_downstream.csv").string();
  }
  require(!path_p.empty() && !path_d.empty(), ErrorKind::config,
          "diagnose: need bank snapshot paths or a run directory");
  require(!args.out_dir.empty(), ErrorKind::config, "diagnose: need an output directory");

  const DatasetSplit side_p = load_features_csv(path_p);
  const DatasetSplit side_d = load_features_csv(path_d);
  require(side_p.size() == side_d.size(), ErrorKind::parse,
          "diagnose: snapshots hold different numbers of entries");
  require(side_p.dim() == side_d.dim(), ErrorKind::parse,
          "diagnose: snapshots have different feature dims");
  require(side_p.labels == side_d.labels, ErrorKind::parse,
          "diagnose: snapshot labels are not index-aligned");

  PairedBanks banks(side_p.size());
  for (std::size_t i = 0; i < side_p.size(); ++i)
    banks.enqueue_pair(side_p.inputs.row_vector(i), side_d.inputs.row_vector(i),
                       side_p.labels[i]);

  const int num_classes = std::max(side_p.num_classes, side_d.num_classes);
  // No head is available from snapshots, so centers use plain means (CGA off).
  const LinearHead flat_head(static_cast<std::size_t>(num_classes), banks.dim());
  const CalibrationTransform transform =
      build_transform(banks, flat_head, CalibrationSwitches{true, true, false});

  const Matrix vp = banks.pretrained_matrix();
  const Matrix vd = banks.downstream_matrix();
  const Matrix calibrated = calibrate_bank(transform, banks);

  const auto out_dir = std::filesystem::path(args.out_dir);
  {
    std::ofstream out = open_output(out_dir / "diagnostics.csv");
    out << "metric,value\n";
    out << "mmd_raw," << format_double(mmd(vp, vd)) << '\n';
    out << "mmd_calibrated," << format_double(mmd(calibrated, vd)) << '\n';
    out << "rot_orth_err," << format_double(orthogonality_error(transform.rotation))
        << '\n';
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < transform.num_classes(); ++c) {
      if (!transform.class_present[c]) continue;
      const double dist = norm(transform.translations[c]);
      out << "center_dist_" << c << ',' << format_double(dist) << '\n';
      sum += dist;
      ++n;
    }
    out << "mean_center_dist," << format_double(n ? sum / static_cast<double>(n) : 0.0)
        << '\n';
  }
  save_transform_csv((out_dir / "transform.csv").string(), transform);

  Matrix pooled(vp.rows() + vd.rows(), vp.cols());
  for (std::size_t i = 0; i < vp.rows(); ++i)
    std::copy(vp.row(i).begin(), vp.row(i).end(), pooled.row(i).begin());
  for (std::size_t i = 0; i < vd.rows(); ++i)
    std::copy(vd.row(i).begin(), vd.row(i).end(), pooled.row(vp.rows() + i).begin());
  const auto [basis, mean] = detail::pca_basis_2d(pooled);
  detail::write_pca_csv(out_dir / "pca_pretrained.csv", vp, side_p.labels, basis, mean);
  detail::write_pca_csv(out_dir / "pca_downstream.csv", vd, side_d.labels, basis, mean);
  detail::write_pca_csv(out_dir / "pca_calibrated.csv", calibrated, side_p.labels,
                        basis, mean);
}

}  // namespace drtune::cli
