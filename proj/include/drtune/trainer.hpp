#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "drtune/calibration.hpp"
#include "drtune/data.hpp"
#include "drtune/error.hpp"
#include "drtune/feature_bank.hpp"
#include "drtune/io.hpp"
#include "drtune/linalg.hpp"
#include "drtune/losses.hpp"
#include "drtune/model.hpp"

namespace drtune {

enum class Method { ce, l2sp, drtune };

inline Method method_from_name(const std::string& name) {
  if (name == "ce") return Method::ce;
  if (name == "l2sp") return Method::l2sp;
  if (name == "drtune") return Method::drtune;
  throw Error(ErrorKind::config, "unknown method '" + name + "' (expected ce|l2sp|drtune)");
}

inline std::string method_name(Method m) {
  switch (m) {
    case Method::ce: return "ce";
    case Method::l2sp: return "l2sp";
    default: return "drtune";
  }
}

enum class LrSchedule { cosine, linear };

inline LrSchedule schedule_from_name(const std::string& name) {
  if (name == "cosine") return LrSchedule::cosine;
  if (name == "linear") return LrSchedule::linear;
  throw Error(ErrorKind::config, "unknown schedule '" + name + "' (expected cosine|linear)");
}

inline std::string schedule_name(LrSchedule s) {
  return s == LrSchedule::cosine ? "cosine" : "linear";
}

/// lr at step t of total T steps, t in [0, T).
inline double scheduled_lr(LrSchedule schedule, double lr0, std::size_t step,
                           std::size_t total_steps) {
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  if (schedule == LrSchedule::cosine)
    return lr0 * 0.5 * (1.0 + std::cos(M_PI * frac));
  return lr0 * (1.0 - frac);
}

struct TrainConfig {
  Method method = Method::drtune;
  std::size_t bank_size = 512;  // K
  std::size_t batch_size = 64;  // B
  std::size_t epochs = 20;
  double lr_encoder = 0.01;
  LrSchedule schedule = LrSchedule::cosine;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  CalibrationSwitches switches;
  double l2sp_beta = 0.01;        // only read when method == l2sp
  bool freeze_encoder = false;
  double lambda_override = -1.0;  // diagnostic; < 0 means "derive K/B"
  bool fixed_head_lr = false;     // K-sweep mode: lr_head pinned to lr_encoder

  /// DR weight: K/B for drtune (or the diagnostic override), 0 otherwise.
  double lambda() const {
    if (method != Method::drtune) return 0.0;
    if (lambda_override >= 0.0) return lambda_override;
    return static_cast<double>(bank_size) / static_cast<double>(batch_size);
  }

  /// Head learning rate rule: (1 + lambda) * lr_encoder, i.e. (1 + K/B) for
  /// drtune and plain lr_encoder for the baselines. Sweeps pin it instead.
  double lr_head() const {
    if (fixed_head_lr) return lr_encoder;
    return (1.0 + lambda()) * lr_encoder;
  }

  void validate() const {
    require(bank_size >= 1, ErrorKind::config, "config: bank size K must be >= 1");
    require(batch_size >= 1, ErrorKind::config, "config: batch size B must be >= 1");
    require(epochs >= 1, ErrorKind::config, "config: epochs must be >= 1");
    require(lr_encoder > 0.0, ErrorKind::config, "config: lr must be positive");
    require(weight_decay >= 0.0, ErrorKind::config, "config: negative weight decay");
    require(momentum >= 0.0 && momentum < 1.0, ErrorKind::config,
            "config: momentum must lie in [0, 1)");
    require(l2sp_beta >= 0.0, ErrorKind::config, "config: negative l2sp beta");
    switches.validate();
  }
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double ce = 0.0;
  double dr = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  double mmd_raw = 0.0;
  double mmd_calibrated = 0.0;
  double rot_orth_err = 0.0;
  // extras outside the fixed CSV header
  double mean_center_dist = 0.0;
  std::optional<double> rot_recovery_err;    // ||R - Q||_F when Q is known
  std::optional<double> delta_recovery_err;  // max_c ||delta_c - t_c||
};

struct RunReport {
  std::vector<EpochMetrics> epochs;
  double best_test_acc = 0.0;
  double final_test_acc = 0.0;
  double wall_seconds = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,ce,dr,lambda,total,train_acc,test_acc,mmd_raw,mmd_calibrated,rot_orth_err";

inline void write_metrics_csv(std::ostream& out, const RunReport& report) {
  out << kMetricsHeader << '\n';
  for (const auto& m : report.epochs) {
    out << m.epoch << ',' << format_double(m.ce) << ',' << format_double(m.dr) << ','
        << format_double(m.lambda) << ',' << format_double(m.total) << ','
        << format_double(m.train_acc) << ',' << format_double(m.test_acc) << ','
        << format_double(m.mmd_raw) << ',' << format_double(m.mmd_calibrated) << ','
        << format_double(m.rot_orth_err) << '\n';
  }
}

inline double evaluate_features(const LinearHead& head, const Matrix& features,
                                const std::vector<int>& labels) {
  require(features.rows() >= 1, ErrorKind::invalid_argument, "evaluate: empty split");
  require(labels.size() == features.rows(), ErrorKind::dimension_mismatch,
          "evaluate: label count mismatch");
  const Matrix logits = head.logits_batch(features);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto row = logits.row(i);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c)
      if (row[c] > row[best]) best = c;
    if (static_cast<int>(best) == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

/// Top-1 accuracy of argmax_c phi_c . f(x) over a split.
inline double evaluate(const MlpEncoder& encoder, const LinearHead& head,
                       const DatasetSplit& split) {
  split.validate();
  return evaluate_features(head, encoder.encode_batch(split.inputs), split.labels);
}

struct FinetuneResult {
  std::optional<MlpEncoder> encoder;  // absent in paired-feature mode
  LinearHead head;
  RunReport report;
  std::optional<PairedBanks> banks;
  std::optional<CalibrationTransform> final_transform;
};

namespace detail {

inline void add_scaled(Matrix& dst, const Matrix& src, double s) {
  require(dst.same_shape(src), ErrorKind::dimension_mismatch, "add_scaled: shape mismatch");
  for (std::size_t i = 0; i < dst.data().size(); ++i) dst.data()[i] += s * src.data()[i];
}

// Epoch-end calibration diagnostics from the current bank snapshot.
inline void bank_diagnostics(const PairedBanks& banks, const LinearHead& head,
                             const CalibrationSwitches& switches,
                             const DriftSpec* ground_truth, EpochMetrics& m) {
  const CalibrationTransform t = build_transform(banks, head, switches);
  const Matrix vd = banks.downstream_matrix();
  m.mmd_raw = mmd(banks.pretrained_matrix(), vd);
  m.mmd_calibrated = mmd(calibrate_bank(t, banks), vd);
  m.rot_orth_err = orthogonality_error(t.rotation);
  double dist_sum = 0.0;
  std::size_t dist_n = 0;
  for (std::size_t c = 0; c < t.num_classes(); ++c) {
    if (!t.class_present[c]) continue;
    dist_sum += norm(t.translations[c]);
    ++dist_n;
  }
  m.mean_center_dist = dist_n > 0 ? dist_sum / static_cast<double>(dist_n) : 0.0;
  if (ground_truth) {
    m.rot_recovery_err = frobenius_distance(t.rotation, ground_truth->rotation);
    double worst = 0.0;
    for (std::size_t c = 0; c < t.num_classes(); ++c) {
      if (!t.class_present[c]) continue;
      worst = std::max(worst, norm(sub(t.translations[c], ground_truth->offsets[c])));
    }
    m.delta_recovery_err = worst;
  }
}

struct EpochAccumulator {
  double ce = 0.0, dr = 0.0, total = 0.0, acc = 0.0;
  std::size_t n = 0;

  void add(const LossReport& r) {
    ce += r.ce;
    dr += r.dr;
    total += r.total;
    acc += r.batch_accuracy;
    ++n;
  }

  void fill(EpochMetrics& m) const {
    const double inv = n > 0 ? 1.0 / static_cast<double>(n) : 0.0;
    m.ce = ce * inv;
    m.dr = dr * inv;
    m.total = total * inv;
    m.train_acc = acc * inv;
  }
};

}  // namespace detail

/// The end-to-end fine-tuning loop. Per iteration: extract batch features
/// through both encoders, estimate the calibration from the banks, evaluate
/// the combined objective, update the trainable parameters, then enqueue the
/// batch pair (banks always trail the update). method=ce skips the banks and
/// calibration entirely; method=l2sp swaps the DR term for the weight-space
/// penalty.
inline FinetuneResult finetune(const TrainConfig& config, const MlpEncoder& pretrained,
                               const DatasetSplit& train,
                               const DatasetSplit* test = nullptr) {
  const auto t_start = std::chrono::steady_clock::now();
  config.validate();
  train.validate();
  pretrained.validate();
  require(train.dim() == pretrained.input_dim(), ErrorKind::dimension_mismatch,
          "finetune: dataset dim " + std::to_string(train.dim()) +
              " does not match encoder input dim " +
              std::to_string(pretrained.input_dim()));
  if (test) {
    test->validate();
    require(test->dim() == train.dim() && test->num_classes == train.num_classes,
            ErrorKind::dimension_mismatch, "finetune: train/test splits disagree");
  }
  const std::size_t iters_per_epoch = train.size() / config.batch_size;
  require(iters_per_epoch >= 1, ErrorKind::config,
          "finetune: batch size " + std::to_string(config.batch_size) +
              " exceeds training set size " + std::to_string(train.size()));

  std::mt19937_64 rng_init(mix_seed(config.seed, 10));
  std::mt19937_64 rng_shuffle(mix_seed(config.seed, 11));

  const std::size_t feat_dim = pretrained.output_dim();
  const auto c_count = static_cast<std::size_t>(train.num_classes);

  MlpEncoder encoder = pretrained;  // theta_d(0) := theta_p
  LinearHead head = LinearHead::random_init(c_count, feat_dim, rng_init);
  SgdState state = SgdState::zeros_like(encoder, head);

  const bool use_banks = config.method == Method::drtune;
  std::optional<PairedBanks> banks;
  if (use_banks) {
    banks.emplace(config.bank_size);
    warmup_fill(*banks, pretrained, train);
  }

  const double lambda_eff = config.lambda();
  const double wd_encoder = config.method == Method::l2sp ? 0.0 : config.weight_decay;
  const std::size_t total_steps = config.epochs * iters_per_epoch;

  FinetuneResult result;
  result.report.epochs.reserve(config.epochs);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng_shuffle);
    detail::EpochAccumulator acc;

    for (std::size_t it = 0; it < iters_per_epoch; ++it) {
      Matrix xs(config.batch_size, train.dim());
      std::vector<int> ys(config.batch_size);
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        const std::size_t src = order[it * config.batch_size + b];
        const auto row = train.inputs.row(src);
        std::copy(row.begin(), row.end(), xs.row(b).begin());
        ys[b] = train.labels[src];
      }

      const ForwardCache cache = forward_batch(encoder, xs);
      const Matrix& zd = cache.post.back();
      Matrix zp;
      if (use_banks) zp = pretrained.encode_batch(xs);

      // calibration + DR over the current bank snapshot
      DrLossResult dr;
      if (use_banks) {
        const CalibrationTransform transform =
            build_transform(*banks, head, config.switches);
        dr = dr_loss(head, calibrate_bank(transform, *banks), banks->labels());
      }

      const CeLossResult ce = ce_loss(head, zd, ys);

      LossReport report;
      L2spPenalty penalty;
      if (config.method == Method::l2sp) {
        penalty = l2sp_penalty(encoder, pretrained, config.l2sp_beta);
        report.ce = ce.loss;
        report.dr = penalty.value;
        report.lambda = 1.0;
        report.total = ce.loss + penalty.value;
      } else {
        report.ce = ce.loss;
        report.dr = dr.loss;
        report.lambda = lambda_eff;
        report.total = ce.loss + lambda_eff * dr.loss;
      }
      report.batch_accuracy = ce.accuracy;
      acc.add(report);

      GradientSet grads = backward(encoder, head, cache, ce.dlogits);
      if (use_banks && lambda_eff != 0.0)
        detail::add_scaled(grads.d_prototypes, dr.d_prototypes, lambda_eff);
      if (config.method == Method::l2sp) {
        for (std::size_t l = 0; l < grads.d_weights.size(); ++l) {
          detail::add_scaled(grads.d_weights[l], penalty.d_weights[l], 1.0);
          for (std::size_t i = 0; i < grads.d_biases[l].size(); ++i)
            grads.d_biases[l][i] += penalty.d_biases[l][i];
        }
      }

      const double lr_e = scheduled_lr(config.schedule, config.lr_encoder, step, total_steps);
      const double lr_h = scheduled_lr(config.schedule, config.lr_head(), step, total_steps);
      if (config.freeze_encoder) {
        sgd_step_head(head, grads.d_prototypes, state, lr_h, config.weight_decay,
                      config.momentum);
      } else {
        sgd_step(encoder, head, grads, state, lr_e, lr_h, wd_encoder,
                 config.weight_decay, config.momentum);
      }

      if (use_banks) {
        for (std::size_t b = 0; b < config.batch_size; ++b)
          banks->enqueue_pair(zp.row_vector(b), zd.row_vector(b), ys[b]);
#ifndef NDEBUG
        banks->check_invariants();
#endif
      }
      ++step;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lambda = config.method == Method::l2sp ? 1.0 : lambda_eff;
    acc.fill(m);
    if (test) m.test_acc = evaluate(encoder, head, *test);
    if (use_banks)
      detail::bank_diagnostics(*banks, head, config.switches, nullptr, m);
    result.report.epochs.push_back(m);
  }

  if (use_banks) {
    result.final_transform = build_transform(*banks, head, config.switches);
    result.banks = std::move(banks);
  }
  result.encoder = std::move(encoder);
  result.head = std::move(head);
  for (const auto& m : result.report.epochs)
    result.report.best_test_acc = std::max(result.report.best_test_acc, m.test_acc);
  result.report.final_test_acc = result.report.epochs.back().test_acc;
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

/// Isolation-mode loop over precomputed feature pairs: the "downstream
/// encoder" is the fixed map that produced the drifted features, so only the
/// head trains. Ground truth, when given, adds recovery diagnostics.
inline FinetuneResult finetune_paired(const TrainConfig& config, const DriftedPair& train,
                                      const DriftedPair& test,
                                      const DriftSpec* ground_truth = nullptr) {
  const auto t_start = std::chrono::steady_clock::now();
  config.validate();
  require(config.method != Method::l2sp, ErrorKind::config,
          "finetune_paired: l2sp needs encoder parameters; not available in paired mode");
  require(train.size() >= 1 && test.size() >= 1, ErrorKind::invalid_argument,
          "finetune_paired: empty split");
  require(train.dim() == test.dim() && train.num_classes == test.num_classes,
          ErrorKind::dimension_mismatch, "finetune_paired: train/test disagree");
  const std::size_t iters_per_epoch = train.size() / config.batch_size;
  require(iters_per_epoch >= 1, ErrorKind::config,
          "finetune_paired: batch size exceeds training set size");

  std::mt19937_64 rng_init(mix_seed(config.seed, 10));
  std::mt19937_64 rng_shuffle(mix_seed(config.seed, 11));

  const auto c_count = static_cast<std::size_t>(train.num_classes);
  LinearHead head = LinearHead::random_init(c_count, train.dim(), rng_init);
  SgdState state = SgdState::zeros_like_head(head);

  const bool use_banks = config.method == Method::drtune;
  std::optional<PairedBanks> banks;
  if (use_banks) {
    banks.emplace(config.bank_size);
    warmup_fill_features(*banks, train.pretrained, train.labels);
  }

  const double lambda_eff = config.lambda();
  const std::size_t total_steps = config.epochs * iters_per_epoch;

  FinetuneResult result;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng_shuffle);
    detail::EpochAccumulator acc;

    for (std::size_t it = 0; it < iters_per_epoch; ++it) {
      Matrix zd(config.batch_size, train.dim());
      std::vector<int> ys(config.batch_size);
      std::vector<std::size_t> rows(config.batch_size);
      for (std::size_t b = 0; b < config.batch_size; ++b) {
        const std::size_t src = order[it * config.batch_size + b];
        rows[b] = src;
        const auto row = train.downstream.row(src);
        std::copy(row.begin(), row.end(), zd.row(b).begin());
        ys[b] = train.labels[src];
      }

      DrLossResult dr;
      if (use_banks) {
        const CalibrationTransform transform =
            build_transform(*banks, head, config.switches);
        dr = dr_loss(head, calibrate_bank(transform, *banks), banks->labels());
      }
      const CeLossResult ce = ce_loss(head, zd, ys);

      LossReport report;
      report.ce = ce.loss;
      report.dr = dr.loss;
      report.lambda = lambda_eff;
      report.total = ce.loss + lambda_eff * dr.loss;
      report.batch_accuracy = ce.accuracy;
      acc.add(report);

      Matrix d_prototypes = matmul(transpose(ce.dlogits), zd);
      if (use_banks && lambda_eff != 0.0)
        detail::add_scaled(d_prototypes, dr.d_prototypes, lambda_eff);

      const double lr_h = scheduled_lr(config.schedule, config.lr_head(), step, total_steps);
      sgd_step_head(head, d_prototypes, state, lr_h, config.weight_decay,
                    config.momentum);

      if (use_banks) {
        for (std::size_t b = 0; b < config.batch_size; ++b)
          banks->enqueue_pair(train.pretrained.row_vector(rows[b]), zd.row_vector(b),
                              ys[b]);
#ifndef NDEBUG
        banks->check_invariants();
#endif
      }
      ++step;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.lambda = lambda_eff;
    acc.fill(m);
    m.test_acc = evaluate_features(head, test.downstream, test.labels);
    if (use_banks)
      detail::bank_diagnostics(*banks, head, config.switches, ground_truth, m);
    result.report.epochs.push_back(m);
  }

  if (use_banks) {
    result.final_transform = build_transform(*banks, head, config.switches);
    result.banks = std::move(banks);
  }
  result.head = std::move(head);
  for (const auto& m : result.report.epochs)
    result.report.best_test_acc = std::max(result.report.best_test_acc, m.test_acc);
  result.report.final_test_acc = result.report.epochs.back().test_acc;
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return result;
}

/// Plain supervised pretraining on a source task; the trained head is
/// discarded and only the encoder survives into the returned value.
inline MlpEncoder pretrain_source(const TrainConfig& config,
                                  const std::vector<std::size_t>& encoder_dims,
                                  Activation activation, const DatasetSplit& source) {
  source.validate();
  require(encoder_dims.size() >= 2, ErrorKind::config,
          "pretrain: encoder needs at least input and output dims");
  require(encoder_dims.front() == source.dim(), ErrorKind::dimension_mismatch,
          "pretrain: encoder input dim does not match the source dataset");
  std::mt19937_64 rng_scratch(mix_seed(config.seed, 20));
  MlpEncoder scratch(encoder_dims, activation, rng_scratch);

  TrainConfig pre = config;
  pre.method = Method::ce;
  pre.freeze_encoder = false;
  FinetuneResult run = finetune(pre, scratch, source, nullptr);
  return std::move(*run.encoder);
}

struct AblationRow {
  std::string tag;
  RunReport report;
};

inline const std::vector<std::string>& ablation_tags() {
  static const std::vector<std::string> tags = {"none", "gr", "clt", "clt+cga", "full"};
  return tags;
}

/// Runs the calibration-switch ablation grid (no SC, GR only, CLT only,
/// CLT+CGA, full) with everything else held fixed; one report per row.
inline std::vector<AblationRow> ablation_grid(const TrainConfig& base,
                                              const MlpEncoder& pretrained,
                                              const DatasetSplit& train,
                                              const DatasetSplit& test) {
  std::vector<AblationRow> rows;
  for (const auto& tag : ablation_tags()) {
    TrainConfig config = base;
    config.method = Method::drtune;
    config.switches = CalibrationSwitches::from_tag(tag);
    rows.push_back({tag, finetune(config, pretrained, train, &test).report});
  }
  return rows;
}

inline std::vector<AblationRow> ablation_grid_paired(const TrainConfig& base,
                                                     const DriftedPair& train,
                                                     const DriftedPair& test) {
  std::vector<AblationRow> rows;
  for (const auto& tag : ablation_tags()) {
    TrainConfig config = base;
    config.method = Method::drtune;
    config.switches = CalibrationSwitches::from_tag(tag);
    rows.push_back({tag, finetune_paired(config, train, test, nullptr).report});
  }
  return rows;
}

struct KSweepRow {
  std::size_t k = 0;
  double accuracy = 0.0;
};

/// Fine-tunes once per K at a pinned learning rate (the sweep disables the
/// head-lr rule so only the bank size varies).
inline std::vector<KSweepRow> k_sweep(const TrainConfig& base,
                                      const std::vector<std::size_t>& bank_sizes,
                                      const MlpEncoder& pretrained,
                                      const DatasetSplit& train,
                                      const DatasetSplit& test) {
  require(!bank_sizes.empty(), ErrorKind::config, "k_sweep: no K values");
  std::vector<KSweepRow> rows;
  for (const std::size_t k : bank_sizes) {
    require(k >= 1, ErrorKind::config, "k_sweep: K must be >= 1");
    TrainConfig config = base;
    config.bank_size = k;
    config.fixed_head_lr = true;
    const FinetuneResult run = finetune(config, pretrained, train, &test);
    rows.push_back({k, run.report.final_test_acc});
  }
  return rows;
}

}  // namespace drtune
