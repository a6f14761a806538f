#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "drtune/error.hpp"
#include "drtune/io.hpp"
#include "drtune/linalg.hpp"
#include "drtune/model.hpp"

namespace drtune {

/// A labelled sample set. `inputs` rows are samples; every label lies in
/// [0, num_classes).
struct DatasetSplit {
  Matrix inputs;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return inputs.rows(); }
  std::size_t dim() const { return inputs.cols(); }

  void validate() const {
    require(inputs.rows() >= 1, ErrorKind::invalid_argument, "dataset: empty");
    require(labels.size() == inputs.rows(), ErrorKind::dimension_mismatch,
            "dataset: label count does not match sample count");
    require(num_classes >= 1, ErrorKind::invalid_argument, "dataset: no classes");
    for (int y : labels)
      require(y >= 0 && y < num_classes, ErrorKind::invalid_argument,
              "dataset: label " + std::to_string(y) + " out of range [0, " +
                  std::to_string(num_classes) + ")");
  }
};

/// Class means drawn uniformly on the sphere of radius `separation`.
inline Matrix mixture_means(int num_classes, std::size_t dim, double separation,
                            std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix means(static_cast<std::size_t>(num_classes), dim);
  for (int c = 0; c < num_classes; ++c) {
    Vector dir(dim);
    double n = 0.0;
    do {
      for (auto& x : dir) x = gauss(rng);
      n = norm(dir);
    } while (n < 1e-12);
    for (std::size_t j = 0; j < dim; ++j)
      means(static_cast<std::size_t>(c), j) = separation * dir[j] / n;
  }
  return means;
}

/// Samples n_per_class points per class with unit isotropic noise around the
/// given means. Sample order is class-blocked.
inline DatasetSplit sample_mixture(const Matrix& means, std::size_t n_per_class,
                                   std::mt19937_64& rng) {
  require(n_per_class >= 1, ErrorKind::invalid_argument,
          "sample_mixture: n_per_class must be >= 1");
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t c_count = means.rows();
  const std::size_t dim = means.cols();
  DatasetSplit ds;
  ds.num_classes = static_cast<int>(c_count);
  ds.inputs = Matrix(c_count * n_per_class, dim);
  ds.labels.resize(c_count * n_per_class);
  std::size_t row = 0;
  for (std::size_t c = 0; c < c_count; ++c) {
    for (std::size_t k = 0; k < n_per_class; ++k, ++row) {
      ds.labels[row] = static_cast<int>(c);
      for (std::size_t j = 0; j < dim; ++j)
        ds.inputs(row, j) = means(c, j) + gauss(rng);
    }
  }
  return ds;
}

inline DatasetSplit make_gaussian_mixture(int num_classes, std::size_t dim,
                                          std::size_t n_per_class, double separation,
                                          std::uint64_t seed) {
  require(num_classes >= 2, ErrorKind::invalid_argument,
          "make_gaussian_mixture: need at least 2 classes");
  require(dim >= 2, ErrorKind::invalid_argument,
          "make_gaussian_mixture: need dim >= 2");
  std::mt19937_64 rng_means(mix_seed(seed, 1));
  std::mt19937_64 rng_noise(mix_seed(seed, 2));
  const Matrix means = mixture_means(num_classes, dim, separation, rng_means);
  return sample_mixture(means, n_per_class, rng_noise);
}

inline Matrix perturb_means(const Matrix& means, double scale, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix out = means;
  for (auto& x : out.data()) x += scale * gauss(rng);
  return out;
}

/// Splits a class-blocked dataset into (train, test) keeping the first
/// `train_per_class` samples of each class for training.
inline std::pair<DatasetSplit, DatasetSplit> split_train_test(
    const DatasetSplit& ds, std::size_t train_per_class) {
  ds.validate();
  std::vector<std::size_t> train_rows, test_rows;
  std::vector<std::size_t> taken(static_cast<std::size_t>(ds.num_classes), 0);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto& got = taken[static_cast<std::size_t>(ds.labels[i])];
    if (got < train_per_class) {
      train_rows.push_back(i);
      ++got;
    } else {
      test_rows.push_back(i);
    }
  }
  require(!train_rows.empty() && !test_rows.empty(), ErrorKind::invalid_argument,
          "split_train_test: a split came out empty");
  auto take = [&](const std::vector<std::size_t>& rows) {
    DatasetSplit out;
    out.num_classes = ds.num_classes;
    out.inputs = Matrix(rows.size(), ds.dim());
    out.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto src = ds.inputs.row(rows[i]);
      std::copy(src.begin(), src.end(), out.inputs.row(i).begin());
      out.labels[i] = ds.labels[rows[i]];
    }
    return out;
  };
  return {take(train_rows), take(test_rows)};
}

/// Ground-truth feature drift: an orthogonal map plus per-class offsets and
/// optional isotropic noise.
struct DriftSpec {
  Matrix rotation;               // d x d, orthogonal
  std::vector<Vector> offsets;   // one per class
  double noise_sigma = 0.0;

  void validate() const {
    require(rotation.rows() == rotation.cols(), ErrorKind::invalid_argument,
            "drift: rotation must be square");
    require(orthogonality_error(rotation) < 1e-8, ErrorKind::invalid_argument,
            "drift: rotation is not orthogonal");
    for (const auto& t : offsets)
      require(t.size() == rotation.rows(), ErrorKind::dimension_mismatch,
              "drift: offset dim mismatch");
    require(noise_sigma >= 0.0, ErrorKind::invalid_argument,
            "drift: negative noise sigma");
  }
};

/// Index-paired pretrained/downstream views of the same samples.
struct DriftedPair {
  Matrix pretrained;
  Matrix downstream;
  std::vector<int> labels;
  int num_classes = 0;

  std::size_t size() const { return pretrained.rows(); }
  std::size_t dim() const { return pretrained.cols(); }
};

/// Per-class sample means of `features`; `present[c]` is false when a class
/// has no samples (its mean row is zero).
inline std::pair<Matrix, std::vector<bool>> class_means(const Matrix& features,
                                                        const std::vector<int>& labels,
                                                        int num_classes) {
  Matrix sums(static_cast<std::size_t>(num_classes), features.cols());
  std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    ++counts[c];
    const auto src = features.row(i);
    auto dst = sums.row(c);
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] += src[j];
  }
  std::vector<bool> present(static_cast<std::size_t>(num_classes), false);
  for (std::size_t c = 0; c < counts.size(); ++c) {
    if (counts[c] == 0) continue;
    present[c] = true;
    auto row = sums.row(c);
    for (auto& x : row) x /= static_cast<double>(counts[c]);
  }
  return {std::move(sums), present};
}

/// downstream_k = Q * pretrained_k + offset[y_k] + sigma * noise.
inline DriftedPair make_drifted_pair(const DatasetSplit& base, const DriftSpec& spec,
                                     std::uint64_t seed) {
  base.validate();
  spec.validate();
  require(spec.rotation.cols() == base.dim(), ErrorKind::dimension_mismatch,
          "make_drifted_pair: rotation dim does not match features");
  require(spec.offsets.size() == static_cast<std::size_t>(base.num_classes),
          ErrorKind::dimension_mismatch,
          "make_drifted_pair: need one offset per class");
  std::mt19937_64 rng(mix_seed(seed, 3));
  std::normal_distribution<double> gauss(0.0, 1.0);
  DriftedPair out;
  out.pretrained = base.inputs;
  out.labels = base.labels;
  out.num_classes = base.num_classes;
  out.downstream = Matrix(base.size(), base.dim());
  for (std::size_t i = 0; i < base.size(); ++i) {
    Vector v = matvec(spec.rotation, base.inputs.row_vector(i));
    const auto& t = spec.offsets[static_cast<std::size_t>(base.labels[i])];
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] += t[j];
      if (spec.noise_sigma > 0.0) v[j] += spec.noise_sigma * gauss(rng);
    }
    std::copy(v.begin(), v.end(), out.downstream.row(i).begin());
  }
  return out;
}

/// Radial drift: offsets push each class center along its own rotated
/// direction, offset_c = gamma * Q * mean_c. This family is exactly
/// identifiable by the uncentered rotation estimate, so construct-then-recover
/// tests can pin tight tolerances.
inline DriftSpec make_radial_drift(const DatasetSplit& base, double gamma,
                                   double noise_sigma, std::uint64_t seed) {
  base.validate();
  DriftSpec spec;
  std::mt19937_64 rng(mix_seed(seed, 4));
  spec.rotation = random_orthogonal(base.dim(), rng);
  spec.noise_sigma = noise_sigma;
  const auto [means, present] = class_means(base.inputs, base.labels, base.num_classes);
  spec.offsets.resize(static_cast<std::size_t>(base.num_classes));
  for (int c = 0; c < base.num_classes; ++c) {
    const auto cc = static_cast<std::size_t>(c);
    spec.offsets[cc] = present[cc]
                           ? scaled(matvec(spec.rotation, means.row_vector(cc)), gamma)
                           : Vector(base.dim(), 0.0);
  }
  return spec;
}

/// Two related classification tasks over the same input space. The class
/// structure lives in a latent Gaussian mixture and inputs are that mixture
/// pushed through a fixed random nonlinear map, so useful features must be
/// *learned*; pretraining on the large source task learns the map, and the
/// small target task (jittered latent means, same map) stresses over-fitting.
struct TransferParams {
  int classes = 8;
  std::size_t latent_dim = 6;
  std::size_t warp_hidden = 32;
  std::size_t input_dim = 24;
  std::size_t source_per_class = 500;
  std::size_t target_train_per_class = 8;  // 64 total
  std::size_t target_test_per_class = 250;
  double separation = 4.0;    // latent-space class-mean radius
  double mean_jitter = 0.3;   // latent-space target drift vs source
  double warp_gain = 2.0;     // weight scale of the random warp
  double input_noise = 0.05;  // post-warp observation noise
};

struct TransferBenchmark {
  DatasetSplit source;
  DatasetSplit target_train;
  DatasetSplit target_test;
};

inline TransferBenchmark make_transfer_benchmark(const TransferParams& p,
                                                 std::uint64_t seed) {
  require(p.classes >= 2 && p.latent_dim >= 2 && p.input_dim >= 2,
          ErrorKind::invalid_argument, "transfer benchmark: need >= 2 classes and dims");
  std::mt19937_64 rng_world(mix_seed(seed, 30));
  std::mt19937_64 rng_source(mix_seed(seed, 31));
  std::mt19937_64 rng_jitter(mix_seed(seed, 32));
  std::mt19937_64 rng_target(mix_seed(seed, 33));
  std::mt19937_64 rng_warp(mix_seed(seed, 37));
  std::mt19937_64 rng_noise_src(mix_seed(seed, 38));
  std::mt19937_64 rng_noise_tgt(mix_seed(seed, 39));

  const Matrix source_means =
      mixture_means(p.classes, p.latent_dim, p.separation, rng_world);
  const Matrix target_means = perturb_means(source_means, p.mean_jitter, rng_jitter);

  MlpEncoder warp({p.latent_dim, p.warp_hidden, p.input_dim}, Activation::tanh_fn,
                  rng_warp);
  for (auto& layer : warp.layers()) {
    for (auto& w : layer.weight.data()) w *= p.warp_gain;
    for (auto& b : layer.bias) b *= p.warp_gain;
  }

  auto observe = [&](const Matrix& means, std::size_t n_per_class,
                     std::mt19937_64& rng_samples, std::mt19937_64& rng_noise) {
    const DatasetSplit latent = sample_mixture(means, n_per_class, rng_samples);
    DatasetSplit out;
    out.num_classes = p.classes;
    out.labels = latent.labels;
    out.inputs = warp.encode_batch(latent.inputs);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (auto& x : out.inputs.data()) x += p.input_noise * gauss(rng_noise);
    return out;
  };

  TransferBenchmark bench;
  bench.source = observe(source_means, p.source_per_class, rng_source, rng_noise_src);
  const DatasetSplit target_all =
      observe(target_means, p.target_train_per_class + p.target_test_per_class,
              rng_target, rng_noise_tgt);
  auto [train, test] = split_train_test(target_all, p.target_train_per_class);
  bench.target_train = std::move(train);
  bench.target_test = std::move(test);
  return bench;
}

/// Drift benchmark parameters: a labelled Gaussian-mixture feature cloud plus
/// a radial drift (rotation + per-class offsets along rotated class means).
struct DriftBenchParams {
  int classes = 8;
  std::size_t dim = 16;
  std::size_t train_per_class = 64;  // 512 total, sized to match the bank
  std::size_t test_per_class = 128;
  double separation = 5.0;
  double radial_gamma = 0.5;
  double noise_sigma = 0.0;
};

struct DriftBenchmark {
  DriftedPair train;
  DriftedPair test;
  DriftSpec spec;
};

inline DriftBenchmark make_drift_benchmark(const DriftBenchParams& p,
                                           std::uint64_t seed) {
  const DatasetSplit all = make_gaussian_mixture(
      p.classes, p.dim, p.train_per_class + p.test_per_class, p.separation, seed);
  auto [train_base, test_base] = split_train_test(all, p.train_per_class);
  DriftBenchmark bench;
  // offsets derive from the *training* cloud the banks will hold
  bench.spec = make_radial_drift(train_base, p.radial_gamma, p.noise_sigma,
                                 mix_seed(seed, 34));
  bench.train = make_drifted_pair(train_base, bench.spec, mix_seed(seed, 35));
  bench.test = make_drifted_pair(test_base, bench.spec, mix_seed(seed, 36));
  return bench;
}

struct CsvSchema {
  int num_classes = 0;
  bool has_header = false;
};

/// Layout: label,f0,f1,...,f{d-1}; one sample per row; decimal text.
inline DatasetSplit load_csv_dataset(const std::string& path, const CsvSchema& schema) {
  require(schema.num_classes >= 1, ErrorKind::config,
          "csv: schema must declare a positive class count");
  std::ifstream in = open_input(path);
  DatasetSplit ds;
  ds.num_classes = schema.num_classes;
  std::string line;
  std::size_t line_no = 0;
  std::size_t dim = 0;
  std::vector<double> values;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1 && schema.has_header) continue;
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    const std::string where =
        path + ": row " + std::to_string(line_no);
    require(cells.size() >= 2, ErrorKind::parse, where + ": need label + features");
    if (dim == 0) {
      dim = cells.size() - 1;
    } else {
      require(cells.size() - 1 == dim, ErrorKind::parse,
              where + ": expected " + std::to_string(dim + 1) + " columns, got " +
                  std::to_string(cells.size()));
    }
    const long label = parse_long(cells[0], where + ", column 1");
    require(label >= 0 && label < schema.num_classes, ErrorKind::parse,
            where + ", column 1: label " + std::to_string(label) +
                " out of range [0, " + std::to_string(schema.num_classes) + ")");
    ds.labels.push_back(static_cast<int>(label));
    for (std::size_t j = 1; j < cells.size(); ++j) {
      const std::string cell_where = where + ", column " + std::to_string(j + 1);
      const double x = parse_double(cells[j], cell_where);
      require(std::isfinite(x), ErrorKind::parse, cell_where + ": non-finite value");
      values.push_back(x);
    }
  }
  require(!ds.labels.empty(), ErrorKind::parse, path + ": no data rows");
  ds.inputs = Matrix(ds.labels.size(), dim, std::move(values));
  return ds;
}

/// As load_csv_dataset but with the class count inferred as max(label) + 1;
/// used for bank snapshots where no schema is declared.
inline DatasetSplit load_features_csv(const std::string& path, bool has_header = false) {
  DatasetSplit ds =
      load_csv_dataset(path, {std::numeric_limits<int>::max(), has_header});
  int max_label = 0;
  for (int y : ds.labels) max_label = std::max(max_label, y);
  ds.num_classes = max_label + 1;
  return ds;
}

inline void save_features_csv(const std::string& path, const Matrix& features,
                              const std::vector<int>& labels) {
  require(labels.size() == features.rows(), ErrorKind::dimension_mismatch,
          "save_features_csv: label count mismatch");
  std::ofstream out = open_output(path);
  for (std::size_t i = 0; i < features.rows(); ++i) {
    out << labels[i];
    for (double x : features.row(i)) out << ',' << format_double(x);
    out << '\n';
  }
}

}  // namespace drtune
