#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "drtune/data.hpp"
#include "drtune/error.hpp"
#include "drtune/io.hpp"
#include "drtune/model.hpp"
#include "drtune/trainer.hpp"

namespace drtune {

struct ModelConfig {
  std::vector<std::size_t> hidden = {64, 64};
  std::size_t feature_dim = 16;
  Activation activation = Activation::relu;

  std::vector<std::size_t> encoder_dims(std::size_t input_dim) const {
    std::vector<std::size_t> dims = {input_dim};
    dims.insert(dims.end(), hidden.begin(), hidden.end());
    dims.push_back(feature_dim);
    return dims;
  }
};

struct DatasetConfig {
  enum class Kind { transfer, drifted, mixture, csv };
  Kind kind = Kind::drifted;
  std::uint64_t data_seed = 1;

  TransferParams transfer;
  DriftBenchParams drift;

  // mixture
  int classes = 8;
  std::size_t dim = 16;
  std::size_t train_per_class = 64;
  std::size_t test_per_class = 128;
  double separation = 3.0;

  // csv
  std::string train_csv;
  std::string test_csv;
  bool has_header = false;
};

inline DatasetConfig::Kind dataset_kind_from_name(const std::string& name) {
  if (name == "transfer") return DatasetConfig::Kind::transfer;
  if (name == "drifted") return DatasetConfig::Kind::drifted;
  if (name == "mixture") return DatasetConfig::Kind::mixture;
  if (name == "csv") return DatasetConfig::Kind::csv;
  throw Error(ErrorKind::config, "unknown dataset kind '" + name +
                                     "' (expected transfer|drifted|mixture|csv)");
}

inline std::string dataset_kind_name(DatasetConfig::Kind kind) {
  switch (kind) {
    case DatasetConfig::Kind::transfer: return "transfer";
    case DatasetConfig::Kind::drifted: return "drifted";
    case DatasetConfig::Kind::mixture: return "mixture";
    default: return "csv";
  }
}

/// Everything one command needs: training hyper-parameters, the encoder
/// shape, the dataset recipe, the output directory and (for fine-tuning) the
/// pretrained checkpoint.
struct ExperimentManifest {
  TrainConfig train;
  ModelConfig model;
  DatasetConfig dataset;
  std::string out_dir = "runs/out";
  std::string checkpoint;
  std::vector<std::size_t> k_sweep;
};

namespace detail {

inline bool parse_bool(const std::string& value, const std::string& where) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw Error(ErrorKind::config, where + ": expected a boolean, got '" + value + "'");
}

inline std::vector<std::size_t> parse_size_list(const std::string& value,
                                                const std::string& where) {
  std::vector<std::size_t> out;
  for (const auto& cell : split(value, ',')) {
    const long v = parse_long(trim(cell), where);
    require(v >= 0, ErrorKind::config, where + ": negative value");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace detail

/// Flat key-value manifest with [sections]; '#' starts a comment. Unknown
/// sections or keys are rejected outright.
inline ExperimentManifest parse_manifest(std::istream& in, const std::string& origin) {
  ExperimentManifest m;
  std::string line;
  std::string section = "run";
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string where = origin + ":" + std::to_string(line_no);
    const auto comment = line.find('#');
    if (comment != std::string::npos) line.erase(comment);
    const std::string text = trim(line);
    if (text.empty()) continue;
    if (text.front() == '[') {
      require(text.back() == ']', ErrorKind::config, where + ": malformed section");
      section = trim(text.substr(1, text.size() - 2));
      require(section == "run" || section == "train" || section == "model" ||
                  section == "dataset" || section == "pretrain",
              ErrorKind::config, where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = text.find('=');
    require(eq != std::string::npos, ErrorKind::config,
            where + ": expected key = value");
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    const std::string path = section + "." + key;
    if (value.empty()) continue;  // empty value keeps the default

    if (path == "run.method") m.train.method = method_from_name(value);
    else if (path == "run.seed") m.train.seed = static_cast<std::uint64_t>(parse_long(value, where));
    else if (path == "run.out") m.out_dir = value;
    else if (path == "train.epochs") m.train.epochs = static_cast<std::size_t>(parse_long(value, where));
    else if (path == "train.batch") m.train.batch_size = static_cast<std::size_t>(parse_long(value, where));
    else if (path == "train.k") m.train.bank_size = static_cast<std::size_t>(parse_long(value, where));
    else if (path == "train.lr") m.train.lr_encoder = parse_double(value, where);
    else if (path == "train.schedule") m.train.schedule = schedule_from_name(value);
    else if (path == "train.weight_decay") m.train.weight_decay = parse_double(value, where);
    else if (path == "train.momentum") m.train.momentum = parse_double(value, where);
    else if (path == "train.ablate_sc") m.train.switches = CalibrationSwitches::from_tag(value);
    else if (path == "train.l2sp_beta") m.train.l2sp_beta = parse_double(value, where);
    else if (path == "train.freeze_encoder") m.train.freeze_encoder = detail::parse_bool(value, where);
    else if (path == "train.lambda_override") m.train.lambda_override = parse_double(value, where);
    else if (path == "train.fixed_head_lr") m.train.fixed_head_lr = detail::parse_bool(value, where);
    else if (path == "model.hidden") m.model.hidden = detail::parse_size_list(value, where);
    else if (path == "model.feature_dim") m.model.feature_dim = static_cast<std::size_t>(parse_long(value, where));
    else if (path == "model.activation") m.model.activation = activation_from_name(value);
    else if (path == "dataset.kind") m.dataset.kind = dataset_kind_from_name(value);
    else if (path == "dataset.data_seed") m.dataset.data_seed = static_cast<std::uint64_t>(parse_long(value, where));
    else if (path == "dataset.classes") {
      const int c = static_cast<int>(parse_long(value, where));
      m.dataset.classes = c;
      m.dataset.transfer.classes = c;
      m.dataset.drift.classes = c;
    } else if (path == "dataset.dim") {
      const auto d = static_cast<std::size_t>(parse_long(value, where));
      m.dataset.dim = d;
      m.dataset.drift.dim = d;
    } else if (path == "dataset.train_per_class") {
      const auto n = static_cast<std::size_t>(parse_long(value, where));
      m.dataset.train_per_class = n;
      m.dataset.transfer.target_train_per_class = n;
      m.dataset.drift.train_per_class = n;
    } else if (path == "dataset.test_per_class") {
      const auto n = static_cast<std::size_t>(parse_long(value, where));
      m.dataset.test_per_class = n;
      m.dataset.transfer.target_test_per_class = n;
      m.dataset.drift.test_per_class = n;
    } else if (path == "dataset.separation") {
      const double s = parse_double(value, where);
      m.dataset.separation = s;
      m.dataset.transfer.separation = s;
      m.dataset.drift.separation = s;
    }
    else if (path == "dataset.source_per_class") m.dataset.transfer.source_per_class = static_cast<std::size_t>(parse_long(value, where));
    else if (path == "dataset.latent_dim") m.dataset.transfer.latent_dim = static_cast<std::size_t>(parse_long(value, where));
    else if (path == "dataset.warp_hidden") m.dataset.transfer.warp_hidden = static_cast<std::size_t>(parse_long(value, where));
    else if (path == "dataset.input_dim") m.dataset.transfer.input_dim = static_cast<std::size_t>(parse_long(value, where));
    else if (path == "dataset.mean_jitter") m.dataset.transfer.mean_jitter = parse_double(value, where);
    else if (path == "dataset.warp_gain") m.dataset.transfer.warp_gain = parse_double(value, where);
    else if (path == "dataset.input_noise") m.dataset.transfer.input_noise = parse_double(value, where);
    else if (path == "dataset.radial_gamma") m.dataset.drift.radial_gamma = parse_double(value, where);
    else if (path == "dataset.noise_sigma") m.dataset.drift.noise_sigma = parse_double(value, where);
    else if (path == "dataset.train_csv") m.dataset.train_csv = value;
    else if (path == "dataset.test_csv") m.dataset.test_csv = value;
    else if (path == "dataset.has_header") m.dataset.has_header = detail::parse_bool(value, where);
    else if (path == "pretrain.checkpoint") m.checkpoint = value;
    else throw Error(ErrorKind::config, where + ": unknown key '" + path + "'");
  }
  return m;
}

inline ExperimentManifest parse_manifest_file(const std::string& path) {
  std::ifstream in = open_input(path);
  return parse_manifest(in, path);
}

/// Canonical echo of the effective configuration; written into the output
/// directory so a run can be reproduced from its artifacts alone.
inline void write_resolved_manifest(std::ostream& out, const ExperimentManifest& m) {
  out << "[run]\n";
  out << "method = " << method_name(m.train.method) << '\n';
  out << "seed = " << m.train.seed << '\n';
  out << "out = " << m.out_dir << '\n';
  out << "\n[train]\n";
  out << "epochs = " << m.train.epochs << '\n';
  out << "batch = " << m.train.batch_size << '\n';
  out << "k = " << m.train.bank_size << '\n';
  out << "lr = " << format_double(m.train.lr_encoder) << '\n';
  out << "schedule = " << schedule_name(m.train.schedule) << '\n';
  out << "weight_decay = " << format_double(m.train.weight_decay) << '\n';
  out << "momentum = " << format_double(m.train.momentum) << '\n';
  out << "ablate_sc = " << m.train.switches.tag() << '\n';
  out << "l2sp_beta = " << format_double(m.train.l2sp_beta) << '\n';
  out << "freeze_encoder = " << (m.train.freeze_encoder ? "true" : "false") << '\n';
  if (m.train.lambda_override >= 0.0)
    out << "lambda_override = " << format_double(m.train.lambda_override) << '\n';
  out << "fixed_head_lr = " << (m.train.fixed_head_lr ? "true" : "false") << '\n';
  out << "\n[model]\n";
  out << "hidden = ";
  for (std::size_t i = 0; i < m.model.hidden.size(); ++i)
    out << (i ? "," : "") << m.model.hidden[i];
  out << '\n';
  out << "feature_dim = " << m.model.feature_dim << '\n';
  out << "activation = " << activation_name(m.model.activation) << '\n';
  out << "\n[dataset]\n";
  out << "kind = " << dataset_kind_name(m.dataset.kind) << '\n';
  out << "data_seed = " << m.dataset.data_seed << '\n';
  switch (m.dataset.kind) {
    case DatasetConfig::Kind::transfer: {
      const auto& t = m.dataset.transfer;
      out << "classes = " << t.classes << '\n';
      out << "latent_dim = " << t.latent_dim << '\n';
      out << "warp_hidden = " << t.warp_hidden << '\n';
      out << "input_dim = " << t.input_dim << '\n';
      out << "source_per_class = " << t.source_per_class << '\n';
      out << "train_per_class = " << t.target_train_per_class << '\n';
      out << "test_per_class = " << t.target_test_per_class << '\n';
      out << "separation = " << format_double(t.separation) << '\n';
      out << "mean_jitter = " << format_double(t.mean_jitter) << '\n';
      out << "warp_gain = " << format_double(t.warp_gain) << '\n';
      out << "input_noise = " << format_double(t.input_noise) << '\n';
      break;
    }
    case DatasetConfig::Kind::drifted: {
      const auto& d = m.dataset.drift;
      out << "classes = " << d.classes << '\n';
      out << "dim = " << d.dim << '\n';
      out << "train_per_class = " << d.train_per_class << '\n';
      out << "test_per_class = " << d.test_per_class << '\n';
      out << "separation = " << format_double(d.separation) << '\n';
      out << "radial_gamma = " << format_double(d.radial_gamma) << '\n';
      out << "noise_sigma = " << format_double(d.noise_sigma) << '\n';
      break;
    }
    case DatasetConfig::Kind::mixture:
      out << "classes = " << m.dataset.classes << '\n';
      out << "dim = " << m.dataset.dim << '\n';
      out << "train_per_class = " << m.dataset.train_per_class << '\n';
      out << "test_per_class = " << m.dataset.test_per_class << '\n';
      out << "separation = " << format_double(m.dataset.separation) << '\n';
      break;
    case DatasetConfig::Kind::csv:
      out << "classes = " << m.dataset.classes << '\n';
      out << "train_csv = " << m.dataset.train_csv << '\n';
      out << "test_csv = " << m.dataset.test_csv << '\n';
      out << "has_header = " << (m.dataset.has_header ? "true" : "false") << '\n';
      break;
  }
  if (!m.checkpoint.empty()) {
    out << "\n[pretrain]\n";
    out << "checkpoint = " << m.checkpoint << '\n';
  }
}

/// Pre-run validation: referenced paths must exist and the configuration must
/// be coherent for the requested command before any output is produced.
inline void validate_manifest(const ExperimentManifest& m, const std::string& command) {
  m.train.validate();
  require(!m.out_dir.empty(), ErrorKind::config, "run.out must not be empty");
  require(m.model.feature_dim >= 1, ErrorKind::config, "model.feature_dim must be >= 1");
  for (const std::size_t h : m.model.hidden)
    require(h >= 1, ErrorKind::config, "model.hidden entries must be >= 1");
  for (const std::size_t k : m.k_sweep)
    require(k >= 1, ErrorKind::config, "k-sweep values must be >= 1");

  if (m.dataset.kind == DatasetConfig::Kind::csv) {
    require(m.dataset.classes >= 2, ErrorKind::config, "dataset.classes must be >= 2");
    require(!m.dataset.train_csv.empty(), ErrorKind::config, "dataset.train_csv missing");
    require(std::filesystem::exists(m.dataset.train_csv), ErrorKind::config,
            "dataset.train_csv does not exist: " + m.dataset.train_csv);
    if (command == "finetune") {
      require(!m.dataset.test_csv.empty(), ErrorKind::config, "dataset.test_csv missing");
      require(std::filesystem::exists(m.dataset.test_csv), ErrorKind::config,
              "dataset.test_csv does not exist: " + m.dataset.test_csv);
    }
  }

  if (command == "pretrain") {
    require(m.dataset.kind != DatasetConfig::Kind::drifted, ErrorKind::config,
            "pretrain: the drifted benchmark provides features, not raw inputs");
  }
  if (command == "finetune") {
    if (m.dataset.kind == DatasetConfig::Kind::drifted) {
      require(m.checkpoint.empty(), ErrorKind::config,
              "finetune: the drifted benchmark takes no checkpoint");
    } else {
      require(!m.checkpoint.empty(), ErrorKind::config,
              "finetune: pretrain.checkpoint is required for this dataset kind");
      require(std::filesystem::exists(m.checkpoint), ErrorKind::config,
              "finetune: checkpoint does not exist: " + m.checkpoint);
    }
  }
}

}  // namespace drtune
