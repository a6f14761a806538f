#pragma once

#include <cassert>
#include <deque>
#include <string>
#include <vector>

#include "drtune/data.hpp"
#include "drtune/error.hpp"
#include "drtune/linalg.hpp"
#include "drtune/model.hpp"

namespace drtune {

struct BankEntry {
  Vector feature;
  int label = 0;
};

/// Two index-paired FIFO queues holding the pretrained and downstream
/// representations of the same samples. Entries at the same index always
/// refer to the same source sample and therefore share a label.
class PairedBanks {
 public:
  explicit PairedBanks(std::size_t capacity) : capacity_(capacity) {
    require(capacity >= 1, ErrorKind::invalid_argument, "bank: capacity must be >= 1");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return pretrained_.size(); }
  bool empty() const { return pretrained_.empty(); }
  bool full() const { return size() == capacity_; }

  /// Feature dimension; 0 while empty.
  std::size_t dim() const { return pretrained_.empty() ? 0 : pretrained_.front().feature.size(); }

  const std::deque<BankEntry>& pretrained() const { return pretrained_; }
  const std::deque<BankEntry>& downstream() const { return downstream_; }

  /// Appends a pair to both queues; evicts the single oldest pair from both
  /// once capacity is exceeded.
  void enqueue_pair(const Vector& zp, const Vector& zd, int label) {
    require(zp.size() == zd.size(), ErrorKind::dimension_mismatch,
            "bank: pretrained/downstream feature dims differ");
    require(label >= 0, ErrorKind::invalid_argument, "bank: negative label");
    if (!pretrained_.empty())
      require(zp.size() == dim(), ErrorKind::dimension_mismatch,
              "bank: feature dim " + std::to_string(zp.size()) +
                  " does not match existing entries of dim " + std::to_string(dim()));
    pretrained_.push_back(BankEntry{zp, label});
    downstream_.push_back(BankEntry{zd, label});
    if (pretrained_.size() > capacity_) {
      pretrained_.pop_front();
      downstream_.pop_front();
    }
    assert(pretrained_.size() == downstream_.size());
  }

  /// N_c tallies over the current contents; sums to size().
  std::vector<std::size_t> class_counts(int num_classes) const {
    require(num_classes >= 1, ErrorKind::invalid_argument, "bank: num_classes < 1");
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_classes), 0);
    for (const auto& e : pretrained_) {
      require(e.label < num_classes, ErrorKind::invalid_argument,
              "bank: label " + std::to_string(e.label) + " out of range [0, " +
                  std::to_string(num_classes) + ")");
      ++counts[static_cast<std::size_t>(e.label)];
    }
    return counts;
  }

  Matrix pretrained_matrix() const { return to_matrix(pretrained_); }
  Matrix downstream_matrix() const { return to_matrix(downstream_); }

  std::vector<int> labels() const {
    std::vector<int> out;
    out.reserve(pretrained_.size());
    for (const auto& e : pretrained_) out.push_back(e.label);
    return out;
  }

  /// Full structural check: equal lengths, aligned labels, uniform dims,
  /// size within capacity. Cheap enough for debug-build use each step.
  void check_invariants() const {
    require(pretrained_.size() == downstream_.size(), ErrorKind::invalid_argument,
            "bank: queue lengths differ");
    require(pretrained_.size() <= capacity_, ErrorKind::invalid_argument,
            "bank: over capacity");
    for (std::size_t i = 0; i < pretrained_.size(); ++i) {
      require(pretrained_[i].label == downstream_[i].label, ErrorKind::invalid_argument,
              "bank: label mismatch at index " + std::to_string(i));
      require(pretrained_[i].feature.size() == dim() &&
                  downstream_[i].feature.size() == dim(),
              ErrorKind::dimension_mismatch, "bank: ragged features");
    }
  }

 private:
  static Matrix to_matrix(const std::deque<BankEntry>& entries) {
    require(!entries.empty(), ErrorKind::invalid_argument, "bank: empty");
    Matrix m(entries.size(), entries.front().feature.size());
    for (std::size_t i = 0; i < entries.size(); ++i)
      std::copy(entries[i].feature.begin(), entries[i].feature.end(), m.row(i).begin());
    return m;
  }

  std::size_t capacity_;
  std::deque<BankEntry> pretrained_;
  std::deque<BankEntry> downstream_;
};

/// Fills both banks to capacity with *pretrained* features of the dataset
/// (valid as a downstream stand-in because theta_d starts as a copy of
/// theta_p). Cycles through the dataset when it is smaller than the bank.
inline void warmup_fill(PairedBanks& banks, const MlpEncoder& encoder_p,
                        const DatasetSplit& dataset) {
  require(banks.empty(), ErrorKind::invalid_argument, "warmup_fill: banks not empty");
  dataset.validate();
  for (std::size_t k = 0; k < banks.capacity(); ++k) {
    const std::size_t i = k % dataset.size();
    const Vector z = encoder_p.encode(dataset.inputs.row_vector(i));
    banks.enqueue_pair(z, z, dataset.labels[i]);
  }
}

/// Paired-feature variant: both sides receive the given pretrained features.
inline void warmup_fill_features(PairedBanks& banks, const Matrix& pretrained,
                                 const std::vector<int>& labels) {
  require(banks.empty(), ErrorKind::invalid_argument, "warmup_fill: banks not empty");
  require(pretrained.rows() >= 1, ErrorKind::invalid_argument,
          "warmup_fill: no features");
  require(labels.size() == pretrained.rows(), ErrorKind::dimension_mismatch,
          "warmup_fill: label count mismatch");
  for (std::size_t k = 0; k < banks.capacity(); ++k) {
    const std::size_t i = k % pretrained.rows();
    const Vector z = pretrained.row_vector(i);
    banks.enqueue_pair(z, z, labels[i]);
  }
}

inline void save_bank_csv(const std::string& path_pretrained,
                          const std::string& path_downstream,
                          const PairedBanks& banks) {
  save_features_csv(path_pretrained, banks.pretrained_matrix(), banks.labels());
  save_features_csv(path_downstream, banks.downstream_matrix(), banks.labels());
}

}  // namespace drtune
