#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "drtune/error.hpp"
#include "drtune/linalg.hpp"
#include "drtune/model.hpp"

namespace drtune {

/// Per-iteration loss breakdown; total = ce + lambda * dr holds exactly.
struct LossReport {
  double ce = 0.0;
  double dr = 0.0;
  double lambda = 0.0;
  double total = 0.0;
  double batch_accuracy = 0.0;
};

namespace detail {

// log(sum(exp(u))) with max shift; also fills softmax probabilities.
inline double log_sum_exp_softmax(std::span<const double> logits,
                                  std::span<double> probs) {
  double max_logit = logits[0];
  for (double u : logits) max_logit = std::max(max_logit, u);
  double sum = 0.0;
  for (std::size_t c = 0; c < logits.size(); ++c) {
    probs[c] = std::exp(logits[c] - max_logit);
    sum += probs[c];
  }
  for (auto& p : probs) p /= sum;
  return max_logit + std::log(sum);
}

inline std::size_t argmax(std::span<const double> xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[best]) best = i;
  return best;
}

// Mean negative log-softmax over rows; writes d(loss)/d(logits) rows.
// Returns {loss, accuracy}.
inline std::pair<double, double> softmax_ce(const LinearHead& head,
                                            const Matrix& features,
                                            std::span<const int> labels,
                                            Matrix& dlogits) {
  require(features.rows() >= 1, ErrorKind::invalid_argument, "ce: empty batch");
  require(labels.size() == features.rows(), ErrorKind::dimension_mismatch,
          "ce: label count mismatch");
  const std::size_t n = features.rows();
  const std::size_t c_count = head.num_classes();
  const Matrix logits = head.logits_batch(features);
  dlogits = Matrix(n, c_count);
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    require(y >= 0 && static_cast<std::size_t>(y) < c_count, ErrorKind::invalid_argument,
            "ce: label " + std::to_string(y) + " out of range");
    const auto u = logits.row(i);
    auto p = dlogits.row(i);
    const double lse = log_sum_exp_softmax(u, p);
    loss += (lse - u[static_cast<std::size_t>(y)]) * inv_n;
    if (argmax(u) == static_cast<std::size_t>(y)) ++correct;
    p[static_cast<std::size_t>(y)] -= 1.0;
    for (auto& g : p) g *= inv_n;
  }
  return {loss, static_cast<double>(correct) / static_cast<double>(n)};
}

}  // namespace detail

struct CeLossResult {
  double loss = 0.0;
  Matrix dlogits;  // batch x classes, includes the 1/B factor
  double accuracy = 0.0;
};

/// Task loss: mean cross-entropy of the head over downstream batch features.
inline CeLossResult ce_loss(const LinearHead& head, const Matrix& features,
                            std::span<const int> labels) {
  CeLossResult out;
  const auto [loss, acc] = detail::softmax_ce(head, features, labels, out.dlogits);
  out.loss = loss;
  out.accuracy = acc;
  return out;
}

struct DrLossResult {
  double loss = 0.0;
  Matrix d_prototypes;  // classes x dim; the only parameters DR touches
};

/// Distribution regularizer: mean cross-entropy of the head over the
/// (calibrated) bank features. Bank features are constants, so the gradient
/// stops at the prototypes — encoder parameters never see this term.
inline DrLossResult dr_loss(const LinearHead& head, const Matrix& bank_features,
                            std::span<const int> labels) {
  Matrix dlogits;
  DrLossResult out;
  const auto [loss, acc] = detail::softmax_ce(head, bank_features, labels, dlogits);
  (void)acc;
  out.loss = loss;
  out.d_prototypes = matmul(transpose(dlogits), bank_features);
  return out;
}

/// lambda = K/B; total = ce + lambda * dr.
inline LossReport combined_objective(double ce, double dr, std::size_t bank_size,
                                     std::size_t batch_size) {
  require(bank_size >= 1 && batch_size >= 1, ErrorKind::invalid_argument,
          "combined_objective: K and B must be >= 1");
  LossReport report;
  report.ce = ce;
  report.dr = dr;
  report.lambda = static_cast<double>(bank_size) / static_cast<double>(batch_size);
  report.total = ce + report.lambda * dr;
  return report;
}

struct L2spPenalty {
  double value = 0.0;
  std::vector<Matrix> d_weights;
  std::vector<Vector> d_biases;
};

/// beta * sum of squared parameter distances to the reference encoder, with
/// gradient 2*beta*(theta_d - theta_p). The head is left to plain weight
/// decay by the trainer.
inline L2spPenalty l2sp_penalty(const MlpEncoder& current, const MlpEncoder& reference,
                                double beta) {
  require(current.layers().size() == reference.layers().size(),
          ErrorKind::dimension_mismatch, "l2sp: layer count mismatch");
  L2spPenalty out;
  for (std::size_t l = 0; l < current.layers().size(); ++l) {
    const auto& cur = current.layers()[l];
    const auto& ref = reference.layers()[l];
    require(cur.weight.same_shape(ref.weight) && cur.bias.size() == ref.bias.size(),
            ErrorKind::dimension_mismatch,
            "l2sp: layer " + std::to_string(l) + " shape mismatch");
    Matrix dw(cur.weight.rows(), cur.weight.cols());
    for (std::size_t i = 0; i < dw.data().size(); ++i) {
      const double diff = cur.weight.data()[i] - ref.weight.data()[i];
      out.value += beta * diff * diff;
      dw.data()[i] = 2.0 * beta * diff;
    }
    Vector db(cur.bias.size());
    for (std::size_t i = 0; i < db.size(); ++i) {
      const double diff = cur.bias[i] - ref.bias[i];
      out.value += beta * diff * diff;
      db[i] = 2.0 * beta * diff;
    }
    out.d_weights.push_back(std::move(dw));
    out.d_biases.push_back(std::move(db));
  }
  return out;
}

}  // namespace drtune
