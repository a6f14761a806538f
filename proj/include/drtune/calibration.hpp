#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "drtune/error.hpp"
#include "drtune/feature_bank.hpp"
#include "drtune/io.hpp"
#include "drtune/linalg.hpp"
#include "drtune/model.hpp"

namespace drtune {

/// Ablation switches for the calibration stages: global rotation (GR),
/// class-level translation (CLT) and confidence-guided averaging (CGA).
struct CalibrationSwitches {
  bool use_global_rotation = true;
  bool use_class_translation = true;
  bool use_confidence_average = true;

  void validate() const {
    require(!use_confidence_average || use_class_translation, ErrorKind::config,
            "calibration: CGA requires class translations");
  }

  static CalibrationSwitches from_tag(const std::string& tag) {
    if (tag == "none") return {false, false, false};
    if (tag == "gr") return {true, false, false};
    if (tag == "clt") return {false, true, false};
    if (tag == "clt+cga") return {false, true, true};
    if (tag == "full") return {true, true, true};
    throw Error(ErrorKind::config, "unknown ablation tag '" + tag +
                                       "' (expected none|gr|clt|clt+cga|full)");
  }

  std::string tag() const {
    if (use_global_rotation && use_class_translation && use_confidence_average)
      return "full";
    if (use_global_rotation && !use_class_translation) return "gr";
    if (!use_global_rotation && use_class_translation)
      return use_confidence_average ? "clt+cga" : "clt";
    return "none";
  }
};

/// The estimated alignment: an orthogonal map plus one translation per class.
/// Absent classes keep the zero translation.
struct CalibrationTransform {
  Matrix rotation;
  std::vector<Vector> translations;
  std::vector<bool> class_present;

  std::size_t dim() const { return rotation.rows(); }
  std::size_t num_classes() const { return translations.size(); }

  void validate() const {
    require(orthogonality_error(rotation) < 1e-6, ErrorKind::invalid_argument,
            "transform: rotation is not orthogonal");
    require(translations.size() == class_present.size(), ErrorKind::dimension_mismatch,
            "transform: present flags do not match translations");
    for (std::size_t c = 0; c < translations.size(); ++c) {
      require(translations[c].size() == dim(), ErrorKind::dimension_mismatch,
              "transform: translation dim mismatch");
      if (!class_present[c])
        require(norm(translations[c]) == 0.0, ErrorKind::invalid_argument,
                "transform: absent class has nonzero translation");
    }
  }
};

/// Orthogonal map minimizing sum_k ||R v^p_k - v^d_k||^2: the polar factor of
/// the uncentered cross-covariance H = sum_k v^d_k (v^p_k)^T, via SVD.
inline Matrix estimate_rotation(const PairedBanks& banks) {
  require(!banks.empty(), ErrorKind::invalid_argument, "estimate_rotation: empty banks");
  const std::size_t d = banks.dim();
  Matrix h(d, d);
  for (std::size_t k = 0; k < banks.size(); ++k) {
    const auto& vp = banks.pretrained()[k].feature;
    const auto& vd = banks.downstream()[k].feature;
    for (std::size_t i = 0; i < d; ++i) {
      const double vdi = vd[i];
      if (vdi == 0.0) continue;
      auto row = h.row(i);
      for (std::size_t j = 0; j < d; ++j) row[j] += vdi * vp[j];
    }
  }
  const SvdResult f = svd(h);
  return matmul(f.u, f.vt);
}

struct ClassCenters {
  std::vector<Vector> centers;
  std::vector<bool> present;
};

/// Rotated pretrained class centers: mu^p_c = mean over class c of R v^p_k.
inline ClassCenters pretrained_class_centers(const PairedBanks& banks,
                                             const Matrix& rotation, int num_classes) {
  require(rotation.rows() == rotation.cols() && rotation.rows() == banks.dim(),
          ErrorKind::dimension_mismatch, "class centers: rotation dim mismatch");
  const auto counts = banks.class_counts(num_classes);
  const std::size_t d = banks.dim();
  std::vector<Vector> sums(static_cast<std::size_t>(num_classes), Vector(d, 0.0));
  for (const auto& e : banks.pretrained()) {
    auto& s = sums[static_cast<std::size_t>(e.label)];
    for (std::size_t j = 0; j < d; ++j) s[j] += e.feature[j];
  }
  ClassCenters out;
  out.present.resize(static_cast<std::size_t>(num_classes));
  out.centers.resize(static_cast<std::size_t>(num_classes), Vector(d, 0.0));
  for (std::size_t c = 0; c < counts.size(); ++c) {
    out.present[c] = counts[c] > 0;
    if (!out.present[c]) continue;
    out.centers[c] = matvec(rotation, scaled(sums[c], 1.0 / static_cast<double>(counts[c])));
  }
  return out;
}

/// Per-entry confidence weights alpha_k: a softmax over own-label logits
/// within each class of the downstream bank. Class sums are exactly 1.
inline Vector confidence_weights(const PairedBanks& banks, const LinearHead& head) {
  require(!banks.empty(), ErrorKind::invalid_argument, "confidence_weights: empty banks");
  require(head.feature_dim() == banks.dim(), ErrorKind::dimension_mismatch,
          "confidence_weights: head dim mismatch");
  const std::size_t n = banks.size();
  Vector own_logit(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto& e = banks.downstream()[k];
    require(e.label >= 0 && static_cast<std::size_t>(e.label) < head.num_classes(),
            ErrorKind::invalid_argument, "confidence_weights: label out of range");
    own_logit[k] = dot(head.prototypes().row(static_cast<std::size_t>(e.label)),
                       std::span<const double>(e.feature));
  }
  // per-class max shift, value-identical and overflow-safe
  const std::size_t c_count = head.num_classes();
  Vector class_max(c_count, -std::numeric_limits<double>::infinity());
  for (std::size_t k = 0; k < n; ++k) {
    auto& m = class_max[static_cast<std::size_t>(banks.downstream()[k].label)];
    m = std::max(m, own_logit[k]);
  }
  Vector class_sum(c_count, 0.0);
  Vector weights(n);
  for (std::size_t k = 0; k < n; ++k) {
    const auto c = static_cast<std::size_t>(banks.downstream()[k].label);
    weights[k] = std::exp(own_logit[k] - class_max[c]);
    class_sum[c] += weights[k];
  }
  for (std::size_t k = 0; k < n; ++k) {
    const auto c = static_cast<std::size_t>(banks.downstream()[k].label);
    weights[k] /= class_sum[c];
  }
  return weights;
}

/// Downstream class centers, either confidence-weighted (CGA) or plain means.
inline ClassCenters downstream_class_centers(const PairedBanks& banks,
                                             const LinearHead& head, bool use_cga) {
  const int num_classes = static_cast<int>(head.num_classes());
  const auto counts = banks.class_counts(num_classes);
  const std::size_t d = banks.dim();
  ClassCenters out;
  out.present.resize(static_cast<std::size_t>(num_classes));
  out.centers.resize(static_cast<std::size_t>(num_classes), Vector(d, 0.0));
  for (std::size_t c = 0; c < counts.size(); ++c) out.present[c] = counts[c] > 0;

  Vector weights;
  if (use_cga) {
    weights = confidence_weights(banks, head);
  } else {
    weights.resize(banks.size());
    for (std::size_t k = 0; k < banks.size(); ++k) {
      const auto c = static_cast<std::size_t>(banks.downstream()[k].label);
      weights[k] = 1.0 / static_cast<double>(counts[c]);
    }
  }
  for (std::size_t k = 0; k < banks.size(); ++k) {
    const auto& e = banks.downstream()[k];
    auto& center = out.centers[static_cast<std::size_t>(e.label)];
    for (std::size_t j = 0; j < d; ++j) center[j] += weights[k] * e.feature[j];
  }
  return out;
}

/// delta_c = mu^d_c - mu^p_c for classes present on both sides, zero otherwise.
inline std::vector<Vector> class_translations(const ClassCenters& pretrained,
                                              const ClassCenters& downstream) {
  require(pretrained.centers.size() == downstream.centers.size(),
          ErrorKind::dimension_mismatch, "class_translations: class count mismatch");
  std::vector<Vector> deltas(pretrained.centers.size());
  for (std::size_t c = 0; c < deltas.size(); ++c) {
    if (pretrained.present[c] && downstream.present[c]) {
      deltas[c] = sub(downstream.centers[c], pretrained.centers[c]);
    } else {
      deltas[c] = Vector(pretrained.centers[c].size(), 0.0);
    }
  }
  return deltas;
}

/// Full calibration estimate on the current bank snapshot; switches select
/// which stages run (identity rotation / zero translations otherwise).
inline CalibrationTransform build_transform(const PairedBanks& banks,
                                            const LinearHead& head,
                                            const CalibrationSwitches& switches) {
  require(!banks.empty(), ErrorKind::invalid_argument, "build_transform: empty banks");
  switches.validate();
  const int num_classes = static_cast<int>(head.num_classes());
  CalibrationTransform t;
  t.rotation = switches.use_global_rotation ? estimate_rotation(banks)
                                            : Matrix::identity(banks.dim());
  const auto counts = banks.class_counts(num_classes);
  t.class_present.resize(static_cast<std::size_t>(num_classes));
  for (std::size_t c = 0; c < counts.size(); ++c) t.class_present[c] = counts[c] > 0;
  if (switches.use_class_translation) {
    const ClassCenters mu_p = pretrained_class_centers(banks, t.rotation, num_classes);
    const ClassCenters mu_d =
        downstream_class_centers(banks, head, switches.use_confidence_average);
    t.translations = class_translations(mu_p, mu_d);
  } else {
    t.translations.assign(static_cast<std::size_t>(num_classes),
                          Vector(banks.dim(), 0.0));
  }
  return t;
}

/// v_hat = R * v_p + delta_label.
inline Vector apply_calibration(const CalibrationTransform& t, const Vector& vp,
                                int label) {
  require(vp.size() == t.dim(), ErrorKind::dimension_mismatch,
          "apply_calibration: feature dim mismatch");
  require(label >= 0 && static_cast<std::size_t>(label) < t.num_classes(),
          ErrorKind::invalid_argument,
          "apply_calibration: label " + std::to_string(label) + " out of range");
  Vector out = matvec(t.rotation, vp);
  const auto& delta = t.translations[static_cast<std::size_t>(label)];
  for (std::size_t j = 0; j < out.size(); ++j) out[j] += delta[j];
  return out;
}

/// Calibrates every pretrained bank entry; rows align with bank order.
inline Matrix calibrate_bank(const CalibrationTransform& t, const PairedBanks& banks) {
  require(!banks.empty(), ErrorKind::invalid_argument, "calibrate_bank: empty banks");
  Matrix out(banks.size(), banks.dim());
  for (std::size_t k = 0; k < banks.size(); ++k) {
    const auto& e = banks.pretrained()[k];
    const Vector v = apply_calibration(t, e.feature, e.label);
    std::copy(v.begin(), v.end(), out.row(k).begin());
  }
  return out;
}

/// Squared maximum mean discrepancy with an RBF kernel, unbiased estimator;
/// bandwidth is the median pairwise distance over the pooled samples. For
/// equally sized sets the paired form is used, which is exactly zero for
/// identical, index-aligned sets. Small negative values are possible; callers
/// clamp for display and keep raw values in logs.
inline double mmd(const Matrix& a, const Matrix& b) {
  require(a.rows() >= 1 && b.rows() >= 1, ErrorKind::invalid_argument,
          "mmd: empty sample set");
  require(a.cols() == b.cols(), ErrorKind::dimension_mismatch,
          "mmd: feature dims differ");
  const std::size_t m = a.rows();
  const std::size_t n = b.rows();
  require(m + n >= 3, ErrorKind::invalid_argument,
          "mmd: need at least 3 pooled samples for the unbiased estimator");

  // median heuristic over the pooled set
  std::vector<double> sq;
  sq.reserve((m + n) * (m + n - 1) / 2);
  auto pooled_row = [&](std::size_t i) {
    return i < m ? a.row(i) : b.row(i - m);
  };
  for (std::size_t i = 0; i + 1 < m + n; ++i)
    for (std::size_t j = i + 1; j < m + n; ++j)
      sq.push_back(squared_distance(pooled_row(i), pooled_row(j)));
  std::nth_element(sq.begin(), sq.begin() + sq.size() / 2, sq.end());
  double sigma2 = sq[sq.size() / 2];
  if (sigma2 <= 0.0) sigma2 = 1.0;  // degenerate pooled set; kernel value moot
  const double gamma = 1.0 / (2.0 * sigma2);

  auto kernel = [&](std::span<const double> x, std::span<const double> y) {
    return std::exp(-gamma * squared_distance(x, y));
  };

  if (m == n) {
    // paired unbiased statistic: sum_{i != j} h(i, j) / (m (m-1))
    double acc = 0.0;
    for (std::size_t i = 0; i + 1 < m; ++i) {
      for (std::size_t j = i + 1; j < m; ++j) {
        acc += kernel(a.row(i), a.row(j)) + kernel(b.row(i), b.row(j)) -
               kernel(a.row(i), b.row(j)) - kernel(a.row(j), b.row(i));
      }
    }
    return 2.0 * acc / (static_cast<double>(m) * static_cast<double>(m - 1));
  }

  require(m >= 2 && n >= 2, ErrorKind::invalid_argument,
          "mmd: unequal sets each need at least 2 samples");
  double kaa = 0.0, kbb = 0.0, kab = 0.0;
  for (std::size_t i = 0; i + 1 < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) kaa += kernel(a.row(i), a.row(j));
  for (std::size_t i = 0; i + 1 < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) kbb += kernel(b.row(i), b.row(j));
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) kab += kernel(a.row(i), b.row(j));
  return 2.0 * kaa / (static_cast<double>(m) * static_cast<double>(m - 1)) +
         2.0 * kbb / (static_cast<double>(n) * static_cast<double>(n - 1)) -
         2.0 * kab / (static_cast<double>(m) * static_cast<double>(n));
}

/// Snapshot layout: kind,index,present,v0..v{d-1} with kind in
/// {rotation, translation}; rotation rows carry present=1.
inline void save_transform_csv(const std::string& path, const CalibrationTransform& t) {
  std::ofstream out = open_output(path);
  for (std::size_t i = 0; i < t.rotation.rows(); ++i) {
    out << "rotation," << i << ",1";
    for (double x : t.rotation.row(i)) out << ',' << format_double(x);
    out << '\n';
  }
  for (std::size_t c = 0; c < t.num_classes(); ++c) {
    out << "translation," << c << ',' << (t.class_present[c] ? 1 : 0);
    for (double x : t.translations[c]) out << ',' << format_double(x);
    out << '\n';
  }
}

inline CalibrationTransform load_transform_csv(const std::string& path) {
  std::ifstream in = open_input(path);
  CalibrationTransform t;
  std::vector<Vector> rot_rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    const std::string where = path + ": row " + std::to_string(line_no);
    require(cells.size() >= 4, ErrorKind::parse, where + ": too few columns");
    Vector values;
    for (std::size_t j = 3; j < cells.size(); ++j)
      values.push_back(parse_double(cells[j], where + ", column " + std::to_string(j + 1)));
    if (cells[0] == "rotation") {
      rot_rows.push_back(std::move(values));
    } else if (cells[0] == "translation") {
      t.translations.push_back(std::move(values));
      t.class_present.push_back(parse_long(cells[2], where) != 0);
    } else {
      throw Error(ErrorKind::parse, where + ": unknown row kind '" + cells[0] + "'");
    }
  }
  require(!rot_rows.empty(), ErrorKind::parse, path + ": no rotation rows");
  t.rotation = Matrix::from_rows(rot_rows);
  t.validate();
  return t;
}

}  // namespace drtune
