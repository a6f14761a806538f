#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "drtune/error.hpp"
#include "drtune/io.hpp"
#include "drtune/linalg.hpp"

namespace drtune {

enum class Activation : std::uint8_t { relu = 0, tanh_fn = 1 };

inline double activate(Activation a, double x) {
  return a == Activation::relu ? (x > 0.0 ? x : 0.0) : std::tanh(x);
}

/// Derivative w.r.t. the pre-activation value.
inline double activate_grad(Activation a, double pre) {
  if (a == Activation::relu) return pre > 0.0 ? 1.0 : 0.0;
  const double t = std::tanh(pre);
  return 1.0 - t * t;
}

inline Activation activation_from_name(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh_fn;
  throw Error(ErrorKind::config, "unknown activation '" + name + "'");
}

inline std::string activation_name(Activation a) {
  return a == Activation::relu ? "relu" : "tanh";
}

struct DenseLayer {
  Matrix weight;  // out x in
  Vector bias;    // out
};

/// Feature encoder f_theta: a stack of affine layers, each followed by the
/// elementwise nonlinearity (the final layer included).
class MlpEncoder {
 public:
  MlpEncoder() = default;

  /// dims = {input, hidden..., output}; weights drawn U(+-1/sqrt(fan_in)).
  MlpEncoder(const std::vector<std::size_t>& dims, Activation act, std::mt19937_64& rng)
      : activation_(act) {
    require(dims.size() >= 2, ErrorKind::invalid_argument,
            "encoder: need at least input and output dims");
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
      const std::size_t fan_in = dims[l];
      const std::size_t fan_out = dims[l + 1];
      require(fan_in >= 1 && fan_out >= 1, ErrorKind::invalid_argument,
              "encoder: zero-width layer");
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      std::uniform_real_distribution<double> uni(-bound, bound);
      DenseLayer layer;
      layer.weight = Matrix(fan_out, fan_in);
      for (auto& w : layer.weight.data()) w = uni(rng);
      layer.bias.resize(fan_out);
      for (auto& b : layer.bias) b = uni(rng);
      layers_.push_back(std::move(layer));
    }
  }

  static MlpEncoder from_layers(std::vector<DenseLayer> layers, Activation act) {
    MlpEncoder enc;
    enc.layers_ = std::move(layers);
    enc.activation_ = act;
    enc.validate();
    return enc;
  }

  void validate() const {
    require(!layers_.empty(), ErrorKind::invalid_argument, "encoder: no layers");
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& layer = layers_[l];
      require(layer.bias.size() == layer.weight.rows(), ErrorKind::dimension_mismatch,
              "encoder: bias/weight mismatch in layer " + std::to_string(l));
      require(all_finite(layer.weight.data()) && all_finite(layer.bias),
              ErrorKind::invalid_argument, "encoder: non-finite parameter");
      if (l > 0)
        require(layer.weight.cols() == layers_[l - 1].weight.rows(),
                ErrorKind::dimension_mismatch,
                "encoder: layer " + std::to_string(l) + " not conformable");
    }
  }

  std::size_t input_dim() const { return layers_.front().weight.cols(); }
  std::size_t output_dim() const { return layers_.back().weight.rows(); }
  Activation activation() const { return activation_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& layers() { return layers_; }

  Vector encode(const Vector& x) const {
    require(x.size() == input_dim(), ErrorKind::dimension_mismatch,
            "encode: input dim " + std::to_string(x.size()) + ", expected " +
                std::to_string(input_dim()));
    Vector a = x;
    for (const auto& layer : layers_) {
      Vector s = matvec(layer.weight, a);
      for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = activate(activation_, s[i] + layer.bias[i]);
      a = std::move(s);
    }
    return a;
  }

  /// Rows of `xs` are samples; output rows are features.
  Matrix encode_batch(const Matrix& xs) const {
    Matrix out(xs.rows(), output_dim());
    for (std::size_t i = 0; i < xs.rows(); ++i) {
      const Vector z = encode(xs.row_vector(i));
      std::copy(z.begin(), z.end(), out.row(i).begin());
    }
    return out;
  }

 private:
  std::vector<DenseLayer> layers_;
  Activation activation_ = Activation::relu;
};

/// Classification head g_phi: one prototype row per class, logit_c = phi_c . z.
/// No bias term.
class LinearHead {
 public:
  LinearHead() = default;
  LinearHead(std::size_t num_classes, std::size_t feature_dim)
      : prototypes_(num_classes, feature_dim) {}

  /// Zero-mean uniform init scaled by 1/sqrt(d).
  static LinearHead random_init(std::size_t num_classes, std::size_t feature_dim,
                                std::mt19937_64& rng) {
    LinearHead head(num_classes, feature_dim);
    const double bound = 1.0 / std::sqrt(static_cast<double>(feature_dim));
    std::uniform_real_distribution<double> uni(-bound, bound);
    for (auto& w : head.prototypes_.data()) w = uni(rng);
    return head;
  }

  std::size_t num_classes() const { return prototypes_.rows(); }
  std::size_t feature_dim() const { return prototypes_.cols(); }
  const Matrix& prototypes() const { return prototypes_; }
  Matrix& prototypes() { return prototypes_; }

  Vector logits(const Vector& z) const {
    require(z.size() == feature_dim(), ErrorKind::dimension_mismatch,
            "logits: feature dim " + std::to_string(z.size()) + ", expected " +
                std::to_string(feature_dim()));
    return matvec(prototypes_, z);
  }

  /// Rows of `zs` are features; output is samples x classes.
  Matrix logits_batch(const Matrix& zs) const {
    require(zs.cols() == feature_dim(), ErrorKind::dimension_mismatch,
            "logits_batch: feature dim mismatch");
    return matmul(zs, transpose(prototypes_));
  }

 private:
  Matrix prototypes_;
};

/// Gradients mirroring MlpEncoder + LinearHead parameter shapes.
struct GradientSet {
  std::vector<Matrix> d_weights;
  std::vector<Vector> d_biases;
  Matrix d_prototypes;

  static GradientSet zeros_like(const MlpEncoder& enc, const LinearHead& head) {
    GradientSet g;
    for (const auto& layer : enc.layers()) {
      g.d_weights.emplace_back(layer.weight.rows(), layer.weight.cols());
      g.d_biases.emplace_back(layer.bias.size(), 0.0);
    }
    g.d_prototypes = Matrix(head.num_classes(), head.feature_dim());
    return g;
  }
};

/// Per-layer activations of one batch, kept for the backward pass.
struct ForwardCache {
  Matrix inputs;                // B x input_dim
  std::vector<Matrix> pre;      // per layer, B x out_l (pre-activation)
  std::vector<Matrix> post;     // per layer, B x out_l (after nonlinearity)
  Activation activation = Activation::relu;
};

inline ForwardCache forward_batch(const MlpEncoder& enc, const Matrix& inputs) {
  require(inputs.cols() == enc.input_dim(), ErrorKind::dimension_mismatch,
          "forward_batch: input dim mismatch");
  ForwardCache cache;
  cache.inputs = inputs;
  cache.activation = enc.activation();
  const Matrix* current = &cache.inputs;
  for (const auto& layer : enc.layers()) {
    Matrix pre = matmul(*current, transpose(layer.weight));
    for (std::size_t i = 0; i < pre.rows(); ++i) {
      auto row = pre.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += layer.bias[j];
    }
    Matrix post = pre;
    for (auto& x : post.data()) x = activate(enc.activation(), x);
    cache.pre.push_back(std::move(pre));
    cache.post.push_back(std::move(post));
    current = &cache.post.back();
  }
  return cache;
}

/// Analytic gradients of a scalar loss given d(loss)/d(logits) for the batch
/// that produced `cache`. Covers every trainable parameter: the downstream
/// encoder layers and the head prototypes.
inline GradientSet backward(const MlpEncoder& enc, const LinearHead& head,
                            const ForwardCache& cache, const Matrix& dlogits) {
  require(cache.post.size() == enc.layers().size(), ErrorKind::invalid_argument,
          "backward: cache does not match encoder depth");
  for (std::size_t l = 0; l < enc.layers().size(); ++l)
    require(cache.post[l].cols() == enc.layers()[l].weight.rows(),
            ErrorKind::invalid_argument, "backward: cache/encoder layer shape mismatch");
  require(cache.activation == enc.activation(), ErrorKind::invalid_argument,
          "backward: cache activation mismatch");
  require(dlogits.rows() == cache.inputs.rows(), ErrorKind::dimension_mismatch,
          "backward: dlogits batch size mismatch");
  require(dlogits.cols() == head.num_classes(), ErrorKind::dimension_mismatch,
          "backward: dlogits class count mismatch");
  require(head.feature_dim() == enc.output_dim(), ErrorKind::dimension_mismatch,
          "backward: head/encoder feature dim mismatch");

  GradientSet g = GradientSet::zeros_like(enc, head);
  const Matrix& features = cache.post.back();
  g.d_prototypes = matmul(transpose(dlogits), features);

  // d(loss)/d(features), then walk the layers backwards.
  Matrix da = matmul(dlogits, head.prototypes());
  for (std::size_t l = enc.layers().size(); l-- > 0;) {
    Matrix ds = da;  // B x out_l
    const Matrix& pre = cache.pre[l];
    for (std::size_t i = 0; i < ds.rows(); ++i) {
      auto drow = ds.row(i);
      const auto prow = pre.row(i);
      for (std::size_t j = 0; j < drow.size(); ++j)
        drow[j] *= activate_grad(cache.activation, prow[j]);
    }
    const Matrix& below = l == 0 ? cache.inputs : cache.post[l - 1];
    g.d_weights[l] = matmul(transpose(ds), below);
    for (std::size_t i = 0; i < ds.rows(); ++i) {
      const auto drow = ds.row(i);
      for (std::size_t j = 0; j < drow.size(); ++j) g.d_biases[l][j] += drow[j];
    }
    if (l > 0) da = matmul(ds, enc.layers()[l].weight);
  }
  return g;
}

/// One SGD-with-momentum update on a flat parameter block:
///   m <- momentum * m + (grad + weight_decay * param)
///   param <- param - lr * m
inline void sgd_update_span(std::span<double> param, std::span<const double> grad,
                            std::span<double> momentum_buf, double lr,
                            double weight_decay, double momentum) {
  require(param.size() == grad.size() && param.size() == momentum_buf.size(),
          ErrorKind::dimension_mismatch, "sgd: parameter/gradient shape mismatch");
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i] + weight_decay * param[i];
    momentum_buf[i] = momentum * momentum_buf[i] + g;
    param[i] -= lr * momentum_buf[i];
  }
}

struct SgdState {
  std::vector<Matrix> m_weights;
  std::vector<Vector> m_biases;
  Matrix m_prototypes;

  static SgdState zeros_like(const MlpEncoder& enc, const LinearHead& head) {
    SgdState s;
    for (const auto& layer : enc.layers()) {
      s.m_weights.emplace_back(layer.weight.rows(), layer.weight.cols());
      s.m_biases.emplace_back(layer.bias.size(), 0.0);
    }
    s.m_prototypes = Matrix(head.num_classes(), head.feature_dim());
    return s;
  }

  static SgdState zeros_like_head(const LinearHead& head) {
    SgdState s;
    s.m_prototypes = Matrix(head.num_classes(), head.feature_dim());
    return s;
  }
};

inline void sgd_step_head(LinearHead& head, const Matrix& d_prototypes, SgdState& state,
                          double lr, double weight_decay, double momentum) {
  require(d_prototypes.same_shape(head.prototypes()), ErrorKind::dimension_mismatch,
          "sgd: prototype gradient shape mismatch");
  sgd_update_span(head.prototypes().data(), d_prototypes.data(),
                  state.m_prototypes.data(), lr, weight_decay, momentum);
}

inline void sgd_step(MlpEncoder& enc, LinearHead& head, const GradientSet& grads,
                     SgdState& state, double lr_encoder, double lr_head,
                     double weight_decay_encoder, double weight_decay_head,
                     double momentum) {
  require(grads.d_weights.size() == enc.layers().size(), ErrorKind::dimension_mismatch,
          "sgd: gradient layer count mismatch");
  for (std::size_t l = 0; l < enc.layers().size(); ++l) {
    sgd_update_span(enc.layers()[l].weight.data(), grads.d_weights[l].data(),
                    state.m_weights[l].data(), lr_encoder, weight_decay_encoder,
                    momentum);
    sgd_update_span(enc.layers()[l].bias, grads.d_biases[l], state.m_biases[l],
                    lr_encoder, weight_decay_encoder, momentum);
  }
  sgd_step_head(head, grads.d_prototypes, state, lr_head, weight_decay_head, momentum);
}

// ---------------------------------------------------------------------------
// Checkpoints: flat binary, bit-exact round trip.
// Header: magic "DRTN", u32 version, u8 activation, u8 has_head, u32 layers
// (0 for a head-only file), u64 head classes, u64 head dim; per layer u64
// out, u64 in; then raw f64 blocks (row-major weights, bias per layer, then
// prototypes when a head is present).
// ---------------------------------------------------------------------------

struct Checkpoint {
  std::optional<MlpEncoder> encoder;
  std::optional<LinearHead> head;
};

namespace detail {

template <typename T>
void write_pod(std::ofstream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  require(in.good(), ErrorKind::parse, path + ": truncated checkpoint");
  return value;
}

inline void write_block(std::ofstream& out, std::span<const double> xs) {
  out.write(reinterpret_cast<const char*>(xs.data()),
            static_cast<std::streamsize>(xs.size() * sizeof(double)));
}

inline void read_block(std::ifstream& in, std::span<double> xs, const std::string& path) {
  in.read(reinterpret_cast<char*>(xs.data()),
          static_cast<std::streamsize>(xs.size() * sizeof(double)));
  require(in.good(), ErrorKind::parse, path + ": truncated checkpoint");
}

}  // namespace detail

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path& path, const MlpEncoder* enc,
                            const LinearHead* head) {
  require(enc != nullptr || head != nullptr, ErrorKind::invalid_argument,
          "checkpoint: nothing to save");
  if (enc && head)
    require(enc->output_dim() == head->feature_dim(), ErrorKind::dimension_mismatch,
            "checkpoint: encoder/head dims disagree");
  std::ofstream out = open_output(path);
  out.write("DRTN", 4);
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, static_cast<std::uint8_t>(enc ? enc->activation()
                                                       : Activation::relu));
  detail::write_pod(out, static_cast<std::uint8_t>(head != nullptr));
  detail::write_pod(out, static_cast<std::uint32_t>(enc ? enc->layers().size() : 0));
  detail::write_pod(out, static_cast<std::uint64_t>(head ? head->num_classes() : 0));
  detail::write_pod(out, static_cast<std::uint64_t>(head ? head->feature_dim() : 0));
  if (enc) {
    for (const auto& layer : enc->layers()) {
      detail::write_pod(out, static_cast<std::uint64_t>(layer.weight.rows()));
      detail::write_pod(out, static_cast<std::uint64_t>(layer.weight.cols()));
    }
    for (const auto& layer : enc->layers()) {
      detail::write_block(out, layer.weight.data());
      detail::write_block(out, layer.bias);
    }
  }
  if (head) detail::write_block(out, head->prototypes().data());
  require(out.good(), ErrorKind::io, "failed writing checkpoint: " + path.string());
}

inline void save_checkpoint(const std::filesystem::path& path, const MlpEncoder& enc,
                            const LinearHead* head = nullptr) {
  save_checkpoint(path, &enc, head);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in = open_input(path);
  const std::string p = path.string();
  char magic[4];
  in.read(magic, 4);
  require(in.good() && std::memcmp(magic, "DRTN", 4) == 0, ErrorKind::parse,
          p + ": not a drtune checkpoint");
  const auto version = detail::read_pod<std::uint32_t>(in, p);
  require(version == kCheckpointVersion, ErrorKind::parse,
          p + ": unsupported checkpoint version " + std::to_string(version));
  const auto act_raw = detail::read_pod<std::uint8_t>(in, p);
  require(act_raw <= 1, ErrorKind::parse, p + ": bad activation tag");
  const auto has_head = detail::read_pod<std::uint8_t>(in, p);
  const auto num_layers = detail::read_pod<std::uint32_t>(in, p);
  const auto num_classes = detail::read_pod<std::uint64_t>(in, p);
  const auto head_dim = detail::read_pod<std::uint64_t>(in, p);
  require(num_layers >= 1 || has_head, ErrorKind::parse, p + ": empty checkpoint");

  Checkpoint ckpt;
  if (num_layers >= 1) {
    std::vector<std::pair<std::uint64_t, std::uint64_t>> shapes(num_layers);
    for (auto& [rows, cols] : shapes) {
      rows = detail::read_pod<std::uint64_t>(in, p);
      cols = detail::read_pod<std::uint64_t>(in, p);
    }
    std::vector<DenseLayer> layers;
    for (const auto& [rows, cols] : shapes) {
      DenseLayer layer;
      layer.weight = Matrix(rows, cols);
      detail::read_block(in, layer.weight.data(), p);
      layer.bias.resize(rows);
      detail::read_block(in, layer.bias, p);
      layers.push_back(std::move(layer));
    }
    ckpt.encoder = MlpEncoder::from_layers(std::move(layers),
                                           static_cast<Activation>(act_raw));
  }
  if (has_head) {
    require(num_classes >= 1 && head_dim >= 1, ErrorKind::parse,
            p + ": bad head shape");
    if (ckpt.encoder)
      require(head_dim == ckpt.encoder->output_dim(), ErrorKind::parse,
              p + ": head dim does not match encoder output");
    LinearHead head(num_classes, head_dim);
    detail::read_block(in, head.prototypes().data(), p);
    ckpt.head = std::move(head);
  }
  return ckpt;
}

}  // namespace drtune
