#pragma once

#include "dfiv/linalg.hpp"
#include "dfiv/rng.hpp"

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace dfiv {

enum class Activation { Identity, Relu, Tanh, Cos };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::Relu: return "relu";
    case Activation::Tanh: return "tanh";
    case Activation::Cos: return "cos";
  }
  throw std::logic_error("activation_name: bad enum");
}

inline Activation activation_from_name(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  if (s == "cos") return Activation::Cos;
  throw std::invalid_argument("unknown activation: " + s);
}

struct Layer {
  Mat weight;  // out_dim x in_dim
  Vec bias;    // out_dim
  Activation act = Activation::Identity;
};

/// Fully connected feature map. Row i of forward() output is the feature
/// vector of input row i.
struct FeatureMap {
  std::vector<Layer> layers;

  Index in_dim() const { return layers.empty() ? 0 : layers.front().weight.cols(); }
  Index out_dim() const { return layers.empty() ? 0 : layers.back().weight.rows(); }

  Index param_count() const {
    Index n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  void validate() const {
    if (layers.empty()) throw std::invalid_argument("FeatureMap: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const auto& l = layers[i];
      if (l.weight.rows() != l.bias.size())
        throw std::invalid_argument("FeatureMap: weight/bias shape mismatch");
      if (i > 0 && l.weight.cols() != layers[i - 1].weight.rows())
        throw std::invalid_argument("FeatureMap: consecutive layer dims incompatible");
      if (!l.weight.allFinite() || !l.bias.allFinite())
        throw std::runtime_error("FeatureMap: non-finite parameters");
    }
  }
};

/// Per-layer gradients, shape-matched to a FeatureMap.
struct GradBuffer {
  std::vector<Mat> d_weight;
  std::vector<Vec> d_bias;

  static GradBuffer zeros_like(const FeatureMap& fm) {
    GradBuffer g;
    g.d_weight.reserve(fm.layers.size());
    g.d_bias.reserve(fm.layers.size());
    for (const auto& l : fm.layers) {
      g.d_weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
      g.d_bias.push_back(Vec::Zero(l.bias.size()));
    }
    return g;
  }

  void set_zero() {
    for (auto& w : d_weight) w.setZero();
    for (auto& b : d_bias) b.setZero();
  }

  bool all_finite() const {
    for (const auto& w : d_weight)
      if (!w.allFinite()) return false;
    for (const auto& b : d_bias)
      if (!b.allFinite()) return false;
    return true;
  }
};

namespace detail {

inline void apply_activation(Mat& m, Activation a) {
  switch (a) {
    case Activation::Identity: return;
    case Activation::Relu: m = m.cwiseMax(0.0); return;
    case Activation::Tanh: m = m.array().tanh().matrix(); return;
    case Activation::Cos: m = m.array().cos().matrix(); return;
  }
}

// Derivative of the activation, evaluated from the preactivation.
// Relu' at exactly 0 is defined as 0.
inline Mat activation_grad(const Mat& pre, Activation a) {
  switch (a) {
    case Activation::Identity: return Mat::Ones(pre.rows(), pre.cols());
    case Activation::Relu: return (pre.array() > 0.0).cast<double>().matrix();
    case Activation::Tanh: {
      Mat t = pre.array().tanh().matrix();
      return (1.0 - t.array().square()).matrix();
    }
    case Activation::Cos: return (-pre.array().sin()).matrix();
  }
  throw std::logic_error("activation_grad: bad enum");
}

}  // namespace detail

/// Cached per-layer preactivations and activations from a forward pass,
/// reused by backward() to avoid recomputation inside training loops.
struct ForwardTrace {
  std::vector<Mat> pre;   // one per layer
  std::vector<Mat> post;  // post[0] = inputs, post[l+1] = layer l output
};

inline Mat forward(const FeatureMap& fm, const Mat& inputs, ForwardTrace* trace = nullptr) {
  if (fm.layers.empty()) throw std::invalid_argument("forward: empty FeatureMap");
  if (inputs.cols() != fm.in_dim())
    throw std::invalid_argument("forward: input dim mismatch");
  if (trace) {
    trace->pre.clear();
    trace->post.clear();
    trace->post.push_back(inputs);
  }
  Mat h = inputs;
  for (const auto& l : fm.layers) {
    Mat z = h * l.weight.transpose();
    z.rowwise() += l.bias.transpose();
    if (trace) trace->pre.push_back(z);
    detail::apply_activation(z, l.act);
    if (trace) trace->post.push_back(z);
    h = std::move(z);
  }
  return h;
}

/// Accumulates d<upstream, forward(fm, inputs)>/d(params) into grads.
/// The caller owns zeroing; repeated calls add up, which is what the
/// training losses composed of several terms need.
inline void backward(const FeatureMap& fm, const ForwardTrace& trace, const Mat& upstream,
                     GradBuffer& grads) {
  const std::size_t L = fm.layers.size();
  if (trace.pre.size() != L || trace.post.size() != L + 1)
    throw std::invalid_argument("backward: trace does not match FeatureMap");
  if (upstream.rows() != trace.post.back().rows() || upstream.cols() != fm.out_dim())
    throw std::invalid_argument("backward: upstream shape mismatch");
  if (grads.d_weight.size() != L)
    throw std::invalid_argument("backward: grad buffer shape mismatch");

  Mat delta = upstream.cwiseProduct(detail::activation_grad(trace.pre[L - 1], fm.layers[L - 1].act));
  for (std::size_t l = L; l-- > 0;) {
    grads.d_weight[l] += delta.transpose() * trace.post[l];
    grads.d_bias[l] += delta.colwise().sum().transpose();
    if (l > 0)
      delta = (delta * fm.layers[l].weight)
                  .cwiseProduct(detail::activation_grad(trace.pre[l - 1], fm.layers[l - 1].act));
  }
}

inline GradBuffer backward(const FeatureMap& fm, const Mat& inputs, const Mat& upstream) {
  ForwardTrace trace;
  forward(fm, inputs, &trace);
  GradBuffer g = GradBuffer::zeros_like(fm);
  backward(fm, trace, upstream, g);
  return g;
}

struct AdamState {
  std::vector<Mat> m_weight, v_weight;
  std::vector<Vec> m_bias, v_bias;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState zeros_like(const FeatureMap& fm) {
    AdamState s;
    for (const auto& l : fm.layers) {
      s.m_weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
      s.v_weight.push_back(Mat::Zero(l.weight.rows(), l.weight.cols()));
      s.m_bias.push_back(Vec::Zero(l.bias.size()));
      s.v_bias.push_back(Vec::Zero(l.bias.size()));
    }
    return s;
  }
};

namespace detail {

template <typename T>
void adam_update_tensor(T& param, const T& grad, T& m, T& v, double lr, double b1, double b2,
                        double eps, std::int64_t t) {
  m = b1 * m + (1.0 - b1) * grad;
  v = b2 * v + (1.0 - b2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t));
  param -= (lr / c1) * m.cwiseQuotient(((v / c2).cwiseSqrt().array() + eps).matrix());
}

}  // namespace detail

/// One Adam step with bias correction. lr == 0 leaves parameters unchanged
/// (moments still advance).
inline void adam_step(FeatureMap& fm, const GradBuffer& grads, AdamState& state, double lr) {
  if (grads.d_weight.size() != fm.layers.size() || state.m_weight.size() != fm.layers.size())
    throw std::invalid_argument("adam_step: shape mismatch");
  if (!grads.all_finite()) throw std::runtime_error("adam_step: non-finite gradients");
  ++state.step;
  for (std::size_t l = 0; l < fm.layers.size(); ++l) {
    detail::adam_update_tensor(fm.layers[l].weight, grads.d_weight[l], state.m_weight[l],
                               state.v_weight[l], lr, state.beta1, state.beta2, state.eps,
                               state.step);
    detail::adam_update_tensor(fm.layers[l].bias, grads.d_bias[l], state.m_bias[l],
                               state.v_bias[l], lr, state.beta1, state.beta2, state.eps,
                               state.step);
  }
}

/// Glorot-uniform weights (biases zero), deterministic per stream.
inline FeatureMap init_params(const std::vector<Index>& layer_dims,
                              const std::vector<Activation>& activations, RngStream& rng) {
  if (layer_dims.size() < 2) throw std::invalid_argument("init_params: need >= 1 layer");
  if (activations.size() != layer_dims.size() - 1)
    throw std::invalid_argument("init_params: one activation per layer required");
  FeatureMap fm;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const Index fan_in = layer_dims[l];
    const Index fan_out = layer_dims[l + 1];
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Layer layer;
    layer.weight.resize(fan_out, fan_in);
    for (Index i = 0; i < fan_out; ++i)
      for (Index j = 0; j < fan_in; ++j) layer.weight(i, j) = rng.next_uniform(-limit, limit);
    layer.bias = Vec::Zero(fan_out);
    layer.act = activations[l];
    fm.layers.push_back(std::move(layer));
  }
  return fm;
}

// Flattened views, used by finite-difference checks and parameter snapshots.
inline Vec flatten_params(const FeatureMap& fm) {
  Vec out(fm.param_count());
  Index k = 0;
  for (const auto& l : fm.layers) {
    for (Index i = 0; i < l.weight.rows(); ++i)
      for (Index j = 0; j < l.weight.cols(); ++j) out[k++] = l.weight(i, j);
    for (Index i = 0; i < l.bias.size(); ++i) out[k++] = l.bias[i];
  }
  return out;
}

inline void set_params(FeatureMap& fm, const Vec& params) {
  if (params.size() != fm.param_count())
    throw std::invalid_argument("set_params: size mismatch");
  Index k = 0;
  for (auto& l : fm.layers) {
    for (Index i = 0; i < l.weight.rows(); ++i)
      for (Index j = 0; j < l.weight.cols(); ++j) l.weight(i, j) = params[k++];
    for (Index i = 0; i < l.bias.size(); ++i) l.bias[i] = params[k++];
  }
}

inline Vec flatten_grads(const GradBuffer& g) {
  Index n = 0;
  for (std::size_t l = 0; l < g.d_weight.size(); ++l)
    n += g.d_weight[l].size() + g.d_bias[l].size();
  Vec out(n);
  Index k = 0;
  for (std::size_t l = 0; l < g.d_weight.size(); ++l) {
    for (Index i = 0; i < g.d_weight[l].rows(); ++i)
      for (Index j = 0; j < g.d_weight[l].cols(); ++j) out[k++] = g.d_weight[l](i, j);
    for (Index i = 0; i < g.d_bias[l].size(); ++i) out[k++] = g.d_bias[l][i];
  }
  return out;
}

}  // namespace dfiv
