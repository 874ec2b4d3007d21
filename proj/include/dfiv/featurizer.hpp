#pragma once

#include "dfiv/mlp.hpp"

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace dfiv {

inline Mat append_ones_column(const Mat& feats) {
  Mat out(feats.rows(), feats.cols() + 1);
  out.leftCols(feats.cols()) = feats;
  out.col(feats.cols()).setOnes();
  return out;
}

inline Mat with_intercept(const Mat& feats, bool enabled) {
  return enabled ? append_ones_column(feats) : feats;
}

/// Strip the gradient column belonging to the appended constant feature.
inline Mat drop_intercept_column(const Mat& upstream, bool enabled) {
  if (!enabled) return upstream;
  return upstream.leftCols(upstream.cols() - 1);
}

namespace detail {

// All exponent tuples over `vars` variables with total degree <= degree,
// graded lexicographic, constant term first.
inline std::vector<std::vector<int>> monomial_exponents(int vars, int degree) {
  std::vector<std::vector<int>> out;
  for (int total = 0; total <= degree; ++total) {
    // enumerate compositions of `total` into `vars` parts
    std::vector<int> e(static_cast<std::size_t>(vars), 0);
    if (vars == 0) {
      if (total == 0) out.push_back({});
      continue;
    }
    e[0] = total;
    while (true) {
      out.push_back(e);
      // next composition in colex order
      int i = 0;
      while (i < vars && e[static_cast<std::size_t>(i)] == 0) ++i;
      if (i >= vars - 1) break;
      int v = e[static_cast<std::size_t>(i)];
      e[static_cast<std::size_t>(i)] = 0;
      e[0] = v - 1;
      e[static_cast<std::size_t>(i) + 1] += 1;
    }
  }
  return out;
}

}  // namespace detail

/// Value-semantic feature transform used wherever a model stores "how to
/// turn raw inputs into features": a trained or fixed network, a monomial
/// basis, or a one-hot encoding over index pairs. An optional constant-1
/// column is appended after the transform.
struct Featurizer {
  enum class Kind { Net, Polynomial, OneHotPair };

  Kind kind = Kind::Net;
  FeatureMap net;                          // Kind::Net
  int poly_inputs = 0, poly_degree = 0;    // Kind::Polynomial
  Index onehot_first = 0, onehot_second = 0;  // Kind::OneHotPair, input rows are (i, j) index pairs
  bool intercept = false;

  Index in_dim() const {
    switch (kind) {
      case Kind::Net: return net.in_dim();
      case Kind::Polynomial: return poly_inputs;
      case Kind::OneHotPair: return 2;
    }
    throw std::logic_error("Featurizer::in_dim");
  }

  Index base_dim() const {
    switch (kind) {
      case Kind::Net: return net.out_dim();
      case Kind::Polynomial:
        return static_cast<Index>(detail::monomial_exponents(poly_inputs, poly_degree).size());
      case Kind::OneHotPair: return onehot_first * onehot_second;
    }
    throw std::logic_error("Featurizer::base_dim");
  }

  Index out_dim() const { return base_dim() + (intercept ? 1 : 0); }

  Mat operator()(const Mat& inputs) const {
    Mat feats;
    switch (kind) {
      case Kind::Net:
        feats = forward(net, inputs);
        break;
      case Kind::Polynomial: {
        if (inputs.cols() != poly_inputs)
          throw std::invalid_argument("Featurizer: polynomial input dim mismatch");
        auto exps = detail::monomial_exponents(poly_inputs, poly_degree);
        feats.resize(inputs.rows(), static_cast<Index>(exps.size()));
        for (Index r = 0; r < inputs.rows(); ++r) {
          for (std::size_t c = 0; c < exps.size(); ++c) {
            double v = 1.0;
            for (int k = 0; k < poly_inputs; ++k)
              for (int rep = 0; rep < exps[c][static_cast<std::size_t>(k)]; ++rep)
                v *= inputs(r, k);
            feats(r, static_cast<Index>(c)) = v;
          }
        }
        break;
      }
      case Kind::OneHotPair: {
        if (inputs.cols() != 2)
          throw std::invalid_argument("Featurizer: one-hot input must be (i, j) pairs");
        feats = Mat::Zero(inputs.rows(), onehot_first * onehot_second);
        for (Index r = 0; r < inputs.rows(); ++r) {
          auto i = static_cast<Index>(inputs(r, 0));
          auto j = static_cast<Index>(inputs(r, 1));
          if (i < 0 || i >= onehot_first || j < 0 || j >= onehot_second)
            throw std::invalid_argument("Featurizer: one-hot index out of range");
          feats(r, i * onehot_second + j) = 1.0;
        }
        break;
      }
    }
    return with_intercept(feats, intercept);
  }
};

inline Featurizer net_features(FeatureMap fm, bool intercept = false) {
  Featurizer f;
  f.kind = Featurizer::Kind::Net;
  f.net = std::move(fm);
  f.intercept = intercept;
  return f;
}

/// Identity map realized as a single linear layer, so fixed and learned
/// features flow through the same code paths.
inline FeatureMap identity_map(Index dim) {
  FeatureMap fm;
  Layer l;
  l.weight = Mat::Identity(dim, dim);
  l.bias = Vec::Zero(dim);
  l.act = Activation::Identity;
  fm.layers.push_back(std::move(l));
  return fm;
}

inline Featurizer identity_features(Index dim, bool intercept = false) {
  return net_features(identity_map(dim), intercept);
}

/// Monomial basis of total degree <= degree; the constant monomial is
/// included, so no extra intercept is needed.
inline Featurizer polynomial_features(int inputs, int degree) {
  Featurizer f;
  f.kind = Featurizer::Kind::Polynomial;
  f.poly_inputs = inputs;
  f.poly_degree = degree;
  return f;
}

/// Constant feature [1]; the degenerate observable map.
inline Featurizer constant_one_features() { return polynomial_features(0, 0); }

inline Featurizer onehot_pair_features(Index n_first, Index n_second) {
  Featurizer f;
  f.kind = Featurizer::Kind::OneHotPair;
  f.onehot_first = n_first;
  f.onehot_second = n_second;
  return f;
}

}  // namespace dfiv
