#include "dfiv/mlp.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

using namespace dfiv;

namespace {

Mat random_mat(RngStream& rng, Index r, Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.next_gaussian();
  return m;
}

// Central finite differences of loss(params) against the analytic gradient.
double max_relative_grad_error(FeatureMap fm, const Mat& inputs, const Mat& upstream_weights) {
  ForwardTrace trace;
  Mat out = forward(fm, inputs, &trace);
  GradBuffer grads = GradBuffer::zeros_like(fm);
  backward(fm, trace, upstream_weights, grads);
  Vec analytic = flatten_grads(grads);

  auto loss = [&](const Vec& p) {
    FeatureMap probe = fm;
    set_params(probe, p);
    return upstream_weights.cwiseProduct(forward(probe, inputs)).sum();
  };
  const double h = 1e-6;
  Vec base = flatten_params(fm);
  Vec fd(base.size());
  for (Index i = 0; i < base.size(); ++i) {
    Vec p = base;
    p[i] = base[i] + h;
    double up = loss(p);
    p[i] = base[i] - h;
    double down = loss(p);
    fd[i] = (up - down) / (2.0 * h);
  }
  return (analytic - fd).norm() / std::max(fd.norm(), 1e-12);
}

}  // namespace

TEST_CASE("forward with zero weights returns the bias on every row") {
  FeatureMap fm;
  Layer l;
  l.weight = Mat::Zero(3, 2);
  l.bias = Vec(3);
  l.bias << 1.5, -2.0, 0.25;
  l.act = Activation::Identity;
  fm.layers.push_back(l);

  Mat inputs = Mat::Ones(4, 2) * 13.0;
  Mat out = forward(fm, inputs);
  for (Index r = 0; r < 4; ++r) REQUIRE((out.row(r).transpose() - l.bias).norm() == 0.0);
}

TEST_CASE("forward single identity layer is the affine map") {
  RngStream rng(3);
  FeatureMap fm;
  Layer l;
  l.weight = random_mat(rng, 3, 2);
  l.bias = Vec::Ones(3) * 0.5;
  l.act = Activation::Identity;
  fm.layers.push_back(l);

  Mat inputs = random_mat(rng, 5, 2);
  Mat expected = inputs * l.weight.transpose();
  expected.rowwise() += l.bias.transpose();
  REQUIRE((forward(fm, inputs) - expected).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("relu layer with all-negative preactivations outputs zero") {
  FeatureMap fm;
  Layer l;
  l.weight = Mat::Identity(2, 2);
  l.bias = Vec::Constant(2, -100.0);
  l.act = Activation::Relu;
  fm.layers.push_back(l);
  Mat inputs = Mat::Ones(3, 2);
  REQUIRE(forward(fm, inputs).isZero(0.0));
}

TEST_CASE("forward rejects dimension mismatch") {
  RngStream rng(4);
  std::vector<Index> dims{3, 4};
  FeatureMap fm = init_params(dims, {Activation::Relu}, rng);
  REQUIRE_THROWS_AS(forward(fm, Mat(Mat::Ones(2, 5))), std::invalid_argument);
}

TEST_CASE("backward with zero upstream accumulates nothing") {
  RngStream rng(5);
  FeatureMap fm = init_params({2, 4, 3}, {Activation::Tanh, Activation::Identity}, rng);
  Mat inputs = random_mat(rng, 6, 2);
  GradBuffer g = backward(fm, inputs, Mat(Mat::Zero(6, 3)));
  REQUIRE(flatten_grads(g).isZero(0.0));
}

TEST_CASE("backward single linear layer matches the hand-derived gradient") {
  RngStream rng(6);
  FeatureMap fm;
  Layer l;
  l.weight = random_mat(rng, 3, 2);
  l.bias = Vec::Zero(3);
  l.act = Activation::Identity;
  fm.layers.push_back(l);

  Mat inputs = random_mat(rng, 5, 2);
  Mat upstream = random_mat(rng, 5, 3);
  GradBuffer g = backward(fm, inputs, upstream);
  Mat expected_w = upstream.transpose() * inputs;
  Vec expected_b = upstream.colwise().sum().transpose();
  REQUIRE((g.d_weight[0] - expected_w).cwiseAbs().maxCoeff() < 1e-14);
  REQUIRE((g.d_bias[0] - expected_b).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("gradients match finite differences on smooth nets") {
  RngStream rng(7);
  for (int rep = 0; rep < 5; ++rep) {
    FeatureMap fm = init_params({3, 5, 4, 2},
                                {Activation::Tanh, Activation::Tanh, Activation::Identity}, rng);
    Mat inputs = random_mat(rng, 8, 3);
    Mat upstream = random_mat(rng, 8, 2);
    REQUIRE(max_relative_grad_error(fm, inputs, upstream) < 1e-5);
  }
}

TEST_CASE("gradients match finite differences through cos layers") {
  RngStream rng(17);
  FeatureMap fm = init_params({2, 6, 3}, {Activation::Cos, Activation::Identity}, rng);
  Mat inputs = random_mat(rng, 7, 2);
  Mat upstream = random_mat(rng, 7, 3);
  REQUIRE(max_relative_grad_error(fm, inputs, upstream) < 1e-5);
}

TEST_CASE("relu gradients match finite differences away from the kink") {
  RngStream rng(8);
  FeatureMap fm = init_params({2, 5, 3}, {Activation::Relu, Activation::Identity}, rng);
  // Push preactivations well away from zero so the finite-difference probe
  // never crosses the kink.
  for (Index i = 0; i < fm.layers[0].bias.size(); ++i)
    fm.layers[0].bias[i] = (i % 2 == 0) ? 0.7 : -0.7;
  Mat inputs = random_mat(rng, 6, 2, 0.1);
  Mat upstream = random_mat(rng, 6, 3);
  REQUIRE(max_relative_grad_error(fm, inputs, upstream) < 1e-5);
}

TEST_CASE("forward is permutation-equivariant over rows") {
  RngStream rng(9);
  FeatureMap fm = init_params({3, 4, 2}, {Activation::Relu, Activation::Identity}, rng);
  Mat inputs = random_mat(rng, 10, 3);
  Mat out = forward(fm, inputs);

  std::vector<Index> perm{4, 0, 9, 2, 7, 1, 8, 3, 6, 5};
  Mat shuffled(10, 3), expected(10, 2);
  for (Index i = 0; i < 10; ++i) {
    shuffled.row(i) = inputs.row(perm[static_cast<std::size_t>(i)]);
    expected.row(i) = out.row(perm[static_cast<std::size_t>(i)]);
  }
  REQUIRE((forward(fm, shuffled) - expected).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adam_step behavior") {
  RngStream rng(10);
  FeatureMap fm = init_params({1, 1}, {Activation::Identity}, rng);
  AdamState state = AdamState::zeros_like(fm);

  SECTION("zero gradient leaves parameters unchanged") {
    double before = fm.layers[0].weight(0, 0);
    adam_step(fm, GradBuffer::zeros_like(fm), state, 0.001);
    REQUIRE(fm.layers[0].weight(0, 0) == before);
  }

  SECTION("first-step magnitude from the update rule") {
    GradBuffer g = GradBuffer::zeros_like(fm);
    g.d_weight[0](0, 0) = 1.0;
    double before = fm.layers[0].weight(0, 0);
    adam_step(fm, g, state, 0.001);
    double delta = before - fm.layers[0].weight(0, 0);
    REQUIRE(delta == Catch::Approx(0.001 / (1.0 + 1e-8)).epsilon(1e-12));
  }

  SECTION("parameters move opposite the gradient sign at t = 1") {
    FeatureMap net = init_params({2, 3, 2}, {Activation::Tanh, Activation::Identity}, rng);
    AdamState st = AdamState::zeros_like(net);
    GradBuffer g = GradBuffer::zeros_like(net);
    RngStream gr(11);
    for (auto& w : g.d_weight)
      for (Index i = 0; i < w.rows(); ++i)
        for (Index j = 0; j < w.cols(); ++j) w(i, j) = gr.next_gaussian();
    for (auto& b : g.d_bias)
      for (Index i = 0; i < b.size(); ++i) b[i] = gr.next_gaussian();
    Vec before = flatten_params(net);
    adam_step(net, g, st, 0.01);
    Vec after = flatten_params(net);
    Vec grads = flatten_grads(g);
    for (Index i = 0; i < before.size(); ++i)
      if (grads[i] != 0.0) REQUIRE((after[i] - before[i]) * grads[i] < 0.0);
  }

  SECTION("lr = 0 is the identity on parameters") {
    GradBuffer g = GradBuffer::zeros_like(fm);
    g.d_weight[0](0, 0) = 3.0;
    Vec before = flatten_params(fm);
    adam_step(fm, g, state, 0.0);
    REQUIRE((flatten_params(fm) - before).isZero(0.0));
  }

  SECTION("non-finite gradients are rejected") {
    GradBuffer g = GradBuffer::zeros_like(fm);
    g.d_weight[0](0, 0) = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(adam_step(fm, g, state, 0.001), std::runtime_error);
  }
}

TEST_CASE("init_params determinism, zero biases, and weight variance") {
  RngStream r1(12), r2(12);
  FeatureMap a = init_params({4, 8, 2}, {Activation::Relu, Activation::Identity}, r1);
  FeatureMap b = init_params({4, 8, 2}, {Activation::Relu, Activation::Identity}, r2);
  REQUIRE((flatten_params(a) - flatten_params(b)).isZero(0.0));
  for (const auto& l : a.layers) REQUIRE(l.bias.isZero(0.0));

  RngStream r3(13);
  FeatureMap big = init_params({256, 256}, {Activation::Identity}, r3);
  const Mat& w = big.layers[0].weight;
  double var = (w.array() - w.mean()).square().sum() / static_cast<double>(w.size() - 1);
  double expected = (6.0 / 512.0) / 3.0;  // uniform(-a, a) variance a^2 / 3
  REQUIRE(var > 0.8 * expected);
  REQUIRE(var < 1.2 * expected);

  REQUIRE_THROWS_AS(init_params({3}, {}, r3), std::invalid_argument);
}
