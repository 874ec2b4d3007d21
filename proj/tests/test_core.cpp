#include "dfiv/core.hpp"
#include "dfiv/datagen.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>

using namespace dfiv;

namespace {

Mat random_mat(RngStream& rng, Index r, Index c, double scale = 1.0) {
  Mat m(r, c);
  for (Index i = 0; i < r; ++i)
    for (Index j = 0; j < c; ++j) m(i, j) = scale * rng.next_gaussian();
  return m;
}

Mat scalar_mat(double v) {
  Mat m(1, 1);
  m << v;
  return m;
}

// Full-pipeline stage-1 loss as a function of the instrument-net
// parameters, for finite-difference checks.
double stage1_pipeline_loss(const FeatureMap& psi, const FeatureMap& phi, const Mat& x,
                            const Mat& z, double lambda1, bool intercept) {
  Mat psi1 = with_intercept(forward(psi, x), intercept);
  Mat phi1 = with_intercept(forward(phi, z), intercept);
  Stage1Sol sol = stage1_solve(psi1, phi1, lambda1);
  return stage1_loss(psi1, phi1, sol, lambda1);
}

double stage2_pipeline_loss(const FeatureMap& psi, const FeatureMap& phi, const Mat& x1,
                            const Mat& z1, const Vec& y2, const Mat& z2, double lambda1,
                            double lambda2, bool intercept) {
  Mat psi1 = with_intercept(forward(psi, x1), intercept);
  Mat phi1 = with_intercept(forward(phi, z1), intercept);
  Stage1Sol sol = stage1_solve(psi1, phi1, lambda1);
  Mat phi2 = with_intercept(forward(phi, z2), intercept);
  Vec u = stage2_solve(sol, phi2, y2, lambda2);
  return stage2_loss(sol, phi2, y2, u, lambda2);
}

}  // namespace

TEST_CASE("stage1_solve hand-derived scalar cases") {
  SECTION("lambda1 = 0") {
    Stage1Sol sol = stage1_solve(scalar_mat(3.0), scalar_mat(2.0), 0.0);
    REQUIRE(sol.V(0, 0) == Catch::Approx(1.5).margin(1e-12));
  }
  SECTION("two targets with ridge") {
    Mat psi(1, 2);
    psi << 1, 0;
    Stage1Sol sol = stage1_solve(psi, scalar_mat(2.0), 1.0);
    REQUIRE(sol.V.rows() == 2);
    REQUIRE(sol.V.cols() == 1);
    REQUIRE(sol.V(0, 0) == Catch::Approx(0.4).margin(1e-12));
    REQUIRE(sol.V(1, 0) == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("heavy regularization shrinks toward zero") {
    RngStream rng(1);
    Mat psi = random_mat(rng, 20, 3);
    Mat phi = random_mat(rng, 20, 4);
    Stage1Sol sol = stage1_solve(psi, phi, 1e9);
    REQUIRE(sol.V.norm() <= 1e-6 * (psi.transpose() * phi).norm());
  }
}

TEST_CASE("stage1_loss evaluates the displayed expression") {
  SECTION("exact fit at lambda1 = 0") {
    RngStream rng(2);
    Mat phi = random_mat(rng, 10, 3);
    Mat v = random_mat(rng, 2, 3);
    Mat psi = phi * v.transpose();
    REQUIRE(stage1_loss(psi, phi, Stage1Sol{v}, 0.0) == Catch::Approx(0.0).margin(1e-20));
  }
  SECTION("scalar residual") {
    REQUIRE(stage1_loss(scalar_mat(3.0), scalar_mat(2.0), Stage1Sol{scalar_mat(1.0)}, 0.0) ==
            Catch::Approx(1.0).margin(1e-12));
    REQUIRE(stage1_loss(scalar_mat(3.0), scalar_mat(2.0), Stage1Sol{scalar_mat(1.0)}, 0.5) ==
            Catch::Approx(1.5).margin(1e-12));
  }
}

TEST_CASE("stage2_solve hand-derived scalar cases") {
  Stage1Sol v{scalar_mat(1.0)};
  Vec y(1);
  y << 6;
  SECTION("lambda2 = 0") {
    Vec u = stage2_solve(v, scalar_mat(2.0), y, 0.0);
    REQUIRE(u[0] == Catch::Approx(3.0).margin(1e-12));
  }
  SECTION("lambda2 = 1") {
    Vec u = stage2_solve(v, scalar_mat(2.0), y, 1.0);
    REQUIRE(u[0] == Catch::Approx(2.4).margin(1e-12));
  }
  SECTION("zero targets give zero weights") {
    RngStream rng(3);
    Stage1Sol vv{random_mat(rng, 3, 2)};
    Mat phi2 = random_mat(rng, 8, 2);
    Vec u = stage2_solve(vv, phi2, Vec(Vec::Zero(8)), 0.3);
    REQUIRE(u.isZero(0.0));
  }
}

TEST_CASE("stage2_loss evaluates the displayed expression") {
  Stage1Sol v{scalar_mat(1.0)};
  Vec y(1);
  y << 6;
  SECTION("zero weights give mean squared target") {
    RngStream rng(4);
    Stage1Sol vv{random_mat(rng, 2, 3)};
    Mat phi2 = random_mat(rng, 5, 3);
    Vec targets = random_mat(rng, 5, 1).col(0);
    REQUIRE(stage2_loss(vv, phi2, targets, Vec(Vec::Zero(2)), 0.7) ==
            Catch::Approx(targets.squaredNorm() / 5.0).margin(1e-12));
  }
  SECTION("perfect fit from the stage-2 solve example") {
    Vec u(1);
    u << 3;
    REQUIRE(stage2_loss(v, scalar_mat(2.0), y, u, 0.0) == Catch::Approx(0.0).margin(1e-20));
  }
  SECTION("hand evaluation with ridge term") {
    Vec u(1);
    u << 2;
    REQUIRE(stage2_loss(v, scalar_mat(2.0), y, u, 1.0) == Catch::Approx(8.0).margin(1e-12));
  }
}

TEST_CASE("stage solutions are exact argmins under random perturbations") {
  RngStream rng(5);
  Mat psi = random_mat(rng, 25, 3);
  Mat phi = random_mat(rng, 25, 4);
  const double lambda1 = 0.05;
  Stage1Sol sol = stage1_solve(psi, phi, lambda1);
  const double base1 = stage1_loss(psi, phi, sol, lambda1);
  for (int k = 0; k < 100; ++k) {
    Mat dir = random_mat(rng, 3, 4);
    dir /= dir.norm();
    Stage1Sol perturbed{sol.V + 1e-3 * dir};
    REQUIRE(stage1_loss(psi, phi, perturbed, lambda1) >= base1);
  }

  Mat phi2 = random_mat(rng, 30, 4);
  Vec y = random_mat(rng, 30, 1).col(0);
  const double lambda2 = 0.1;
  Vec u = stage2_solve(sol, phi2, y, lambda2);
  const double base2 = stage2_loss(sol, phi2, y, u, lambda2);
  for (int k = 0; k < 100; ++k) {
    Vec dir = random_mat(rng, 3, 1).col(0);
    dir /= dir.norm();
    REQUIRE(stage2_loss(sol, phi2, y, Vec(u + 1e-3 * dir), lambda2) >= base2);
  }
}

TEST_CASE("stage-1 gradient vanishes at an exact fit") {
  // psi(x) = W x and phi = identity on the same inputs: the stage-1
  // regression fits exactly, so the loss sits at its minimum of zero.
  RngStream rng(6);
  FeatureMap psi;
  Layer pl;
  pl.weight = random_mat(rng, 2, 3);
  pl.bias = Vec::Zero(2);
  pl.act = Activation::Identity;
  psi.layers.push_back(pl);
  FeatureMap phi = identity_map(3);

  Mat x = random_mat(rng, 20, 3);
  GradBuffer g = grad_stage1_theta_z(psi, phi, x, x, 0.0, true);
  REQUIRE(flatten_grads(g).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("stage-1 gradient routes agree and match finite differences") {
  RngStream rng(7);
  for (int rep = 0; rep < 3; ++rep) {
    FeatureMap psi = init_params({2, 5, 3}, {Activation::Tanh, Activation::Identity}, rng);
    FeatureMap phi = init_params({2, 6, 4}, {Activation::Tanh, Activation::Identity}, rng);
    Mat x = random_mat(rng, 16, 2);
    Mat z = 0.5 * x + random_mat(rng, 16, 2, 0.5);
    const double lambda1 = 0.08;

    GradBuffer envelope = grad_stage1_theta_z(psi, phi, x, z, lambda1, true,
                                              Stage1GradRoute::Envelope);
    GradBuffer through = grad_stage1_theta_z(psi, phi, x, z, lambda1, true,
                                             Stage1GradRoute::ThroughSolve);
    Vec ge = flatten_grads(envelope);
    Vec gt = flatten_grads(through);
    REQUIRE((ge - gt).norm() / std::max(gt.norm(), 1e-12) < 1e-6);

    // finite differences through the whole pipeline (Vhat recomputed)
    Vec base = flatten_params(phi);
    Vec fd(base.size());
    const double h = 1e-6;
    for (Index i = 0; i < base.size(); ++i) {
      FeatureMap probe = phi;
      Vec p = base;
      p[i] = base[i] + h;
      set_params(probe, p);
      const double up = stage1_pipeline_loss(psi, probe, x, z, lambda1, true);
      p[i] = base[i] - h;
      set_params(probe, p);
      const double down = stage1_pipeline_loss(psi, probe, x, z, lambda1, true);
      fd[i] = (up - down) / (2.0 * h);
    }
    REQUIRE((ge - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-5);
  }
}

TEST_CASE("stage-2 gradient vanishes when targets are zero") {
  RngStream rng(8);
  FeatureMap psi = init_params({2, 4, 3}, {Activation::Tanh, Activation::Identity}, rng);
  FeatureMap phi = init_params({2, 4, 3}, {Activation::Tanh, Activation::Identity}, rng);
  Mat x1 = random_mat(rng, 12, 2);
  Mat z1 = random_mat(rng, 12, 2);
  Mat z2 = random_mat(rng, 10, 2);
  GradBuffer g = grad_stage2_theta_x(psi, phi, x1, z1, Vec(Vec::Zero(10)), z2, 0.1, 0.1, true);
  REQUIRE(flatten_grads(g).isZero(0.0));
}

TEST_CASE("stage-2 gradient matches a hand-derived linear case") {
  // psi(x) = w x + b (scalar), phi = identity, no intercept feature. With
  // A = z1^2 + z2^2 + 2 l1, Vhat = (z1 psi1 + z2 psi2) / A, design d =
  // ztilde Vhat, u = d y / (d^2 + l2):
  //   dL2/dw = 2 (d u - y) u ztilde (z1 x1 + z2 x2) / A
  //   dL2/db = 2 (d u - y) u ztilde (z1 + z2) / A
  const double w = 0.7, b = -0.2;
  const double x1 = 1.3, x2 = -0.4, z1 = 0.9, z2 = 1.7;
  const double ztilde = 1.1, y = 2.0, l1 = 0.05, l2 = 0.02;

  FeatureMap psi;
  Layer pl;
  pl.weight = scalar_mat(w);
  pl.bias = Vec::Constant(1, b);
  pl.act = Activation::Identity;
  psi.layers.push_back(pl);
  FeatureMap phi = identity_map(1);

  Mat xs(2, 1), zs(2, 1), z2s(1, 1);
  xs << x1, x2;
  zs << z1, z2;
  z2s << ztilde;
  Vec ys(1);
  ys << y;

  const double psi1 = w * x1 + b, psi2 = w * x2 + b;
  const double a = z1 * z1 + z2 * z2 + 2.0 * l1;
  const double vhat = (z1 * psi1 + z2 * psi2) / a;
  const double d = ztilde * vhat;
  const double u = d * y / (d * d + l2);
  const double dw = 2.0 * (d * u - y) * u * ztilde * (z1 * x1 + z2 * x2) / a;
  const double db = 2.0 * (d * u - y) * u * ztilde * (z1 + z2) / a;

  GradBuffer g = grad_stage2_theta_x(psi, phi, xs, zs, ys, z2s, l1, l2, false);
  REQUIRE(g.d_weight[0](0, 0) == Catch::Approx(dw).epsilon(1e-10));
  REQUIRE(g.d_bias[0][0] == Catch::Approx(db).epsilon(1e-10));
}

TEST_CASE("stage-2 gradient matches finite differences") {
  RngStream rng(9);
  for (int rep = 0; rep < 3; ++rep) {
    FeatureMap psi = init_params({3, 6, 4}, {Activation::Tanh, Activation::Identity}, rng);
    FeatureMap phi = init_params({2, 6, 5}, {Activation::Tanh, Activation::Identity}, rng);
    Mat x1 = random_mat(rng, 20, 3);
    Mat z1 = random_mat(rng, 20, 2);
    Mat z2 = random_mat(rng, 15, 2);
    Vec y2 = random_mat(rng, 15, 1).col(0);
    const double l1 = 0.05, l2 = 0.03;

    GradBuffer g = grad_stage2_theta_x(psi, phi, x1, z1, y2, z2, l1, l2, true);
    Vec analytic = flatten_grads(g);

    Vec base = flatten_params(psi);
    Vec fd(base.size());
    const double h = 1e-6;
    for (Index i = 0; i < base.size(); ++i) {
      FeatureMap probe = psi;
      Vec p = base;
      p[i] = base[i] + h;
      set_params(probe, p);
      const double up = stage2_pipeline_loss(probe, phi, x1, z1, y2, z2, l1, l2, true);
      p[i] = base[i] - h;
      set_params(probe, p);
      const double down = stage2_pipeline_loss(probe, phi, x1, z1, y2, z2, l1, l2, true);
      fd[i] = (up - down) / (2.0 * h);
    }
    REQUIRE((analytic - fd).norm() / std::max(fd.norm(), 1e-12) < 1e-5);
  }
}

TEST_CASE("predict basics") {
  SECTION("zero weights predict zero") {
    StructuralModel m;
    m.psi = identity_features(2, false);
    m.u = Vec::Zero(2);
    REQUIRE(predict(m, Mat(Mat::Ones(4, 2))).isZero(0.0));
  }
  SECTION("identity feature scalar linear model") {
    StructuralModel m;
    m.psi = identity_features(1, false);
    m.u = Vec::Constant(1, 2.0);
    Mat x(3, 1);
    x << 1, -2, 5;
    Vec pred = predict(m, x);
    REQUIRE(pred[0] == Catch::Approx(2.0));
    REQUIRE(pred[1] == Catch::Approx(-4.0));
    REQUIRE(pred[2] == Catch::Approx(10.0));
  }
  SECTION("composed map reproduces the stage-2 fitted value") {
    // u' Vhat phi(z) with u = 3, Vhat = 1, phi(z) = 2 gives 6.
    Stage1Sol v{scalar_mat(1.0)};
    Vec y(1);
    y << 6;
    Vec u = stage2_solve(v, scalar_mat(2.0), y, 0.0);
    Vec fitted = scalar_mat(2.0) * v.V.transpose() * u;
    REQUIRE(fitted[0] == Catch::Approx(6.0).margin(1e-12));
  }
}

TEST_CASE("train_dfiv with zero epochs reduces to fixed-feature 2SLS bit for bit") {
  RngStream rng(10);
  IvDataset data;
  data.stage1_x = random_mat(rng, 40, 2);
  data.stage1_z = random_mat(rng, 40, 2);
  data.stage2_z = random_mat(rng, 35, 2);
  data.stage2_y = random_mat(rng, 35, 1).col(0);

  FeatureMap psi_net = identity_map(2);
  FeatureMap phi_net = identity_map(2);
  DfivConfig cfg;
  cfg.epochs = 0;
  cfg.lambda1 = 0.2;
  cfg.lambda2 = 0.3;

  StructuralModel trained = train_dfiv(data, psi_net, phi_net, cfg);
  StructuralModel direct = fixed_feature_2sls(data, identity_features(2, true),
                                              identity_features(2, true), 0.2, 0.3);
  REQUIRE(trained.u.size() == direct.u.size());
  for (Index i = 0; i < trained.u.size(); ++i) REQUIRE(trained.u[i] == direct.u[i]);
}

TEST_CASE("train_dfiv is deterministic per seed") {
  RngStream rng(11);
  IvDataset data;
  data.stage1_x = random_mat(rng, 60, 2);
  data.stage1_z = random_mat(rng, 60, 2);
  data.stage2_z = random_mat(rng, 50, 2);
  data.stage2_y = random_mat(rng, 50, 1).col(0);

  DfivConfig cfg;
  cfg.epochs = 4;
  cfg.inner_stage1 = 3;
  cfg.batch_m = 32;
  cfg.batch_n = 32;
  cfg.seed = 123;

  RngStream i1(77), i2(77);
  FeatureMap psi1 = init_params({2, 4, 3}, {Activation::Relu, Activation::Identity}, i1);
  FeatureMap phi1 = init_params({2, 4, 3}, {Activation::Relu, Activation::Identity}, i1);
  FeatureMap psi2 = init_params({2, 4, 3}, {Activation::Relu, Activation::Identity}, i2);
  FeatureMap phi2 = init_params({2, 4, 3}, {Activation::Relu, Activation::Identity}, i2);

  StructuralModel a = train_dfiv(data, psi1, phi1, cfg);
  StructuralModel b = train_dfiv(data, psi2, phi2, cfg);
  REQUIRE((a.u - b.u).isZero(0.0));
  REQUIRE((flatten_params(a.psi.net) - flatten_params(b.psi.net)).isZero(0.0));
}

TEST_CASE("train_dfiv aborts on divergence") {
  RngStream rng(12);
  IvDataset data;
  data.stage1_x = random_mat(rng, 30, 2);
  data.stage1_z = random_mat(rng, 30, 2);
  data.stage2_z = random_mat(rng, 30, 2);
  data.stage2_y = random_mat(rng, 30, 1).col(0);

  FeatureMap psi = init_params({2, 8, 4}, {Activation::Relu, Activation::Relu}, rng);
  FeatureMap phi = init_params({2, 8, 4}, {Activation::Relu, Activation::Relu}, rng);
  DfivConfig cfg;
  cfg.epochs = 50;
  cfg.lr = 1e6;  // absurd step size to force blow-up
  REQUIRE_THROWS_AS(train_dfiv(data, psi, phi, cfg), DivergenceError);
}

TEST_CASE("fixed-feature 2SLS recovers the slope on the linear-Gaussian model") {
  LinearGaussianData lg = linear_gaussian_generate(2.0, 1.0, 0.8, 20000, 42);
  StructuralModel iv = fixed_feature_2sls(lg.iv(), identity_features(1, true),
                                          identity_features(1, true), 1e-6, 1e-6);
  // feature order is [x, 1], so u[0] is the slope
  REQUIRE(std::abs(iv.u[0] - 2.0) < 0.05);

  StructuralModel ols = naive_ridge(Mat(lg.x), lg.y, identity_features(1, true), 1e-6);
  // OLS bias is r / (a^2 + 1) = 0.4 for these settings
  REQUIRE(ols.u[0] - 2.0 > 0.3);
  REQUIRE(std::abs((ols.u[0] - 2.0) - 0.4) < 0.05);
}

TEST_CASE("degenerate instrument equal to treatment collapses to naive ridge") {
  RngStream rng(13);
  Vec x = random_mat(rng, 500, 1).col(0);
  Vec y = 1.5 * x.array() + 0.3;
  for (Index i = 0; i < y.size(); ++i) y[i] += 0.1 * rng.next_gaussian();

  IvDataset data;
  data.stage1_x = x;
  data.stage1_z = x;
  data.stage2_z = x;
  data.stage2_y = y;

  StructuralModel iv = fixed_feature_2sls(data, identity_features(1, true),
                                          identity_features(1, true), 0.0, 0.01);
  StructuralModel ridge = naive_ridge(Mat(x), y, identity_features(1, true), 0.01);
  Mat grid(9, 1);
  for (Index i = 0; i < 9; ++i) grid(i, 0) = -2.0 + 0.5 * static_cast<double>(i);
  REQUIRE((predict(iv, grid) - predict(ridge, grid)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("huge stage-2 regularization drives predictions to zero") {
  LinearGaussianData lg = linear_gaussian_generate(2.0, 1.0, 0.2, 2000, 7);
  StructuralModel m = fixed_feature_2sls(lg.iv(), identity_features(1, true),
                                         identity_features(1, true), 1e-6, 1e9);
  Mat grid(5, 1);
  grid << -2, -1, 0, 1, 2;
  REQUIRE(predict(m, grid).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("2SLS slope error shrinks as the sample grows") {
  const std::vector<Index> sizes{100, 1000, 10000};
  std::vector<double> median_errors;
  for (Index n : sizes) {
    std::vector<double> errors;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      LinearGaussianData lg = linear_gaussian_generate(2.0, 1.0, 0.8, n, seed);
      StructuralModel m = fixed_feature_2sls(lg.iv(), identity_features(1, true),
                                             identity_features(1, true), 1e-6, 1e-6);
      errors.push_back(std::abs(m.u[0] - 2.0));
    }
    std::sort(errors.begin(), errors.end());
    median_errors.push_back(0.5 * (errors[4] + errors[5]));
  }
  REQUIRE(median_errors[1] < median_errors[0]);
  REQUIRE(median_errors[2] < median_errors[1]);
}

TEST_CASE("stage-1 solve at d2 = 400 completes quickly") {
  RngStream rng(14);
  Mat psi = random_mat(rng, 2000, 32);
  Mat phi = random_mat(rng, 2000, 400);
  const auto start = std::chrono::steady_clock::now();
  Stage1Sol sol = stage1_solve(psi, phi, 0.1);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  REQUIRE(sol.V.rows() == 32);
  REQUIRE(secs < 2.0);
}

TEST_CASE("rff_map approximates the Gaussian kernel") {
  RngStream rng(15);
  const double bw = 0.8;

  SECTION("unit squared norm in expectation") {
    RngStream map_rng(16);
    FeatureMap rff = rff_map(3, 200, bw, map_rng);
    double total = 0.0;
    const int draws = 1000;
    Mat xs = random_mat(rng, draws, 3);
    Mat feats = forward(rff, xs);
    for (Index i = 0; i < draws; ++i) total += feats.row(i).squaredNorm();
    REQUIRE(std::abs(total / draws - 1.0) < 0.05);
  }

  SECTION("inner products approximate the kernel at D = 500") {
    RngStream map_rng(17);
    FeatureMap rff = rff_map(3, 500, bw, map_rng);
    for (int rep = 0; rep < 5; ++rep) {
      Vec a = random_mat(rng, 3, 1).col(0);
      Vec b = random_mat(rng, 3, 1).col(0);
      a /= a.norm();
      b /= b.norm();
      Mat pair(2, 3);
      pair.row(0) = a.transpose();
      pair.row(1) = b.transpose();
      Mat feats = forward(rff, pair);
      const double approx = feats.row(0).dot(feats.row(1));
      const double exact = std::exp(-(a - b).squaredNorm() / (2.0 * bw * bw));
      REQUIRE(std::abs(approx - exact) < 0.05);
    }
  }

  SECTION("deterministic per stream and input validation") {
    RngStream r1(18), r2(18);
    FeatureMap m1 = rff_map(2, 50, 1.0, r1);
    FeatureMap m2 = rff_map(2, 50, 1.0, r2);
    REQUIRE((flatten_params(m1) - flatten_params(m2)).isZero(0.0));
    RngStream r3(19);
    REQUIRE_THROWS_AS(rff_map(2, 51, 1.0, r3), std::invalid_argument);
    REQUIRE_THROWS_AS(rff_map(2, 50, 0.0, r3), std::invalid_argument);
  }
}

TEST_CASE("median_heuristic") {
  SECTION("two points") {
    Mat pts(2, 1);
    pts << 0, 3;
    REQUIRE(median_heuristic(pts) == Catch::Approx(3.0));
  }
  SECTION("three collinear points") {
    Mat pts(3, 1);
    pts << 0, 1, 3;
    REQUIRE(median_heuristic(pts) == Catch::Approx(2.0));
  }
  SECTION("homogeneous under scaling") {
    RngStream rng(20);
    Mat pts = random_mat(rng, 30, 2);
    const double base = median_heuristic(pts);
    REQUIRE(median_heuristic(Mat(2.5 * pts)) == Catch::Approx(2.5 * base).epsilon(1e-12));
  }
  SECTION("identical points rejected") {
    Mat pts = Mat::Ones(5, 2);
    REQUIRE_THROWS_AS(median_heuristic(pts), std::runtime_error);
  }
  SECTION("subsampling keeps the estimate close") {
    RngStream rng(21);
    Mat big = random_mat(rng, 4096, 2);
    Mat head = big.topRows(2000);
    REQUIRE(median_heuristic(big) ==
            Catch::Approx(median_heuristic(head)).epsilon(0.1));
  }
}
