#pragma once

#include "dfiv/core.hpp"

#include <cmath>
#include <optional>
#include <stdexcept>
#include <utility>

namespace dfiv {

/// Training knobs for the observable-confounder variant. The inner stage-1
/// loop either runs a fixed number of steps (inner_stage1) or iterates to an
/// approximate fixed point (max steps / relative-change tolerance).
struct ObsConfig : DfivConfig {
  bool run_to_convergence = false;
  int stage1_max_inner = 50;
  double stage1_rel_tol = 1e-4;
};

/// Row-major vectorization of the outer product: (a (x) b)[i*q + j] = a_i b_j.
inline Vec tensor_product(const Vec& a, const Vec& b) {
  if (a.size() == 0 || b.size() == 0)
    throw std::invalid_argument("tensor_product: empty factor");
  Vec out(a.size() * b.size());
  for (Index i = 0; i < a.size(); ++i)
    for (Index j = 0; j < b.size(); ++j) out[i * b.size() + j] = a[i] * b[j];
  return out;
}

/// Row-wise tensor product of two feature matrices with equal row counts.
inline Mat tensor_product_rows(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) throw std::invalid_argument("tensor_product_rows: row mismatch");
  Mat out(a.rows(), a.cols() * b.cols());
  for (Index r = 0; r < a.rows(); ++r)
    for (Index i = 0; i < a.cols(); ++i)
      for (Index j = 0; j < b.cols(); ++j) out(r, i * b.cols() + j) = a(r, i) * b(r, j);
  return out;
}

/// Stage 1 with observables is the plain stage-1 solve; the only change is
/// that the instrument features are computed on concatenated (z, o).
inline Stage1Sol stage1_solve_obs(const Mat& psi_feats, const Mat& phi_feats_zo, double lambda1) {
  return stage1_solve(psi_feats, phi_feats_zo, lambda1);
}

/// Stage-2 ridge over the tensor design whose i-th row is
/// (V phi(z_i, o_i)) (x) xi(o_i).
inline Vec stage2_solve_obs(const Stage1Sol& sol, const Mat& phi2_feats_zo, const Mat& xi2_feats,
                            const Vec& y, double lambda2) {
  if (phi2_feats_zo.rows() != y.size() || xi2_feats.rows() != y.size())
    throw std::invalid_argument("stage2_solve_obs: row mismatch");
  Mat projected = phi2_feats_zo * sol.V.transpose();
  Mat design = tensor_product_rows(projected, xi2_feats);
  return ridge_solve(design, y, lambda2, y.size());
}

namespace detail {

inline Mat concat_cols(const Mat& a, const Mat& b) {
  if (b.cols() == 0) return a;
  if (a.rows() != b.rows()) throw std::invalid_argument("concat_cols: row mismatch");
  Mat out(a.rows(), a.cols() + b.cols());
  out.leftCols(a.cols()) = a;
  out.rightCols(b.cols()) = b;
  return out;
}

inline Mat obs_or_empty(const std::optional<Mat>& o, Index rows) {
  return o ? *o : Mat(rows, 0);
}

}  // namespace detail

/// DFIV with an observable confounder: f(x, o) = u . (psi(x) (x) xi(o)),
/// instrument features on (z, o). Per outer iteration the instrument net is
/// trained on the stage-1 loss (fixed count or to convergence), then the
/// treatment net and the observable net each take one stage-2 step.
/// Full-batch by default. Passing no xi map fixes xi(o) = [1], which
/// reduces the estimator to plain DFIV.
inline StructuralModel train_dfiv_obs(const IvDataset& data, FeatureMap psi, FeatureMap phi,
                                      std::optional<FeatureMap> xi, const ObsConfig& cfg,
                                      FitReport* report = nullptr,
                                      std::ostream* jsonl = nullptr) {
  data.validate();
  cfg.validate();
  psi.validate();
  phi.validate();
  if (xi) xi->validate();

  const Index m = data.stage1_count();
  const Index n = data.stage2_count();
  // Algorithm-2 style training is full-batch unless batches are set.
  const Index mb = cfg.batch_m == 0 ? m : detail::resolve_batch(cfg.batch_m, m, "batch_m");
  const Index nb = cfg.batch_n == 0 ? n : detail::resolve_batch(cfg.batch_n, n, "batch_n");
  const bool ic = cfg.intercept;
  // The degenerate xi = [1] carries no intercept of its own.
  const bool xi_ic = ic && xi.has_value();

  Mat o1 = detail::obs_or_empty(data.stage1_o, m);
  Mat o2 = detail::obs_or_empty(data.stage2_o, n);
  if (xi && o2.cols() != xi->in_dim())
    throw std::invalid_argument("train_dfiv_obs: xi input dim mismatch");

  auto xi_feats = [&](const Mat& o) -> Mat {
    if (!xi) return Mat::Ones(o.rows(), 1);
    return with_intercept(forward(*xi, o), xi_ic);
  };

  RngStream batch_rng = RngStream(cfg.seed).fork(1);
  AdamState psi_state = AdamState::zeros_like(psi);
  AdamState phi_state = AdamState::zeros_like(phi);
  AdamState xi_state;
  if (xi) xi_state = AdamState::zeros_like(*xi);
  GradBuffer psi_grads = GradBuffer::zeros_like(psi);
  GradBuffer phi_grads = GradBuffer::zeros_like(phi);
  GradBuffer xi_grads;
  if (xi) xi_grads = GradBuffer::zeros_like(*xi);

  for (int iter = 0; iter < cfg.epochs; ++iter) {
    const auto idx1 = sample_indices(batch_rng, m, mb);
    const auto idx2 = sample_indices(batch_rng, n, nb);
    Mat x1b = detail::gather_rows(data.stage1_x, idx1);
    Mat zo1b = detail::concat_cols(detail::gather_rows(data.stage1_z, idx1),
                                   detail::gather_rows(o1, idx1));
    Vec y2b = detail::gather_rows(data.stage2_y, idx2);
    Mat zo2b = detail::concat_cols(detail::gather_rows(data.stage2_z, idx2),
                                   detail::gather_rows(o2, idx2));
    Mat o2b = detail::gather_rows(o2, idx2);

    IterRecord rec;
    rec.iter = iter;

    // Stage 1: theta_Z steps.
    Mat psi1 = with_intercept(forward(psi, x1b), ic);
    const int max_inner = cfg.run_to_convergence ? cfg.stage1_max_inner : cfg.inner_stage1;
    double prev_loss = std::numeric_limits<double>::infinity();
    for (int t = 0; t < max_inner; ++t) {
      ForwardTrace trace;
      Mat phi1 = with_intercept(forward(phi, zo1b, &trace), ic);
      Stage1Sol sol = stage1_solve(psi1, phi1, cfg.lambda1);
      Mat resid = phi1 * sol.V.transpose() - psi1;
      rec.stage1_loss = resid.squaredNorm() / static_cast<double>(mb) +
                        cfg.lambda1 * sol.V.squaredNorm();
      detail::check_divergence(rec.stage1_loss, iter, cfg.divergence_threshold);

      Mat up_phi1 = (2.0 / static_cast<double>(mb)) * resid * sol.V;
      phi_grads.set_zero();
      backward(phi, trace, drop_intercept_column(up_phi1, ic), phi_grads);
      adam_step(phi, phi_grads, phi_state, cfg.lr);

      if (cfg.run_to_convergence) {
        if (std::abs(prev_loss - rec.stage1_loss) <=
            cfg.stage1_rel_tol * std::max(1.0, std::abs(prev_loss)))
          break;
        prev_loss = rec.stage1_loss;
      }
    }

    // Shared stage-2 quantities at the updated theta_Z.
    Mat phi1 = with_intercept(forward(phi, zo1b), ic);
    Mat binv = detail::ridge_gram_inverse(phi1, cfg.lambda1);
    Mat k = phi1 * binv;
    Mat phi2 = with_intercept(forward(phi, zo2b), ic);

    auto stage2_pass = [&](ForwardTrace* psi_trace, ForwardTrace* xi_trace, Mat& g_feats,
                           Mat& xi2, Vec& uhat, Vec& resid) {
      Mat psi1b = with_intercept(forward(psi, x1b, psi_trace), ic);
      Mat vhat = psi1b.transpose() * k;
      g_feats = phi2 * vhat.transpose();
      if (xi) {
        Mat raw = forward(*xi, o2b, xi_trace);
        xi2 = with_intercept(raw, xi_ic);
      } else {
        xi2 = Mat::Ones(nb, 1);
      }
      Mat design = tensor_product_rows(g_feats, xi2);
      uhat = ridge_solve(design, y2b, cfg.lambda2, nb);
      resid = design * uhat - y2b;
      rec.stage2_loss = resid.squaredNorm() / static_cast<double>(nb) +
                        cfg.lambda2 * uhat.squaredNorm();
      detail::check_divergence(rec.stage2_loss, iter, cfg.divergence_threshold);
    };

    {  // One theta_X step.
      ForwardTrace psi_trace;
      Mat g_feats, xi2;
      Vec uhat, resid;
      stage2_pass(&psi_trace, nullptr, g_feats, xi2, uhat, resid);
      Eigen::Map<const Mat> u_mat(uhat.data(), g_feats.cols(), xi2.cols());
      Mat up_g = (2.0 / static_cast<double>(nb)) * resid.asDiagonal() * (xi2 * u_mat.transpose());
      Mat g2 = up_g.transpose() * phi2;  // dL2/dVhat
      Mat up_psi1 = k * g2.transpose();
      psi_grads.set_zero();
      backward(psi, psi_trace, drop_intercept_column(up_psi1, ic), psi_grads);
      adam_step(psi, psi_grads, psi_state, cfg.lr);
    }

    if (xi) {  // One theta_O step.
      ForwardTrace xi_trace;
      Mat g_feats, xi2;
      Vec uhat, resid;
      stage2_pass(nullptr, &xi_trace, g_feats, xi2, uhat, resid);
      Eigen::Map<const Mat> u_mat(uhat.data(), g_feats.cols(), xi2.cols());
      Mat up_xi = (2.0 / static_cast<double>(nb)) * resid.asDiagonal() * (g_feats * u_mat);
      xi_grads.set_zero();
      backward(*xi, xi_trace, drop_intercept_column(up_xi, xi_ic), xi_grads);
      adam_step(*xi, xi_grads, xi_state, cfg.lr);
    }

    if (report) report->iters.push_back(rec);
    detail::append_iter_jsonl(jsonl, rec);
  }

  // Final weights from full-data solves at the trained parameters.
  Mat zo1 = detail::concat_cols(data.stage1_z, o1);
  Mat zo2 = detail::concat_cols(data.stage2_z, o2);
  Mat psi1 = with_intercept(forward(psi, data.stage1_x), ic);
  Mat phi1 = with_intercept(forward(phi, zo1), ic);
  Stage1Sol sol = stage1_solve(psi1, phi1, cfg.lambda1);
  Mat phi2 = with_intercept(forward(phi, zo2), ic);
  Mat xi2 = xi_feats(o2);
  Vec u = stage2_solve_obs(sol, phi2, xi2, data.stage2_y, cfg.lambda2);

  if (report) {
    report->v_full = sol.V;
    report->phi = net_features(phi, ic);
    report->final_stage1_loss = stage1_loss(psi1, phi1, sol, cfg.lambda1);
    Mat design = tensor_product_rows(phi2 * sol.V.transpose(), xi2);
    report->final_stage2_loss =
        (data.stage2_y - design * u).squaredNorm() / static_cast<double>(n) +
        cfg.lambda2 * u.squaredNorm();
  }

  StructuralModel model;
  model.u = std::move(u);
  model.psi = net_features(std::move(psi), ic);
  model.xi = xi ? net_features(std::move(*xi), xi_ic) : constant_one_features();
  return model;
}

}  // namespace dfiv
