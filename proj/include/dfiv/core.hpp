#pragma once

#include "dfiv/featurizer.hpp"
#include "dfiv/linalg.hpp"
#include "dfiv/mlp.hpp"
#include "dfiv/rng.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace dfiv {

/// Two-sample IV data: stage 1 observes (x, z), stage 2 observes (y, z).
/// Observables o and held-out joint (x, y, z) triples are optional.
struct IvDataset {
  Mat stage1_x, stage1_z;
  Vec stage2_y;
  Mat stage2_z;
  std::optional<Mat> stage1_o, stage2_o;
  std::optional<Mat> joint_x;
  std::optional<Vec> joint_y;
  std::optional<Mat> joint_z;
  std::optional<Mat> joint_o;

  Index stage1_count() const { return stage1_x.rows(); }
  Index stage2_count() const { return stage2_y.size(); }
  bool has_joint() const { return joint_x && joint_y && joint_z; }

  void validate() const {
    if (stage1_x.rows() < 1 || stage2_y.size() < 1)
      throw std::invalid_argument("IvDataset: both stages need at least one row");
    if (stage1_x.rows() != stage1_z.rows())
      throw std::invalid_argument("IvDataset: stage-1 row mismatch");
    if (stage2_y.size() != stage2_z.rows())
      throw std::invalid_argument("IvDataset: stage-2 row mismatch");
    if (stage1_o && stage1_o->rows() != stage1_x.rows())
      throw std::invalid_argument("IvDataset: stage-1 observables row mismatch");
    if (stage2_o && stage2_o->rows() != stage2_z.rows())
      throw std::invalid_argument("IvDataset: stage-2 observables row mismatch");
    if (has_joint() && (joint_x->rows() != joint_y->size() || joint_x->rows() != joint_z->rows()))
      throw std::invalid_argument("IvDataset: joint triple row mismatch");
    require_finite(stage1_x, "stage1_x");
    require_finite(stage1_z, "stage1_z");
    require_finite(stage2_z, "stage2_z");
    if (!stage2_y.allFinite()) throw std::runtime_error("stage2_y: non-finite entries");
  }
};

struct DfivConfig {
  double lambda1 = 0.1;
  double lambda2 = 0.1;
  Index batch_m = 0;  // 0 = min(stage-1 size, 1000)
  Index batch_n = 0;  // 0 = min(stage-2 size, 1000)
  int inner_stage1 = 20;  // T1
  int inner_stage2 = 1;   // T2
  double lr = 1e-3;
  int epochs = 100;  // outer iterations
  std::uint64_t seed = 0;
  bool intercept = true;  // append constant-1 feature to psi and phi
  int early_stop_patience = 0;  // 0 = off; needs joint triples
  double divergence_threshold = 1e12;

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0) throw std::invalid_argument("DfivConfig: negative lambda");
    if (inner_stage1 < 1 || inner_stage2 < 1)
      throw std::invalid_argument("DfivConfig: inner update counts must be >= 1");
    if (lr <= 0) throw std::invalid_argument("DfivConfig: lr must be positive");
    if (epochs < 0) throw std::invalid_argument("DfivConfig: negative epochs");
    if (batch_m < 0 || batch_n < 0) throw std::invalid_argument("DfivConfig: negative batch size");
  }
};

/// Stage-1 coefficient matrix V (treatment feature dim x instrument
/// feature dim), the minimizer of the stage-1 ridge loss.
struct Stage1Sol {
  Mat V;
};

/// A fitted structural function f(x) = u . psi(x), or with observables
/// f(x, o) = u . (psi(x) (x) xi(o)) where (x) is the row-major tensor
/// product.
struct StructuralModel {
  Vec u;
  Featurizer psi;
  std::optional<Featurizer> xi;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int iteration, double loss)
      : std::runtime_error("training diverged at iteration " + std::to_string(iteration) +
                           " (loss " + std::to_string(loss) + ")"),
        iteration_(iteration) {}
  int iteration() const { return iteration_; }

 private:
  int iteration_ = 0;
};

// ---------------------------------------------------------------------------
// Stage solutions and losses
// ---------------------------------------------------------------------------

/// V = Psi^T Phi (Phi^T Phi + m lambda1 I)^{-1}: the closed-form minimizer
/// of (1/m) sum ||psi_i - V phi_i||^2 + lambda1 ||V||_F^2.
inline Stage1Sol stage1_solve(const Mat& psi_feats, const Mat& phi_feats, double lambda1) {
  if (psi_feats.rows() != phi_feats.rows())
    throw std::invalid_argument("stage1_solve: row count mismatch");
  Mat w = ridge_solve(phi_feats, psi_feats, lambda1, phi_feats.rows());
  return Stage1Sol{w.transpose()};
}

inline double stage1_loss(const Mat& psi_feats, const Mat& phi_feats, const Stage1Sol& sol,
                          double lambda1) {
  if (psi_feats.rows() != phi_feats.rows())
    throw std::invalid_argument("stage1_loss: row count mismatch");
  Mat resid = phi_feats * sol.V.transpose() - psi_feats;
  return resid.squaredNorm() / static_cast<double>(psi_feats.rows()) +
         lambda1 * sol.V.squaredNorm();
}

/// u = (V Phi2^T Phi2 V^T + n lambda2 I)^{-1} V Phi2^T y, computed as a
/// ridge solve over the projected design Phi2 V^T.
inline Vec stage2_solve(const Stage1Sol& sol, const Mat& phi2_feats, const Vec& y,
                        double lambda2) {
  if (phi2_feats.rows() != y.size())
    throw std::invalid_argument("stage2_solve: row count mismatch");
  Mat design = phi2_feats * sol.V.transpose();
  return ridge_solve(design, y, lambda2, y.size());
}

inline double stage2_loss(const Stage1Sol& sol, const Mat& phi2_feats, const Vec& y,
                          const Vec& u, double lambda2) {
  Vec fitted = phi2_feats * (sol.V.transpose() * u);
  return (y - fitted).squaredNorm() / static_cast<double>(y.size()) + lambda2 * u.squaredNorm();
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

namespace detail {

// Adjoint of Vhat = Psi1^T Phi1 B (with B = (Phi1^T Phi1 + m lambda1 I)^{-1})
// with respect to Phi1, for an upstream gradient G on Vhat. Uses the inverse
// rule d(A^{-1}) = -A^{-1} dA A^{-1}.
inline Mat vhat_phi1_adjoint(const Mat& psi1, const Mat& phi1, const Mat& vhat, const Mat& binv,
                             const Mat& g) {
  Mat gb = g * binv;                       // d1 x d2
  Mat m = vhat.transpose() * gb;           // d2 x d2
  return psi1 * gb - phi1 * (m + m.transpose());
}

// Adjoint of Vhat with respect to Psi1: Phi1 B G^T.
inline Mat vhat_psi1_adjoint(const Mat& phi1, const Mat& binv, const Mat& g) {
  return phi1 * (binv * g.transpose());
}

inline Mat ridge_gram_inverse(const Mat& phi1, double lambda1) {
  const Index d = phi1.cols();
  Mat a = phi1.transpose() * phi1;
  a += static_cast<double>(phi1.rows()) * lambda1 * Mat::Identity(d, d);
  return spd_solve(a, Mat(Mat::Identity(d, d)));
}

}  // namespace detail

enum class Stage1GradRoute {
  Envelope,      // hold Vhat fixed; exact because Vhat minimizes the loss
  ThroughSolve,  // differentiate Vhat(theta_Z) through the matrix inverse
};

/// Gradient of the stage-1 loss with respect to the instrument net
/// parameters, with V set to its closed-form minimizer. The two routes
/// agree (envelope theorem); both are kept so the agreement is testable.
inline GradBuffer grad_stage1_theta_z(const FeatureMap& psi, const FeatureMap& phi, const Mat& x,
                                      const Mat& z, double lambda1, bool intercept = true,
                                      Stage1GradRoute route = Stage1GradRoute::Envelope) {
  const auto m = static_cast<double>(x.rows());
  Mat psi1 = with_intercept(forward(psi, x), intercept);
  ForwardTrace trace;
  Mat phi1 = with_intercept(forward(phi, z, &trace), intercept);
  Stage1Sol sol = stage1_solve(psi1, phi1, lambda1);

  Mat resid = phi1 * sol.V.transpose() - psi1;  // m x d1
  Mat up_phi1 = (2.0 / m) * resid * sol.V;      // partial, V held fixed

  if (route == Stage1GradRoute::ThroughSolve) {
    Mat binv = detail::ridge_gram_inverse(phi1, lambda1);
    Mat g = (2.0 / m) * resid.transpose() * phi1 + 2.0 * lambda1 * sol.V;  // dL1/dV at Vhat
    up_phi1 += detail::vhat_phi1_adjoint(psi1, phi1, sol.V, binv, g);
  }

  GradBuffer grads = GradBuffer::zeros_like(phi);
  backward(phi, trace, drop_intercept_column(up_phi1, intercept), grads);
  return grads;
}

/// Gradient of the stage-2 loss with respect to the treatment net
/// parameters. u is set to its closed-form minimizer (envelope), and Vhat
/// is differentiated through its stage-1 targets Psi1; the instrument-side
/// Gram inverse is constant in theta_X.
inline GradBuffer grad_stage2_theta_x(const FeatureMap& psi, const FeatureMap& phi, const Mat& x1,
                                      const Mat& z1, const Vec& y2, const Mat& z2, double lambda1,
                                      double lambda2, bool intercept = true) {
  const auto n = static_cast<double>(y2.size());
  ForwardTrace trace;
  Mat psi1 = with_intercept(forward(psi, x1, &trace), intercept);
  Mat phi1 = with_intercept(forward(phi, z1), intercept);
  Mat phi2 = with_intercept(forward(phi, z2), intercept);

  Mat binv = detail::ridge_gram_inverse(phi1, lambda1);
  Mat k = phi1 * binv;                 // m x d2
  Mat vhat = psi1.transpose() * k;     // d1 x d2
  Mat design = phi2 * vhat.transpose();
  Vec u = ridge_solve(design, y2, lambda2, y2.size());
  Vec resid = design * u - y2;

  Mat g = (2.0 / n) * u * (phi2.transpose() * resid).transpose();  // dL2/dVhat
  Mat up_psi1 = k * g.transpose();

  GradBuffer grads = GradBuffer::zeros_like(psi);
  backward(psi, trace, drop_intercept_column(up_psi1, intercept), grads);
  return grads;
}

// ---------------------------------------------------------------------------
// Prediction and fixed-feature estimators
// ---------------------------------------------------------------------------

inline Vec predict(const StructuralModel& model, const Mat& x) {
  if (model.xi)
    throw std::invalid_argument("predict: model has observable features, pass o");
  Mat feats = model.psi(x);
  if (feats.cols() != model.u.size())
    throw std::invalid_argument("predict: feature/weight dim mismatch");
  return feats * model.u;
}

/// Prediction with observables: row-wise u . (psi(x) (x) xi(o)), evaluated
/// as psi_i^T U xi_i with U the row-major reshape of u.
inline Vec predict(const StructuralModel& model, const Mat& x, const Mat& o) {
  if (!model.xi) return predict(model, x);
  if (x.rows() != o.rows()) throw std::invalid_argument("predict: x/o row mismatch");
  Mat pf = model.psi(x);
  Mat xf = (*model.xi)(o);
  if (pf.cols() * xf.cols() != model.u.size())
    throw std::invalid_argument("predict: tensor feature/weight dim mismatch");
  Eigen::Map<const Mat> u_mat(model.u.data(), pf.cols(), xf.cols());
  return ((pf * u_mat).cwiseProduct(xf)).rowwise().sum();
}

/// Per-iteration training record. OOS values appear only when the dataset
/// carries held-out joint triples.
struct IterRecord {
  int iter = 0;
  double stage1_loss = std::numeric_limits<double>::quiet_NaN();
  double stage2_loss = std::numeric_limits<double>::quiet_NaN();
  double oos1 = std::numeric_limits<double>::quiet_NaN();
  double oos2 = std::numeric_limits<double>::quiet_NaN();
};

/// Fitted-stage byproducts that prediction does not need but tuning and
/// diagnostics do.
struct FitReport {
  std::vector<IterRecord> iters;
  Mat v_full;       // full-data stage-1 solution at the final parameters
  Featurizer phi;   // instrument featurizer matching v_full
  double final_stage1_loss = std::numeric_limits<double>::quiet_NaN();
  double final_stage2_loss = std::numeric_limits<double>::quiet_NaN();
};

/// Classic 2SLS with fixed feature maps: stage-1 solve on all stage-1
/// data, stage-2 solve on all stage-2 data, no gradient steps.
inline StructuralModel fixed_feature_2sls(const IvDataset& data, const Featurizer& psi_fixed,
                                          const Featurizer& phi_fixed, double lambda1,
                                          double lambda2, FitReport* report = nullptr) {
  data.validate();
  Mat psi1 = psi_fixed(data.stage1_x);
  Mat phi1 = phi_fixed(data.stage1_z);
  Stage1Sol sol = stage1_solve(psi1, phi1, lambda1);
  Mat phi2 = phi_fixed(data.stage2_z);
  Vec u = stage2_solve(sol, phi2, data.stage2_y, lambda2);
  if (report) {
    report->v_full = sol.V;
    report->phi = phi_fixed;
    report->final_stage1_loss = stage1_loss(psi1, phi1, sol, lambda1);
    report->final_stage2_loss = stage2_loss(sol, phi2, data.stage2_y, u, lambda2);
  }
  StructuralModel model;
  model.u = std::move(u);
  model.psi = psi_fixed;
  return model;
}

/// Supervised baseline that ignores the instruments: ridge of y on
/// features(x). Biased under confounding; used as a comparison point.
inline StructuralModel naive_ridge(const Mat& x, const Vec& y, const Featurizer& features,
                                   double lambda) {
  if (x.rows() != y.size()) throw std::invalid_argument("naive_ridge: row mismatch");
  StructuralModel model;
  model.psi = features;
  model.u = ridge_solve(features(x), y, lambda, y.size());
  return model;
}

// ---------------------------------------------------------------------------
// DFIV training (alternating mini-batch loop)
// ---------------------------------------------------------------------------

namespace detail {

inline void check_divergence(double loss, int iter, double threshold) {
  if (!std::isfinite(loss) || loss > threshold) throw DivergenceError(iter, loss);
}

inline Mat gather_rows(const Mat& src, const std::vector<Index>& idx) {
  Mat out(static_cast<Index>(idx.size()), src.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Index>(i)) = src.row(idx[i]);
  return out;
}

inline Vec gather_rows(const Vec& src, const std::vector<Index>& idx) {
  Vec out(static_cast<Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<Index>(i)] = src[idx[i]];
  return out;
}

inline Index resolve_batch(Index requested, Index available, const char* which) {
  if (requested == 0) return std::min<Index>(available, 1000);
  if (requested > available)
    throw std::invalid_argument(std::string("DfivConfig: ") + which + " exceeds dataset size");
  return requested;
}

inline void append_iter_jsonl(std::ostream* jsonl, const IterRecord& rec) {
  if (!jsonl) return;
  (*jsonl) << "{\"iter\":" << rec.iter << ",\"stage1_loss\":" << rec.stage1_loss
           << ",\"stage2_loss\":" << rec.stage2_loss;
  if (std::isfinite(rec.oos1)) (*jsonl) << ",\"oos_stage1\":" << rec.oos1;
  if (std::isfinite(rec.oos2)) (*jsonl) << ",\"oos_stage2\":" << rec.oos2;
  (*jsonl) << "}\n";
}

}  // namespace detail

/// Alternating DFIV training. Per outer iteration: sample one stage-1 and
/// one stage-2 mini-batch (held fixed within the iteration), take T1
/// instrument-net steps each recomputing the batch stage-1 solution, then
/// T2 treatment-net steps each recomputing the batch stage-1 and stage-2
/// solutions. After the loop the final weights come from full-data solves.
/// Deterministic given cfg.seed.
inline StructuralModel train_dfiv(const IvDataset& data, FeatureMap psi, FeatureMap phi,
                                  const DfivConfig& cfg, FitReport* report = nullptr,
                                  std::ostream* jsonl = nullptr) {
  data.validate();
  cfg.validate();
  psi.validate();
  phi.validate();
  const Index m = data.stage1_count();
  const Index n = data.stage2_count();
  const Index mb = detail::resolve_batch(cfg.batch_m, m, "batch_m");
  const Index nb = detail::resolve_batch(cfg.batch_n, n, "batch_n");
  const bool ic = cfg.intercept;

  RngStream batch_rng = RngStream(cfg.seed).fork(1);
  AdamState psi_state = AdamState::zeros_like(psi);
  AdamState phi_state = AdamState::zeros_like(phi);
  GradBuffer psi_grads = GradBuffer::zeros_like(psi);
  GradBuffer phi_grads = GradBuffer::zeros_like(phi);

  double best_oos2 = std::numeric_limits<double>::infinity();
  int stall = 0;

  for (int iter = 0; iter < cfg.epochs; ++iter) {
    const auto idx1 = sample_indices(batch_rng, m, mb);
    const auto idx2 = sample_indices(batch_rng, n, nb);
    Mat x1b = detail::gather_rows(data.stage1_x, idx1);
    Mat z1b = detail::gather_rows(data.stage1_z, idx1);
    Vec y2b = detail::gather_rows(data.stage2_y, idx2);
    Mat z2b = detail::gather_rows(data.stage2_z, idx2);

    IterRecord rec;
    rec.iter = iter;

    // Stage 1: theta_Z updates, psi fixed.
    Mat psi1 = with_intercept(forward(psi, x1b), ic);
    for (int t = 0; t < cfg.inner_stage1; ++t) {
      ForwardTrace trace;
      Mat phi1 = with_intercept(forward(phi, z1b, &trace), ic);
      Stage1Sol sol = stage1_solve(psi1, phi1, cfg.lambda1);
      Mat resid = phi1 * sol.V.transpose() - psi1;
      rec.stage1_loss = resid.squaredNorm() / static_cast<double>(mb) +
                        cfg.lambda1 * sol.V.squaredNorm();
      detail::check_divergence(rec.stage1_loss, iter, cfg.divergence_threshold);

      Mat up_phi1 = (2.0 / static_cast<double>(mb)) * resid * sol.V;
      phi_grads.set_zero();
      backward(phi, trace, drop_intercept_column(up_phi1, ic), phi_grads);
      adam_step(phi, phi_grads, phi_state, cfg.lr);
    }

    // Stage 2: theta_X updates, phi fixed. The instrument Gram inverse is
    // constant across these steps, so factor once.
    Mat phi1 = with_intercept(forward(phi, z1b), ic);
    Mat binv = detail::ridge_gram_inverse(phi1, cfg.lambda1);
    Mat k = phi1 * binv;
    Mat phi2 = with_intercept(forward(phi, z2b), ic);
    Mat vhat;
    Vec uhat;
    for (int t = 0; t < cfg.inner_stage2; ++t) {
      ForwardTrace trace;
      Mat psi1b = with_intercept(forward(psi, x1b, &trace), ic);
      vhat = psi1b.transpose() * k;
      Mat design = phi2 * vhat.transpose();
      uhat = ridge_solve(design, y2b, cfg.lambda2, nb);
      Vec resid = design * uhat - y2b;
      rec.stage2_loss = resid.squaredNorm() / static_cast<double>(nb) +
                        cfg.lambda2 * uhat.squaredNorm();
      detail::check_divergence(rec.stage2_loss, iter, cfg.divergence_threshold);

      Mat g = (2.0 / static_cast<double>(nb)) * uhat *
              (phi2.transpose() * resid).transpose();
      Mat up_psi1 = k * g.transpose();
      psi_grads.set_zero();
      backward(psi, trace, drop_intercept_column(up_psi1, ic), psi_grads);
      adam_step(psi, psi_grads, psi_state, cfg.lr);
    }

    // Monitoring on held-out joint triples, using the batch-level V, u.
    if (data.has_joint()) {
      Mat psij = with_intercept(forward(psi, *data.joint_x), ic);
      Mat phij = with_intercept(forward(phi, *data.joint_z), ic);
      Mat pred_feats = phij * vhat.transpose();
      rec.oos1 = (psij - pred_feats).squaredNorm() / static_cast<double>(psij.rows());
      rec.oos2 = (*data.joint_y - pred_feats * uhat).squaredNorm() /
                 static_cast<double>(psij.rows());
    }
    if (report) report->iters.push_back(rec);
    detail::append_iter_jsonl(jsonl, rec);

    if (cfg.early_stop_patience > 0 && data.has_joint()) {
      if (rec.oos2 < best_oos2) {
        best_oos2 = rec.oos2;
        stall = 0;
      } else if (++stall >= cfg.early_stop_patience) {
        break;
      }
    }
  }

  // Final weights from full-data solves at the trained parameters.
  return fixed_feature_2sls(data, net_features(std::move(psi), ic),
                            net_features(std::move(phi), ic), cfg.lambda1, cfg.lambda2, report);
}

// ---------------------------------------------------------------------------
// Random Fourier features and the median heuristic
// ---------------------------------------------------------------------------

/// Median of pairwise Euclidean distances. Exact up to 2000 points; above
/// that a deterministic stride subsample of 2000 rows is used.
inline double median_heuristic(const Mat& points) {
  const Index total = points.rows();
  if (total < 2) throw std::invalid_argument("median_heuristic: need at least 2 points");
  std::vector<Index> rows;
  if (total <= 2000) {
    rows.resize(static_cast<std::size_t>(total));
    std::iota(rows.begin(), rows.end(), Index{0});
  } else {
    const Index stride = (total + 1999) / 2000;
    for (Index i = 0; i < total; i += stride) rows.push_back(i);
  }
  std::vector<double> dists;
  dists.reserve(rows.size() * (rows.size() - 1) / 2);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = i + 1; j < rows.size(); ++j)
      dists.push_back((points.row(rows[i]) - points.row(rows[j])).norm());
  const std::size_t mid = dists.size() / 2;
  std::nth_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid), dists.end());
  double med = dists[mid];
  if (dists.size() % 2 == 0) {
    auto lower = std::max_element(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + *lower);
  }
  if (med <= 0.0) throw std::runtime_error("median_heuristic: zero median distance");
  return med;
}

/// Random Fourier feature map z(x) = sqrt(2/D) cos(W x + b) with
/// W ~ N(0, I / bandwidth^2) and b ~ Unif[0, 2pi), realized as a cos layer
/// followed by a fixed scaling layer. Approximates the Gaussian kernel
/// exp(-||x - x'||^2 / (2 bandwidth^2)).
inline FeatureMap rff_map(Index input_dim, Index feature_count, double bandwidth,
                          RngStream& rng) {
  if (feature_count < 2 || feature_count % 2 != 0)
    throw std::invalid_argument("rff_map: feature_count must be even and >= 2");
  if (bandwidth <= 0) throw std::invalid_argument("rff_map: bandwidth must be positive");
  Layer proj;
  proj.weight.resize(feature_count, input_dim);
  for (Index i = 0; i < feature_count; ++i)
    for (Index j = 0; j < input_dim; ++j) proj.weight(i, j) = rng.next_gaussian() / bandwidth;
  proj.bias.resize(feature_count);
  for (Index i = 0; i < feature_count; ++i) proj.bias[i] = rng.next_uniform(0.0, 2.0 * M_PI);
  proj.act = Activation::Cos;

  Layer scale;
  scale.weight = std::sqrt(2.0 / static_cast<double>(feature_count)) *
                 Mat::Identity(feature_count, feature_count);
  scale.bias = Vec::Zero(feature_count);
  scale.act = Activation::Identity;

  FeatureMap fm;
  fm.layers.push_back(std::move(proj));
  fm.layers.push_back(std::move(scale));
  return fm;
}

}  // namespace dfiv
