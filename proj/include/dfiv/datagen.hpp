#pragma once

#include "dfiv/core.hpp"
#include "dfiv/linalg.hpp"
#include "dfiv/rng.hpp"

#include <cmath>
#include <iomanip>
#include <ostream>
#include <stdexcept>
#include <string>

namespace dfiv {

// ---------------------------------------------------------------------------
// Demand design
// ---------------------------------------------------------------------------

struct DemandConfig {
  double rho = 0.5;       // correlation between outcome noise and price noise
  Index n_total = 5000;   // split evenly into stage 1 / stage 2
  std::uint64_t seed = 0;
  Index heldout = 0;      // extra joint (x, y, z) rows for tuning

  void validate() const {
    if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("DemandConfig: rho outside [0, 1]");
    if (n_total < 2) throw std::invalid_argument("DemandConfig: n_total too small");
  }
};

/// Seasonal demand curve.
inline double demand_h(double t) {
  const double d = t - 5.0;
  return 2.0 * (d * d * d * d / 600.0 + std::exp(-4.0 * d * d) + t / 10.0 - 2.0);
}

/// True structural function: sales as a function of price, time of year,
/// and customer type.
inline double demand_fstruct(double p, double t, double s) {
  const auto si = static_cast<int>(s);
  if (si < 1 || si > 7 || static_cast<double>(si) != s)
    throw std::invalid_argument("demand_fstruct: s must be an integer in 1..7");
  return 100.0 + (10.0 + p) * s * demand_h(t) - 2.0 * p;
}

/// One generated demand sample set. Visible columns are (y, p, t, s, c);
/// v_noise and eps are the hidden generator noise, kept out of model-visible
/// dataset views.
struct DemandData {
  DemandConfig cfg;
  Vec y, p, t, s, c;
  Vec v_noise, eps;  // hidden
  Vec f_true;        // hidden: structural value at the sampled points

  Index rows() const { return y.size(); }

  Mat visible_x_augmented(Index begin, Index count) const {
    Mat x(count, 3);
    x.col(0) = p.segment(begin, count);
    x.col(1) = t.segment(begin, count);
    x.col(2) = s.segment(begin, count);
    return x;
  }
  Mat visible_z_augmented(Index begin, Index count) const {
    Mat z(count, 3);
    z.col(0) = c.segment(begin, count);
    z.col(1) = t.segment(begin, count);
    z.col(2) = s.segment(begin, count);
    return z;
  }
  Mat visible_o(Index begin, Index count) const {
    Mat o(count, 2);
    o.col(0) = t.segment(begin, count);
    o.col(1) = s.segment(begin, count);
    return o;
  }

  /// Observables folded into both treatment and instrument:
  /// x = (p, t, s), z = (c, t, s).
  IvDataset iv_augmented() const {
    const Index m = cfg.n_total / 2;
    const Index n = cfg.n_total - m;
    IvDataset d;
    d.stage1_x = visible_x_augmented(0, m);
    d.stage1_z = visible_z_augmented(0, m);
    d.stage2_y = y.segment(m, n);
    d.stage2_z = visible_z_augmented(m, n);
    if (cfg.heldout > 0) {
      d.joint_x = visible_x_augmented(cfg.n_total, cfg.heldout);
      d.joint_y = Vec(y.segment(cfg.n_total, cfg.heldout));
      d.joint_z = visible_z_augmented(cfg.n_total, cfg.heldout);
    }
    return d;
  }

  /// Observable-confounder form: x = p, z = c, o = (t, s).
  IvDataset iv_observable() const {
    const Index m = cfg.n_total / 2;
    const Index n = cfg.n_total - m;
    IvDataset d;
    d.stage1_x = p.segment(0, m);
    d.stage1_z = c.segment(0, m);
    d.stage1_o = visible_o(0, m);
    d.stage2_y = y.segment(m, n);
    d.stage2_z = c.segment(m, n);
    d.stage2_o = visible_o(m, n);
    if (cfg.heldout > 0) {
      d.joint_x = Mat(p.segment(cfg.n_total, cfg.heldout));
      d.joint_y = Vec(y.segment(cfg.n_total, cfg.heldout));
      d.joint_z = Mat(c.segment(cfg.n_total, cfg.heldout));
      d.joint_o = visible_o(cfg.n_total, cfg.heldout);
    }
    return d;
  }
};

inline DemandData demand_generate(const DemandConfig& cfg) {
  cfg.validate();
  const Index total = cfg.n_total + cfg.heldout;
  RngStream base(cfg.seed, 100);
  RngStream s_rng = base.fork(1);
  RngStream t_rng = base.fork(2);
  RngStream c_rng = base.fork(3);
  RngStream v_rng = base.fork(4);
  RngStream e_rng = base.fork(5);

  DemandData d;
  d.cfg = cfg;
  d.s.resize(total);
  for (Index i = 0; i < total; ++i) d.s[i] = 1.0 + static_cast<double>(s_rng.next_below(7));
  d.t = sample_uniform(t_rng, 0.0, 10.0, total);
  d.c = sample_gaussian(c_rng, 0.0, 1.0, total);
  d.v_noise = sample_gaussian(v_rng, 0.0, 1.0, total);
  // eps ~ N(rho * V, 1 - rho^2): unit variance, corr(eps, V) = rho.
  Vec g = sample_gaussian(e_rng, 0.0, 1.0, total);
  d.eps = cfg.rho * d.v_noise + std::sqrt(1.0 - cfg.rho * cfg.rho) * g;

  d.p.resize(total);
  d.y.resize(total);
  d.f_true.resize(total);
  for (Index i = 0; i < total; ++i) {
    d.p[i] = 25.0 + (d.c[i] + 3.0) * demand_h(d.t[i]) + d.v_noise[i];
    d.f_true[i] = demand_fstruct(d.p[i], d.t[i], d.s[i]);
    d.y[i] = d.f_true[i] + d.eps[i];
  }
  return d;
}

/// Fixed evaluation grid with the true structural values: (p, t, s) over
/// 20 x 20 x 7 points, endpoints inclusive, lexicographic with p outermost
/// and s innermost.
struct EvalGrid {
  Mat points;  // one row per grid point
  Vec truth;
};

inline EvalGrid demand_test_grid() {
  EvalGrid grid;
  grid.points.resize(2800, 3);
  grid.truth.resize(2800);
  Index r = 0;
  for (int pi = 0; pi < 20; ++pi) {
    const double p = 10.0 + 15.0 * static_cast<double>(pi) / 19.0;
    for (int ti = 0; ti < 20; ++ti) {
      const double t = 10.0 * static_cast<double>(ti) / 19.0;
      for (int si = 1; si <= 7; ++si) {
        grid.points(r, 0) = p;
        grid.points(r, 1) = t;
        grid.points(r, 2) = si;
        grid.truth[r] = demand_fstruct(p, t, si);
        ++r;
      }
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Linear-Gaussian sanity model
// ---------------------------------------------------------------------------

/// Z ~ N(0,1), X = a Z + e, Y = b X + eps, with corr(e, eps) = r. The true
/// structural function is b x, while OLS of Y on X is biased by
/// r / (a^2 + 1) for unit noise variances.
struct LinearGaussianData {
  double slope = 0.0;
  Vec y, x, z;
  Vec e, eps;  // hidden

  IvDataset iv() const {
    const Index total = y.size();
    const Index m = total / 2;
    const Index n = total - m;
    IvDataset d;
    d.stage1_x = x.segment(0, m);
    d.stage1_z = z.segment(0, m);
    d.stage2_y = y.segment(m, n);
    d.stage2_z = z.segment(m, n);
    return d;
  }
};

inline LinearGaussianData linear_gaussian_generate(double slope, double instrument_strength,
                                                   double confounding, Index n,
                                                   std::uint64_t seed) {
  if (std::abs(confounding) >= 1.0)
    throw std::invalid_argument("linear_gaussian_generate: |r| must be < 1");
  if (instrument_strength == 0.0)
    throw std::invalid_argument("linear_gaussian_generate: instrument strength must be nonzero");
  if (n < 2) throw std::invalid_argument("linear_gaussian_generate: n too small");

  RngStream base(seed, 200);
  RngStream z_rng = base.fork(1);
  RngStream e_rng = base.fork(2);
  RngStream g_rng = base.fork(3);

  LinearGaussianData d;
  d.slope = slope;
  d.z = sample_gaussian(z_rng, 0.0, 1.0, n);
  d.e = sample_gaussian(e_rng, 0.0, 1.0, n);
  Vec g = sample_gaussian(g_rng, 0.0, 1.0, n);
  d.eps = confounding * d.e + std::sqrt(1.0 - confounding * confounding) * g;
  d.x = instrument_strength * d.z + d.e;
  d.y = slope * d.x + d.eps;
  return d;
}

// ---------------------------------------------------------------------------
// High-dimensional treatment surrogate
// ---------------------------------------------------------------------------

/// Latent variables (scale, rotation, posX, posY) drive a smooth random
/// Fourier embedding into R^dim; posY is the hidden confounder and
/// z = (scale, rotation, posX). The outcome constants are calibrated so
/// the structural function has roughly zero mean and unit variance.
struct HighDimConfig {
  Index dim = 64;
  std::uint64_t embed_seed = 12345;
  double eta_sd = 0.1;  // treatment noise
  double eps_sd = 0.5;  // outcome noise
  double embed_freq = 2.0;

  void validate() const {
    if (dim < 4) throw std::invalid_argument("HighDimConfig: dim must be >= 4");
    if (eta_sd < 0 || eps_sd < 0) throw std::invalid_argument("HighDimConfig: negative noise sd");
  }
};

namespace detail {

struct HighDimEmbedding {
  Mat freq;     // dim x 4, rows act on normalized latents
  Vec phase;    // dim
  Mat a;        // 10 x dim, entries Unif(0, 1)
  double c0 = 0.0, c1 = 1.0;
};

inline Vec normalize_latents(double scale, double rotation, double pos_x, double pos_y) {
  Vec l(4);
  l << (scale - 0.5) / 0.5, rotation / (2.0 * M_PI), pos_x, pos_y;
  return l;
}

inline Mat embed_latents(const HighDimEmbedding& emb, const Mat& latents) {
  // latents rows: (scale, rotation, posX, posY)
  Mat norm(latents.rows(), 4);
  for (Index i = 0; i < latents.rows(); ++i)
    norm.row(i) =
        normalize_latents(latents(i, 0), latents(i, 1), latents(i, 2), latents(i, 3)).transpose();
  Mat z = norm * emb.freq.transpose();
  z.rowwise() += emb.phase.transpose();
  return z.array().cos().matrix();
}

inline Mat sample_latents(RngStream& rng, Index n) {
  Mat latents(n, 4);
  for (Index i = 0; i < n; ++i) {
    latents(i, 0) = rng.next_uniform(0.5, 1.0);
    latents(i, 1) = rng.next_uniform(0.0, 2.0 * M_PI);
    latents(i, 2) = rng.next_uniform(0.0, 1.0);
    latents(i, 3) = rng.next_uniform(0.0, 1.0);
  }
  return latents;
}

inline HighDimEmbedding make_embedding(const HighDimConfig& cfg) {
  RngStream rng(cfg.embed_seed, 300);
  RngStream f_rng = rng.fork(1);
  RngStream p_rng = rng.fork(2);
  RngStream a_rng = rng.fork(3);
  RngStream cal_rng = rng.fork(4);

  HighDimEmbedding emb;
  emb.freq.resize(cfg.dim, 4);
  for (Index i = 0; i < cfg.dim; ++i)
    for (Index j = 0; j < 4; ++j)
      emb.freq(i, j) = cfg.embed_freq * 2.0 * M_PI * f_rng.next_gaussian();
  emb.phase.resize(cfg.dim);
  for (Index i = 0; i < cfg.dim; ++i) emb.phase[i] = p_rng.next_uniform(0.0, 2.0 * M_PI);
  emb.a.resize(10, cfg.dim);
  for (Index i = 0; i < 10; ++i)
    for (Index j = 0; j < cfg.dim; ++j) emb.a(i, j) = a_rng.next_uniform(0.0, 1.0);

  // Monte-Carlo calibration of (c0, c1) on the marginal treatment
  // distribution, so f = (||A x||^2 - c0) / c1 is centered and scaled.
  const Index k = 4096;
  Mat lat = sample_latents(cal_rng, k);
  Mat x = embed_latents(emb, lat);
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < cfg.dim; ++j) x(i, j) += cfg.eta_sd * cal_rng.next_gaussian();
  Vec norms = (x * emb.a.transpose()).rowwise().squaredNorm();
  emb.c0 = norms.mean();
  emb.c1 = std::sqrt((norms.array() - emb.c0).square().sum() / static_cast<double>(k - 1));
  return emb;
}

}  // namespace detail

struct HighDimData {
  HighDimConfig cfg;
  Mat x;       // n x dim
  Mat z;       // n x 3: (scale, rotation, posX)
  Vec y;
  Vec f_true;  // hidden
  Vec pos_y;   // hidden confounder
  double c0 = 0.0, c1 = 1.0;

  IvDataset iv() const {
    const Index total = y.size();
    const Index m = total / 2;
    const Index n = total - m;
    IvDataset d;
    d.stage1_x = x.topRows(m);
    d.stage1_z = z.topRows(m);
    d.stage2_y = y.segment(m, n);
    d.stage2_z = z.bottomRows(n);
    return d;
  }
};

inline double highdim_fstruct(const detail::HighDimEmbedding& emb, const Vec& x) {
  return ((emb.a * x).squaredNorm() - emb.c0) / emb.c1;
}

inline HighDimData highdim_generate(const HighDimConfig& cfg, Index n, std::uint64_t seed) {
  cfg.validate();
  if (n < 2) throw std::invalid_argument("highdim_generate: n too small");
  detail::HighDimEmbedding emb = detail::make_embedding(cfg);

  RngStream base(seed, 400);
  RngStream lat_rng = base.fork(1);
  RngStream eta_rng = base.fork(2);
  RngStream eps_rng = base.fork(3);

  Mat latents = detail::sample_latents(lat_rng, n);
  HighDimData d;
  d.cfg = cfg;
  d.c0 = emb.c0;
  d.c1 = emb.c1;
  d.x = detail::embed_latents(emb, latents);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < cfg.dim; ++j) d.x(i, j) += cfg.eta_sd * eta_rng.next_gaussian();
  d.z = latents.leftCols(3);
  d.pos_y = latents.col(3);
  d.f_true.resize(n);
  d.y.resize(n);
  Vec eps = sample_gaussian(eps_rng, 0.0, cfg.eps_sd, n);
  for (Index i = 0; i < n; ++i) {
    d.f_true[i] = highdim_fstruct(emb, Vec(d.x.row(i)));
    d.y[i] = d.f_true[i] + 32.0 * (d.pos_y[i] - 0.5) + eps[i];
  }
  return d;
}

/// 588-point latent grid (3 scales x 4 rotations x 7 posX x 7 posY) with
/// noise-free treatments and true structural values.
inline EvalGrid highdim_test_grid(const HighDimConfig& cfg) {
  cfg.validate();
  detail::HighDimEmbedding emb = detail::make_embedding(cfg);
  const Index count = 3 * 4 * 7 * 7;
  Mat latents(count, 4);
  Index r = 0;
  for (int sc = 0; sc < 3; ++sc)
    for (int ro = 0; ro < 4; ++ro)
      for (int px = 0; px < 7; ++px)
        for (int py = 0; py < 7; ++py) {
          latents(r, 0) = 0.5 + 0.5 * static_cast<double>(sc) / 2.0;
          // rotation lives on a circle; endpoint-exclusive spacing avoids
          // duplicating 0 and 2 pi
          latents(r, 1) = 2.0 * M_PI * static_cast<double>(ro) / 4.0;
          latents(r, 2) = static_cast<double>(px) / 6.0;
          latents(r, 3) = static_cast<double>(py) / 6.0;
          ++r;
        }
  EvalGrid grid;
  grid.points = detail::embed_latents(emb, latents);
  grid.truth.resize(count);
  for (Index i = 0; i < count; ++i)
    grid.truth[i] = highdim_fstruct(emb, Vec(grid.points.row(i)));
  return grid;
}

// ---------------------------------------------------------------------------
// CSV output
// ---------------------------------------------------------------------------

namespace detail {

inline void csv_row(std::ostream& os, const Vec& vals) {
  for (Index i = 0; i < vals.size(); ++i) {
    if (i) os << ',';
    os << vals[i];
  }
  os << '\n';
}

}  // namespace detail

inline void write_demand_csv(std::ostream& data_os, std::ostream& truth_os,
                             const DemandData& d) {
  data_os << std::setprecision(17);
  truth_os << std::setprecision(17);
  data_os << "y,p,t,s,c\n";
  truth_os << "f_struct,v_noise,eps\n";
  for (Index i = 0; i < d.rows(); ++i) {
    Vec row(5);
    row << d.y[i], d.p[i], d.t[i], d.s[i], d.c[i];
    detail::csv_row(data_os, row);
    Vec truth(3);
    truth << d.f_true[i], d.v_noise[i], d.eps[i];
    detail::csv_row(truth_os, truth);
  }
}

inline void write_linear_gaussian_csv(std::ostream& data_os, std::ostream& truth_os,
                                      const LinearGaussianData& d) {
  data_os << std::setprecision(17);
  truth_os << std::setprecision(17);
  data_os << "y,x0,z0\n";
  truth_os << "f_struct,e,eps\n";
  for (Index i = 0; i < d.y.size(); ++i) {
    Vec row(3);
    row << d.y[i], d.x[i], d.z[i];
    detail::csv_row(data_os, row);
    Vec truth(3);
    truth << d.slope * d.x[i], d.e[i], d.eps[i];
    detail::csv_row(truth_os, truth);
  }
}

inline void write_highdim_csv(std::ostream& data_os, std::ostream& truth_os,
                              const HighDimData& d) {
  data_os << std::setprecision(17);
  truth_os << std::setprecision(17);
  data_os << "y";
  for (Index j = 0; j < d.x.cols(); ++j) data_os << ",x" << j;
  for (Index j = 0; j < d.z.cols(); ++j) data_os << ",z" << j;
  data_os << '\n';
  truth_os << "f_struct,pos_y\n";
  for (Index i = 0; i < d.y.size(); ++i) {
    data_os << d.y[i];
    for (Index j = 0; j < d.x.cols(); ++j) data_os << ',' << d.x(i, j);
    for (Index j = 0; j < d.z.cols(); ++j) data_os << ',' << d.z(i, j);
    data_os << '\n';
    Vec truth(2);
    truth << d.f_true[i], d.pos_y[i];
    detail::csv_row(truth_os, truth);
  }
}

}  // namespace dfiv
