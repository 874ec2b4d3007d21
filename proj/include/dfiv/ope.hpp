#pragma once

#include "dfiv/core.hpp"
#include "dfiv/featurizer.hpp"
#include "dfiv/linalg.hpp"
#include "dfiv/rng.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>
#include <vector>

namespace dfiv {

struct Policy {
  Mat probs;  // n_states x n_actions, rows sum to 1

  void validate() const {
    if (probs.rows() < 1 || probs.cols() < 1) throw std::invalid_argument("Policy: empty");
    for (Index s = 0; s < probs.rows(); ++s) {
      if (probs.row(s).minCoeff() < 0) throw std::invalid_argument("Policy: negative probability");
      if (std::abs(probs.row(s).sum() - 1.0) > 1e-12)
        throw std::invalid_argument("Policy: row does not sum to 1");
    }
  }

  static Policy uniform(Index n_states, Index n_actions) {
    Policy p;
    p.probs = Mat::Constant(n_states, n_actions, 1.0 / static_cast<double>(n_actions));
    return p;
  }
};

/// Finite MDP. Transition and mean-reward tensors are stored with one row
/// per (s, a) pair: row index s * n_actions + a. Executing an action passes
/// through environment action noise: with probability action_noise_p the
/// executed action is replaced by a uniform draw.
struct MdpSpec {
  Index n_states = 0, n_actions = 0;
  Mat trans;        // (S*A) x S
  Mat reward_mean;  // (S*A) x S
  Vec rho0;
  double gamma = 0.9;
  double reward_noise_sd = 0.0;
  double action_noise_p = 0.0;

  Index sa_index(Index s, Index a) const { return s * n_actions + a; }

  void validate() const {
    if (n_states < 1 || n_actions < 1) throw std::invalid_argument("MdpSpec: empty spaces");
    if (gamma <= 0.0 || gamma >= 1.0)
      throw std::invalid_argument("MdpSpec: gamma must be in (0, 1)");
    if (action_noise_p < 0.0 || action_noise_p > 0.5)
      throw std::invalid_argument("MdpSpec: action noise outside [0, 0.5]");
    if (trans.rows() != n_states * n_actions || trans.cols() != n_states)
      throw std::invalid_argument("MdpSpec: transition shape mismatch");
    if (reward_mean.rows() != trans.rows() || reward_mean.cols() != trans.cols())
      throw std::invalid_argument("MdpSpec: reward shape mismatch");
    for (Index k = 0; k < trans.rows(); ++k) {
      if (trans.row(k).minCoeff() < 0) throw std::invalid_argument("MdpSpec: negative probability");
      if (std::abs(trans.row(k).sum() - 1.0) > 1e-12)
        throw std::invalid_argument("MdpSpec: transition row does not sum to 1");
    }
    if (rho0.size() != n_states || std::abs(rho0.sum() - 1.0) > 1e-12)
      throw std::invalid_argument("MdpSpec: rho0 does not sum to 1");
  }

  /// Transition probabilities with action noise folded in.
  Mat effective_trans() const {
    Mat eff(trans.rows(), trans.cols());
    const double p = action_noise_p;
    for (Index s = 0; s < n_states; ++s) {
      Mat block = trans.middleRows(s * n_actions, n_actions);
      Vec mix = block.colwise().mean().transpose();
      for (Index a = 0; a < n_actions; ++a)
        eff.row(sa_index(s, a)) = (1.0 - p) * block.row(a) + p * mix.transpose();
    }
    return eff;
  }

  /// E[r | s, intended a] with action noise folded in.
  Vec effective_reward() const {
    Vec eff(trans.rows());
    const double p = action_noise_p;
    for (Index s = 0; s < n_states; ++s) {
      Vec per_action(n_actions);
      for (Index a = 0; a < n_actions; ++a) {
        const Index k = sa_index(s, a);
        per_action[a] = trans.row(k).dot(reward_mean.row(k));
      }
      const double mix = per_action.mean();
      for (Index a = 0; a < n_actions; ++a)
        eff[sa_index(s, a)] = (1.0 - p) * per_action[a] + p * mix;
    }
    return eff;
  }
};

struct TransitionDataset {
  std::vector<Index> s, a, s_next;
  Vec r;

  Index size() const { return static_cast<Index>(s.size()); }

  void validate(const MdpSpec& mdp) const {
    if (s.size() != a.size() || s.size() != s_next.size() ||
        static_cast<Index>(s.size()) != r.size())
      throw std::invalid_argument("TransitionDataset: column length mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] < 0 || s[i] >= mdp.n_states || a[i] < 0 || a[i] >= mdp.n_actions ||
          s_next[i] < 0 || s_next[i] >= mdp.n_states)
        throw std::invalid_argument("TransitionDataset: index out of range");
    if (!r.allFinite()) throw std::runtime_error("TransitionDataset: non-finite reward");
  }

  std::map<std::pair<Index, Index>, Index> pair_counts() const {
    std::map<std::pair<Index, Index>, Index> counts;
    for (std::size_t i = 0; i < s.size(); ++i) ++counts[{s[i], a[i]}];
    return counts;
  }
};

namespace detail {

inline Index sample_categorical(RngStream& rng, const Eigen::Ref<const Eigen::RowVectorXd>& probs) {
  double u = rng.next_uniform();
  double acc = 0.0;
  for (Index i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

}  // namespace detail

/// One environment step from (s, intended action a): applies action noise,
/// samples the next state, and draws the reward.
struct StepResult {
  double reward = 0.0;
  Index next_state = 0;
};

inline StepResult mdp_step(const MdpSpec& mdp, Index s, Index a, RngStream& rng) {
  Index executed = a;
  if (mdp.action_noise_p > 0.0 && rng.next_uniform() < mdp.action_noise_p)
    executed = static_cast<Index>(rng.next_below(static_cast<std::uint64_t>(mdp.n_actions)));
  const Index k = mdp.sa_index(s, executed);
  StepResult out;
  out.next_state = detail::sample_categorical(rng, mdp.trans.row(k));
  const double mean = mdp.reward_mean(k, out.next_state);
  out.reward = mdp.reward_noise_sd > 0.0 ? mean + mdp.reward_noise_sd * rng.next_gaussian() : mean;
  return out;
}

/// Random MDP with normalized-uniform transition rows and Unif(0, 1) mean
/// rewards; a desk-scale stand-in for benchmark control tasks.
inline MdpSpec random_mdp(Index n_states, Index n_actions, double reward_noise_sd, double gamma,
                          std::uint64_t seed) {
  if (n_states < 1 || n_actions < 1) throw std::invalid_argument("random_mdp: empty spaces");
  MdpSpec mdp;
  mdp.n_states = n_states;
  mdp.n_actions = n_actions;
  mdp.gamma = gamma;
  mdp.reward_noise_sd = reward_noise_sd;
  RngStream rng(seed, 500);
  mdp.trans.resize(n_states * n_actions, n_states);
  mdp.reward_mean.resize(n_states * n_actions, n_states);
  for (Index k = 0; k < mdp.trans.rows(); ++k) {
    for (Index j = 0; j < n_states; ++j) mdp.trans(k, j) = rng.next_uniform() + 1e-3;
    mdp.trans.row(k) /= mdp.trans.row(k).sum();
    for (Index j = 0; j < n_states; ++j) mdp.reward_mean(k, j) = rng.next_uniform();
  }
  mdp.rho0.resize(n_states);
  for (Index j = 0; j < n_states; ++j) mdp.rho0[j] = rng.next_uniform() + 1e-3;
  mdp.rho0 /= mdp.rho0.sum();
  mdp.validate();
  return mdp;
}

/// Exact Q^pi via the Bellman linear system (I - gamma P Pi) q = r over
/// (s, a) pairs, using the noise-folded dynamics.
inline Mat exact_q(const MdpSpec& mdp, const Policy& pi) {
  mdp.validate();
  pi.validate();
  const Index sa = mdp.n_states * mdp.n_actions;
  Mat p_eff = mdp.effective_trans();
  Vec r_eff = mdp.effective_reward();
  Mat system = Mat::Identity(sa, sa);
  for (Index k = 0; k < sa; ++k)
    for (Index sn = 0; sn < mdp.n_states; ++sn)
      for (Index an = 0; an < mdp.n_actions; ++an)
        system(k, sn * mdp.n_actions + an) -= mdp.gamma * p_eff(k, sn) * pi.probs(sn, an);

  Eigen::PartialPivLU<Mat> lu(system);
  Vec q = lu.solve(r_eff);
  if ((system * q - r_eff).cwiseAbs().maxCoeff() > 1e-10)
    throw std::runtime_error("exact_q: Bellman system solve failed");

  Mat out(mdp.n_states, mdp.n_actions);
  for (Index s = 0; s < mdp.n_states; ++s)
    for (Index a = 0; a < mdp.n_actions; ++a) out(s, a) = q[mdp.sa_index(s, a)];
  return out;
}

/// i.i.d. transitions: s ~ mu, a ~ behavior(.|s), then one environment step.
inline TransitionDataset generate_transitions(const MdpSpec& mdp, const Policy& behavior,
                                              Index count, std::uint64_t seed, const Vec& mu) {
  mdp.validate();
  behavior.validate();
  if (count < 1) throw std::invalid_argument("generate_transitions: count must be >= 1");
  if (mu.size() != mdp.n_states || std::abs(mu.sum() - 1.0) > 1e-12)
    throw std::invalid_argument("generate_transitions: mu does not sum to 1");
  RngStream rng(seed, 600);
  TransitionDataset data;
  data.s.reserve(static_cast<std::size_t>(count));
  data.a.reserve(static_cast<std::size_t>(count));
  data.s_next.reserve(static_cast<std::size_t>(count));
  data.r.resize(count);
  for (Index i = 0; i < count; ++i) {
    Index s = detail::sample_categorical(rng, mu.transpose());
    Index a = detail::sample_categorical(rng, behavior.probs.row(s));
    StepResult step = mdp_step(mdp, s, a, rng);
    data.s.push_back(s);
    data.a.push_back(a);
    data.s_next.push_back(step.next_state);
    data.r[i] = step.reward;
  }
  return data;
}

inline double policy_value(const Mat& q, const Vec& rho0, const Policy& pi) {
  if (q.rows() != rho0.size() || q.rows() != pi.probs.rows() || q.cols() != pi.probs.cols())
    throw std::invalid_argument("policy_value: shape mismatch");
  return rho0.dot(q.cwiseProduct(pi.probs).rowwise().sum());
}

/// Exact mean squared Bellman error of a Q table under the known MDP,
/// weighted by a distribution over (s, a) pairs (uniform by default).
inline double msbe(const Mat& q, const MdpSpec& mdp, const Policy& pi,
                   const Vec* sa_weights = nullptr) {
  mdp.validate();
  pi.validate();
  const Index sa = mdp.n_states * mdp.n_actions;
  if (q.rows() != mdp.n_states || q.cols() != mdp.n_actions)
    throw std::invalid_argument("msbe: Q shape mismatch");
  Mat p_eff = mdp.effective_trans();
  Vec r_eff = mdp.effective_reward();
  Vec next_value(mdp.n_states);
  for (Index sn = 0; sn < mdp.n_states; ++sn) next_value[sn] = pi.probs.row(sn).dot(q.row(sn));
  double total = 0.0;
  for (Index s = 0; s < mdp.n_states; ++s)
    for (Index a = 0; a < mdp.n_actions; ++a) {
      const Index k = mdp.sa_index(s, a);
      const double resid = r_eff[k] + mdp.gamma * p_eff.row(k).dot(next_value) - q(s, a);
      const double w =
          sa_weights ? (*sa_weights)[k] : 1.0 / static_cast<double>(sa);
      total += w * resid * resid;
    }
  return total;
}

// ---------------------------------------------------------------------------
// Two-stage OPE estimator
// ---------------------------------------------------------------------------

namespace detail {

inline Mat sa_pairs(const std::vector<Index>& s, const std::vector<Index>& a) {
  Mat out(static_cast<Index>(s.size()), 2);
  for (std::size_t i = 0; i < s.size(); ++i) {
    out(static_cast<Index>(i), 0) = static_cast<double>(s[i]);
    out(static_cast<Index>(i), 1) = static_cast<double>(a[i]);
  }
  return out;
}

inline std::vector<Index> draw_next_actions(const Policy& pi, const std::vector<Index>& s_next,
                                            RngStream& rng) {
  std::vector<Index> a_next(s_next.size());
  for (std::size_t i = 0; i < s_next.size(); ++i)
    a_next[i] = sample_categorical(rng, pi.probs.row(s_next[i]));
  return a_next;
}

}  // namespace detail

/// Index-parity split of one offline dataset into the two stages.
struct OpeStages {
  std::vector<Index> s1, a1, s1_next;  // stage 1: (s, a, s')
  std::vector<Index> s2, a2;           // stage 2: (s, a)
  Vec r2;
};

inline OpeStages split_transitions(const TransitionDataset& data) {
  OpeStages st;
  std::vector<double> r2;
  for (Index i = 0; i < data.size(); ++i) {
    const auto idx = static_cast<std::size_t>(i);
    if (i % 2 == 0) {
      st.s1.push_back(data.s[idx]);
      st.a1.push_back(data.a[idx]);
      st.s1_next.push_back(data.s_next[idx]);
    } else {
      st.s2.push_back(data.s[idx]);
      st.a2.push_back(data.a[idx]);
      r2.push_back(data.r[i]);
    }
  }
  st.r2 = Eigen::Map<Vec>(r2.data(), static_cast<Index>(r2.size()));
  return st;
}

/// Fixed-feature OPE via the modified two-stage regression: stage 1
/// regresses psi(s', a') with a' ~ pi(.|s') onto phi(s, a); stage 2
/// regresses rewards onto psi(s, a) - gamma * V phi(s, a). Returns
/// Qhat(s, a) = u . psi(s, a).
inline StructuralModel ope_train(const TransitionDataset& data, const Policy& target,
                                 const Featurizer& psi, const Featurizer& phi, double lambda1,
                                 double lambda2, double gamma, RngStream& rng,
                                 FitReport* report = nullptr) {
  target.validate();
  if (data.size() < 2) throw std::invalid_argument("ope_train: need at least 2 transitions");
  OpeStages st = split_transitions(data);

  std::vector<Index> a1_next = detail::draw_next_actions(target, st.s1_next, rng);
  Mat psi_targets = psi(detail::sa_pairs(st.s1_next, a1_next));
  Mat phi_design = phi(detail::sa_pairs(st.s1, st.a1));
  Stage1Sol sol = stage1_solve(psi_targets, phi_design, lambda1);

  Mat psi2 = psi(detail::sa_pairs(st.s2, st.a2));
  Mat phi2 = phi(detail::sa_pairs(st.s2, st.a2));
  Mat design = psi2 - gamma * (phi2 * sol.V.transpose());
  Vec u = ridge_solve(design, st.r2, lambda2, st.r2.size());

  if (report) {
    report->v_full = sol.V;
    report->phi = phi;
    report->final_stage1_loss = stage1_loss(psi_targets, phi_design, sol, lambda1);
    report->final_stage2_loss = (st.r2 - design * u).squaredNorm() /
                                    static_cast<double>(st.r2.size()) +
                                lambda2 * u.squaredNorm();
  }

  StructuralModel model;
  model.u = std::move(u);
  model.psi = psi;
  return model;
}

/// Q table for a fitted model whose psi consumes (s, a) index pairs.
inline Mat ope_q_table(const StructuralModel& model, Index n_states, Index n_actions) {
  Mat pairs(n_states * n_actions, 2);
  for (Index s = 0; s < n_states; ++s)
    for (Index a = 0; a < n_actions; ++a) {
      pairs(s * n_actions + a, 0) = static_cast<double>(s);
      pairs(s * n_actions + a, 1) = static_cast<double>(a);
    }
  Vec q = predict(model, pairs);
  Mat out(n_states, n_actions);
  for (Index s = 0; s < n_states; ++s)
    for (Index a = 0; a < n_actions; ++a) out(s, a) = q[s * n_actions + a];
  return out;
}

/// One-hot encoding of (s, a) pairs for feeding index data to MLP feature
/// maps: [onehot(s), onehot(a)].
inline Mat encode_sa_onehot(const std::vector<Index>& s, const std::vector<Index>& a,
                            Index n_states, Index n_actions) {
  Mat out = Mat::Zero(static_cast<Index>(s.size()), n_states + n_actions);
  for (std::size_t i = 0; i < s.size(); ++i) {
    out(static_cast<Index>(i), s[i]) = 1.0;
    out(static_cast<Index>(i), n_states + a[i]) = 1.0;
  }
  return out;
}

/// Learned-feature OPE: the alternating DFIV loop with the modified
/// stage-2 design psi(s, a) - gamma * V phi(s, a). Next-state actions are
/// redrawn from the target policy every outer iteration. Feature nets
/// consume one-hot (s, a) encodings.
inline StructuralModel ope_train_mlp(const TransitionDataset& data, const Policy& target,
                                     FeatureMap psi, FeatureMap phi, double gamma,
                                     const DfivConfig& cfg, const MdpSpec& mdp,
                                     FitReport* report = nullptr) {
  target.validate();
  cfg.validate();
  psi.validate();
  phi.validate();
  OpeStages st = split_transitions(data);
  const Index m = static_cast<Index>(st.s1.size());
  const Index n = st.r2.size();
  const Index mb = detail::resolve_batch(cfg.batch_m, m, "batch_m");
  const Index nb = detail::resolve_batch(cfg.batch_n, n, "batch_n");
  const bool ic = cfg.intercept;
  const Index S = mdp.n_states, A = mdp.n_actions;

  Mat enc1 = encode_sa_onehot(st.s1, st.a1, S, A);
  Mat enc2 = encode_sa_onehot(st.s2, st.a2, S, A);

  RngStream batch_rng = RngStream(cfg.seed).fork(1);
  RngStream action_rng = RngStream(cfg.seed).fork(2);
  AdamState psi_state = AdamState::zeros_like(psi);
  AdamState phi_state = AdamState::zeros_like(phi);
  GradBuffer psi_grads = GradBuffer::zeros_like(psi);
  GradBuffer phi_grads = GradBuffer::zeros_like(phi);

  for (int iter = 0; iter < cfg.epochs; ++iter) {
    const auto idx1 = sample_indices(batch_rng, m, mb);
    const auto idx2 = sample_indices(batch_rng, n, nb);
    std::vector<Index> s1b, a1b, s1nb;
    for (Index i : idx1) {
      s1b.push_back(st.s1[static_cast<std::size_t>(i)]);
      a1b.push_back(st.a1[static_cast<std::size_t>(i)]);
      s1nb.push_back(st.s1_next[static_cast<std::size_t>(i)]);
    }
    std::vector<Index> a1_next = detail::draw_next_actions(target, s1nb, action_rng);
    Mat enc1_next = encode_sa_onehot(s1nb, a1_next, S, A);
    Mat enc1b = detail::gather_rows(enc1, idx1);
    Mat enc2b = detail::gather_rows(enc2, idx2);
    Vec r2b = detail::gather_rows(st.r2, idx2);

    IterRecord rec;
    rec.iter = iter;

    // Stage 1: regress psi(s', a') on phi(s, a); theta_Z updates.
    Mat psi_targets = with_intercept(forward(psi, enc1_next), ic);
    for (int t = 0; t < cfg.inner_stage1; ++t) {
      ForwardTrace trace;
      Mat phi1 = with_intercept(forward(phi, enc1b, &trace), ic);
      Stage1Sol sol = stage1_solve(psi_targets, phi1, cfg.lambda1);
      Mat resid = phi1 * sol.V.transpose() - psi_targets;
      rec.stage1_loss = resid.squaredNorm() / static_cast<double>(mb) +
                        cfg.lambda1 * sol.V.squaredNorm();
      detail::check_divergence(rec.stage1_loss, iter, cfg.divergence_threshold);
      Mat up_phi1 = (2.0 / static_cast<double>(mb)) * resid * sol.V;
      phi_grads.set_zero();
      backward(phi, trace, drop_intercept_column(up_phi1, ic), phi_grads);
      adam_step(phi, phi_grads, phi_state, cfg.lr);
    }

    // Stage 2: theta_X updates through both the direct psi term and the
    // stage-1 targets inside Vhat.
    Mat phi1 = with_intercept(forward(phi, enc1b), ic);
    Mat binv = detail::ridge_gram_inverse(phi1, cfg.lambda1);
    Mat k = phi1 * binv;
    Mat phi2 = with_intercept(forward(phi, enc2b), ic);
    for (int t = 0; t < cfg.inner_stage2; ++t) {
      ForwardTrace trace_next, trace2;
      Mat psi_next = with_intercept(forward(psi, enc1_next, &trace_next), ic);
      Mat vhat = psi_next.transpose() * k;
      Mat psi2 = with_intercept(forward(psi, enc2b, &trace2), ic);
      Mat design = psi2 - gamma * (phi2 * vhat.transpose());
      Vec uhat = ridge_solve(design, r2b, cfg.lambda2, nb);
      Vec resid = design * uhat - r2b;
      rec.stage2_loss = resid.squaredNorm() / static_cast<double>(nb) +
                        cfg.lambda2 * uhat.squaredNorm();
      detail::check_divergence(rec.stage2_loss, iter, cfg.divergence_threshold);

      Mat d_up = (2.0 / static_cast<double>(nb)) * resid * uhat.transpose();  // n x d1
      psi_grads.set_zero();
      backward(psi, trace2, drop_intercept_column(d_up, ic), psi_grads);
      Mat g2 = -gamma * d_up.transpose() * phi2;  // dL2/dVhat
      Mat up_psi_next = k * g2.transpose();
      backward(psi, trace_next, drop_intercept_column(up_psi_next, ic), psi_grads);
      adam_step(psi, psi_grads, psi_state, cfg.lr);
    }
    if (report) report->iters.push_back(rec);
  }

  // Full-data final solves with a fresh next-action draw.
  std::vector<Index> a1_next = detail::draw_next_actions(target, st.s1_next, action_rng);
  Mat psi_targets = with_intercept(forward(psi, encode_sa_onehot(st.s1_next, a1_next, S, A)), ic);
  Mat phi1 = with_intercept(forward(phi, enc1), ic);
  Stage1Sol sol = stage1_solve(psi_targets, phi1, cfg.lambda1);
  Mat psi2 = with_intercept(forward(psi, enc2), ic);
  Mat phi2 = with_intercept(forward(phi, enc2), ic);
  Mat design = psi2 - gamma * (phi2 * sol.V.transpose());
  Vec u = ridge_solve(design, st.r2, cfg.lambda2, n);

  if (report) {
    report->v_full = sol.V;
    report->phi = net_features(phi, ic);
  }
  StructuralModel model;
  model.u = std::move(u);
  model.psi = net_features(std::move(psi), ic);
  return model;
}

/// Q table for an MLP OPE model (psi consumes one-hot encodings).
inline Mat ope_q_table_mlp(const StructuralModel& model, Index n_states, Index n_actions) {
  std::vector<Index> s, a;
  for (Index i = 0; i < n_states; ++i)
    for (Index j = 0; j < n_actions; ++j) {
      s.push_back(i);
      a.push_back(j);
    }
  Vec q = predict(model, encode_sa_onehot(s, a, n_states, n_actions));
  Mat out(n_states, n_actions);
  for (Index i = 0; i < n_states; ++i)
    for (Index j = 0; j < n_actions; ++j) out(i, j) = q[i * n_actions + j];
  return out;
}

// ---------------------------------------------------------------------------
// Plain-text serialization
// ---------------------------------------------------------------------------

inline void save_mdp(std::ostream& os, const MdpSpec& mdp) {
  os << std::setprecision(17);
  os << "states " << mdp.n_states << " actions " << mdp.n_actions << " gamma " << mdp.gamma
     << " reward_noise_sd " << mdp.reward_noise_sd << " action_noise_p " << mdp.action_noise_p
     << "\n";
  os << "rho0";
  for (Index i = 0; i < mdp.rho0.size(); ++i) os << ' ' << mdp.rho0[i];
  os << "\n";
  for (Index s = 0; s < mdp.n_states; ++s)
    for (Index a = 0; a < mdp.n_actions; ++a)
      for (Index sn = 0; sn < mdp.n_states; ++sn)
        os << s << ' ' << a << ' ' << sn << ' ' << mdp.trans(mdp.sa_index(s, a), sn) << ' '
           << mdp.reward_mean(mdp.sa_index(s, a), sn) << "\n";
}

inline MdpSpec load_mdp(std::istream& is) {
  MdpSpec mdp;
  std::string tok;
  is >> tok >> mdp.n_states >> tok >> mdp.n_actions >> tok >> mdp.gamma >> tok >>
      mdp.reward_noise_sd >> tok >> mdp.action_noise_p;
  is >> tok;
  mdp.rho0.resize(mdp.n_states);
  for (Index i = 0; i < mdp.n_states; ++i) is >> mdp.rho0[i];
  mdp.trans = Mat::Zero(mdp.n_states * mdp.n_actions, mdp.n_states);
  mdp.reward_mean = Mat::Zero(mdp.n_states * mdp.n_actions, mdp.n_states);
  Index s, a, sn;
  double p, r;
  while (is >> s >> a >> sn >> p >> r) {
    mdp.trans(mdp.sa_index(s, a), sn) = p;
    mdp.reward_mean(mdp.sa_index(s, a), sn) = r;
  }
  mdp.validate();
  return mdp;
}

inline void write_transitions_csv(std::ostream& os, const TransitionDataset& data) {
  os << std::setprecision(17);
  os << "s,a,r,s_next\n";
  for (Index i = 0; i < data.size(); ++i) {
    const auto idx = static_cast<std::size_t>(i);
    os << data.s[idx] << ',' << data.a[idx] << ',' << data.r[i] << ',' << data.s_next[idx]
       << '\n';
  }
}

}  // namespace dfiv
