#pragma once

#include "dfiv/confounded.hpp"
#include "dfiv/core.hpp"
#include "dfiv/datagen.hpp"
#include "dfiv/ope.hpp"
#include "dfiv/serialize.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace dfiv {

// ---------------------------------------------------------------------------
// Out-of-sample stage losses and lambda tuning
// ---------------------------------------------------------------------------

/// Everything a fitted two-stage run leaves behind that the tuner needs:
/// both featurizers, the stage-1 matrix, and the stage-2 weights.
struct StageArtifacts {
  Featurizer psi;
  Featurizer phi;
  Mat v;
  Vec u;
};

inline StageArtifacts make_artifacts(const StructuralModel& model, const FitReport& report) {
  return StageArtifacts{model.psi, report.phi, report.v_full, model.u};
}

/// Held-out stage losses on joint (x, y, z) triples:
///   L1 = mean ||psi(x) - V phi(z)||^2,  L2 = mean (y - u . V phi(z))^2.
inline std::pair<double, double> oos_stage_losses(const StageArtifacts& art, const Mat& x,
                                                  const Vec& y, const Mat& z) {
  if (x.rows() != y.size() || x.rows() != z.rows())
    throw std::invalid_argument("oos_stage_losses: row mismatch");
  if (x.rows() < 1) throw std::invalid_argument("oos_stage_losses: no held-out rows");
  Mat psi = art.psi(x);
  Mat phi = art.phi(z);
  Mat projected = phi * art.v.transpose();
  const auto rows = static_cast<double>(x.rows());
  double l1 = (psi - projected).squaredNorm() / rows;
  double l2 = (y - projected * art.u).squaredNorm() / rows;
  return {l1, l2};
}

struct TuneGrid {
  std::vector<double> lambda1s;
  std::vector<double> lambda2s;

  void validate() const {
    auto check = [](const std::vector<double>& v, const char* name) {
      if (v.empty()) throw std::invalid_argument(std::string("TuneGrid: empty ") + name);
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] <= 0) throw std::invalid_argument(std::string("TuneGrid: nonpositive ") + name);
        if (i > 0 && v[i] <= v[i - 1])
          throw std::invalid_argument(std::string("TuneGrid: ") + name + " not ascending");
      }
    };
    check(lambda1s, "lambda1s");
    check(lambda2s, "lambda2s");
  }

  static TuneGrid defaults() { return TuneGrid{{1e-4, 1e-3, 1e-2, 1e-1, 1.0}, {1e-4, 1e-3, 1e-2, 1e-1, 1.0}}; }
};

struct TuneCandidate {
  double lambda = 0.0;
  double oos = std::numeric_limits<double>::quiet_NaN();
  bool ok = false;
  std::string error;
};

struct TuneResult {
  double lambda1 = 0.0, lambda2 = 0.0;
  double best_l1_oos = 0.0, best_l2_oos = 0.0;
  std::vector<TuneCandidate> stage1_candidates, stage2_candidates;
};

/// Grid search on the held-out stage losses: pick lambda1 minimizing the
/// stage-1 OOS loss (retraining per candidate at a reduced epoch budget),
/// then lambda2 minimizing the stage-2 OOS loss given lambda1. Ties break
/// toward the smaller lambda. Failed candidates are recorded and skipped.
inline TuneResult tune_lambdas(const IvDataset& data, const FeatureMap& psi0,
                               const FeatureMap& phi0, const TuneGrid& grid,
                               const DfivConfig& cfg) {
  grid.validate();
  if (!data.has_joint())
    throw std::invalid_argument("tune_lambdas: dataset has no held-out joint triples");

  DfivConfig tune_cfg = cfg;
  tune_cfg.epochs = cfg.epochs / 4;  // reduced budget per candidate

  auto evaluate = [&](double l1, double l2) -> std::pair<double, double> {
    DfivConfig c = tune_cfg;
    c.lambda1 = l1;
    c.lambda2 = l2;
    FitReport report;
    StructuralModel model = train_dfiv(data, psi0, phi0, c, &report);
    return oos_stage_losses(make_artifacts(model, report), *data.joint_x, *data.joint_y,
                            *data.joint_z);
  };

  TuneResult result;
  const double lambda2_ref = grid.lambda2s[grid.lambda2s.size() / 2];
  for (double l1 : grid.lambda1s) {
    TuneCandidate cand;
    cand.lambda = l1;
    try {
      cand.oos = evaluate(l1, lambda2_ref).first;
      cand.ok = true;
    } catch (const std::exception& e) {
      cand.error = e.what();
    }
    result.stage1_candidates.push_back(cand);
  }
  const TuneCandidate* best1 = nullptr;
  for (const auto& c : result.stage1_candidates)
    if (c.ok && (!best1 || c.oos < best1->oos)) best1 = &c;
  if (!best1) throw std::runtime_error("tune_lambdas: every lambda1 candidate failed");
  result.lambda1 = best1->lambda;
  result.best_l1_oos = best1->oos;

  for (double l2 : grid.lambda2s) {
    TuneCandidate cand;
    cand.lambda = l2;
    try {
      cand.oos = evaluate(result.lambda1, l2).second;
      cand.ok = true;
    } catch (const std::exception& e) {
      cand.error = e.what();
    }
    result.stage2_candidates.push_back(cand);
  }
  const TuneCandidate* best2 = nullptr;
  for (const auto& c : result.stage2_candidates)
    if (c.ok && (!best2 || c.oos < best2->oos)) best2 = &c;
  if (!best2) throw std::runtime_error("tune_lambdas: every lambda2 candidate failed");
  result.lambda2 = best2->lambda;
  result.best_l2_oos = best2->oos;
  return result;
}

// ---------------------------------------------------------------------------
// Joint-optimization ablation
// ---------------------------------------------------------------------------

struct CurveRecord {
  int iter = 0;
  double stage1_loss = std::numeric_limits<double>::quiet_NaN();
  double stage2_loss = std::numeric_limits<double>::quiet_NaN();
  double l_test = std::numeric_limits<double>::quiet_NaN();
};

struct AblationResult {
  std::vector<CurveRecord> curve;
  bool diverged = false;
  int diverged_at = -1;
  StructuralModel model;
  double final_l_test = std::numeric_limits<double>::quiet_NaN();
  double final_stage1_loss = std::numeric_limits<double>::quiet_NaN();
  double final_stage2_loss = std::numeric_limits<double>::quiet_NaN();
};

/// Gradient descent on the stage-2 loss with respect to theta_X and
/// theta_Z jointly (V and u still set analytically). This is the training
/// scheme DFIV's alternation replaces; divergence here is an expected
/// finding and is recorded rather than thrown.
inline AblationResult ablation_joint_training(const IvDataset& data, FeatureMap psi,
                                              FeatureMap phi, const DfivConfig& cfg,
                                              const Mat* test_x = nullptr,
                                              const Vec* test_truth = nullptr) {
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

  AblationResult result;

  auto record_l_test = [&](const Vec& u) -> double {
    if (!test_x || !test_truth) return std::numeric_limits<double>::quiet_NaN();
    Vec pred = with_intercept(forward(psi, *test_x), ic) * u;
    return mean_squared_error(pred, *test_truth);
  };

  for (int iter = 0; iter < cfg.epochs; ++iter) {
    const auto idx1 = sample_indices(batch_rng, m, mb);
    const auto idx2 = sample_indices(batch_rng, n, nb);
    Mat x1b = detail::gather_rows(data.stage1_x, idx1);
    Mat z1b = detail::gather_rows(data.stage1_z, idx1);
    Vec y2b = detail::gather_rows(data.stage2_y, idx2);
    Mat z2b = detail::gather_rows(data.stage2_z, idx2);

    CurveRecord rec;
    rec.iter = iter;
    try {
      ForwardTrace psi_trace, phi1_trace, phi2_trace;
      Mat psi1 = with_intercept(forward(psi, x1b, &psi_trace), ic);
      Mat phi1 = with_intercept(forward(phi, z1b, &phi1_trace), ic);
      Mat phi2 = with_intercept(forward(phi, z2b, &phi2_trace), ic);

      Mat binv = detail::ridge_gram_inverse(phi1, cfg.lambda1);
      Mat k = phi1 * binv;
      Mat vhat = psi1.transpose() * k;
      Mat design = phi2 * vhat.transpose();
      Vec uhat = ridge_solve(design, y2b, cfg.lambda2, nb);
      Vec resid = design * uhat - y2b;

      rec.stage1_loss = stage1_loss(psi1, phi1, Stage1Sol{vhat}, cfg.lambda1);
      rec.stage2_loss = resid.squaredNorm() / static_cast<double>(nb) +
                        cfg.lambda2 * uhat.squaredNorm();
      rec.l_test = record_l_test(uhat);
      detail::check_divergence(rec.stage2_loss, iter, cfg.divergence_threshold);
      detail::check_divergence(rec.stage1_loss, iter, cfg.divergence_threshold);

      // dL2/dVhat, with u at its analytic minimizer (envelope over u).
      Mat g2 = (2.0 / static_cast<double>(nb)) * uhat *
               (phi2.transpose() * resid).transpose();

      // theta_X path: Vhat depends on theta_X through its targets Psi1.
      Mat up_psi1 = k * g2.transpose();
      psi_grads.set_zero();
      backward(psi, psi_trace, drop_intercept_column(up_psi1, ic), psi_grads);

      // theta_Z path: the direct Phi2 term plus full differentiation of
      // Vhat through Phi1 (including the matrix inverse).
      Mat up_phi2 = (2.0 / static_cast<double>(nb)) * resid * (vhat.transpose() * uhat).transpose();
      Mat up_phi1 = detail::vhat_phi1_adjoint(psi1, phi1, vhat, binv, g2);
      phi_grads.set_zero();
      backward(phi, phi2_trace, drop_intercept_column(up_phi2, ic), phi_grads);
      backward(phi, phi1_trace, drop_intercept_column(up_phi1, ic), phi_grads);

      adam_step(psi, psi_grads, psi_state, cfg.lr);
      adam_step(phi, phi_grads, phi_state, cfg.lr);
    } catch (const std::exception&) {
      result.diverged = true;
      result.diverged_at = iter;
      result.curve.push_back(rec);
      break;
    }
    result.curve.push_back(rec);
  }

  try {
    FitReport report;
    result.model = fixed_feature_2sls(data, net_features(std::move(psi), ic),
                                      net_features(std::move(phi), ic), cfg.lambda1, cfg.lambda2,
                                      &report);
    result.final_stage1_loss = report.final_stage1_loss;
    result.final_stage2_loss = report.final_stage2_loss;
    if (test_x && test_truth)
      result.final_l_test = mean_squared_error(predict(result.model, *test_x), *test_truth);
  } catch (const std::exception&) {
    result.diverged = true;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Experiment runner
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_kv_text(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      const char* ws = " \t\r\n";
      const auto b = s.find_first_not_of(ws);
      if (b == std::string::npos) return std::string();
      const auto e = s.find_last_not_of(ws);
      return s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line without '=': " + line);
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return kv;
}

inline std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  return parse_kv_text(is);
}

struct RunSpec {
  std::string task = "demand";
  std::string estimator = "dfiv";
  std::uint64_t seed = 0;
  int repeats = 1;
  std::string out;
  int threads = 1;

  // demand
  double rho = 0.5;
  Index n_total = 5000;
  Index heldout = 0;
  // linear_gaussian
  double lg_slope = 2.0;
  double lg_strength = 1.0;
  double lg_confounding = 0.8;
  Index lg_n = 10000;
  // highdim
  Index hd_dim = 64;
  // ope
  Index mdp_states = 10;
  Index mdp_actions = 3;
  double mdp_gamma = 0.9;
  double mdp_action_noise = 0.3;
  double mdp_reward_noise = 0.1;
  Index ope_transitions = 100000;
  std::string ope_features = "onehot";  // onehot | mlp

  DfivConfig train;
  int sieve_degree = 3;
  Index rff_dim = 100;
  double rff_bandwidth = 0.0;  // 0 = median heuristic

  TuneGrid tune_grid = TuneGrid::defaults();

  void validate() const {
    static const std::map<std::string, std::vector<std::string>> allowed = {
        {"demand", {"dfiv", "naive_ridge", "linear_2sls", "sieve", "kiv_rff"}},
        {"demand_obs", {"dfiv_obs", "dfiv"}},
        {"highdim", {"dfiv", "kiv_rff", "naive_ridge"}},
        {"linear_gaussian", {"dfiv", "linear_2sls", "naive_ridge"}},
        {"ope", {"dfiv"}},
        {"ablation_joint", {"dfiv"}},
    };
    auto it = allowed.find(task);
    if (it == allowed.end()) throw std::invalid_argument("RunSpec: unknown task " + task);
    bool ok = false;
    for (const auto& e : it->second) ok = ok || e == estimator;
    if (!ok)
      throw std::invalid_argument("RunSpec: estimator " + estimator +
                                  " not valid for task " + task);
    if (repeats < 1) throw std::invalid_argument("RunSpec: repeats must be >= 1");
    if (threads < 1) throw std::invalid_argument("RunSpec: threads must be >= 1");
    if (ope_features != "onehot" && ope_features != "mlp")
      throw std::invalid_argument("RunSpec: ope_features must be onehot or mlp");
    train.validate();
  }

  static RunSpec from_kv(const std::map<std::string, std::string>& kv);
  std::map<std::string, std::string> echo() const;
};

namespace detail {

inline std::vector<double> parse_double_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
  return out;
}

inline bool parse_bool(const std::string& s) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off") return false;
  throw std::invalid_argument("cannot parse boolean: " + s);
}

}  // namespace detail

inline RunSpec RunSpec::from_kv(const std::map<std::string, std::string>& kv) {
  RunSpec s;
  for (const auto& [key, value] : kv) {
    if (key == "task") s.task = value;
    else if (key == "estimator") s.estimator = value;
    else if (key == "seed") s.seed = std::stoull(value);
    else if (key == "repeats") s.repeats = std::stoi(value);
    else if (key == "out") s.out = value;
    else if (key == "threads") s.threads = std::stoi(value);
    else if (key == "rho") s.rho = std::stod(value);
    else if (key == "n_total") s.n_total = std::stoll(value);
    else if (key == "heldout") s.heldout = std::stoll(value);
    else if (key == "lg_slope") s.lg_slope = std::stod(value);
    else if (key == "lg_strength") s.lg_strength = std::stod(value);
    else if (key == "lg_confounding") s.lg_confounding = std::stod(value);
    else if (key == "lg_n") s.lg_n = std::stoll(value);
    else if (key == "hd_dim") s.hd_dim = std::stoll(value);
    else if (key == "mdp_states") s.mdp_states = std::stoll(value);
    else if (key == "mdp_actions") s.mdp_actions = std::stoll(value);
    else if (key == "mdp_gamma") s.mdp_gamma = std::stod(value);
    else if (key == "mdp_action_noise") s.mdp_action_noise = std::stod(value);
    else if (key == "mdp_reward_noise") s.mdp_reward_noise = std::stod(value);
    else if (key == "ope_transitions") s.ope_transitions = std::stoll(value);
    else if (key == "ope_features") s.ope_features = value;
    else if (key == "lambda1") s.train.lambda1 = std::stod(value);
    else if (key == "lambda2") s.train.lambda2 = std::stod(value);
    else if (key == "batch_m") s.train.batch_m = std::stoll(value);
    else if (key == "batch_n") s.train.batch_n = std::stoll(value);
    else if (key == "t1") s.train.inner_stage1 = std::stoi(value);
    else if (key == "t2") s.train.inner_stage2 = std::stoi(value);
    else if (key == "lr") s.train.lr = std::stod(value);
    else if (key == "epochs") s.train.epochs = std::stoi(value);
    else if (key == "intercept") s.train.intercept = detail::parse_bool(value);
    else if (key == "early_stop_patience") s.train.early_stop_patience = std::stoi(value);
    else if (key == "sieve_degree") s.sieve_degree = std::stoi(value);
    else if (key == "rff_dim") s.rff_dim = std::stoll(value);
    else if (key == "rff_bandwidth") s.rff_bandwidth = std::stod(value);
    else if (key == "lambda1_grid") s.tune_grid.lambda1s = detail::parse_double_list(value);
    else if (key == "lambda2_grid") s.tune_grid.lambda2s = detail::parse_double_list(value);
    else throw std::invalid_argument("unknown config key: " + key);
  }
  return s;
}

inline std::map<std::string, std::string> RunSpec::echo() const {
  auto fmt = [](double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
  };
  std::map<std::string, std::string> e;
  e["task"] = task;
  e["estimator"] = estimator;
  e["seed"] = std::to_string(seed);
  e["repeats"] = std::to_string(repeats);
  e["threads"] = std::to_string(threads);
  e["rho"] = fmt(rho);
  e["n_total"] = std::to_string(n_total);
  e["heldout"] = std::to_string(heldout);
  e["lg_slope"] = fmt(lg_slope);
  e["lg_strength"] = fmt(lg_strength);
  e["lg_confounding"] = fmt(lg_confounding);
  e["lg_n"] = std::to_string(lg_n);
  e["hd_dim"] = std::to_string(hd_dim);
  e["mdp_states"] = std::to_string(mdp_states);
  e["mdp_actions"] = std::to_string(mdp_actions);
  e["mdp_gamma"] = fmt(mdp_gamma);
  e["mdp_action_noise"] = fmt(mdp_action_noise);
  e["mdp_reward_noise"] = fmt(mdp_reward_noise);
  e["ope_transitions"] = std::to_string(ope_transitions);
  e["ope_features"] = ope_features;
  e["lambda1"] = fmt(train.lambda1);
  e["lambda2"] = fmt(train.lambda2);
  e["batch_m"] = std::to_string(train.batch_m);
  e["batch_n"] = std::to_string(train.batch_n);
  e["t1"] = std::to_string(train.inner_stage1);
  e["t2"] = std::to_string(train.inner_stage2);
  e["lr"] = fmt(train.lr);
  e["epochs"] = std::to_string(train.epochs);
  e["intercept"] = train.intercept ? "1" : "0";
  e["early_stop_patience"] = std::to_string(train.early_stop_patience);
  e["sieve_degree"] = std::to_string(sieve_degree);
  e["rff_dim"] = std::to_string(rff_dim);
  e["rff_bandwidth"] = fmt(rff_bandwidth);
  return e;
}

struct RunResult {
  std::string task, estimator, metric_name;
  std::vector<std::uint64_t> seeds;
  std::vector<double> metrics;          // NaN where the repeat failed
  std::vector<std::string> errors;      // empty string where the repeat succeeded
  double mean = 0.0;
  double stderr_mean = 0.0;
  double wall_time_sec = 0.0;
  int threads = 1;
  std::map<std::string, std::string> config;
  ordered_json extra;  // task-specific payload (e.g. ablation curves)

  ordered_json to_json() const {
    ordered_json j;
    j["task"] = task;
    j["estimator"] = estimator;
    j["metric_name"] = metric_name;
    j["config"] = config;
    j["seeds"] = seeds;
    ordered_json ms = ordered_json::array();
    for (double v : metrics) {
      if (std::isfinite(v)) ms.push_back(v);
      else ms.push_back(nullptr);
    }
    j["metrics"] = std::move(ms);
    j["errors"] = errors;
    j["mean"] = mean;
    j["stderr"] = stderr_mean;
    j["threads"] = threads;
    if (!extra.is_null()) j["extra"] = extra;
    j["wall_time_sec"] = wall_time_sec;
    return j;
  }

  static RunResult from_json(const ordered_json& j) {
    RunResult r;
    r.task = j.at("task").get<std::string>();
    r.estimator = j.at("estimator").get<std::string>();
    r.metric_name = j.at("metric_name").get<std::string>();
    r.config = j.at("config").get<std::map<std::string, std::string>>();
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    for (const auto& v : j.at("metrics"))
      r.metrics.push_back(v.is_null() ? std::numeric_limits<double>::quiet_NaN()
                                      : v.get<double>());
    r.errors = j.at("errors").get<std::vector<std::string>>();
    r.mean = j.at("mean").get<double>();
    r.stderr_mean = j.at("stderr").get<double>();
    r.threads = j.at("threads").get<int>();
    if (j.contains("extra")) r.extra = j.at("extra");
    r.wall_time_sec = j.at("wall_time_sec").get<double>();
    return r;
  }
};

// ---------------------------------------------------------------------------
// Per-task wiring
// ---------------------------------------------------------------------------

namespace detail {

inline FeatureMap relu_net(const std::vector<Index>& dims, RngStream rng) {
  std::vector<Activation> acts(dims.size() - 1, Activation::Relu);
  return init_params(dims, acts, rng);
}

inline Featurizer rff_features(const Mat& reference_points, Index input_dim, Index rff_dim,
                               double bandwidth, RngStream rng, bool intercept) {
  const double bw = bandwidth > 0 ? bandwidth : median_heuristic(reference_points);
  return net_features(rff_map(input_dim, rff_dim, bw, rng), intercept);
}

// Demand-task estimator dispatch: fits on the generated data, returns the
// grid MSE.
inline double run_demand_once(const RunSpec& spec, std::uint64_t seed) {
  DemandConfig dc;
  dc.rho = spec.rho;
  dc.n_total = spec.n_total;
  dc.seed = seed;
  dc.heldout = spec.heldout;
  DemandData dd = demand_generate(dc);
  EvalGrid grid = demand_test_grid();
  RngStream init_rng(seed, 900);

  DfivConfig cfg = spec.train;
  cfg.seed = seed;

  if (spec.estimator == "dfiv") {
    IvDataset data = dd.iv_augmented();
    FeatureMap psi = relu_net({3, 128, 64, 32}, init_rng.fork(1));
    FeatureMap phi = relu_net({3, 128, 64, 32}, init_rng.fork(2));
    StructuralModel model = train_dfiv(data, psi, phi, cfg);
    return mean_squared_error(predict(model, grid.points), grid.truth);
  }
  if (spec.estimator == "dfiv_obs") {
    IvDataset data = dd.iv_observable();
    FeatureMap psi = init_params({1, 16, 1}, {Activation::Relu, Activation::Identity},
                                 init_rng.fork(1));
    FeatureMap phi = relu_net({3, 128, 64, 32}, init_rng.fork(2));
    FeatureMap xi = relu_net({2, 128, 64, 32}, init_rng.fork(3));
    ObsConfig ocfg;
    static_cast<DfivConfig&>(ocfg) = cfg;
    StructuralModel model = train_dfiv_obs(data, psi, phi, xi, ocfg);
    Vec pred = predict(model, grid.points.col(0), grid.points.rightCols(2));
    return mean_squared_error(pred, grid.truth);
  }
  if (spec.estimator == "naive_ridge") {
    Mat x(dd.cfg.n_total, 3);
    x.col(0) = dd.p.head(dd.cfg.n_total);
    x.col(1) = dd.t.head(dd.cfg.n_total);
    x.col(2) = dd.s.head(dd.cfg.n_total);
    StructuralModel model = naive_ridge(x, dd.y.head(dd.cfg.n_total),
                                        identity_features(3, true), spec.train.lambda2);
    return mean_squared_error(predict(model, grid.points), grid.truth);
  }
  if (spec.estimator == "linear_2sls") {
    StructuralModel model = fixed_feature_2sls(dd.iv_augmented(), identity_features(3, true),
                                               identity_features(3, true), spec.train.lambda1,
                                               spec.train.lambda2);
    return mean_squared_error(predict(model, grid.points), grid.truth);
  }
  if (spec.estimator == "sieve") {
    StructuralModel model = fixed_feature_2sls(
        dd.iv_augmented(), polynomial_features(3, spec.sieve_degree),
        polynomial_features(3, spec.sieve_degree), spec.train.lambda1, spec.train.lambda2);
    return mean_squared_error(predict(model, grid.points), grid.truth);
  }
  if (spec.estimator == "kiv_rff") {
    IvDataset data = dd.iv_augmented();
    Featurizer psi = rff_features(data.stage1_x, 3, spec.rff_dim, spec.rff_bandwidth,
                                  init_rng.fork(4), true);
    Featurizer phi = rff_features(data.stage1_z, 3, spec.rff_dim, spec.rff_bandwidth,
                                  init_rng.fork(5), true);
    StructuralModel model =
        fixed_feature_2sls(data, psi, phi, spec.train.lambda1, spec.train.lambda2);
    return mean_squared_error(predict(model, grid.points), grid.truth);
  }
  throw std::invalid_argument("run_demand_once: unhandled estimator " + spec.estimator);
}

inline double run_linear_gaussian_once(const RunSpec& spec, std::uint64_t seed) {
  LinearGaussianData lg = linear_gaussian_generate(spec.lg_slope, spec.lg_strength,
                                                   spec.lg_confounding, spec.lg_n, seed);
  Mat grid_x(601, 1);
  for (Index i = 0; i < 601; ++i) grid_x(i, 0) = -3.0 + 6.0 * static_cast<double>(i) / 600.0;
  Vec truth = spec.lg_slope * grid_x.col(0);

  DfivConfig cfg = spec.train;
  cfg.seed = seed;
  RngStream init_rng(seed, 901);

  if (spec.estimator == "linear_2sls") {
    StructuralModel model = fixed_feature_2sls(lg.iv(), identity_features(1, true),
                                               identity_features(1, true), spec.train.lambda1,
                                               spec.train.lambda2);
    return mean_squared_error(predict(model, grid_x), truth);
  }
  if (spec.estimator == "naive_ridge") {
    StructuralModel model =
        naive_ridge(Mat(lg.x), lg.y, identity_features(1, true), spec.train.lambda2);
    return mean_squared_error(predict(model, grid_x), truth);
  }
  if (spec.estimator == "dfiv") {
    FeatureMap psi = relu_net({1, 16, 8}, init_rng.fork(1));
    FeatureMap phi = relu_net({1, 16, 8}, init_rng.fork(2));
    StructuralModel model = train_dfiv(lg.iv(), psi, phi, cfg);
    return mean_squared_error(predict(model, grid_x), truth);
  }
  throw std::invalid_argument("run_linear_gaussian_once: unhandled estimator " + spec.estimator);
}

inline double run_highdim_once(const RunSpec& spec, std::uint64_t seed) {
  HighDimConfig hc;
  hc.dim = spec.hd_dim;
  HighDimData hd = highdim_generate(hc, spec.n_total, seed);
  EvalGrid grid = highdim_test_grid(hc);
  RngStream init_rng(seed, 902);

  DfivConfig cfg = spec.train;
  cfg.seed = seed;

  if (spec.estimator == "dfiv") {
    FeatureMap psi = init_params({spec.hd_dim, 128, 64, 32},
                                 {Activation::Relu, Activation::Relu, Activation::Tanh},
                                 init_rng.fork(1));
    FeatureMap phi = relu_net({3, 128, 64, 32}, init_rng.fork(2));
    StructuralModel model = train_dfiv(hd.iv(), psi, phi, cfg);
    return mean_squared_error(predict(model, grid.points), grid.truth);
  }
  if (spec.estimator == "kiv_rff") {
    IvDataset data = hd.iv();
    Featurizer psi = rff_features(data.stage1_x, spec.hd_dim, spec.rff_dim, spec.rff_bandwidth,
                                  init_rng.fork(3), true);
    Featurizer phi = rff_features(data.stage1_z, 3, spec.rff_dim, spec.rff_bandwidth,
                                  init_rng.fork(4), true);
    StructuralModel model =
        fixed_feature_2sls(data, psi, phi, spec.train.lambda1, spec.train.lambda2);
    return mean_squared_error(predict(model, grid.points), grid.truth);
  }
  if (spec.estimator == "naive_ridge") {
    StructuralModel model = naive_ridge(hd.x, hd.y, identity_features(spec.hd_dim, true),
                                        spec.train.lambda2);
    return mean_squared_error(predict(model, grid.points), grid.truth);
  }
  throw std::invalid_argument("run_highdim_once: unhandled estimator " + spec.estimator);
}

/// Deterministic non-uniform target policy for OPE runs: normalized
/// squared uniforms, floored away from zero.
inline Policy make_target_policy(Index n_states, Index n_actions, std::uint64_t seed) {
  RngStream rng(seed, 903);
  Policy p;
  p.probs.resize(n_states, n_actions);
  for (Index s = 0; s < n_states; ++s) {
    for (Index a = 0; a < n_actions; ++a) {
      const double u = rng.next_uniform();
      p.probs(s, a) = u * u + 0.05;
    }
    p.probs.row(s) /= p.probs.row(s).sum();
  }
  return p;
}

inline double run_ope_once(const RunSpec& spec, std::uint64_t seed) {
  // The MDP and target policy are pinned by the spec seed; repeats vary
  // only the transition data.
  MdpSpec mdp = random_mdp(spec.mdp_states, spec.mdp_actions, spec.mdp_reward_noise,
                           spec.mdp_gamma, spec.seed);
  mdp.action_noise_p = spec.mdp_action_noise;
  Policy target = make_target_policy(spec.mdp_states, spec.mdp_actions, spec.seed);
  Policy behavior = Policy::uniform(spec.mdp_states, spec.mdp_actions);
  Vec mu = Vec::Constant(spec.mdp_states, 1.0 / static_cast<double>(spec.mdp_states));

  TransitionDataset data = generate_transitions(mdp, behavior, spec.ope_transitions, seed, mu);
  const double v_true = policy_value(exact_q(mdp, target), mdp.rho0, target);

  Mat q_hat;
  if (spec.ope_features == "onehot") {
    Featurizer onehot = onehot_pair_features(spec.mdp_states, spec.mdp_actions);
    RngStream aprime_rng(seed, 904);
    StructuralModel model = ope_train(data, target, onehot, onehot, spec.train.lambda1,
                                      spec.train.lambda2, spec.mdp_gamma, aprime_rng);
    q_hat = ope_q_table(model, spec.mdp_states, spec.mdp_actions);
  } else {
    RngStream init_rng(seed, 905);
    const Index in_dim = spec.mdp_states + spec.mdp_actions;
    FeatureMap psi = relu_net({in_dim, 50, 50}, init_rng.fork(1));
    FeatureMap phi = relu_net({in_dim, 50, 50}, init_rng.fork(2));
    DfivConfig cfg = spec.train;
    cfg.seed = seed;
    StructuralModel model = ope_train_mlp(data, target, psi, phi, spec.mdp_gamma, cfg, mdp);
    q_hat = ope_q_table_mlp(model, spec.mdp_states, spec.mdp_actions);
  }
  return std::abs(policy_value(q_hat, mdp.rho0, target) - v_true);
}

inline double run_ablation_once(const RunSpec& spec, std::uint64_t seed, ordered_json* extra) {
  DemandConfig dc;
  dc.rho = spec.rho;
  dc.n_total = spec.n_total;
  dc.seed = seed;
  DemandData dd = demand_generate(dc);
  IvDataset data = dd.iv_augmented();
  EvalGrid grid = demand_test_grid();
  RngStream init_rng(seed, 900);
  FeatureMap psi = relu_net({3, 128, 64, 32}, init_rng.fork(1));
  FeatureMap phi = relu_net({3, 128, 64, 32}, init_rng.fork(2));

  DfivConfig cfg = spec.train;
  cfg.seed = seed;
  AblationResult joint =
      ablation_joint_training(data, psi, phi, cfg, &grid.points, &grid.truth);

  if (extra) {
    ordered_json curve = ordered_json::array();
    for (const auto& rec : joint.curve) {
      ordered_json cj;
      cj["iter"] = rec.iter;
      cj["stage1_loss"] = rec.stage1_loss;
      cj["stage2_loss"] = rec.stage2_loss;
      if (std::isfinite(rec.l_test)) cj["l_test"] = rec.l_test;
      curve.push_back(std::move(cj));
    }
    (*extra)["joint_curve"] = std::move(curve);
    (*extra)["joint_diverged"] = joint.diverged;
    (*extra)["joint_final_stage1_loss"] = joint.final_stage1_loss;
  }
  return joint.final_l_test;
}

inline double run_once(const RunSpec& spec, std::uint64_t seed, ordered_json* extra) {
  if (spec.task == "demand" || spec.task == "demand_obs") return run_demand_once(spec, seed);
  if (spec.task == "linear_gaussian") return run_linear_gaussian_once(spec, seed);
  if (spec.task == "highdim") return run_highdim_once(spec, seed);
  if (spec.task == "ope") return run_ope_once(spec, seed);
  if (spec.task == "ablation_joint") return run_ablation_once(spec, seed, extra);
  throw std::invalid_argument("run_once: unknown task " + spec.task);
}

}  // namespace detail

/// Runs `repeats` seeded repetitions of the spec, aggregates the metric,
/// and (when spec.out is set) writes one JSON document atomically.
/// Individual repeat failures are recorded; the call only fails when every
/// repeat fails.
inline RunResult run_experiment(const RunSpec& spec) {
  spec.validate();
  const auto start = std::chrono::steady_clock::now();

  RunResult result;
  result.task = spec.task;
  result.estimator = spec.estimator;
  result.metric_name = spec.task == "ope" ? "abs_policy_value_error" : "oos_mse";
  result.threads = spec.threads;
  result.config = spec.echo();
  result.metrics.assign(static_cast<std::size_t>(spec.repeats),
                        std::numeric_limits<double>::quiet_NaN());
  result.errors.assign(static_cast<std::size_t>(spec.repeats), "");
  for (int k = 0; k < spec.repeats; ++k) result.seeds.push_back(spec.seed + static_cast<std::uint64_t>(k));

  ordered_json extra;
  auto work = [&](int k) {
    try {
      result.metrics[static_cast<std::size_t>(k)] =
          detail::run_once(spec, result.seeds[static_cast<std::size_t>(k)],
                           k == 0 ? &extra : nullptr);
    } catch (const std::exception& e) {
      result.errors[static_cast<std::size_t>(k)] = e.what();
    }
  };

  if (spec.threads <= 1 || spec.repeats == 1) {
    for (int k = 0; k < spec.repeats; ++k) work(k);
  } else {
    std::atomic<int> next{0};
    auto worker = [&]() {
      for (int k = next.fetch_add(1); k < spec.repeats; k = next.fetch_add(1)) work(k);
    };
    std::vector<std::thread> pool;
    const int count = std::min(spec.threads, spec.repeats);
    pool.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  std::vector<double> ok;
  for (double v : result.metrics)
    if (std::isfinite(v)) ok.push_back(v);
  if (ok.empty()) throw std::runtime_error("run_experiment: every repeat failed");
  double sum = 0.0;
  for (double v : ok) sum += v;
  result.mean = sum / static_cast<double>(ok.size());
  if (ok.size() > 1) {
    double ss = 0.0;
    for (double v : ok) ss += (v - result.mean) * (v - result.mean);
    result.stderr_mean =
        std::sqrt(ss / static_cast<double>(ok.size() - 1)) / std::sqrt(static_cast<double>(ok.size()));
  }
  result.extra = std::move(extra);
  result.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  if (!spec.out.empty()) write_file_atomic(spec.out, result.to_json().dump(2) + "\n");
  return result;
}

}  // namespace dfiv
