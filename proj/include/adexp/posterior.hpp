#pragma once

// Gaussian belief over the model parameter and its two transition modes:
// conjugate updates from observed batch summaries, and reparameterized
// forward simulation for planning.
//
// One scaling convention everywhere: H and I are per-unit averages and the
// unit count n multiplies the precision increment n * H I^+ H. The covariance
// is stored directly; precision is formed transiently per update so the
// planner's Sigma_t - Sigma_{t+1} subtraction stays direct.

#include <Eigen/Dense>
#include <vector>

#include "adexp/errors.hpp"
#include "adexp/matrix.hpp"
#include "adexp/model.hpp"
#include "json.hpp"

namespace adexp {

struct PosteriorState {
  Eigen::VectorXd beta;
  SymMatrix sigma;
  int epoch = 0;

  int dim() const { return int(beta.size()); }

  static PosteriorState prior(const Eigen::VectorXd& beta0, const SymMatrix& sigma0) {
    if (beta0.size() != sigma0.dim()) throw DimensionMismatch("PosteriorState: prior shapes");
    return {beta0, sigma0, 0};
  }

  static PosteriorState isotropic(int d, double lambda) {
    return {Eigen::VectorXd::Zero(d), SymMatrix(lambda * Eigen::MatrixXd::Identity(d, d)), 0};
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["beta"] = std::vector<double>(beta.data(), beta.data() + beta.size());
    auto rows = nlohmann::json::array();
    for (int i = 0; i < sigma.dim(); ++i) {
      auto row = nlohmann::json::array();
      for (int k = 0; k < sigma.dim(); ++k) row.push_back(sigma(i, k));
      rows.push_back(row);
    }
    j["sigma"] = rows;
    j["epoch"] = epoch;
    return j;
  }

  static PosteriorState from_json(const nlohmann::json& j) {
    std::vector<double> b = j.at("beta").get<std::vector<double>>();
    Eigen::VectorXd beta = Eigen::Map<Eigen::VectorXd>(b.data(), Eigen::Index(b.size()));
    auto rows = j.at("sigma");
    Eigen::MatrixXd s(rows.size(), rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t k = 0; k < rows.size(); ++k) s(Eigen::Index(i), Eigen::Index(k)) = rows[i][k].get<double>();
    PosteriorState st{beta, SymMatrix(s), j.value("epoch", 0)};
    return st;
  }
};

struct HorizonSpec {
  int total_epochs = 1;
  std::vector<long> batch_sizes;  // n_0 .. n_{T-1}

  static HorizonSpec uniform(int t, long n) {
    return {t, std::vector<long>(std::size_t(t), n)};
  }

  long remaining_units(int from_epoch) const {
    long n = 0;
    for (int t = from_epoch; t < total_epochs; ++t) n += batch_sizes[std::size_t(t)];
    return n;
  }
};

// Precision increment n * H I^+ H shared by the update and simulation paths.
inline Eigen::MatrixXd precision_increment(const SymMatrix& h, const SymMatrix& i, long n) {
  Eigen::MatrixXd w = lin::pseudo_inverse(i.mat());
  return lin::symmetrized(double(n) * h.mat() * w * h.mat());
}

inline PosteriorState update(const PosteriorState& state, const EstimateSummary& obs) {
  const int d = state.dim();
  if (obs.theta_hat.size() != d || obs.hessian.dim() != d || obs.grad_cov.dim() != d)
    throw DimensionMismatch("update: observation dimension");
  if (obs.hessian.mat().cwiseAbs().maxCoeff() == 0.0) {
    PosteriorState next = state;
    next.epoch += 1;
    return next;
  }
  Eigen::MatrixXd lambda = precision_increment(obs.hessian, obs.grad_cov, obs.n_units);
  Eigen::MatrixXd prior_precision = lin::spd_inverse(state.sigma.mat());
  Eigen::MatrixXd sigma_next = lin::spd_inverse(prior_precision + lambda);
  Eigen::VectorXd beta_next =
      sigma_next * (prior_precision * state.beta + lambda * obs.theta_hat);
  return {beta_next, SymMatrix(sigma_next), state.epoch + 1};
}

// One reparameterized transition: caller supplies the standard normal draw.
inline PosteriorState simulate_transition(const PosteriorState& state, const SymMatrix& h,
                                          const SymMatrix& i, long n, const Eigen::VectorXd& z) {
  const int d = state.dim();
  if (z.size() != d || h.dim() != d || i.dim() != d)
    throw DimensionMismatch("simulate_transition: dimension");
  Eigen::MatrixXd lambda = precision_increment(h, i, n);
  Eigen::MatrixXd prior_precision = lin::spd_inverse(state.sigma.mat());
  Eigen::MatrixXd sigma_next = lin::spd_inverse(prior_precision + lambda);
  Eigen::MatrixXd diff = lin::symmetrized(state.sigma.mat() - sigma_next);
  // Numerically indefinite differences below tolerance are clamped inside psd_sqrt.
  Eigen::MatrixXd root = lin::psd_sqrt(diff);
  return {state.beta + root * z, SymMatrix(sigma_next), state.epoch + 1};
}

// Forward simulation of a static plan. z_draws holds one standard normal
// vector per remaining epoch (rows). Deterministic given the draws.
template <typename AllocSeq>
std::vector<PosteriorState> rollout(const PosteriorState& state, const AllocSeq& plan_epochs,
                                    const ModelSpec& model, const ContextSet& ctx,
                                    const HorizonSpec& horizon, const Eigen::MatrixXd& z_draws) {
  std::vector<PosteriorState> traj{state};
  const int remaining = int(plan_epochs.size());
  if (z_draws.rows() < remaining) throw DimensionMismatch("rollout: draw count");
  PosteriorState cur = state;
  for (int s = 0; s < remaining; ++s) {
    const int epoch = state.epoch + s;
    const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(std::size_t(epoch));
    auto [h, i] = information_matrices(model, ctx, mu, plan_epochs[std::size_t(s)], state.beta);
    cur = simulate_transition(cur, h, i, horizon.batch_sizes.at(std::size_t(epoch)),
                              z_draws.row(s).transpose());
    traj.push_back(cur);
  }
  return traj;
}

}  // namespace adexp
