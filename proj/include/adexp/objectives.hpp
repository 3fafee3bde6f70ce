#pragma once

// Bayesian objective and constraint evaluation on posterior trajectories.
//
// Planning values are rewards to maximize. The allocation-independent
// E[max_a r_a] constant of the regret definitions is dropped from planning
// terms (it cannot move the gradient); realized_regret reports the full
// ground-truth regrets.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "adexp/errors.hpp"
#include "adexp/model.hpp"
#include "adexp/posterior.hpp"

namespace adexp {

enum class RegretKind { SimpleRegret, CumulativeRegret, PolicyRegret, TopKSum };

struct ObjectiveTerm {
  RegretKind kind;
  double weight = 1.0;
};

struct Constraint {
  enum class Kind { Coverage, Budget };
  Kind kind;
  double coverage_eps = 0.0;
  Eigen::VectorXd cost;  // per arm, Budget only
  double bound = 0.0;
};

struct ObjectiveSpec {
  std::vector<ObjectiveTerm> terms;
  std::vector<Constraint> constraints;
  int top_k = 1;

  void validate(int num_arms) const {
    if (terms.empty()) throw ConfigError("ObjectiveSpec: needs at least one term");
    for (const auto& t : terms)
      if (!std::isfinite(t.weight) || t.weight < 0.0)
        throw ConfigError("ObjectiveSpec: weights must be finite and nonnegative");
    if (top_k < 1 || top_k > num_arms) throw ConfigError("ObjectiveSpec: top_k out of range");
    for (const auto& c : constraints) {
      if (c.kind == Constraint::Kind::Coverage && c.coverage_eps * num_arms > 1.0)
        throw InfeasibleConstraint("coverage eps * K exceeds 1");
      if (c.kind == Constraint::Kind::Budget && c.bound < 0.0)
        throw InfeasibleConstraint("negative budget");
    }
  }

  double coverage_eps() const {
    for (const auto& c : constraints)
      if (c.kind == Constraint::Kind::Coverage) return c.coverage_eps;
    return 0.0;
  }

  const Constraint* budget() const {
    for (const auto& c : constraints)
      if (c.kind == Constraint::Kind::Budget) return &c;
    return nullptr;
  }

  bool has_term(RegretKind k) const {
    for (const auto& t : terms)
      if (t.kind == k && t.weight > 0.0) return true;
    return false;
  }

  static ObjectiveSpec simple() { return {{{RegretKind::SimpleRegret, 1.0}}, {}, 1}; }
};

inline double top_k_sum(const Eigen::VectorXd& r, int k) {
  std::vector<double> v(r.data(), r.data() + r.size());
  std::sort(v.begin(), v.end(), std::greater<double>());
  return std::accumulate(v.begin(), v.begin() + k, 0.0);
}

// Arm indices of the k largest entries, ties resolved toward lower index.
inline std::vector<int> top_k_arms(const Eigen::VectorXd& r, int k) {
  std::vector<int> idx(std::size_t(r.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return r[a] > r[b]; });
  idx.resize(std::size_t(k));
  return idx;
}

inline int argmax_lowest(const Eigen::VectorXd& r) {
  int best = 0;
  for (int a = 1; a < r.size(); ++a)
    if (r[a] > r[best]) best = a;
  return best;
}

inline Eigen::VectorXd posterior_mean_rewards(const ModelSpec& model, const ContextSet& ctx,
                                              const Eigen::VectorXd& beta) {
  Eigen::VectorXd r(model.num_arms);
  for (int a = 0; a < model.num_arms; ++a)
    r[a] = averaged_reward(model, ctx, ctx.population_weights, beta, a);
  return r;
}

// Value of one simulated trajectory under a static plan; scenarios are
// averaged by the caller.
template <typename AllocSeq>
double planning_value(const std::vector<PosteriorState>& traj, const AllocSeq& plan_epochs,
                      const ObjectiveSpec& spec, const ModelSpec& model, const ContextSet& ctx,
                      const HorizonSpec& horizon) {
  if (traj.empty()) throw DimensionMismatch("planning_value: empty trajectory");
  const int start = traj.front().epoch;
  const Eigen::VectorXd& beta_final = traj.back().beta;
  double value = 0.0;
  for (const auto& term : spec.terms) {
    switch (term.kind) {
      case RegretKind::SimpleRegret: {
        Eigen::VectorXd r = posterior_mean_rewards(model, ctx, beta_final);
        value += term.weight * r.maxCoeff();
        break;
      }
      case RegretKind::TopKSum: {
        Eigen::VectorXd r = posterior_mean_rewards(model, ctx, beta_final);
        value += term.weight * top_k_sum(r, spec.top_k);
        break;
      }
      case RegretKind::PolicyRegret: {
        double v = 0.0;
        for (int xi = 0; xi < ctx.num_contexts(); ++xi) {
          if (ctx.population_weights[xi] <= 0.0) continue;
          double best = -std::numeric_limits<double>::infinity();
          for (int a = 0; a < model.num_arms; ++a)
            best = std::max(best, mean_reward(model, ctx, beta_final, xi, a));
          v += ctx.population_weights[xi] * best;
        }
        value += term.weight * v;
        break;
      }
      case RegretKind::CumulativeRegret: {
        double v = 0.0;
        for (std::size_t s = 0; s < plan_epochs.size(); ++s) {
          const int epoch = start + int(s);
          const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(std::size_t(epoch));
          const Eigen::VectorXd& beta = traj.at(s).beta;
          const Eigen::MatrixXd& p = plan_epochs[s];
          double epoch_reward = 0.0;
          for (int xi = 0; xi < ctx.num_contexts(); ++xi) {
            if (mu[xi] <= 0.0) continue;
            for (int a = 0; a < model.num_arms; ++a)
              if (p(xi, a) > 0.0)
                epoch_reward += mu[xi] * p(xi, a) * mean_reward(model, ctx, beta, xi, a);
          }
          v += double(horizon.batch_sizes.at(std::size_t(epoch))) * epoch_reward;
        }
        value += term.weight * v;
        break;
      }
    }
  }
  return value;
}

// Terminal deployment decision from the epoch-T posterior.
inline Eigen::MatrixXd final_decision(const PosteriorState& state, const ObjectiveSpec& spec,
                                      const ModelSpec& model, const ContextSet& ctx) {
  const int c = ctx.num_contexts();
  const int k = model.num_arms;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(c, k);
  RegretKind kind = RegretKind::SimpleRegret;
  for (const auto& t : spec.terms)
    if (t.kind != RegretKind::CumulativeRegret) {
      kind = t.kind;
      break;
    }
  if (kind == RegretKind::PolicyRegret) {
    for (int xi = 0; xi < c; ++xi) {
      Eigen::VectorXd r(k);
      for (int a = 0; a < k; ++a) r[a] = mean_reward(model, ctx, state.beta, xi, a);
      out(xi, argmax_lowest(r)) = 1.0;
    }
    return out;
  }
  Eigen::VectorXd r = posterior_mean_rewards(model, ctx, state.beta);
  if (kind == RegretKind::TopKSum) {
    for (int a : top_k_arms(r, spec.top_k)) out.col(a).setConstant(1.0 / double(spec.top_k));
    return out;
  }
  out.col(argmax_lowest(r)).setOnes();
  return out;
}

struct RealizedRegret {
  double simple = 0.0;
  double cumulative = 0.0;
  double policy = 0.0;
  double top_k = 0.0;
  int chosen_arm = -1;
};

// Ground-truth regrets under the true parameter; simulation use only.
inline RealizedRegret realized_regret(const Eigen::VectorXd& theta_star,
                                      const std::vector<Eigen::MatrixXd>& deployed,
                                      const Eigen::MatrixXd& final_alloc, const ModelSpec& model,
                                      const ContextSet& ctx, const HorizonSpec& horizon,
                                      int top_k = 1) {
  RealizedRegret out;
  Eigen::VectorXd rbar(model.num_arms);
  for (int a = 0; a < model.num_arms; ++a)
    rbar[a] = averaged_reward(model, ctx, ctx.population_weights, theta_star, a);

  Eigen::VectorXd marginal = Eigen::VectorXd::Zero(model.num_arms);
  for (int xi = 0; xi < ctx.num_contexts(); ++xi)
    marginal += ctx.population_weights[xi] * final_alloc.row(xi).transpose();
  out.simple = rbar.maxCoeff() - rbar.dot(marginal);
  out.chosen_arm = argmax_lowest(marginal);
  out.top_k = top_k_sum(rbar, top_k) - double(top_k) * rbar.dot(marginal);

  double cum = 0.0;
  for (std::size_t s = 0; s < deployed.size(); ++s) {
    const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(s);
    double epoch_regret = 0.0;
    for (int xi = 0; xi < ctx.num_contexts(); ++xi) {
      if (mu[xi] <= 0.0) continue;
      double best = -std::numeric_limits<double>::infinity();
      double got = 0.0;
      for (int a = 0; a < model.num_arms; ++a) {
        double r = mean_reward(model, ctx, theta_star, xi, a);
        best = std::max(best, r);
        got += deployed[s](xi, a) * r;
      }
      epoch_regret += mu[xi] * (best - got);
    }
    cum += double(horizon.batch_sizes.at(s)) * epoch_regret;
  }
  out.cumulative = cum;

  double pol = 0.0;
  for (int xi = 0; xi < ctx.num_contexts(); ++xi) {
    if (ctx.population_weights[xi] <= 0.0) continue;
    double best = -std::numeric_limits<double>::infinity();
    double got = 0.0;
    for (int a = 0; a < model.num_arms; ++a) {
      double r = mean_reward(model, ctx, theta_star, xi, a);
      best = std::max(best, r);
      got += final_alloc(xi, a) * r;
    }
    pol += ctx.population_weights[xi] * (best - got);
  }
  out.policy = pol;
  return out;
}

struct ConstraintOutcome {
  Eigen::MatrixXd alloc;
  double penalty = 0.0;
  double budget_after = 0.0;
};

// Coverage is an exact affine map onto the eps-truncated simplex. Budget
// feasibility is enforced by scaling toward the cheapest arm; the quadratic
// penalty used during optimization is reported for diagnostics.
inline ConstraintOutcome apply_constraints(const Eigen::MatrixXd& raw_alloc,
                                           const ObjectiveSpec& spec, const ContextSet& ctx,
                                           int epoch, long n_t, double budget_remaining,
                                           double penalty_weight = 1e4) {
  ConstraintOutcome out;
  out.alloc = raw_alloc;
  out.budget_after = budget_remaining;
  const int k = int(raw_alloc.cols());
  double eps = spec.coverage_eps();
  if (eps > 0.0) {
    if (eps * k > 1.0) throw InfeasibleConstraint("coverage eps * K exceeds 1");
    out.alloc = (Eigen::MatrixXd::Constant(raw_alloc.rows(), k, eps) +
                 (1.0 - k * eps) * raw_alloc);
  }
  const Constraint* budget = spec.budget();
  if (budget) {
    const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(std::size_t(epoch));
    auto epoch_cost = [&](const Eigen::MatrixXd& p) {
      double c = 0.0;
      for (int xi = 0; xi < p.rows(); ++xi) c += mu[xi] * budget->cost.dot(p.row(xi).transpose());
      return c * double(n_t);
    };
    double cheapest_cost = budget->cost.minCoeff() * double(n_t);
    if (budget_remaining < cheapest_cost - 1e-9)
      throw InfeasibleConstraint("remaining budget below cheapest achievable cost");
    int cheapest = 0;
    budget->cost.minCoeff(&cheapest);
    double cost = epoch_cost(out.alloc);
    double excess = std::max(0.0, cost - budget_remaining);
    out.penalty = penalty_weight * excess * excess;
    if (excess > 0.0) {
      // Solve for the mix toward the cheapest arm that restores feasibility.
      Eigen::MatrixXd point = Eigen::MatrixXd::Zero(out.alloc.rows(), k);
      point.col(cheapest).setOnes();
      double point_cost = epoch_cost(point);
      double gamma = (cost - budget_remaining) / std::max(cost - point_cost, 1e-300);
      gamma = std::min(1.0, std::max(0.0, gamma));
      out.alloc = (1.0 - gamma) * out.alloc + gamma * point;
      cost = epoch_cost(out.alloc);
    }
    out.budget_after = budget_remaining - cost;
  }
  return out;
}

}  // namespace adexp
