#pragma once

// Parametric reward models over a finite weighted context set: feature maps,
// loss families, per-allocation information matrices, and per-batch ERM fits.
//
// Conventions. H and I are per-unit averages; the sampling-unit count enters
// the posterior update as an explicit multiplier. A sampling unit may emit
// several feature rows (a ranked slate does); n_units tracks units, not rows.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "adexp/errors.hpp"
#include "adexp/matrix.hpp"

namespace adexp {

enum class LossFamily { SquaredError, Logistic };

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct ContextSet {
  std::vector<Eigen::VectorXd> contexts;
  std::vector<Eigen::VectorXd> weights_per_epoch;  // one simplex weight vector per epoch
  Eigen::VectorXd population_weights;

  int num_contexts() const { return int(contexts.size()); }

  static ContextSet single() {
    ContextSet c;
    c.contexts = {Eigen::VectorXd::Ones(1)};
    c.population_weights = Eigen::VectorXd::Ones(1);
    return c;
  }

  // One-hot interval contexts, one per epoch, uniform population weights.
  static ContextSet intervals(int t_count) {
    ContextSet c;
    for (int t = 0; t < t_count; ++t) {
      Eigen::VectorXd e = Eigen::VectorXd::Zero(t_count);
      e[t] = 1.0;
      c.contexts.push_back(e);
      c.weights_per_epoch.push_back(Eigen::VectorXd::Zero(t_count));
      c.weights_per_epoch.back()[t] = 1.0;
    }
    c.population_weights = Eigen::VectorXd::Constant(t_count, 1.0 / t_count);
    return c;
  }

  void check_weights(double tol = 1e-12) const {
    auto check = [&](const Eigen::VectorXd& w) {
      if (w.size() != num_contexts()) throw DimensionMismatch("ContextSet: weight length");
      if (w.minCoeff() < 0.0 || std::abs(w.sum() - 1.0) > tol)
        throw ConfigError("ContextSet: weights must be a probability vector");
    };
    check(population_weights);
    for (const auto& w : weights_per_epoch) check(w);
  }
};

struct BatchData {
  struct Row {
    int context;
    int arm;
    double reward;
  };
  std::vector<Row> rows;
  int epoch = 0;
};

struct EstimateSummary {
  Eigen::VectorXd theta_hat;
  SymMatrix hessian;   // per-unit H_n
  SymMatrix grad_cov;  // per-unit I_n
  long n_units = 0;
  bool converged = true;
  int newton_iterations = 0;
};

class ModelSpec {
 public:
  // Feature rows for one (context, arm) pair; usually a single row.
  using FeatureFn = std::function<Eigen::MatrixXd(const Eigen::VectorXd&, int)>;
  // Cell index for one-hot models, keyed by context index within a ContextSet.
  using CellFn = std::function<int(int, int)>;

  int num_arms = 0;
  int dim = 0;
  LossFamily loss = LossFamily::SquaredError;
  Eigen::VectorXd noise_scale2;  // s^2 per arm
  FeatureFn feature_map;
  bool one_hot = false;  // every feature row is a single unit coordinate
  CellFn cell_index;

  Eigen::MatrixXd feature_rows(const Eigen::VectorXd& x, int a) const {
    return feature_map(x, a);
  }

  // phi(x,a) = e_a. Stationary K-armed model.
  static ModelSpec non_contextual(int k, const Eigen::VectorXd& s2) {
    ModelSpec m;
    m.num_arms = k;
    m.dim = k;
    m.noise_scale2 = s2;
    m.feature_map = [k](const Eigen::VectorXd&, int a) {
      Eigen::MatrixXd f = Eigen::MatrixXd::Zero(1, k);
      f(0, a) = 1.0;
      return f;
    };
    m.one_hot = true;
    m.cell_index = [](int, int a) { return a; };
    return m;
  }

  static ModelSpec non_contextual(int k, double s2) {
    return non_contextual(k, Eigen::VectorXd::Constant(k, s2));
  }

  // phi(x,a) = [x; e_a]: shared covariate effect plus an arm offset.
  static ModelSpec additive_effects(int k, int p, double s2) {
    ModelSpec m;
    m.num_arms = k;
    m.dim = p + k;
    m.noise_scale2 = Eigen::VectorXd::Constant(k, s2);
    m.feature_map = [k, p](const Eigen::VectorXd& x, int a) {
      Eigen::MatrixXd f = Eigen::MatrixXd::Zero(1, p + k);
      f.block(0, 0, 1, p) = x.transpose();
      f(0, p + a) = 1.0;
      return f;
    };
    return m;
  }

  // phi(x,a) = e_a kron x: per-arm coefficient vectors.
  static ModelSpec mixed_effects(int k, int p, double s2) {
    ModelSpec m;
    m.num_arms = k;
    m.dim = k * p;
    m.noise_scale2 = Eigen::VectorXd::Constant(k, s2);
    m.feature_map = [k, p](const Eigen::VectorXd& x, int a) {
      Eigen::MatrixXd f = Eigen::MatrixXd::Zero(1, k * p);
      f.block(0, a * p, 1, p) = x.transpose();
      return f;
    };
    return m;
  }

  // Mixed effects over one-hot interval contexts: one cell per (arm, interval).
  static ModelSpec interval_cells(int k, int t_count, const Eigen::VectorXd& s2) {
    ModelSpec m = mixed_effects(k, t_count, 1.0);
    m.noise_scale2 = s2;
    m.one_hot = true;
    m.cell_index = [t_count](int xi, int a) { return a * t_count + xi; };
    return m;
  }

  // Explicit per-(context, arm) feature rows.
  static ModelSpec table(int k, int d, const Eigen::VectorXd& s2,
                         std::vector<std::vector<Eigen::MatrixXd>> rows_by_context) {
    ModelSpec m;
    m.num_arms = k;
    m.dim = d;
    m.noise_scale2 = s2;
    auto tbl = std::make_shared<std::vector<std::vector<Eigen::MatrixXd>>>(std::move(rows_by_context));
    m.feature_map = nullptr;
    m.table_ = tbl;
    return m;
  }

  bool is_table() const { return table_ != nullptr; }

  Eigen::MatrixXd rows_for(const ContextSet& ctx, int xi, int a) const {
    if (table_) return (*table_)[std::size_t(xi)][std::size_t(a)];
    return feature_map(ctx.contexts[std::size_t(xi)], a);
  }

 private:
  std::shared_ptr<std::vector<std::vector<Eigen::MatrixXd>>> table_;
};

inline double mean_reward_rows(const ModelSpec& model, const Eigen::MatrixXd& rows,
                               const Eigen::VectorXd& theta) {
  Eigen::VectorXd z = rows * theta;
  if (model.loss == LossFamily::SquaredError) return z.sum();
  double r = 0.0;
  for (int i = 0; i < z.size(); ++i) r += sigmoid(z[i]);
  return r;
}

inline double mean_reward(const ModelSpec& model, const Eigen::VectorXd& theta,
                          const Eigen::VectorXd& x, int a) {
  return mean_reward_rows(model, model.feature_rows(x, a), theta);
}

inline double mean_reward(const ModelSpec& model, const ContextSet& ctx,
                          const Eigen::VectorXd& theta, int xi, int a) {
  return mean_reward_rows(model, model.rows_for(ctx, xi, a), theta);
}

// Population averaged reward of arm a under the given context weights.
inline double averaged_reward(const ModelSpec& model, const ContextSet& ctx,
                              const Eigen::VectorXd& weights, const Eigen::VectorXd& theta,
                              int a) {
  double r = 0.0;
  for (int xi = 0; xi < ctx.num_contexts(); ++xi)
    if (weights[xi] > 0.0) r += weights[xi] * mean_reward(model, ctx, theta, xi, a);
  return r;
}

// Population Hessian H(p) and gradient covariance I(p) under context weights
// mu and allocation rows P (contexts x arms), evaluated at theta_ref. Both are
// linear in P.
inline std::pair<SymMatrix, SymMatrix> information_matrices(
    const ModelSpec& model, const ContextSet& ctx, const Eigen::VectorXd& mu,
    const Eigen::MatrixXd& alloc, const Eigen::VectorXd& theta_ref) {
  if (theta_ref.size() != model.dim) throw DimensionMismatch("information_matrices: theta_ref");
  if (alloc.rows() != ctx.num_contexts() || alloc.cols() != model.num_arms)
    throw DimensionMismatch("information_matrices: allocation shape");
  if (mu.size() != ctx.num_contexts()) throw DimensionMismatch("information_matrices: weights");
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(model.dim, model.dim);
  Eigen::MatrixXd info = Eigen::MatrixXd::Zero(model.dim, model.dim);
  for (int xi = 0; xi < ctx.num_contexts(); ++xi) {
    if (mu[xi] <= 0.0) continue;
    for (int a = 0; a < model.num_arms; ++a) {
      double w = mu[xi] * alloc(xi, a);
      if (w <= 0.0) continue;
      Eigen::MatrixXd rows = model.rows_for(ctx, xi, a);
      for (int r = 0; r < rows.rows(); ++r) {
        Eigen::VectorXd phi = rows.row(r).transpose();
        Eigen::MatrixXd outer = phi * phi.transpose();
        if (model.loss == LossFamily::SquaredError) {
          h += (2.0 * w) * outer;
          info += (4.0 * w * model.noise_scale2[a]) * outer;
        } else {
          double s = sigmoid(phi.dot(theta_ref));
          double v = s * (1.0 - s);
          h += (w * v) * outer;
          info += (w * v) * outer;
        }
      }
    }
  }
  return {SymMatrix(h), SymMatrix(info)};
}

namespace detail {

struct LogisticFit {
  Eigen::VectorXd theta;
  bool converged;
  int iterations;
};

inline LogisticFit fit_logistic(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                int max_iter = 50, double grad_tol = 1e-8) {
  const int d = int(x.cols());
  const double n = double(x.rows());
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(d);
  int it = 0;
  for (; it < max_iter; ++it) {
    Eigen::VectorXd z = x * theta;
    Eigen::VectorXd s = z.unaryExpr([](double v) { return sigmoid(v); });
    Eigen::VectorXd grad = x.transpose() * (s - y) / n;
    Eigen::VectorXd w = s.array() * (1.0 - s.array());
    Eigen::MatrixXd hess = x.transpose() * w.asDiagonal() * x / n;
    Eigen::MatrixXd hinv = lin::pseudo_inverse(hess);
    // Convergence measured on the identified subspace only.
    Eigen::VectorXd proj_grad = hess * (hinv * grad);
    if (proj_grad.norm() <= grad_tol) return {theta, true, it};
    theta -= hinv * grad;
  }
  Eigen::VectorXd z = x * theta;
  Eigen::VectorXd s = z.unaryExpr([](double v) { return sigmoid(v); });
  Eigen::VectorXd grad = x.transpose() * (s - y) / n;
  Eigen::VectorXd w = s.array() * (1.0 - s.array());
  Eigen::MatrixXd hess = x.transpose() * w.asDiagonal() * x / n;
  Eigen::VectorXd proj_grad = hess * (lin::pseudo_inverse(hess) * grad);
  return {theta, proj_grad.norm() <= grad_tol, it};
}

}  // namespace detail

// Core ERM over raw feature rows. Directions outside the sampled span get a
// zero coefficient through the pseudoinverse.
inline EstimateSummary fit_rows(LossFamily loss, const Eigen::MatrixXd& x,
                                const Eigen::VectorXd& y, long n_units = -1) {
  if (x.rows() == 0) throw EmptyBatch("fit_rows: no data");
  if (x.rows() != y.size()) throw DimensionMismatch("fit_rows: row count");
  const double n_rows = double(x.rows());
  const double units = n_units > 0 ? double(n_units) : n_rows;

  EstimateSummary out;
  out.n_units = n_units > 0 ? n_units : long(x.rows());
  if (loss == LossFamily::SquaredError) {
    Eigen::MatrixXd a = x.transpose() * x / n_rows;
    Eigen::VectorXd b = x.transpose() * y / n_rows;
    out.theta_hat = lin::pseudo_inverse(a) * b;
    out.hessian = SymMatrix(2.0 * a * (n_rows / units));
    Eigen::VectorXd resid = y - x * out.theta_hat;
    Eigen::MatrixXd i = Eigen::MatrixXd::Zero(x.cols(), x.cols());
    for (int r = 0; r < x.rows(); ++r) {
      Eigen::VectorXd phi = x.row(r).transpose();
      i += (4.0 * resid[r] * resid[r]) * (phi * phi.transpose());
    }
    out.grad_cov = SymMatrix(i / units);
    out.converged = true;
  } else {
    auto fit = detail::fit_logistic(x, y);
    out.theta_hat = fit.theta;
    out.converged = fit.converged;
    out.newton_iterations = fit.iterations;
    Eigen::VectorXd z = x * fit.theta;
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(x.cols(), x.cols());
    Eigen::MatrixXd i = Eigen::MatrixXd::Zero(x.cols(), x.cols());
    for (int r = 0; r < x.rows(); ++r) {
      Eigen::VectorXd phi = x.row(r).transpose();
      double s = sigmoid(z[r]);
      Eigen::MatrixXd outer = phi * phi.transpose();
      h += s * (1.0 - s) * outer;
      double g = s - y[r];
      i += g * g * outer;
    }
    out.hessian = SymMatrix(h / units);
    out.grad_cov = SymMatrix(i / units);
  }
  return out;
}

inline EstimateSummary fit_batch(const ModelSpec& model, const ContextSet& ctx,
                                 const BatchData& data) {
  if (data.rows.empty()) throw EmptyBatch("fit_batch: empty batch");
  Eigen::MatrixXd x(data.rows.size(), model.dim);
  Eigen::VectorXd y(data.rows.size());
  for (std::size_t r = 0; r < data.rows.size(); ++r) {
    Eigen::MatrixXd rows = model.rows_for(ctx, data.rows[r].context, data.rows[r].arm);
    if (rows.rows() != 1) throw DimensionMismatch("fit_batch: expected single-row features");
    x.row(Eigen::Index(r)) = rows.row(0);
    y[Eigen::Index(r)] = data.rows[r].reward;
  }
  return fit_rows(model.loss, x, y);
}

}  // namespace adexp
