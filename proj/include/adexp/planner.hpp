#pragma once

// Residual-horizon planning: each epoch, maximize the sample-average planning
// value of a static allocation sequence over the remaining horizon, deploy the
// first allocation, and re-solve after the next batch.
//
// The optimizer is Adam over per-epoch softmax logits. The objective is a
// quasi-Monte Carlo sample average over belief rollouts, with one fixed
// scenario set per solve (common random numbers), so each solve is a
// deterministic optimization problem.
//
// Gradients are exact reverse-mode derivatives of that sample average, taped
// by hand over the fixed computation graph:
//
//   logits -> softmax/coverage -> H(p), I(p)          (linear assembly)
//          -> precision chain  Q_{s+1} = Q_s + n_s H I^+ H
//          -> covariances      Sigma_s = Q_s^{-1}
//          -> shrinkage roots  S_s = (Sigma_s - Sigma_{s+1})^{1/2}
//          -> mean paths       beta_{s+1} = beta_s + S_s z_s
//          -> objective        (max / top-k via the active-index subgradient)
//
// Backward rules used: inverse  (A^-1)^bar = -A^-1 Abar A^-1;
// pseudoinverse (fixed range)   (I^+)^bar  = -I^+ Ibar I^+;
// matrix square root through the eigenbasis of D with the 1/(sqrt(l_i)+sqrt(l_j))
// kernel. The pseudoinverse rule is exact here because the feature span, and
// hence the range of I(p), does not move with p while the softmax keeps every
// probability positive.
//
// Models whose feature rows are unit coordinates (per-arm or per-(arm,interval)
// cells) with a squared-error loss keep every matrix in the chain diagonal;
// a vectorized scalar path handles those, and the dense path covers the rest.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <vector>

#include "adexp/errors.hpp"
#include "adexp/matrix.hpp"
#include "adexp/model.hpp"
#include "adexp/objectives.hpp"
#include "adexp/posterior.hpp"
#include "adexp/qmc.hpp"
#include "json.hpp"

namespace adexp {

struct AllocationPlan {
  int start_epoch = 0;
  std::vector<Eigen::MatrixXd> probs;   // per remaining epoch, contexts x arms
  std::vector<Eigen::MatrixXd> logits;  // same shape

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["epoch"] = start_epoch;
    auto epochs = nlohmann::json::array();
    for (const auto& p : probs) {
      auto rows = nlohmann::json::array();
      for (int xi = 0; xi < p.rows(); ++xi) {
        auto row = nlohmann::json::array();
        for (int a = 0; a < p.cols(); ++a) row.push_back(p(xi, a));
        rows.push_back(row);
      }
      epochs.push_back(rows);
    }
    j["contexts"] = epochs.empty() ? 0 : probs.front().rows();
    j["probs"] = epochs;
    return j;
  }
};

struct OptimizerConfig {
  double learning_rate = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int num_steps = 200;
  int num_scenarios = 512;
  bool qmc = true;
  std::uint64_t seed = 0;
  double penalty_weight = 1e4;
  bool tie_context_rows = false;  // optimize one shared allocation row

  void validate() const {
    if (learning_rate <= 0.0) throw ConfigError("OptimizerConfig: learning_rate must be positive");
    if (num_scenarios < 2) throw ConfigError("OptimizerConfig: need at least 2 scenarios");
  }
};

namespace planner_detail {

inline Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd p(logits.rows(), logits.cols());
  for (int r = 0; r < logits.rows(); ++r) {
    Eigen::ArrayXd row = logits.row(r).array() - logits.row(r).maxCoeff();
    Eigen::ArrayXd e = row.exp();
    p.row(r) = (e / e.sum()).matrix().transpose();
  }
  return p;
}

inline Eigen::MatrixXd softmax_rows_backward(const Eigen::MatrixXd& p_soft,
                                             const Eigen::MatrixXd& p_bar) {
  Eigen::MatrixXd l_bar(p_soft.rows(), p_soft.cols());
  for (int r = 0; r < p_soft.rows(); ++r) {
    double inner = p_soft.row(r).dot(p_bar.row(r));
    l_bar.row(r) = p_soft.row(r).cwiseProduct(p_bar.row(r) -
                                              Eigen::RowVectorXd::Constant(p_soft.cols(), inner));
  }
  return l_bar;
}

// Inputs bound for one solve. theta_ref for the information matrices is the
// posterior mean at solve time, held fixed through the rollout so that the
// covariance path is deterministic given the plan.
struct Problem {
  const ModelSpec* model;
  const ContextSet* ctx;
  const HorizonSpec* horizon;
  const ObjectiveSpec* objective;
  PosteriorState state;
  double budget_remaining = std::numeric_limits<double>::infinity();
  double penalty_weight = 1e4;

  int remaining() const { return horizon->total_epochs - state.epoch; }
};

struct EvalResult {
  double value = 0.0;
  std::vector<Eigen::MatrixXd> grad;  // per epoch, contexts x arms; empty if not requested
};

inline bool is_diagonal(const Eigen::MatrixXd& m) {
  double scale = std::max(m.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  for (int i = 0; i < m.rows(); ++i)
    for (int j = 0; j < m.cols(); ++j)
      if (i != j && std::abs(m(i, j)) > 1e-10 * scale) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Diagonal path. Requires a squared-error one-hot model and a diagonal prior;
// every cell evolves independently with precision q_j += n mu p / s^2.
// ---------------------------------------------------------------------------
class DiagonalEvaluator {
 public:
  DiagonalEvaluator(const Problem& pb) : pb_(pb) {
    const auto& model = *pb.model;
    const auto& ctx = *pb.ctx;
    M_ = pb.remaining();
    J_ = model.dim;
    C_ = ctx.num_contexts();
    K_ = model.num_arms;
    cell_.assign(static_cast<std::size_t>(C_), std::vector<int>(static_cast<std::size_t>(K_)));
    cell_arm_.assign(static_cast<std::size_t>(J_), -1);
    for (int xi = 0; xi < C_; ++xi)
      for (int a = 0; a < K_; ++a) {
        int j = model.cell_index(xi, a);
        cell_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)] = j;
        if (cell_arm_[static_cast<std::size_t>(j)] >= 0 && cell_arm_[static_cast<std::size_t>(j)] != a)
          throw NumericalFailure("diagonal planner: cell shared across arms");
        cell_arm_[static_cast<std::size_t>(j)] = a;
      }
    q0_ = pb.state.sigma.mat().diagonal().cwiseInverse();
    // Population arm weights: rbar_a(beta) = sum_x mu(x) beta_cell(x,a).
    arm_weight_ = Eigen::MatrixXd::Zero(J_, K_);
    for (int xi = 0; xi < C_; ++xi) {
      double w = ctx.population_weights[xi];
      if (w <= 0.0) continue;
      for (int a = 0; a < K_; ++a) arm_weight_(cell_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)], a) += w;
    }
  }

  EvalResult evaluate(const std::vector<Eigen::MatrixXd>& logits, const Eigen::MatrixXd& z,
                      bool want_grad) const {
    const auto& model = *pb_.model;
    const auto& ctx = *pb_.ctx;
    const auto& spec = *pb_.objective;
    const int N = int(z.rows());
    const double eps = spec.coverage_eps();
    const int t0 = pb_.state.epoch;

    std::vector<Eigen::MatrixXd> psoft(static_cast<std::size_t>(M_)), p(static_cast<std::size_t>(M_));
    for (int s = 0; s < M_; ++s) {
      psoft[static_cast<std::size_t>(s)] = softmax_rows(logits[static_cast<std::size_t>(s)]);
      p[static_cast<std::size_t>(s)] = eps > 0.0
                              ? Eigen::MatrixXd(Eigen::MatrixXd::Constant(C_, K_, eps) +
                                                (1.0 - K_ * eps) * psoft[static_cast<std::size_t>(s)])
                              : psoft[static_cast<std::size_t>(s)];
    }

    // Precision chain per cell.
    Eigen::MatrixXd w(M_, J_);  // w_{s,j} = sum mu p over contributors
    w.setZero();
    for (int s = 0; s < M_; ++s) {
      const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
      for (int xi = 0; xi < C_; ++xi) {
        if (mu[xi] <= 0.0) continue;
        for (int a = 0; a < K_; ++a)
          w(s, cell_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)]) += mu[xi] * p[static_cast<std::size_t>(s)](xi, a);
      }
    }
    Eigen::MatrixXd q(M_ + 1, J_), sig2(M_ + 1, J_);
    q.row(0) = q0_.transpose();
    sig2.row(0) = q0_.cwiseInverse().transpose();
    for (int s = 0; s < M_; ++s) {
      long n = pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s));
      for (int j = 0; j < J_; ++j) {
        double s2 = model.noise_scale2[cell_arm_[static_cast<std::size_t>(j)]];
        q(s + 1, j) = q(s, j) + double(n) * w(s, j) / s2;
      }
      sig2.row(s + 1) = q.row(s + 1).cwiseInverse();
    }
    Eigen::MatrixXd root(M_, J_);
    for (int s = 0; s < M_; ++s)
      root.row(s) = (sig2.row(s) - sig2.row(s + 1)).cwiseMax(0.0).cwiseSqrt();

    // Mean paths, scenarios x cells per epoch.
    std::vector<Eigen::MatrixXd> beta(static_cast<std::size_t>(M_) + 1);
    beta[0] = pb_.state.beta.transpose().replicate(N, 1);
    for (int s = 0; s < M_; ++s)
      beta[static_cast<std::size_t>(s) + 1] =
          beta[static_cast<std::size_t>(s)] + z.middleCols(s * J_, J_) * root.row(s).asDiagonal();
    if (!beta[static_cast<std::size_t>(M_)].allFinite())
      throw NumericalFailure("planner: non-finite mean path");

    double value = 0.0;
    std::vector<Eigen::MatrixXd> g;  // adjoint of beta per epoch (scenarios x cells)
    if (want_grad) g.assign(static_cast<std::size_t>(M_) + 1, Eigen::MatrixXd::Zero(N, J_));
    Eigen::MatrixXd pbar;
    if (want_grad) pbar = Eigen::MatrixXd::Zero(M_ * C_, K_);
    auto pbar_at = [&](int s) { return pbar.middleRows(s * C_, C_); };

    double w_simple = 0.0, w_topk = 0.0, w_policy = 0.0, w_cum = 0.0;
    for (const auto& t : spec.terms) switch (t.kind) {
        case RegretKind::SimpleRegret: w_simple += t.weight; break;
        case RegretKind::TopKSum: w_topk += t.weight; break;
        case RegretKind::PolicyRegret: w_policy += t.weight; break;
        case RegretKind::CumulativeRegret: w_cum += t.weight; break;
      }

    const Eigen::MatrixXd& bT = beta[static_cast<std::size_t>(M_)];
    if (w_simple > 0.0 || w_topk > 0.0) {
      Eigen::MatrixXd r = bT * arm_weight_;  // scenarios x arms
      if (w_simple > 0.0) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
          int best;
          acc += r.row(n).maxCoeff(&best);
          if (want_grad)
            g[static_cast<std::size_t>(M_)].row(n) += (w_simple / N) * arm_weight_.col(best).transpose();
        }
        value += w_simple * acc / N;
      }
      if (w_topk > 0.0) {
        const int k = spec.top_k;
        std::vector<int> idx(static_cast<std::size_t>(K_));
        for (int n = 0; n < N; ++n) {
          std::iota(idx.begin(), idx.end(), 0);
          std::stable_sort(idx.begin(), idx.end(),
                           [&](int a, int b) { return r(n, a) > r(n, b); });
          for (int m = 0; m < k; ++m) {
            value += w_topk * r(n, idx[static_cast<std::size_t>(m)]) / N;
            if (want_grad)
              g[static_cast<std::size_t>(M_)].row(n) +=
                  (w_topk / N) * arm_weight_.col(idx[static_cast<std::size_t>(m)]).transpose();
          }
        }
      }
    }
    if (w_policy > 0.0) {
      for (int xi = 0; xi < C_; ++xi) {
        double mu = ctx.population_weights[xi];
        if (mu <= 0.0) continue;
        for (int n = 0; n < N; ++n) {
          int best = 0;
          double besv = -std::numeric_limits<double>::infinity();
          for (int a = 0; a < K_; ++a) {
            double v = bT(n, cell_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)]);
            if (v > besv) {
              besv = v;
              best = a;
            }
          }
          value += w_policy * mu * besv / N;
          if (want_grad)
            g[static_cast<std::size_t>(M_)](n, cell_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(best)]) +=
                w_policy * mu / N;
        }
      }
    }
    if (w_cum > 0.0) {
      for (int s = 0; s < M_; ++s) {
        double n_t = double(pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s)));
        Eigen::RowVectorXd mean_beta = beta[static_cast<std::size_t>(s)].colwise().mean();
        value += w_cum * n_t * w.row(s).dot(mean_beta);
        if (want_grad) {
          for (int n = 0; n < N; ++n)
            g[static_cast<std::size_t>(s)].row(n) += (w_cum * n_t / N) * w.row(s);
          const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
          auto block = pbar_at(s);
          for (int xi = 0; xi < C_; ++xi) {
            if (mu[xi] <= 0.0) continue;
            for (int a = 0; a < K_; ++a)
              block(xi, a) +=
                  w_cum * n_t * mu[xi] * mean_beta[cell_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)]];
          }
        }
      }
    }

    // Budget penalty over the remaining horizon.
    const Constraint* budget = spec.budget();
    if (budget) {
      double total = 0.0;
      for (int s = 0; s < M_; ++s) {
        const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
        double n_t = double(pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s)));
        for (int xi = 0; xi < C_; ++xi)
          total += n_t * mu[xi] * budget->cost.dot(p[static_cast<std::size_t>(s)].row(xi).transpose());
      }
      double excess = total - pb_.budget_remaining;
      if (excess > 0.0) {
        value -= pb_.penalty_weight * excess * excess;
        if (want_grad)
          for (int s = 0; s < M_; ++s) {
            const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
            double n_t = double(pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s)));
            auto block = pbar_at(s);
            for (int xi = 0; xi < C_; ++xi)
              block.row(xi) -=
                  (2.0 * pb_.penalty_weight * excess * n_t * mu[xi]) * budget->cost.transpose();
          }
      }
    }

    EvalResult out;
    out.value = value;
    if (!std::isfinite(value)) throw NumericalFailure("planner: non-finite objective value");
    if (!want_grad) return out;

    // Reverse sweep: mean-path chain, then the scalar precision chain.
    for (int s = M_ - 1; s >= 0; --s) g[static_cast<std::size_t>(s)] += g[static_cast<std::size_t>(s) + 1];
    Eigen::MatrixXd root_bar(M_, J_);
    for (int s = 0; s < M_; ++s)
      root_bar.row(s) =
          (g[static_cast<std::size_t>(s) + 1].cwiseProduct(z.middleCols(s * J_, J_))).colwise().sum();

    Eigen::MatrixXd sig2_bar = Eigen::MatrixXd::Zero(M_ + 1, J_);
    for (int s = 0; s < M_; ++s)
      for (int j = 0; j < J_; ++j) {
        double d_bar = root(s, j) > 0.0 ? root_bar(s, j) / (2.0 * root(s, j)) : 0.0;
        sig2_bar(s, j) += d_bar;
        sig2_bar(s + 1, j) -= d_bar;
      }
    Eigen::RowVectorXd q_next_bar = Eigen::RowVectorXd::Zero(J_);
    for (int s = M_ - 1; s >= 0; --s) {
      Eigen::RowVectorXd q_bar =
          q_next_bar -
          (sig2_bar.row(s + 1).cwiseProduct(sig2.row(s + 1)).cwiseProduct(sig2.row(s + 1)));
      long n = pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s));
      const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
      auto block = pbar_at(s);
      for (int xi = 0; xi < C_; ++xi) {
        if (mu[xi] <= 0.0) continue;
        for (int a = 0; a < K_; ++a) {
          int j = cell_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)];
          block(xi, a) += q_bar[j] * double(n) * mu[xi] / model.noise_scale2[a];
        }
      }
      q_next_bar = q_bar;
    }

    out.grad.resize(static_cast<std::size_t>(M_));
    for (int s = 0; s < M_; ++s) {
      Eigen::MatrixXd psoft_bar = (eps > 0.0 ? (1.0 - K_ * eps) : 1.0) * pbar_at(s);
      out.grad[static_cast<std::size_t>(s)] = softmax_rows_backward(psoft[static_cast<std::size_t>(s)], psoft_bar);
    }
    return out;
  }

 private:
  Problem pb_;
  int M_, J_, C_, K_;
  std::vector<std::vector<int>> cell_;
  std::vector<int> cell_arm_;
  Eigen::VectorXd q0_;
  Eigen::MatrixXd arm_weight_;  // cells x arms, population weights
};

// ---------------------------------------------------------------------------
// Dense path.
// ---------------------------------------------------------------------------
class DenseEvaluator {
 public:
  DenseEvaluator(const Problem& pb) : pb_(pb) {
    const auto& model = *pb.model;
    const auto& ctx = *pb.ctx;
    M_ = pb.remaining();
    d_ = model.dim;
    C_ = ctx.num_contexts();
    K_ = model.num_arms;
    hunit_.resize(static_cast<std::size_t>(C_));
    iunit_.resize(static_cast<std::size_t>(C_));
    phibar_.resize(static_cast<std::size_t>(C_));
    rows_.resize(static_cast<std::size_t>(C_));
    for (int xi = 0; xi < C_; ++xi) {
      hunit_[static_cast<std::size_t>(xi)].resize(static_cast<std::size_t>(K_));
      iunit_[static_cast<std::size_t>(xi)].resize(static_cast<std::size_t>(K_));
      phibar_[static_cast<std::size_t>(xi)].resize(static_cast<std::size_t>(K_));
      rows_[static_cast<std::size_t>(xi)].resize(static_cast<std::size_t>(K_));
      for (int a = 0; a < K_; ++a) {
        Eigen::MatrixXd rows = model.rows_for(ctx, xi, a);
        rows_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)] = rows;
        Eigen::MatrixXd h = Eigen::MatrixXd::Zero(d_, d_);
        Eigen::MatrixXd info = Eigen::MatrixXd::Zero(d_, d_);
        for (int r = 0; r < rows.rows(); ++r) {
          Eigen::VectorXd phi = rows.row(r).transpose();
          Eigen::MatrixXd outer = phi * phi.transpose();
          if (model.loss == LossFamily::SquaredError) {
            h += 2.0 * outer;
            info += 4.0 * model.noise_scale2[a] * outer;
          } else {
            double sg = sigmoid(phi.dot(pb.state.beta));
            h += sg * (1.0 - sg) * outer;
            info += sg * (1.0 - sg) * outer;
          }
        }
        hunit_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)] = h;
        iunit_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)] = info;
        phibar_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)] = rows.colwise().sum().transpose();
      }
    }
    linear_ = model.loss == LossFamily::SquaredError;
    gbar_.assign(static_cast<std::size_t>(K_), Eigen::VectorXd::Zero(d_));
    if (linear_)
      for (int a = 0; a < K_; ++a)
        for (int xi = 0; xi < C_; ++xi)
          gbar_[static_cast<std::size_t>(a)] += ctx.population_weights[xi] * phibar_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)];
  }

  double arm_reward(const Eigen::VectorXd& beta, int xi, int a) const {
    if (linear_) return phibar_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)].dot(beta);
    const Eigen::MatrixXd& rows = rows_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)];
    double r = 0.0;
    for (int i = 0; i < rows.rows(); ++i) r += sigmoid(rows.row(i).dot(beta));
    return r;
  }

  Eigen::VectorXd arm_reward_grad(const Eigen::VectorXd& beta, int xi, int a) const {
    if (linear_) return phibar_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)];
    const Eigen::MatrixXd& rows = rows_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)];
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(d_);
    for (int i = 0; i < rows.rows(); ++i) {
      double sg = sigmoid(rows.row(i).dot(beta));
      grad += sg * (1.0 - sg) * rows.row(i).transpose();
    }
    return grad;
  }

  double population_reward(const Eigen::VectorXd& beta, int a) const {
    if (linear_) return gbar_[static_cast<std::size_t>(a)].dot(beta);
    double r = 0.0;
    for (int xi = 0; xi < C_; ++xi)
      if (pb_.ctx->population_weights[xi] > 0.0)
        r += pb_.ctx->population_weights[xi] * arm_reward(beta, xi, a);
    return r;
  }

  Eigen::VectorXd population_reward_grad(const Eigen::VectorXd& beta, int a) const {
    if (linear_) return gbar_[static_cast<std::size_t>(a)];
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(d_);
    for (int xi = 0; xi < C_; ++xi)
      if (pb_.ctx->population_weights[xi] > 0.0)
        grad += pb_.ctx->population_weights[xi] * arm_reward_grad(beta, xi, a);
    return grad;
  }

  EvalResult evaluate(const std::vector<Eigen::MatrixXd>& logits, const Eigen::MatrixXd& z,
                      bool want_grad) const {
    const auto& ctx = *pb_.ctx;
    const auto& spec = *pb_.objective;
    const int N = int(z.rows());
    const double eps = spec.coverage_eps();
    const int t0 = pb_.state.epoch;

    std::vector<Eigen::MatrixXd> psoft(static_cast<std::size_t>(M_)), p(static_cast<std::size_t>(M_));
    for (int s = 0; s < M_; ++s) {
      psoft[static_cast<std::size_t>(s)] = softmax_rows(logits[static_cast<std::size_t>(s)]);
      p[static_cast<std::size_t>(s)] = eps > 0.0
                              ? Eigen::MatrixXd(Eigen::MatrixXd::Constant(C_, K_, eps) +
                                                (1.0 - K_ * eps) * psoft[static_cast<std::size_t>(s)])
                              : psoft[static_cast<std::size_t>(s)];
    }

    // Deterministic covariance chain.
    std::vector<Eigen::MatrixXd> hmat(static_cast<std::size_t>(M_)), winv(static_cast<std::size_t>(M_)),
        sigma(static_cast<std::size_t>(M_) + 1), qmat(static_cast<std::size_t>(M_) + 1), root(static_cast<std::size_t>(M_));
    std::vector<lin::EigSym> root_factor(static_cast<std::size_t>(M_));
    sigma[0] = pb_.state.sigma.mat();
    qmat[0] = lin::spd_inverse(sigma[0]);
    for (int s = 0; s < M_; ++s) {
      Eigen::MatrixXd h = Eigen::MatrixXd::Zero(d_, d_);
      Eigen::MatrixXd info = Eigen::MatrixXd::Zero(d_, d_);
      const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
      for (int xi = 0; xi < C_; ++xi) {
        if (mu[xi] <= 0.0) continue;
        for (int a = 0; a < K_; ++a) {
          double wgt = mu[xi] * p[static_cast<std::size_t>(s)](xi, a);
          h += wgt * hunit_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)];
          info += wgt * iunit_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)];
        }
      }
      hmat[static_cast<std::size_t>(s)] = h;
      winv[static_cast<std::size_t>(s)] = lin::pseudo_inverse(info);
      double n = double(pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s)));
      qmat[static_cast<std::size_t>(s) + 1] =
          qmat[static_cast<std::size_t>(s)] + n * lin::symmetrized(h * winv[static_cast<std::size_t>(s)] * h);
      sigma[static_cast<std::size_t>(s) + 1] = lin::spd_inverse(qmat[static_cast<std::size_t>(s) + 1]);
      Eigen::MatrixXd diff = sigma[static_cast<std::size_t>(s)] - sigma[static_cast<std::size_t>(s) + 1];
      root[static_cast<std::size_t>(s)] = lin::psd_sqrt(diff, &root_factor[static_cast<std::size_t>(s)]);
    }

    // Mean paths.
    std::vector<Eigen::MatrixXd> beta(static_cast<std::size_t>(M_) + 1);
    beta[0] = pb_.state.beta.transpose().replicate(N, 1);
    for (int s = 0; s < M_; ++s)
      beta[static_cast<std::size_t>(s) + 1] = beta[static_cast<std::size_t>(s)] + z.middleCols(s * d_, d_) * root[static_cast<std::size_t>(s)];
    for (int n = 0; n < N; ++n)
      if (!beta[static_cast<std::size_t>(M_)].row(n).allFinite())
        throw NumericalFailure("planner: non-finite mean path at scenario " + std::to_string(n));

    double value = 0.0;
    std::vector<Eigen::MatrixXd> g;
    if (want_grad) g.assign(static_cast<std::size_t>(M_) + 1, Eigen::MatrixXd::Zero(N, d_));
    std::vector<Eigen::MatrixXd> pbar;
    if (want_grad) pbar.assign(static_cast<std::size_t>(M_), Eigen::MatrixXd::Zero(C_, K_));

    for (const auto& term : spec.terms) {
      if (term.weight <= 0.0) continue;
      switch (term.kind) {
        case RegretKind::SimpleRegret:
        case RegretKind::TopKSum: {
          const int k = term.kind == RegretKind::SimpleRegret ? 1 : spec.top_k;
          for (int n = 0; n < N; ++n) {
            Eigen::VectorXd b = beta[static_cast<std::size_t>(M_)].row(n).transpose();
            Eigen::VectorXd r(K_);
            for (int a = 0; a < K_; ++a) r[a] = population_reward(b, a);
            for (int a : top_k_arms(r, k)) {
              value += term.weight * r[a] / N;
              if (want_grad)
                g[static_cast<std::size_t>(M_)].row(n) +=
                    (term.weight / N) * population_reward_grad(b, a).transpose();
            }
          }
          break;
        }
        case RegretKind::PolicyRegret: {
          for (int n = 0; n < N; ++n) {
            Eigen::VectorXd b = beta[static_cast<std::size_t>(M_)].row(n).transpose();
            for (int xi = 0; xi < C_; ++xi) {
              double mu = ctx.population_weights[xi];
              if (mu <= 0.0) continue;
              int best = 0;
              double besv = -std::numeric_limits<double>::infinity();
              for (int a = 0; a < K_; ++a) {
                double v = arm_reward(b, xi, a);
                if (v > besv) {
                  besv = v;
                  best = a;
                }
              }
              value += term.weight * mu * besv / N;
              if (want_grad)
                g[static_cast<std::size_t>(M_)].row(n) +=
                    (term.weight * mu / N) * arm_reward_grad(b, xi, best).transpose();
            }
          }
          break;
        }
        case RegretKind::CumulativeRegret: {
          for (int s = 0; s < M_; ++s) {
            double n_t = double(pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s)));
            const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
            for (int n = 0; n < N; ++n) {
              Eigen::VectorXd b = beta[static_cast<std::size_t>(s)].row(n).transpose();
              for (int xi = 0; xi < C_; ++xi) {
                if (mu[xi] <= 0.0) continue;
                for (int a = 0; a < K_; ++a) {
                  double w = p[static_cast<std::size_t>(s)](xi, a);
                  if (w <= 0.0) continue;
                  double f = arm_reward(b, xi, a);
                  value += term.weight * n_t * mu[xi] * w * f / N;
                  if (want_grad) {
                    g[static_cast<std::size_t>(s)].row(n) +=
                        (term.weight * n_t * mu[xi] * w / N) *
                        arm_reward_grad(b, xi, a).transpose();
                    pbar[static_cast<std::size_t>(s)](xi, a) += term.weight * n_t * mu[xi] * f / N;
                  }
                }
              }
            }
          }
          break;
        }
      }
    }

    const Constraint* budget = spec.budget();
    if (budget) {
      double total = 0.0;
      for (int s = 0; s < M_; ++s) {
        const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
        double n_t = double(pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s)));
        for (int xi = 0; xi < C_; ++xi)
          total += n_t * mu[xi] * budget->cost.dot(p[static_cast<std::size_t>(s)].row(xi).transpose());
      }
      double excess = total - pb_.budget_remaining;
      if (excess > 0.0) {
        value -= pb_.penalty_weight * excess * excess;
        if (want_grad)
          for (int s = 0; s < M_; ++s) {
            const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
            double n_t = double(pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s)));
            for (int xi = 0; xi < C_; ++xi)
              pbar[static_cast<std::size_t>(s)].row(xi) -=
                  (2.0 * pb_.penalty_weight * excess * n_t * mu[xi]) * budget->cost.transpose();
          }
      }
    }

    EvalResult out;
    out.value = value;
    if (!std::isfinite(value)) throw NumericalFailure("planner: non-finite objective value");
    if (!want_grad) return out;

    // Reverse sweep over the mean-path chain.
    for (int s = M_ - 1; s >= 0; --s) g[static_cast<std::size_t>(s)] += g[static_cast<std::size_t>(s) + 1];

    std::vector<Eigen::MatrixXd> sigma_bar(static_cast<std::size_t>(M_) + 1,
                                           Eigen::MatrixXd::Zero(d_, d_));
    std::vector<Eigen::MatrixXd> root_bar(static_cast<std::size_t>(M_));
    for (int s = 0; s < M_; ++s)
      root_bar[static_cast<std::size_t>(s)] =
          z.middleCols(s * d_, d_).transpose() * g[static_cast<std::size_t>(s) + 1];

    Eigen::MatrixXd q_next_bar = Eigen::MatrixXd::Zero(d_, d_);
    for (int s = M_ - 1; s >= 0; --s) {
      Eigen::MatrixXd d_bar =
          lin::sqrt_backward(root_factor[static_cast<std::size_t>(s)], root_bar[static_cast<std::size_t>(s)]);
      sigma_bar[static_cast<std::size_t>(s)] += d_bar;
      sigma_bar[static_cast<std::size_t>(s) + 1] -= d_bar;
      // Sigma_{s+1} = Q_{s+1}^{-1}
      Eigen::MatrixXd q_bar =
          q_next_bar - sigma[static_cast<std::size_t>(s) + 1] *
                           lin::symmetrized(sigma_bar[static_cast<std::size_t>(s) + 1]) *
                           sigma[static_cast<std::size_t>(s) + 1];
      double n = double(pb_.horizon->batch_sizes.at(static_cast<std::size_t>(t0 + s)));
      Eigen::MatrixXd lam_bar = n * lin::symmetrized(q_bar);
      const Eigen::MatrixXd& h = hmat[static_cast<std::size_t>(s)];
      const Eigen::MatrixXd& wv = winv[static_cast<std::size_t>(s)];
      Eigen::MatrixXd wh = wv * h;
      Eigen::MatrixXd h_bar = wh * lam_bar + lam_bar * wh.transpose();
      Eigen::MatrixXd w_bar = h * lam_bar * h;
      Eigen::MatrixXd i_bar = -wv * lin::symmetrized(w_bar) * wv;
      const Eigen::VectorXd& mu = ctx.weights_per_epoch.at(static_cast<std::size_t>(t0 + s));
      for (int xi = 0; xi < C_; ++xi) {
        if (mu[xi] <= 0.0) continue;
        for (int a = 0; a < K_; ++a)
          pbar[static_cast<std::size_t>(s)](xi, a) +=
              mu[xi] * (hunit_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)].cwiseProduct(h_bar).sum() +
                        iunit_[static_cast<std::size_t>(xi)][static_cast<std::size_t>(a)].cwiseProduct(i_bar).sum());
      }
      q_next_bar = q_bar;
    }

    out.grad.resize(static_cast<std::size_t>(M_));
    for (int s = 0; s < M_; ++s) {
      Eigen::MatrixXd psoft_bar = (eps > 0.0 ? (1.0 - K_ * eps) : 1.0) * pbar[static_cast<std::size_t>(s)];
      out.grad[static_cast<std::size_t>(s)] = softmax_rows_backward(psoft[static_cast<std::size_t>(s)], psoft_bar);
    }
    return out;
  }

 private:
  Problem pb_;
  int M_, d_, C_, K_;
  bool linear_ = true;
  std::vector<std::vector<Eigen::MatrixXd>> hunit_, iunit_, rows_;
  std::vector<std::vector<Eigen::VectorXd>> phibar_;
  std::vector<Eigen::VectorXd> gbar_;
};

class Evaluator {
 public:
  explicit Evaluator(const Problem& pb) {
    bool diag = pb.model->one_hot && pb.model->loss == LossFamily::SquaredError &&
                is_diagonal(pb.state.sigma.mat());
    if (diag) {
      diag_ = std::make_unique<DiagonalEvaluator>(pb);
    } else {
      dense_ = std::make_unique<DenseEvaluator>(pb);
    }
  }

  EvalResult evaluate(const std::vector<Eigen::MatrixXd>& logits, const Eigen::MatrixXd& z,
                      bool want_grad) const {
    return diag_ ? diag_->evaluate(logits, z, want_grad) : dense_->evaluate(logits, z, want_grad);
  }

  bool diagonal() const { return diag_ != nullptr; }

 private:
  std::unique_ptr<DiagonalEvaluator> diag_;
  std::unique_ptr<DenseEvaluator> dense_;
};

}  // namespace planner_detail

// Exact reverse-mode gradient of the scenario-average planning value with
// respect to the logits, on a caller-supplied scenario set.
inline std::vector<Eigen::MatrixXd> pathwise_gradient(
    const std::vector<Eigen::MatrixXd>& logits, const PosteriorState& state,
    const HorizonSpec& horizon, const ModelSpec& model, const ContextSet& ctx,
    const ObjectiveSpec& spec, const Eigen::MatrixXd& z_scenarios,
    double* value_out = nullptr,
    double budget_remaining = std::numeric_limits<double>::infinity()) {
  planner_detail::Problem pb{&model, &ctx, &horizon, &spec, state, budget_remaining};
  planner_detail::Evaluator ev(pb);
  auto res = ev.evaluate(logits, z_scenarios, true);
  if (value_out) *value_out = res.value;
  return res.grad;
}

// Scenario-average planning value only.
inline double plan_objective_value(
    const std::vector<Eigen::MatrixXd>& logits, const PosteriorState& state,
    const HorizonSpec& horizon, const ModelSpec& model, const ContextSet& ctx,
    const ObjectiveSpec& spec, const Eigen::MatrixXd& z_scenarios,
    double budget_remaining = std::numeric_limits<double>::infinity()) {
  planner_detail::Problem pb{&model, &ctx, &horizon, &spec, state, budget_remaining};
  planner_detail::Evaluator ev(pb);
  return ev.evaluate(logits, z_scenarios, false).value;
}

struct SolveReport {
  double best_value = -std::numeric_limits<double>::infinity();
  std::vector<double> value_trace;
  int best_step = 0;
};

// Solve for the optimal static allocation over the remaining horizon. One
// logits matrix is shared by every remaining epoch: the planning problem is
// over constant residual allocations, re-solved after each batch, and tying
// the epochs keeps the fixed scenario set from being overfit by per-epoch
// noise chasing. Logits start at zero (the uniform A/B design), the scenario
// set is fixed across steps, and the best-so-far iterate under that fixed
// sample average is returned, so the result never falls below the uniform
// baseline on the training scenarios. Deterministic given opt.seed.
inline AllocationPlan solve_plan(const PosteriorState& state, const HorizonSpec& horizon,
                                 const ModelSpec& model, const ContextSet& ctx,
                                 const ObjectiveSpec& spec, const OptimizerConfig& opt,
                                 double budget_remaining = std::numeric_limits<double>::infinity(),
                                 SolveReport* report = nullptr) {
  opt.validate();
  spec.validate(model.num_arms);
  const int remaining = horizon.total_epochs - state.epoch;
  if (remaining < 1) throw ConfigError("solve_plan: no remaining epochs");
  const int c = ctx.num_contexts();
  const int k = model.num_arms;

  planner_detail::Problem pb{&model, &ctx, &horizon, &spec, state, budget_remaining,
                             opt.penalty_weight};
  planner_detail::Evaluator ev(pb);
  Eigen::MatrixXd z =
      normal_scenarios(opt.num_scenarios, remaining * model.dim, opt.seed, opt.qmc);

  // With tied context rows a single 1 x K parameter row is broadcast to every
  // context as well as every epoch.
  const int rows = opt.tie_context_rows ? 1 : c;
  Eigen::MatrixXd shared = Eigen::MatrixXd::Zero(rows, k);
  Eigen::MatrixXd best_shared = shared;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(rows, k);
  Eigen::MatrixXd v = Eigen::MatrixXd::Zero(rows, k);
  double best_value = -std::numeric_limits<double>::infinity();
  int best_step = 0;
  std::vector<double> trace;
  trace.reserve(static_cast<std::size_t>(opt.num_steps) + 1);
  std::vector<Eigen::MatrixXd> logits(static_cast<std::size_t>(remaining),
                                      Eigen::MatrixXd::Zero(c, k));
  auto broadcast = [&](const Eigen::MatrixXd& s) {
    return opt.tie_context_rows ? Eigen::MatrixXd(s.row(0).replicate(c, 1)) : s;
  };

  for (int step = 0; step <= opt.num_steps; ++step) {
    const bool last = step == opt.num_steps;
    Eigen::MatrixXd full = broadcast(shared);
    for (auto& l : logits) l = full;
    auto res = ev.evaluate(logits, z, !last);
    trace.push_back(res.value);
    if (res.value > best_value) {
      best_value = res.value;
      best_shared = shared;
      best_step = step;
    }
    if (last) break;
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(rows, k);
    for (const auto& gs : res.grad) {
      if (opt.tie_context_rows)
        g.row(0) += gs.colwise().sum();
      else
        g += gs;
    }
    double bc1 = 1.0 - std::pow(opt.beta1, step + 1);
    double bc2 = 1.0 - std::pow(opt.beta2, step + 1);
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseProduct(g);
    // Ascent step.
    Eigen::MatrixXd denom =
        (v / bc2).cwiseSqrt() + Eigen::MatrixXd::Constant(rows, k, opt.adam_eps);
    shared += opt.learning_rate * (m / bc1).cwiseQuotient(denom);
  }

  AllocationPlan plan;
  plan.start_epoch = state.epoch;
  const double eps = spec.coverage_eps();
  Eigen::MatrixXd best_full = broadcast(best_shared);
  Eigen::MatrixXd p = planner_detail::softmax_rows(best_full);
  if (eps > 0.0) p = Eigen::MatrixXd::Constant(c, k, eps) + (1.0 - k * eps) * p;
  plan.logits.assign(static_cast<std::size_t>(remaining), best_full);
  plan.probs.assign(static_cast<std::size_t>(remaining), p);
  if (report) {
    report->best_value = best_value;
    report->value_trace = trace;
    report->best_step = best_step;
  }
  return plan;
}

struct PolicyStep {
  Eigen::MatrixXd deploy;  // first-epoch allocation (or the terminal decision)
  AllocationPlan plan;
  double budget_after = std::numeric_limits<double>::infinity();
  double penalty = 0.0;
  bool terminal = false;
};

// One epoch of the re-solving loop: solve, deploy the first allocation, and
// advance the budget state. At the terminal epoch only the final decision
// remains.
inline PolicyStep rho_policy_step(const PosteriorState& state, const HorizonSpec& horizon,
                                  const ModelSpec& model, const ContextSet& ctx,
                                  const ObjectiveSpec& spec, const OptimizerConfig& opt,
                                  double budget_remaining = std::numeric_limits<double>::infinity()) {
  PolicyStep out;
  out.budget_after = budget_remaining;
  if (state.epoch >= horizon.total_epochs) {
    out.deploy = final_decision(state, spec, model, ctx);
    out.terminal = true;
    out.plan.start_epoch = state.epoch;
    return out;
  }
  out.plan = solve_plan(state, horizon, model, ctx, spec, opt, budget_remaining);
  // Coverage is already built into the solved probabilities; only the budget
  // needs post-solve enforcement here.
  ObjectiveSpec budget_only = spec;
  budget_only.constraints.clear();
  for (const auto& cst : spec.constraints)
    if (cst.kind == Constraint::Kind::Budget) budget_only.constraints.push_back(cst);
  auto outcome =
      apply_constraints(out.plan.probs.front(), budget_only, ctx, state.epoch,
                        horizon.batch_sizes.at(static_cast<std::size_t>(state.epoch)), budget_remaining,
                        opt.penalty_weight);
  out.deploy = outcome.alloc;
  out.plan.probs.front() = outcome.alloc;
  out.penalty = outcome.penalty;
  out.budget_after = outcome.budget_after;
  return out;
}

}  // namespace adexp
