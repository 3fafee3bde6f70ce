#pragma once

// Comparison policies over the same Gaussian belief state: uniform allocation,
// Thompson sampling, top-two Thompson sampling, and the density-based
// allocation index. Per-unit draws use counter-derived substreams, so results
// are reproducible under any execution order.

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "adexp/errors.hpp"
#include "adexp/matrix.hpp"
#include "adexp/model.hpp"
#include "adexp/posterior.hpp"
#include "adexp/rng.hpp"

namespace adexp {

struct BaselineSpec {
  enum class Kind { Uniform, TS, TTTS, DTS };
  Kind kind = Kind::Uniform;
  double beta_param = 0.5;  // TTTS keep-probability
  int mc_draws = 4096;      // DTS index sample size
  int resample_cap = 100;   // TTTS resampling bound

  void validate() const {
    if (kind == Kind::TTTS && (beta_param <= 0.0 || beta_param > 1.0))
      throw ConfigError("BaselineSpec: beta_param must lie in (0, 1]");
    if (kind == Kind::DTS && mc_draws < 100)
      throw ConfigError("BaselineSpec: DTS needs at least 100 draws");
  }
};

inline Eigen::MatrixXd uniform_alloc(int k, int num_contexts) {
  return Eigen::MatrixXd::Constant(num_contexts, k, 1.0 / double(k));
}

namespace baseline_detail {

// One posterior draw evaluated at every arm for a unit's context; returns the
// argmax with ties resolved toward the lower index.
inline int best_arm_under_draw(const ModelSpec& model, const ContextSet& ctx, int xi,
                               const Eigen::VectorXd& theta) {
  int best = 0;
  double besv = mean_reward(model, ctx, theta, xi, 0);
  for (int a = 1; a < model.num_arms; ++a) {
    double v = mean_reward(model, ctx, theta, xi, a);
    if (v > besv) {
      besv = v;
      best = a;
    }
  }
  return best;
}

inline Eigen::VectorXd posterior_draw(const PosteriorState& state, const Eigen::MatrixXd& root,
                                      RngStream& stream) {
  Eigen::VectorXd z(state.dim());
  for (int j = 0; j < state.dim(); ++j) z[j] = stream.normal();
  return state.beta + root * z;
}

}  // namespace baseline_detail

// Thompson sampling assignments: one posterior draw per unit.
inline std::vector<int> ts_assign(const PosteriorState& state, const ModelSpec& model,
                                  const ContextSet& ctx, const std::vector<int>& unit_contexts,
                                  const RngStream& rng) {
  Eigen::MatrixXd root = lin::psd_sqrt(state.sigma.mat());
  std::vector<int> arms(unit_contexts.size());
  for (std::size_t i = 0; i < unit_contexts.size(); ++i) {
    RngStream stream = rng.substream(i);
    Eigen::VectorXd theta = baseline_detail::posterior_draw(state, root, stream);
    arms[i] = baseline_detail::best_arm_under_draw(model, ctx, unit_contexts[i], theta);
  }
  return arms;
}

// Top-two Thompson sampling: keep the Thompson draw with probability
// beta_param, otherwise resample until the champion changes. The resample
// loop is capped; hitting the cap keeps the champion and counts a fallback.
inline std::vector<int> ttts_assign(const PosteriorState& state, const ModelSpec& model,
                                    const ContextSet& ctx, const std::vector<int>& unit_contexts,
                                    double beta_param, int resample_cap, const RngStream& rng,
                                    long* fallback_count = nullptr) {
  if (beta_param <= 0.0 || beta_param > 1.0)
    throw ConfigError("ttts_assign: beta_param must lie in (0, 1]");
  Eigen::MatrixXd root = lin::psd_sqrt(state.sigma.mat());
  std::vector<int> arms(unit_contexts.size());
  long fallbacks = 0;
  for (std::size_t i = 0; i < unit_contexts.size(); ++i) {
    RngStream stream = rng.substream(i);
    Eigen::VectorXd theta = baseline_detail::posterior_draw(state, root, stream);
    int champion = baseline_detail::best_arm_under_draw(model, ctx, unit_contexts[i], theta);
    int chosen = champion;
    if (beta_param < 1.0 && stream.uniform() >= beta_param) {
      bool replaced = false;
      for (int attempt = 0; attempt < resample_cap; ++attempt) {
        Eigen::VectorXd redraw = baseline_detail::posterior_draw(state, root, stream);
        int challenger =
            baseline_detail::best_arm_under_draw(model, ctx, unit_contexts[i], redraw);
        if (challenger != champion) {
          chosen = challenger;
          replaced = true;
          break;
        }
      }
      if (!replaced) ++fallbacks;
    }
    arms[i] = chosen;
  }
  if (fallback_count) *fallback_count = fallbacks;
  return arms;
}

// Density-index allocation for an independent non-contextual posterior
// (mu_a, sigma_a): index_a = s_a * sqrt(E[(1/sigma_a) phi((max_{a'!=a}
// theta_{a'} - mu_a)/sigma_a)]), estimated over joint posterior draws shared
// across arms, with the allocation proportional to the index.
inline Eigen::VectorXd dts_alloc(const Eigen::VectorXd& mu, const Eigen::VectorXd& sigma,
                                 const Eigen::VectorXd& noise_scale2, int mc_draws,
                                 const RngStream& rng) {
  const int k = int(mu.size());
  if (sigma.minCoeff() <= 0.0) throw DegeneratePosterior("dts_alloc: sigma must be positive");
  if (k == 1) return Eigen::VectorXd::Ones(1);
  Eigen::VectorXd index_sq = Eigen::VectorXd::Zero(k);
  const double inv_sqrt2pi = 1.0 / std::sqrt(2.0 * M_PI);
  Eigen::VectorXd theta(k);
  for (int m = 0; m < mc_draws; ++m) {
    RngStream stream = rng.substream(std::uint64_t(m));
    for (int a = 0; a < k; ++a) theta[a] = mu[a] + sigma[a] * stream.normal();
    // Top two values identify max_{a' != a} theta_{a'} for every a at once.
    int top = 0;
    for (int a = 1; a < k; ++a)
      if (theta[a] > theta[top]) top = a;
    double second = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < k; ++a)
      if (a != top) second = std::max(second, theta[a]);
    for (int a = 0; a < k; ++a) {
      double rival = a == top ? second : theta[top];
      double u = (rival - mu[a]) / sigma[a];
      index_sq[a] += (inv_sqrt2pi * std::exp(-0.5 * u * u)) / sigma[a];
    }
  }
  index_sq /= double(mc_draws);
  Eigen::VectorXd index = index_sq.cwiseSqrt().cwiseProduct(noise_scale2.cwiseSqrt());
  return index / index.sum();
}

// Convenience wrapper validating the diagonal-posterior restriction.
inline Eigen::VectorXd dts_alloc(const PosteriorState& state, const ModelSpec& model,
                                 int mc_draws, const RngStream& rng) {
  if (model.dim != model.num_arms)
    throw DegeneratePosterior("dts_alloc: needs a one-coordinate-per-arm model");
  const Eigen::MatrixXd& s = state.sigma.mat();
  double scale = std::max(s.diagonal().cwiseAbs().maxCoeff(), 1e-300);
  for (int i = 0; i < s.rows(); ++i)
    for (int j = 0; j < s.cols(); ++j)
      if (i != j && std::abs(s(i, j)) > 1e-8 * scale)
        throw DegeneratePosterior("dts_alloc: posterior must be independent across arms");
  return dts_alloc(state.beta, s.diagonal().cwiseSqrt(), model.noise_scale2, mc_draws, rng);
}

}  // namespace adexp
