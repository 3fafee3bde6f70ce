#pragma once

// Ground-truth simulation environments: batch generation under a true
// parameter, centered noise families, the interval-series instance generator,
// and the ranked-slate environment.

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "adexp/errors.hpp"
#include "adexp/model.hpp"
#include "adexp/objectives.hpp"
#include "adexp/posterior.hpp"
#include "adexp/rng.hpp"
#include "json.hpp"

namespace adexp {

enum class NoiseKind { Gaussian, Gumbel, StudentT };

inline NoiseKind noise_kind_from_string(const std::string& s) {
  if (s == "gaussian") return NoiseKind::Gaussian;
  if (s == "gumbel") return NoiseKind::Gumbel;
  if (s == "student_t") return NoiseKind::StudentT;
  throw ConfigError("unknown noise kind: " + s);
}

// Centered noise with variance exactly s2.
//  - Gumbel: location shifted by the Euler-Mascheroni constant, scaled by
//    sqrt(6)/pi.
//  - Student-t: scaled by sqrt((nu-2)/nu) so the variance equals s2; nu > 2.
inline double draw_noise(NoiseKind kind, double s2, double student_df, RngStream& stream) {
  const double s = std::sqrt(s2);
  switch (kind) {
    case NoiseKind::Gaussian:
      return s * stream.normal();
    case NoiseKind::Gumbel: {
      constexpr double euler_mascheroni = 0.57721566490153286;
      double g = -std::log(-std::log(stream.uniform()));
      return s * (g - euler_mascheroni) * (std::sqrt(6.0) / M_PI);
    }
    case NoiseKind::StudentT: {
      double z = stream.normal();
      double chi2 = stream.chi_squared(student_df);
      double t = z / std::sqrt(chi2 / student_df);
      return s * std::sqrt((student_df - 2.0) / student_df) * t;
    }
  }
  return 0.0;
}

struct Environment {
  Eigen::VectorXd theta_star;
  ModelSpec model;  // the correctly specified data-generating model
  ContextSet ctx;
  HorizonSpec horizon;
  NoiseKind noise = NoiseKind::Gaussian;
  double student_df = 5.0;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["dim"] = model.dim;
    j["num_arms"] = model.num_arms;
    j["epochs"] = horizon.total_epochs;
    j["noise"] = noise == NoiseKind::Gaussian ? "gaussian"
                 : noise == NoiseKind::Gumbel ? "gumbel"
                                              : "student_t";
    j["theta_star"] =
        std::vector<double>(theta_star.data(), theta_star.data() + theta_star.size());
    return j;
  }
};

struct BatchResult {
  BatchData data;
  EstimateSummary summary;
  double realized_reward = 0.0;
  Eigen::MatrixXd effective_alloc;  // empirical assignment frequencies per context
};

namespace sim_detail {

inline int sample_index(const Eigen::VectorXd& weights, RngStream& stream) {
  double u = stream.uniform();
  double acc = 0.0;
  for (int i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u <= acc) return i;
  }
  return int(weights.size()) - 1;
}

inline Eigen::MatrixXd frequencies(const BatchData& data, int c, int k) {
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(c, k);
  for (const auto& row : data.rows) counts(row.context, row.arm) += 1.0;
  for (int xi = 0; xi < c; ++xi) {
    double total = counts.row(xi).sum();
    if (total > 0.0) counts.row(xi) /= total;
  }
  return counts;
}

}  // namespace sim_detail

// Draw one batch under an allocation, fit the experimenter's model on it, and
// report the realized total reward. fit_model may differ from env.model when
// the experimenter's model is misspecified.
inline BatchResult run_batch(const Environment& env, const Eigen::MatrixXd& alloc, int epoch,
                             const RngStream& rng, const ModelSpec& fit_model) {
  if (epoch >= env.horizon.total_epochs) throw ConfigError("run_batch: epoch out of range");
  const Eigen::VectorXd& mu = env.ctx.weights_per_epoch.at(static_cast<std::size_t>(epoch));
  const long n = env.horizon.batch_sizes.at(static_cast<std::size_t>(epoch));
  BatchResult out;
  out.data.epoch = epoch;
  out.data.rows.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    RngStream stream = rng.substream(std::uint64_t(i));
    int xi = sim_detail::sample_index(mu, stream);
    int a = sim_detail::sample_index(alloc.row(xi).transpose(), stream);
    double mean = mean_reward(env.model, env.ctx, env.theta_star, xi, a);
    double reward = mean + draw_noise(env.noise, env.model.noise_scale2[a], env.student_df,
                                      stream);
    out.data.rows.push_back({xi, a, reward});
    out.realized_reward += reward;
  }
  out.summary = fit_batch(fit_model, env.ctx, out.data);
  out.effective_alloc = sim_detail::frequencies(out.data, env.ctx.num_contexts(),
                                                env.model.num_arms);
  return out;
}

// Per-unit assignment entry point for policies that assign arms one unit at a
// time. Contexts are drawn first, the policy maps them to arms, rewards follow.
inline std::vector<int> sample_batch_contexts(const Environment& env, int epoch,
                                              const RngStream& rng) {
  const Eigen::VectorXd& mu = env.ctx.weights_per_epoch.at(static_cast<std::size_t>(epoch));
  const long n = env.horizon.batch_sizes.at(static_cast<std::size_t>(epoch));
  std::vector<int> contexts(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) {
    RngStream stream = rng.substream(std::uint64_t(i));
    contexts[static_cast<std::size_t>(i)] = sim_detail::sample_index(mu, stream);
  }
  return contexts;
}

inline BatchResult run_batch_assigned(const Environment& env, const std::vector<int>& contexts,
                                      const std::vector<int>& arms, int epoch,
                                      const RngStream& rng, const ModelSpec& fit_model) {
  if (contexts.size() != arms.size()) throw DimensionMismatch("run_batch_assigned: sizes");
  BatchResult out;
  out.data.epoch = epoch;
  out.data.rows.reserve(contexts.size());
  for (std::size_t i = 0; i < contexts.size(); ++i) {
    RngStream stream = rng.substream(0x52eb0000ULL + std::uint64_t(i));
    int xi = contexts[i];
    int a = arms[i];
    double mean = mean_reward(env.model, env.ctx, env.theta_star, xi, a);
    double reward = mean + draw_noise(env.noise, env.model.noise_scale2[a], env.student_df,
                                      stream);
    out.data.rows.push_back({xi, a, reward});
    out.realized_reward += reward;
  }
  out.summary = fit_batch(fit_model, env.ctx, out.data);
  out.effective_alloc = sim_detail::frequencies(out.data, env.ctx.num_contexts(),
                                                env.model.num_arms);
  return out;
}

// ---------------------------------------------------------------------------
// Interval-series instances: a control and a treatment series of per-interval
// means and variances, from which synthetic arms are spawned.
// ---------------------------------------------------------------------------
struct AsosInstance {
  std::string experiment_id;
  std::string metric_id;
  std::vector<double> mean_c, var_c, mean_t, var_t;

  int intervals() const { return int(mean_c.size()); }

  void validate() const {
    if (mean_c.size() != var_c.size() || mean_c.size() != mean_t.size() ||
        mean_c.size() != var_t.size())
      throw MalformedInstance("interval series lengths differ");
    if (mean_c.empty()) throw MalformedInstance("empty instance");
    for (double v : var_c)
      if (!(v > 0.0)) throw MalformedInstance("non-positive control variance");
    for (double v : var_t)
      if (!(v > 0.0)) throw MalformedInstance("non-positive treatment variance");
  }

  std::vector<double> gaps() const {
    std::vector<double> g(mean_c.size());
    for (std::size_t t = 0; t < mean_c.size(); ++t) g[t] = std::abs(mean_t[t] - mean_c[t]);
    return g;
  }
};

// CSV schema: experiment_id,metric_id,time_index,mean_c,var_c,mean_t,var_t
// with one row per interval, '.' decimals, LF or CRLF endings. NaNs rejected.
inline std::vector<AsosInstance> read_asos_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw MalformedInstance("empty CSV");
  std::map<std::pair<std::string, std::string>, std::map<long, std::array<double, 4>>> series;
  long line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::vector<std::string> fields;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() != 7)
      throw MalformedInstance("line " + std::to_string(line_no) + ": expected 7 fields");
    std::array<double, 4> vals{};
    long t;
    try {
      t = std::stol(fields[2]);
      for (int i = 0; i < 4; ++i) vals[static_cast<std::size_t>(i)] = std::stod(fields[static_cast<std::size_t>(i) + 3]);
    } catch (const std::exception&) {
      throw MalformedInstance("line " + std::to_string(line_no) + ": bad number");
    }
    for (double v : vals)
      if (!std::isfinite(v))
        throw MalformedInstance("line " + std::to_string(line_no) + ": non-finite value");
    series[{fields[0], fields[1]}][t] = vals;
  }
  std::vector<AsosInstance> out;
  for (auto& [key, rows] : series) {
    AsosInstance inst;
    inst.experiment_id = key.first;
    inst.metric_id = key.second;
    for (auto& [t, vals] : rows) {
      inst.mean_c.push_back(vals[0]);
      inst.var_c.push_back(vals[1]);
      inst.mean_t.push_back(vals[2]);
      inst.var_t.push_back(vals[3]);
    }
    inst.validate();
    out.push_back(std::move(inst));
  }
  return out;
}

inline std::vector<AsosInstance> read_asos_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  return read_asos_csv(in);
}

// K-armed interval environment from a two-armed source. Arm 0 is the control
// series, arm 1 the treatment series; arms 2..K-1 are synthetic, with means
// control + z_k * gap(t) for one fixed standard normal draw z_k per arm and
// the treatment variance. Context is the interval index, the population is
// uniform over intervals.
inline Environment gen_asos_like(const AsosInstance& source, int k, const RngStream& rng,
                                 long batch_size) {
  source.validate();
  if (k < 2) throw ConfigError("gen_asos_like: need at least control and treatment");
  const int t_count = source.intervals();
  Environment env;
  env.ctx = ContextSet::intervals(t_count);

  std::vector<std::vector<double>> means(static_cast<std::size_t>(k));
  std::vector<double> arm_var(static_cast<std::size_t>(k));
  means[0] = source.mean_c;
  means[1] = source.mean_t;
  auto avg = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
  };
  arm_var[0] = avg(source.var_c);
  arm_var[1] = avg(source.var_t);
  RngStream stream = rng.substream(0xa505u);
  auto gaps = source.gaps();
  for (int a = 2; a < k; ++a) {
    double shift = stream.normal();
    std::vector<double> m(static_cast<std::size_t>(t_count));
    for (int t = 0; t < t_count; ++t)
      m[static_cast<std::size_t>(t)] = source.mean_c[static_cast<std::size_t>(t)] + shift * gaps[static_cast<std::size_t>(t)];
    means[static_cast<std::size_t>(a)] = std::move(m);
    arm_var[static_cast<std::size_t>(a)] = arm_var[1];
  }

  Eigen::VectorXd s2(k);
  for (int a = 0; a < k; ++a) s2[a] = arm_var[static_cast<std::size_t>(a)];
  env.model = ModelSpec::interval_cells(k, t_count, s2);
  env.theta_star = Eigen::VectorXd::Zero(k * t_count);
  for (int a = 0; a < k; ++a)
    for (int t = 0; t < t_count; ++t)
      env.theta_star[a * t_count + t] = means[static_cast<std::size_t>(a)][static_cast<std::size_t>(t)];
  env.horizon = HorizonSpec::uniform(t_count, batch_size);
  return env;
}

// Per-batch signal-to-noise summary used in instance-difficulty reports:
// mean absolute gap over sqrt(mean variance / batch size).
inline double instance_snr(const AsosInstance& source, long batch_size) {
  auto gaps = source.gaps();
  double gap = 0.0;
  for (double g : gaps) gap += g / double(gaps.size());
  double var = 0.0;
  for (double v : source.var_t) var += v / double(source.var_t.size());
  return gap / std::sqrt(var / double(batch_size));
}

// Synthetic interval-series source with slowly wandering control means and a
// sign-flipping treatment gap.
inline AsosInstance synth_asos_source(int intervals, const RngStream& rng, double base_mean,
                                      double walk_scale, double gap_scale, double variance) {
  AsosInstance inst;
  inst.experiment_id = "synthetic";
  inst.metric_id = "m0";
  RngStream stream = rng.substream(0x55aau);
  double level = base_mean;
  double ar = stream.normal();
  for (int t = 0; t < intervals; ++t) {
    level += walk_scale * stream.normal();
    ar = 0.7 * ar + std::sqrt(1.0 - 0.49) * stream.normal();
    inst.mean_c.push_back(level);
    inst.mean_t.push_back(level + gap_scale * ar);
    inst.var_c.push_back(variance);
    inst.var_t.push_back(variance);
  }
  return inst;
}

// ---------------------------------------------------------------------------
// Ranked-slate environment: each unit is a user with Gaussian features; an arm
// is a fixed ranker w; choosing a ranker shows the top-b catalog items under
// the w-weighted inner product and yields one reward row per shown item.
// ---------------------------------------------------------------------------
struct RankingEnv {
  Eigen::VectorXd user_mean;
  Eigen::MatrixXd user_cov_root;        // factor of the user covariance
  std::vector<Eigen::VectorXd> catalog;  // content feature vectors
  std::vector<Eigen::VectorXd> rankers;  // one weight vector per arm
  int slate_size = 1;
  Eigen::VectorXd theta_star;
  double noise_s2 = 1.0;

  int num_arms() const { return int(rankers.size()); }
  int dim() const { return int(theta_star.size()); }

  void validate() const {
    if (slate_size > int(catalog.size()))
      throw ConfigError("RankingEnv: slate larger than the catalog");
    for (const auto& w : rankers)
      if (!w.allFinite()) throw ConfigError("RankingEnv: non-finite ranker");
  }

  // Top-b catalog indices under the w-weighted inner product; ties toward the
  // lower content index.
  std::vector<int> slate_for(const Eigen::VectorXd& user, const Eigen::VectorXd& w) const {
    std::vector<std::pair<double, int>> scored;
    scored.reserve(catalog.size());
    for (int zi = 0; zi < int(catalog.size()); ++zi) {
      double score = (user.cwiseProduct(catalog[static_cast<std::size_t>(zi)])).dot(w);
      scored.push_back({score, zi});
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<int> slate(static_cast<std::size_t>(slate_size));
    for (int i = 0; i < slate_size; ++i) slate[static_cast<std::size_t>(i)] = scored[static_cast<std::size_t>(i)].second;
    return slate;
  }

  Eigen::VectorXd draw_user(RngStream& stream) const {
    Eigen::VectorXd z(user_mean.size());
    for (int j = 0; j < z.size(); ++j) z[j] = stream.normal();
    return user_mean + user_cov_root * z;
  }

  // True expected slate reward of ranker a for a given user.
  double slate_mean_reward(const Eigen::VectorXd& user, int a) const {
    double r = 0.0;
    for (int zi : slate_for(user, rankers[static_cast<std::size_t>(a)]))
      r += user.cwiseProduct(catalog[static_cast<std::size_t>(zi)]).dot(theta_star);
    return r;
  }
};

struct RankingStepResult {
  Eigen::MatrixXd features;  // one row per shown item
  Eigen::VectorXd rewards;
  EstimateSummary summary;
  double realized_reward = 0.0;
  std::vector<double> per_user_reward;
};

// Simulate one epoch of the ranking experiment given per-user ranker choices.
inline RankingStepResult ranking_step(const RankingEnv& env,
                                      const std::vector<Eigen::VectorXd>& users,
                                      const std::vector<int>& choices, const RngStream& rng) {
  env.validate();
  if (users.size() != choices.size()) throw DimensionMismatch("ranking_step: sizes differ");
  const long rows = long(users.size()) * env.slate_size;
  RankingStepResult out;
  out.features.resize(rows, env.dim());
  out.rewards.resize(rows);
  out.per_user_reward.assign(users.size(), 0.0);
  long r = 0;
  for (std::size_t i = 0; i < users.size(); ++i) {
    RngStream stream = rng.substream(i);
    int a = choices[i];
    if (a < 0 || a >= env.num_arms()) throw DimensionMismatch("ranking_step: bad ranker index");
    for (int zi : env.slate_for(users[i], env.rankers[static_cast<std::size_t>(a)])) {
      Eigen::VectorXd phi = users[i].cwiseProduct(env.catalog[static_cast<std::size_t>(zi)]);
      double reward = phi.dot(env.theta_star) +
                      draw_noise(NoiseKind::Gaussian, env.noise_s2, 5.0, stream);
      out.features.row(r) = phi.transpose();
      out.rewards[r] = reward;
      out.per_user_reward[i] += reward;
      out.realized_reward += reward;
      ++r;
    }
  }
  out.summary = fit_rows(LossFamily::SquaredError, out.features, out.rewards,
                         long(users.size()));
  return out;
}

}  // namespace adexp
