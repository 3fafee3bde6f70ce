#pragma once

// Operational shell: configuration, replication orchestration, metric
// aggregation, and CSV/JSON reporting.
//
// Determinism contract: every task (instance, policy, replication) derives its
// seed by hashing the master seed with the instance and policy identifiers,
// results are collected into task-indexed slots, and files are written in task
// order. Output bytes do not depend on the worker count. Wall-clock timings
// are therefore kept out of runs.csv and written to timings.csv instead.

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "adexp/baselines.hpp"
#include "adexp/errors.hpp"
#include "adexp/model.hpp"
#include "adexp/objectives.hpp"
#include "adexp/planner.hpp"
#include "adexp/posterior.hpp"
#include "adexp/simulator.hpp"
#include "json.hpp"

namespace adexp {

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Key/value configuration files: `key = value` lines, `#` comments, and
// `[section]` headers that prefix subsequent keys as `section.key`.
// ---------------------------------------------------------------------------
class ConfigMap {
 public:
  static ConfigMap parse(std::istream& in) {
    ConfigMap cfg;
    std::string line, section;
    long line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      auto trim = [](std::string s) {
        auto b = s.find_first_not_of(" \t\r");
        auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        if (line.back() != ']')
          throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (value.size() >= 2 && value.front() == '"' && value.back() == '"')
        value = value.substr(1, value.size() - 2);
      if (!section.empty()) key = section + "." + key;
      cfg.values_[key] = value;
      cfg.lines_[key] = line_no;
    }
    return cfg;
  }

  static ConfigMap parse_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    return parse(in);
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_str(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_num(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t pos = 0;
      double v = std::stod(it->second, &pos);
      if (pos != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config line " + std::to_string(lines_.at(key)) + ": field '" + key +
                        "' is not a number: " + it->second);
    }
  }

  long get_int(const std::string& key, long fallback) const {
    double v = get_num(key, double(fallback));
    long r = long(v);
    if (double(r) != v)
      throw ConfigError("config line " + std::to_string(lines_.at(key)) + ": field '" + key +
                        "' is not an integer");
    return r;
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config line " + std::to_string(lines_.at(key)) + ": field '" + key +
                      "' is not a boolean");
  }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

 private:
  std::map<std::string, std::string> values_;
  std::map<std::string, long> lines_;
};

inline std::vector<std::string> split_list(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) {
    auto b = item.find_first_not_of(" \t");
    auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policies. Entries look like "rho", "ttts beta=0.5 model=noncontextual",
// "rho lr=0.05"; the normalized entry doubles as the policy id in reports.
// ---------------------------------------------------------------------------
struct PolicyConfig {
  enum class Kind { Uniform, TS, TTTS, DTS, RHO };
  std::string id;
  std::string seed_key;  // canonical entry; duplicate entries share seeds
  Kind kind = Kind::Uniform;
  bool contextual = true;
  double ttts_beta = 0.5;
  int dts_draws = 4096;
  int ttts_resample_cap = 100;
  OptimizerConfig opt;

  static PolicyConfig parse(const std::string& entry, const ConfigMap& cfg) {
    PolicyConfig p;
    std::stringstream ss(entry);
    std::string name;
    ss >> name;
    if (name == "uniform")
      p.kind = Kind::Uniform;
    else if (name == "ts")
      p.kind = Kind::TS;
    else if (name == "ttts")
      p.kind = Kind::TTTS;
    else if (name == "dts")
      p.kind = Kind::DTS;
    else if (name == "rho")
      p.kind = Kind::RHO;
    else
      throw ConfigError("unknown policy: " + name);
    p.ttts_beta = cfg.get_num("ttts.beta", 0.5);
    p.ttts_resample_cap = int(cfg.get_int("ttts.resample_cap", 100));
    p.dts_draws = int(cfg.get_int("dts.draws", 4096));
    p.opt.learning_rate = cfg.get_num("rho.learning_rate", 0.1);
    p.opt.num_steps = int(cfg.get_int("rho.steps", 200));
    p.opt.num_scenarios = int(cfg.get_int("rho.scenarios", 512));
    p.opt.qmc = cfg.get_bool("rho.qmc", true);
    std::string opt_token;
    std::string canonical = name;
    while (ss >> opt_token) {
      auto eq = opt_token.find('=');
      if (eq == std::string::npos) throw ConfigError("bad policy option: " + opt_token);
      std::string key = opt_token.substr(0, eq);
      std::string val = opt_token.substr(eq + 1);
      if (key == "model") {
        if (val == "contextual")
          p.contextual = true;
        else if (val == "noncontextual")
          p.contextual = false;
        else
          throw ConfigError("bad model option: " + val);
      } else if (key == "beta") {
        p.ttts_beta = std::stod(val);
      } else if (key == "lr") {
        p.opt.learning_rate = std::stod(val);
      } else if (key == "steps") {
        p.opt.num_steps = int(std::stol(val));
      } else if (key == "scenarios") {
        p.opt.num_scenarios = int(std::stol(val));
      } else if (key == "tie") {
        p.opt.tie_context_rows = val == "1" || val == "true";
      } else if (key == "draws") {
        p.dts_draws = int(std::stol(val));
      } else {
        throw ConfigError("unknown policy option: " + key);
      }
      canonical += " " + key + "=" + val;
    }
    p.id = canonical;
    p.seed_key = canonical;
    return p;
  }
};

inline ObjectiveSpec objective_from_config(const ConfigMap& cfg) {
  ObjectiveSpec spec;
  std::string terms = cfg.get_str("objective.terms", "simple:1");
  for (const auto& entry : split_list(terms)) {
    auto colon = entry.find(':');
    std::string kind = colon == std::string::npos ? entry : entry.substr(0, colon);
    double weight = colon == std::string::npos ? 1.0 : std::stod(entry.substr(colon + 1));
    if (kind == "simple")
      spec.terms.push_back({RegretKind::SimpleRegret, weight});
    else if (kind == "cumulative")
      spec.terms.push_back({RegretKind::CumulativeRegret, weight});
    else if (kind == "policy")
      spec.terms.push_back({RegretKind::PolicyRegret, weight});
    else if (kind == "topk")
      spec.terms.push_back({RegretKind::TopKSum, weight});
    else
      throw ConfigError("unknown objective term: " + kind);
  }
  spec.top_k = int(cfg.get_int("objective.top_k", 1));
  double eps = cfg.get_num("objective.coverage_eps", 0.0);
  if (eps > 0.0) spec.constraints.push_back(Constraint{Constraint::Kind::Coverage, eps, {}, 0.0});
  if (cfg.has("objective.budget")) {
    Constraint b{Constraint::Kind::Budget, 0.0, {}, cfg.get_num("objective.budget", 0.0)};
    auto costs = split_list(cfg.get_str("objective.budget_costs", ""));
    b.cost.resize(Eigen::Index(costs.size()));
    for (std::size_t i = 0; i < costs.size(); ++i) b.cost[Eigen::Index(i)] = std::stod(costs[i]);
    spec.constraints.push_back(b);
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Benchmark configuration and instance construction.
// ---------------------------------------------------------------------------
struct BenchConfig {
  // environment
  std::string env_kind = "asos";  // asos | asos-csv | gaussian | ranking
  int arms = 10;
  int intervals = 10;
  long batch_size = 100;
  int instances = 20;
  NoiseKind noise = NoiseKind::Gaussian;
  double student_df = 5.0;
  std::string csv_path;
  double gap_scale = 0.25;
  double walk_scale = 0.1;
  double base_mean = 1.0;
  double variance = 4.0;
  int epochs = 0;  // 0: intervals for interval environments
  // ranking environment
  int catalog_size = 10;
  int slate_size = 4;
  int ranking_dim = 6;
  int ref_users = 64;
  double user_sigma2 = 1.0;
  double ranking_noise_s2 = 1.0;
  // orchestration
  int replications = 50;
  std::uint64_t master_seed = 1;
  std::string out_dir = "out";
  int threads = 1;
  std::vector<PolicyConfig> policies;
  ObjectiveSpec objective;
  double prior_c = 100.0;
  // pareto
  std::vector<double> pareto_simple_weights;
  std::vector<double> ttts_beta_grid;
  int pareto_replications = 200;

  static BenchConfig from_config(const ConfigMap& cfg) {
    BenchConfig b;
    b.env_kind = cfg.get_str("env.kind", "asos");
    b.arms = int(cfg.get_int("env.arms", 10));
    b.intervals = int(cfg.get_int("env.intervals", 10));
    b.batch_size = cfg.get_int("env.batch_size", 100);
    b.instances = int(cfg.get_int("env.instances", 20));
    b.noise = noise_kind_from_string(cfg.get_str("env.noise", "gaussian"));
    b.student_df = cfg.get_num("env.student_df", 5.0);
    b.csv_path = cfg.get_str("env.csv_path", "");
    b.gap_scale = cfg.get_num("env.gap_scale", 0.25);
    b.walk_scale = cfg.get_num("env.walk_scale", 0.1);
    b.base_mean = cfg.get_num("env.base_mean", 1.0);
    b.variance = cfg.get_num("env.variance", 4.0);
    b.epochs = int(cfg.get_int("env.epochs", 0));
    b.catalog_size = int(cfg.get_int("env.catalog_size", 10));
    b.slate_size = int(cfg.get_int("env.slate_size", 4));
    b.ranking_dim = int(cfg.get_int("env.ranking_dim", 6));
    b.ref_users = int(cfg.get_int("env.ref_users", 64));
    b.user_sigma2 = cfg.get_num("env.user_sigma2", 1.0);
    b.ranking_noise_s2 = cfg.get_num("env.noise_s2", 1.0);
    b.replications = int(cfg.get_int("bench.replications", 50));
    b.master_seed = std::uint64_t(cfg.get_int("bench.seed", 1));
    b.out_dir = cfg.get_str("bench.out_dir", "out");
    b.threads = int(cfg.get_int("bench.threads", 1));
    b.prior_c = cfg.get_num("prior.c_scale", 100.0);
    b.objective = objective_from_config(cfg);
    for (const auto& entry : split_list(cfg.get_str("bench.policies", "uniform")))
      b.policies.push_back(PolicyConfig::parse(entry, cfg));
    if (b.policies.empty()) throw ConfigError("bench.policies must not be empty");
    // Duplicate entries keep their seed key but get distinct report ids.
    std::map<std::string, int> seen;
    for (auto& p : b.policies) {
      int n = ++seen[p.id];
      if (n > 1) p.id += "#" + std::to_string(n);
    }
    if (b.replications < 1) throw ConfigError("bench.replications must be at least 1");
    for (const auto& w : split_list(cfg.get_str("pareto.simple_weights", "")))
      b.pareto_simple_weights.push_back(std::stod(w));
    for (const auto& w : split_list(cfg.get_str("pareto.ttts_betas", "")))
      b.ttts_beta_grid.push_back(std::stod(w));
    b.pareto_replications = int(cfg.get_int("pareto.replications", 200));
    return b;
  }
};

struct InstanceSpec {
  std::string id;
  std::optional<Environment> env;
  std::optional<RankingEnv> ranking;
  std::uint64_t ranking_seed = 0;
};

inline std::vector<InstanceSpec> build_instances(const BenchConfig& cfg) {
  std::vector<InstanceSpec> out;
  if (cfg.env_kind == "asos" || cfg.env_kind == "asos-csv") {
    std::vector<AsosInstance> sources;
    if (cfg.env_kind == "asos-csv") {
      sources = read_asos_csv_file(cfg.csv_path);
      if (int(sources.size()) > cfg.instances) sources.resize(std::size_t(cfg.instances));
    } else {
      for (int i = 0; i < cfg.instances; ++i) {
        RngStream rng(hash_u64(cfg.master_seed, hash_str(0x5eedu, "instance" + std::to_string(i))));
        sources.push_back(synth_asos_source(cfg.intervals, rng, cfg.base_mean, cfg.walk_scale,
                                            cfg.gap_scale, cfg.variance));
      }
    }
    for (std::size_t i = 0; i < sources.size(); ++i) {
      InstanceSpec spec;
      spec.id = cfg.env_kind == "asos-csv"
                    ? sources[i].experiment_id + ":" + sources[i].metric_id
                    : "synth" + std::to_string(i);
      RngStream rng(hash_u64(cfg.master_seed, hash_str(0xa5a5u, spec.id)));
      Environment env = gen_asos_like(sources[i], cfg.arms, rng, cfg.batch_size);
      env.noise = cfg.noise;
      env.student_df = cfg.student_df;
      spec.env = std::move(env);
      out.push_back(std::move(spec));
    }
  } else if (cfg.env_kind == "gaussian") {
    for (int i = 0; i < cfg.instances; ++i) {
      InstanceSpec spec;
      spec.id = "gauss" + std::to_string(i);
      RngStream rng(hash_u64(cfg.master_seed, hash_str(0xbeefu, spec.id)));
      Environment env;
      env.model = ModelSpec::non_contextual(cfg.arms, cfg.variance);
      env.ctx = ContextSet::single();
      int t = cfg.epochs > 0 ? cfg.epochs : cfg.intervals;
      for (int s = 0; s < t; ++s) env.ctx.weights_per_epoch.push_back(env.ctx.population_weights);
      env.horizon = HorizonSpec::uniform(t, cfg.batch_size);
      env.theta_star.resize(cfg.arms);
      for (int a = 0; a < cfg.arms; ++a) env.theta_star[a] = cfg.gap_scale * rng.normal();
      env.noise = cfg.noise;
      env.student_df = cfg.student_df;
      spec.env = std::move(env);
      out.push_back(std::move(spec));
    }
  } else if (cfg.env_kind == "ranking") {
    for (int i = 0; i < cfg.instances; ++i) {
      InstanceSpec spec;
      spec.id = "rank" + std::to_string(i);
      std::uint64_t seed = hash_u64(cfg.master_seed, hash_str(0x4a4au, spec.id));
      RngStream rng(seed);
      RankingEnv env;
      env.user_mean = Eigen::VectorXd::Zero(cfg.ranking_dim);
      env.user_cov_root =
          std::sqrt(cfg.user_sigma2) * Eigen::MatrixXd::Identity(cfg.ranking_dim, cfg.ranking_dim);
      for (int zi = 0; zi < cfg.catalog_size; ++zi) {
        Eigen::VectorXd z(cfg.ranking_dim);
        for (int j = 0; j < cfg.ranking_dim; ++j) z[j] = rng.normal();
        env.catalog.push_back(z);
      }
      for (int a = 0; a < cfg.arms; ++a) {
        Eigen::VectorXd w(cfg.ranking_dim);
        for (int j = 0; j < cfg.ranking_dim; ++j) w[j] = rng.normal();
        env.rankers.push_back(w);
      }
      env.slate_size = cfg.slate_size;
      env.theta_star.resize(cfg.ranking_dim);
      for (int j = 0; j < cfg.ranking_dim; ++j) env.theta_star[j] = rng.normal();
      env.noise_s2 = cfg.ranking_noise_s2;
      spec.ranking = std::move(env);
      spec.ranking_seed = seed;
      out.push_back(std::move(spec));
    }
  } else {
    throw ConfigError("unknown env.kind: " + cfg.env_kind);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episodes.
// ---------------------------------------------------------------------------
struct RunRecord {
  std::string policy_id;
  std::string instance_id;
  int replication = 0;
  std::uint64_t seed = 0;
  RealizedRegret regret;
  std::vector<Eigen::VectorXd> arm_freqs;  // effective allocation per epoch
  double wall_ms = 0.0;
};

namespace harness_detail {

inline ModelSpec policy_model(const Environment& env, const PolicyConfig& pol) {
  if (pol.contextual) return env.model;
  // Misspecified stationary view: one coefficient per arm, pooled over
  // contexts, keeping each arm's noise scale.
  return ModelSpec::non_contextual(env.model.num_arms, env.model.noise_scale2);
}

inline PosteriorState make_prior(const ModelSpec& model, const HorizonSpec& horizon,
                                 double prior_c) {
  double mean_s2 = model.noise_scale2.mean();
  double mean_batch = 0.0;
  for (long n : horizon.batch_sizes) mean_batch += double(n) / double(horizon.batch_sizes.size());
  double lambda = prior_c * std::max(mean_s2, 1e-12) / std::max(mean_batch, 1.0);
  return PosteriorState::isotropic(model.dim, lambda);
}

inline Eigen::VectorXd marginal_freq(const BatchData& data, int k) {
  Eigen::VectorXd freq = Eigen::VectorXd::Zero(k);
  for (const auto& row : data.rows) freq[row.arm] += 1.0;
  if (!data.rows.empty()) freq /= double(data.rows.size());
  return freq;
}

inline RunRecord run_episode(const Environment& env, const PolicyConfig& pol,
                             const ObjectiveSpec& objective, double prior_c,
                             std::uint64_t seed) {
  const auto t_start = std::chrono::steady_clock::now();
  ModelSpec model = policy_model(env, pol);
  PosteriorState state = make_prior(model, env.horizon, prior_c);
  const int t_total = env.horizon.total_epochs;
  const int k = env.model.num_arms;
  const Constraint* budget = objective.budget();
  double budget_remaining =
      budget ? budget->bound : std::numeric_limits<double>::infinity();

  RunRecord rec;
  rec.seed = seed;
  std::vector<Eigen::MatrixXd> deployed;
  for (int t = 0; t < t_total; ++t) {
    RngStream env_rng(hash_u64(seed, 0xe000u + std::uint64_t(t)));
    RngStream pol_rng(hash_u64(seed, 0xb000u + std::uint64_t(t)));
    BatchResult batch;
    switch (pol.kind) {
      case PolicyConfig::Kind::Uniform: {
        batch = run_batch(env, uniform_alloc(k, env.ctx.num_contexts()), t, env_rng, model);
        break;
      }
      case PolicyConfig::Kind::RHO: {
        OptimizerConfig opt = pol.opt;
        opt.seed = hash_u64(seed, 0x9400u + std::uint64_t(t));
        PosteriorState planning_state = state;
        planning_state.epoch = t;
        auto step = rho_policy_step(planning_state, env.horizon, model, env.ctx, objective, opt,
                                    budget_remaining);
        budget_remaining = step.budget_after;
        batch = run_batch(env, step.deploy, t, env_rng, model);
        break;
      }
      case PolicyConfig::Kind::DTS: {
        Eigen::VectorXd alloc = dts_alloc(state, model, pol.dts_draws, pol_rng);
        Eigen::MatrixXd rows = alloc.transpose().replicate(env.ctx.num_contexts(), 1);
        batch = run_batch(env, rows, t, env_rng, model);
        break;
      }
      case PolicyConfig::Kind::TS:
      case PolicyConfig::Kind::TTTS: {
        auto contexts = sample_batch_contexts(env, t, env_rng);
        std::vector<int> arms =
            pol.kind == PolicyConfig::Kind::TS
                ? ts_assign(state, model, env.ctx, contexts, pol_rng)
                : ttts_assign(state, model, env.ctx, contexts, pol.ttts_beta,
                              pol.ttts_resample_cap, pol_rng);
        batch = run_batch_assigned(env, contexts, arms, t, env_rng, model);
        break;
      }
    }
    state = update(state, batch.summary);
    deployed.push_back(batch.effective_alloc);
    rec.arm_freqs.push_back(marginal_freq(batch.data, k));
  }

  Eigen::MatrixXd decision = final_decision(state, objective, model, env.ctx);
  rec.regret = realized_regret(env.theta_star, deployed, decision, env.model, env.ctx,
                               env.horizon, objective.top_k);
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                          t_start)
                    .count();
  return rec;
}

// Ranking episodes: the policy picks a ranker per user; planning and final
// decisions run on a reference-user table model; scoring uses a Monte Carlo
// estimate of each ranker's population value under the true parameter.
inline RunRecord run_ranking_episode(const RankingEnv& env, std::uint64_t instance_seed,
                                     const PolicyConfig& pol, const ObjectiveSpec& objective,
                                     double prior_c, std::uint64_t seed, int epochs,
                                     long batch_size, int ref_users) {
  const auto t_start = std::chrono::steady_clock::now();
  const int k = env.num_arms();
  const int d = env.dim();

  // Reference users for planning (shared per instance, not per replication).
  RngStream ref_rng(hash_u64(instance_seed, 0x8ef5u));
  ContextSet ref_ctx;
  std::vector<std::vector<Eigen::MatrixXd>> table(static_cast<std::size_t>(ref_users));
  for (int u = 0; u < ref_users; ++u) {
    Eigen::VectorXd user = env.draw_user(ref_rng);
    ref_ctx.contexts.push_back(user);
    table[static_cast<std::size_t>(u)].resize(std::size_t(k));
    for (int a = 0; a < k; ++a) {
      Eigen::MatrixXd rows(env.slate_size, d);
      auto slate = env.slate_for(user, env.rankers[std::size_t(a)]);
      for (int i = 0; i < env.slate_size; ++i)
        rows.row(i) = user.cwiseProduct(env.catalog[std::size_t(slate[std::size_t(i)])]).transpose();
      table[static_cast<std::size_t>(u)][std::size_t(a)] = rows;
    }
  }
  ref_ctx.population_weights = Eigen::VectorXd::Constant(ref_users, 1.0 / ref_users);
  for (int t = 0; t < epochs; ++t) ref_ctx.weights_per_epoch.push_back(ref_ctx.population_weights);
  ModelSpec model = ModelSpec::table(
      k, d, Eigen::VectorXd::Constant(k, env.noise_s2 * env.slate_size), std::move(table));
  HorizonSpec horizon = HorizonSpec::uniform(epochs, batch_size);

  PosteriorState state = make_prior(model, horizon, prior_c);
  RunRecord rec;
  rec.seed = seed;

  std::vector<std::vector<int>> choice_history;
  for (int t = 0; t < epochs; ++t) {
    RngStream user_rng(hash_u64(seed, 0xa100u + std::uint64_t(t)));
    RngStream pol_rng(hash_u64(seed, 0xb100u + std::uint64_t(t)));
    RngStream noise_rng(hash_u64(seed, 0xc100u + std::uint64_t(t)));
    std::vector<Eigen::VectorXd> users;
    for (long i = 0; i < batch_size; ++i) users.push_back(env.draw_user(user_rng));

    std::vector<int> choices(users.size(), 0);
    switch (pol.kind) {
      case PolicyConfig::Kind::Uniform: {
        for (std::size_t i = 0; i < users.size(); ++i)
          choices[i] = int(pol_rng.substream(i).below(std::uint64_t(k)));
        break;
      }
      case PolicyConfig::Kind::TS:
      case PolicyConfig::Kind::TTTS: {
        Eigen::MatrixXd root = lin::psd_sqrt(state.sigma.mat());
        auto slate_value = [&](const Eigen::VectorXd& user, int a, const Eigen::VectorXd& th) {
          double v = 0.0;
          for (int zi : env.slate_for(user, env.rankers[std::size_t(a)]))
            v += user.cwiseProduct(env.catalog[std::size_t(zi)]).dot(th);
          return v;
        };
        auto best_under = [&](const Eigen::VectorXd& user, const Eigen::VectorXd& th) {
          int best = 0;
          double besv = slate_value(user, 0, th);
          for (int a = 1; a < k; ++a) {
            double v = slate_value(user, a, th);
            if (v > besv) {
              besv = v;
              best = a;
            }
          }
          return best;
        };
        for (std::size_t i = 0; i < users.size(); ++i) {
          RngStream stream = pol_rng.substream(i);
          Eigen::VectorXd z(d);
          for (int j = 0; j < d; ++j) z[j] = stream.normal();
          int champion = best_under(users[i], state.beta + root * z);
          int chosen = champion;
          if (pol.kind == PolicyConfig::Kind::TTTS && pol.ttts_beta < 1.0 &&
              stream.uniform() >= pol.ttts_beta) {
            for (int attempt = 0; attempt < pol.ttts_resample_cap; ++attempt) {
              Eigen::VectorXd z2(d);
              for (int j = 0; j < d; ++j) z2[j] = stream.normal();
              int challenger = best_under(users[i], state.beta + root * z2);
              if (challenger != champion) {
                chosen = challenger;
                break;
              }
            }
          }
          choices[i] = chosen;
        }
        break;
      }
      case PolicyConfig::Kind::RHO: {
        OptimizerConfig opt = pol.opt;
        opt.seed = hash_u64(seed, 0x9500u + std::uint64_t(t));
        opt.tie_context_rows = true;  // one shared allocation row over rankers
        PosteriorState planning_state = state;
        planning_state.epoch = t;
        auto step = rho_policy_step(planning_state, horizon, model, ref_ctx, objective, opt);
        Eigen::VectorXd alloc = step.deploy.row(0).transpose();
        for (std::size_t i = 0; i < users.size(); ++i) {
          double u = pol_rng.substream(i).uniform(), acc = 0.0;
          for (int a = 0; a < k; ++a) {
            acc += alloc[a];
            if (u <= acc) {
              choices[i] = a;
              break;
            }
            choices[i] = k - 1;
          }
        }
        break;
      }
      case PolicyConfig::Kind::DTS:
        throw ConfigError("dts is undefined for the ranking environment");
    }

    auto step = ranking_step(env, users, choices, noise_rng);
    state = update(state, step.summary);
    choice_history.push_back(choices);
    Eigen::VectorXd freq = Eigen::VectorXd::Zero(k);
    for (int a : choices) freq[a] += 1.0 / double(choices.size());
    rec.arm_freqs.push_back(freq);
  }

  // Population ranker values under the truth and under the terminal belief.
  RngStream score_rng(hash_u64(instance_seed, 0x5c03u));
  const int score_users = 4096;
  Eigen::VectorXd true_value = Eigen::VectorXd::Zero(k);
  Eigen::VectorXd belief_value = Eigen::VectorXd::Zero(k);
  double per_user_best = 0.0;
  std::vector<Eigen::VectorXd> scored_users;
  for (int u = 0; u < score_users; ++u) {
    Eigen::VectorXd user = env.draw_user(score_rng);
    double best = -std::numeric_limits<double>::infinity();
    for (int a = 0; a < k; ++a) {
      double v = env.slate_mean_reward(user, a);
      true_value[a] += v / score_users;
      best = std::max(best, v);
      double b = 0.0;
      for (int zi : env.slate_for(user, env.rankers[std::size_t(a)]))
        b += user.cwiseProduct(env.catalog[std::size_t(zi)]).dot(state.beta);
      belief_value[a] += b / score_users;
    }
    per_user_best += best / score_users;
  }
  int chosen = argmax_lowest(belief_value);
  rec.regret.chosen_arm = chosen;
  rec.regret.simple = true_value.maxCoeff() - true_value[chosen];
  rec.regret.top_k = top_k_sum(true_value, objective.top_k);
  {
    double picked = 0.0;
    for (int a : top_k_arms(belief_value, objective.top_k)) picked += true_value[a];
    rec.regret.top_k -= picked;
  }
  rec.regret.policy = per_user_best - true_value[chosen];
  double cum = 0.0;
  for (const auto& choices : choice_history) {
    for (int a : choices) cum += true_value.maxCoeff() - true_value[a];
  }
  rec.regret.cumulative = cum;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() -
                                                          t_start)
                    .count();
  return rec;
}

}  // namespace harness_detail

inline RunRecord run_episode(const InstanceSpec& inst, const PolicyConfig& pol,
                             const BenchConfig& cfg, std::uint64_t seed) {
  RunRecord rec;
  if (inst.env) {
    rec = harness_detail::run_episode(*inst.env, pol, cfg.objective, cfg.prior_c, seed);
  } else {
    int epochs = cfg.epochs > 0 ? cfg.epochs : 5;
    rec = harness_detail::run_ranking_episode(*inst.ranking, inst.ranking_seed, pol,
                                              cfg.objective, cfg.prior_c, seed, epochs,
                                              cfg.batch_size, cfg.ref_users);
  }
  rec.instance_id = inst.id;
  rec.policy_id = pol.id;
  return rec;
}

// ---------------------------------------------------------------------------
// Benchmark driver.
// ---------------------------------------------------------------------------
struct BenchReport {
  std::vector<RunRecord> records;
  nlohmann::json summary;
};

namespace harness_detail {

template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      fn(i);
    }
  };
  std::vector<std::thread> pool;
  for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
}

inline nlohmann::json summarize(const std::vector<RunRecord>& records,
                                const std::vector<PolicyConfig>& policies) {
  // Instance-mean simple regret per policy.
  std::map<std::string, std::map<std::string, std::pair<double, long>>> acc;
  std::map<std::string, std::pair<double, long>> cum_acc;
  for (const auto& r : records) {
    auto& cell = acc[r.policy_id][r.instance_id];
    cell.first += r.regret.simple;
    cell.second += 1;
    auto& c = cum_acc[r.policy_id];
    c.first += r.regret.cumulative;
    c.second += 1;
  }
  std::string uniform_id;
  for (const auto& p : policies)
    if (p.kind == PolicyConfig::Kind::Uniform) uniform_id = p.id;

  nlohmann::json out;
  out["policies"] = nlohmann::json::object();
  for (const auto& [policy, by_instance] : acc) {
    nlohmann::json j;
    double mean_simple = 0.0;
    for (const auto& [inst, cell] : by_instance)
      mean_simple += cell.first / double(cell.second) / double(by_instance.size());
    j["mean_simple_regret"] = mean_simple;
    j["mean_cumulative_regret"] = cum_acc[policy].first / double(cum_acc[policy].second);
    j["instances"] = by_instance.size();
    if (!uniform_id.empty() && acc.count(uniform_id)) {
      const auto& base = acc.at(uniform_id);
      long wins = 0, losses = 0;
      double win_ratio = 0.0, loss_ratio = 0.0;
      for (const auto& [inst, cell] : by_instance) {
        double mine = cell.first / double(cell.second);
        const auto& bcell = base.at(inst);
        double theirs = bcell.first / double(bcell.second);
        if (theirs <= 1e-300) continue;
        double ratio = mine / theirs;
        if (ratio < 1.0) {
          ++wins;
          win_ratio += ratio;
        } else {
          ++losses;
          loss_ratio += ratio;
        }
      }
      j["beats_uniform_fraction"] = double(wins) / double(by_instance.size());
      j["beats_uniform_count"] = wins;
      j["pct_regret_of_uniform_when_winning"] =
          wins > 0 ? 100.0 * win_ratio / double(wins) : 0.0;
      j["pct_regret_of_uniform_when_losing"] =
          losses > 0 ? 100.0 * loss_ratio / double(losses) : 0.0;
    }
    out["policies"][policy] = j;
  }
  return out;
}

inline std::string alloc_field(const std::vector<Eigen::VectorXd>& freqs) {
  std::string s;
  for (std::size_t t = 0; t < freqs.size(); ++t) {
    if (t) s += "|";
    for (int a = 0; a < freqs[t].size(); ++a) {
      if (a) s += ";";
      s += fmt_double(freqs[t][a]);
    }
  }
  return s;
}

}  // namespace harness_detail

inline void write_runs_csv(const std::vector<RunRecord>& records, std::ostream& out) {
  out << "policy,instance,replication,seed,simple_regret,cumulative_regret,policy_regret,"
         "topk_regret,chosen_arm,allocs\n";
  for (const auto& r : records) {
    out << r.policy_id << ',' << r.instance_id << ',' << r.replication << ',' << r.seed << ','
        << fmt_double(r.regret.simple) << ',' << fmt_double(r.regret.cumulative) << ','
        << fmt_double(r.regret.policy) << ',' << fmt_double(r.regret.top_k) << ','
        << r.regret.chosen_arm << ',' << harness_detail::alloc_field(r.arm_freqs) << '\n';
  }
}

inline BenchReport run_bench(const BenchConfig& cfg) {
  auto instances = build_instances(cfg);
  struct Task {
    std::size_t instance;
    std::size_t policy;
    int rep;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < instances.size(); ++i)
    for (std::size_t p = 0; p < cfg.policies.size(); ++p)
      for (int r = 0; r < cfg.replications; ++r) tasks.push_back({i, p, r});

  std::vector<RunRecord> records(tasks.size());
  std::atomic<bool> failed{false};
  std::string error_message;
  std::mutex error_mutex;
  harness_detail::parallel_for(tasks.size(), cfg.threads, [&](std::size_t idx) {
    if (failed.load()) return;
    const Task& t = tasks[idx];
    const auto& inst = instances[t.instance];
    const auto& pol = cfg.policies[t.policy];
    std::uint64_t seed = hash_u64(hash_u64(hash_str(cfg.master_seed, inst.id),
                                           hash_str(0x90u, pol.seed_key)),
                                  std::uint64_t(t.rep));
    try {
      records[idx] = run_episode(inst, pol, cfg, seed);
      records[idx].replication = t.rep;
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> lock(error_mutex);
      failed.store(true);
      error_message = e.what();
    }
  });
  if (failed.load()) throw NumericalFailure("bench task failed: " + error_message);

  BenchReport report;
  report.records = std::move(records);
  report.summary = harness_detail::summarize(report.records, cfg.policies);
  report.summary["replications"] = cfg.replications;
  report.summary["instances"] = instances.size();
  report.summary["master_seed"] = cfg.master_seed;
  {
    auto envs = nlohmann::json::array();
    for (const auto& inst : instances) {
      nlohmann::json j;
      j["id"] = inst.id;
      if (inst.env) j["env"] = inst.env->to_json();
      envs.push_back(j);
    }
    report.summary["environments"] = envs;
  }

  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream runs(cfg.out_dir + "/runs.csv", std::ios::binary);
    write_runs_csv(report.records, runs);
    std::ofstream timings(cfg.out_dir + "/timings.csv", std::ios::binary);
    timings << "policy,instance,replication,wall_ms\n";
    for (const auto& r : report.records)
      timings << r.policy_id << ',' << r.instance_id << ',' << r.replication << ','
              << fmt_double(r.wall_ms) << '\n';
    std::ofstream summary(cfg.out_dir + "/summary.json", std::ios::binary);
    summary << report.summary.dump(2) << '\n';
  }
  return report;
}

// ---------------------------------------------------------------------------
// Tradeoff sweep: paired seeds across grid points.
// ---------------------------------------------------------------------------
struct ParetoRow {
  std::string policy_id;
  double simple_weight = 0.0;
  double cumulative_weight = 1.0;
  double param = 0.0;  // TTTS keep-probability when applicable
  double mean_simple = 0.0;
  double se_simple = 0.0;
  double mean_cumulative = 0.0;
  double se_cumulative = 0.0;
  // Per-(instance, replication) simple regrets in task order, enabling
  // paired comparisons across grid points.
  std::vector<double> raw_simple;
};

inline std::vector<ParetoRow> pareto_sweep(const BenchConfig& cfg) {
  if (cfg.pareto_simple_weights.empty() && cfg.ttts_beta_grid.empty())
    throw ConfigError("pareto: weight grid is empty");
  auto instances = build_instances(cfg);

  struct Point {
    PolicyConfig policy;
    ObjectiveSpec objective;
    ParetoRow row;
  };
  std::vector<Point> points;
  for (double w : cfg.pareto_simple_weights) {
    Point pt;
    pt.policy = cfg.policies.front();
    bool have_rho = false;
    for (const auto& p : cfg.policies)
      if (p.kind == PolicyConfig::Kind::RHO) {
        pt.policy = p;
        have_rho = true;
      }
    if (!have_rho) throw ConfigError("pareto: simple_weights sweep needs an rho policy");
    pt.objective = ObjectiveSpec{
        {{RegretKind::CumulativeRegret, 1.0}, {RegretKind::SimpleRegret, w}}, {}, 1};
    pt.row.policy_id = pt.policy.id;
    pt.row.simple_weight = w;
    points.push_back(std::move(pt));
  }
  for (double beta : cfg.ttts_beta_grid) {
    Point pt;
    pt.policy = PolicyConfig{};
    pt.policy.kind = PolicyConfig::Kind::TTTS;
    pt.policy.ttts_beta = beta;
    pt.policy.id = "ttts beta=" + fmt_double(beta);
    pt.objective = cfg.objective;
    pt.row.policy_id = pt.policy.id;
    pt.row.param = beta;
    points.push_back(std::move(pt));
  }

  const int reps = cfg.pareto_replications;
  for (auto& pt : points) {
    BenchConfig local = cfg;
    local.objective = pt.objective;
    std::vector<double> simples, cums;
    simples.reserve(instances.size() * std::size_t(reps));
    struct Slot {
      double simple, cumulative;
    };
    std::vector<Slot> slots(instances.size() * std::size_t(reps));
    harness_detail::parallel_for(slots.size(), cfg.threads, [&](std::size_t idx) {
      std::size_t i = idx / std::size_t(reps);
      int r = int(idx % std::size_t(reps));
      // Seeds pair across grid points: the policy id is left out of the hash.
      std::uint64_t seed = hash_u64(hash_str(cfg.master_seed, instances[i].id),
                                    std::uint64_t(r));
      auto rec = run_episode(instances[i], pt.policy, local, seed);
      slots[idx] = {rec.regret.simple, rec.regret.cumulative};
    });
    for (const auto& s : slots) {
      simples.push_back(s.simple);
      cums.push_back(s.cumulative);
    }
    pt.row.raw_simple = simples;
    auto mean_se = [](const std::vector<double>& v) {
      double mean = 0.0;
      for (double x : v) mean += x / double(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean) / double(v.size() - 1);
      return std::pair<double, double>(mean, std::sqrt(var / double(v.size())));
    };
    std::tie(pt.row.mean_simple, pt.row.se_simple) = mean_se(simples);
    std::tie(pt.row.mean_cumulative, pt.row.se_cumulative) = mean_se(cums);
  }

  std::vector<ParetoRow> rows;
  for (auto& pt : points) rows.push_back(pt.row);
  std::stable_sort(rows.begin(), rows.end(), [](const ParetoRow& a, const ParetoRow& b) {
    return a.simple_weight < b.simple_weight;
  });
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    std::ofstream out(cfg.out_dir + "/frontier.csv", std::ios::binary);
    out << "policy,simple_weight,cumulative_weight,param,mean_simple,se_simple,"
           "mean_cumulative,se_cumulative\n";
    for (const auto& r : rows)
      out << r.policy_id << ',' << fmt_double(r.simple_weight) << ','
          << fmt_double(r.cumulative_weight) << ',' << fmt_double(r.param) << ','
          << fmt_double(r.mean_simple) << ',' << fmt_double(r.se_simple) << ','
          << fmt_double(r.mean_cumulative) << ',' << fmt_double(r.se_cumulative) << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Quantile report over a runs.csv file.
// ---------------------------------------------------------------------------
struct QuantileReport {
  // policy -> 101 percentile values of instance-mean simple regret normalized
  // by the baseline policy.
  std::map<std::string, std::vector<double>> quantiles;
  std::map<std::string, double> fraction_below_one;
};

inline QuantileReport quantile_report(std::istream& runs_csv, const std::string& baseline_id) {
  std::string line;
  if (!std::getline(runs_csv, line)) throw ConfigError("runs csv: missing header");
  std::map<std::string, std::map<std::string, std::pair<double, long>>> acc;
  while (std::getline(runs_csv, line)) {
    if (line.empty()) continue;
    auto fields = split_list(line, ',');
    if (fields.size() < 10) throw ConfigError("runs csv: bad row: " + line);
    acc[fields[0]][fields[1]].first += std::stod(fields[4]);
    acc[fields[0]][fields[1]].second += 1;
  }
  if (!acc.count(baseline_id)) throw MissingBaseline("baseline not in runs: " + baseline_id);
  const auto& base = acc.at(baseline_id);

  QuantileReport report;
  for (const auto& [policy, by_instance] : acc) {
    std::vector<double> ratios;
    for (const auto& [inst, cell] : by_instance) {
      auto bit = base.find(inst);
      if (bit == base.end()) continue;
      double theirs = bit->second.first / double(bit->second.second);
      if (theirs <= 1e-300) continue;
      ratios.push_back(cell.first / double(cell.second) / theirs);
    }
    if (ratios.empty()) continue;
    std::sort(ratios.begin(), ratios.end());
    std::vector<double> q(101);
    for (int p = 0; p <= 100; ++p) {
      double pos = double(p) / 100.0 * double(ratios.size() - 1);
      std::size_t lo = std::size_t(pos);
      std::size_t hi = std::min(lo + 1, ratios.size() - 1);
      double frac = pos - double(lo);
      q[std::size_t(p)] = (1.0 - frac) * ratios[lo] + frac * ratios[hi];
    }
    report.quantiles[policy] = std::move(q);
    double below = 0.0;
    for (double r : ratios) below += r < 1.0 ? 1.0 : 0.0;
    report.fraction_below_one[policy] = below / double(by_instance.size());
  }
  return report;
}

inline void write_quantiles_csv(const QuantileReport& report, std::ostream& out) {
  out << "policy,percentile,normalized_simple_regret\n";
  for (const auto& [policy, q] : report.quantiles)
    for (int p = 0; p <= 100; ++p)
      out << policy << ',' << p << ',' << fmt_double(q[std::size_t(p)]) << '\n';
}

}  // namespace adexp
