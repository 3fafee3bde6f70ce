// Command-line front end: planning, simulation, benchmarking, tradeoff
// sweeps, quantile reports, instance generation, and the verification suite.
//
// Exit codes: 0 success, 1 failed verification checks, 2 configuration
// errors, 3 numerical failures.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "adexp/harness.hpp"
#include "adexp/verify.hpp"

using namespace adexp;

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out_dir;
  long seed = -1;
  int threads = 0;
  std::vector<std::string> policies;
  std::string lr_sweep;
};

void add_common(CLI::App* cmd, CommonFlags& flags) {
  cmd->add_option("--config", flags.config_path, "key = value configuration file");
  cmd->add_option("--seed", flags.seed, "master seed override");
  cmd->add_option("--out-dir", flags.out_dir, "output directory override");
  cmd->add_option("--threads", flags.threads, "worker thread count override");
  cmd->add_option("--policy", flags.policies, "policy entry (repeatable, replaces the list)");
  cmd->add_option("--lr-sweep", flags.lr_sweep,
                  "comma-separated learning rates expanding the rho entry");
}

BenchConfig load_bench(const CommonFlags& flags) {
  ConfigMap cfg =
      flags.config_path.empty() ? ConfigMap() : ConfigMap::parse_file(flags.config_path);
  BenchConfig bench = BenchConfig::from_config(cfg);
  if (flags.seed >= 0) bench.master_seed = std::uint64_t(flags.seed);
  if (!flags.out_dir.empty()) bench.out_dir = flags.out_dir;
  if (flags.threads > 0) bench.threads = flags.threads;
  if (!flags.policies.empty()) {
    bench.policies.clear();
    for (const auto& entry : flags.policies)
      bench.policies.push_back(PolicyConfig::parse(entry, cfg));
  }
  if (!flags.lr_sweep.empty()) {
    std::vector<PolicyConfig> expanded;
    for (const auto& p : bench.policies) {
      if (p.kind != PolicyConfig::Kind::RHO) {
        expanded.push_back(p);
        continue;
      }
      for (const auto& lr : split_list(flags.lr_sweep)) {
        PolicyConfig variant = p;
        variant.opt.learning_rate = std::stod(lr);
        variant.id = p.id + " lr=" + lr;
        variant.seed_key = variant.id;
        expanded.push_back(variant);
      }
    }
    bench.policies = expanded;
  }
  return bench;
}

int cmd_plan(const CommonFlags& flags, const std::string& posterior_path) {
  ConfigMap cfg =
      flags.config_path.empty() ? ConfigMap() : ConfigMap::parse_file(flags.config_path);
  BenchConfig bench = load_bench(flags);
  auto instances = build_instances(bench);
  if (instances.empty() || !instances[0].env)
    throw ConfigError("plan: config must describe a batch environment");
  const Environment& env = *instances[0].env;

  PolicyConfig rho = PolicyConfig::parse("rho", cfg);
  for (const auto& p : bench.policies)
    if (p.kind == PolicyConfig::Kind::RHO) rho = p;
  ModelSpec model = harness_detail::policy_model(env, rho);

  PosteriorState state;
  if (posterior_path.empty()) {
    state = harness_detail::make_prior(model, env.horizon, bench.prior_c);
  } else {
    std::ifstream in(posterior_path);
    if (!in) throw ConfigError("cannot open posterior file: " + posterior_path);
    nlohmann::json j;
    in >> j;
    state = PosteriorState::from_json(j);
  }
  OptimizerConfig opt = rho.opt;
  opt.seed = hash_u64(bench.master_seed, 0x91a7u);
  SolveReport report;
  auto plan = solve_plan(state, env.horizon, model, env.ctx, bench.objective, opt,
                         std::numeric_limits<double>::infinity(), &report);
  nlohmann::json out = plan.to_json();
  out["objective_value"] = report.best_value;
  std::cout << out.dump(2) << std::endl;
  return 0;
}

int cmd_simulate(const CommonFlags& flags) {
  BenchConfig bench = load_bench(flags);
  auto instances = build_instances(bench);
  const auto& inst = instances.at(0);
  const auto& pol = bench.policies.at(0);
  std::uint64_t seed = hash_u64(hash_str(bench.master_seed, inst.id), 0x51u);
  auto rec = run_episode(inst, pol, bench, seed);
  std::cerr << "instance " << inst.id << ", policy " << pol.id << "\n";
  for (std::size_t t = 0; t < rec.arm_freqs.size(); ++t) {
    std::cerr << "epoch " << t << " allocation:";
    for (int a = 0; a < rec.arm_freqs[t].size(); ++a)
      std::cerr << ' ' << fmt_double(rec.arm_freqs[t][a]);
    std::cerr << "\n";
  }
  nlohmann::json j;
  j["instance"] = inst.id;
  j["policy"] = pol.id;
  j["seed"] = seed;
  j["simple_regret"] = rec.regret.simple;
  j["cumulative_regret"] = rec.regret.cumulative;
  j["policy_regret"] = rec.regret.policy;
  j["topk_regret"] = rec.regret.top_k;
  j["chosen_arm"] = rec.regret.chosen_arm;
  std::cout << j.dump(2) << std::endl;
  return 0;
}

int cmd_bench(const CommonFlags& flags) {
  BenchConfig bench = load_bench(flags);
  auto report = run_bench(bench);
  std::cout << report.summary.dump(2) << std::endl;
  return 0;
}

int cmd_pareto(const CommonFlags& flags) {
  BenchConfig bench = load_bench(flags);
  auto rows = pareto_sweep(bench);
  for (const auto& r : rows)
    std::cout << r.policy_id << " simple_weight=" << fmt_double(r.simple_weight)
              << " mean_simple=" << fmt_double(r.mean_simple)
              << " mean_cumulative=" << fmt_double(r.mean_cumulative) << "\n";
  return 0;
}

int cmd_quantiles(const CommonFlags& flags, const std::string& runs_path,
                  const std::string& baseline) {
  std::ifstream in(runs_path);
  if (!in) throw ConfigError("cannot open runs file: " + runs_path);
  auto report = quantile_report(in, baseline);
  std::string dir = flags.out_dir.empty() ? "." : flags.out_dir;
  std::filesystem::create_directories(dir);
  std::ofstream out(dir + "/quantiles.csv", std::ios::binary);
  write_quantiles_csv(report, out);
  nlohmann::json j;
  for (const auto& [policy, frac] : report.fraction_below_one) j[policy] = frac;
  std::cout << j.dump(2) << std::endl;
  return 0;
}

int cmd_gen_asos(const CommonFlags& flags, const std::string& out_path, int instances,
                 int intervals) {
  ConfigMap cfg =
      flags.config_path.empty() ? ConfigMap() : ConfigMap::parse_file(flags.config_path);
  std::uint64_t seed = flags.seed >= 0 ? std::uint64_t(flags.seed) : 1;
  double base_mean = cfg.get_num("env.base_mean", 1.0);
  double walk_scale = cfg.get_num("env.walk_scale", 0.1);
  double gap_scale = cfg.get_num("env.gap_scale", 0.25);
  double variance = cfg.get_num("env.variance", 4.0);
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw ConfigError("cannot open output file: " + out_path);
  out << "experiment_id,metric_id,time_index,mean_c,var_c,mean_t,var_t\n";
  for (int i = 0; i < instances; ++i) {
    RngStream rng(hash_u64(seed, hash_str(0x5eedu, "instance" + std::to_string(i))));
    auto src = synth_asos_source(intervals, rng, base_mean, walk_scale, gap_scale, variance);
    for (int t = 0; t < intervals; ++t)
      out << "synth" << i << ",m0," << t << ',' << fmt_double(src.mean_c[std::size_t(t)]) << ','
          << fmt_double(src.var_c[std::size_t(t)]) << ',' << fmt_double(src.mean_t[std::size_t(t)])
          << ',' << fmt_double(src.var_t[std::size_t(t)]) << '\n';
  }
  return 0;
}

int cmd_verify(const CommonFlags& flags, const std::string& only) {
  std::uint64_t seed = flags.seed >= 0 ? std::uint64_t(flags.seed) : 7;
  std::vector<CheckResult> all;
  auto want = [&](const std::string& name) { return only.empty() || only == name; };
  if (want("reparam"))
    for (auto& r : check_reparam({1, 2, 4}, 100000, seed)) all.push_back(std::move(r));
  if (want("clt")) {
    CltConfig cfg;
    cfg.seed = hash_u64(seed, 0xc17u);
    for (auto& r : check_clt(cfg)) all.push_back(std::move(r));
  }
  if (want("policy-improvement"))
    for (auto& r : check_policy_improvement(10, 5, hash_u64(seed, 0x9017u)))
      all.push_back(std::move(r));
  if (want("dts-limit"))
    for (auto& r : check_dts_limit(5, {1000, 10000, 1000000}, hash_u64(seed, 0xd75u)))
      all.push_back(std::move(r));
  if (all.empty()) throw ConfigError("unknown check: " + only);

  auto j = report_to_json(all);
  std::cout << j.dump(2) << std::endl;
  if (!flags.out_dir.empty()) {
    std::filesystem::create_directories(flags.out_dir);
    std::ofstream out(flags.out_dir + "/verify.json", std::ios::binary);
    out << j.dump(2) << '\n';
  }
  for (const auto& r : all)
    if (!r.pass) return 1;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Batched adaptive experimentation toolkit"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string posterior_path, runs_path, baseline = "uniform", only_check, gen_out = "asos.csv";
  int gen_instances = 20, gen_intervals = 10;

  auto* plan = app.add_subcommand("plan", "one-shot residual-horizon solve");
  add_common(plan, flags);
  plan->add_option("--posterior", posterior_path, "posterior state JSON file");

  auto* simulate = app.add_subcommand("simulate", "run one episode with a verbose trace");
  add_common(simulate, flags);

  auto* bench = app.add_subcommand("bench", "full replication benchmark");
  add_common(bench, flags);

  auto* pareto = app.add_subcommand("pareto", "objective-weight tradeoff sweep");
  add_common(pareto, flags);

  auto* quantiles = app.add_subcommand("quantiles", "normalized regret quantile report");
  add_common(quantiles, flags);
  quantiles->add_option("--runs", runs_path, "runs.csv produced by bench")->required();
  quantiles->add_option("--baseline", baseline, "baseline policy id");

  auto* gen = app.add_subcommand("gen-asos", "generate synthetic interval-series instances");
  add_common(gen, flags);
  gen->add_option("--out", gen_out, "output CSV path");
  gen->add_option("--instances", gen_instances, "number of instances");
  gen->add_option("--intervals", gen_intervals, "intervals per instance");

  auto* verify = app.add_subcommand("verify", "run the verification checks");
  add_common(verify, flags);
  verify->add_option("--check", only_check,
                     "restrict to one of: reparam, clt, policy-improvement, dts-limit");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (*plan) return cmd_plan(flags, posterior_path);
    if (*simulate) return cmd_simulate(flags);
    if (*bench) return cmd_bench(flags);
    if (*pareto) return cmd_pareto(flags);
    if (*quantiles) return cmd_quantiles(flags, runs_path, baseline);
    if (*gen) return cmd_gen_asos(flags, gen_out, gen_instances, gen_intervals);
    if (*verify) return cmd_verify(flags, only_check);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const MalformedInstance& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const MissingBaseline& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "numerical failure: " << e.what() << std::endl;
    return 3;
  }
  return 0;
}
