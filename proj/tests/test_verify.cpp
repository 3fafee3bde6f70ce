#include <catch2/catch_amalgamated.hpp>

#include "adexp/verify.hpp"

using namespace adexp;

TEST_CASE("reparameterization check passes across dimensions") {
  auto results = check_reparam({1, 2, 4}, 20000, 7);
  REQUIRE(results.size() == 3);
  for (const auto& r : results) {
    CHECK(r.check == "reparam_covariance");
    // Smaller draw budget here; the acceptance suite runs the full version.
    CHECK(r.metric < 0.05);
  }
}

TEST_CASE("scalar reparameterization matches the analytic variance") {
  // d = 1: posterior variance 1/(1/v0 + n h^2 / i); increments scale by the
  // root of the removed variance.
  double v0 = 2.0, h = 0.8, i = 1.6;
  long n = 5;
  PosteriorState state = PosteriorState::isotropic(1, v0);
  double v1 = 1.0 / (1.0 / v0 + double(n) * h * h / i);
  Eigen::VectorXd z(1);
  z << 1.0;
  auto next = simulate_transition(state, SymMatrix(Eigen::MatrixXd::Constant(1, 1, h)),
                                  SymMatrix(Eigen::MatrixXd::Constant(1, 1, i)), n, z);
  CHECK(next.sigma(0, 0) == Catch::Approx(v1).margin(1e-12));
  CHECK(next.beta[0] == Catch::Approx(std::sqrt(v0 - v1)).margin(1e-10));
}

TEST_CASE("sequential normal check decays monotonically with a valid rate oracle") {
  CltConfig cfg;
  cfg.replications = 2000;
  auto results = check_clt(cfg);
  REQUIRE(results.size() == 2);
  CHECK(results[0].check == "clt_monotone_decay");
  CHECK(results[0].pass);
  CHECK(results[1].check == "clt_terminal_mean_error");
  CHECK(results[1].pass);

  // Rate oracle: the measured covariance error must track the closed-form
  // assignment-noise inflation within a factor of two at every scale.
  for (const auto& p : results[0].details["points"]) {
    double measured = p["cov_err"].get<double>();
    double predicted = p["cov_err_pred"].get<double>();
    REQUIRE(measured >= 0.5 * predicted);
    REQUIRE(measured <= 2.0 * predicted);
  }
}

TEST_CASE("a non-adaptive allocation reduces to the classical CLT") {
  CltConfig cfg;
  cfg.theta_gap = 0.0;
  cfg.policy_clip = 0.5;  // the clip pins the second allocation at uniform
  cfg.replications = 2000;
  cfg.n_list = {100, 1000};
  auto pt = verify_detail::clt_one_scale(cfg, 1000);
  CHECK(pt.mean_err <= 3.0 / std::sqrt(double(cfg.replications)));
}

TEST_CASE("zero-noise rewards leave the batch statistic at its realized-design mean") {
  Environment env;
  env.model = ModelSpec::non_contextual(2, 0.0);
  env.ctx = ContextSet::single();
  env.ctx.weights_per_epoch = {env.ctx.population_weights};
  env.horizon = HorizonSpec::uniform(1, 400);
  Eigen::VectorXd theta(2);
  theta << 0.3, -0.2;
  env.theta_star = theta;
  auto batch = run_batch(env, Eigen::MatrixXd::Constant(1, 2, 0.5), 0, RngStream(5), env.model);
  // theta_hat recovers the truth, so H_n theta_hat sits at the
  // realized-design image of the truth up to factorization rounding.
  CHECK((batch.summary.theta_hat - theta).cwiseAbs().maxCoeff() < 1e-12);
  Eigen::VectorXd psi = batch.summary.hessian.mat() * batch.summary.theta_hat;
  Eigen::VectorXd expected = batch.summary.hessian.mat() * theta;
  CHECK((psi - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("policy improvement margins against the static grid") {
  SECTION("single arm is a trivial equality") {
    ModelSpec model = ModelSpec::non_contextual(1, 1.0);
    ContextSet ctx = ContextSet::single();
    for (int s = 0; s < 2; ++s) ctx.weights_per_epoch.push_back(ctx.population_weights);
    HorizonSpec horizon = HorizonSpec::uniform(2, 50);
    PosteriorState state = PosteriorState::isotropic(1, 1.0);
    OptimizerConfig opt;
    opt.num_steps = 10;
    opt.num_scenarios = 64;
    opt.seed = 3;
    SolveReport report;
    solve_plan(state, horizon, model, ctx, ObjectiveSpec::simple(), opt,
               std::numeric_limits<double>::infinity(), &report);
    Eigen::MatrixXd z = normal_scenarios(64, 2, 3, true);
    std::vector<Eigen::MatrixXd> ones(2, Eigen::MatrixXd::Zero(1, 1));
    double static_value = plan_objective_value(ones, state, horizon, model, ctx,
                                               ObjectiveSpec::simple(), z);
    CHECK(report.best_value == Catch::Approx(static_value).margin(1e-12));
  }

  SECTION("asymmetric three-armed instances clear the grid within tolerance") {
    auto results = check_policy_improvement(3, 5, 13);
    for (const auto& r : results) REQUIRE(r.pass);
  }
}

TEST_CASE("density-index limit distances") {
  SECTION("a symmetric state is uniform on both sides") {
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(3);
    Eigen::VectorXd sd = Eigen::VectorXd::Constant(3, 0.6);
    Eigen::VectorXd s2 = Eigen::VectorXd::Constant(3, 25.0);
    auto ref = dts_alloc(mu, sd, s2, 65536, RngStream(9));
    ModelSpec model = ModelSpec::non_contextual(3, 25.0);
    ContextSet ctx = ContextSet::single();
    ctx.weights_per_epoch = {ctx.population_weights};
    PosteriorState state = PosteriorState::prior(
        mu, SymMatrix(Eigen::MatrixXd(sd.cwiseProduct(sd).asDiagonal())));
    HorizonSpec horizon{1, {1000000}};
    OptimizerConfig opt;
    opt.num_scenarios = 2048;
    opt.num_steps = 200;
    opt.seed = 21;
    auto plan = solve_plan(state, horizon, model, ctx, ObjectiveSpec::simple(), opt);
    CHECK((plan.probs[0].row(0).transpose() - ref).cwiseAbs().maxCoeff() < 0.03);
    CHECK((ref - Eigen::VectorXd::Constant(3, 1.0 / 3)).cwiseAbs().maxCoeff() < 0.01);
  }

  SECTION("two arms converge to the quadrature index ratio") {
    Eigen::VectorXd mu(2), sd(2), s2(2);
    mu << 0.0, 0.8;
    sd << 0.7, 0.5;
    s2 << 36.0, 36.0;
    ModelSpec model = ModelSpec::non_contextual(2, 36.0);
    ContextSet ctx = ContextSet::single();
    ctx.weights_per_epoch = {ctx.population_weights};
    PosteriorState state = PosteriorState::prior(
        mu, SymMatrix(Eigen::MatrixXd(sd.cwiseProduct(sd).asDiagonal())));
    HorizonSpec horizon{1, {1000000}};
    OptimizerConfig opt;
    opt.num_scenarios = 4096;
    opt.num_steps = 300;
    opt.seed = 23;
    auto plan = solve_plan(state, horizon, model, ctx, ObjectiveSpec::simple(), opt);

    // Quadrature oracle for the two-armed index.
    auto product_integral = [](double mu_a, double sd_a, double mu_b, double sd_b) {
      const int grid = 40001;
      const double lo = -12.0, hi = 13.0;
      double h = (hi - lo) / (grid - 1);
      double acc = 0.0;
      for (int i = 0; i < grid; ++i) {
        double x = lo + i * h;
        double fa = std::exp(-0.5 * (x - mu_a) * (x - mu_a) / (sd_a * sd_a)) /
                    (sd_a * std::sqrt(2 * M_PI));
        double fb = std::exp(-0.5 * (x - mu_b) * (x - mu_b) / (sd_b * sd_b)) /
                    (sd_b * std::sqrt(2 * M_PI));
        acc += (i == 0 || i == grid - 1 ? 0.5 : 1.0) * fa * fb * h;
      }
      return acc;
    };
    double i0 = std::sqrt(product_integral(mu[0], sd[0], mu[1], sd[1]));
    double i1 = std::sqrt(product_integral(mu[1], sd[1], mu[0], sd[0]));
    Eigen::VectorXd ref(2);
    ref << i0 / (i0 + i1), i1 / (i0 + i1);
    CHECK((plan.probs[0].row(0).transpose() - ref).cwiseAbs().maxCoeff() < 0.03);
  }

  SECTION("seeded three-armed states pass the full check") {
    auto results = check_dts_limit(2, {1000, 1000000}, 17);
    for (const auto& r : results) REQUIRE(r.pass);
  }
}

TEST_CASE("verification reports carry the machine-readable schema") {
  auto results = check_reparam({2}, 5000, 3);
  auto j = report_to_json(results);
  REQUIRE(j.is_array());
  for (const auto& entry : j) {
    REQUIRE(entry.contains("check"));
    REQUIRE(entry.contains("params"));
    REQUIRE(entry.contains("metric"));
    REQUIRE(entry.contains("threshold"));
    REQUIRE(entry.contains("pass"));
  }
}
