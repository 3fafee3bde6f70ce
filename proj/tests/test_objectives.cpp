#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>

#include "adexp/objectives.hpp"
#include "adexp/rng.hpp"

using namespace adexp;

namespace {

// Non-contextual fixture with a chosen posterior mean.
struct Fixture {
  ModelSpec model;
  ContextSet ctx;
  HorizonSpec horizon;

  Fixture(int k, int t, long n) : model(ModelSpec::non_contextual(k, 1.0)) {
    ctx = ContextSet::single();
    for (int s = 0; s < t; ++s) ctx.weights_per_epoch.push_back(ctx.population_weights);
    horizon = HorizonSpec::uniform(t, n);
  }

  PosteriorState state_with_mean(const Eigen::VectorXd& beta) const {
    return {beta, SymMatrix::Identity(model.num_arms), horizon.total_epochs};
  }
};

}  // namespace

TEST_CASE("simple regret term picks the posterior-best arm value") {
  Fixture f(2, 1, 100);
  Eigen::VectorXd beta(2);
  beta << 1.0, 2.0;
  auto spec = ObjectiveSpec::simple();
  std::vector<PosteriorState> traj{f.state_with_mean(beta)};
  std::vector<Eigen::MatrixXd> no_plan;
  CHECK(planning_value(traj, no_plan, spec, f.model, f.ctx, f.horizon) ==
        Catch::Approx(2.0).margin(1e-14));
  auto decision = final_decision(traj[0], spec, f.model, f.ctx);
  CHECK(decision(0, 1) == 1.0);
}

TEST_CASE("top-k-sum of (3, 1, 2) with k = 2 is 5") {
  Eigen::VectorXd r(3);
  r << 3.0, 1.0, 2.0;
  CHECK(top_k_sum(r, 2) == Catch::Approx(5.0).margin(1e-14));
}

TEST_CASE("top-k-sum equals the brute-force best k-subset for K <= 8") {
  RngStream rng(61);
  for (int trial = 0; trial < 40; ++trial) {
    int k_arms = 2 + int(rng.below(7));
    int k = 1 + int(rng.below(std::uint64_t(k_arms)));
    Eigen::VectorXd r(k_arms);
    for (int a = 0; a < k_arms; ++a) r[a] = rng.normal();
    double best = -1e300;
    for (int mask = 0; mask < (1 << k_arms); ++mask) {
      if (__builtin_popcount(unsigned(mask)) != k) continue;
      double s = 0.0;
      for (int a = 0; a < k_arms; ++a)
        if (mask & (1 << a)) s += r[a];
      best = std::max(best, s);
    }
    REQUIRE(top_k_sum(r, k) == Catch::Approx(best).margin(1e-12));
  }
}

TEST_CASE("composite value equals the sum of per-term evaluations") {
  Fixture f(3, 2, 500);
  RngStream rng(71);
  Eigen::VectorXd b0(3), b1(3), b2(3);
  for (int a = 0; a < 3; ++a) {
    b0[a] = rng.normal();
    b1[a] = rng.normal();
    b2[a] = rng.normal();
  }
  std::vector<PosteriorState> traj{{b0, SymMatrix::Identity(3), 0},
                                   {b1, SymMatrix::Identity(3), 1},
                                   {b2, SymMatrix::Identity(3), 2}};
  std::vector<Eigen::MatrixXd> plan;
  Eigen::MatrixXd p(1, 3);
  p << 0.2, 0.5, 0.3;
  plan.push_back(p);
  p << 0.6, 0.2, 0.2;
  plan.push_back(p);

  ObjectiveSpec mix{{{RegretKind::CumulativeRegret, 500.0}, {RegretKind::SimpleRegret, 500.0}},
                    {},
                    1};
  ObjectiveSpec cum{{{RegretKind::CumulativeRegret, 1.0}}, {}, 1};
  ObjectiveSpec sim{{{RegretKind::SimpleRegret, 1.0}}, {}, 1};
  double whole = planning_value(traj, plan, mix, f.model, f.ctx, f.horizon);
  double parts = 500.0 * planning_value(traj, plan, cum, f.model, f.ctx, f.horizon) +
                 500.0 * planning_value(traj, plan, sim, f.model, f.ctx, f.horizon);
  CHECK(whole == Catch::Approx(parts).epsilon(1e-12));
}

TEST_CASE("planning value shifts by a constant but the decision does not move") {
  Fixture f(3, 1, 10);
  RngStream rng(73);
  Eigen::VectorXd beta(3);
  for (int a = 0; a < 3; ++a) beta[a] = rng.normal();
  auto spec = ObjectiveSpec::simple();
  auto d1 = final_decision(f.state_with_mean(beta), spec, f.model, f.ctx);
  auto d2 = final_decision(f.state_with_mean(beta + Eigen::VectorXd::Constant(3, 11.5)), spec,
                           f.model, f.ctx);
  CHECK((d1 - d2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("final decision tie-breaking and edge cases") {
  Fixture f(3, 1, 10);
  Eigen::VectorXd beta(3);
  beta << 1.0, 2.0, 2.0;
  auto spec = ObjectiveSpec::simple();
  auto d = final_decision(f.state_with_mean(beta), spec, f.model, f.ctx);
  CHECK(d(0, 1) == 1.0);  // tie between arms 2 and 3 goes to the lower index
  CHECK(d(0, 2) == 0.0);

  Fixture f1(1, 1, 10);
  auto d1 = final_decision(f1.state_with_mean(Eigen::VectorXd::Zero(1)), spec, f1.model, f1.ctx);
  CHECK(d1(0, 0) == 1.0);

  ObjectiveSpec topk{{{RegretKind::TopKSum, 1.0}}, {}, 3};
  auto dk = final_decision(f.state_with_mean(beta), topk, f.model, f.ctx);
  CHECK(dk.row(0).sum() == Catch::Approx(1.0));
  for (int a = 0; a < 3; ++a) CHECK(dk(0, a) == Catch::Approx(1.0 / 3.0));
}

TEST_CASE("per-context argmax decisions have zero policy regret") {
  auto model = ModelSpec::mixed_effects(2, 2, 1.0);
  ContextSet ctx;
  ctx.contexts = {Eigen::Vector2d(1.0, 0.0), Eigen::Vector2d(0.0, 1.0)};
  ctx.population_weights = Eigen::Vector2d(0.5, 0.5);
  ctx.weights_per_epoch = {ctx.population_weights};
  auto horizon = HorizonSpec::uniform(1, 10);
  Eigen::VectorXd theta(4);
  theta << 1.0, -1.0, 0.0, 2.0;  // arm 0 best in context 0, arm 1 best in context 1
  ObjectiveSpec spec{{{RegretKind::PolicyRegret, 1.0}}, {}, 1};
  PosteriorState st{theta, SymMatrix::Identity(4), 1};
  auto d = final_decision(st, spec, model, ctx);
  CHECK(d(0, 0) == 1.0);
  CHECK(d(1, 1) == 1.0);
  auto rr = realized_regret(theta, {Eigen::MatrixXd::Constant(2, 2, 0.5)}, d, model, ctx,
                            horizon, 1);
  CHECK(rr.policy == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("realized regrets against hand computations") {
  Fixture f(2, 2, 100);
  f.ctx.weights_per_epoch = {f.ctx.population_weights, f.ctx.population_weights};
  Eigen::VectorXd theta(2);
  theta << 0.0, 1.0;

  SECTION("choosing the true best arm gives zero simple regret") {
    Eigen::MatrixXd dec = Eigen::MatrixXd::Zero(1, 2);
    dec(0, 1) = 1.0;
    auto rr = realized_regret(theta, {}, dec, f.model, f.ctx, f.horizon, 1);
    CHECK(rr.simple == Catch::Approx(0.0).margin(1e-14));
    CHECK(rr.chosen_arm == 1);
  }

  SECTION("uniform sampling for two epochs accumulates 100 expected regret") {
    Eigen::MatrixXd uniform = Eigen::MatrixXd::Constant(1, 2, 0.5);
    auto rr = realized_regret(theta, {uniform, uniform},
                              Eigen::MatrixXd::Constant(1, 2, 0.5), f.model, f.ctx, f.horizon,
                              1);
    // Oracle: per epoch 100 units times the 0.5 * gap = 0.5 shortfall.
    CHECK(rr.cumulative == Catch::Approx(100.0).margin(1e-10));
  }
}

TEST_CASE("coverage map is the documented affine shrink") {
  ObjectiveSpec spec{{{RegretKind::SimpleRegret, 1.0}},
                     {Constraint{Constraint::Kind::Coverage, 0.1, {}, 0.0}},
                     1};
  auto ctx = ContextSet::single();
  ctx.weights_per_epoch = {ctx.population_weights};
  Eigen::MatrixXd p(1, 3);
  p << 1.0, 0.0, 0.0;
  auto out = apply_constraints(p, spec, ctx, 0, 10, 1e18);
  CHECK(out.alloc(0, 0) == Catch::Approx(0.8).margin(1e-14));
  CHECK(out.alloc(0, 1) == Catch::Approx(0.1).margin(1e-14));
  CHECK(out.alloc(0, 2) == Catch::Approx(0.1).margin(1e-14));

  ObjectiveSpec none{{{RegretKind::SimpleRegret, 1.0}}, {}, 1};
  auto id = apply_constraints(p, none, ctx, 0, 10, 1e18);
  CHECK((id.alloc - p).cwiseAbs().maxCoeff() == 0.0);

  ObjectiveSpec bad{{{RegretKind::SimpleRegret, 1.0}},
                    {Constraint{Constraint::Kind::Coverage, 0.4, {}, 0.0}},
                    1};
  CHECK_THROWS_AS(apply_constraints(p, bad, ctx, 0, 10, 1e18), InfeasibleConstraint);
}

TEST_CASE("coverage map preserves the simplex and is monotone per coordinate") {
  RngStream rng(83);
  ObjectiveSpec spec{{{RegretKind::SimpleRegret, 1.0}},
                     {Constraint{Constraint::Kind::Coverage, 0.05, {}, 0.0}},
                     1};
  auto ctx = ContextSet::single();
  ctx.weights_per_epoch = {ctx.population_weights};
  for (int trial = 0; trial < 50; ++trial) {
    Eigen::MatrixXd p(1, 4);
    double sum = 0.0;
    for (int a = 0; a < 4; ++a) {
      p(0, a) = -std::log(rng.uniform());
      sum += p(0, a);
    }
    p /= sum;
    auto out = apply_constraints(p, spec, ctx, 0, 10, 1e18);
    REQUIRE(out.alloc.row(0).sum() == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(out.alloc.row(0).minCoeff() >= 0.05 - 1e-12);
    // Monotone: raising one input raises its output.
    Eigen::MatrixXd q = p;
    q(0, 1) += 0.1;
    q /= q.row(0).sum();
    auto out_q = apply_constraints(q, spec, ctx, 0, 10, 1e18);
    REQUIRE(out_q.alloc(0, 1) > out.alloc(0, 1));
  }
}

TEST_CASE("binding budget under uniform cost stays feasible with zero penalty") {
  Eigen::VectorXd cost = Eigen::VectorXd::Ones(2);
  ObjectiveSpec spec{{{RegretKind::SimpleRegret, 1.0}},
                     {Constraint{Constraint::Kind::Budget, 0.0, cost, 100.0}},
                     1};
  auto ctx = ContextSet::single();
  ctx.weights_per_epoch = {ctx.population_weights};
  Eigen::MatrixXd p = Eigen::MatrixXd::Constant(1, 2, 0.5);
  // Uniform cost vector: spending is n_t regardless of the split.
  auto out = apply_constraints(p, spec, ctx, 0, 100, 100.0);
  CHECK(out.penalty == 0.0);
  CHECK(out.budget_after == Catch::Approx(0.0).margin(1e-10));
  CHECK((out.alloc - p).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("violated budget scales toward the cheapest arm") {
  Eigen::VectorXd cost(2);
  cost << 1.0, 3.0;
  ObjectiveSpec spec{{{RegretKind::SimpleRegret, 1.0}},
                     {Constraint{Constraint::Kind::Budget, 0.0, cost, 150.0}},
                     1};
  auto ctx = ContextSet::single();
  ctx.weights_per_epoch = {ctx.population_weights};
  Eigen::MatrixXd p(1, 2);
  p << 0.0, 1.0;  // cost 300 over a batch of 100, bound 150
  auto out = apply_constraints(p, spec, ctx, 0, 100, 150.0);
  double spent = 100.0 * (out.alloc(0, 0) * 1.0 + out.alloc(0, 1) * 3.0);
  CHECK(spent == Catch::Approx(150.0).margin(1e-9));
  CHECK(out.penalty > 0.0);
  CHECK(out.alloc.row(0).sum() == Catch::Approx(1.0).margin(1e-12));

  // Even full mass on the cheap arm cannot satisfy a bound below 100.
  CHECK_THROWS_AS(apply_constraints(p, spec, ctx, 0, 100, 50.0), InfeasibleConstraint);
}
