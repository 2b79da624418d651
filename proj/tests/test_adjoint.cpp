#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "mkv/adjoint.hpp"
#include "mkv/fixed_point.hpp"

#include <cmath>

using namespace mkv;
using namespace mkvtest;

namespace {

WeightedSample dummy_mu() { return WeightedSample::atoms1d({0.0}, {1.0}); }

}  // namespace

TEST_CASE("hamiltonian closed forms") {
  auto dyn = dynamics_identity();
  auto cost = cost_quadratic();
  auto mu = dummy_mu();
  CHECK(hamiltonian(dyn, cost, 0, Vec::Zero(1), Vec::Constant(1, 2.0), mu, 1.0,
                    Vec::Zero(1)) == Catch::Approx(2.0));
  CHECK(hamiltonian(dyn, cost, 0, Vec::Zero(1), Vec::Constant(1, 1.0), mu, 1.0,
                    Vec::Constant(1, 3.0)) == Catch::Approx(3.5));
  // at the minimizer a* = -z the value is -z^2/2
  Vec astar = minimize_hamiltonian(dyn, cost, 0, Vec::Zero(1), mu, 1.0,
                                   Vec::Constant(1, 3.0),
                                   ControlSpace::full(1));
  CHECK(astar(0) == Catch::Approx(-3.0));
  CHECK(hamiltonian(dyn, cost, 0, Vec::Zero(1), astar, mu, 1.0,
                    Vec::Constant(1, 3.0)) == Catch::Approx(-4.5));
}

TEST_CASE("hamiltonian minimizer with box projection") {
  auto dyn = dynamics_identity();
  auto cost = cost_quadratic();
  auto box = ControlSpace::box_space(Vec::Constant(1, -1.0), Vec::Ones(1));
  Vec a = minimize_hamiltonian(dyn, cost, 0, Vec::Zero(1), dummy_mu(), 1.0,
                               Vec::Constant(1, 3.0), box);
  CHECK(a(0) == Catch::Approx(-1.0));
}

TEST_CASE("hamiltonian minimizer on a quartic cost") {
  auto dyn = dynamics_identity();
  CostSpec quartic;
  quartic.f1 = [](double, const Vec&, const Vec& a, double) {
    return 0.5 * a.squaredNorm() + 0.25 * std::pow(a(0), 4);
  };
  quartic.f1_a = [](double, const Vec&, const Vec& a, double) {
    return Vec(Vec::Constant(1, a(0) + std::pow(a(0), 3)));
  };
  quartic.m = 1.0;
  quartic.f1_form = F1Form::generic;

  // oracle: bisection for a + a^3 = -3
  double lo = -2.0, hi = 0.0;
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    (mid + mid * mid * mid + 3.0 < 0 ? lo : hi) = mid;
  }
  double root = 0.5 * (lo + hi);
  CHECK(root == Catch::Approx(-1.21341).margin(1e-5));

  Vec a = minimize_hamiltonian(dyn, quartic, 0, Vec::Zero(1), dummy_mu(), 1.0,
                               Vec::Constant(1, 3.0), ControlSpace::full(1));
  CHECK(a(0) == Catch::Approx(root).margin(1e-7));
}

TEST_CASE("constant terminal cost gives constant Y and zero Z") {
  auto s = scenario_lq(0.0, 2000, 25, 3);
  s.cost = CostSpec{};
  s.cost.g = [](const Vec&, const WeightedSample&, double) { return 2.5; };
  auto ens = simulate_reference(s);
  auto zero = ControlField::zero_control(s.controls);
  auto pr = picard_solve(ens, zero, s.dynamics);
  auto adj = solve_adjoint(pr.reweighted, zero, pr.flow, s.dynamics, s.cost);
  const auto& pd = ens.p();
  for (int i = 0; i < pd.N; i += 37)
    for (int k = 0; k <= pd.Nt; k += 5) {
      REQUIRE(adj.Y(i, k) == Catch::Approx(2.5).margin(1e-8));
      if (k < pd.Nt)
        REQUIRE(adj.z(i, k, 0, pd.Nt, pd.d) == Catch::Approx(0.0).margin(1e-8));
    }
}

TEST_CASE("martingale representation of the terminal state") {
  // g(x) = x, sigma = 1, alpha = 0: Y_k = X_k and Z = 1
  auto s = scenario_lq(0.0, 20000, 40, 5);
  s.cost = CostSpec{};
  s.cost.g = [](const Vec& x, const WeightedSample&, double) { return x(0); };
  auto ens = simulate_reference(s);
  auto zero = ControlField::zero_control(s.controls);
  auto pr = picard_solve(ens, zero, s.dynamics);
  auto adj = solve_adjoint(pr.reweighted, zero, pr.flow, s.dynamics, s.cost);
  const auto& pd = ens.p();
  for (int k : {0, 10, 20, 39}) {
    double zmean = 0, yerr = 0, scale = 0;
    for (int i = 0; i < pd.N; ++i) {
      zmean += adj.z(i, k, 0, pd.Nt, pd.d);
      yerr += std::abs(adj.Y(i, k) - pd.x(i, k, 0));
      scale += std::abs(pd.x(i, k, 0));
    }
    zmean /= pd.N;
    CHECK(std::abs(zmean - 1.0) < 0.02);
    CHECK(yerr / scale < 0.02);
  }
}

TEST_CASE("conditional exit terminal value is exactly -eps / p_T") {
  ConditionalExitParams prm;
  prm.L = [](const Vec&, const Vec& a) { return 0.5 * a.squaredNorm(); };
  prm.L_a = [](const Vec&, const Vec& a) { return a; };
  prm.m = 1.0;
  prm.L_quadratic = true;
  prm.eps = 0.25;
  auto cost = make_conditional_exit(prm);

  auto s = scenario_halfline(4000, 50, 7);
  s.cost = cost.spec;
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.2));
  auto pr = picard_solve(ens, alpha, s.dynamics);
  auto adj = solve_adjoint(pr.reweighted, alpha, pr.flow, s.dynamics, s.cost);
  const auto& pd = ens.p();
  double expected = -prm.eps / pr.flow.survival(pd.Nt);
  for (int i = 0; i < pd.N; ++i) {
    if (pd.survived(i))
      REQUIRE(adj.Y(i, pd.Nt) == Catch::Approx(expected).margin(1e-12));
    else
      REQUIRE(adj.Y(i, pd.Nt) == 0.0);
  }
}

TEST_CASE("Y and Z vanish after exit") {
  auto s = scenario_halfline(3000, 40, 9);
  s.cost = cost_lq(1.0);
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.3));
  auto pr = picard_solve(ens, alpha, s.dynamics);
  auto adj = solve_adjoint(pr.reweighted, alpha, pr.flow, s.dynamics, s.cost);
  const auto& pd = ens.p();
  for (int i = 0; i < pd.N; ++i) {
    int ex = pd.exit_step[i];
    if (ex > pd.Nt) continue;
    for (int k = ex; k <= pd.Nt; ++k) REQUIRE(adj.Y(i, k) == 0.0);
    for (int k = ex; k < pd.Nt; ++k)
      REQUIRE(adj.z(i, k, 0, pd.Nt, pd.d) == 0.0);
  }
}

TEST_CASE("tower property: mean of Y_0 estimates J on the full space") {
  auto s = scenario_lq(1.0, 20000, 50, 11);
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.4));
  auto pr = picard_solve(ens, alpha, s.dynamics);
  auto est = cost_estimate(pr.reweighted, alpha, pr.flow, s.cost);
  auto adj = solve_adjoint(pr.reweighted, alpha, pr.flow, s.dynamics, s.cost);
  const auto& pd = ens.p();
  auto y0 = mean_se(pd.N, [&](std::int64_t i) { return adj.Y(i, 0); });
  CHECK(std::abs(y0.mean - est.J) <= 3.0 * std::hypot(y0.se, est.se));
}

TEST_CASE("pathwise backward residual has mean zero") {
  auto s = scenario_lq(1.0, 8000, 30, 13);
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.3));
  auto pr = picard_solve(ens, alpha, s.dynamics);
  auto adj = solve_adjoint(pr.reweighted, alpha, pr.flow, s.dynamics, s.cost);
  const auto& pd = ens.p();
  for (int k : {0, 10, 20, 29}) {
    // The continuation and Z.dW pieces cancel pathwise, so the combined
    // residual SE understates sampling noise; measure each piece's scale.
    auto reg_part = mean_se(pd.N, [&](std::int64_t i) {
      if (!pd.is_alive(i, k)) return 0.0;
      double yplus = pd.is_alive(i, k + 1) ? adj.Y(i, k + 1) : 0.0;
      Vec xi = pd.state(i, k);
      Vec ai = alpha.action(pd, i, k);
      double drv = s.cost.eval_f1(pd.times(k), xi, ai, pr.flow.survival(k));
      double w = pr.reweighted.weight(i, k + 1);
      return w * (adj.Y(i, k) - yplus - drv * pd.dt);
    });
    auto z_part = mean_se(pd.N, [&](std::int64_t i) {
      if (!pd.is_alive(i, k)) return 0.0;
      double w = pr.reweighted.weight(i, k + 1);
      return w * adj.z(i, k, 0, pd.Nt, pd.d) * pr.reweighted.dw_alpha(i, k, 0);
    });
    double mean = reg_part.mean + z_part.mean;
    double se = std::hypot(reg_part.se, z_part.se);
    REQUIRE(std::abs(mean) <= 3.0 * std::max(se, 1e-12));
  }
}

TEST_CASE("regression diagnostics are populated") {
  auto s = scenario_lq(1.0, 1000, 20, 15);
  auto ens = simulate_reference(s);
  auto zero = ControlField::zero_control(s.controls);
  auto pr = picard_solve(ens, zero, s.dynamics);
  auto adj = solve_adjoint(pr.reweighted, zero, pr.flow, s.dynamics, s.cost);
  REQUIRE(adj.r2.size() == 20);
  REQUIRE(adj.cond.size() == 20);
  for (double c : adj.cond) CHECK(c < 1e12);
  // LQ targets are spanned by the degree-2 basis: high R^2 near terminal
  CHECK(adj.r2[19] > 0.9);
}

TEST_CASE("mean-field driver terms enter through dm_beta") {
  // With b = a + eps mean(mu), the dm_beta term shifts the driver; we only
  // check that the solver runs and produces finite values with the term on.
  auto s = scenario_lq(1.0, 2000, 20, 17);
  s.dynamics = dynamics_mean_interaction(0.1);
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.2));
  auto pr = picard_solve(ens, alpha, s.dynamics);
  auto adj = solve_adjoint(pr.reweighted, alpha, pr.flow, s.dynamics, s.cost);
  const auto& pd = ens.p();
  for (int i = 0; i < pd.N; i += 101)
    for (int k = 0; k <= pd.Nt; ++k) REQUIRE(std::isfinite(adj.Y(i, k)));
}
