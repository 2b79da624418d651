#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "mkv/fixed_point.hpp"

#include <cmath>

using namespace mkv;
using namespace mkvtest;

namespace {

Scenario mean_interaction_scenario(double eps, int particles = 8000,
                                   std::uint64_t seed = 47) {
  Scenario s;
  s.domain = DomainSpec::full_space(1);
  s.dynamics = dynamics_mean_interaction(eps);
  s.controls = ControlSpace::full(1);
  s.cost = cost_quadratic();
  s.horizon = 1.0;
  s.steps = 50;
  s.particles = particles;
  s.seed = seed;
  s.initial_law = initial_gaussian(Vec::Ones(1), 0.5);
  return s;
}

// A crude flow initialization: reference atoms, survival ramped down.
MeasureFlow perturbed_flow(MeasureFlow f, double shift) {
  for (int k = 0; k <= f.steps(); ++k) {
    Mat pts = f.laws[k].points;
    pts.array() += shift;
    f.laws[k] = WeightedSample::make(std::move(pts), f.laws[k].weights, true);
  }
  return f;
}

}  // namespace

TEST_CASE("measure-free dynamics short-circuit to one iteration") {
  auto s = scenario_lq(1.0, 2000, 30);
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.3));
  auto res = picard_solve(ens, alpha, s.dynamics);
  CHECK(res.converged);
  CHECK(res.trace.size() == 1);
  CHECK(res.trace[0] == 0.0);
}

TEST_CASE("zero interaction strength reproduces the reference flow") {
  auto s = mean_interaction_scenario(0.0, 2000);
  auto ens = simulate_reference(s);
  auto ref = empirical_flow(ens);
  auto res = picard_solve(ens, ControlField::zero_control(s.controls),
                          s.dynamics);
  CHECK(res.converged);
  CHECK(flow_distance(res.flow, ref) == Catch::Approx(0.0).margin(1e-14));
}

TEST_CASE("picard converges from two initializations to the same flow") {
  auto s = mean_interaction_scenario(0.1);
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.2));

  PicardOptions opts;
  opts.tol = 1e-6;  // CRN make the fixed point deterministic; tight tol is fine
  auto res1 = picard_solve(ens, alpha, s.dynamics, opts);
  CHECK(res1.converged);

  PicardOptions opts2 = opts;
  opts2.init_flow = perturbed_flow(empirical_flow(ens), 0.8);
  auto res2 = picard_solve(ens, alpha, s.dynamics, opts2);
  CHECK(res2.converged);

  CHECK(flow_distance(res1.flow, res2.flow) < 2.0 * opts.tol);
}

TEST_CASE("distance trace decays geometrically after the first iteration") {
  auto s = mean_interaction_scenario(0.1);
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.2));
  PicardOptions opts;
  opts.tol = 1e-10;
  opts.init_flow = perturbed_flow(empirical_flow(ens), 0.8);
  auto res = picard_solve(ens, alpha, s.dynamics, opts);
  REQUIRE(res.trace.size() >= 3);
  for (std::size_t j = 1; j + 1 < res.trace.size(); ++j) {
    if (res.trace[j + 1] == 0.0) break;  // hit exact fixed point
    REQUIRE(res.trace[j + 1] < res.trace[j]);
  }
  CHECK_FALSE(res.noncontraction_warning);
}

TEST_CASE("survival floor on a killed mean-interaction problem") {
  auto s = mean_interaction_scenario(0.1, 4000);
  s.domain = DomainSpec::half_line(0.0);
  s.initial_law = initial_point(Vec::Ones(1));
  auto ens = simulate_reference(s);
  auto alpha =
      ControlField::constant_control(s.controls, Vec::Constant(1, 0.2));
  auto res = picard_solve(ens, alpha, s.dynamics);
  const auto& pd = ens.p();

  double ref_frac = 0, min_w = 1e300;
  for (int i = 0; i < pd.N; ++i)
    if (pd.survived(i)) {
      ref_frac += 1.0;
      min_w = std::min(min_w, res.reweighted.terminal_weight(i));
    }
  ref_frac /= pd.N;
  CHECK(res.flow.survival(pd.Nt) >= ref_frac * min_w - 1e-12);
}
