#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"
#include "mkv/model.hpp"

using namespace mkv;
using namespace mkvtest;

namespace {

Scenario basic_halfline_scenario() {
  Scenario s;
  s.domain = DomainSpec::half_line(0.0);
  s.dynamics = dynamics_identity();
  s.controls = ControlSpace::full(1);
  s.cost = cost_quadratic();
  s.horizon = 1.0;
  s.steps = 50;
  s.particles = 100;
  s.seed = 5;
  s.initial_law = initial_point(Vec::Ones(1));
  return s;
}

}  // namespace

TEST_CASE("validate_scenario accepts a well-formed scenario") {
  auto diags = validate_scenario(basic_halfline_scenario());
  for (const auto& d : diags) INFO(d.invariant << ": " << d.message);
  CHECK(diags.empty());
}

TEST_CASE("validate_scenario flags an inverted interval") {
  auto s = basic_halfline_scenario();
  s.domain = DomainSpec::interval(1.0, 0.0);
  s.initial_law = initial_point(Vec::Constant(1, 0.5));
  auto diags = validate_scenario(s);
  bool found = false;
  for (const auto& d : diags)
    if (d.invariant == "lo < hi violated") found = true;
  CHECK(found);
}

TEST_CASE("validate_scenario flags an uncentered linear derivative") {
  auto s = basic_halfline_scenario();
  s.domain = DomainSpec::interval(0.0, 1.0);
  s.initial_law = initial_uniform(Vec::Zero(1), Vec::Ones(1));
  // dm_g(xtilde) = xtilde, not centered under any mu supported in (0,1)
  s.cost.g = [](const Vec&, const WeightedSample&, double) { return 0.0; };
  s.cost.dm_g = [](const Vec&, const WeightedSample&, double, const Vec& xa) {
    return xa(0);
  };
  auto diags = validate_scenario(s);
  bool found = false;
  for (const auto& d : diags)
    if (d.invariant == "derivative not centered") found = true;
  CHECK(found);
}

TEST_CASE("beta_eval solves sigma beta = b") {
  WeightedSample mu = WeightedSample::atoms1d({0.0}, {1.0});
  Vec a(2);
  a << 1.0, 2.0;

  auto dyn = dynamics_identity(2, 1.0);
  Vec b1 = beta_eval(dyn, 0.0, Vec::Zero(2), a, mu, 1.0);
  CHECK(b1(0) == Catch::Approx(1.0));
  CHECK(b1(1) == Catch::Approx(2.0));

  auto dyn2 = dynamics_identity(2, 2.0);
  Vec b2 = beta_eval(dyn2, 0.0, Vec::Zero(2), a, mu, 1.0);
  CHECK(b2(0) == Catch::Approx(0.5));
  CHECK(b2(1) == Catch::Approx(1.0));

  // diag(2,4), b = (1,1): oracle by direct dense solve
  DynamicsSpec dyn3 = dynamics_identity(2, 1.0);
  Mat sig(2, 2);
  sig << 2.0, 0.0, 0.0, 4.0;
  dyn3.sigma = [sig](double, const Vec&) { return sig; };
  dyn3.b2 = [](double, const Vec&) { return Vec(Vec::Ones(2)); };
  Vec expected = sig.partialPivLu().solve(Vec::Ones(2) + Vec::Zero(2));
  Vec got = beta_eval(dyn3, 0.0, Vec::Zero(2), Vec::Zero(2), mu, 1.0);
  CHECK((got - expected).norm() < 1e-14);
  CHECK(got(0) == Catch::Approx(0.5));
  CHECK(got(1) == Catch::Approx(0.25));
}

TEST_CASE("beta_eval reports a singular volatility") {
  auto dyn = dynamics_identity(2, 1.0);
  dyn.sigma = [](double, const Vec&) {
    Mat m(2, 2);
    m << 1.0, 1.0, 1.0, 1.0;
    return m;
  };
  WeightedSample mu = WeightedSample::atoms1d({0.0}, {1.0});
  CHECK_THROWS_AS(beta_eval(dyn, 0.0, Vec::Zero(2), Vec::Ones(2), mu, 1.0),
                  singular_volatility_error);
}

TEST_CASE("affine beta is affine in the action") {
  RngStream r(3, "test/affine");
  auto dyn = dynamics_identity(2, 1.7);
  WeightedSample mu = WeightedSample::atoms1d({0.0}, {1.0});
  for (int trial = 0; trial < 100; ++trial) {
    Vec a(2), b(2);
    double lam = r.uniform(trial, 0);
    for (int j = 0; j < 2; ++j) {
      a(j) = r.normal(trial, 1 + j);
      b(j) = r.normal(trial, 3 + j);
    }
    Vec mix = lam * a + (1.0 - lam) * b;
    Vec lhs = beta_eval(dyn, 0.3, Vec::Zero(2), mix, mu, 1.0);
    Vec rhs = lam * beta_eval(dyn, 0.3, Vec::Zero(2), a, mu, 1.0) +
              (1.0 - lam) * beta_eval(dyn, 0.3, Vec::Zero(2), b, mu, 1.0);
    REQUIRE((lhs - rhs).norm() < 1e-12);
  }
}

TEST_CASE("declared Lipschitz constant holds on probe tuples") {
  RngStream r(5, "test/lipschitz");
  auto dyn = dynamics_mean_interaction(0.1, 1.0);
  Mat atoms(6, 1);
  for (int i = 0; i < 6; ++i) atoms(i, 0) = -2.0 + 0.8 * i;
  for (int trial = 0; trial < 300; ++trial) {
    Vec wa(6), wb(6);
    for (int i = 0; i < 6; ++i) {
      wa(i) = r.uniform(trial, i);
      wb(i) = r.uniform(trial, 10 + i);
    }
    auto mu = WeightedSample::make(atoms, wa, true);
    auto nu = WeightedSample::make(atoms, wb, true);
    Vec a = Vec::Constant(1, r.normal(trial, 20));
    Vec b = Vec::Constant(1, r.normal(trial, 21));
    double p = 0.5 + 0.5 * r.uniform(trial, 22);
    double q = 0.5 + 0.5 * r.uniform(trial, 23);
    Vec x = Vec::Zero(1);
    double lhs = (beta_eval(dyn, 0.1, x, a, mu, p) -
                  beta_eval(dyn, 0.1, x, b, nu, q))
                     .norm();
    double rhs = dyn.lipschitz_L * ((a - b).norm() + lecam_distance(mu, nu) +
                                    std::abs(p - q));
    REQUIRE(lhs <= rhs + 1e-12);
  }
}

TEST_CASE("domain membership") {
  auto box = DomainSpec::box(Vec::Zero(2), Vec::Ones(2));
  CHECK(box.contains(Vec::Constant(2, 0.5)));
  CHECK_FALSE(box.contains(Vec::Constant(2, 1.5)));

  auto ball = DomainSpec::ball(Vec::Zero(3), 2.0);
  CHECK(ball.contains(Vec::Constant(3, 0.5)));
  CHECK_FALSE(ball.contains(Vec::Constant(3, 1.5)));

  auto full = DomainSpec::full_space(2);
  CHECK(full.contains(Vec::Constant(2, 1e12)));
}

TEST_CASE("control space projection") {
  auto box = ControlSpace::box_space(Vec::Constant(1, -1.0), Vec::Ones(1));
  CHECK(box.project(Vec::Constant(1, 3.0))(0) == 1.0);
  CHECK(box.contains(Vec::Zero(1)));

  auto ball = ControlSpace::ball_space(2, 1.0);
  Vec far = Vec::Constant(2, 5.0);
  CHECK(ball.project(far).norm() == Catch::Approx(1.0));
}
