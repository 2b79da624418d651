#pragma once

// Shared scenario builders for the test suites.

#include "mkv/model.hpp"
#include "mkv/simulate.hpp"

namespace mkvtest {

using namespace mkv;

// dX = a dt + sigma dW, affine mode (b1 = I, b2 = 0).
inline DynamicsSpec dynamics_identity(int d = 1, double sigma = 1.0) {
  DynamicsSpec dyn;
  dyn.mode = BetaMode::affine;
  dyn.state_dim = d;
  dyn.action_dim = d;
  dyn.sigma = [sigma, d](double, const Vec&) {
    return Mat(sigma * Mat::Identity(d, d));
  };
  dyn.b1 = [d](double, const Vec&) { return Mat(Mat::Identity(d, d)); };
  dyn.b2 = [d](double, const Vec&) { return Vec(Vec::Zero(d)); };
  dyn.lipschitz_L = 1.0 / sigma;
  dyn.measure_dependent = false;
  return dyn;
}

// dX = (a + eps * mean(mu)) dt + sigma dW; the only built-in with genuine
// measure dependence. dm_beta is centered: (eps/sigma)(x_add - mean(mu)).
inline DynamicsSpec dynamics_mean_interaction(double eps, double sigma = 1.0) {
  DynamicsSpec dyn;
  dyn.mode = BetaMode::generic;
  dyn.state_dim = 1;
  dyn.action_dim = 1;
  dyn.sigma = [sigma](double, const Vec&) {
    return Mat(sigma * Mat::Identity(1, 1));
  };
  dyn.drift = [eps](double, const Vec&, const Vec& a, const WeightedSample& mu,
                    double) { return Vec(a + eps * mu.mean); };
  dyn.measure_dependent = (eps != 0.0) ? true : true;  // flag the dependence
  dyn.lipschitz_L = std::max(1.0, 8.0 * std::abs(eps)) / sigma;
  dyn.dm_beta = [eps, sigma](double, const Vec&, const Vec&,
                             const WeightedSample& mu, double, const Vec& xa) {
    return Vec((eps / sigma) * (xa - mu.mean));
  };
  dyn.dm_beta_state_dependent = false;
  return dyn;
}

// f1 = |a|^2 / 2, m = 1; no mean-field terms.
inline CostSpec cost_quadratic() {
  CostSpec c;
  c.f1 = [](double, const Vec&, const Vec& a, double) {
    return 0.5 * a.squaredNorm();
  };
  c.f1_a = [](double, const Vec&, const Vec& a, double) { return a; };
  c.m = 1.0;
  c.f1_form = F1Form::quadratic;
  return c;
}

// Quadratic control with terminal (q/2)|x|^2 (the scalar LQ instance).
inline CostSpec cost_lq(double q) {
  CostSpec c = cost_quadratic();
  c.g = [q](const Vec& x, const WeightedSample&, double) {
    return 0.5 * q * x.squaredNorm();
  };
  return c;
}

inline Scenario scenario_lq(double q = 1.0, int particles = 4000,
                            int steps = 50, std::uint64_t seed = 42) {
  Scenario s;
  s.domain = DomainSpec::full_space(1);
  s.dynamics = dynamics_identity();
  s.controls = ControlSpace::full(1);
  s.cost = cost_lq(q);
  s.horizon = 1.0;
  s.steps = steps;
  s.particles = particles;
  s.seed = seed;
  s.initial_law = initial_gaussian(Vec::Zero(1), 1.0);
  return s;
}

inline Scenario scenario_halfline(int particles = 20000, int steps = 100,
                                  std::uint64_t seed = 7,
                                  bool bridge = true) {
  Scenario s;
  s.domain = DomainSpec::half_line(0.0);
  s.dynamics = dynamics_identity();
  s.controls = ControlSpace::full(1);
  s.cost = cost_quadratic();
  s.horizon = 1.0;
  s.steps = steps;
  s.particles = particles;
  s.seed = seed;
  s.initial_law = initial_point(Vec::Ones(1));
  s.bridge_correction = bridge;
  return s;
}

}  // namespace mkvtest
