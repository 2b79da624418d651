#pragma once

#include "mkv/common.hpp"
#include "mkv/measures.hpp"
#include "mkv/rng.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace mkv {

// ---------------------------------------------------------------------------
// Domains
// ---------------------------------------------------------------------------

enum class DomainKind { full_space, half_line, interval, box, ball };

struct DomainSpec {
  DomainKind kind = DomainKind::full_space;
  int dim = 1;
  double threshold = 0;  // half_line: D = (threshold, inf), d = 1
  double lo1 = 0, hi1 = 0;  // interval, d = 1
  Vec lo, hi;               // box
  Vec center;               // ball
  double radius = 0;        // ball

  bool contains(const Vec& x) const {
    switch (kind) {
      case DomainKind::full_space:
        return true;
      case DomainKind::half_line:
        return x(0) > threshold;
      case DomainKind::interval:
        return x(0) > lo1 && x(0) < hi1;
      case DomainKind::box:
        return (x.array() > lo.array()).all() && (x.array() < hi.array()).all();
      case DomainKind::ball:
        return (x - center).norm() < radius;
    }
    return false;
  }

  static DomainSpec full_space(int d) { return {DomainKind::full_space, d}; }
  static DomainSpec half_line(double a) {
    DomainSpec s;
    s.kind = DomainKind::half_line;
    s.dim = 1;
    s.threshold = a;
    return s;
  }
  static DomainSpec interval(double a, double b) {
    DomainSpec s;
    s.kind = DomainKind::interval;
    s.dim = 1;
    s.lo1 = a;
    s.hi1 = b;
    return s;
  }
  static DomainSpec box(Vec a, Vec b) {
    DomainSpec s;
    s.kind = DomainKind::box;
    s.dim = static_cast<int>(a.size());
    s.lo = std::move(a);
    s.hi = std::move(b);
    return s;
  }
  static DomainSpec ball(Vec c, double r) {
    DomainSpec s;
    s.kind = DomainKind::ball;
    s.dim = static_cast<int>(c.size());
    s.center = std::move(c);
    s.radius = r;
    return s;
  }
};

// ---------------------------------------------------------------------------
// Dynamics: drift b(t,x,a,mu,p), invertible volatility sigma(t,x), and
// beta = sigma^{-1} b. Affine mode declares b = b1(t,x) a + b2(t,x).
// ---------------------------------------------------------------------------

enum class BetaMode { generic, affine };

struct DynamicsSpec {
  BetaMode mode = BetaMode::affine;
  int state_dim = 1;
  int action_dim = 1;

  std::function<Vec(double, const Vec&, const Vec&, const WeightedSample&,
                    double)>
      drift;                                      // generic mode
  std::function<Mat(double, const Vec&)> sigma;   // invertible d x d
  std::function<Mat(double, const Vec&)> b1;      // affine: d x k
  std::function<Vec(double, const Vec&)> b2;      // affine: d

  // Fast path for coefficients independent of (t, x): beta = beta1 a + beta2
  // with the solves done once. Set via freeze_constant_coefficients().
  bool constant_coefficients = false;
  Mat sigma0, beta10;
  Vec beta20;

  void freeze_constant_coefficients() {
    Vec x0 = Vec::Zero(state_dim);
    sigma0 = sigma(0.0, x0);
    Eigen::PartialPivLU<Mat> lu(sigma0);
    beta10 = lu.solve(b1(0.0, x0));
    beta20 = lu.solve(b2(0.0, x0));
    constant_coefficients = true;
  }

  double lipschitz_L = 0;
  // Whether b actually reads (mu, p); lets the flow fixed point detect that a
  // single iteration suffices.
  bool measure_dependent = false;

  // Optional linear derivative of beta in the measure and p-derivative, used
  // by the adjoint driver when measure_dependent. Signature of dm_beta:
  // (t, x_copy, a_copy, mu, p, x_additional) -> d-vector, centered in the
  // additional variable.
  std::function<Vec(double, const Vec&, const Vec&, const WeightedSample&,
                    double, const Vec&)>
      dm_beta;
  std::function<Vec(double, const Vec&, const Vec&, const WeightedSample&,
                    double)>
      beta_p;
  // dm_beta depends on the copy state (forces pairwise averaging) or not.
  bool dm_beta_state_dependent = false;

  Vec eval_drift(double t, const Vec& x, const Vec& a,
                 const WeightedSample& mu, double p) const {
    if (mode == BetaMode::affine) return b1(t, x) * a + b2(t, x);
    return drift(t, x, a, mu, p);
  }
};

// beta = sigma^{-1} b via dense solve; residual guard per the volatility
// invertibility invariant.
inline Vec beta_eval(const DynamicsSpec& dyn, double t, const Vec& x,
                     const Vec& a, const WeightedSample& mu, double p) {
  Vec b = dyn.eval_drift(t, x, a, mu, p);
  Mat sig = dyn.sigma(t, x);
  if (sig.rows() == 1) {
    double s = sig(0, 0);
    if (std::abs(s) < 1e-14 * (1.0 + std::abs(b(0))))
      throw singular_volatility_error("sigma is numerically zero");
    return b / s;
  }
  Eigen::PartialPivLU<Mat> lu(sig);
  if (lu.rcond() < 1e-12)
    throw singular_volatility_error("sigma is numerically singular");
  Vec beta = lu.solve(b);
  double resid = (sig * beta - b).norm();
  if (!beta.allFinite() || !std::isfinite(resid) ||
      resid > 1e-10 * std::max(1.0, sig.norm() * beta.norm()))
    throw singular_volatility_error("sigma solve residual too large");
  return beta;
}

// ---------------------------------------------------------------------------
// Action space A: closed, convex, contains the origin.
// ---------------------------------------------------------------------------

enum class ControlSpaceKind { full_space, box, ball };

struct ControlSpace {
  ControlSpaceKind kind = ControlSpaceKind::full_space;
  int k = 1;
  Vec lo, hi;        // box
  double radius = 0; // ball (centered at the origin)

  Vec project(Vec a) const {
    switch (kind) {
      case ControlSpaceKind::full_space:
        return a;
      case ControlSpaceKind::box:
        return a.cwiseMax(lo).cwiseMin(hi);
      case ControlSpaceKind::ball: {
        double n = a.norm();
        if (n > radius && n > 0) a *= radius / n;
        return a;
      }
    }
    return a;
  }

  bool contains(const Vec& a, double tol = 1e-12) const {
    return (a - project(a)).norm() <= tol * (1.0 + a.norm());
  }

  static ControlSpace full(int k) { return {ControlSpaceKind::full_space, k}; }
  static ControlSpace box_space(Vec lo, Vec hi) {
    ControlSpace c;
    c.kind = ControlSpaceKind::box;
    c.k = static_cast<int>(lo.size());
    c.lo = std::move(lo);
    c.hi = std::move(hi);
    return c;
  }
  static ControlSpace ball_space(int k, double r) {
    ControlSpace c;
    c.kind = ControlSpaceKind::ball;
    c.k = k;
    c.radius = r;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Cost: f(t,x,a,mu,p) = f1(t,x,a,p) + f2(t,x,mu,p), terminal g(x,mu,p).
// f1 carries the p argument so the conditional-exit cost L(x,a)/p fits the
// separable form; builtins without conditioning ignore it. All dm_* terms are
// centered: their mu-weighted average over the additional variable is zero.
// ---------------------------------------------------------------------------

// Structure hint for closed-form Hamiltonian minimization.
enum class F1Form {
  generic,
  quadratic,         // f1 = (m/2) |a|^2
  quadratic_over_p,  // f1 = (m/2) |a|^2 / p
};

struct CostSpec {
  std::function<double(double, const Vec&, const Vec&, double)> f1;   // (t,x,a,p)
  std::function<Vec(double, const Vec&, const Vec&, double)> f1_a;
  std::function<double(double, const Vec&, const Vec&, double)> f1_p; // may be null
  double m = 0;  // strong-convexity modulus of f1 in a
  F1Form f1_form = F1Form::generic;

  std::function<double(double, const Vec&, const WeightedSample&, double)> f2;
  // (t, x_copy, mu, p, x_additional)
  std::function<double(double, const Vec&, const WeightedSample&, double,
                       const Vec&)>
      dm_f2;
  std::function<double(double, const Vec&, const WeightedSample&, double)> dp_f2;
  bool dm_f2_state_dependent = false;

  std::function<double(const Vec&, const WeightedSample&, double)> g;
  std::function<double(const Vec&, const WeightedSample&, double, const Vec&)>
      dm_g;
  std::function<double(const Vec&, const WeightedSample&, double)> dp_g;
  bool dm_g_state_dependent = false;

  double eval_f1(double t, const Vec& x, const Vec& a, double p) const {
    return f1 ? f1(t, x, a, p) : 0.0;
  }
  Vec eval_f1_a(double t, const Vec& x, const Vec& a, double p) const {
    return f1_a ? f1_a(t, x, a, p) : Vec(Vec::Zero(a.size()));
  }
  double eval_f1_p(double t, const Vec& x, const Vec& a, double p) const {
    return f1_p ? f1_p(t, x, a, p) : 0.0;
  }
  double eval_f2(double t, const Vec& x, const WeightedSample& mu,
                 double p) const {
    return f2 ? f2(t, x, mu, p) : 0.0;
  }
  double eval_dm_f2(double t, const Vec& xc, const WeightedSample& mu, double p,
                    const Vec& xa) const {
    return dm_f2 ? dm_f2(t, xc, mu, p, xa) : 0.0;
  }
  double eval_dp_f2(double t, const Vec& x, const WeightedSample& mu,
                    double p) const {
    return dp_f2 ? dp_f2(t, x, mu, p) : 0.0;
  }
  double eval_g(const Vec& x, const WeightedSample& mu, double p) const {
    return g ? g(x, mu, p) : 0.0;
  }
  double eval_dm_g(const Vec& xc, const WeightedSample& mu, double p,
                   const Vec& xa) const {
    return dm_g ? dm_g(xc, mu, p, xa) : 0.0;
  }
  double eval_dp_g(const Vec& x, const WeightedSample& mu, double p) const {
    return dp_g ? dp_g(x, mu, p) : 0.0;
  }
};

// ---------------------------------------------------------------------------
// Scenario: the full declarative problem description.
// ---------------------------------------------------------------------------

struct Scenario {
  DomainSpec domain;
  DynamicsSpec dynamics;
  ControlSpace controls;
  CostSpec cost;
  double horizon = 1.0;
  int steps = 100;     // N_t
  int particles = 1000;
  std::uint64_t seed = 1;
  // xi sampler; draws must land in the domain.
  std::function<Vec(const RngStream&, std::int64_t)> initial_law;
  bool bridge_correction = false;

  double dt() const { return horizon / steps; }
};

inline std::function<Vec(const RngStream&, std::int64_t)> initial_point(Vec x0) {
  return [x0](const RngStream&, std::int64_t) { return x0; };
}

inline std::function<Vec(const RngStream&, std::int64_t)> initial_gaussian(
    Vec mean, double sd) {
  return [mean, sd](const RngStream& r, std::int64_t i) {
    Vec x = mean;
    for (int j = 0; j < x.size(); ++j)
      x(j) += sd * r.normal(static_cast<std::uint64_t>(i), j);
    return x;
  };
}

inline std::function<Vec(const RngStream&, std::int64_t)> initial_uniform(
    Vec lo, Vec hi) {
  return [lo, hi](const RngStream& r, std::int64_t i) {
    Vec x = lo;
    for (int j = 0; j < x.size(); ++j)
      x(j) += (hi(j) - lo(j)) * r.uniform(static_cast<std::uint64_t>(i), j);
    return x;
  };
}

inline std::function<Vec(const RngStream&, std::int64_t)> initial_atoms(
    Mat atoms) {
  return [atoms](const RngStream& r, std::int64_t i) {
    auto n = static_cast<std::uint64_t>(atoms.rows());
    auto pick = static_cast<int>(r.uniform(static_cast<std::uint64_t>(i)) * n);
    if (pick >= static_cast<int>(n)) pick = static_cast<int>(n) - 1;
    return Vec(atoms.row(pick).transpose());
  };
}

// ---------------------------------------------------------------------------
// Scenario validation: probe-based invariant checks (evaluators are opaque).
// Returns one diagnostic per violated invariant, empty iff all hold.
// ---------------------------------------------------------------------------

struct Diagnostic {
  std::string invariant;
  std::string message;
};

inline std::vector<Diagnostic> validate_scenario(const Scenario& s,
                                                 int probes = 64) {
  std::vector<Diagnostic> out;
  auto add = [&](std::string inv, std::string msg) {
    out.push_back({std::move(inv), std::move(msg)});
  };

  const int d = s.domain.dim;
  const int k = s.controls.k;

  // Domain invariants
  if (s.domain.kind == DomainKind::interval && !(s.domain.lo1 < s.domain.hi1))
    add("lo < hi violated", "interval lower bound is not below upper bound");
  if (s.domain.kind == DomainKind::box &&
      !((s.domain.lo.array() < s.domain.hi.array()).all()))
    add("lo < hi violated", "box lower bound is not below upper bound");
  if (s.domain.kind == DomainKind::ball && !(s.domain.radius > 0))
    add("radius > 0 violated", "ball radius must be positive");

  if (!s.controls.contains(Vec::Zero(k)))
    add("0 in A violated", "action space does not contain the origin");

  if (s.steps < 2) add("N_t >= 2 violated", "need at least two time steps");
  if (s.particles < 2) add("N >= 2 violated", "need at least two particles");
  if (!(s.horizon > 0)) add("T > 0 violated", "horizon must be positive");
  if (s.cost.m < 0) add("m >= 0 violated", "convexity modulus is negative");

  // Probe points: initial draws plus diffusive spread; probe actions.
  RngStream init_rng(s.seed, "model/validate_initial");
  RngStream probe_rng(s.seed, "model/validate_probe");
  std::vector<Vec> xs;
  bool initial_ok = true;
  for (int i = 0; i < probes; ++i) {
    Vec x0 = s.initial_law ? s.initial_law(init_rng, i) : Vec(Vec::Zero(d));
    if (!s.domain.contains(x0)) initial_ok = false;
    Vec x = x0;
    for (int j = 0; j < d; ++j)
      x(j) += std::sqrt(s.horizon) * probe_rng.normal(i, j) * 0.5;
    xs.push_back(s.domain.contains(x) ? x : x0);
  }
  if (!initial_ok)
    add("initial law in D violated", "sampled initial point outside domain");

  // A probe measure supported on the probe points.
  Mat pts(probes, d);
  for (int i = 0; i < probes; ++i) pts.row(i) = xs[i].transpose();
  WeightedSample mu =
      WeightedSample::make(pts, Vec::Ones(probes) / probes, true);
  double p_probe = 0.8;

  auto probe_action = [&](int i, int comp) {
    return probe_rng.normal(1000 + i, comp);
  };

  // Volatility invertibility / affine rank at probe points.
  bool sigma_ok = true, rank_ok = true;
  for (int i = 0; i < probes; ++i) {
    double t = s.horizon * probe_rng.uniform(2000 + i);
    Mat sig = s.dynamics.sigma(t, xs[i]);
    Eigen::JacobiSVD<Mat> svd(sig);
    if (svd.singularValues().minCoeff() <=
        1e-10 * std::max(1.0, svd.singularValues().maxCoeff()))
      sigma_ok = false;
    if (s.dynamics.mode == BetaMode::affine) {
      Eigen::JacobiSVD<Mat> svd1(s.dynamics.b1(t, xs[i]));
      if (svd1.singularValues().minCoeff() <= 1e-10) rank_ok = false;
    }
  }
  if (!sigma_ok)
    add("sigma invertible violated", "volatility nearly singular at a probe");
  if (!rank_ok)
    add("b1 full column rank violated",
        "affine drift matrix rank-deficient at a probe");

  // Centering of dm_f2 and dm_g under the probe measure.
  if (s.cost.dm_g || s.cost.dm_f2) {
    double worst_g = 0, worst_f2 = 0;
    for (int rep = 0; rep < 4; ++rep) {
      const Vec& xc = xs[rep];
      double mg = 0, mf = 0;
      for (int j = 0; j < probes; ++j) {
        Vec xa = xs[j];
        if (s.cost.dm_g) mg += mu.weights(j) * s.cost.eval_dm_g(xc, mu, p_probe, xa);
        if (s.cost.dm_f2)
          mf += mu.weights(j) *
                s.cost.eval_dm_f2(0.5 * s.horizon, xc, mu, p_probe, xa);
      }
      worst_g = std::max(worst_g, std::abs(mg));
      worst_f2 = std::max(worst_f2, std::abs(mf));
    }
    if (worst_g > 1e-8 || worst_f2 > 1e-8)
      add("derivative not centered",
          "mu-average of a linear derivative is nonzero on the probe sample");
  }

  // Midpoint convexity of f1 - (m/2)|a|^2 along random segments.
  if (s.cost.f1) {
    double worst = 0;
    for (int i = 0; i < probes; ++i) {
      Vec a(k), b(k);
      for (int c = 0; c < k; ++c) {
        a(c) = probe_action(i, c);
        b(c) = probe_action(i, k + c);
      }
      a = s.controls.project(a);
      b = s.controls.project(b);
      Vec mid = 0.5 * (a + b);
      const Vec& x = xs[i % probes];
      double t = 0.5 * s.horizon;
      auto h = [&](const Vec& u) {
        return s.cost.eval_f1(t, x, u, p_probe) -
               0.5 * s.cost.m * u.squaredNorm();
      };
      double slack = 0.5 * (h(a) + h(b)) - h(mid);
      worst = std::min(worst, slack);
    }
    if (worst < -1e-10)
      add("f1 convexity violated",
          "f1 - (m/2)|a|^2 failed a midpoint convexity probe");
  }

  return out;
}

}  // namespace mkv
