#pragma once

#include "mkv/common.hpp"
#include "mkv/measures.hpp"
#include "mkv/model.hpp"
#include "mkv/rng.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <string>

namespace mkv {

// ---------------------------------------------------------------------------
// One-entry cache keyed by the identity of a (mu, p) pair. Cost derivative
// evaluators are called once per particle along the same measure, so caching
// the per-measure precomputation turns O(N^2) into O(N).
// ---------------------------------------------------------------------------

template <class Prepared>
class MeasureCache {
public:
  template <class Build>
  std::shared_ptr<const Prepared> get(const WeightedSample& m, double p,
                                      Build&& build) const {
    std::lock_guard<std::mutex> lock(mu_);
    if (val_ && pts_ == m.points.data() && w_ == m.weights.data() &&
        p_ == p && n_ == m.size())
      return val_;
    val_ = std::make_shared<const Prepared>(build());
    pts_ = m.points.data();
    w_ = m.weights.data();
    p_ = p;
    n_ = m.size();
    return val_;
  }

private:
  mutable std::mutex mu_;
  mutable const double* pts_ = nullptr;
  mutable const double* w_ = nullptr;
  mutable double p_ = -1;
  mutable int n_ = -1;
  mutable std::shared_ptr<const Prepared> val_;
};

// A functional of the conditional law with a centered linear derivative.
struct MeasureFunctional {
  std::function<double(const WeightedSample&)> value;
  std::function<double(const WeightedSample&, const Vec&)> dm;  // (mu, x_add)
};

inline MeasureFunctional zero_functional() {
  return {[](const WeightedSample&) { return 0.0; },
          [](const WeightedSample&, const Vec&) { return 0.0; }};
}

struct BuiltinCost {
  std::string kind;
  CostSpec spec;
};

// ---------------------------------------------------------------------------
// quadratic_control: f1 = |a|^2 / 2, m = 1.
// ---------------------------------------------------------------------------

inline BuiltinCost make_quadratic_control() {
  BuiltinCost c;
  c.kind = "quadratic_control";
  c.spec.f1 = [](double, const Vec&, const Vec& a, double) {
    return 0.5 * a.squaredNorm();
  };
  c.spec.f1_a = [](double, const Vec&, const Vec& a, double) { return a; };
  c.spec.m = 1.0;
  c.spec.f1_form = F1Form::quadratic;
  return c;
}

// Attach a plain terminal cost g(x) with no mean-field terms.
inline BuiltinCost with_plain_terminal(BuiltinCost c,
                                       std::function<double(const Vec&)> g) {
  c.spec.g = [g](const Vec& x, const WeightedSample&, double) { return g(x); };
  return c;
}

// Terminal (1/2)|x - mean(mu)|^2: the potential mean-field tracking cost.
inline BuiltinCost make_mean_tracking(BuiltinCost base = make_quadratic_control()) {
  BuiltinCost c = std::move(base);
  c.kind = "mean_tracking";
  c.spec.g = [](const Vec& x, const WeightedSample& mu, double) {
    return 0.5 * (x - mu.mean).squaredNorm();
  };
  c.spec.dm_g = [](const Vec& xc, const WeightedSample& mu, double,
                   const Vec& xa) {
    return -(xc - mu.mean).dot(xa - mu.mean);
  };
  c.spec.dm_g_state_dependent = true;  // depends on the copy state xc
  return c;
}

// ---------------------------------------------------------------------------
// conditional_exit: f = (L(x,a) + Phi(mu_t))/p, g = (Psi(mu_T) - eps log p)/p.
// The 1/p factor rides on f1 through its p argument.
// ---------------------------------------------------------------------------

struct ConditionalExitParams {
  std::function<double(const Vec&, const Vec&)> L;    // (x, a)
  std::function<Vec(const Vec&, const Vec&)> L_a;
  double m = 0;  // convexity modulus of L in a
  bool L_quadratic = false;  // L = (m/2)|a|^2
  MeasureFunctional Phi = zero_functional();
  MeasureFunctional Psi = zero_functional();
  double eps = 0;
};

inline BuiltinCost make_conditional_exit(ConditionalExitParams prm) {
  BuiltinCost c;
  c.kind = "conditional_exit";
  auto L = prm.L;
  auto L_a = prm.L_a;
  auto Phi = prm.Phi;
  auto Psi = prm.Psi;
  double eps = prm.eps;
  c.spec.f1 = [L](double, const Vec& x, const Vec& a, double p) {
    return L(x, a) / p;
  };
  c.spec.f1_a = [L_a](double, const Vec& x, const Vec& a, double p) {
    return Vec(L_a(x, a) / p);
  };
  c.spec.f1_p = [L](double, const Vec& x, const Vec& a, double p) {
    return -L(x, a) / (p * p);
  };
  c.spec.m = prm.m;
  c.spec.f1_form = prm.L_quadratic ? F1Form::quadratic_over_p : F1Form::generic;
  c.spec.f2 = [Phi](double, const Vec&, const WeightedSample& mu, double p) {
    return Phi.value(mu) / p;
  };
  c.spec.dm_f2 = [Phi](double, const Vec&, const WeightedSample& mu, double p,
                       const Vec& xa) { return Phi.dm(mu, xa) / p; };
  c.spec.dp_f2 = [Phi](double, const Vec&, const WeightedSample& mu, double p) {
    return -Phi.value(mu) / (p * p);
  };
  c.spec.g = [Psi, eps](const Vec&, const WeightedSample& mu, double p) {
    return (Psi.value(mu) - eps * std::log(p)) / p;
  };
  c.spec.dm_g = [Psi](const Vec&, const WeightedSample& mu, double p,
                      const Vec& xa) { return Psi.dm(mu, xa) / p; };
  c.spec.dp_g = [Psi, eps](const Vec&, const WeightedSample& mu, double p) {
    return -(Psi.value(mu) - eps * std::log(p) + eps) / (p * p);
  };
  return c;
}

// ---------------------------------------------------------------------------
// variance_terminal: g(x, mu, p) = -int int |y - y'|^2 mu(dy) mu(dy'); with
// f = 0 the cost functional is -2 p_T Var[X_T | alive].
// ---------------------------------------------------------------------------

namespace detail {
struct VarStats {
  double m2 = 0;       // int |y|^2 dmu
  Vec mean;            // int y dmu
  double pair_sq = 0;  // int int |y-y'|^2 = 2(m2 - |mean|^2)
};
inline VarStats var_stats(const WeightedSample& mu) {
  VarStats s;
  s.mean = mu.mean;
  for (int i = 0; i < mu.size(); ++i)
    s.m2 += mu.weights(i) * mu.points.row(i).squaredNorm();
  s.pair_sq = 2.0 * (s.m2 - s.mean.squaredNorm());
  return s;
}
}  // namespace detail

inline BuiltinCost make_variance_terminal() {
  BuiltinCost c;
  c.kind = "variance_terminal";
  auto cache = std::make_shared<MeasureCache<detail::VarStats>>();
  c.spec.g = [cache](const Vec&, const WeightedSample& mu, double p) {
    auto s = cache->get(mu, p, [&] { return detail::var_stats(mu); });
    return -s->pair_sq;
  };
  c.spec.dm_g = [cache](const Vec&, const WeightedSample& mu, double p,
                        const Vec& xa) {
    auto s = cache->get(mu, p, [&] { return detail::var_stats(mu); });
    double to_xa = xa.squaredNorm() - 2.0 * xa.dot(s->mean) + s->m2;
    return -2.0 * to_xa + 2.0 * s->pair_sq;
  };
  c.spec.dp_g = [](const Vec&, const WeightedSample&, double) { return 0.0; };
  return c;
}

// ---------------------------------------------------------------------------
// fw_target: g(x, mu, p) = (l / 2p) || p mu - p_hat mu_hat ||_{-s}^2 with the
// exact Matern-kernel pairings. Derivatives follow the closed forms
//   dm_g(xa) = l <zeta, delta_xa - mu>,   zeta = p mu - p_hat mu_hat,
//   dp_g     = l ( -||zeta||^2 / (2p^2) + <zeta, mu> / p ).
// ---------------------------------------------------------------------------

namespace detail {
struct FwPrepared {
  std::shared_ptr<FwField> field;  // field of zeta
  double norm_sq = 0;              // ||zeta||^2
  double inner_mu = 0;             // <zeta, mu>
};
}  // namespace detail

struct FwTargetParams {
  double p_hat = 1.0;
  WeightedSample mu_hat;
  double s = 1.0;
  double scale = 1.0;  // the penalty weight l
};

inline BuiltinCost make_fw_target(FwTargetParams prm) {
  BuiltinCost c;
  c.kind = "fw_target";
  auto cache = std::make_shared<MeasureCache<detail::FwPrepared>>();
  auto prepare = [prm](const WeightedSample& mu, double p) {
    detail::FwPrepared out;
    FwKernel ker(mu.dim(), prm.s);
    int n = mu.size(), m = prm.mu_hat.size();
    Mat pts(n + m, mu.dim());
    Vec w(n + m);
    pts.topRows(n) = mu.points;
    w.head(n) = p * mu.weights;
    pts.bottomRows(m) = prm.mu_hat.points;
    w.tail(m) = -prm.p_hat * prm.mu_hat.weights;
    out.field = std::make_shared<FwField>(std::move(pts), std::move(w), ker);
    out.norm_sq = 0;
    out.inner_mu = 0;
    for (int i = 0; i < n; ++i) {
      double ki = out.field->eval(Vec(mu.points.row(i).transpose()));
      out.inner_mu += mu.weights(i) * ki;
      out.norm_sq += p * mu.weights(i) * ki;
    }
    for (int i = 0; i < m; ++i)
      out.norm_sq -= prm.p_hat * prm.mu_hat.weights(i) *
                     out.field->eval(Vec(prm.mu_hat.points.row(i).transpose()));
    out.norm_sq = std::max(0.0, out.norm_sq);
    return out;
  };
  double l = prm.scale;
  c.spec.g = [cache, prepare, l](const Vec&, const WeightedSample& mu,
                                 double p) {
    auto pre = cache->get(mu, p, [&] { return prepare(mu, p); });
    return 0.5 * l * pre->norm_sq / p;
  };
  c.spec.dm_g = [cache, prepare, l](const Vec&, const WeightedSample& mu,
                                    double p, const Vec& xa) {
    auto pre = cache->get(mu, p, [&] { return prepare(mu, p); });
    return l * (pre->field->eval(xa) - pre->inner_mu);
  };
  c.spec.dp_g = [cache, prepare, l](const Vec&, const WeightedSample& mu,
                                    double p) {
    auto pre = cache->get(mu, p, [&] { return prepare(mu, p); });
    return l * (-0.5 * pre->norm_sq / (p * p) + pre->inner_mu / p);
  };
  return c;
}

// ---------------------------------------------------------------------------
// f-divergences phi(mu, p) = (1/p) int F(p d(mu o kappa^{-1})/d nu) d nu with
// kappa the time-marginal selector (identity on marginal samples). The
// density requires mu's atoms to sit on nu's support (exact identity).
// ---------------------------------------------------------------------------

enum class DivergenceF { neg_log, xlogx, half_abs, lecam };

namespace detail {

inline double div_F(DivergenceF f, double x) {
  switch (f) {
    case DivergenceF::neg_log:
      if (x <= 0)
        throw absolute_continuity_error("neg_log divergence needs density > 0");
      return -std::log(x) + x - 1.0;
    case DivergenceF::xlogx:
      return x > 0 ? x * std::log(x) - x + 1.0 : 1.0;
    case DivergenceF::half_abs:
      return 0.5 * std::abs(x - 1.0);
    case DivergenceF::lecam: {
      double d = 1.0 - x;
      return d * d / (2.0 * x + 2.0);
    }
  }
  return 0;
}

inline double div_Fprime(DivergenceF f, double x) {
  switch (f) {
    case DivergenceF::neg_log:
      if (x <= 0)
        throw absolute_continuity_error(
            "neg_log divergence derivative needs density > 0");
      return -1.0 / x + 1.0;
    case DivergenceF::xlogx:
      if (x <= 0)
        throw absolute_continuity_error(
            "xlogx divergence derivative needs density > 0");
      return std::log(x);
    case DivergenceF::half_abs:
      return x > 1.0 ? 0.5 : (x < 1.0 ? -0.5 : 0.0);
    case DivergenceF::lecam: {
      double xp = x + 1.0;
      return -(1.0 - x) * (x + 3.0) / (2.0 * xp * xp);
    }
  }
  return 0;
}

struct DivPrepared {
  double value = 0;          // phi(mu, p)
  double avg_fprime = 0;     // int F'(rho) dmu
  std::map<std::vector<double>, double> rho;  // atom -> density
};

}  // namespace detail

struct DivergenceParams {
  DivergenceF F = DivergenceF::xlogx;
  WeightedSample nu;  // reference measure (normalized or not)
};

inline BuiltinCost make_f_divergence(DivergenceParams prm) {
  BuiltinCost c;
  c.kind = "f_divergence";
  auto cache = std::make_shared<MeasureCache<detail::DivPrepared>>();
  auto F = prm.F;
  auto nu = prm.nu;

  auto prepare = [F, nu](const WeightedSample& mu, double p) {
    detail::DivPrepared out;
    std::map<std::vector<double>, double> nu_w;
    for (int i = 0; i < nu.size(); ++i) {
      std::vector<double> key(nu.dim());
      for (int j = 0; j < nu.dim(); ++j) key[j] = nu.points(i, j);
      nu_w[key] += nu.weights(i);
    }
    std::map<std::vector<double>, double> mu_w;
    for (int i = 0; i < mu.size(); ++i) {
      std::vector<double> key(mu.dim());
      for (int j = 0; j < mu.dim(); ++j) key[j] = mu.points(i, j);
      auto it = nu_w.find(key);
      if (it == nu_w.end() || it->second <= 0) {
        if (mu.weights(i) > 0)
          throw absolute_continuity_error(
              "mu carries mass outside the reference support");
        continue;
      }
      mu_w[key] += mu.weights(i);
    }
    double val = 0;
    for (const auto& [key, nw] : nu_w) {
      auto it = mu_w.find(key);
      double mw = it == mu_w.end() ? 0.0 : it->second;
      double rho = p * mw / nw;
      out.rho[key] = rho;
      val += detail::div_F(F, rho) * nw;
    }
    out.value = val / p;
    for (const auto& [key, mw] : mu_w)
      if (mw > 0) out.avg_fprime += mw * detail::div_Fprime(F, out.rho[key]);
    return out;
  };

  auto rho_at = [](const detail::DivPrepared& pre, const Vec& x) {
    std::vector<double> key(x.size());
    for (int j = 0; j < x.size(); ++j) key[j] = x(j);
    auto it = pre.rho.find(key);
    if (it == pre.rho.end())
      throw absolute_continuity_error("point outside the reference support");
    return it->second;
  };

  c.spec.g = [cache, prepare](const Vec&, const WeightedSample& mu, double p) {
    return cache->get(mu, p, [&] { return prepare(mu, p); })->value;
  };
  c.spec.dm_g = [cache, prepare, rho_at, F](const Vec&,
                                            const WeightedSample& mu, double p,
                                            const Vec& xa) {
    auto pre = cache->get(mu, p, [&] { return prepare(mu, p); });
    return detail::div_Fprime(F, rho_at(*pre, xa)) - pre->avg_fprime;
  };
  c.spec.dp_g = [cache, prepare](const Vec&, const WeightedSample& mu,
                                 double p) {
    auto pre = cache->get(mu, p, [&] { return prepare(mu, p); });
    return -pre->value / p + pre->avg_fprime / p;
  };
  return c;
}

// ---------------------------------------------------------------------------
// eval_cost_terms: all running and terminal terms at one point.
// ---------------------------------------------------------------------------

struct CostTerms {
  double f1 = 0;
  Vec f1_a;
  double f1_p = 0;
  double f2 = 0;
  double dm_f2 = 0;
  double dp_f2 = 0;
  double g = 0;
  double dm_g = 0;
  double dp_g = 0;
};

inline CostTerms eval_cost_terms(const CostSpec& c, double t, const Vec& x,
                                 const Vec& a, const WeightedSample& mu,
                                 double p, const Vec& x_add) {
  CostTerms out;
  out.f1 = c.eval_f1(t, x, a, p);
  out.f1_a = c.eval_f1_a(t, x, a, p);
  out.f1_p = c.eval_f1_p(t, x, a, p);
  out.f2 = c.eval_f2(t, x, mu, p);
  out.dm_f2 = c.eval_dm_f2(t, x, mu, p, x_add);
  out.dp_f2 = c.eval_dp_f2(t, x, mu, p);
  out.g = c.eval_g(x, mu, p);
  out.dm_g = c.eval_dm_g(x, mu, p, x_add);
  out.dp_g = c.eval_dp_g(x, mu, p);
  return out;
}

// ---------------------------------------------------------------------------
// p-convexity checks. A PFunctional is phi(x, mu, p) with its derivatives;
// the integral I(mu, p) = p * sum_i w_i phi(x_i, mu, p) is tested for linear
// convexity in the sub-probability p*mu on a fixed shared atom set.
// ---------------------------------------------------------------------------

struct PFunctional {
  std::function<double(const Vec&, const WeightedSample&, double)> phi;
  std::function<double(const Vec&, const WeightedSample&, double, const Vec&)>
      dm;  // (x_copy, mu, p, x_add)
  std::function<double(const Vec&, const WeightedSample&, double)> dp;
};

inline PFunctional terminal_functional(const CostSpec& c) {
  return {[&c](const Vec& x, const WeightedSample& mu, double p) {
            return c.eval_g(x, mu, p);
          },
          [&c](const Vec& xc, const WeightedSample& mu, double p,
               const Vec& xa) { return c.eval_dm_g(xc, mu, p, xa); },
          [&c](const Vec& x, const WeightedSample& mu, double p) {
            return c.eval_dp_g(x, mu, p);
          }};
}

inline PFunctional running_functional(const CostSpec& c, double t) {
  return {[&c, t](const Vec& x, const WeightedSample& mu, double p) {
            return c.eval_f2(t, x, mu, p);
          },
          [&c, t](const Vec& xc, const WeightedSample& mu, double p,
                  const Vec& xa) { return c.eval_dm_f2(t, xc, mu, p, xa); },
          [&c, t](const Vec& x, const WeightedSample& mu, double p) {
            return c.eval_dp_f2(t, x, mu, p);
          }};
}

struct ConvexityReport {
  bool pass = false;
  double max_violation = 0;
  double scale = 1;  // 1 + magnitude of the involved terms
  int trials = 0;
  std::vector<std::pair<int, double>> rows;  // (trial, violation)
};

// The fixed shared atom set used by both convexity checkers (convex
// combinations of measures are exact on a common support).
inline Mat pcnv_atom_set(int n, int dim, std::uint64_t seed) {
  RngStream r(seed, "costs/pcnv_atoms");
  Mat atoms(n, dim);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < dim; ++j)
      atoms(i, j) = 0.4 + 1.8 * r.uniform(i, j);  // positive side, in (0,3)
  return atoms;
}

namespace detail {

struct PcnvAtoms {
  Mat atoms;
  PcnvAtoms(int n, int d, std::uint64_t seed)
      : atoms(pcnv_atom_set(n, d, seed)) {}
};

inline WeightedSample random_on(const Mat& atoms, const RngStream& r,
                                std::uint64_t id) {
  Vec w(atoms.rows());
  for (int i = 0; i < w.size(); ++i) w(i) = 0.05 + r.uniform(id, i);
  return WeightedSample::make(atoms, w, true);
}

inline double integral(const PFunctional& f, const WeightedSample& mu,
                       double p) {
  double s = 0;
  for (int i = 0; i < mu.size(); ++i)
    s += mu.weights(i) * f.phi(Vec(mu.points.row(i).transpose()), mu, p);
  return p * s;
}

}  // namespace detail

inline ConvexityReport check_p_convexity(const PFunctional& f, int trials,
                                         std::uint64_t seed = 1, int dim = 1,
                                         int n_atoms = 32) {
  detail::PcnvAtoms shared(n_atoms, dim, seed);
  RngStream r(seed, "costs/pcnv_trials");
  ConvexityReport rep;
  rep.trials = trials;
  for (int t = 0; t < trials; ++t) {
    auto mu = detail::random_on(shared.atoms, r, 4 * t);
    auto nu = detail::random_on(shared.atoms, r, 4 * t + 1);
    double p = 0.2 + 0.8 * r.uniform(4 * t + 2, 0);
    double q = 0.2 + 0.8 * r.uniform(4 * t + 2, 1);
    double lam = 0.05 + 0.9 * r.uniform(4 * t + 2, 2);
    double plam = lam * q + (1.0 - lam) * p;
    Vec wlam =
        (lam * q * nu.weights + (1.0 - lam) * p * mu.weights) / plam;
    auto mulam = WeightedSample::make(shared.atoms, wlam, true);

    double I_mu = detail::integral(f, mu, p);
    double I_nu = detail::integral(f, nu, q);
    double I_lam = detail::integral(f, mulam, plam);
    double viol = I_lam - lam * I_nu - (1.0 - lam) * I_mu;
    rep.scale = std::max(rep.scale,
                         1.0 + std::abs(I_mu) + std::abs(I_nu) + std::abs(I_lam));
    rep.max_violation = std::max(rep.max_violation, viol);
    rep.rows.emplace_back(t, viol);
  }
  rep.pass = rep.max_violation <= 1e-10 * rep.scale;
  return rep;
}

// Differential characterization: p-convex iff for all (mu,p), (mu',p'),
//   I(mu',p') - I(mu,p) >= int { phi + int dm dmu + p int dp dmu } d(p'mu'-pmu),
// plus a finite-lambda secant cross-check of the lambda -> 0 limit.
inline ConvexityReport check_pcnv_differential(const PFunctional& f, int trials,
                                               std::uint64_t seed = 1,
                                               int dim = 1, int n_atoms = 32) {
  detail::PcnvAtoms shared(n_atoms, dim, seed);
  RngStream r(seed, "costs/pcnv_diff_trials");
  ConvexityReport rep;
  rep.trials = trials;
  bool secant_ok = true;
  for (int t = 0; t < trials; ++t) {
    auto mu = detail::random_on(shared.atoms, r, 4 * t);
    auto nu = detail::random_on(shared.atoms, r, 4 * t + 1);
    double p = 0.2 + 0.8 * r.uniform(4 * t + 2, 0);
    double q = 0.2 + 0.8 * r.uniform(4 * t + 2, 1);

    double lhs = detail::integral(f, nu, q) - detail::integral(f, mu, p);

    // bracket B(x_i) = phi(x_i) + avg_dm(x_i) + p avg_dp, integrated against
    // (q nu - p mu)
    int n = static_cast<int>(shared.atoms.rows());
    double avg_dp = 0;
    for (int j = 0; j < n; ++j)
      avg_dp += mu.weights(j) *
                f.dp(Vec(shared.atoms.row(j).transpose()), mu, p);
    double rhs = 0;
    for (int i = 0; i < n; ++i) {
      Vec xi = shared.atoms.row(i).transpose();
      double avg_dm = 0;
      for (int j = 0; j < n; ++j)
        avg_dm += mu.weights(j) *
                  f.dm(Vec(shared.atoms.row(j).transpose()), mu, p, xi);
      double bracket = f.phi(xi, mu, p) + avg_dm + p * avg_dp;
      rhs += bracket * (q * nu.weights(i) - p * mu.weights(i));
    }
    double viol = rhs - lhs;
    rep.scale =
        std::max(rep.scale, 1.0 + std::abs(lhs) + std::abs(rhs));
    rep.max_violation = std::max(rep.max_violation, viol);
    rep.rows.emplace_back(t, viol);

    // symmetric secant at lambda = +-1e-3 approximates the derivative
    // expression (one-sided picks up the curvature of strongly convex F)
    double lam = 1e-3;
    auto I_at = [&](double l) {
      double pl = l * q + (1.0 - l) * p;
      Vec wl = (l * q * nu.weights + (1.0 - l) * p * mu.weights) / pl;
      return detail::integral(f, WeightedSample::make(shared.atoms, wl, true),
                              pl);
    };
    double secant = (I_at(lam) - I_at(-lam)) / (2.0 * lam);
    if (std::abs(secant - rhs) >
        1e-2 * std::max({1.0, std::abs(rhs), std::abs(secant)}))
      secant_ok = false;
  }
  rep.pass = rep.max_violation <= 1e-8 && secant_ok;
  return rep;
}

// ---------------------------------------------------------------------------
// Finite-difference validation of declared derivatives.
// ---------------------------------------------------------------------------

struct DerivativeReport {
  bool pass = false;
  double max_rel_err = 0;
  double max_abs_dm = 0;  // growth diagnostics (assumption M(p) bounds)
  double max_abs_dp = 0;
  std::string worst_item;
};

namespace detail {

// 16-point Gauss-Legendre nodes/weights on [0, 1].
inline const std::array<std::pair<double, double>, 16>& gl16() {
  static const std::array<std::pair<double, double>, 16> table = [] {
    const double x[8] = {0.0950125098376374, 0.2816035507792589,
                         0.4580167776572274, 0.6178762444026438,
                         0.7554044083550030, 0.8656312023878318,
                         0.9445750230732326, 0.9894009349916499};
    const double w[8] = {0.1894506104550685, 0.1826034150449236,
                         0.1691565193950025, 0.1495959888165767,
                         0.1246289712555339, 0.0951585116824928,
                         0.0622535239386479, 0.0271524594117541};
    std::array<std::pair<double, double>, 16> t{};
    for (int i = 0; i < 8; ++i) {
      t[2 * i] = {0.5 * (1.0 - x[i]), 0.5 * w[i]};
      t[2 * i + 1] = {0.5 * (1.0 + x[i]), 0.5 * w[i]};
    }
    return t;
  }();
  return table;
}

inline void track(DerivativeReport& rep, const std::string& item, double got,
                  double expect) {
  double rel = std::abs(got - expect) / std::max(1.0, std::abs(expect));
  if (rel > rep.max_rel_err) {
    rep.max_rel_err = rel;
    rep.worst_item = item;
  }
}

}  // namespace detail

inline DerivativeReport validate_derivatives(const BuiltinCost& cost,
                                             const WeightedSample& probe_mu,
                                             const WeightedSample& probe_nu,
                                             std::uint64_t seed = 3) {
  const CostSpec& c = cost.spec;
  DerivativeReport rep;
  RngStream r(seed, "costs/validate_derivatives");
  const int dim = probe_mu.dim();
  const double t0 = 0.37;
  const double p0 = 0.7;

  // (i) f1_a against central differences in a
  if (c.f1 && c.f1_a) {
    for (int trial = 0; trial < 16; ++trial) {
      Vec x(dim), a(dim);
      for (int j = 0; j < dim; ++j) {
        x(j) = r.normal(trial, j);
        a(j) = r.normal(trial, dim + j);
      }
      Vec grad = c.eval_f1_a(t0, x, a, p0);
      for (int j = 0; j < dim; ++j) {
        double h = 1e-5 * (1.0 + std::abs(a(j)));
        Vec ap = a, am = a;
        ap(j) += h;
        am(j) -= h;
        double fd =
            (c.eval_f1(t0, x, ap, p0) - c.eval_f1(t0, x, am, p0)) / (2 * h);
        detail::track(rep, "f1_a", grad(j), fd);
      }
    }
  }

  // (ii) dm terms against the linear-interpolation identity with GL16
  auto check_dm = [&](const std::string& item,
                      const std::function<double(const WeightedSample&, double)>&
                          phi,
                      const std::function<double(const WeightedSample&, double,
                                                 const Vec&)>& dm) {
    double lhs = phi(probe_nu, p0) - phi(probe_mu, p0);
    double rhs = 0;
    for (auto [lam, wq] : detail::gl16()) {
      Vec wl = (1.0 - lam) * probe_mu.weights + lam * probe_nu.weights;
      auto mul = WeightedSample::make(probe_mu.points, wl, true);
      double inner = 0;
      for (int j = 0; j < probe_mu.size(); ++j) {
        Vec xj = probe_mu.points.row(j).transpose();
        double d = dm(mul, p0, xj);
        rep.max_abs_dm = std::max(rep.max_abs_dm, std::abs(d));
        inner += (probe_nu.weights(j) - probe_mu.weights(j)) * d;
      }
      rhs += wq * inner;
    }
    detail::track(rep, item, rhs, lhs);
  };

  Vec xc = probe_mu.points.row(0).transpose();
  if (c.g && c.dm_g)
    check_dm("dm_g",
             [&](const WeightedSample& m, double p) { return c.eval_g(xc, m, p); },
             [&](const WeightedSample& m, double p, const Vec& xa) {
               return c.eval_dm_g(xc, m, p, xa);
             });
  if (c.f2 && c.dm_f2)
    check_dm("dm_f2",
             [&](const WeightedSample& m, double p) {
               return c.eval_f2(t0, xc, m, p);
             },
             [&](const WeightedSample& m, double p, const Vec& xa) {
               return c.eval_dm_f2(t0, xc, m, p, xa);
             });

  // (iii) p-derivatives against central differences
  auto check_dp = [&](const std::string& item,
                      const std::function<double(double)>& phi,
                      double claimed) {
    rep.max_abs_dp = std::max(rep.max_abs_dp, std::abs(claimed));
    double h = 1e-5;
    detail::track(rep, item, claimed, (phi(p0 + h) - phi(p0 - h)) / (2 * h));
  };
  if (c.g && c.dp_g)
    check_dp("dp_g",
             [&](double p) { return c.eval_g(xc, probe_mu, p); },
             c.eval_dp_g(xc, probe_mu, p0));
  if (c.f2 && c.dp_f2)
    check_dp("dp_f2",
             [&](double p) { return c.eval_f2(t0, xc, probe_mu, p); },
             c.eval_dp_f2(t0, xc, probe_mu, p0));
  if (c.f1 && c.f1_p) {
    Vec a = Vec::Constant(dim, 0.6);
    check_dp("f1_p",
             [&](double p) { return c.eval_f1(t0, xc, a, p); },
             c.eval_f1_p(t0, xc, a, p0));
  }

  rep.pass = rep.max_rel_err < 1e-6;
  return rep;
}

}  // namespace mkv
