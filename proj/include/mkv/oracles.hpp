#pragma once

#include "mkv/common.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

namespace mkv {
namespace oracle {

// ---------------------------------------------------------------------------
// Closed-form scalar LQ: minimize E[ int |a|^2/2 dt + (q/2) X_T^2 ] with
// dX = a dt + dW. Riccati: Pdot = P^2, P_T = q  =>  P_t = q / (1 + q (T-t));
// value (1/2) P_t x^2 + c_t with cdot = -P/2, c_T = 0; feedback a = -P_t x.
// ---------------------------------------------------------------------------

struct RiccatiLq {
  double q = 1, T = 1;

  double P(double t) const { return q / (1.0 + q * (T - t)); }
  double c(double t) const { return 0.5 * std::log(1.0 + q * (T - t)); }
  double value(double t, double x) const { return 0.5 * P(t) * x * x + c(t); }
  double feedback(double t, double x) const { return -P(t) * x; }

  // |dV/dt + (1/2) V_xx - (1/2) V_x^2| with the time derivative taken by
  // central difference.
  double hjb_residual(double t, double x, double h = 1e-5) const {
    double vt = (value(t + h, x) - value(t - h, x)) / (2 * h);
    double vx = P(t) * x;
    double vxx = P(t);
    return std::abs(vt + 0.5 * vxx - 0.5 * vx * vx);
  }
};

inline RiccatiLq riccati_lq(double q, double T) { return {q, T}; }

// ---------------------------------------------------------------------------
// Survival of Brownian motion (volatility sigma) on (0, infinity) started at
// x0: P[tau > t] = 2 Phi(x0 / (sigma sqrt(t))) - 1 = erf(x0 / (sigma sqrt(2t))).
// ---------------------------------------------------------------------------

inline double halfline_survival(double x0, double sigma, double t) {
  if (x0 <= 0) return 0.0;
  if (t <= 0) return 1.0;
  return std::erf(x0 / (sigma * std::sqrt(2.0 * t)));
}

// Survival on (0, inf) for Brownian motion with constant drift c:
// P[tau > t] = Phi((x0 + c t)/sqrt(t)) - exp(-2 c x0) Phi((-x0 + c t)/sqrt(t)).
inline double halfline_survival_drift(double x0, double c, double t) {
  auto Phi = [](double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); };
  double st = std::sqrt(t);
  return Phi((x0 + c * t) / st) -
         std::exp(-2.0 * c * x0) * Phi((-x0 + c * t) / st);
}

// ---------------------------------------------------------------------------
// Quadrature oracle for the FW Dirac identity:
// (1/pi) int_R (1 - cos(u xi)) / (1 + xi^2) dxi  =  1 - exp(-|u|).
// Adaptive Simpson on [0, A] plus a four-term integration-by-parts tail for
// the oscillatory part; absolute accuracy ~1e-10 for u in [0.05, 50].
// ---------------------------------------------------------------------------

namespace detail {

inline double adaptive_simpson(const std::function<double(double)>& f,
                               double a, double b, double fa, double fm,
                               double fb, double whole, double tol,
                               int depth) {
  double m = 0.5 * (a + b);
  double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  double flm = f(lm), frm = f(rm);
  double left = (m - a) / 6.0 * (fa + 4 * flm + fm);
  double right = (b - m) / 6.0 * (fm + 4 * frm + fb);
  if (depth <= 0 || std::abs(left + right - whole) < 15.0 * tol)
    return left + right + (left + right - whole) / 15.0;
  return adaptive_simpson(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
}

// Pre-panelling keeps oscillatory integrands from passing the coarse-level
// acceptance test by cancellation; adaptive Simpson refines inside each panel.
inline double adaptive(const std::function<double(double)>& f, double a,
                       double b, double tol, int panels = 16) {
  if (panels < 1) panels = 1;
  double h = (b - a) / panels;
  double total = 0;
  for (int p = 0; p < panels; ++p) {
    double pa = a + p * h, pb = pa + h, pm = 0.5 * (pa + pb);
    double fa = f(pa), fm = f(pm), fb = f(pb);
    double whole = h / 6.0 * (fa + 4 * fm + fb);
    total += adaptive_simpson(f, pa, pb, fa, fm, fb, whole, tol / panels, 40);
  }
  return total;
}

}  // namespace detail

inline double fw_dirac_identity(double u) {
  u = std::abs(u);
  if (u == 0.0) return 0.0;
  const double pi = std::numbers::pi;
  // Split smooth head and oscillatory tail of
  // I = (2/pi) int_0^inf (1 - cos(u xi))/(1+xi^2) dxi.
  const double A = std::max(400.0, 40.0 * pi / u);
  auto head = [&](double xi) {
    return (1.0 - std::cos(u * xi)) / (1.0 + xi * xi);
  };
  int panels = std::max(32, static_cast<int>(u * A / pi));
  double I_head = detail::adaptive(head, 0.0, A, 1e-11, panels);
  // Tail: int_A^inf 1/(1+xi^2) - int_A^inf cos(u xi)/(1+xi^2); the second by
  // repeated integration by parts (derivatives of g = 1/(1+xi^2)).
  double tail_one = pi / 2 - std::atan(A);
  double x = A, x2 = A * A;
  double g0 = 1.0 / (1.0 + x2);
  double g1 = -2.0 * x * g0 * g0;                       // g'
  double g2 = (6.0 * x2 - 2.0) * g0 * g0 * g0;          // g''
  double g3 = (24.0 * x - 24.0 * x * x2) * g0 * g0 * g0 * g0;  // g'''
  double su = std::sin(u * A), cu = std::cos(u * A);
  double tail_cos = -su * g0 / u - cu * g1 / (u * u) + su * g2 / (u * u * u) +
                    cu * g3 / (u * u * u * u);
  return (2.0 / pi) * (I_head + tail_one - tail_cos);
}

// ---------------------------------------------------------------------------
// Sinkhorn with a cemetery state: discrete oracle for the killed Schrodinger
// value. A killed chain induces a reference joint law R over
// (initial atom, terminal atom in states U {dagger}); the constrained problem
// minimizes KL(pi || R) over joints with initial marginal nu0 and terminal
// marginal (p_hat mu_hat, 1 - p_hat).
// ---------------------------------------------------------------------------

struct KilledChain {
  Vec states;   // live state values (1D)
  Mat kernel;   // row-stochastic up to killing: kernel(i,j) = P[x_i -> x_j];
                // row deficit = probability of absorption in one step
  int steps = 1;
};

// Binomial-tree chain: lattice x = offset + j h with h = sigma sqrt(dt);
// +-h with probability 1/2, absorbed when the move lands outside (lo, inf)
// or (lo, hi) when hi is finite.
inline KilledChain binomial_tree_chain(double offset, double h, int j_min,
                                       int j_max, double lo, double hi,
                                       int depth) {
  int n = j_max - j_min + 1;
  KilledChain c;
  c.states.resize(n);
  for (int j = 0; j < n; ++j) c.states(j) = offset + (j_min + j) * h;
  c.kernel = Mat::Zero(n, n);
  auto inside = [&](double x) { return x > lo && x < hi; };
  for (int j = 0; j < n; ++j) {
    double x = c.states(j);
    if (!inside(x)) continue;  // unreachable padding
    double up = x + h, dn = x - h;
    if (inside(up) && j + 1 < n) c.kernel(j, j + 1) += 0.5;
    if (inside(dn) && j - 1 >= 0) c.kernel(j, j - 1) += 0.5;
  }
  c.steps = depth;
  return c;
}

struct SinkhornResult {
  double value = 0;   // KL of the optimal coupling vs the reference joint
  Mat coupling;       // n0 x (n_live + 1); last column is the cemetery
  Mat reference;      // same layout
  int iterations = 0;
  double marginal_error = 0;
};

inline SinkhornResult sinkhorn_cemetery(const KilledChain& chain,
                                        const Vec& nu0_weights,
                                        const std::vector<int>& nu0_states,
                                        double p_hat, const Vec& mu_hat,
                                        double tol = 1e-10,
                                        int max_iters = 20000) {
  const int nl = static_cast<int>(chain.states.size());
  const int n0 = static_cast<int>(nu0_weights.size());

  // Reference joint: propagate each initial atom through the chain.
  Mat R(n0, nl + 1);
  for (int a = 0; a < n0; ++a) {
    Vec dist = Vec::Zero(nl);
    dist(nu0_states[a]) = 1.0;
    double dead = 0.0;
    for (int s = 0; s < chain.steps; ++s) {
      Vec next = chain.kernel.transpose() * dist;
      dead += dist.sum() - next.sum();
      dist = next;
    }
    R.row(a).head(nl) = nu0_weights(a) * dist.transpose();
    R(a, nl) = nu0_weights(a) * dead;
  }

  Vec col_target(nl + 1);
  col_target.head(nl) = p_hat * mu_hat;
  col_target(nl) = 1.0 - p_hat;

  for (int j = 0; j <= nl; ++j)
    if (col_target(j) > 0 && R.col(j).sum() <= 0)
      throw infeasible_target_error(
          "target atom has zero reference mass (column " + std::to_string(j) +
          ")");

  Vec u = Vec::Ones(n0), v = Vec::Ones(nl + 1);
  double err = 0;
  int it = 0;
  for (; it < max_iters; ++it) {
    Vec rv = R * v;
    for (int a = 0; a < n0; ++a) u(a) = rv(a) > 0 ? nu0_weights(a) / rv(a) : 0;
    Vec ru = R.transpose() * u;
    for (int j = 0; j <= nl; ++j)
      v(j) = ru(j) > 0 ? col_target(j) / ru(j) : 0;
    // marginal error of the current scaled plan
    Mat plan = u.asDiagonal() * R * v.asDiagonal();
    err = (plan.rowwise().sum() - nu0_weights).cwiseAbs().maxCoeff() +
          (plan.colwise().sum().transpose() - col_target).cwiseAbs().maxCoeff();
    if (err < tol) break;
  }
  SinkhornResult res;
  res.coupling = u.asDiagonal() * R * v.asDiagonal();
  res.reference = R;
  res.iterations = it + 1;
  res.marginal_error = err;
  double kl = 0;
  for (int a = 0; a < n0; ++a)
    for (int j = 0; j <= nl; ++j) {
      double p = res.coupling(a, j);
      if (p > 0) kl += p * std::log(p / R(a, j));
    }
  res.value = kl;
  return res;
}

}  // namespace oracle
}  // namespace mkv
