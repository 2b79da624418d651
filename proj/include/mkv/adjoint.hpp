#pragma once

#include "mkv/basis.hpp"
#include "mkv/common.hpp"
#include "mkv/costs.hpp"
#include "mkv/simulate.hpp"

#include <optional>

namespace mkv {

// ---------------------------------------------------------------------------
// Hamiltonian h = f1 + f2 + beta^T z and its pointwise minimizer over A.
// ---------------------------------------------------------------------------

inline double hamiltonian(const DynamicsSpec& dyn, const CostSpec& cost,
                          double t, const Vec& x, const Vec& a,
                          const WeightedSample& mu, double p, const Vec& z) {
  return cost.eval_f1(t, x, a, p) + cost.eval_f2(t, x, mu, p) +
         beta_eval(dyn, t, x, a, mu, p).dot(z);
}

// Gradient of h^1 in a. Affine dynamics give the exact (sigma^{-1} b1)^T z
// pairing; otherwise the drift term is differentiated by central differences.
inline Vec hamiltonian_grad_a(const DynamicsSpec& dyn, const CostSpec& cost,
                              double t, const Vec& x, const Vec& a,
                              const WeightedSample& mu, double p,
                              const Vec& z) {
  Vec grad = cost.eval_f1_a(t, x, a, p);
  if (dyn.mode == BetaMode::affine) {
    Mat sig = dyn.sigma(t, x);
    Mat beta1 = sig.partialPivLu().solve(dyn.b1(t, x));
    grad += beta1.transpose() * z;
  } else {
    for (int c = 0; c < a.size(); ++c) {
      double h = 1e-6 * (1.0 + std::abs(a(c)));
      Vec ap = a, am = a;
      ap(c) += h;
      am(c) -= h;
      grad(c) += (beta_eval(dyn, t, x, ap, mu, p).dot(z) -
                  beta_eval(dyn, t, x, am, mu, p).dot(z)) /
                 (2 * h);
    }
  }
  return grad;
}

// argmin_{a in A} h^1(t, x, a, z). Isotropic quadratic f1 with affine beta has
// the closed form proj_A(-(p) q / m) with q = (sigma^{-1} b1)^T z; the general
// case runs projected gradient descent with backtracking to stationarity.
inline Vec minimize_hamiltonian(const DynamicsSpec& dyn, const CostSpec& cost,
                                double t, const Vec& x,
                                const WeightedSample& mu, double p,
                                const Vec& z, const ControlSpace& A) {
  if (dyn.mode == BetaMode::affine && cost.f1_form != F1Form::generic) {
    Mat sig = dyn.sigma(t, x);
    Vec q = (sig.partialPivLu().solve(dyn.b1(t, x))).transpose() * z;
    double m_eff = cost.m;
    if (cost.f1_form == F1Form::quadratic_over_p) m_eff = cost.m / p;
    if (!(m_eff > 0))
      throw nonconvergence_error("quadratic Hamiltonian needs m > 0");
    return A.project(-q / m_eff);
  }

  auto value = [&](const Vec& a) {
    return cost.eval_f1(t, x, a, p) + beta_eval(dyn, t, x, a, mu, p).dot(z);
  };
  Vec a = A.project(Vec::Zero(A.k));
  double fa = value(a);
  double step = 1.0;
  for (int it = 0; it < 10000; ++it) {
    Vec grad = hamiltonian_grad_a(dyn, cost, t, x, a, mu, p, z);
    Vec probe = A.project(a - grad);
    if ((a - probe).norm() < 1e-8) return a;
    for (int bt = 0; bt < 60; ++bt) {
      Vec cand = A.project(a - step * grad);
      double fc = value(cand);
      if (fc <= fa - 0.25 / std::max(step, 1e-12) * (cand - a).squaredNorm()) {
        a = cand;
        fa = fc;
        step = std::min(step * 1.5, 1e3);
        break;
      }
      step *= 0.5;
      if (bt == 59)
        throw nonconvergence_error("hamiltonian line search stalled");
    }
  }
  throw nonconvergence_error(
      "projected gradient did not reach stationarity in 1e4 steps");
}

// ---------------------------------------------------------------------------
// Least-squares Monte Carlo solver for the adjoint backward equation along a
// fixed (ensemble, control, flow). Conventions: Y frozen at the exit value
// (zero for killed paths, since the terminal pays only on survival),
// Z 1{t >= tau} = 0; terminal Y on survivors is exact.
// ---------------------------------------------------------------------------

struct AdjointOptions {
  int basis_degree = 2;
  double ridge = 1e-8;
  int pairwise_M = 256;       // subsample size for copy-dependent dm terms
  bool exact_pairwise = false;
  std::uint64_t seed = 1;     // drives the pairwise subsampling only
};

struct AdjointSolution {
  Mat Y;                   // N x (Nt+1)
  std::vector<double> Z;   // N * Nt * d, zero after exit
  std::vector<double> r2;    // per backward step, index k in [0, Nt)
  std::vector<double> cond;  // Gram condition numbers
  int basis_degree = 2;

  double z(std::int64_t i, int k, int j, int Nt, int d) const {
    return Z[(i * Nt + k) * d + j];
  }
};

namespace detail {

// Copy-average of a dm evaluator over the alive population: exact weighted
// sum when the term does not depend on the copy state, M-subsampled pairs
// otherwise.
struct CopyAverager {
  std::vector<std::int64_t> subsample;  // by-weight draws (row indices)

  CopyAverager(std::size_t n_alive, const Vec& w, int M, bool exact,
               const RngStream& r, std::uint64_t step) {
    if (exact || static_cast<int>(n_alive) <= M) return;
    subsample.reserve(M);
    // systematic resampling by weight: deterministic given (seed, step)
    double u0 = r.uniform(step) / M;
    double cum = 0;
    std::size_t j = 0;
    for (int m = 0; m < M; ++m) {
      double target = u0 + static_cast<double>(m) / M;
      while (j + 1 < n_alive && cum + w(static_cast<int>(j)) < target)
        cum += w(static_cast<int>(j)), ++j;
      subsample.push_back(static_cast<std::int64_t>(j));
    }
  }

  bool subsampled() const { return !subsample.empty(); }
};

}  // namespace detail

inline AdjointSolution solve_adjoint(const ParticleEnsemble& ens,
                                     const ControlField& alpha,
                                     const MeasureFlow& flow,
                                     const DynamicsSpec& dyn,
                                     const CostSpec& cost,
                                     const AdjointOptions& opts = {}) {
  const PathData& pd = ens.p();
  const int Nt = pd.Nt, d = pd.d;
  const std::int64_t N = pd.N;
  const double dt = pd.dt;
  if (!ens.has_beta())
    throw grid_mismatch_error("solve_adjoint needs a reweighted ensemble");

  PolyBasis basis{d, opts.basis_degree};
  const int B = basis.size();
  RngStream pair_rng(opts.seed, "adjoint/pairwise_subsample");

  AdjointSolution sol;
  sol.Y = Mat::Zero(N, Nt + 1);
  sol.Z.assign(static_cast<std::size_t>(N) * Nt * d, 0.0);
  sol.r2.assign(Nt, 0.0);
  sol.cond.assign(Nt, 0.0);
  sol.basis_degree = opts.basis_degree;

  const WeightedSample& muT = flow.laws[Nt];
  const double pT = flow.survival(Nt);

  // Terminal: G = g + E-copy[dm_g | alive] + E[1{T<tau} g_p], exact on
  // survivors.
  double gp_term = 0;
  if (cost.dp_g) {
    gp_term = parallel_sum(N, [&](std::int64_t j) {
                return pd.survived(j)
                           ? ens.weight(j, Nt) *
                                 cost.eval_dp_g(pd.state(j, Nt), muT, pT)
                           : 0.0;
              }) /
              static_cast<double>(N);
  }
  parallel_for(N, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      if (!pd.survived(i)) continue;
      Vec xi = pd.state(i, Nt);
      double G = cost.eval_g(xi, muT, pT) + gp_term;
      if (cost.dm_g) {
        if (!cost.dm_g_state_dependent) {
          G += cost.eval_dm_g(xi, muT, pT, xi);
        } else {
          // copy-average over the alive population
          double acc = 0;
          for (int j = 0; j < muT.size(); ++j)
            acc += muT.weights(j) *
                   cost.eval_dm_g(Vec(muT.points.row(j).transpose()), muT, pT,
                                  xi);
          G += acc;
        }
      }
      sol.Y(i, Nt) = G;
    }
  });

  std::vector<std::int64_t> alive_idx;
  alive_idx.reserve(N);
  Mat design;
  Vec wreg, yplus, targets;

  for (int k = Nt - 1; k >= 0; --k) {
    const double t = pd.times(k);
    const WeightedSample& mu = flow.laws[k];
    const double p = flow.survival(k);

    alive_idx.clear();
    for (std::int64_t i = 0; i < N; ++i)
      if (pd.is_alive(i, k)) alive_idx.push_back(i);
    const auto n = static_cast<std::int64_t>(alive_idx.size());
    if (n == 0) throw extinction_error("adjoint step with no alive particles");

    design.resize(n, B);
    wreg.resize(n);
    yplus.resize(n);
    parallel_for(n, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t r = b; r < e; ++r) {
        std::int64_t i = alive_idx[r];
        basis.eval(pd.state(i, k), design.row(r));
        wreg(r) = ens.weight(i, k + 1);
        yplus(r) = pd.is_alive(i, k + 1) ? sol.Y(i, k + 1) : 0.0;
      }
    });

    WeightedRidge reg(design, wreg, opts.ridge);
    sol.cond[k] = reg.condition_number();

    // Z: integration-by-parts estimator with the regression-predicted
    // continuation subtracted (same conditional expectation, lower variance).
    Vec cont = reg.fitted(reg.solve(yplus));
    for (int j = 0; j < d; ++j) {
      Vec zt(n);
      for (std::int64_t r = 0; r < n; ++r) {
        std::int64_t i = alive_idx[r];
        zt(r) = (yplus(r) - cont(r)) * ens.dw_alpha(i, k, j) / dt;
      }
      Vec zfit = reg.fitted(reg.solve(zt));
      for (std::int64_t r = 0; r < n; ++r)
        sol.Z[(alive_idx[r] * Nt + k) * d + j] = zfit(r);
    }

    // Mean-field driver pieces shared across particles at this step
    Vec zbar = Vec::Zero(d);  // E-copy[Z | alive], for copy-free dm_beta
    if (dyn.dm_beta) {
      double wsum = 0;
      for (std::int64_t r = 0; r < n; ++r) {
        std::int64_t i = alive_idx[r];
        double w = ens.weight(i, k);
        wsum += w;
        for (int j = 0; j < d; ++j)
          zbar(j) += w * sol.Z[(i * Nt + k) * d + j];
      }
      zbar /= std::max(wsum, 1e-300);
    }
    double p_scalar = 0;  // E[1{alive} (f1_p + f2_p + beta_p . Z)]
    if (cost.f1_p || cost.dp_f2 || dyn.beta_p) {
      p_scalar = parallel_sum(n, [&](std::int64_t r) {
                   std::int64_t i = alive_idx[r];
                   Vec xi = pd.state(i, k);
                   Vec ai = alpha.action(pd, i, k);
                   double v = cost.eval_f1_p(t, xi, ai, p) +
                              cost.eval_dp_f2(t, xi, mu, p);
                   if (dyn.beta_p) {
                     Vec bp = dyn.beta_p(t, xi, ai, mu, p);
                     for (int j = 0; j < d; ++j)
                       v += bp(j) * sol.Z[(i * Nt + k) * d + j];
                   }
                   return ens.weight(i, k) * v;
                 }) /
                 static_cast<double>(N);
    }

    // normalized alive weights + optional subsample for pairwise terms
    Vec wnorm(n);
    for (std::int64_t r = 0; r < n; ++r)
      wnorm(r) = ens.weight(alive_idx[r], k);
    wnorm /= wnorm.sum();
    detail::CopyAverager avg(alive_idx.size(), wnorm, opts.pairwise_M,
                             opts.exact_pairwise, pair_rng,
                             static_cast<std::uint64_t>(k));

    targets.resize(n);
    parallel_for(n, [&](std::int64_t b, std::int64_t e) {
      for (std::int64_t r = b; r < e; ++r) {
        std::int64_t i = alive_idx[r];
        Vec xi = pd.state(i, k);
        Vec ai = alpha.action(pd, i, k);
        double drv = cost.eval_f1(t, xi, ai, p) + cost.eval_f2(t, xi, mu, p) +
                     p_scalar;
        if (cost.dm_f2) {
          if (!cost.dm_f2_state_dependent) {
            drv += cost.eval_dm_f2(t, xi, mu, p, xi);
          } else if (avg.subsampled()) {
            double acc = 0;
            for (std::int64_t rj : avg.subsample)
              acc += cost.eval_dm_f2(
                  t, pd.state(alive_idx[rj], k), mu, p, xi);
            drv += acc / static_cast<double>(avg.subsample.size());
          } else {
            double acc = 0;
            for (std::int64_t rj = 0; rj < n; ++rj)
              acc += wnorm(rj) *
                     cost.eval_dm_f2(t, pd.state(alive_idx[rj], k), mu, p, xi);
            drv += acc;
          }
        }
        if (dyn.dm_beta) {
          if (!dyn.dm_beta_state_dependent) {
            Vec dmb = dyn.dm_beta(t, xi, ai, mu, p, xi);
            drv += dmb.dot(zbar);
          } else if (avg.subsampled()) {
            double acc = 0;
            for (std::int64_t rj : avg.subsample) {
              std::int64_t jj = alive_idx[rj];
              Vec dmb = dyn.dm_beta(t, pd.state(jj, k),
                                    alpha.action(pd, jj, k), mu, p, xi);
              for (int j = 0; j < d; ++j)
                acc += dmb(j) * sol.Z[(jj * Nt + k) * d + j];
            }
            drv += acc / static_cast<double>(avg.subsample.size());
          } else {
            double acc = 0;
            for (std::int64_t rj = 0; rj < n; ++rj) {
              std::int64_t jj = alive_idx[rj];
              Vec dmb = dyn.dm_beta(t, pd.state(jj, k),
                                    alpha.action(pd, jj, k), mu, p, xi);
              for (int j = 0; j < d; ++j)
                acc += wnorm(rj) * dmb(j) * sol.Z[(jj * Nt + k) * d + j];
            }
            drv += acc;
          }
        }
        targets(r) = yplus(r) + drv * dt;
      }
    });

    Vec coef = reg.solve(targets);
    Vec yfit = reg.fitted(coef);
    sol.r2[k] = reg.r_squared(targets, yfit);
    for (std::int64_t r = 0; r < n; ++r) sol.Y(alive_idx[r], k) = yfit(r);
  }

  return sol;
}

}  // namespace mkv
