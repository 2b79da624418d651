#pragma once

#include "mkv/adjoint.hpp"
#include "mkv/common.hpp"
#include "mkv/fixed_point.hpp"
#include "mkv/simulate.hpp"

#include <optional>

namespace mkv {

// ---------------------------------------------------------------------------
// Outer iteration: flow fixed point -> adjoint BSDE -> pointwise Hamiltonian
// minimization -> damped control update, with backtracking on the damping
// when the cost estimate rises beyond noise.
// ---------------------------------------------------------------------------

struct SolveOptions {
  int outer_iters = 100;
  double gamma = 0.5;
  double tol_J = 1e-3;
  double tol_alpha = 1e-5;
  AdjointOptions adjoint;
  PicardOptions picard;
  std::optional<ControlField> init_control;
  bool fit_feedback = true;
};

struct TraceRow {
  int iter = 0;
  double J = 0, se = 0;
  double dalpha_sq = 0;
  double p_T = 0;
  double gamma = 0;
  bool accepted = true;
};

struct SolveResult {
  ControlField control;                  // open-loop table
  std::optional<ControlField> feedback;  // regression distillation
  MeasureFlow flow;
  AdjointSolution adjoint;
  ParticleEnsemble reweighted;
  double J = 0, se = 0;
  std::vector<TraceRow> trace;
  bool converged = false;
  int iterations = 0;
};

namespace detail {

inline ControlField blend_open(const ControlField& a, const ControlField& b,
                               double wa, double wb, const PathData& pd) {
  ControlField out = ControlField::open_loop(a.space, pd.N, pd.Nt);
  parallel_for(pd.N, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i)
      for (int k = 0; k < pd.Nt; ++k) {
        if (!pd.is_alive(i, k)) continue;
        out.set_open(i, k, wa * a.action(pd, i, k) + wb * b.action(pd, i, k));
      }
  });
  return out;
}

inline double weighted_dalpha_sq(const ControlField& a, const ControlField& b,
                                 const ParticleEnsemble& ens) {
  const PathData& pd = ens.p();
  std::vector<double> num(pd.N, 0.0), den(pd.N, 0.0);
  parallel_for(pd.N, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      for (int k = 0; k < pd.Nt; ++k) {
        if (!pd.is_alive(i, k)) continue;
        double w = ens.weight(i, k) * pd.dt;
        num[i] += w * (a.action(pd, i, k) - b.action(pd, i, k)).squaredNorm();
        den[i] += w;
      }
    }
  });
  double n = pairwise_sum(num), d = pairwise_sum(den);
  return d > 0 ? n / d : 0.0;
}

}  // namespace detail

// Pointwise argmin table: alpha*(i, k) = argmin_a h1(t_k, X_{i,k}, a, Z_{i,k}).
inline ControlField pointwise_minimizer(const ParticleEnsemble& ens,
                                        const MeasureFlow& flow,
                                        const AdjointSolution& adj,
                                        const DynamicsSpec& dyn,
                                        const CostSpec& cost,
                                        const ControlSpace& A) {
  const PathData& pd = ens.p();
  ControlField out = ControlField::open_loop(A, pd.N, pd.Nt);
  parallel_for(pd.N, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i)
      for (int k = 0; k < pd.Nt; ++k) {
        if (!pd.is_alive(i, k)) continue;
        Vec z(pd.d);
        for (int j = 0; j < pd.d; ++j) z(j) = adj.z(i, k, j, pd.Nt, pd.d);
        out.set_open(i, k,
                     minimize_hamiltonian(dyn, cost, pd.times(k),
                                          pd.state(i, k), flow.laws[k],
                                          flow.survival(k), z, A));
      }
  });
  return out;
}

// Regression distillation of an open-loop table to feedback form.
inline ControlField fit_feedback(const ControlField& open,
                                 const ParticleEnsemble& ens, int degree = 2) {
  const PathData& pd = ens.p();
  PolyBasis basis{pd.d, degree};
  const int B = basis.size();
  std::vector<Mat> coeffs(pd.Nt);
  for (int k = 0; k < pd.Nt; ++k) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < pd.N; ++i)
      if (pd.is_alive(i, k)) idx.push_back(i);
    auto n = static_cast<std::int64_t>(idx.size());
    Mat design(n, B);
    Vec w(n);
    for (std::int64_t r = 0; r < n; ++r) {
      basis.eval(pd.state(idx[r], k), design.row(r));
      w(r) = ens.weight(idx[r], k);
    }
    WeightedRidge reg(design, w, 1e-8);
    Mat C(B, open.k);
    for (int c = 0; c < open.k; ++c) {
      Vec target(n);
      for (std::int64_t r = 0; r < n; ++r)
        target(r) = open.action(pd, idx[r], k)(c);
      C.col(c) = reg.solve(target);
    }
    coeffs[k] = C;
  }
  return ControlField::feedback(open.space, std::move(coeffs), basis);
}

inline SolveResult solve_on_ensemble(const ParticleEnsemble& ens,
                                     const DynamicsSpec& dyn,
                                     const CostSpec& cost,
                                     const ControlSpace& A,
                                     const SolveOptions& opts = {}) {
  const PathData& pd = ens.p();
  SolveResult res;

  ControlField alpha = opts.init_control
                           ? *opts.init_control
                           : ControlField::zero_control(A);
  PicardResult pf = picard_solve(ens, alpha, dyn, opts.picard);
  CostEstimate est = cost_estimate(pf.reweighted, alpha, pf.flow, cost);
  res.trace.push_back({0, est.J, est.se, 0.0, pf.flow.survival(pd.Nt),
                       opts.gamma, true});

  double gamma = opts.gamma;
  AdjointSolution adj;
  for (int it = 1; it <= opts.outer_iters; ++it) {
    adj = solve_adjoint(pf.reweighted, alpha, pf.flow, dyn, cost,
                        opts.adjoint);
    ControlField alpha_star =
        pointwise_minimizer(pf.reweighted, pf.flow, adj, dyn, cost, A);

    bool accepted = false;
    ControlField alpha_trial;
    PicardResult pf_trial;
    CostEstimate est_trial;
    while (!accepted) {
      alpha_trial = detail::blend_open(alpha, alpha_star, 1.0 - gamma, gamma,
                                       pd);
      pf_trial = picard_solve(ens, alpha_trial, dyn, opts.picard);
      est_trial = cost_estimate(pf_trial.reweighted, alpha_trial,
                                pf_trial.flow, cost);
      double noise = 2.0 * std::hypot(est.se, est_trial.se);
      if (est_trial.J <= est.J + noise) {
        accepted = true;
      } else {
        res.trace.push_back({it, est_trial.J, est_trial.se,
                             detail::weighted_dalpha_sq(alpha, alpha_trial,
                                                        pf_trial.reweighted),
                             pf_trial.flow.survival(pd.Nt), gamma, false});
        gamma *= 0.5;
        if (gamma < 1e-3)
          throw stall_error("damping underflow in the outer iteration");
      }
    }

    double dalpha =
        detail::weighted_dalpha_sq(alpha, alpha_trial, pf_trial.reweighted);
    double dJ = std::abs(est_trial.J - est.J);
    res.trace.push_back({it, est_trial.J, est_trial.se, dalpha,
                         pf_trial.flow.survival(pd.Nt), gamma, true});
    alpha = std::move(alpha_trial);
    pf = std::move(pf_trial);
    est = std::move(est_trial);
    res.iterations = it;
    if (dJ < opts.tol_J * (1.0 + std::abs(est.J)) && dalpha < opts.tol_alpha) {
      res.converged = true;
      break;
    }
  }

  adj = solve_adjoint(pf.reweighted, alpha, pf.flow, dyn, cost, opts.adjoint);
  if (opts.fit_feedback)
    res.feedback = fit_feedback(alpha, pf.reweighted, opts.adjoint.basis_degree);
  res.control = std::move(alpha);
  res.flow = std::move(pf.flow);
  res.adjoint = std::move(adj);
  res.reweighted = std::move(pf.reweighted);
  res.J = est.J;
  res.se = est.se;
  return res;
}

inline SolveResult solve(const Scenario& s, const SolveOptions& opts = {}) {
  if (!(s.cost.m > 0) && s.controls.kind == ControlSpaceKind::full_space)
    throw invalid_scenario_error(
        "solve needs m > 0 or a bounded action space");
  ParticleEnsemble ens = simulate_reference(s);
  return solve_on_ensemble(ens, s.dynamics, s.cost, s.controls, opts);
}

// ---------------------------------------------------------------------------
// Certificates
// ---------------------------------------------------------------------------

// Gateaux check: finite-difference secants of J along a direction eta versus
// the adjoint expression E^alpha[ int h_a(Theta, Z)^T eta ].
struct GateauxReport {
  double rhs = 0, rhs_se = 0;
  double extrapolated = 0, secant_se = 0;
  std::vector<std::array<double, 3>> secants;  // (eps, secant, se)
  bool pass = false;
};

inline GateauxReport gateaux_check(const ParticleEnsemble& ens,
                                   const DynamicsSpec& dyn,
                                   const CostSpec& cost, const ControlSpace& A,
                                   const ControlField& alpha,
                                   const ControlField& eta,
                                   const std::vector<double>& eps_list,
                                   const AdjointOptions& aopts = {},
                                   const PicardOptions& popts = {}) {
  const PathData& pd = ens.p();
  PicardResult pf = picard_solve(ens, alpha, dyn, popts);
  CostEstimate base = cost_estimate(pf.reweighted, alpha, pf.flow, cost);
  AdjointSolution adj =
      solve_adjoint(pf.reweighted, alpha, pf.flow, dyn, cost, aopts);

  // RHS per particle: sum_k E_k h_a^T eta dt over alive steps
  std::vector<double> rhs_terms(pd.N, 0.0);
  parallel_for(pd.N, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      double acc = 0;
      for (int k = 0; k < pd.Nt; ++k) {
        if (!pd.is_alive(i, k)) continue;
        Vec z(pd.d);
        for (int j = 0; j < pd.d; ++j) z(j) = adj.z(i, k, j, pd.Nt, pd.d);
        Vec ha = hamiltonian_grad_a(dyn, cost, pd.times(k), pd.state(i, k),
                                    alpha.action(pd, i, k), pf.flow.laws[k],
                                    pf.flow.survival(k), z);
        acc += pf.reweighted.weight(i, k) * ha.dot(eta.action(pd, i, k)) *
               pd.dt;
      }
      rhs_terms[i] = acc;
    }
  });
  auto rhs = mean_se(pd.N, [&](std::int64_t i) { return rhs_terms[i]; });

  GateauxReport rep;
  rep.rhs = rhs.mean;
  rep.rhs_se = rhs.se;

  // Secants with common random numbers: paired per-particle differences.
  Mat secant_design(static_cast<int>(eps_list.size()), 2);
  Vec secant_vals(static_cast<int>(eps_list.size()));
  for (std::size_t e = 0; e < eps_list.size(); ++e) {
    double eps = eps_list[e];
    ControlField pert = detail::blend_open(alpha, eta, 1.0, eps, pd);
    PicardResult pfe = picard_solve(ens, pert, dyn, popts);
    CostEstimate est = cost_estimate(pfe.reweighted, pert, pfe.flow, cost);
    auto diff = mean_se(pd.N, [&](std::int64_t i) {
      return (est.per_particle[i] - base.per_particle[i]) / eps;
    });
    rep.secants.push_back({eps, diff.mean, diff.se});
    secant_design(static_cast<int>(e), 0) = 1.0;
    secant_design(static_cast<int>(e), 1) = eps;
    secant_vals(static_cast<int>(e)) = diff.mean;
    rep.secant_se = std::max(rep.secant_se, diff.se);
  }
  // linear extrapolation to eps = 0
  Vec coef = (secant_design.transpose() * secant_design)
                 .ldlt()
                 .solve(secant_design.transpose() * secant_vals);
  rep.extrapolated = coef(0);

  double tol = std::max(
      0.02 * std::max(std::abs(rep.rhs), std::abs(rep.extrapolated)),
      3.0 * std::hypot(rep.rhs_se, rep.secant_se));
  rep.pass = std::abs(rep.extrapolated - rep.rhs) <= tol;
  return rep;
}

// Sufficient-condition chain: J(a') - J(a) >= (m/2) E^{a'} int |a - a'|^2
// >= (m/L^2) H(P^{a'} || P^{a}), each estimated with common paths.
struct GapReport {
  double dJ = 0, dJ_se = 0;
  double quad = 0, quad_se = 0;
  double ent = 0, ent_se = 0;
  bool pass_first = false, pass_second = false;
  bool pass() const { return pass_first && pass_second; }
};

inline GapReport sufficient_gap_certificate(
    const ParticleEnsemble& ens, const DynamicsSpec& dyn, const CostSpec& cost,
    const ControlField& alpha_hat, const ControlField& alpha_prime, double m,
    double L, const PicardOptions& popts = {}) {
  const PathData& pd = ens.p();
  PicardResult pf_hat = picard_solve(ens, alpha_hat, dyn, popts);
  PicardResult pf_pr = picard_solve(ens, alpha_prime, dyn, popts);
  CostEstimate J_hat =
      cost_estimate(pf_hat.reweighted, alpha_hat, pf_hat.flow, cost);
  CostEstimate J_pr =
      cost_estimate(pf_pr.reweighted, alpha_prime, pf_pr.flow, cost);

  GapReport rep;
  auto dJ = mean_se(pd.N, [&](std::int64_t i) {
    return J_pr.per_particle[i] - J_hat.per_particle[i];
  });
  rep.dJ = dJ.mean;
  rep.dJ_se = dJ.se;

  std::vector<double> quad_terms(pd.N, 0.0);
  parallel_for(pd.N, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      double acc = 0;
      for (int k = 0; k < pd.Nt; ++k) {
        if (!pd.is_alive(i, k)) continue;
        acc += pf_pr.reweighted.weight(i, k) *
               (alpha_hat.action(pd, i, k) - alpha_prime.action(pd, i, k))
                   .squaredNorm() *
               pd.dt;
      }
      quad_terms[i] = acc;
    }
  });
  auto quad = mean_se(pd.N, [&](std::int64_t i) { return quad_terms[i]; });
  rep.quad = 0.5 * m * quad.mean;
  rep.quad_se = 0.5 * m * quad.se;

  auto ent = cross_entropy(pf_pr.reweighted, pf_hat.reweighted);
  rep.ent = m / (L * L) * ent.mean;
  rep.ent_se = m / (L * L) * ent.se;

  rep.pass_first = rep.dJ - rep.quad >= -3.0 * std::hypot(rep.dJ_se, rep.quad_se);
  rep.pass_second =
      rep.quad - rep.ent >= -3.0 * std::hypot(rep.quad_se, rep.ent_se);
  return rep;
}

// BMO diagnostic over the deterministic grid: max_k of the regression
// estimate of E[ int_{t_k}^{T ^ tau} |alpha|^2 ds | X_{t_k} ], a lower bound
// for the squared BMO norm.
inline double bmo_estimate(const ControlField& alpha,
                           const ParticleEnsemble& ens, int degree = 2) {
  const PathData& pd = ens.p();
  PolyBasis basis{pd.d, degree};
  const int B = basis.size();
  // suffix sums of |alpha|^2 dt per particle
  Mat suffix = Mat::Zero(pd.N, pd.Nt + 1);
  parallel_for(pd.N, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i)
      for (int k = pd.Nt - 1; k >= 0; --k) {
        double a2 = pd.is_alive(i, k)
                        ? alpha.action(pd, i, k).squaredNorm() * pd.dt
                        : 0.0;
        suffix(i, k) = suffix(i, k + 1) + a2;
      }
  });
  double worst = 0;
  for (int k = 0; k < pd.Nt; ++k) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = 0; i < pd.N; ++i)
      if (pd.is_alive(i, k)) idx.push_back(i);
    if (idx.empty()) break;
    auto n = static_cast<std::int64_t>(idx.size());
    Mat design(n, B);
    Vec target(n);
    for (std::int64_t r = 0; r < n; ++r) {
      basis.eval(pd.state(idx[r], k), design.row(r));
      target(r) = suffix(idx[r], k);
    }
    Vec w = Vec::Ones(n);  // plain P-conditional expectation
    WeightedRidge reg(design, w, 1e-8);
    Vec fit = reg.fitted(reg.solve(target));
    worst = std::max(worst, fit.maxCoeff());
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Potential mean field game exploitability: freeze the reported flow, solve
// the standard control problem with the frozen-measure cost, and report the
// optimizer's suboptimality gap. Restricted to measure-free dynamics on the
// full space (the simplified cases).
// ---------------------------------------------------------------------------

struct ExploitabilityReport {
  double J_candidate = 0, J_best = 0;
  double se = 0;
  double exploitability = 0;
  bool pass = false;
};

inline CostSpec frozen_mfg_cost(const CostSpec& cost, const MeasureFlow& nu) {
  CostSpec fr;
  fr.f1 = cost.f1;
  fr.f1_a = cost.f1_a;
  fr.m = cost.m;
  fr.f1_form = cost.f1_form;
  const MeasureFlow* flow = &nu;
  if (cost.f2) {
    auto f2 = cost.f2;
    auto dm = cost.dm_f2;
    bool state_dep = cost.dm_f2_state_dependent;
    fr.f2 = [f2, dm, state_dep, flow](double t, const Vec& x,
                                      const WeightedSample&, double) {
      // locate the grid step for t (uniform grid)
      int k = static_cast<int>(
          std::lround(t / (flow->times(1) - flow->times(0))));
      k = std::clamp(k, 0, flow->steps());
      const WeightedSample& m = flow->laws[k];
      double v = f2(t, x, m, 1.0);
      if (dm) {
        if (!state_dep) {
          v += dm(t, x, m, 1.0, x);
        } else {
          for (int j = 0; j < m.size(); ++j)
            v += m.weights(j) *
                 dm(t, Vec(m.points.row(j).transpose()), m, 1.0, x);
        }
      }
      return v;
    };
  }
  if (cost.g) {
    auto g = cost.g;
    auto dm = cost.dm_g;
    bool state_dep = cost.dm_g_state_dependent;
    fr.g = [g, dm, state_dep, flow](const Vec& x, const WeightedSample&,
                                    double) {
      const WeightedSample& m = flow->laws[flow->steps()];
      double v = g(x, m, 1.0);
      if (dm) {
        if (!state_dep) {
          v += dm(x, m, 1.0, x);
        } else {
          for (int j = 0; j < m.size(); ++j)
            v += m.weights(j) * dm(Vec(m.points.row(j).transpose()), m, 1.0, x);
        }
      }
      return v;
    };
  }
  return fr;
}

inline ExploitabilityReport mfg_exploitability(
    const ParticleEnsemble& ens, const DynamicsSpec& dyn, const CostSpec& cost,
    const ControlSpace& A, const DomainSpec& domain,
    const ControlField& candidate, const MeasureFlow& nu_hat,
    const SolveOptions& opts = {}) {
  if (domain.kind != DomainKind::full_space)
    throw scope_error("mfg_exploitability requires the full-space domain");
  if (dyn.measure_dependent)
    throw scope_error(
        "mfg_exploitability requires measure-free dynamics (simplified case)");

  CostSpec frozen = frozen_mfg_cost(cost, nu_hat);

  PicardResult pf_c = picard_solve(ens, candidate, dyn, opts.picard);
  CostEstimate J_c =
      cost_estimate(pf_c.reweighted, candidate, pf_c.flow, frozen);

  SolveOptions inner = opts;
  inner.fit_feedback = false;
  SolveResult best = solve_on_ensemble(ens, dyn, frozen, A, inner);

  ExploitabilityReport rep;
  rep.J_candidate = J_c.J;
  rep.J_best = best.J;
  rep.se = std::hypot(J_c.se, best.se);
  rep.exploitability = J_c.J - best.J;
  rep.pass = rep.exploitability <=
             std::max(0.01 * std::abs(J_c.J), 3.0 * rep.se);
  return rep;
}

// Weighted first-order optimality violation: min over probe actions e in A of
// the E^alpha-weighted mean of h_a(Theta, Z)^T (e - alpha). Nonnegative (up
// to noise) at a Hamiltonian-minimizing control.
inline double first_order_violation(const SolveResult& res,
                                    const DynamicsSpec& dyn,
                                    const CostSpec& cost, const ControlSpace& A,
                                    int probes = 8, std::uint64_t seed = 11) {
  const PathData& pd = res.reweighted.p();
  RngStream r(seed, "pontryagin/first_order_probes");
  double worst = 0;
  for (int e = 0; e < probes; ++e) {
    Vec probe(A.k);
    for (int c = 0; c < A.k; ++c) probe(c) = 2.0 * r.normal(e, c);
    probe = A.project(probe);
    double num = parallel_sum(pd.N, [&](std::int64_t i) {
      double acc = 0;
      for (int k = 0; k < pd.Nt; ++k) {
        if (!pd.is_alive(i, k)) continue;
        Vec z(pd.d);
        for (int j = 0; j < pd.d; ++j)
          z(j) = res.adjoint.z(i, k, j, pd.Nt, pd.d);
        Vec ai = res.control.action(pd, i, k);
        Vec ha = hamiltonian_grad_a(dyn, cost, pd.times(k), pd.state(i, k), ai,
                                    res.flow.laws[k], res.flow.survival(k), z);
        acc += res.reweighted.weight(i, k) * ha.dot(probe - ai) * pd.dt;
      }
      return acc;
    });
    worst = std::min(worst, num / static_cast<double>(pd.N));
  }
  return worst;
}

}  // namespace mkv
