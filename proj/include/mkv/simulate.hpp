#pragma once

#include "mkv/basis.hpp"
#include "mkv/common.hpp"
#include "mkv/model.hpp"

#include <cstring>
#include <memory>
#include <utility>

namespace mkv {

// Immutable path block shared by every reweighting of one simulation:
// states, Brownian increments (reference measure), aliveness, exit steps.
struct PathData {
  int N = 0, Nt = 0, d = 0;
  double T = 0, dt = 0;
  std::uint64_t seed = 0;
  Vec times;                   // Nt + 1
  std::vector<double> X;       // N * (Nt+1) * d
  std::vector<double> dW;      // N * Nt * d
  std::vector<std::uint8_t> alive;  // N * (Nt+1)
  std::vector<int> exit_step;  // N; Nt+1 sentinel = survived

  double x(std::int64_t i, int k, int j) const {
    return X[(i * (Nt + 1) + k) * d + j];
  }
  Vec state(std::int64_t i, int k) const {
    Vec v(d);
    for (int j = 0; j < d; ++j) v(j) = x(i, k, j);
    return v;
  }
  double dw(std::int64_t i, int k, int j) const {
    return dW[(i * Nt + k) * d + j];
  }
  bool is_alive(std::int64_t i, int k) const {
    return alive[i * (Nt + 1) + k] != 0;
  }
  bool survived(std::int64_t i) const { return exit_step[i] == Nt + 1; }
  // Steps with t_k < tau contribute to running costs; for survivors all Nt.
  int cost_steps(std::int64_t i) const {
    return survived(i) ? Nt : exit_step[i];
  }
};

// Paths plus the running stochastic exponential E of one control (all ones on
// the reference measure). Reweighting shares the path block and replaces E.
struct ParticleEnsemble {
  std::shared_ptr<const PathData> paths;
  std::vector<double> E;      // N * (Nt+1), frozen after exit
  std::vector<double> beta;   // N * Nt * d (empty on the reference ensemble)
  std::int64_t clip_count = 0;

  const PathData& p() const { return *paths; }
  double weight(std::int64_t i, int k) const {
    return E[i * (paths->Nt + 1) + k];
  }
  double terminal_weight(std::int64_t i) const {
    return weight(i, paths->Nt);  // E_{T ^ tau}: frozen at exit
  }
  double beta_at(std::int64_t i, int k, int j) const {
    return beta[(i * paths->Nt + k) * paths->d + j];
  }
  bool has_beta() const { return !beta.empty(); }
  // Increment of W^alpha = dW - beta dt (defined where beta is).
  double dw_alpha(std::int64_t i, int k, int j) const {
    return paths->dw(i, k, j) -
           (has_beta() ? beta_at(i, k, j) * paths->dt : 0.0);
  }
};

// ---------------------------------------------------------------------------
// Controls: feedback (per-step basis coefficients) or open-loop table.
// Every evaluated action is projected onto A; dead cells are zero.
// ---------------------------------------------------------------------------

struct ControlField {
  enum class Repr { zero, constant, open_loop, feedback };
  Repr repr = Repr::zero;
  ControlSpace space;
  int k = 1;

  Vec constant;                 // Repr::constant
  std::vector<double> open;     // N * Nt * k
  std::int64_t open_N = 0;
  int open_Nt = 0;
  std::vector<Mat> coeffs;      // Nt matrices, basis_size x k
  PolyBasis basis;

  static ControlField zero_control(const ControlSpace& A) {
    ControlField c;
    c.repr = Repr::zero;
    c.space = A;
    c.k = A.k;
    return c;
  }
  static ControlField constant_control(const ControlSpace& A, Vec a) {
    ControlField c;
    c.repr = Repr::constant;
    c.space = A;
    c.k = A.k;
    c.constant = A.project(std::move(a));
    return c;
  }
  static ControlField open_loop(const ControlSpace& A, std::int64_t N, int Nt) {
    ControlField c;
    c.repr = Repr::open_loop;
    c.space = A;
    c.k = A.k;
    c.open_N = N;
    c.open_Nt = Nt;
    c.open.assign(static_cast<std::size_t>(N) * Nt * A.k, 0.0);
    return c;
  }
  static ControlField feedback(const ControlSpace& A, std::vector<Mat> C,
                               PolyBasis basis) {
    ControlField c;
    c.repr = Repr::feedback;
    c.space = A;
    c.k = A.k;
    c.coeffs = std::move(C);
    c.basis = basis;
    return c;
  }

  void set_open(std::int64_t i, int step, const Vec& a) {
    Vec pa = space.project(a);
    for (int c = 0; c < k; ++c) open[(i * open_Nt + step) * k + c] = pa(c);
  }

  // Action for particle i at step `step` in state x; 0 after exit.
  Vec action(const PathData& paths, std::int64_t i, int step) const {
    if (!paths.is_alive(i, step)) return Vec::Zero(k);
    switch (repr) {
      case Repr::zero:
        return Vec::Zero(k);
      case Repr::constant:
        return constant;
      case Repr::open_loop: {
        Vec a(k);
        for (int c = 0; c < k; ++c) a(c) = open[(i * open_Nt + step) * k + c];
        return a;
      }
      case Repr::feedback: {
        Eigen::RowVectorXd phi = basis.eval(paths.state(i, step));
        return space.project(coeffs[step].transpose() * phi.transpose());
      }
    }
    return Vec::Zero(k);
  }
};

// ---------------------------------------------------------------------------
// Forward simulation of the killed state under the reference measure.
// ---------------------------------------------------------------------------

inline ParticleEnsemble simulate_reference(const Scenario& s) {
  const int d = s.domain.dim;
  const int Nt = s.steps;
  const std::int64_t N = s.particles;
  const double dt = s.dt();
  const double sqdt = std::sqrt(dt);

  auto data = std::make_shared<PathData>();
  data->N = static_cast<int>(N);
  data->Nt = Nt;
  data->d = d;
  data->T = s.horizon;
  data->dt = dt;
  data->seed = s.seed;
  data->times = Vec::LinSpaced(Nt + 1, 0.0, s.horizon);
  data->X.assign(static_cast<std::size_t>(N) * (Nt + 1) * d, 0.0);
  data->dW.assign(static_cast<std::size_t>(N) * Nt * d, 0.0);
  data->alive.assign(static_cast<std::size_t>(N) * (Nt + 1), 0);
  data->exit_step.assign(N, Nt + 1);

  RngStream init(s.seed, "sim/initial");
  RngStream brown(s.seed, "sim/brownian");
  RngStream bridge(s.seed, "sim/bridge");

  const bool bridge_on =
      s.bridge_correction && d == 1 &&
      (s.domain.kind == DomainKind::half_line ||
       s.domain.kind == DomainKind::interval);

  std::atomic<bool> bad_init{false};
  parallel_for(N, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      Vec x = s.initial_law(init, i);
      if (!s.domain.contains(x)) {
        bad_init.store(true);
        return;
      }
      for (int j = 0; j < d; ++j) data->X[(i * (Nt + 1)) * d + j] = x(j);
      data->alive[i * (Nt + 1)] = 1;
      bool live = true;
      for (int k = 0; k < Nt && live; ++k) {
        double t = data->times(k);
        Mat sig = s.dynamics.sigma(t, x);
        Vec dw(d);
        for (int j = 0; j < d; ++j)
          dw(j) = sqdt * brown.normal(static_cast<std::uint64_t>(i), k, j);
        Vec xn = x + sig * dw;
        for (int j = 0; j < d; ++j) {
          data->dW[(i * Nt + k) * d + j] = dw(j);
          data->X[(i * (Nt + 1) + k + 1) * d + j] = xn(j);
        }
        bool inside = s.domain.contains(xn);
        if (inside && bridge_on) {
          double sg = sig(0, 0);
          double var = sg * sg * dt;
          double p_hit = 0.0;
          if (s.domain.kind == DomainKind::half_line) {
            double a = s.domain.threshold;
            p_hit = std::exp(-2.0 * (x(0) - a) * (xn(0) - a) / var);
          } else {
            double plo =
                std::exp(-2.0 * (x(0) - s.domain.lo1) * (xn(0) - s.domain.lo1) /
                         var);
            double phi =
                std::exp(-2.0 * (s.domain.hi1 - x(0)) * (s.domain.hi1 - xn(0)) /
                         var);
            p_hit = 1.0 - (1.0 - plo) * (1.0 - phi);
          }
          if (bridge.uniform(static_cast<std::uint64_t>(i), k) < p_hit)
            inside = false;
        }
        if (inside) {
          data->alive[i * (Nt + 1) + k + 1] = 1;
          x = xn;
        } else {
          data->exit_step[i] = k + 1;
          live = false;
          // freeze the path at the exit-step value
          for (int kk = k + 2; kk <= Nt; ++kk)
            for (int j = 0; j < d; ++j)
              data->X[(i * (Nt + 1) + kk) * d + j] = xn(j);
        }
      }
    }
  });
  if (bad_init.load())
    throw invalid_scenario_error("initial point outside domain");

  ParticleEnsemble ens;
  ens.paths = data;
  ens.E.assign(static_cast<std::size_t>(N) * (Nt + 1), 1.0);
  return ens;
}

// ---------------------------------------------------------------------------
// Girsanov reweighting: E_{k+1} = E_k exp(beta_k . dW_k - |beta_k|^2 dt / 2),
// frozen after exit. Log-space accumulation, clipped at +-500.
// ---------------------------------------------------------------------------

inline ParticleEnsemble reweight(const ParticleEnsemble& ens,
                                 const ControlField& alpha,
                                 const MeasureFlow& flow,
                                 const DynamicsSpec& dyn) {
  const PathData& pd = ens.p();
  if (flow.times.size() != pd.times.size() ||
      (flow.times - pd.times).cwiseAbs().maxCoeff() > 1e-12)
    throw grid_mismatch_error("flow grid does not match ensemble grid");

  ParticleEnsemble out;
  out.paths = ens.paths;
  out.E.assign(static_cast<std::size_t>(pd.N) * (pd.Nt + 1), 1.0);
  out.beta.assign(static_cast<std::size_t>(pd.N) * pd.Nt * pd.d, 0.0);

  std::atomic<std::int64_t> clips{0};
  std::atomic<bool> nonfinite{false};
  parallel_for(pd.N, [&](std::int64_t b, std::int64_t e) {
    std::int64_t local_clips = 0;
    for (std::int64_t i = b; i < e; ++i) {
      double logE = 0.0;
      for (int k = 0; k < pd.Nt; ++k) {
        if (!pd.is_alive(i, k)) {
          out.E[i * (pd.Nt + 1) + k + 1] = out.E[i * (pd.Nt + 1) + k];
          continue;
        }
        Vec x = pd.state(i, k);
        Vec a = alpha.action(pd, i, k);
        Vec bet = beta_eval(dyn, pd.times(k), x, a, flow.laws[k],
                            flow.survival(k));
        double inc = 0.0, b2 = 0.0;
        for (int j = 0; j < pd.d; ++j) {
          out.beta[(i * pd.Nt + k) * pd.d + j] = bet(j);
          inc += bet(j) * pd.dw(i, k, j);
          b2 += bet(j) * bet(j);
        }
        logE += inc - 0.5 * b2 * pd.dt;
        if (!std::isfinite(logE)) {
          nonfinite.store(true);
          return;
        }
        if (logE > 500.0) {
          logE = 500.0;
          ++local_clips;
        } else if (logE < -500.0) {
          logE = -500.0;
          ++local_clips;
        }
        out.E[i * (pd.Nt + 1) + k + 1] = std::exp(logE);
      }
    }
    clips.fetch_add(local_clips);
  });
  if (nonfinite.load())
    throw nonfinite_weight_error("stochastic exponential became non-finite");
  out.clip_count = clips.load();
  return out;
}

// ---------------------------------------------------------------------------
// Empirical flow: p_k = (1/N) sum_i E_{i,k} 1{alive}, conditional law =
// normalized weighted sample of alive particles.
// ---------------------------------------------------------------------------

inline MeasureFlow empirical_flow(const ParticleEnsemble& ens) {
  const PathData& pd = ens.p();
  MeasureFlow flow;
  flow.times = pd.times;
  flow.survival.resize(pd.Nt + 1);
  flow.laws.reserve(pd.Nt + 1);
  for (int k = 0; k <= pd.Nt; ++k) {
    std::vector<std::int64_t> idx;
    idx.reserve(pd.N);
    for (std::int64_t i = 0; i < pd.N; ++i)
      if (pd.is_alive(i, k)) idx.push_back(i);
    if (idx.empty())
      throw extinction_error("no particle alive at step " + std::to_string(k));
    Mat pts(static_cast<int>(idx.size()), pd.d);
    Vec w(static_cast<int>(idx.size()));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (int j = 0; j < pd.d; ++j) pts(static_cast<int>(r), j) = pd.x(idx[r], k, j);
      w(static_cast<int>(r)) = ens.weight(idx[r], k);
    }
    double mass = w.sum();
    if (!(mass > 0))
      throw extinction_error("zero weighted mass at step " + std::to_string(k));
    // The literal weighted alive fraction. It is a martingale estimate: at
    // finite N it can wiggle upward by O(N^{-1/2}) between steps even though
    // the population it estimates is non-increasing; clamping it would break
    // the exact cost identities, so the raw value is kept.
    double p = mass / pd.N;
    flow.survival(k) = p;
    flow.laws.push_back(WeightedSample::make(std::move(pts), std::move(w), true));
  }
  return flow;
}

// ---------------------------------------------------------------------------
// Cost functional estimate: per particle, left-point quadrature of f over
// steps before exit plus terminal g for survivors, weighted by the running
// stochastic exponential. Returns (J, standard error).
// ---------------------------------------------------------------------------

struct CostEstimate {
  double J = 0;
  double se = 0;
  std::vector<double> per_particle;
};

inline CostEstimate cost_estimate(const ParticleEnsemble& ens,
                                  const ControlField& alpha,
                                  const MeasureFlow& flow,
                                  const CostSpec& cost) {
  const PathData& pd = ens.p();
  const double dt = pd.dt;
  const double pT = flow.survival(pd.Nt);
  const WeightedSample& muT = flow.laws[pd.Nt];

  std::vector<double> contrib(pd.N, 0.0);
  parallel_for(pd.N, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      double c = 0;
      int kmax = pd.cost_steps(i);
      for (int k = 0; k < kmax; ++k) {
        Vec x = pd.state(i, k);
        Vec a = alpha.action(pd, i, k);
        double f = cost.eval_f1(pd.times(k), x, a, flow.survival(k)) +
                   cost.eval_f2(pd.times(k), x, flow.laws[k], flow.survival(k));
        c += ens.weight(i, k) * f * dt;
      }
      if (pd.survived(i))
        c += ens.weight(i, pd.Nt) * cost.eval_g(pd.state(i, pd.Nt), muT, pT);
      contrib[i] = c;
    }
  });
  auto ms = mean_se(pd.N, [&](std::int64_t i) { return contrib[i]; });
  return {ms.mean, ms.se, std::move(contrib)};
}

// H(P^alpha || P) restricted to F_{T ^ tau}: mean of E_T log E_T.
inline MeanSe entropy_vs_reference(const ParticleEnsemble& ens) {
  const PathData& pd = ens.p();
  return mean_se(pd.N, [&](std::int64_t i) {
    double w = ens.terminal_weight(i);
    return w > 0 ? w * std::log(w) : 0.0;
  });
}

// H(P^a || P^b) estimated on common paths: mean of E^a (log E^a - log E^b).
inline MeanSe cross_entropy(const ParticleEnsemble& a,
                            const ParticleEnsemble& b) {
  const PathData& pd = a.p();
  if (b.paths.get() != a.paths.get())
    throw grid_mismatch_error("cross entropy requires common paths");
  return mean_se(pd.N, [&](std::int64_t i) {
    double wa = a.terminal_weight(i), wb = b.terminal_weight(i);
    if (wa <= 0) return 0.0;
    return wa * (std::log(wa) - std::log(wb));
  });
}

// ---------------------------------------------------------------------------
// Convex mixing of controls through measures: alpha^lambda realizes
// P^{alpha^lambda} = lambda P^{alpha'} + (1-lambda) P^alpha pathwise via
// iota_t = lambda E'_t / (lambda E'_t + (1-lambda) E_t). Requires affine
// dynamics (beta linear in a, no measure dependence).
// ---------------------------------------------------------------------------

struct MixResult {
  ControlField control;      // alpha^lambda = iota alpha' + (1-iota) alpha
  ParticleEnsemble ensemble; // carries the exact mixture density
};

inline MixResult mix_controls(const ControlField& a, const ControlField& ap,
                              double lambda, const ParticleEnsemble& ens,
                              const DynamicsSpec& dyn) {
  if (dyn.mode != BetaMode::affine || dyn.measure_dependent)
    throw scope_error("mix_controls requires affine measure-free dynamics");
  const PathData& pd = ens.p();
  // Any flow works: beta ignores (mu, p) here.
  MeasureFlow dummy = empirical_flow(ens);
  ParticleEnsemble ea = reweight(ens, a, dummy, dyn);
  ParticleEnsemble eb = reweight(ens, ap, dummy, dyn);

  MixResult res;
  res.control = ControlField::open_loop(a.space, pd.N, pd.Nt);
  res.ensemble.paths = ens.paths;
  res.ensemble.E.assign(static_cast<std::size_t>(pd.N) * (pd.Nt + 1), 1.0);
  res.ensemble.beta.assign(static_cast<std::size_t>(pd.N) * pd.Nt * pd.d, 0.0);
  parallel_for(pd.N, [&](std::int64_t b, std::int64_t e) {
    for (std::int64_t i = b; i < e; ++i) {
      for (int k = 0; k <= pd.Nt; ++k) {
        // E^lambda = lambda E' + (1-lambda) E: the density of the measure
        // mixture itself, exact per path at every time
        res.ensemble.E[i * (pd.Nt + 1) + k] =
            lambda * eb.weight(i, k) + (1.0 - lambda) * ea.weight(i, k);
        if (k == pd.Nt || !pd.is_alive(i, k)) continue;
        double Ea = ea.weight(i, k), Eb = eb.weight(i, k);
        double den = lambda * Eb + (1.0 - lambda) * Ea;
        double iota = den > 0 ? lambda * Eb / den : lambda;
        Vec va = a.action(pd, i, k), vb = ap.action(pd, i, k);
        Vec mixed_a = iota * vb + (1.0 - iota) * va;
        res.control.set_open(i, k, mixed_a);
        for (int j = 0; j < pd.d; ++j)
          res.ensemble.beta[(i * pd.Nt + k) * pd.d + j] =
              iota * eb.beta_at(i, k, j) + (1.0 - iota) * ea.beta_at(i, k, j);
      }
    }
  });
  return res;
}

}  // namespace mkv
