#pragma once

#include "mkv/common.hpp"
#include "mkv/simulate.hpp"

#include <optional>

namespace mkv {

// Resolves P^alpha as the fixed point of Phi: (mu, p) -> conditional law and
// survival of the measure reweighted with (mu, p). Brownian increments are
// shared across iterations (common random numbers), so the fixed point is
// deterministic at fixed N.
struct PicardOptions {
  int max_iters = 50;
  double tol = 1e-4;
  std::optional<MeasureFlow> init_flow;
};

struct PicardResult {
  MeasureFlow flow;
  std::vector<double> trace;  // flow_distance between successive iterates
  ParticleEnsemble reweighted;
  bool converged = false;
  bool noncontraction_warning = false;
  int iterations = 0;
};

inline PicardResult picard_solve(const ParticleEnsemble& ens,
                                 const ControlField& alpha,
                                 const DynamicsSpec& dyn,
                                 const PicardOptions& opts = {}) {
  PicardResult res;

  MeasureFlow flow =
      opts.init_flow ? *opts.init_flow : empirical_flow(ens);

  if (!dyn.measure_dependent) {
    // Phi is constant in the flow: one application lands on the fixed point.
    res.reweighted = reweight(ens, alpha, flow, dyn);
    res.flow = empirical_flow(res.reweighted);
    res.trace = {0.0};
    res.converged = true;
    res.iterations = 1;
    return res;
  }

  int rising = 0;
  for (int it = 0; it < opts.max_iters; ++it) {
    ParticleEnsemble rw = reweight(ens, alpha, flow, dyn);
    MeasureFlow next = empirical_flow(rw);
    double dist = flow_distance(next, flow);
    res.trace.push_back(dist);
    res.reweighted = std::move(rw);
    flow = std::move(next);
    res.iterations = it + 1;
    std::size_t n = res.trace.size();
    if (n >= 2 && res.trace[n - 1] >= res.trace[n - 2]) {
      if (++rising >= 3) res.noncontraction_warning = true;
    } else {
      rising = 0;
    }
    if (dist < opts.tol) {
      res.converged = true;
      break;
    }
  }
  res.flow = std::move(flow);
  return res;
}

}  // namespace mkv
