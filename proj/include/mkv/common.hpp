#pragma once

#include <Eigen/Dense>

#include <atomic>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace mkv {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Error hierarchy. Every throwing site uses one of these so the CLI can map
// failures to a stable error name and exit code.
class error : public std::runtime_error {
public:
  error(std::string name, const std::string& msg)
      : std::runtime_error(name + ": " + msg), name_(std::move(name)) {}
  const std::string& name() const { return name_; }

private:
  std::string name_;
};

#define MKV_DEFINE_ERROR(cls, tag)                                   \
  class cls : public error {                                         \
  public:                                                            \
    explicit cls(const std::string& msg) : error(tag, msg) {}        \
  }

MKV_DEFINE_ERROR(singular_volatility_error, "singular_volatility");
MKV_DEFINE_ERROR(support_mismatch_error, "support_mismatch");
MKV_DEFINE_ERROR(grid_mismatch_error, "grid_mismatch");
MKV_DEFINE_ERROR(extinction_error, "extinction");
MKV_DEFINE_ERROR(nonfinite_weight_error, "nonfinite_weight");
MKV_DEFINE_ERROR(regression_error, "regression_singularity");
MKV_DEFINE_ERROR(nonconvergence_error, "nonconvergence");
MKV_DEFINE_ERROR(stall_error, "stall");
MKV_DEFINE_ERROR(scope_error, "scope");
MKV_DEFINE_ERROR(config_error, "config");
MKV_DEFINE_ERROR(infeasible_target_error, "infeasible_target");
MKV_DEFINE_ERROR(invalid_scenario_error, "invalid_scenario");
MKV_DEFINE_ERROR(absolute_continuity_error, "absolute_continuity");

#undef MKV_DEFINE_ERROR

// Worker cap shared by all data-parallel loops. Chunking is fixed, so the
// thread count never changes results, only wall time.
inline std::atomic<int>& thread_budget() {
  static std::atomic<int> n{0};  // 0 = pick from hardware
  return n;
}

inline void set_thread_budget(int n) { thread_budget().store(n); }

inline int effective_threads() {
  int n = thread_budget().load();
  if (n > 0) return n;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw > 8 ? 8 : hw);
}

// Runs fn(begin, end) over [0, n) split into chunks of fixed size. Chunk
// boundaries depend only on n, so any per-chunk output is deterministic.
template <class Fn>
void parallel_for(std::int64_t n, Fn&& fn, std::int64_t chunk = 4096) {
  if (n <= 0) return;
  int threads = effective_threads();
  std::int64_t nchunks = (n + chunk - 1) / chunk;
  if (threads <= 1 || nchunks <= 1) {
    for (std::int64_t c = 0; c < nchunks; ++c)
      fn(c * chunk, std::min(n, (c + 1) * chunk));
    return;
  }
  std::atomic<std::int64_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::int64_t c = next.fetch_add(1);
      if (c >= nchunks) break;
      fn(c * chunk, std::min(n, (c + 1) * chunk));
    }
  };
  std::vector<std::thread> pool;
  int use = static_cast<int>(std::min<std::int64_t>(threads, nchunks));
  pool.reserve(use - 1);
  for (int t = 0; t + 1 < use; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
}

// Fixed-order pairwise summation; used for all statistical reductions so that
// results do not depend on scheduling.
inline double pairwise_sum(std::span<const double> v) {
  const std::size_t n = v.size();
  if (n <= 16) {
    double s = 0;
    for (double x : v) s += x;
    return s;
  }
  std::size_t half = n / 2;
  return pairwise_sum(v.subspan(0, half)) + pairwise_sum(v.subspan(half));
}

// Deterministic parallel map-reduce: per-chunk partial sums combined in fixed
// order. term(i) must be pure.
template <class Term>
double parallel_sum(std::int64_t n, Term&& term, std::int64_t chunk = 8192) {
  if (n <= 0) return 0.0;
  std::int64_t nchunks = (n + chunk - 1) / chunk;
  std::vector<double> partial(static_cast<std::size_t>(nchunks), 0.0);
  parallel_for(
      n,
      [&](std::int64_t b, std::int64_t e) {
        double s = 0;
        for (std::int64_t i = b; i < e; ++i) s += term(i);
        partial[static_cast<std::size_t>(b / chunk)] = s;
      },
      chunk);
  return pairwise_sum(partial);
}

struct MeanSe {
  double mean = 0;
  double se = 0;
  std::int64_t n = 0;
};

// Mean and standard error of term(i), i < n.
template <class Term>
MeanSe mean_se(std::int64_t n, Term&& term) {
  if (n <= 0) return {};
  double s = parallel_sum(n, term);
  double m = s / static_cast<double>(n);
  double sq = parallel_sum(n, [&](std::int64_t i) {
    double d = term(i) - m;
    return d * d;
  });
  double var = n > 1 ? sq / static_cast<double>(n - 1) : 0.0;
  return {m, std::sqrt(var / static_cast<double>(n)), n};
}

}  // namespace mkv
