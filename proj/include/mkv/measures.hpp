#pragma once

#include "mkv/common.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <vector>

namespace mkv {

// Weighted empirical measure at a fixed time: atoms (rows of points) with
// nonnegative weights. `normalized` flags a probability measure; the mean is
// cached eagerly since interaction kernels query it per drift evaluation.
struct WeightedSample {
  Mat points;   // N x d
  Vec weights;  // N
  bool normalized = true;
  Vec mean;

  int size() const { return static_cast<int>(points.rows()); }
  int dim() const { return static_cast<int>(points.cols()); }
  double total_mass() const { return weights.sum(); }

  static WeightedSample make(Mat pts, Vec w, bool normalize = true) {
    WeightedSample s;
    if (pts.rows() != w.size())
      throw support_mismatch_error("points/weights length mismatch");
    if ((w.array() < -1e-15).any())
      throw support_mismatch_error("negative weight");
    if (normalize) {
      double m = w.sum();
      if (!(m > 0)) throw extinction_error("total mass is zero");
      w /= m;
    }
    s.points = std::move(pts);
    s.weights = std::move(w);
    s.normalized = normalize;
    s.mean = s.weights.transpose() * s.points / std::max(s.total_mass(), 1e-300);
    return s;
  }

  static WeightedSample dirac(const Vec& x) {
    Mat p(1, x.size());
    p.row(0) = x.transpose();
    return make(p, Vec::Ones(1));
  }

  static WeightedSample atoms1d(std::initializer_list<double> xs,
                                std::initializer_list<double> ws) {
    Mat p(static_cast<int>(xs.size()), 1);
    Vec w(static_cast<int>(ws.size()));
    int i = 0;
    for (double x : xs) p(i++, 0) = x;
    i = 0;
    for (double v : ws) w(i++) = v;
    return make(p, w);
  }
};

// Per-time pair (conditional law, survival probability) on a uniform grid.
// The survival entries estimate a non-increasing quantity; the empirical
// estimator itself carries O(N^{-1/2}) martingale noise.
struct MeasureFlow {
  Vec times;                         // N_t + 1 entries
  std::vector<WeightedSample> laws;  // conditional laws of alive particles
  Vec survival;                      // p_t, p_0 = 1

  int steps() const { return static_cast<int>(times.size()) - 1; }
};

// Two-part representation of a finite signed measure; only the FW norm needs
// it. Masses are unconstrained nonnegative.
struct SignedMeasureRepr {
  WeightedSample pos;
  WeightedSample neg;

  int dim() const { return pos.dim(); }
  double total_variation_mass() const {
    return pos.total_mass() + neg.total_mass();
  }

  // a - b, with optional scales: sa*a - sb*b.
  static SignedMeasureRepr difference(const WeightedSample& a,
                                      const WeightedSample& b, double sa = 1.0,
                                      double sb = 1.0) {
    SignedMeasureRepr z;
    z.pos = WeightedSample::make(a.points, sa * a.weights, false);
    z.neg = WeightedSample::make(b.points, sb * b.weights, false);
    return z;
  }
};

// Equal-width binning over a box, used to compare Monte Carlo clouds from
// continuous laws (exact atom identity is degenerate there).
struct Binning {
  Vec lo, hi;
  int bins_per_dim = 64;
};

inline WeightedSample bin_sample(const WeightedSample& s, const Binning& bin) {
  const int d = s.dim();
  const int B = bin.bins_per_dim;
  if (bin.lo.size() != d || bin.hi.size() != d)
    throw support_mismatch_error("binning dimension mismatch");
  long long total = 1;
  for (int j = 0; j < d; ++j) total *= B;
  Vec w = Vec::Zero(total);
  for (int i = 0; i < s.size(); ++i) {
    long long idx = 0;
    for (int j = 0; j < d; ++j) {
      double t = (s.points(i, j) - bin.lo(j)) / (bin.hi(j) - bin.lo(j));
      int b = static_cast<int>(std::floor(t * B));
      b = std::clamp(b, 0, B - 1);
      idx = idx * B + b;
    }
    w(idx) += s.weights(i);
  }
  Mat centers(total, d);
  for (long long c = 0; c < total; ++c) {
    long long rest = c;
    for (int j = d - 1; j >= 0; --j) {
      int b = static_cast<int>(rest % B);
      rest /= B;
      centers(c, j) = bin.lo(j) + (b + 0.5) * (bin.hi(j) - bin.lo(j)) / B;
    }
  }
  return WeightedSample::make(std::move(centers), std::move(w),
                              s.normalized);
}

namespace detail {

struct Aligned {
  Vec wa, wb;
};

// Resolve a common support by exact point identity (union of atoms; absent
// atoms get weight zero). Two large samples sharing no atom are continuous
// clouds compared without a binning: that is the support-mismatch error
// unless the caller opts into the saturated (distance = 1) reading.
inline Aligned align_supports(const WeightedSample& a, const WeightedSample& b,
                              bool allow_disjoint = false) {
  if (a.dim() != b.dim())
    throw support_mismatch_error("samples have different dimensions");
  if (a.points.rows() == b.points.rows() && a.points == b.points)
    return {a.weights, b.weights};

  std::map<std::vector<double>, int> index;
  auto key_of = [&](const Mat& pts, int i) {
    std::vector<double> k(pts.cols());
    for (int j = 0; j < pts.cols(); ++j) k[j] = pts(i, j);
    return k;
  };
  int next = 0;
  std::vector<double> wa, wb;
  for (int i = 0; i < a.size(); ++i) {
    auto [it, fresh] = index.emplace(key_of(a.points, i), next);
    if (fresh) {
      ++next;
      wa.push_back(0);
      wb.push_back(0);
    }
    wa[it->second] += a.weights(i);
  }
  bool any_shared = false;
  for (int i = 0; i < b.size(); ++i) {
    auto [it, fresh] = index.emplace(key_of(b.points, i), next);
    if (fresh) {
      ++next;
      wa.push_back(0);
      wb.push_back(0);
    } else if (it->second < a.size() || wa[it->second] > 0) {
      any_shared = true;
    }
    wb[it->second] += b.weights(i);
  }
  if (!any_shared && !allow_disjoint && std::min(a.size(), b.size()) > 16)
    throw support_mismatch_error(
        "samples share no atom; supply a binning to compare continuous "
        "clouds");
  Aligned out;
  out.wa = Eigen::Map<Vec>(wa.data(), static_cast<int>(wa.size()));
  out.wb = Eigen::Map<Vec>(wb.data(), static_cast<int>(wb.size()));
  return out;
}

inline Aligned align(const WeightedSample& a, const WeightedSample& b,
                     const std::optional<Binning>& bin,
                     bool allow_disjoint = false) {
  if (bin)
    return align_supports(bin_sample(a, *bin), bin_sample(b, *bin),
                          allow_disjoint);
  return align_supports(a, b, allow_disjoint);
}

}  // namespace detail

// Total variation distance, convention in [0,1]: half the L1 mass difference.
inline double tv_distance(const WeightedSample& a, const WeightedSample& b,
                          const std::optional<Binning>& bin = std::nullopt) {
  auto al = detail::align(a, b, bin);
  return 0.5 * (al.wa - al.wb).cwiseAbs().sum();
}

// Le Cam distance: d_LC^2 = (1/2) sum (w_a - w_b)^2 / (w_a + w_b), 0/0
// dropped. Satisfies d_TV^2 <= d_LC^2 <= d_TV.
inline double lecam_distance(const WeightedSample& a, const WeightedSample& b,
                             const std::optional<Binning>& bin = std::nullopt,
                             bool allow_disjoint = false) {
  auto al = detail::align(a, b, bin, allow_disjoint);
  double s = 0;
  for (int i = 0; i < al.wa.size(); ++i) {
    double num = al.wa(i) - al.wb(i);
    double den = al.wa(i) + al.wb(i);
    if (den > 0) s += num * num / den;
  }
  return std::sqrt(0.5 * s);
}

// Relative entropy H(a || b); +infinity when a is not absolutely continuous
// with respect to b.
inline double relative_entropy(const WeightedSample& a, const WeightedSample& b,
                               const std::optional<Binning>& bin = std::nullopt) {
  auto al = detail::align(a, b, bin);
  double s = 0;
  for (int i = 0; i < al.wa.size(); ++i) {
    if (al.wa(i) <= 0) continue;  // 0 log 0 = 0
    if (al.wb(i) <= 0) return std::numeric_limits<double>::infinity();
    s += al.wa(i) * std::log(al.wa(i) / al.wb(i));
  }
  return s;
}

// sqrt of max over grid times of d_LC(mu_t, mu'_t)^2 + (p_t - p'_t)^2.
// Disjoint atomic supports saturate at d_LC = 1 here (a user-supplied
// initialization flow legitimately sits on foreign atoms).
inline double flow_distance(const MeasureFlow& f, const MeasureFlow& g) {
  if (f.times.size() != g.times.size() ||
      (f.times - g.times).cwiseAbs().maxCoeff() > 1e-12)
    throw grid_mismatch_error("flows live on different time grids");
  double worst = 0;
  for (int k = 0; k < f.times.size(); ++k) {
    double dl = lecam_distance(f.laws[k], g.laws[k], std::nullopt, true);
    double dp = f.survival(k) - g.survival(k);
    worst = std::max(worst, dl * dl + dp * dp);
  }
  return std::sqrt(worst);
}

// ---------------------------------------------------------------------------
// Fourier-Wasserstein norm ||zeta||_{-s}^2 = int (1+|xi|^2)^{-s} |Phi(zeta)|^2.
// For atomic measures this is exactly sum_ij w_i w_j k_{s,d}(x_i - x_j) with
// the Matern kernel k_{s,d}(v) = (2pi)^{-d/2} 2^{1-s}/Gamma(s) |v|^{s-d/2}
// K_{s-d/2}(|v|), so no frequency quadrature is involved.
// ---------------------------------------------------------------------------

struct FwKernel {
  int d = 1;
  double s = 1.0;
  double nu = 0.5;
  double pref = 0;  // prefactor of |v|^nu K_nu(|v|)
  double at_zero = 0;

  FwKernel(int dim, double order) : d(dim), s(order) {
    if (!(s > 0.5 * d))
      throw config_error("FW norm requires s > d/2");
    nu = s - 0.5 * d;
    const double pi = std::numbers::pi;
    pref = std::pow(2.0 * pi, -0.5 * d) * std::pow(2.0, 1.0 - s) /
           std::tgamma(s);
    at_zero = std::pow(2.0 * pi, -static_cast<double>(d)) *
              std::pow(pi, 0.5 * d) * std::tgamma(nu) / std::tgamma(s);
  }

  double operator()(double r) const {
    if (r < 1e-12) return at_zero;
    if (d == 1 && s == 1.0) return 0.5 * std::exp(-r);
    return pref * std::pow(r, nu) * std::cyl_bessel_k(nu, r);
  }
};

namespace detail {

struct SignedAtoms {
  Mat pts;
  Vec w;  // signed
};

inline SignedAtoms flatten(const SignedMeasureRepr& z) {
  SignedAtoms a;
  int np = z.pos.size(), nn = z.neg.size();
  a.pts.resize(np + nn, z.dim());
  a.w.resize(np + nn);
  a.pts.topRows(np) = z.pos.points;
  a.w.head(np) = z.pos.weights;
  a.pts.bottomRows(nn) = z.neg.points;
  a.w.tail(nn) = -z.neg.weights;
  return a;
}

}  // namespace detail

// Evaluator of the kernel field K(x) = sum_i w_i k(|x_i - x|) of a signed
// atom set. d=1, s=1 uses sorted prefix sums (exponential kernel splits), so
// building plus n evaluations costs O(n log n) instead of O(n^2).
class FwField {
public:
  FwField(Mat pts, Vec w, FwKernel ker)
      : ker_(ker), pts_(std::move(pts)), w_(std::move(w)) {
    fast_ = (ker_.d == 1 && ker_.s == 1.0 && pts_.rows() > 0);
    if (fast_) {
      center_ = 0.5 * (pts_.col(0).minCoeff() + pts_.col(0).maxCoeff());
      if (pts_.col(0).maxCoeff() - pts_.col(0).minCoeff() > 40.0)
        fast_ = false;  // exp() dynamic range would eat precision
    }
    if (fast_) build_fast();
  }

  FwField(const SignedMeasureRepr& z, FwKernel ker)
      : FwField(detail::flatten(z).pts, detail::flatten(z).w, ker) {}

  double eval(const Vec& x) const {
    if (fast_) return eval_fast(x(0));
    double s = 0;
    for (int i = 0; i < pts_.rows(); ++i)
      s += w_(i) * ker_((pts_.row(i).transpose() - x).norm());
    return s;
  }

  double eval1(double x) const {
    if (fast_) return eval_fast(x);
    double s = 0;
    for (int i = 0; i < pts_.rows(); ++i)
      s += w_(i) * ker_(std::abs(pts_(i, 0) - x));
    return s;
  }

  // sum_i w'_i K(x'_i): the FW inner product <this measure, (pts', w')>.
  double pair_sum(const Mat& pts2, const Vec& w2) const {
    double s = 0;
    for (int i = 0; i < pts2.rows(); ++i) {
      Vec x = pts2.row(i).transpose();
      s += w2(i) * eval(x);
    }
    return s;
  }

private:
  void build_fast() {
    const int n = static_cast<int>(pts_.rows());
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return pts_(a, 0) < pts_(b, 0); });
    xs_.resize(n);
    pre_.resize(n);
    suf_.resize(n);
    double acc = 0;
    for (int i = 0; i < n; ++i) {
      xs_[i] = pts_(order[i], 0);
      acc += w_(order[i]) * std::exp(xs_[i] - center_);
      pre_[i] = acc;
    }
    acc = 0;
    for (int i = n - 1; i >= 0; --i) {
      acc += w_(order[i]) * std::exp(center_ - xs_[i]);
      suf_[i] = acc;
    }
  }

  double eval_fast(double x) const {
    // 0.5 sum w_i e^{-|x_i - x|} via the two exponential branches
    auto it = std::upper_bound(xs_.begin(), xs_.end(), x);
    auto idx = static_cast<int>(it - xs_.begin());  // atoms with x_i <= x: [0, idx)
    double left = idx > 0 ? pre_[idx - 1] * std::exp(center_ - x) : 0.0;
    double right = idx < static_cast<int>(xs_.size())
                       ? suf_[idx] * std::exp(x - center_)
                       : 0.0;
    return 0.5 * (left + right);
  }

  FwKernel ker_;
  Mat pts_;
  Vec w_;
  bool fast_ = false;
  double center_ = 0;
  std::vector<double> xs_, pre_, suf_;
};

// Phi(zeta)(xi) = (2pi)^{-d/2} sum_i w_i e^{-i x_i . xi}, signed by part.
inline std::complex<double> fw_characteristic(const SignedMeasureRepr& z,
                                              const Vec& xi) {
  auto a = detail::flatten(z);
  std::complex<double> acc(0, 0);
  for (int i = 0; i < a.pts.rows(); ++i) {
    double phase = a.pts.row(i).dot(xi.transpose());
    acc += a.w(i) * std::exp(std::complex<double>(0.0, -phase));
  }
  return std::pow(2.0 * std::numbers::pi, -0.5 * xi.size()) * acc;
}

inline double fw_norm_sq(const SignedMeasureRepr& z, double s) {
  auto a = detail::flatten(z);
  FwKernel ker(z.dim(), s);
  FwField field(a.pts, a.w, ker);
  return std::max(0.0, field.pair_sum(a.pts, a.w));
}

// <zeta, eta>_{-s} = int (1+|xi|^2)^{-s} Re(Phi(zeta) conj(Phi(eta))) dxi.
inline double fw_inner(const SignedMeasureRepr& z, const SignedMeasureRepr& e,
                       double s) {
  auto az = detail::flatten(z);
  auto ae = detail::flatten(e);
  FwKernel ker(z.dim(), s);
  FwField field(az.pts, az.w, ker);
  return field.pair_sum(ae.pts, ae.w);
}

}  // namespace mkv
