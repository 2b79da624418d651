#pragma once

#include "mkv/common.hpp"

namespace mkv {

// Monomial basis in the current state up to a total degree (default 2).
// Degree 2 spans linear-quadratic value functions exactly.
struct PolyBasis {
  int dim = 1;
  int degree = 2;

  int size() const {
    // C(dim + degree, degree)
    long long n = 1;
    for (int i = 1; i <= degree; ++i) n = n * (dim + i) / i;
    return static_cast<int>(n);
  }

  template <class Out>
  void eval(const Vec& x, Out&& out) const {
    int idx = 0;
    out(idx++) = 1.0;
    if (degree >= 1)
      for (int i = 0; i < dim; ++i) out(idx++) = x(i);
    if (degree >= 2)
      for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j) out(idx++) = x(i) * x(j);
    if (degree >= 3)
      for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j)
          for (int k = j; k < dim; ++k) out(idx++) = x(i) * x(j) * x(k);
    if (degree > 3) throw config_error("basis degree > 3 not supported");
  }

  Eigen::RowVectorXd eval(const Vec& x) const {
    Eigen::RowVectorXd row(size());
    eval(x, row);
    return row;
  }
};

// Weighted ridge least squares sharing one factorization across several
// targets. The ridge escalates once when the Gram condition number exceeds
// 1e12; a second failure is a regression error.
class WeightedRidge {
public:
  WeightedRidge(const Mat& design, const Vec& weights, double ridge_scale)
      : design_(design), weights_(weights) {
    const int B = static_cast<int>(design.cols());
    Mat gram = design.transpose() * weights.asDiagonal() * design;
    double tr = gram.trace();
    double lam = ridge_scale * (tr > 0 ? tr / B : 1.0);
    // the intercept column stays unpenalized: constant targets fit exactly
    Mat pen = Mat::Identity(B, B);
    pen(0, 0) = 0.0;
    for (int attempt = 0; attempt < 3; ++attempt) {
      es_.compute(gram + lam * pen);
      double lo = es_.eigenvalues().minCoeff();
      double hi = es_.eigenvalues().maxCoeff();
      cond_ = lo > 0 ? hi / lo : std::numeric_limits<double>::infinity();
      if (cond_ < 1e12) return;
      lam *= 1e4;
    }
    throw regression_error("regression Gram matrix condition number > 1e12");
  }

  Vec solve(const Vec& target) const {
    Vec rhs = design_.transpose() * weights_.cwiseProduct(target);
    return es_.eigenvectors() *
           (es_.eigenvalues().cwiseInverse().asDiagonal() *
            (es_.eigenvectors().transpose() * rhs));
  }

  Vec fitted(const Vec& coeffs) const { return design_ * coeffs; }
  double condition_number() const { return cond_; }

  // Weighted R^2 of the fit against a target.
  double r_squared(const Vec& target, const Vec& fit) const {
    double wsum = weights_.sum();
    double mean = weights_.dot(target) / wsum;
    double ss_tot = weights_.dot((target.array() - mean).square().matrix());
    double ss_res = weights_.dot((target - fit).array().square().matrix());
    return ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  }

private:
  const Mat& design_;
  const Vec& weights_;
  Eigen::SelfAdjointEigenSolver<Mat> es_;
  double cond_ = 0;
};

inline Vec ridge_solve(const Mat& design, const Vec& weights, const Vec& target,
                       double ridge_scale, double* cond = nullptr) {
  WeightedRidge wr(design, weights, ridge_scale);
  if (cond) *cond = wr.condition_number();
  return wr.solve(target);
}

}  // namespace mkv
