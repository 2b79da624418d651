#include <catch2/catch_amalgamated.hpp>

#include "mkv/measures.hpp"
#include "mkv/oracles.hpp"
#include "mkv/rng.hpp"

#include <cmath>
#include <complex>

using namespace mkv;

namespace {

WeightedSample random_measure(const RngStream& r, const Mat& atoms,
                              std::uint64_t id, bool allow_zero = true) {
  Vec w(atoms.rows());
  for (int i = 0; i < w.size(); ++i) {
    double u = r.uniform(id, i);
    w(i) = allow_zero && u < 0.15 ? 0.0 : u;
  }
  if (w.sum() <= 0) w(0) = 1.0;
  return WeightedSample::make(atoms, w, true);
}

Mat shared_atoms_1d(int n) {
  Mat a(n, 1);
  for (int i = 0; i < n; ++i) a(i, 0) = -2.0 + 4.0 * i / (n - 1.0);
  return a;
}

}  // namespace

TEST_CASE("tv distance on discrete measures") {
  auto mu = WeightedSample::atoms1d({0.0, 1.0}, {0.5, 0.5});
  auto nu = WeightedSample::atoms1d({0.0, 1.0}, {1.0, 0.0});
  auto mu2 = WeightedSample::atoms1d({0.0, 1.0}, {1.0, 0.0});
  auto nu2 = WeightedSample::atoms1d({0.0, 1.0}, {0.0, 1.0});

  CHECK(tv_distance(mu, mu) == 0.0);
  CHECK(tv_distance(mu2, nu2) == Catch::Approx(1.0));
  CHECK(tv_distance(mu, nu) == Catch::Approx(0.5));
}

TEST_CASE("lecam distance on discrete measures") {
  auto mu = WeightedSample::atoms1d({0.0, 1.0}, {0.5, 0.5});
  auto nu = WeightedSample::atoms1d({0.0, 1.0}, {1.0, 0.0});
  auto a = WeightedSample::atoms1d({0.0, 1.0}, {1.0, 0.0});
  auto b = WeightedSample::atoms1d({0.0, 1.0}, {0.0, 1.0});

  CHECK(lecam_distance(mu, mu) == 0.0);
  // (1/2)(1/1 + 1/1) = 1, sqrt = 1
  CHECK(lecam_distance(a, b) == Catch::Approx(1.0));
  // (1/2)(0.25/1.5 + 0.25/0.5) = 1/3
  CHECK(lecam_distance(mu, nu) == Catch::Approx(std::sqrt(1.0 / 3.0)));
}

TEST_CASE("relative entropy on discrete measures") {
  auto mu = WeightedSample::atoms1d({0.0, 1.0}, {1.0, 0.0});
  auto half = WeightedSample::atoms1d({0.0, 1.0}, {0.5, 0.5});

  CHECK(relative_entropy(half, half) == 0.0);
  CHECK(relative_entropy(mu, half) == Catch::Approx(std::log(2.0)));
  CHECK(std::isinf(relative_entropy(half, mu)));
}

TEST_CASE("support mismatch raised only for large disjoint clouds") {
  RngStream r(7, "test/clouds");
  Mat pa(32, 1), pb(32, 1);
  for (int i = 0; i < 32; ++i) {
    pa(i, 0) = r.normal(i, 0);
    pb(i, 0) = 10.0 + r.normal(i, 1);
  }
  auto a = WeightedSample::make(pa, Vec::Ones(32), true);
  auto b = WeightedSample::make(pb, Vec::Ones(32), true);
  CHECK_THROWS_AS(tv_distance(a, b), support_mismatch_error);

  Binning bin{Vec::Constant(1, -15.0), Vec::Constant(1, 15.0), 64};
  double d = tv_distance(a, b, bin);
  CHECK(d == Catch::Approx(1.0));  // far apart even after binning
  double dl = lecam_distance(a, b, bin);
  CHECK(dl <= 1.0 + 1e-12);
}

TEST_CASE("metric axioms and sandwich on random triples") {
  RngStream r(11, "test/metric_axioms");
  Mat atoms = shared_atoms_1d(8);
  double min_tri_tv = 0, min_tri_lc = 0, min_sandwich = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto a = random_measure(r, atoms, 3 * trial);
    auto b = random_measure(r, atoms, 3 * trial + 1);
    auto c = random_measure(r, atoms, 3 * trial + 2);

    double tab = tv_distance(a, b), tba = tv_distance(b, a);
    double lab = lecam_distance(a, b), lba = lecam_distance(b, a);
    REQUIRE(tab == tba);
    REQUIRE(lab == lba);
    REQUIRE(tab >= 0.0);
    REQUIRE(lab >= 0.0);
    min_tri_tv = std::min(min_tri_tv,
                          tv_distance(a, c) + tv_distance(c, b) - tab);
    min_tri_lc = std::min(min_tri_lc,
                          lecam_distance(a, c) + lecam_distance(c, b) - lab);
    min_sandwich = std::min({min_sandwich, lab * lab - tab * tab,
                             tab - lab * lab});
  }
  CHECK(min_tri_tv >= -1e-10);
  CHECK(min_tri_lc >= -1e-10);
  CHECK(min_sandwich >= -1e-12);
}

TEST_CASE("lecam pairing bound and Lipschitz lemma") {
  RngStream r(13, "test/pairing");
  Mat atoms = shared_atoms_1d(10);
  for (int trial = 0; trial < 500; ++trial) {
    auto mu = random_measure(r, atoms, 2 * trial);
    auto nu = random_measure(r, atoms, 2 * trial + 1);
    Vec phi(10);
    for (int i = 0; i < 10; ++i) phi(i) = 2.0 * r.uniform(9000 + trial, i) - 1.0;

    double pairing = std::abs(phi.dot(mu.weights - nu.weights));
    double mid_l2 = std::sqrt(
        (0.5 * (mu.weights + nu.weights)).dot(phi.cwiseProduct(phi)));
    double dlc = lecam_distance(mu, nu);
    REQUIRE(pairing <= 2.0 * mid_l2 * dlc + 1e-12);

    // u(m) = int phi dm with centered derivative; second moment bound C
    double C = phi.maxCoeff() - phi.minCoeff();
    double du = std::abs(phi.dot(mu.weights) - phi.dot(nu.weights));
    REQUIRE(du <= 4.0 * C * dlc + 1e-12);
  }
}

TEST_CASE("fw characteristic closed forms") {
  Vec xi1 = Vec::Constant(1, 3.0);
  auto zero = SignedMeasureRepr::difference(
      WeightedSample::atoms1d({0.0}, {1.0}),
      WeightedSample::atoms1d({0.0}, {1.0}));
  CHECK(std::abs(fw_characteristic(zero, xi1)) < 1e-15);

  SignedMeasureRepr d0;
  d0.pos = WeightedSample::atoms1d({0.0}, {1.0});
  d0.neg = WeightedSample::make(Mat::Zero(0, 1), Vec::Zero(0), false);
  double c = std::pow(2.0 * std::numbers::pi, -0.5);
  CHECK(std::abs(fw_characteristic(d0, xi1) - std::complex<double>(c, 0)) <
        1e-14);

  auto diff = SignedMeasureRepr::difference(
      WeightedSample::atoms1d({1.0}, {1.0}),
      WeightedSample::atoms1d({0.0}, {1.0}));
  Vec xipi = Vec::Constant(1, std::numbers::pi);
  CHECK(std::abs(fw_characteristic(diff, xipi) -
                 std::complex<double>(-2.0 * c, 0)) < 1e-12);
}

TEST_CASE("fw norm matches the dirac identity oracle") {
  // oracle: adaptive quadrature of (1/pi) int (1 - cos u xi)/(1+xi^2) dxi
  CHECK(oracle::fw_dirac_identity(1.0) ==
        Catch::Approx(0.6321205588).epsilon(1e-8));
  for (double u : {0.1, 0.5, 1.0, 2.0, 5.0}) {
    auto z = SignedMeasureRepr::difference(
        WeightedSample::atoms1d({u}, {1.0}),
        WeightedSample::atoms1d({0.0}, {1.0}));
    double ns = fw_norm_sq(z, 1.0);
    CHECK(ns == Catch::Approx(oracle::fw_dirac_identity(u)).margin(1e-9));
    CHECK(ns == Catch::Approx(1.0 - std::exp(-u)).margin(1e-9));
  }
  // homogeneity of degree two
  auto z = SignedMeasureRepr::difference(
      WeightedSample::atoms1d({1.0}, {1.0}),
      WeightedSample::atoms1d({0.0}, {1.0}), 0.37, 0.37);
  CHECK(fw_norm_sq(z, 1.0) ==
        Catch::Approx(0.37 * 0.37 * (1.0 - std::exp(-1.0))).margin(1e-12));
}

namespace {
// independent 2D oracle: ||delta_v - delta_0||^2 =
// (1/pi) int_0^inf (1+r^2)^{-s} r (1 - J0(r|v|)) dr
double fw_pair_2d_oracle(double dist, double s) {
  auto f = [&](double r) {
    return std::pow(1.0 + r * r, -s) * r * (1.0 - std::cyl_bessel_j(0.0, r * dist));
  };
  double total = 0, a = 0;
  const double A = 4096.0;
  for (double b : {2.0, 8.0, 32.0, 128.0, 512.0, A}) {
    total += oracle::detail::adaptive(
        f, a, b, 1e-11, std::max(8, static_cast<int>((b - a) * dist / 3.0)));
    a = b;
  }
  // tail of the non-oscillatory part: int_A^inf (1+r^2)^{-s} r dr
  total += std::pow(1.0 + A * A, 1.0 - s) / (2.0 * (s - 1.0));
  return total / std::numbers::pi;
}
}  // namespace

TEST_CASE("fw norm in two dimensions against a Bessel-J oracle") {
  for (double dist : {0.5, 1.5}) {
    Mat p1(1, 2), p0(1, 2);
    p1 << dist, 0.0;
    p0 << 0.0, 0.0;
    auto z = SignedMeasureRepr::difference(
        WeightedSample::make(p1, Vec::Ones(1), true),
        WeightedSample::make(p0, Vec::Ones(1), true));
    double s = 1.5;
    CHECK(fw_norm_sq(z, s) ==
          Catch::Approx(fw_pair_2d_oracle(dist, s)).epsilon(1e-6));
  }
}

TEST_CASE("fw norm triangle inequality on random signed measures") {
  RngStream r(17, "test/fw_triangle");
  for (double s : {1.0, 1.4}) {
    for (int trial = 0; trial < 200; ++trial) {
      auto atoms = [&](std::uint64_t id) {
        Mat p(3, 1);
        Vec wp(3), wn(3);
        Mat pn(3, 1);
        for (int i = 0; i < 3; ++i) {
          p(i, 0) = 4.0 * r.uniform(id, i) - 2.0;
          pn(i, 0) = 4.0 * r.uniform(id, 10 + i) - 2.0;
          wp(i) = r.uniform(id, 20 + i);
          wn(i) = r.uniform(id, 30 + i);
        }
        SignedMeasureRepr z;
        z.pos = WeightedSample::make(p, wp, false);
        z.neg = WeightedSample::make(pn, wn, false);
        return z;
      };
      auto a = atoms(100 * trial), b = atoms(100 * trial + 1);
      // a + b: concatenate parts
      SignedMeasureRepr sum;
      Mat pp(6, 1), nn(6, 1);
      Vec wp(6), wn(6);
      pp << a.pos.points, b.pos.points;
      nn << a.neg.points, b.neg.points;
      wp << a.pos.weights, b.pos.weights;
      wn << a.neg.weights, b.neg.weights;
      sum.pos = WeightedSample::make(pp, wp, false);
      sum.neg = WeightedSample::make(nn, wn, false);
      double na = std::sqrt(fw_norm_sq(a, s));
      double nb = std::sqrt(fw_norm_sq(b, s));
      double ns = std::sqrt(fw_norm_sq(sum, s));
      REQUIRE(ns <= na + nb + 1e-10);
    }
  }
}

TEST_CASE("fw field fast path agrees with direct summation") {
  RngStream r(23, "test/fw_field");
  int n = 50;
  Mat pts(n, 1);
  Vec w(n);
  for (int i = 0; i < n; ++i) {
    pts(i, 0) = 6.0 * r.uniform(1, i) - 3.0;
    w(i) = 2.0 * r.uniform(2, i) - 1.0;
  }
  FwKernel ker(1, 1.0);
  FwField field(pts, w, ker);
  for (double x : {-2.5, 0.0, 0.7, 3.1}) {
    double direct = 0;
    for (int i = 0; i < n; ++i) direct += w(i) * ker(std::abs(pts(i, 0) - x));
    CHECK(field.eval1(x) == Catch::Approx(direct).margin(1e-12));
  }
}

TEST_CASE("flow distance") {
  Mat atoms = shared_atoms_1d(2);
  auto mk_flow = [&](double p_mid, Vec w_mid) {
    MeasureFlow f;
    f.times = Vec::LinSpaced(3, 0.0, 1.0);
    f.survival = Vec::Ones(3);
    f.survival(1) = p_mid;
    f.survival(2) = p_mid;
    auto base = WeightedSample::make(atoms, Vec::Constant(2, 0.5), true);
    f.laws = {base, WeightedSample::make(atoms, std::move(w_mid), true), base};
    return f;
  };
  auto f1 = mk_flow(1.0, Vec::Constant(2, 0.5));
  CHECK(flow_distance(f1, f1) == 0.0);

  auto f2 = mk_flow(0.9, Vec::Constant(2, 0.5));
  f2.survival(2) = 1.0;
  CHECK(flow_distance(f1, f2) == Catch::Approx(0.1));

  // two-atom lecam example plus delta p = 0.1 at the same time
  Vec w(2);
  w << 1.0, 0.0;
  auto f3 = mk_flow(0.9, w);
  f3.survival(2) = 1.0;
  CHECK(flow_distance(f1, f3) == Catch::Approx(std::sqrt(1.0 / 3.0 + 0.01)));

  MeasureFlow g;
  g.times = Vec::LinSpaced(4, 0.0, 1.0);
  CHECK_THROWS_AS(flow_distance(f1, g), grid_mismatch_error);
}
