#include "hedl/stats.hpp"

#include <cmath>
#include <limits>

#include "hedl/errors.hpp"

namespace hedl {

double kahan_sum(std::span<const double> xs) {
  double sum = 0.0, c = 0.0;
  for (double x : xs) {
    const double y = x - c;
    const double t = sum + y;
    c = (t - sum) - y;
    sum = t;
  }
  return sum;
}

double kahan_mean(std::span<const double> xs) {
  if (xs.empty()) throw ContractError("mean of empty sample");
  return kahan_sum(xs) / static_cast<double>(xs.size());
}

namespace {

// continued fraction for I_x(a,b), modified Lentz
double betacf(double a, double b, double x) {
  constexpr int kMaxIter = 300;
  constexpr double kEps = 3e-16;
  constexpr double kFpMin = 1e-300;

  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kFpMin) d = kFpMin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const int m2 = 2 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kFpMin) d = kFpMin;
    c = 1.0 + aa / c;
    if (std::abs(c) < kFpMin) c = kFpMin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::abs(del - 1.0) < kEps) return h;
  }
  throw ContractError("incomplete beta: continued fraction did not converge");
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw ContractError("incomplete beta: a, b must be positive");
  if (x < 0.0 || x > 1.0) throw ContractError("incomplete beta: x outside [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                          a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(ln_front);
  if (x < (a + 1.0) / (a + b + 2.0)) {
    return front * betacf(a, b, x) / a;
  }
  return 1.0 - front * betacf(b, a, 1.0 - x) / b;  // symmetry I_x(a,b) = 1 - I_{1-x}(b,a)
}

double t_two_sided_p(double t, double df) {
  if (df <= 0.0) throw ContractError("t-test: df must be positive");
  if (!std::isfinite(t)) return 0.0;
  const double x = df / (df + t * t);
  return regularized_incomplete_beta(df / 2.0, 0.5, x);
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) {
    throw ContractError("welch_t_test: both samples need >= 2 observations");
  }
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double ma = kahan_mean(a);
  const double mb = kahan_mean(b);

  double va = 0.0, vb = 0.0;
  for (double x : a) va += (x - ma) * (x - ma);
  for (double x : b) vb += (x - mb) * (x - mb);
  va /= (na - 1.0);  // sample variance
  vb /= (nb - 1.0);

  WelchResult res;
  const double se2 = va / na + vb / nb;
  if (se2 == 0.0) {
    res.degenerate = true;
    res.t = (ma == mb) ? 0.0 : std::numeric_limits<double>::infinity();
    res.df = na + nb - 2.0;
    res.p = (ma == mb) ? 1.0 : 0.0;
    return res;
  }
  res.t = (ma - mb) / std::sqrt(se2);
  res.df = se2 * se2 /
           ((va / na) * (va / na) / (na - 1.0) + (vb / nb) * (vb / nb) / (nb - 1.0));
  res.p = t_two_sided_p(res.t, res.df);
  return res;
}

}  // namespace hedl
