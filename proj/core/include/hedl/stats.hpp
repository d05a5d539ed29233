#pragma once

#include <span>
#include <string>

namespace hedl {

/// Compensated (Kahan) summation: order-stable reduction for metric means.
double kahan_sum(std::span<const double> xs);
double kahan_mean(std::span<const double> xs);

/// Regularized incomplete beta I_x(a, b) by Lentz continued fraction.
double regularized_incomplete_beta(double a, double b, double x);

/// Two-sided p-value of Student's t with df degrees of freedom:
/// p = I_{df/(df+t²)}(df/2, 1/2).
double t_two_sided_p(double t, double df);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  bool degenerate = false;  // both variances zero: exact-equality fast path
};

/// Two-sample Welch t-test (unequal variances), two-sided p.
WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace hedl
