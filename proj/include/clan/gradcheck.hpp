#pragma once

#include <algorithm>
#include <cmath>
#include <functional>

#include "clan/tensor.hpp"

namespace clan {

/// Denominator floor of the relative error. Central differences on an O(1)
/// loss carry ~1e-11 of rounding noise at eps 1e-4, so gradient entries much
/// below 1e-6 cannot be resolved to 1e-5 relative by any backward rule.
inline constexpr double kRelErrorFloor = 1e-6;

struct FiniteDiffReport {
  double max_rel_error = 0;
  std::size_t kinks = 0;  // elements whose one-sided slopes disagree
};

/// Compares the autodiff gradient of f at x against central differences.
/// The error is the largest elementwise |a - n| / max(|a|, |n|, kRelErrorFloor). f must
/// be deterministic and scalar-valued; x is perturbed in place and restored.
///
/// An element counts as a kink when its forward and backward one-sided
/// slopes differ by more than 1e-3 relative: a ReLU or max switch lies
/// inside the stencil and the central difference is not a derivative there.
/// The test only uses f values, never the analytic gradient.
template <typename T>
FiniteDiffReport finite_diff_report(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, double eps) {
  const bool had = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tensor<T> loss = f(x);
    backward(loss);
  }
  const std::vector<T> analytic = x.grad();
  x.zero_grad();

  FiniteDiffReport report;
  {
    NoGradGuard no_grad;
    const double center = double(f(x).item());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const T orig = x[i];
      x[i] = orig + T(eps);
      const double up = double(f(x).item());
      x[i] = orig - T(eps);
      const double down = double(f(x).item());
      x[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = double(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), kRelErrorFloor});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(a - numeric) / denom);
      const double fwd = (up - center) / eps, bwd = (center - down) / eps;
      if (std::abs(fwd - bwd) > 1e-3 * std::max({1.0, std::abs(fwd), std::abs(bwd)})) ++report.kinks;
    }
  }
  x.set_requires_grad(had);
  return report;
}

template <typename T>
double finite_diff_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, Tensor<T> x, double eps) {
  return finite_diff_report(f, std::move(x), eps).max_rel_error;
}

}  // namespace clan
