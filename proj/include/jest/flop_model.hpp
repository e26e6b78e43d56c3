#pragma once

// Per-example training cost, in units of one learner forward pass F.
//
//   IID         3F
//   JEST        3F + F*B/b - F = F(2 + B/b)       (scoring pass reused for training)
//   Flexi-JEST  3F((1-l) + l*A) + A*F*B/b          (approximate scoring, l = 0.5 by default)
//
// with B/b = 1/(1-f). Reference-model scoring is treated as cached unless
// requested, in which case F*B/b is added.

#include <cmath>
#include <string>
#include <string_view>
#include <utility>

#include "jest/core/errors.hpp"

namespace jest::flops {

enum class Method { iid, jest, flexi_jest };

inline Method parse_method(std::string_view s) {
  if (s == "iid" || s == "iid_baseline") return Method::iid;
  if (s == "jest") return Method::jest;
  if (s == "flexi_jest" || s == "flexi-jest") return Method::flexi_jest;
  throw ValueError("unknown cost scenario: " + std::string(s));
}

namespace detail {

inline void check_forward_cost(double F) {
  if (!(F > 0.0) || !std::isfinite(F)) throw ValueError("flop model: forward cost F must be positive");
}

inline double super_to_sub(double f) {
  if (!(f >= 0.0 && f < 1.0)) throw ValueError("flop model: filter ratio must lie in [0, 1)");
  return 1.0 / (1.0 - f);
}

inline void check_approx(double A) {
  if (!(A > 0.0 && A <= 1.0)) throw ValueError("flop model: approximation factor must lie in (0, 1]");
}

inline void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ValueError("flop model: approximate fraction must lie in [0, 1]");
}

}  // namespace detail

inline double cost_iid(double F = 1.0) {
  detail::check_forward_cost(F);
  return 3.0 * F;
}

inline double cost_jest(double f, double F = 1.0) {
  detail::check_forward_cost(F);
  return F * (2.0 + detail::super_to_sub(f));
}

inline double ratio_jest(double f) { return cost_jest(f) / cost_iid(); }

inline double cost_flexi(double f, double A, double F = 1.0, double lambda = 0.5) {
  detail::check_forward_cost(F);
  detail::check_approx(A);
  detail::check_lambda(lambda);
  return 3.0 * F * ((1.0 - lambda) + lambda * A) + A * F * detail::super_to_sub(f);
}

inline double ratio_flexi(double f, double A, double lambda = 0.5) { return cost_flexi(f, A, 1.0, lambda) / cost_iid(); }

/// Cost of scoring the super-batch with an uncached reference model.
inline double reference_scoring_cost(double f, double F = 1.0) {
  detail::check_forward_cost(F);
  return F * detail::super_to_sub(f);
}

/// Number of examples that keeps total compute equal to `base_examples` when a
/// fraction lambda of each batch runs at relative cost A.
inline double iso_flop_budget(double base_examples, double lambda, double A = 0.25) {
  detail::check_lambda(lambda);
  detail::check_approx(A);
  return base_examples / (A * lambda + 1.0 - lambda);
}

/// (FLOPs, wall-clock) fraction of a 50:50 multi-resolution batch relative to
/// full-resolution training.
inline std::pair<double, double> multires_train_cost_fraction(double A_flops = 0.28, double A_time = 1.0 / 3.0) {
  detail::check_approx(A_flops);
  detail::check_approx(A_time);
  return {0.5 + 0.5 * A_flops, 0.5 + 0.5 * A_time};
}

/// Cost accounting for one training configuration.
struct FlopModel {
  double F = 1.0;
  std::size_t B = 1;
  std::size_t b = 1;
  double A = 1.0;
  double lambda = 0.0;
  bool include_reference_scoring = false;

  void validate() const {
    detail::check_forward_cost(F);
    detail::check_approx(A);
    detail::check_lambda(lambda);
    if (b < 1 || b > B) throw ValueError("FlopModel: need 1 <= b <= B");
  }

  double filter_ratio() const { return 1.0 - static_cast<double>(b) / static_cast<double>(B); }

  /// Cost per trained example.
  double per_example(Method m) const {
    validate();
    const double f = filter_ratio();
    double c = 0.0;
    switch (m) {
      case Method::iid: return cost_iid(F);
      case Method::jest: c = cost_jest(f, F); break;
      case Method::flexi_jest: c = cost_flexi(f, A, F, lambda); break;
    }
    if (include_reference_scoring) c += reference_scoring_cost(f, F);
    return c;
  }

  double per_step(Method m) const { return per_example(m) * static_cast<double>(b); }

  /// Cumulative cost after `steps` updates (multiplied, not accumulated).
  double cumulative(Method m, std::size_t steps) const { return per_step(m) * static_cast<double>(steps); }
};

}  // namespace jest::flops
