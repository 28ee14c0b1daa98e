// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "gerlab/errors.hpp"
#include "gerlab/tensor.hpp"

namespace gerlab {

namespace detail {

inline double fd_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

inline void check_finite(double v, const char* where) {
  if (!std::isfinite(v))
    throw NumericError(std::string("finite_difference_check: non-finite "
                                   "value in ") +
                       where);
}

}  // namespace detail

// Central-difference verification of reverse-mode gradients w.r.t. a set of
// parameters. `f` must rebuild its graph from the current parameter values on
// every call. For large parameters, `max_coords` evenly spaced coordinates
// per parameter are probed (0 = all). Returns the max relative error
// |analytic - numeric| / max(1, |analytic|).
inline double finite_difference_check_params(
    const std::function<Tensor()>& f, const std::vector<Tensor>& params,
    double h, std::size_t max_coords = 0) {
  if (h <= 0.0) throw ContractError("finite_difference_check: h must be > 0");
  for (const Tensor& p : params) p.data_ptr()->grad.clear();

  std::vector<std::vector<double>> analytic;
  {
    GradTape tape;
    Tensor loss = f();
    detail::check_finite(loss.item(), "loss");
    tape.backward(loss);
    for (const Tensor& p : params) {
      auto g = p.grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }

  double max_err = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    const std::size_t n = p.numel();
    std::size_t stride = 1;
    if (max_coords > 0 && n > max_coords) stride = n / max_coords;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = p.at(i);
      p.at(i) = saved + h;
      const double fp = f().item();
      p.at(i) = saved - h;
      const double fm = f().item();
      p.at(i) = saved;
      detail::check_finite(fp, "f(x+h)");
      detail::check_finite(fm, "f(x-h)");
      const double numeric = (fp - fm) / (2.0 * h);
      detail::check_finite(analytic[pi][i], "analytic gradient");
      max_err = std::max(max_err,
                         detail::fd_relative_error(analytic[pi][i], numeric));
    }
  }
  return max_err;
}

// Single-input form: max relative error of d f / d x at x.
inline double finite_difference_check(
    const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  x.set_requires_grad();
  return finite_difference_check_params([&]() { return f(x); }, {x}, h);
}

}  // namespace gerlab
