#pragma once

#include <functional>
#include <span>
#include <vector>

#include "jst/tensor.hpp"

namespace jst {

/// One coordinate of a leaf tensor to perturb.
struct Coordinate {
  Tensor tensor;
  std::size_t index = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences. Error per coordinate is
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
GradCheckReport grad_check_coordinates(const std::function<Tensor()>& f,
                                       std::span<const Coordinate> coords, double eps = 1e-5);

/// Every coordinate of leaf `x`.
double grad_check(const std::function<Tensor()>& f, Tensor x, double eps = 1e-5);

}  // namespace jst
