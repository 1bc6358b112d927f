#include "jst/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace jst {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  NoGradGuard guard;
  const double v = f().item();
  if (!std::isfinite(v)) throw Error("grad_check: function value is not finite");
  return v;
}

}  // namespace

GradCheckReport grad_check_coordinates(const std::function<Tensor()>& f,
                                       std::span<const Coordinate> coords, double eps) {
  for (const auto& c : coords) {
    if (!c.tensor.node()->is_leaf()) throw Error("grad_check: coordinates must belong to leaves");
    const_cast<Tensor&>(c.tensor).zero_grad();
  }
  Tensor root = f();
  if (!std::isfinite(root.item())) throw Error("grad_check: function value is not finite");
  root.backward();

  GradCheckReport report;
  for (std::size_t i = 0; i < coords.size(); ++i) {
    Tensor t = coords[i].tensor;
    const std::size_t idx = coords[i].index;
    const double analytic = t.has_grad() ? t.grad()[idx] : 0.0;
    auto data = t.mutable_data();
    const double saved = data[idx];
    data[idx] = saved + eps;
    const double plus = eval_scalar(f);
    data[idx] = saved - eps;
    const double minus = eval_scalar(f);
    data[idx] = saved;
    const double numeric = (plus - minus) / (2.0 * eps);
    const double err = std::abs(analytic - numeric) /
                       std::max({1.0, std::abs(analytic), std::abs(numeric)});
    report.analytic.push_back(analytic);
    report.numeric.push_back(numeric);
    if (i == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst = i;
    }
  }
  return report;
}

double grad_check(const std::function<Tensor()>& f, Tensor x, double eps) {
  std::vector<Coordinate> coords;
  coords.reserve(x.numel());
  for (std::size_t i = 0; i < x.numel(); ++i) coords.push_back({x, i});
  return grad_check_coordinates(f, coords, eps).max_rel_error;
}

}  // namespace jst
