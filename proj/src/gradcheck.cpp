#include "treetf/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace treetf {

namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("gradient_check: eps must lie in [1e-7, 1e-3]");
}

double scalar_of(const Tensor& y) {
  if (y.numel() != 1) throw GraphError("gradient_check: function output is not scalar, shape " + shape_str(y.shape()));
  return y[0];
}

double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace

double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor leaf = x.detach();
  leaf.set_requires_grad(true);
  return gradient_check([&]() { return f(leaf); }, std::vector<Tensor>{leaf}, eps);
}

double gradient_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps) {
  check_eps(eps);
  for (auto p : params) {
    p.zero_grad();
    p.set_requires_grad(true);
  }
  Tensor y = f();
  scalar_of(y);
  if (y.requires_grad()) y.backward();

  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  NoGradGuard guard;
  double worst = 0.0;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double orig = d[i];
      d[i] = orig + eps;
      const double fp = scalar_of(f());
      d[i] = orig - eps;
      const double fm = scalar_of(f());
      d[i] = orig;
      worst = std::max(worst, rel_error(analytic[pi][i], (fp - fm) / (2.0 * eps)));
    }
  }
  return worst;
}

}  // namespace treetf
