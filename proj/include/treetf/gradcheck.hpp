#pragma once

#include <functional>
#include <vector>

#include "treetf/tensor.hpp"

namespace treetf {

/// Compares the analytic gradient of a scalar function against central
/// finite differences (f(x+eps) - f(x-eps)) / 2eps at every coordinate.
/// Returns the worst relative error, using max(|analytic|, |numeric|, 1e-8)
/// as the denominator. Throws GraphError if f is not scalar-valued and
/// std::invalid_argument if eps is outside [1e-7, 1e-3].
double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

/// Same check for a closure over existing leaf tensors (e.g. model
/// parameters), which are perturbed in place and restored afterwards.
double gradient_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps = 1e-5);

}  // namespace treetf
