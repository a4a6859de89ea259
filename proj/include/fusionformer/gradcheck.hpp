#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fusionformer/tensor.hpp"

namespace ff {

using NamedTensor = std::pair<std::string, Tensor>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // name of the offending tensor (or op)
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
};

// Compares backward() against central differences on every coordinate of
// `leaves`. Error per coordinate is |analytic - fd| / max(1, |fd|).
// `loss` must be deterministic; two evaluations at the base point must agree
// bit for bit or NumericError is thrown. Leaves are restored on return.
GradCheckResult finite_diff_check(const std::function<Tensor()>& loss,
                                  const std::vector<NamedTensor>& leaves, double h);

// Single-input convenience form: f(x) -> scalar.
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h);

// Runs the check over every differentiable primitive on random inputs and
// returns one result per op, `worst` holding the op name.
std::vector<GradCheckResult> check_primitive_ops(std::uint64_t seed, double h);

}  // namespace ff
