#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mmml/tensor.hpp"

namespace mmml {

using NamedTensor = std::pair<std::string, Tensor>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_parameter;  // empty when every coordinate agrees exactly
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

/// Compares backward() against central differences for every coordinate of
/// every parameter. `f` must rebuild its graph from the current parameter
/// values on each call and return a scalar tensor.
///
/// The per-coordinate error is |analytic - numeric| / max(1, |analytic|, |numeric|).
/// Parameter gradients are cleared before and after the check.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                                  double h = 1e-5);

}  // namespace mmml
