#include "mmml/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "mmml/errors.hpp"

namespace mmml {

GradCheckResult finite_diff_check(const std::function<Tensor()>& f, const std::vector<NamedTensor>& params,
                                  double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step h must be positive");

  auto params_copy = params;
  for (auto& [name, p] : params_copy) {
    if (!p.requires_grad()) throw ContractError("finite_diff_check: parameter '" + name + "' does not require grad");
    p.zero_grad();
  }

  Tensor root = f();
  if (!std::isfinite(root.item())) throw NumericError("finite_diff_check: non-finite value at base point");
  backward(root);

  GradCheckResult result;
  for (auto& [name, p] : params_copy) {
    const std::vector<double> analytic = p.grad();
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = f().item();
      values[i] = saved - h;
      const double down = f().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        throw NumericError("finite_diff_check: non-finite value probing '" + name + "'[" + std::to_string(i) + "]");
      }
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(analytic[i] - numeric) /
                         std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_parameter = name;
        result.worst_index = i;
      }
    }
    p.zero_grad();
  }
  return result;
}

}  // namespace mmml
