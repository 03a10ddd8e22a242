#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "csireid/rng.hpp"
#include "csireid/tensor.hpp"

namespace csireid::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scale = 1.0) {
  std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.normal(0.0, scale);
  return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

/// Fixed random projection to a scalar so finite differences see every
/// output coordinate.
inline Tensor scalarize(const Tensor& t, Rng& rng) {
  std::vector<double> w(static_cast<std::size_t>(t.numel()));
  for (auto& v : w) v = rng.normal(0.0, 1.0);
  Tensor weights = Tensor::from_data(t.shape(), std::move(w));
  return ops::sum_all(ops::mul(t, weights));
}

/// Central finite differences against reverse-mode gradients. The builder
/// must re-run the computation from the leaves' current values and return
/// a scalar tensor. Returns the max relative error over all leaf entries.
inline double max_grad_rel_error(std::vector<Tensor> leaves,
                                 const std::function<Tensor()>& build, double eps = 1e-5) {
  Tensor loss = build();
  for (auto& leaf : leaves) leaf.zero_grad();
  loss.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& leaf : leaves) analytic.push_back(leaf.grad());

  double max_err = 0.0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    auto& values = leaves[l].values_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + eps;
      const double up = build().item();
      values[i] = saved - eps;
      const double down = build().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[l][i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      max_err = std::max(max_err, err);
    }
  }
  return max_err;
}

}  // namespace csireid::testing
