#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "alea/tensor.hpp"

namespace alea {

struct GradCheckOptions {
  double eps = 1e-3;
  // Coordinates checked per parameter; every coordinate when the tensor is
  // smaller than this.
  int coords_per_param = 24;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
};

// Compares analytic gradients against central differences
// (f(p+eps) - f(p-eps)) / (2 eps); relative error uses
// max(|analytic|, |numeric|, 1e-6) as denominator.
template <typename Scalar>
GradCheckResult grad_check(const std::function<Tensor<Scalar>()>& f,
                           std::span<Tensor<Scalar>> params, GradCheckOptions options = {}) {
  for (auto& p : params) p.clear_grad();
  f().backward();
  std::vector<MatrixX<Scalar>> analytic;
  for (auto& p : params) {
    analytic.push_back(p.has_grad() ? p.grad() : MatrixX<Scalar>::Zero(p.rows(), p.cols()));
  }

  std::mt19937_64 rng(options.seed);
  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& value = params[i].mutable_value();
    std::vector<Index> coords(static_cast<std::size_t>(value.size()));
    std::iota(coords.begin(), coords.end(), Index{0});
    if (static_cast<Index>(coords.size()) > options.coords_per_param) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(options.coords_per_param));
    }
    for (Index c : coords) {
      Scalar& x = value.data()[c];
      const Scalar saved = x;
      x = saved + static_cast<Scalar>(options.eps);
      const double up = static_cast<double>(f().item());
      x = saved - static_cast<Scalar>(options.eps);
      const double down = static_cast<double>(f().item());
      x = saved;
      const double numeric = (up - down) / (2.0 * options.eps);
      const double a = static_cast<double>(analytic[i].data()[c]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.n_checked;
    }
  }
  return result;
}

}  // namespace alea
