#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "alea/tensor.hpp"

namespace alea {

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW-style)
};

template <typename Scalar>
struct AdamState {
  AdamOptions options;
  std::int64_t step = 0;
  std::vector<MatrixX<Scalar>> first_moment;
  std::vector<MatrixX<Scalar>> second_moment;
};

template <typename Scalar>
AdamState<Scalar> make_adam_state(std::span<const Tensor<Scalar>> params, AdamOptions options) {
  AdamState<Scalar> state;
  state.options = options;
  for (const auto& p : params) {
    state.first_moment.push_back(MatrixX<Scalar>::Zero(p.rows(), p.cols()));
    state.second_moment.push_back(MatrixX<Scalar>::Zero(p.rows(), p.cols()));
  }
  return state;
}

// One bias-corrected Adam update using each parameter's accumulated grad
// (a parameter without a grad is treated as having a zero gradient).
template <typename Scalar>
void adam_step(std::span<Tensor<Scalar>> params, AdamState<Scalar>& state) {
  require(params.size() == state.first_moment.size(), ErrorKind::kDimension,
          "adam_step: parameter count does not match optimizer state");
  const auto& o = state.options;
  ++state.step;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    require(m.rows() == p.rows() && m.cols() == p.cols(), ErrorKind::kDimension,
            "adam_step: moment shape does not match parameter");
    auto& value = p.mutable_value();
    if (o.weight_decay != 0.0) value *= static_cast<Scalar>(1.0 - o.lr * o.weight_decay);
    if (!p.has_grad()) {
      m *= static_cast<Scalar>(o.beta1);
      v *= static_cast<Scalar>(o.beta2);
    } else {
      const auto& g = p.grad();
      m = static_cast<Scalar>(o.beta1) * m + static_cast<Scalar>(1.0 - o.beta1) * g;
      v = static_cast<Scalar>(o.beta2) * v + static_cast<Scalar>(1.0 - o.beta2) * g.cwiseProduct(g);
    }
    const auto m_hat = m.array() / static_cast<Scalar>(bc1);
    const auto v_hat = v.array() / static_cast<Scalar>(bc2);
    value.array() -= static_cast<Scalar>(o.lr) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(o.eps));
  }
}

}  // namespace alea
