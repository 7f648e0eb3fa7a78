#pragma once

#include "outfitlab/error.hpp"
#include "outfitlab/tensor.hpp"

namespace outfitlab::diff {

// Classical momentum update:
//   v <- momentum * v + g
//   p <- p - lr * v
// Raises DivergenceError on any non-finite gradient so a training loop
// stops at the step that went bad instead of polluting the parameters.
template <class Real>
void sgd_momentum_step(Tensor<Real>& param, Tensor<Real>& velocity, const Tensor<Real>& grad,
                       Real lr, Real momentum) {
  if (!param.same_shape(grad))
    throw DimensionError("sgd_momentum_step: gradient shape " + grad.shape_str() +
                         " does not match parameter " + param.shape_str());
  if (velocity.data.empty()) velocity = Tensor<Real>(param.rows, param.cols);
  if (!param.same_shape(velocity))
    throw DimensionError("sgd_momentum_step: velocity shape " + velocity.shape_str() +
                         " does not match parameter " + param.shape_str());
  if (!grad.all_finite()) throw DivergenceError("sgd_momentum_step: non-finite gradient");
  for (std::size_t i = 0; i < param.data.size(); ++i) {
    velocity.data[i] = momentum * velocity.data[i] + grad.data[i];
    param.data[i] -= lr * velocity.data[i];
  }
}

}  // namespace outfitlab::diff
