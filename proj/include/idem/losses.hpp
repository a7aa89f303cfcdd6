#pragma once

#include <span>
#include <vector>

#include "idem/autograd.hpp"
#include "idem/tensor.hpp"

namespace idem {

/// Per-pass sharp-loss weights and the idempotent-term weight.
struct LossWeights {
  std::vector<double> alpha{1.0, 1.0};
  double lambda_idem = 0.1;
  Reduction reduction = Reduction::Mean;

  void validate() const;
};

template <typename T>
struct LossValue {
  T total = 0, idem = 0, sharp = 0;
};

template <typename T>
struct LossVars {
  Var<T> total, idem, sharp;
};

/// L1 distance between the first and second deblurring outputs.
template <typename T>
T idempotent_loss(const Tensor<T>& first, const Tensor<T>& second, Reduction reduction = Reduction::Mean);

/// sum_j alpha_j * L1(outputs[j], target)
template <typename T>
T sharp_loss(std::span<const Tensor<T>> outputs, const Tensor<T>& target, const LossWeights& weights);

/// lambda * idempotent(outputs[0], outputs[1]) + sharp(outputs, target).
template <typename T>
LossValue<T> total_loss(std::span<const Tensor<T>> outputs, const Tensor<T>& target, const LossWeights& weights);

template <typename T>
Var<T> idempotent_loss(Graph<T>& g, const Var<T>& first, const Var<T>& second, Reduction reduction);
template <typename T>
Var<T> sharp_loss(Graph<T>& g, const std::vector<Var<T>>& outputs, const Var<T>& target, const LossWeights& weights);
template <typename T>
LossVars<T> total_loss(Graph<T>& g, const std::vector<Var<T>>& outputs, const Var<T>& target,
                       const LossWeights& weights);

}  // namespace idem
