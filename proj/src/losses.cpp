#include "idem/losses.hpp"

#include <stdexcept>

namespace idem {

void LossWeights::validate() const {
  for (double a : alpha)
    if (!(a >= 0.0)) throw std::invalid_argument("loss weights: alpha entries must be >= 0");
  if (!(lambda_idem >= 0.0)) throw std::invalid_argument("loss weights: lambda must be >= 0");
}

template <typename T>
Var<T> idempotent_loss(Graph<T>& g, const Var<T>& first, const Var<T>& second, Reduction reduction) {
  return ag::l1_distance(g, first, second, reduction);
}

template <typename T>
Var<T> sharp_loss(Graph<T>& g, const std::vector<Var<T>>& outputs, const Var<T>& target, const LossWeights& weights) {
  weights.validate();
  if (outputs.size() != weights.alpha.size())
    throw ShapeError("sharp_loss: " + std::to_string(outputs.size()) + " outputs but " +
                     std::to_string(weights.alpha.size()) + " alpha weights");
  std::vector<Var<T>> terms;
  std::vector<T> alphas;
  for (std::size_t j = 0; j < outputs.size(); ++j) {
    terms.push_back(ag::l1_distance(g, outputs[j], target, weights.reduction));
    alphas.push_back(static_cast<T>(weights.alpha[j]));
  }
  return ag::weighted_sum(g, terms, alphas);
}

template <typename T>
LossVars<T> total_loss(Graph<T>& g, const std::vector<Var<T>>& outputs, const Var<T>& target,
                       const LossWeights& weights) {
  weights.validate();
  if (weights.lambda_idem > 0.0 && outputs.size() < 2)
    throw std::invalid_argument("total_loss: the idempotent term needs at least two outputs");
  LossVars<T> out;
  out.sharp = sharp_loss(g, outputs, target, weights);
  out.idem = outputs.size() >= 2 ? idempotent_loss(g, outputs[0], outputs[1], weights.reduction)
                                 : g.constant(Tensor<T>::scalar(T(0)));
  out.total = ag::weighted_sum(g, {out.idem, out.sharp}, {static_cast<T>(weights.lambda_idem), T(1)});
  return out;
}

template <typename T>
T idempotent_loss(const Tensor<T>& first, const Tensor<T>& second, Reduction reduction) {
  Graph<T> g(false);
  return idempotent_loss(g, g.constant(first), g.constant(second), reduction)->value.item();
}

template <typename T>
T sharp_loss(std::span<const Tensor<T>> outputs, const Tensor<T>& target, const LossWeights& weights) {
  Graph<T> g(false);
  std::vector<Var<T>> vars;
  for (const auto& o : outputs) vars.push_back(g.constant(o));
  return sharp_loss(g, vars, g.constant(target), weights)->value.item();
}

template <typename T>
LossValue<T> total_loss(std::span<const Tensor<T>> outputs, const Tensor<T>& target, const LossWeights& weights) {
  Graph<T> g(false);
  std::vector<Var<T>> vars;
  for (const auto& o : outputs) vars.push_back(g.constant(o));
  const auto l = total_loss(g, vars, g.constant(target), weights);
  return {l.total->value.item(), l.idem->value.item(), l.sharp->value.item()};
}

#define IDEM_INSTANTIATE(T)                                                                                 \
  template T idempotent_loss(const Tensor<T>&, const Tensor<T>&, Reduction);                                \
  template T sharp_loss(std::span<const Tensor<T>>, const Tensor<T>&, const LossWeights&);                  \
  template LossValue<T> total_loss(std::span<const Tensor<T>>, const Tensor<T>&, const LossWeights&);       \
  template Var<T> idempotent_loss(Graph<T>&, const Var<T>&, const Var<T>&, Reduction);                      \
  template Var<T> sharp_loss(Graph<T>&, const std::vector<Var<T>>&, const Var<T>&, const LossWeights&);     \
  template LossVars<T> total_loss(Graph<T>&, const std::vector<Var<T>>&, const Var<T>&, const LossWeights&);

IDEM_INSTANTIATE(float)
IDEM_INSTANTIATE(double)
#undef IDEM_INSTANTIATE

}  // namespace idem
