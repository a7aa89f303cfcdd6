#pragma once

#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "idem/tensor.hpp"

namespace idem {

/// A value in the computation graph plus its accumulated gradient.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  std::function<void(const Tensor<T>& grad_out)> backward;

  void accumulate(const Tensor<T>& g) {
    if (grad.empty()) grad = g;
    else grad += g;
  }
  void accumulate(Tensor<T>&& g) {
    if (grad.empty()) grad = std::move(g);
    else grad += g;
  }
  /// Gradient buffer, zero-initialised on first use (for in-place kernels).
  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
using Var = std::shared_ptr<Node<T>>;

/// Reverse-mode tape. Operations record a closure only when recording is on
/// and at least one input needs a gradient, so inference runs keep no
/// intermediate state alive.
template <typename T>
class Graph {
 public:
  using Backward = std::function<void(const Tensor<T>&)>;

  explicit Graph(bool record = true) : record_(record) {}

  bool recording() const { return record_; }
  std::size_t tape_size() const { return tape_.size(); }

  Var<T> constant(Tensor<T> v) const {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return n;
  }

  Var<T> parameter(Tensor<T> v) {
    auto n = constant(std::move(v));
    n->requires_grad = record_;
    return n;
  }

  /// Wrap an op result. `make_backward(out_node)` is only invoked if the node
  /// joins the tape; the returned closure may keep a pointer to out_node.value.
  template <typename MakeBackward>
  Var<T> record(Tensor<T> v, std::initializer_list<const Var<T>*> parents, MakeBackward&& make_backward) {
    auto n = constant(std::move(v));
    if (!record_) return n;
    for (const Var<T>* p : parents) {
      if ((*p)->requires_grad) {
        n->requires_grad = true;
        break;
      }
    }
    if (!n->requires_grad) return n;
    n->backward = make_backward(static_cast<const Node<T>&>(*n));
    tape_.push_back(n);
    return n;
  }

  Var<T> record_many(Tensor<T> v, const std::vector<Var<T>>& parents, Backward backward) {
    auto n = constant(std::move(v));
    if (!record_) return n;
    for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    if (!n->requires_grad) return n;
    n->backward = std::move(backward);
    tape_.push_back(n);
    return n;
  }

  /// Seeds d(root)/d(root) = 1 and walks the tape in reverse creation order.
  void backward(const Var<T>& root) {
    if (root->value.size() != 1) throw ShapeError("backward: root must be a scalar");
    root->accumulate(Tensor<T>::scalar(T(1)));
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      Node<T>& n = **it;
      if (n.grad.empty() || !n.backward) continue;
      n.backward(n.grad);
    }
    tape_.clear();
  }

 private:
  bool record_;
  std::vector<Var<T>> tape_;
};

enum class Reduction { Mean, Sum };

namespace ag {

template <typename T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride = 1);
template <typename T>
Var<T> conv_transpose2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
template <typename T>
Var<T> relu(Graph<T>& g, const Var<T>& x);
template <typename T>
Var<T> sigmoid(Graph<T>& g, const Var<T>& x);
template <typename T>
Var<T> tanh(Graph<T>& g, const Var<T>& x);
template <typename T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(Graph<T>& g, const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b);
/// (1 - z) * a + z * b, elementwise.
template <typename T>
Var<T> lerp(Graph<T>& g, const Var<T>& a, const Var<T>& b, const Var<T>& z);
template <typename T>
Var<T> concat_channels(Graph<T>& g, const std::vector<Var<T>>& parts);
/// L1 distance; subgradient of |0| is 0.
template <typename T>
Var<T> l1_distance(Graph<T>& g, const Var<T>& a, const Var<T>& b, Reduction reduction);
/// sum_i weights[i] * terms[i] over scalar nodes.
template <typename T>
Var<T> weighted_sum(Graph<T>& g, const std::vector<Var<T>>& terms, const std::vector<T>& weights);

}  // namespace ag
}  // namespace idem
