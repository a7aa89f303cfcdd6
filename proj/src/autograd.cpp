#include "idem/autograd.hpp"

#include <cmath>

#include "idem/conv.hpp"

namespace idem::ag {
namespace {

template <typename T, typename F>
Tensor<T> map(const Tensor<T>& x, F f) {
  auto y = Tensor<T>::uninitialized(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return y;
}

}  // namespace

template <typename T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride) {
  return g.record(kernels::conv2d_forward(x->value, weight->value, bias->value, stride), {&x, &weight, &bias},
                  [&](const Node<T>&) {
                    return [x, weight, bias, stride](const Tensor<T>& dy) {
                      kernels::conv2d_backward(x->value, weight->value, dy, stride,
                                               x->requires_grad ? &x->grad_buffer() : nullptr,
                                               weight->requires_grad ? &weight->grad_buffer() : nullptr,
                                               bias->requires_grad ? &bias->grad_buffer() : nullptr);
                    };
                  });
}

template <typename T>
Var<T> conv_transpose2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  return g.record(kernels::conv_transpose2d_forward(x->value, weight->value, bias->value), {&x, &weight, &bias},
                  [&](const Node<T>&) {
                    return [x, weight, bias](const Tensor<T>& dy) {
                      kernels::conv_transpose2d_backward(x->value, weight->value, dy,
                                                         x->requires_grad ? &x->grad_buffer() : nullptr,
                                                         weight->requires_grad ? &weight->grad_buffer() : nullptr,
                                                         bias->requires_grad ? &bias->grad_buffer() : nullptr);
                    };
                  });
}

template <typename T>
Var<T> relu(Graph<T>& g, const Var<T>& x) {
  return g.record(map(x->value, [](T v) { return v > T(0) ? v : T(0); }), {&x}, [&](const Node<T>&) {
    return [x](const Tensor<T>& dy) {
      Tensor<T>& dx = x->grad_buffer();
      const Tensor<T>& xv = x->value;
      for (std::size_t i = 0; i < dy.size(); ++i)
        if (xv[i] > T(0)) dx[i] += dy[i];
    };
  });
}

template <typename T>
Var<T> sigmoid(Graph<T>& g, const Var<T>& x) {
  return g.record(map(x->value, [](T v) { return T(1) / (T(1) + std::exp(-v)); }), {&x},
                  [&](const Node<T>& self) {
                    const Tensor<T>* y = &self.value;
                    return [x, y](const Tensor<T>& dy) {
                      Tensor<T>& dx = x->grad_buffer();
                      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (*y)[i] * (T(1) - (*y)[i]);
                    };
                  });
}

template <typename T>
Var<T> tanh(Graph<T>& g, const Var<T>& x) {
  return g.record(map(x->value, [](T v) { return std::tanh(v); }), {&x}, [&](const Node<T>& self) {
    const Tensor<T>* y = &self.value;
    return [x, y](const Tensor<T>& dy) {
      Tensor<T>& dx = x->grad_buffer();
      for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i] * (T(1) - (*y)[i] * (*y)[i]);
    };
  });
}

template <typename T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  return g.record(a->value + b->value, {&a, &b}, [&](const Node<T>&) {
    return [a, b](const Tensor<T>& dy) {
      if (a->requires_grad) a->accumulate(dy);
      if (b->requires_grad) b->accumulate(dy);
    };
  });
}

template <typename T>
Var<T> sub(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  return g.record(a->value - b->value, {&a, &b}, [&](const Node<T>&) {
    return [a, b](const Tensor<T>& dy) {
      if (a->requires_grad) a->accumulate(dy);
      if (b->requires_grad) {
        Tensor<T>& db = b->grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] -= dy[i];
      }
    };
  });
}

template <typename T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  expect_same(a->value.shape(), b->value.shape(), "mul");
  auto y = Tensor<T>::uninitialized(a->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->value[i] * b->value[i];
  return g.record(std::move(y), {&a, &b}, [&](const Node<T>&) {
    return [a, b](const Tensor<T>& dy) {
      if (a->requires_grad) {
        Tensor<T>& da = a->grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b->value[i];
      }
      if (b->requires_grad) {
        Tensor<T>& db = b->grad_buffer();
        for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a->value[i];
      }
    };
  });
}

template <typename T>
Var<T> lerp(Graph<T>& g, const Var<T>& a, const Var<T>& b, const Var<T>& z) {
  expect_same(a->value.shape(), b->value.shape(), "lerp");
  expect_same(a->value.shape(), z->value.shape(), "lerp gate");
  auto y = Tensor<T>::uninitialized(a->value.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (T(1) - z->value[i]) * a->value[i] + z->value[i] * b->value[i];
  return g.record(std::move(y), {&a, &b, &z}, [&](const Node<T>&) {
    return [a, b, z](const Tensor<T>& dy) {
      const std::size_t n = dy.size();
      if (a->requires_grad) {
        Tensor<T>& da = a->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) da[i] += dy[i] * (T(1) - z->value[i]);
      }
      if (b->requires_grad) {
        Tensor<T>& db = b->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) db[i] += dy[i] * z->value[i];
      }
      if (z->requires_grad) {
        Tensor<T>& dz = z->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) dz[i] += dy[i] * (b->value[i] - a->value[i]);
      }
    };
  });
}

template <typename T>
Var<T> concat_channels(Graph<T>& g, const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  const Shape s0 = parts.front()->value.shape();
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w)
      throw ShapeError("concat_channels: " + s.str() + " does not match " + s0.str());
    channels += s.c;
  }
  auto y = Tensor<T>::uninitialized(Shape{s0.n, channels, s0.h, s0.w});
  const std::size_t plane = s0.plane();
  for (std::size_t b = 0; b < s0.n; ++b) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t c = p->value.shape().c;
      std::copy_n(&p->value.at(b, 0, 0, 0), c * plane, &y.at(b, offset, 0, 0));
      offset += c;
    }
  }
  return g.record_many(std::move(y), parts, [parts, plane](const Tensor<T>& dy) {
    const std::size_t batch = dy.shape().n;
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const std::size_t c = p->value.shape().c;
      if (p->requires_grad) {
        Tensor<T>& dp = p->grad_buffer();
        for (std::size_t b = 0; b < batch; ++b) {
          const T* src = &dy.at(b, offset, 0, 0);
          T* dst = &dp.at(b, 0, 0, 0);
          for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
        }
      }
      offset += c;
    }
  });
}

template <typename T>
Var<T> l1_distance(Graph<T>& g, const Var<T>& a, const Var<T>& b, Reduction reduction) {
  expect_same(a->value.shape(), b->value.shape(), "l1_distance");
  const std::size_t n = a->value.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(static_cast<double>(a->value[i]) - b->value[i]);
  const T scale = reduction == Reduction::Mean ? T(1) / static_cast<T>(n) : T(1);
  const T value = static_cast<T>(acc * static_cast<double>(scale));
  return g.record(Tensor<T>::scalar(value), {&a, &b}, [&](const Node<T>&) {
    return [a, b, scale](const Tensor<T>& dy) {
      const T s = dy.item() * scale;
      const std::size_t n = a->value.size();
      Tensor<T>* da = a->requires_grad ? &a->grad_buffer() : nullptr;
      Tensor<T>* db = b->requires_grad ? &b->grad_buffer() : nullptr;
      for (std::size_t i = 0; i < n; ++i) {
        const T d = a->value[i] - b->value[i];
        const T sign = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
        if (da) (*da)[i] += s * sign;
        if (db) (*db)[i] -= s * sign;
      }
    };
  });
}

template <typename T>
Var<T> weighted_sum(Graph<T>& g, const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: terms/weights length mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) acc += weights[i] * terms[i]->value.item();
  return g.record_many(Tensor<T>::scalar(acc), terms, [terms, weights](const Tensor<T>& dy) {
    for (std::size_t i = 0; i < terms.size(); ++i)
      if (terms[i]->requires_grad) terms[i]->accumulate(Tensor<T>::scalar(weights[i] * dy.item()));
  });
}

#define IDEM_INSTANTIATE(T)                                                                              \
  template Var<T> conv2d(Graph<T>&, const Var<T>&, const Var<T>&, const Var<T>&, std::size_t);          \
  template Var<T> conv_transpose2d(Graph<T>&, const Var<T>&, const Var<T>&, const Var<T>&);             \
  template Var<T> relu(Graph<T>&, const Var<T>&);                                                       \
  template Var<T> sigmoid(Graph<T>&, const Var<T>&);                                                    \
  template Var<T> tanh(Graph<T>&, const Var<T>&);                                                       \
  template Var<T> add(Graph<T>&, const Var<T>&, const Var<T>&);                                         \
  template Var<T> sub(Graph<T>&, const Var<T>&, const Var<T>&);                                         \
  template Var<T> mul(Graph<T>&, const Var<T>&, const Var<T>&);                                         \
  template Var<T> lerp(Graph<T>&, const Var<T>&, const Var<T>&, const Var<T>&);                         \
  template Var<T> concat_channels(Graph<T>&, const std::vector<Var<T>>&);                               \
  template Var<T> l1_distance(Graph<T>&, const Var<T>&, const Var<T>&, Reduction);                      \
  template Var<T> weighted_sum(Graph<T>&, const std::vector<Var<T>>&, const std::vector<T>&);

IDEM_INSTANTIATE(float)
IDEM_INSTANTIATE(double)
#undef IDEM_INSTANTIATE

}  // namespace idem::ag
