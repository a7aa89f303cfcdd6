#pragma once
// Direct-summation reference implementations and helpers shared by the unit
// tests and the acceptance runner. Nothing here calls the GEMM kernels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "idem/network.hpp"
#include "idem/tensor.hpp"

namespace idem::testing {

template <typename T>
Tensor<T> random_tensor(const Shape& s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(s);
  for (auto& v : t.vec()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return INFINITY;
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

/// y[o, oy, ox] = b[o] + sum_{i,ky,kx} w[o,i,ky,kx] * x[i, oy*s + ky - 1, ox*s + kx - 1]
template <typename T>
Tensor<T> conv_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, std::size_t stride = 1) {
  const Shape& xs = x.shape();
  const std::size_t out_c = w.shape().n;
  const std::size_t oh = (xs.h - 1) / stride + 1, ow = (xs.w - 1) / stride + 1;
  Tensor<T> y(Shape{xs.n, out_c, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n)
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox) {
          T acc = b[o];
          for (std::size_t i = 0; i < xs.c; ++i)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long iy = static_cast<long>(oy * stride + ky) - 1;
                const long ix = static_cast<long>(ox * stride + kx) - 1;
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(xs.h) || ix >= static_cast<long>(xs.w)) continue;
                acc += w.at(o, i, ky, kx) * x.at(n, i, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
          y.at(n, o, oy, ox) = acc;
        }
  return y;
}

/// Scatter form of the stride-2 transposed conv (padding 1, output padding 1):
/// x[i, iy, ix] * w[i,o,ky,kx] lands on y[o, 2*iy + ky - 1, 2*ix + kx - 1].
template <typename T>
Tensor<T> deconv_oracle(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const Shape& xs = x.shape();
  const std::size_t out_c = w.shape().c;
  const std::size_t oh = 2 * xs.h, ow = 2 * xs.w;
  Tensor<T> y(Shape{xs.n, out_c, oh, ow});
  for (std::size_t n = 0; n < xs.n; ++n) {
    for (std::size_t o = 0; o < out_c; ++o)
      for (std::size_t p = 0; p < oh * ow; ++p) y.at(n, o, p / ow, p % ow) = b[o];
    for (std::size_t i = 0; i < xs.c; ++i)
      for (std::size_t iy = 0; iy < xs.h; ++iy)
        for (std::size_t ix = 0; ix < xs.w; ++ix)
          for (std::size_t o = 0; o < out_c; ++o)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long oy = static_cast<long>(2 * iy + ky) - 1, ox = static_cast<long>(2 * ix + kx) - 1;
                if (oy < 0 || ox < 0 || oy >= static_cast<long>(oh) || ox >= static_cast<long>(ow)) continue;
                y.at(n, o, static_cast<std::size_t>(oy), static_cast<std::size_t>(ox)) +=
                    x.at(n, i, iy, ix) * w.at(i, o, ky, kx);
              }
  }
  return y;
}

template <typename T, typename F>
Tensor<T> map(Tensor<T> t, F f) {
  for (auto& v : t.vec()) v = f(v);
  return t;
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& s = a.shape();
  Tensor<T> out(Shape{s.n, s.c + b.shape().c, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n)
    for (std::size_t y = 0; y < s.h; ++y)
      for (std::size_t x = 0; x < s.w; ++x) {
        for (std::size_t c = 0; c < s.c; ++c) out.at(n, c, y, x) = a.at(n, c, y, x);
        for (std::size_t c = 0; c < b.shape().c; ++c) out.at(n, s.c + c, y, x) = b.at(n, c, y, x);
      }
  return out;
}

template <typename T>
Tensor<T> conv_of(const ConvParams<T>& c, const Tensor<T>& x, std::size_t stride = 1) {
  return conv_oracle(x, c.weight, c.bias, stride);
}

template <typename T>
Tensor<T> res_block(const ResBlockT<ConvParams<T>>& b, const Tensor<T>& x, const Tensor<T>* skip = nullptr) {
  const Tensor<T> in = skip ? concat(x, *skip) : x;
  auto y = map(conv_of(b.first, in), [](T v) { return v > T(0) ? v : T(0); });
  return x + conv_of(b.second, y);
}

template <typename T>
Tensor<T> two_blocks(const std::array<ResBlockT<ConvParams<T>>, 2>& arr, const Tensor<T>& x,
                     const Tensor<T>* skip = nullptr) {
  return res_block(arr[1], res_block(arr[0], x, skip));
}

/// z = sigmoid(Wz [h,e]), r = sigmoid(Wr [h,e]), c = tanh(Wc [r*h, e]), h' = (1-z) h + z c
template <typename T>
Tensor<T> gru_oracle(const ModelParams<T>& p, const Tensor<T>& h, const Tensor<T>& e) {
  const auto he = concat(h, e);
  auto sig = [](T v) { return T(1) / (T(1) + std::exp(-v)); };
  const auto z = map(conv_of(p.layers.gru_update, he), sig);
  const auto r = map(conv_of(p.layers.gru_reset, he), sig);
  Tensor<T> rh = h;
  for (std::size_t i = 0; i < rh.size(); ++i) rh[i] = r[i] * h[i];
  const auto c = map(conv_of(p.layers.gru_candidate, concat(rh, e)), [](T v) { return std::tanh(v); });
  Tensor<T> out(h.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (T(1) - z[i]) * h[i] + z[i] * c[i];
  return out;
}

template <typename T>
UnitOutput<T> unit_oracle(const ModelParams<T>& p, const Tensor<T>& image, const RecurrentState<T>& s) {
  const auto& L = p.layers;
  const auto full = two_blocks(L.enc0, conv_of(L.enc_in, image));
  const auto half = two_blocks(L.enc1, conv_of(L.down1, concat(full, s.f2), 2));
  const auto quarter = two_blocks(L.enc2, conv_of(L.down2, concat(half, s.f1), 2));
  const auto h = gru_oracle(p, s.h, quarter);
  const auto q = two_blocks(L.dec2, h);
  const auto up_half = two_blocks(L.dec1, deconv_oracle(q, L.up1.weight, L.up1.bias), &half);
  const auto up_full = two_blocks(L.dec0, deconv_oracle(up_half, L.up0.weight, L.up0.bias), &full);
  return {image + conv_of(L.head, up_full), {up_half, up_full, h}};
}

}  // namespace idem::testing
