#include "idem/conv.hpp"

#include <Eigen/Core>
#include <cstring>

namespace idem::kernels {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct Geometry {
  std::size_t batch, channels, in_h, in_w, out_h, out_w, stride;
  std::size_t in_plane() const { return in_h * in_w; }
  std::size_t out_plane() const { return out_h * out_w; }
  std::size_t cols() const { return batch * out_plane(); }
};

// Reused per-thread buffers; contents are unspecified on entry.
template <typename T, int Slot>
T* scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// Valid output columns [lo, hi) for kernel column kx: 0 <= ox*stride + kx - 1 < in_w.
inline void valid_range(std::size_t kx, std::size_t stride, std::size_t in_w, std::size_t out_w, std::size_t& lo,
                        std::size_t& hi) {
  lo = kx == 0 ? 1 : 0;
  // largest ox with ox*stride + kx - 1 <= in_w - 1
  const std::size_t limit = in_w + 1 - kx;  // ox*stride + kx - 1 < in_w  <=>  ox*stride < in_w + 1 - kx
  hi = std::min(out_w, (limit + stride - 1) / stride);
  if (lo > hi) lo = hi;
}

// col is (channels*9) x (batch*out_plane), row-major.
template <typename T>
void im2col(const T* img, const Geometry& g, T* col) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < kKernel; ++ky) {
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        T* row = col + ((c * kKernel + ky) * kKernel + kx) * cols;
        std::size_t lo, hi;
        valid_range(kx, g.stride, g.in_w, g.out_w, lo, hi);
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* src = img + (b * g.channels + c) * g.in_plane();
          T* dst = row + b * g.out_plane();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - 1;
            T* drow = dst + oy * g.out_w;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) {
              std::fill_n(drow, g.out_w, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * g.in_w + kx;  // srow[ox*stride - 1]
            for (std::size_t ox = 0; ox < lo; ++ox) drow[ox] = T(0);
            if (g.stride == 1) {
              std::memcpy(drow + lo, srow + lo - 1, (hi - lo) * sizeof(T));
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) drow[ox] = srow[ox * g.stride - 1];
            }
            for (std::size_t ox = hi; ox < g.out_w; ++ox) drow[ox] = T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const Geometry& g, T* img) {
  const std::size_t cols = g.cols();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ky = 0; ky < kKernel; ++ky) {
      for (std::size_t kx = 0; kx < kKernel; ++kx) {
        const T* row = col + ((c * kKernel + ky) * kKernel + kx) * cols;
        std::size_t lo, hi;
        valid_range(kx, g.stride, g.in_w, g.out_w, lo, hi);
        for (std::size_t b = 0; b < g.batch; ++b) {
          T* dst = img + (b * g.channels + c) * g.in_plane();
          const T* src = row + b * g.out_plane();
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - 1;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
            T* drow = dst + static_cast<std::size_t>(iy) * g.in_w + kx;  // drow[ox*stride - 1]
            const T* srow = src + oy * g.out_w;
            if (g.stride == 1) {
              for (std::size_t ox = lo; ox < hi; ++ox) drow[ox - 1] += srow[ox];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) drow[ox * g.stride - 1] += srow[ox];
            }
          }
        }
      }
    }
  }
}

// (batch, ch, plane) <-> (ch, batch*plane)
template <typename T>
void nchw_to_cm(const T* src, std::size_t batch, std::size_t ch, std::size_t plane, T* dst) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      std::memcpy(dst + c * batch * plane + b * plane, src + (b * ch + c) * plane, plane * sizeof(T));
}

template <typename T>
void cm_to_nchw(const T* src, std::size_t batch, std::size_t ch, std::size_t plane, T* dst) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c)
      std::memcpy(dst + (b * ch + c) * plane, src + c * batch * plane + b * plane, plane * sizeof(T));
}

template <typename T>
void add_bias(Tensor<T>& y, const Tensor<T>& bias) {
  const Shape& s = y.shape();
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c) {
      T* p = &y.at(b, c, 0, 0);
      const T v = bias[c];
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] += v;
    }
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& dy, Tensor<T>& dbias) {
  const Shape& s = dy.shape();
  for (std::size_t c = 0; c < s.c; ++c) {
    T acc = 0;
    for (std::size_t b = 0; b < s.n; ++b) {
      const T* p = &dy.at(b, c, 0, 0);
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
    }
    dbias[c] += acc;
  }
}

void check_weight(const Shape& w, std::size_t in_c, std::size_t out_c, const char* what) {
  if (w.n != out_c || w.c != in_c || w.h != kKernel || w.w != kKernel)
    throw ShapeError(std::string(what) + ": weight " + w.str() + " does not map " + std::to_string(in_c) +
                     " -> " + std::to_string(out_c) + " channels");
}

}  // namespace

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                         std::size_t stride) {
  const Shape& xs = x.shape();
  const std::size_t out_c = weight.shape().n;
  check_weight(weight.shape(), xs.c, out_c, "conv2d");
  if (bias.size() != out_c) throw ShapeError("conv2d: bias size mismatch");
  const Geometry g{xs.n, xs.c, xs.h, xs.w, conv_out_extent(xs.h, stride), conv_out_extent(xs.w, stride),
                   stride};
  const std::size_t k = xs.c * kTaps;
  T* col = scratch<T, 0>(k * g.cols());
  im2col(x.data(), g, col);
  T* out = scratch<T, 1>(out_c * g.cols());
  MapMat<T>(out, out_c, g.cols()).noalias() = CMapMat<T>(weight.data(), out_c, k) * CMapMat<T>(col, k, g.cols());
  auto y = Tensor<T>::uninitialized(Shape{xs.n, out_c, g.out_h, g.out_w});
  cm_to_nchw(out, xs.n, out_c, g.out_plane(), y.data());
  add_bias(y, bias);
  return y;
}

template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                     std::size_t stride, Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias) {
  const Shape& xs = x.shape();
  const std::size_t out_c = weight.shape().n;
  const Geometry g{xs.n, xs.c, xs.h, xs.w, conv_out_extent(xs.h, stride), conv_out_extent(xs.w, stride),
                   stride};
  expect_same(dy.shape(), Shape{xs.n, out_c, g.out_h, g.out_w}, "conv2d backward");
  const std::size_t k = xs.c * kTaps;
  T* dy_cm = scratch<T, 2>(out_c * g.cols());
  nchw_to_cm(dy.data(), xs.n, out_c, g.out_plane(), dy_cm);
  CMapMat<T> dy_mat(dy_cm, out_c, g.cols());

  if (dbias) accumulate_bias_grad(dy, *dbias);
  if (dweight) {
    T* col = scratch<T, 0>(k * g.cols());
    im2col(x.data(), g, col);
    MapMat<T>(dweight->data(), out_c, k).noalias() += dy_mat * CMapMat<T>(col, k, g.cols()).transpose();
  }
  if (dx) {
    T* dcol = scratch<T, 1>(k * g.cols());
    MapMat<T>(dcol, k, g.cols()).noalias() = CMapMat<T>(weight.data(), out_c, k).transpose() * dy_mat;
    col2im_add(dcol, g, dx->data());
  }
}

template <typename T>
Tensor<T> conv_transpose2d_forward(const Tensor<T>& x, const Tensor<T>& weight,
                                   const Tensor<T>& bias) {
  const Shape& xs = x.shape();
  const std::size_t out_c = weight.shape().c;
  if (weight.shape().n != xs.c || weight.shape().h != kKernel || weight.shape().w != kKernel)
    throw ShapeError("conv_transpose2d: weight " + weight.shape().str() + " vs input " + xs.str());
  if (bias.size() != out_c) throw ShapeError("conv_transpose2d: bias size mismatch");
  // Viewed as the adjoint of a stride-2 conv from (2h, 2w) down to (h, w).
  const Geometry g{xs.n, out_c, 2 * xs.h, 2 * xs.w, xs.h, xs.w, 2};
  const std::size_t k = out_c * kTaps;
  T* x_cm = scratch<T, 2>(xs.c * g.cols());
  nchw_to_cm(x.data(), xs.n, xs.c, g.out_plane(), x_cm);
  T* col = scratch<T, 0>(k * g.cols());
  MapMat<T>(col, k, g.cols()).noalias() =
      CMapMat<T>(weight.data(), xs.c, k).transpose() * CMapMat<T>(x_cm, xs.c, g.cols());
  Tensor<T> y(Shape{xs.n, out_c, g.in_h, g.in_w});
  col2im_add(col, g, y.data());
  add_bias(y, bias);
  return y;
}

template <typename T>
void conv_transpose2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& dy,
                               Tensor<T>* dx, Tensor<T>* dweight, Tensor<T>* dbias) {
  const Shape& xs = x.shape();
  const std::size_t out_c = weight.shape().c;
  const Geometry g{xs.n, out_c, 2 * xs.h, 2 * xs.w, xs.h, xs.w, 2};
  expect_same(dy.shape(), Shape{xs.n, out_c, g.in_h, g.in_w}, "conv_transpose2d backward");
  const std::size_t k = out_c * kTaps;
  T* dcol = scratch<T, 0>(k * g.cols());
  im2col(dy.data(), g, dcol);
  CMapMat<T> dcol_mat(dcol, k, g.cols());

  if (dbias) accumulate_bias_grad(dy, *dbias);
  if (dweight) {
    T* x_cm = scratch<T, 2>(xs.c * g.cols());
    nchw_to_cm(x.data(), xs.n, xs.c, g.out_plane(), x_cm);
    MapMat<T>(dweight->data(), xs.c, k).noalias() += CMapMat<T>(x_cm, xs.c, g.cols()) * dcol_mat.transpose();
  }
  if (dx) {
    T* dx_cm = scratch<T, 1>(xs.c * g.cols());
    MapMat<T>(dx_cm, xs.c, g.cols()).noalias() = CMapMat<T>(weight.data(), xs.c, k) * dcol_mat;
    const std::size_t plane = g.out_plane();
    for (std::size_t b = 0; b < xs.n; ++b)
      for (std::size_t c = 0; c < xs.c; ++c) {
        T* dst = &dx->at(b, c, 0, 0);
        const T* src = dx_cm + c * g.cols() + b * plane;
        for (std::size_t i = 0; i < plane; ++i) dst[i] += src[i];
      }
  }
}

#define IDEM_INSTANTIATE(T)                                                                                \
  template Tensor<T> conv2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t);   \
  template void conv2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,        \
                                Tensor<T>*, Tensor<T>*, Tensor<T>*);                                      \
  template Tensor<T> conv_transpose2d_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template void conv_transpose2d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,           \
                                          Tensor<T>*, Tensor<T>*, Tensor<T>*);

IDEM_INSTANTIATE(float)
IDEM_INSTANTIATE(double)
#undef IDEM_INSTANTIATE

}  // namespace idem::kernels
