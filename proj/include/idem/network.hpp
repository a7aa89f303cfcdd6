#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "idem/autograd.hpp"
#include "idem/tensor.hpp"

namespace idem {

inline constexpr std::size_t kImageChannels = 3;

/// Channel counts at full, half and quarter resolution.
struct Widths {
  std::size_t level0 = 0, level1 = 0, level2 = 0;
  bool operator==(const Widths&) const = default;
};

template <typename Slot>
struct ResBlockT {
  Slot first, second;
};

/// Layer inventory of the basic unit, generic over what each conv slot holds
/// (raw tensors for storage, graph variables for a forward pass).
///
/// encoder: in-conv, 2 res-blocks, stride-2 conv, 2 res-blocks, stride-2 conv, 2 res-blocks
/// gru:     update / reset / candidate convs over [h, e]
/// decoder: 2 res-blocks, deconv, 2 res-blocks, deconv, 2 res-blocks, head conv
/// The first decoder res-block at half and full resolution takes the encoder
/// skip concatenated onto its first conv input.
template <typename Slot>
struct UnitLayers {
  Slot enc_in;
  std::array<ResBlockT<Slot>, 2> enc0, enc1, enc2;
  Slot down1, down2;
  Slot gru_update, gru_reset, gru_candidate;
  std::array<ResBlockT<Slot>, 2> dec2, dec1, dec0;
  Slot up1, up0;
  Slot head;

  /// Visits every conv slot in a fixed order: f(name, slot).
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& s, F& f) {
    auto blocks = [&f](const std::string& prefix, auto& arr) {
      for (std::size_t i = 0; i < arr.size(); ++i) {
        f(prefix + "." + std::to_string(i) + ".first", arr[i].first);
        f(prefix + "." + std::to_string(i) + ".second", arr[i].second);
      }
    };
    f(std::string("enc_in"), s.enc_in);
    blocks("enc0", s.enc0);
    f(std::string("down1"), s.down1);
    blocks("enc1", s.enc1);
    f(std::string("down2"), s.down2);
    blocks("enc2", s.enc2);
    f(std::string("gru_update"), s.gru_update);
    f(std::string("gru_reset"), s.gru_reset);
    f(std::string("gru_candidate"), s.gru_candidate);
    blocks("dec2", s.dec2);
    f(std::string("up1"), s.up1);
    blocks("dec1", s.dec1);
    f(std::string("up0"), s.up0);
    blocks("dec0", s.dec0);
    f(std::string("head"), s.head);
  }
};

template <typename T>
struct ConvParams {
  Tensor<T> weight, bias;
  bool operator==(const ConvParams&) const = default;
};

template <typename T>
struct BoundConv {
  Var<T> weight, bias;
};

/// All learnable weights of the basic unit, shared by every iteration and pass.
template <typename T>
struct ModelParams {
  Widths widths;
  UnitLayers<ConvParams<T>> layers;

  bool operator==(const ModelParams& o) const;

  template <typename U>
  ModelParams<U> cast() const;
};

template <typename T>
struct BoundModel {
  Widths widths;
  UnitLayers<BoundConv<T>> layers;
};

/// Carried between iterations: decoder maps at half (f1) and full (f2)
/// resolution and the GRU hidden state at quarter resolution.
template <typename T>
struct RecurrentState {
  Tensor<T> f1, f2, h;
  static RecurrentState zeros(std::size_t batch, std::size_t height, std::size_t width, const Widths& w);
};

template <typename T>
struct StateVars {
  Var<T> f1, f2, h;
};

/// Number of learnable scalars implied by a width triple.
std::size_t count_params(const Widths& widths);
template <typename T>
std::size_t count_params(const ModelParams<T>& params);

/// Widths (w, 2w, 4w) whose parameter count is closest to `target`.
Widths calibrate_widths(double target);
/// Calibrated against a 3.11M-parameter budget.
Widths default_widths();

/// Xavier-uniform kernels, zero biases. Deterministic in (widths, seed).
template <typename T>
ModelParams<T> init_params(const Widths& widths, std::uint64_t seed);

/// All parameter values in visit order, and the inverse.
template <typename T>
std::vector<T> flatten_values(const ModelParams<T>& params);
template <typename T>
void assign_values(ModelParams<T>& params, std::span<const T> values);
/// Reference to the scalar at a flat (visit-order) index.
template <typename T>
T& param_at(ModelParams<T>& params, std::size_t flat_index);

/// Zero the output head so every residual is exactly zero.
template <typename T>
void zero_head(ModelParams<T>& params);

void check_image_shape(const Shape& s);
template <typename T>
void check_state(const Shape& image, const Widths& w, const Tensor<T>& f1, const Tensor<T>& f2, const Tensor<T>& h);

// ---------------------------------------------------------------------------
// Graph-level forward pass (used for training and gradient checks).

template <typename T>
BoundModel<T> bind(Graph<T>& g, const ModelParams<T>& params);

/// Gradients of a bound model after Graph::backward, in ModelParams layout.
template <typename T>
ModelParams<T> gradients(const BoundModel<T>& bound);

template <typename T>
struct EncoderVars {
  Var<T> latent;
  std::array<Var<T>, 2> skips;  // full, half resolution
};

template <typename T>
struct DecoderVars {
  Var<T> residual, f1, f2;
};

template <typename T>
struct UnitVars {
  Var<T> image, residual;
  StateVars<T> state;
};

template <typename T>
struct PassVars {
  std::vector<Var<T>> images;     // one per iteration; back() is the pass output
  std::vector<Var<T>> residuals;  // images[i] - images[i-1], images[-1] = input
};

template <typename T>
using IterationHook = std::function<void(std::size_t iteration, const BoundModel<T>&)>;

template <typename T>
StateVars<T> zero_state(Graph<T>& g, const Shape& image, const Widths& w);
template <typename T>
EncoderVars<T> encoder_forward(Graph<T>& g, const BoundModel<T>& m, const Var<T>& image, const StateVars<T>& state);
template <typename T>
Var<T> gru_step(Graph<T>& g, const BoundModel<T>& m, const Var<T>& h_prev, const Var<T>& latent);
template <typename T>
DecoderVars<T> decoder_forward(Graph<T>& g, const BoundModel<T>& m, const Var<T>& h, const std::array<Var<T>, 2>& skips);
template <typename T>
UnitVars<T> unit_forward(Graph<T>& g, const BoundModel<T>& m, const Var<T>& image, const StateVars<T>& state);
template <typename T>
PassVars<T> progressive_deblur(Graph<T>& g, const BoundModel<T>& m, const Var<T>& blurry, std::size_t iterations,
                               const IterationHook<T>& hook = {});
/// Pass k deblurs the output of pass k-1, each from a fresh zero state.
template <typename T>
std::vector<PassVars<T>> re_deblur(Graph<T>& g, const BoundModel<T>& m, const Var<T>& input, std::size_t times,
                                   std::size_t iterations, const IterationHook<T>& hook = {});

// ---------------------------------------------------------------------------
// Tensor-level inference API (no gradient tape).

template <typename T>
struct EncoderOutput {
  Tensor<T> latent;
  std::array<Tensor<T>, 2> skips;
};

template <typename T>
struct DecoderOutput {
  Tensor<T> residual, f1, f2;
};

template <typename T>
struct UnitOutput {
  Tensor<T> image;
  RecurrentState<T> state;
};

template <typename T>
struct DeblurResult {
  Tensor<T> final_image;
  std::vector<Tensor<T>> per_iter;
  std::vector<Tensor<T>> per_iter_residuals;
};

template <typename T>
EncoderOutput<T> encoder_forward(const ModelParams<T>& p, const Tensor<T>& image, const RecurrentState<T>& state);
template <typename T>
Tensor<T> gru_step(const ModelParams<T>& p, const Tensor<T>& h_prev, const Tensor<T>& latent);
template <typename T>
DecoderOutput<T> decoder_forward(const ModelParams<T>& p, const Tensor<T>& h, const std::array<Tensor<T>, 2>& skips);
template <typename T>
UnitOutput<T> unit_forward(const ModelParams<T>& p, const Tensor<T>& image, const RecurrentState<T>& state);
template <typename T>
DeblurResult<T> progressive_deblur(const ModelParams<T>& p, const Tensor<T>& blurry, std::size_t iterations);
template <typename T>
std::vector<DeblurResult<T>> re_deblur_detailed(const ModelParams<T>& p, const Tensor<T>& input, std::size_t times,
                                                std::size_t iterations);
template <typename T>
std::vector<Tensor<T>> re_deblur(const ModelParams<T>& p, const Tensor<T>& input, std::size_t times,
                                 std::size_t iterations);

}  // namespace idem
