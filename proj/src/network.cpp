#include "idem/network.hpp"

#include <cmath>
#include <limits>
#include <random>

namespace idem {
namespace {

struct LayerSpec {
  std::size_t in = 0, out = 0;
  bool transposed = false;

  Shape weight_shape() const { return transposed ? Shape{in, out, 3, 3} : Shape{out, in, 3, 3}; }
  std::size_t count() const { return in * out * 9 + out; }
};

UnitLayers<LayerSpec> layer_specs(const Widths& w) {
  if (w.level0 == 0 || w.level1 == 0 || w.level2 == 0) throw std::invalid_argument("widths must all be >= 1");
  auto blocks = [](std::size_t c, std::size_t first_in) {
    std::array<ResBlockT<LayerSpec>, 2> b;
    b[0] = {{first_in, c}, {c, c}};
    b[1] = {{c, c}, {c, c}};
    return b;
  };
  UnitLayers<LayerSpec> s;
  s.enc_in = {kImageChannels, w.level0};
  s.enc0 = blocks(w.level0, w.level0);
  s.down1 = {2 * w.level0, w.level1};
  s.enc1 = blocks(w.level1, w.level1);
  s.down2 = {2 * w.level1, w.level2};
  s.enc2 = blocks(w.level2, w.level2);
  s.gru_update = s.gru_reset = s.gru_candidate = {2 * w.level2, w.level2};
  s.dec2 = blocks(w.level2, w.level2);
  s.up1 = {w.level2, w.level1, true};
  s.dec1 = blocks(w.level1, 2 * w.level1);
  s.up0 = {w.level1, w.level0, true};
  s.dec0 = blocks(w.level0, 2 * w.level0);
  s.head = {w.level0, kImageChannels};
  return s;
}

template <typename Slot>
std::vector<const Slot*> flatten(const UnitLayers<Slot>& layers) {
  std::vector<const Slot*> out;
  layers.visit([&](const std::string&, const Slot& s) { out.push_back(&s); });
  return out;
}

template <typename T>
Var<T> residual_block(Graph<T>& g, const ResBlockT<BoundConv<T>>& b, const Var<T>& x, const Var<T>* skip = nullptr) {
  const Var<T> in = skip ? ag::concat_channels(g, {x, *skip}) : x;
  auto y = ag::relu(g, ag::conv2d(g, in, b.first.weight, b.first.bias));
  y = ag::conv2d(g, y, b.second.weight, b.second.bias);
  return ag::add(g, x, y);
}

template <typename T>
Var<T> blocks(Graph<T>& g, const std::array<ResBlockT<BoundConv<T>>, 2>& arr, Var<T> x, const Var<T>* skip = nullptr) {
  x = residual_block(g, arr[0], x, skip);
  return residual_block(g, arr[1], x);
}

template <typename T>
Var<T> conv(Graph<T>& g, const BoundConv<T>& c, const Var<T>& x, std::size_t stride = 1) {
  return ag::conv2d(g, x, c.weight, c.bias, stride);
}

void check_map(const Shape& got, const Shape& want, const char* what) {
  if (got != want) throw ShapeError(std::string("recurrent state ") + what + ": expected " + want.str() + ", got " + got.str());
}

}  // namespace

std::size_t count_params(const Widths& widths) {
  std::size_t total = 0;
  layer_specs(widths).visit([&](const std::string&, const LayerSpec& s) { total += s.count(); });
  return total;
}

template <typename T>
std::size_t count_params(const ModelParams<T>& params) {
  std::size_t total = 0;
  params.layers.visit([&](const std::string&, const ConvParams<T>& c) { total += c.weight.size() + c.bias.size(); });
  return total;
}

Widths calibrate_widths(double target) {
  Widths best{1, 2, 4};
  double best_err = std::numeric_limits<double>::infinity();
  for (std::size_t base = 1; base <= 256; ++base) {
    const Widths w{base, 2 * base, 4 * base};
    const double err = std::abs(static_cast<double>(count_params(w)) - target);
    if (err < best_err) {
      best_err = err;
      best = w;
    }
  }
  return best;
}

Widths default_widths() {
  static const Widths w = calibrate_widths(3.11e6);
  return w;
}

template <typename T>
bool ModelParams<T>::operator==(const ModelParams& o) const {
  if (widths != o.widths) return false;
  const auto a = flatten(layers);
  const auto b = flatten(o.layers);
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(*a[i] == *b[i])) return false;
  return true;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> out;
  out.widths = widths;
  const auto src = flatten(layers);
  std::size_t i = 0;
  out.layers.visit([&](const std::string&, ConvParams<U>& c) {
    c.weight = src[i]->weight.template cast<U>();
    c.bias = src[i]->bias.template cast<U>();
    ++i;
  });
  return out;
}

template <typename T>
RecurrentState<T> RecurrentState<T>::zeros(std::size_t batch, std::size_t height, std::size_t width, const Widths& w) {
  RecurrentState s;
  s.f2 = Tensor<T>(Shape{batch, w.level0, height, width});
  s.f1 = Tensor<T>(Shape{batch, w.level1, height / 2, width / 2});
  s.h = Tensor<T>(Shape{batch, w.level2, height / 4, width / 4});
  return s;
}

template <typename T>
ModelParams<T> init_params(const Widths& widths, std::uint64_t seed) {
  const auto specs = layer_specs(widths);
  const auto flat = flatten(specs);
  std::mt19937_64 rng(seed);
  ModelParams<T> p;
  p.widths = widths;
  std::size_t i = 0;
  p.layers.visit([&](const std::string&, ConvParams<T>& c) {
    const LayerSpec& s = *flat[i++];
    const double bound = std::sqrt(6.0 / static_cast<double>((s.in + s.out) * 9));
    std::uniform_real_distribution<double> dist(-bound, bound);
    c.weight = Tensor<T>(s.weight_shape());
    for (auto& v : c.weight.vec()) v = static_cast<T>(dist(rng));
    c.bias = Tensor<T>(Shape{1, 1, 1, s.out});
  });
  return p;
}

template <typename T>
std::vector<T> flatten_values(const ModelParams<T>& params) {
  std::vector<T> out;
  out.reserve(count_params(params));
  params.layers.visit([&](const std::string&, const ConvParams<T>& c) {
    out.insert(out.end(), c.weight.vec().begin(), c.weight.vec().end());
    out.insert(out.end(), c.bias.vec().begin(), c.bias.vec().end());
  });
  return out;
}

template <typename T>
void assign_values(ModelParams<T>& params, std::span<const T> values) {
  if (values.size() != count_params(params)) throw ShapeError("assign_values: wrong number of values");
  std::size_t offset = 0;
  params.layers.visit([&](const std::string&, ConvParams<T>& c) {
    for (Tensor<T>* t : {&c.weight, &c.bias}) {
      std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(offset), t->size(), t->data());
      offset += t->size();
    }
  });
}

template <typename T>
T& param_at(ModelParams<T>& params, std::size_t flat_index) {
  T* found = nullptr;
  std::size_t offset = 0;
  params.layers.visit([&](const std::string&, ConvParams<T>& c) {
    for (Tensor<T>* t : {&c.weight, &c.bias}) {
      if (!found && flat_index < offset + t->size()) found = &(*t)[flat_index - offset];
      offset += t->size();
    }
  });
  if (!found) throw std::out_of_range("param_at: index " + std::to_string(flat_index) + " out of range");
  return *found;
}

template <typename T>
void zero_head(ModelParams<T>& params) {
  params.layers.head.weight.fill(T(0));
  params.layers.head.bias.fill(T(0));
}

void check_image_shape(const Shape& s) {
  if (s.c != kImageChannels) throw ShapeError("image must have 3 channels, got " + s.str());
  if (s.n == 0 || s.h == 0 || s.w == 0) throw ShapeError("empty image " + s.str());
  if (s.h % 4 != 0 || s.w % 4 != 0) throw ShapeError("image height and width must be divisible by 4, got " + s.str());
}

template <typename T>
void check_state(const Shape& image, const Widths& w, const Tensor<T>& f1, const Tensor<T>& f2, const Tensor<T>& h) {
  check_map(f2.shape(), Shape{image.n, w.level0, image.h, image.w}, "f2");
  check_map(f1.shape(), Shape{image.n, w.level1, image.h / 2, image.w / 2}, "f1");
  check_map(h.shape(), Shape{image.n, w.level2, image.h / 4, image.w / 4}, "h");
}

// ---------------------------------------------------------------------------

template <typename T>
BoundModel<T> bind(Graph<T>& g, const ModelParams<T>& params) {
  BoundModel<T> m;
  m.widths = params.widths;
  const auto src = flatten(params.layers);
  std::size_t i = 0;
  m.layers.visit([&](const std::string&, BoundConv<T>& c) {
    c.weight = g.parameter(src[i]->weight);
    c.bias = g.parameter(src[i]->bias);
    ++i;
  });
  return m;
}

template <typename T>
ModelParams<T> gradients(const BoundModel<T>& bound) {
  ModelParams<T> out;
  out.widths = bound.widths;
  const auto src = flatten(bound.layers);
  std::size_t i = 0;
  out.layers.visit([&](const std::string&, ConvParams<T>& c) {
    const BoundConv<T>& b = *src[i++];
    c.weight = b.weight->grad.empty() ? Tensor<T>(b.weight->value.shape()) : b.weight->grad;
    c.bias = b.bias->grad.empty() ? Tensor<T>(b.bias->value.shape()) : b.bias->grad;
  });
  return out;
}

template <typename T>
StateVars<T> zero_state(Graph<T>& g, const Shape& image, const Widths& w) {
  auto s = RecurrentState<T>::zeros(image.n, image.h, image.w, w);
  return {g.constant(std::move(s.f1)), g.constant(std::move(s.f2)), g.constant(std::move(s.h))};
}

template <typename T>
EncoderVars<T> encoder_forward(Graph<T>& g, const BoundModel<T>& m, const Var<T>& image, const StateVars<T>& state) {
  check_image_shape(image->value.shape());
  check_state(image->value.shape(), m.widths, state.f1->value, state.f2->value, state.h->value);
  const auto& L = m.layers;
  auto full = blocks(g, L.enc0, conv(g, L.enc_in, image));
  auto half = blocks(g, L.enc1, conv(g, L.down1, ag::concat_channels(g, {full, state.f2}), 2));
  auto quarter = blocks(g, L.enc2, conv(g, L.down2, ag::concat_channels(g, {half, state.f1}), 2));
  return {quarter, {full, half}};
}

template <typename T>
Var<T> gru_step(Graph<T>& g, const BoundModel<T>& m, const Var<T>& h_prev, const Var<T>& latent) {
  const Shape& hs = h_prev->value.shape();
  const Shape& es = latent->value.shape();
  if (hs.c != m.widths.level2 || es.c != m.widths.level2 || hs.n != es.n || hs.h != es.h || hs.w != es.w)
    throw ShapeError("gru_step: hidden " + hs.str() + " and latent " + es.str() + " do not match");
  const auto& L = m.layers;
  const auto joint = ag::concat_channels(g, {h_prev, latent});
  const auto update = ag::sigmoid(g, conv(g, L.gru_update, joint));
  const auto reset = ag::sigmoid(g, conv(g, L.gru_reset, joint));
  const auto candidate =
      ag::tanh(g, conv(g, L.gru_candidate, ag::concat_channels(g, {ag::mul(g, reset, h_prev), latent})));
  return ag::lerp(g, h_prev, candidate, update);
}

template <typename T>
DecoderVars<T> decoder_forward(Graph<T>& g, const BoundModel<T>& m, const Var<T>& h,
                               const std::array<Var<T>, 2>& skips) {
  const Shape& hs = h->value.shape();
  const Widths& w = m.widths;
  check_map(skips[0]->value.shape(), Shape{hs.n, w.level0, hs.h * 4, hs.w * 4}, "full-resolution skip");
  check_map(skips[1]->value.shape(), Shape{hs.n, w.level1, hs.h * 2, hs.w * 2}, "half-resolution skip");
  const auto& L = m.layers;
  auto quarter = blocks(g, L.dec2, h);
  auto half = blocks(g, L.dec1, ag::conv_transpose2d(g, quarter, L.up1.weight, L.up1.bias), &skips[1]);
  auto full = blocks(g, L.dec0, ag::conv_transpose2d(g, half, L.up0.weight, L.up0.bias), &skips[0]);
  return {conv(g, L.head, full), half, full};
}

template <typename T>
UnitVars<T> unit_forward(Graph<T>& g, const BoundModel<T>& m, const Var<T>& image, const StateVars<T>& state) {
  auto enc = encoder_forward(g, m, image, state);
  auto h = gru_step(g, m, state.h, enc.latent);
  auto dec = decoder_forward(g, m, h, enc.skips);
  return {ag::add(g, image, dec.residual), dec.residual, {dec.f1, dec.f2, h}};
}

template <typename T>
PassVars<T> progressive_deblur(Graph<T>& g, const BoundModel<T>& m, const Var<T>& blurry, std::size_t iterations,
                               const IterationHook<T>& hook) {
  if (iterations < 1) throw std::invalid_argument("progressive_deblur: iterations must be >= 1");
  PassVars<T> out;
  StateVars<T> state = zero_state(g, blurry->value.shape(), m.widths);
  Var<T> image = blurry;
  for (std::size_t i = 0; i < iterations; ++i) {
    if (hook) hook(i, m);
    auto step = unit_forward(g, m, image, state);
    image = step.image;
    state = step.state;
    out.images.push_back(step.image);
    out.residuals.push_back(step.residual);
  }
  return out;
}

template <typename T>
std::vector<PassVars<T>> re_deblur(Graph<T>& g, const BoundModel<T>& m, const Var<T>& input, std::size_t times,
                                   std::size_t iterations, const IterationHook<T>& hook) {
  if (times < 1) throw std::invalid_argument("re_deblur: times must be >= 1");
  std::vector<PassVars<T>> passes;
  Var<T> current = input;
  for (std::size_t k = 0; k < times; ++k) {
    passes.push_back(progressive_deblur(g, m, current, iterations, hook));
    current = passes.back().images.back();
  }
  return passes;
}

// ---------------------------------------------------------------------------

template <typename T>
EncoderOutput<T> encoder_forward(const ModelParams<T>& p, const Tensor<T>& image, const RecurrentState<T>& state) {
  Graph<T> g(false);
  const auto m = bind(g, p);
  auto e = encoder_forward(g, m, g.constant(image), {g.constant(state.f1), g.constant(state.f2), g.constant(state.h)});
  return {e.latent->value, {e.skips[0]->value, e.skips[1]->value}};
}

template <typename T>
Tensor<T> gru_step(const ModelParams<T>& p, const Tensor<T>& h_prev, const Tensor<T>& latent) {
  Graph<T> g(false);
  return gru_step(g, bind(g, p), g.constant(h_prev), g.constant(latent))->value;
}

template <typename T>
DecoderOutput<T> decoder_forward(const ModelParams<T>& p, const Tensor<T>& h, const std::array<Tensor<T>, 2>& skips) {
  Graph<T> g(false);
  auto d = decoder_forward(g, bind(g, p), g.constant(h), {g.constant(skips[0]), g.constant(skips[1])});
  return {d.residual->value, d.f1->value, d.f2->value};
}

template <typename T>
UnitOutput<T> unit_forward(const ModelParams<T>& p, const Tensor<T>& image, const RecurrentState<T>& state) {
  Graph<T> g(false);
  auto u = unit_forward(g, bind(g, p), g.constant(image),
                        {g.constant(state.f1), g.constant(state.f2), g.constant(state.h)});
  return {u.image->value, {u.state.f1->value, u.state.f2->value, u.state.h->value}};
}

template <typename T>
DeblurResult<T> progressive_deblur(const ModelParams<T>& p, const Tensor<T>& blurry, std::size_t iterations) {
  auto passes = re_deblur_detailed(p, blurry, 1, iterations);
  return std::move(passes.front());
}

template <typename T>
std::vector<DeblurResult<T>> re_deblur_detailed(const ModelParams<T>& p, const Tensor<T>& input, std::size_t times,
                                                std::size_t iterations) {
  Graph<T> g(false);
  const auto passes = re_deblur(g, bind(g, p), g.constant(input), times, iterations);
  std::vector<DeblurResult<T>> out;
  for (const auto& pass : passes) {
    DeblurResult<T> r;
    for (const auto& v : pass.images) r.per_iter.push_back(v->value);
    for (const auto& v : pass.residuals) r.per_iter_residuals.push_back(v->value);
    r.final_image = r.per_iter.back();
    out.push_back(std::move(r));
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> re_deblur(const ModelParams<T>& p, const Tensor<T>& input, std::size_t times,
                                 std::size_t iterations) {
  if (times < 1) throw std::invalid_argument("re_deblur: times must be >= 1");
  Graph<T> g(false);
  const auto m = bind(g, p);
  std::vector<Tensor<T>> out;
  Var<T> current = g.constant(input);
  for (std::size_t k = 0; k < times; ++k) {
    // Only the pass output is kept so long probes do not hold every iterate.
    current = progressive_deblur(g, m, current, iterations).images.back();
    out.push_back(current->value);
  }
  return out;
}

#define IDEM_INSTANTIATE(T)                                                                                          \
  template struct ModelParams<T>;                                                                                    \
  template ModelParams<float> ModelParams<T>::cast<float>() const;                                                   \
  template ModelParams<double> ModelParams<T>::cast<double>() const;                                                 \
  template struct RecurrentState<T>;                                                                                 \
  template std::size_t count_params(const ModelParams<T>&);                                                          \
  template ModelParams<T> init_params(const Widths&, std::uint64_t);                                                 \
  template void zero_head(ModelParams<T>&);                                                                          \
  template std::vector<T> flatten_values(const ModelParams<T>&);                                                     \
  template void assign_values(ModelParams<T>&, std::span<const T>);                                                  \
  template T& param_at(ModelParams<T>&, std::size_t);                                                                \
  template void check_state(const Shape&, const Widths&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template BoundModel<T> bind(Graph<T>&, const ModelParams<T>&);                                                     \
  template ModelParams<T> gradients(const BoundModel<T>&);                                                           \
  template StateVars<T> zero_state(Graph<T>&, const Shape&, const Widths&);                                          \
  template EncoderVars<T> encoder_forward(Graph<T>&, const BoundModel<T>&, const Var<T>&, const StateVars<T>&);      \
  template Var<T> gru_step(Graph<T>&, const BoundModel<T>&, const Var<T>&, const Var<T>&);                           \
  template DecoderVars<T> decoder_forward(Graph<T>&, const BoundModel<T>&, const Var<T>&,                            \
                                          const std::array<Var<T>, 2>&);                                             \
  template UnitVars<T> unit_forward(Graph<T>&, const BoundModel<T>&, const Var<T>&, const StateVars<T>&);            \
  template PassVars<T> progressive_deblur(Graph<T>&, const BoundModel<T>&, const Var<T>&, std::size_t,               \
                                          const IterationHook<T>&);                                                  \
  template std::vector<PassVars<T>> re_deblur(Graph<T>&, const BoundModel<T>&, const Var<T>&, std::size_t,           \
                                              std::size_t, const IterationHook<T>&);                                 \
  template EncoderOutput<T> encoder_forward(const ModelParams<T>&, const Tensor<T>&, const RecurrentState<T>&);      \
  template Tensor<T> gru_step(const ModelParams<T>&, const Tensor<T>&, const Tensor<T>&);                            \
  template DecoderOutput<T> decoder_forward(const ModelParams<T>&, const Tensor<T>&, const std::array<Tensor<T>, 2>&); \
  template UnitOutput<T> unit_forward(const ModelParams<T>&, const Tensor<T>&, const RecurrentState<T>&);            \
  template DeblurResult<T> progressive_deblur(const ModelParams<T>&, const Tensor<T>&, std::size_t);                 \
  template std::vector<DeblurResult<T>> re_deblur_detailed(const ModelParams<T>&, const Tensor<T>&, std::size_t,     \
                                                           std::size_t);                                             \
  template std::vector<Tensor<T>> re_deblur(const ModelParams<T>&, const Tensor<T>&, std::size_t, std::size_t);

IDEM_INSTANTIATE(float)
IDEM_INSTANTIATE(double)
#undef IDEM_INSTANTIATE

}  // namespace idem
