#include "idem/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "idem/evaluation.hpp"

namespace idem {
namespace {

using nlohmann::json;
using nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little, "checkpoint payload is little-endian float32");

constexpr char kMagic[8] = {'I', 'D', 'E', 'M', 'C', 'K', 'P', 'T'};

// splitmix64 finalizer; decorrelates seeds derived from (seed, counter) pairs.
std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Strict reader over one JSON object: type-checked fields, unknown keys rejected.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <typename V>
  void get(const char* key, V& out) {
    seen_.push_back(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    const std::string where = path_ + "." + key;
    if constexpr (std::is_same_v<V, double>) {
      if (!it->is_number()) throw ConfigError(where + ": expected a number");
      out = it->get<double>();
    } else if constexpr (std::is_integral_v<V>) {
      if (!it->is_number_integer() || (it->is_number_integer() && !it->is_number_unsigned() && it->get<long long>() < 0))
        throw ConfigError(where + ": expected a non-negative integer");
      out = static_cast<V>(it->get<unsigned long long>());
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!it->is_string()) throw ConfigError(where + ": expected a string");
      out = it->get<std::string>();
    } else {
      static_assert(sizeof(V) == 0, "unsupported field type");
    }
  }

  const json* child(const char* key) {
    seen_.push_back(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (std::find(seen_.begin(), seen_.end(), it.key()) == seen_.end())
        throw ConfigError(path_ + "." + it.key() + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::vector<std::string> seen_;
};

std::vector<const Tensor<float>*> tensor_list(const ModelParams<float>& p, std::vector<std::string>* names) {
  std::vector<const Tensor<float>*> out;
  p.layers.visit([&](const std::string& name, const ConvParams<float>& c) {
    out.push_back(&c.weight);
    out.push_back(&c.bias);
    if (names) {
      names->push_back(name + ".weight");
      names->push_back(name + ".bias");
    }
  });
  return out;
}

ordered_json row_to_json(const MetricsRow& r) {
  ordered_json v = std::isnan(r.val_psnr) ? ordered_json(nullptr) : ordered_json(r.val_psnr);
  return ordered_json::array({r.step, r.epoch, r.lr, r.total, r.idem, r.sharp, v});
}

MetricsRow row_from_json(const ordered_json& j) {
  MetricsRow r;
  r.step = j.at(0).get<std::size_t>();
  r.epoch = j.at(1).get<std::size_t>();
  r.lr = j.at(2).get<double>();
  r.total = j.at(3).get<double>();
  r.idem = j.at(4).get<double>();
  r.sharp = j.at(5).get<double>();
  if (!j.at(6).is_null()) r.val_psnr = j.at(6).get<double>();
  return r;
}

void write_atomically(const std::filesystem::path& path, const std::string& header, const std::vector<float>& payload) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    const std::uint32_t version = kCheckpointSchema;
    const std::uint64_t length = header.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&length), sizeof length);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size() * sizeof(float)));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

void TrainConfig::validate() const {
  if (iterations < 1) throw ConfigError("config.iterations: must be >= 1");
  if (deblur_times < 1) throw ConfigError("config.deblur_times: must be >= 1");
  if (loss.lambda_idem > 0 && deblur_times < 2)
    throw ConfigError("config.deblur_times: must be >= 2 when loss.lambda > 0");
  if (loss.alpha.size() != deblur_times)
    throw ConfigError("config.loss.alpha: expected " + std::to_string(deblur_times) + " weights (one per pass), got " +
                      std::to_string(loss.alpha.size()));
  try {
    loss.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config.loss: ") + e.what());
  }
  if (widths.level0 == 0 || widths.level1 == 0 || widths.level2 == 0)
    throw ConfigError("config.widths: every width must be >= 1");
  if (batch_size < 1) throw ConfigError("config.batch_size: must be >= 1");
  if (!(lr0 >= 0) || !std::isfinite(lr0)) throw ConfigError("config.lr0: must be a finite value >= 0");
  if (!(lr_decay > 0) || !std::isfinite(lr_decay)) throw ConfigError("config.lr_decay: must be > 0");
  if (decay_every < 1) throw ConfigError("config.decay_every: must be >= 1");
  if (!(adam.beta1 >= 0 && adam.beta1 < 1)) throw ConfigError("config.adam.beta1: must be in [0, 1)");
  if (!(adam.beta2 >= 0 && adam.beta2 < 1)) throw ConfigError("config.adam.beta2: must be in [0, 1)");
  if (!(adam.epsilon > 0)) throw ConfigError("config.adam.epsilon: must be > 0");
  if (patch == 0 || patch % 4 != 0) throw ConfigError("config.patch: must be a positive multiple of 4");
  if (!(augment.saturation_min > 0 && augment.saturation_min <= augment.saturation_max))
    throw ConfigError("config.augment: need 0 < saturation_min <= saturation_max");
  if (head_init != "xavier" && head_init != "zero")
    throw ConfigError("config.head_init: expected \"xavier\" or \"zero\"");
}

ordered_json to_json(const TrainConfig& c) {
  ordered_json j;
  j["iterations"] = c.iterations;
  j["deblur_times"] = c.deblur_times;
  j["widths"] = {c.widths.level0, c.widths.level1, c.widths.level2};
  j["batch_size"] = c.batch_size;
  j["lr0"] = c.lr0;
  j["lr_decay"] = c.lr_decay;
  j["decay_every"] = c.decay_every;
  j["adam"] = {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"epsilon", c.adam.epsilon}};
  j["epochs"] = c.epochs;
  j["loss"] = {{"alpha", c.loss.alpha},
               {"lambda", c.loss.lambda_idem},
               {"reduction", c.loss.reduction == Reduction::Mean ? "mean" : "sum"}};
  j["seed"] = c.seed;
  j["patch"] = c.patch;
  j["augment"] = {{"saturation_min", c.augment.saturation_min}, {"saturation_max", c.augment.saturation_max}};
  j["head_init"] = c.head_init;
  j["validate_every"] = c.validate_every;
  j["checkpoint_every"] = c.checkpoint_every;
  return j;
}

TrainConfig train_config_from_json(const json& j, const std::string& path) {
  TrainConfig c;
  Fields f(j, path);
  f.get("iterations", c.iterations);
  f.get("deblur_times", c.deblur_times);
  if (const json* w = f.child("widths")) {
    if (!w->is_array() || w->size() != 3) throw ConfigError(f.path("widths") + ": expected [w0, w1, w2]");
    std::size_t* dst[] = {&c.widths.level0, &c.widths.level1, &c.widths.level2};
    for (std::size_t i = 0; i < 3; ++i) {
      if (!(*w)[i].is_number_unsigned())
        throw ConfigError(f.path("widths") + "[" + std::to_string(i) + "]: expected a positive integer");
      *dst[i] = (*w)[i].get<std::size_t>();
    }
  }
  f.get("batch_size", c.batch_size);
  f.get("lr0", c.lr0);
  f.get("lr_decay", c.lr_decay);
  f.get("decay_every", c.decay_every);
  if (const json* a = f.child("adam")) {
    Fields fa(*a, f.path("adam"));
    fa.get("beta1", c.adam.beta1);
    fa.get("beta2", c.adam.beta2);
    fa.get("epsilon", c.adam.epsilon);
    fa.finish();
  }
  f.get("epochs", c.epochs);
  bool alpha_given = false;
  if (const json* l = f.child("loss")) {
    Fields fl(*l, f.path("loss"));
    if (const json* al = fl.child("alpha")) {
      if (!al->is_array()) throw ConfigError(fl.path("alpha") + ": expected an array of numbers");
      c.loss.alpha.clear();
      for (std::size_t i = 0; i < al->size(); ++i) {
        if (!(*al)[i].is_number())
          throw ConfigError(fl.path("alpha") + "[" + std::to_string(i) + "]: expected a number");
        c.loss.alpha.push_back((*al)[i].get<double>());
      }
      alpha_given = true;
    }
    fl.get("lambda", c.loss.lambda_idem);
    if (const json* r = fl.child("reduction")) {
      if (*r == "mean")
        c.loss.reduction = Reduction::Mean;
      else if (*r == "sum")
        c.loss.reduction = Reduction::Sum;
      else
        throw ConfigError(fl.path("reduction") + ": expected \"mean\" or \"sum\"");
    }
    fl.finish();
  }
  // Unit weight per pass unless given explicitly.
  if (!alpha_given) c.loss.alpha.assign(c.deblur_times, 1.0);
  f.get("seed", c.seed);
  f.get("patch", c.patch);
  if (const json* a = f.child("augment")) {
    Fields fa(*a, f.path("augment"));
    fa.get("saturation_min", c.augment.saturation_min);
    fa.get("saturation_max", c.augment.saturation_max);
    fa.finish();
  }
  f.get("head_init", c.head_init);
  f.get("validate_every", c.validate_every);
  f.get("checkpoint_every", c.checkpoint_every);
  f.finish();
  c.validate();
  return c;
}

std::uint64_t config_hash(const TrainConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("epochs");
  j.erase("validate_every");
  j.erase("checkpoint_every");
  return fnv1a(j.dump());
}

double lr_schedule(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.lr0 * std::pow(cfg.lr_decay, static_cast<double>(epoch / cfg.decay_every));
}

template <typename T>
LossAndGrad<T> loss_and_gradients(const ModelParams<T>& params, const Tensor<T>& blurry, const Tensor<T>& sharp,
                                  const TrainConfig& cfg, const GradientOptions& options) {
  expect_same(blurry.shape(), sharp.shape(), "loss_and_gradients");
  Graph<T> g;
  const auto model = bind(g, params);
  const auto target = g.constant(sharp);
  std::vector<Var<T>> outputs;
  Var<T> current = g.constant(blurry);
  for (std::size_t k = 0; k < cfg.deblur_times; ++k) {
    outputs.push_back(progressive_deblur(g, model, current, cfg.iterations).images.back());
    current = options.detach_between_passes ? g.constant(outputs.back()->value) : outputs.back();
  }
  const auto loss = total_loss(g, outputs, target, cfg.loss);
  LossAndGrad<T> out;
  out.loss = {loss.total->value.item(), loss.idem->value.item(), loss.sharp->value.item()};
  g.backward(loss.total);
  out.grads = gradients(model);
  return out;
}

template <typename T>
StepMetrics train_step(ModelParams<T>& params, AdamState<T>& opt, const Tensor<T>& blurry, const Tensor<T>& sharp,
                       const TrainConfig& cfg, double lr) {
  auto lg = loss_and_gradients(params, blurry, sharp, cfg);
  StepMetrics m{lg.loss.total, lg.loss.idem, lg.loss.sharp, 0.0};
  if (!std::isfinite(m.total))
    throw NumericError("non-finite loss (total=" + fmt(m.total) + ", idem=" + fmt(m.idem) + ", sharp=" + fmt(m.sharp) +
                       ") on batch " + blurry.shape().str());
  const auto grads = flatten_values(lg.grads);
  double sq = 0;
  for (T v : grads) sq += static_cast<double>(v) * static_cast<double>(v);
  m.grad_norm = std::sqrt(sq);
  if (!std::isfinite(m.grad_norm)) throw NumericError("non-finite gradient norm on batch " + blurry.shape().str());
  auto values = flatten_values(params);
  adam_update<T>(values, grads, opt, lr, cfg.adam);
  assign_values<T>(params, values);
  return m;
}

std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<BlurPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("make_batch: empty batch");
  std::vector<Tensor<float>> blurry, sharp;
  for (const auto& p : pairs) {
    blurry.push_back(normalize(p.blurry));
    sharp.push_back(normalize(p.sharp));
  }
  return {stack_batch<float>(blurry), stack_batch<float>(sharp)};
}

bool MetricsRow::operator==(const MetricsRow& o) const {
  const bool val_eq = (std::isnan(val_psnr) && std::isnan(o.val_psnr)) || val_psnr == o.val_psnr;
  return step == o.step && epoch == o.epoch && lr == o.lr && total == o.total && idem == o.idem && sharp == o.sharp &&
         val_eq;
}

std::string metrics_csv_line(const MetricsRow& r) {
  std::string s = std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + fmt(r.lr) + "," + fmt(r.total) + "," +
                  fmt(r.idem) + "," + fmt(r.sharp) + ",";
  if (!std::isnan(r.val_psnr)) s += fmt(r.val_psnr);
  return s;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::vector<std::string> names;
  const auto tensors = tensor_list(ckpt.params, &names);
  std::vector<float> payload;
  ordered_json header;
  header["schema_version"] = kCheckpointSchema;
  header["epoch"] = ckpt.epoch;
  header["step"] = ckpt.step;
  header["config"] = ckpt.config;
  header["config_hash"] = ckpt.config_hash;
  header["best_val_psnr"] = std::isfinite(ckpt.best_val_psnr) ? json(ckpt.best_val_psnr) : json(nullptr);
  header["widths"] = {ckpt.params.widths.level0, ckpt.params.widths.level1, ckpt.params.widths.level2};
  ordered_json list = ordered_json::array();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const Shape& s = tensors[i]->shape();
    list.push_back({{"name", names[i]}, {"shape", {s.n, s.c, s.h, s.w}}, {"offset", payload.size()}});
    payload.insert(payload.end(), tensors[i]->vec().begin(), tensors[i]->vec().end());
  }
  header["tensors"] = list;
  header["optimizer"] = {{"step", ckpt.optimizer.step},
                         {"size", ckpt.optimizer.m.size()},
                         {"m_offset", payload.size()},
                         {"v_offset", payload.size() + ckpt.optimizer.m.size()}};
  payload.insert(payload.end(), ckpt.optimizer.m.begin(), ckpt.optimizer.m.end());
  payload.insert(payload.end(), ckpt.optimizer.v.begin(), ckpt.optimizer.v.end());
  header["payload_floats"] = payload.size();
  ordered_json hist = ordered_json::array();
  for (const auto& r : ckpt.history) hist.push_back(row_to_json(r));
  header["history"] = hist;
  write_atomically(path, header.dump(), payload);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw IoError(path.string() + ": not a checkpoint file");
  if (version != kCheckpointSchema)
    throw IoError(path.string() + ": unsupported checkpoint schema " + std::to_string(version));
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw IoError(path.string() + ": truncated header");

  Checkpoint c;
  try {
    const ordered_json h = ordered_json::parse(text);
    const std::size_t floats = h.at("payload_floats").get<std::size_t>();
    std::vector<float> payload(floats);
    in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(floats * sizeof(float)));
    if (!in) throw IoError(path.string() + ": truncated payload");

    c.epoch = h.at("epoch").get<std::size_t>();
    c.step = h.at("step").get<std::size_t>();
    c.config = h.at("config");
    c.config_hash = h.at("config_hash").get<std::uint64_t>();
    if (!h.at("best_val_psnr").is_null()) c.best_val_psnr = h.at("best_val_psnr").get<double>();
    const auto& w = h.at("widths");
    c.params.widths = {w.at(0).get<std::size_t>(), w.at(1).get<std::size_t>(), w.at(2).get<std::size_t>()};

    const auto& list = h.at("tensors");
    std::size_t i = 0;
    auto slice = [&](std::size_t offset, std::size_t count) {
      if (offset + count > payload.size()) throw IoError(path.string() + ": tensor data out of range");
      return payload.begin() + static_cast<std::ptrdiff_t>(offset);
    };
    c.params.layers.visit([&](const std::string& name, ConvParams<float>& conv) {
      for (auto [suffix, t] : {std::pair{".weight", &conv.weight}, std::pair{".bias", &conv.bias}}) {
        if (i >= list.size()) throw IoError(path.string() + ": missing tensor " + name + suffix);
        const auto& e = list[i++];
        if (e.at("name").get<std::string>() != name + suffix)
          throw IoError(path.string() + ": expected tensor " + name + suffix + ", found " + e.at("name").get<std::string>());
        const auto& s = e.at("shape");
        const Shape shape{s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>(), s.at(2).get<std::size_t>(),
                          s.at(3).get<std::size_t>()};
        *t = Tensor<float>::uninitialized(shape);
        std::copy_n(slice(e.at("offset").get<std::size_t>(), shape.numel()), shape.numel(), t->data());
      }
    });
    if (i != list.size()) throw IoError(path.string() + ": unexpected extra tensors");
    const Widths expect = c.params.widths;
    const auto reference = init_params<float>(expect, 0);
    if (count_params(reference) != count_params(c.params))
      throw IoError(path.string() + ": tensor shapes do not match widths");

    const auto& o = h.at("optimizer");
    const std::size_t n = o.at("size").get<std::size_t>();
    c.optimizer.step = o.at("step").get<std::uint64_t>();
    auto m = slice(o.at("m_offset").get<std::size_t>(), n);
    auto v = slice(o.at("v_offset").get<std::size_t>(), n);
    c.optimizer.m.assign(m, m + static_cast<std::ptrdiff_t>(n));
    c.optimizer.v.assign(v, v + static_cast<std::ptrdiff_t>(n));
    for (const auto& r : h.at("history")) c.history.push_back(row_from_json(r));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": malformed checkpoint header: " + e.what());
  }
  return c;
}

std::pair<std::vector<BlurPair>, std::vector<BlurPair>> split_dataset(std::vector<BlurPair> pairs, double val_fraction) {
  if (!(val_fraction >= 0 && val_fraction < 1)) throw std::invalid_argument("val_fraction must be in [0, 1)");
  const auto n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(pairs.size())));
  std::vector<BlurPair> val(std::make_move_iterator(pairs.end() - static_cast<std::ptrdiff_t>(n_val)),
                            std::make_move_iterator(pairs.end()));
  pairs.resize(pairs.size() - n_val);
  return {std::move(pairs), std::move(val)};
}

Checkpoint train(const TrainConfig& cfg, const std::vector<BlurPair>& train_set, const std::vector<BlurPair>& val_set,
                 const TrainOptions& options) {
  cfg.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  const std::uint64_t hash = config_hash(cfg);

  Checkpoint state;
  if (options.resume) {
    state = *options.resume;
    if (state.config_hash != hash)
      throw ConfigError("resume: checkpoint config hash " + std::to_string(state.config_hash) +
                        " does not match this config (" + std::to_string(hash) + ")");
  } else {
    state.params = init_params<float>(cfg.widths, cfg.seed);
    if (cfg.head_init == "zero") zero_head(state.params);
    state.config_hash = hash;
  }
  state.config = to_json(cfg);

  const bool write = !options.out_dir.empty();
  std::ofstream csv;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const auto csv_path = options.out_dir / "metrics.csv";
    csv.open(csv_path);
    if (!csv) throw IoError("cannot write " + csv_path.string());
    csv << kMetricsHeader << '\n';
    for (const auto& r : state.history) csv << metrics_csv_line(r) << '\n';
    csv.flush();
  }

  const std::size_t n = train_set.size();
  const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;
  for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix(cfg.seed, 0x5eed0000ULL + epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    std::vector<MetricsRow> rows;
    for (std::size_t b = 0; b < batches; ++b) {
      std::vector<BlurPair> batch;
      std::string indices;
      for (std::size_t j = b * cfg.batch_size; j < std::min(n, (b + 1) * cfg.batch_size); ++j) {
        batch.push_back(crop_and_augment(train_set[order[j]], cfg.patch, mix(mix(cfg.seed, state.step), j), cfg.augment));
        indices += (indices.empty() ? "" : " ") + std::to_string(order[j]);
      }
      auto [blurry, sharp] = make_batch(batch);
      StepMetrics m;
      try {
        m = train_step(state.params, state.optimizer, blurry, sharp, cfg, lr);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " +
                           std::to_string(state.step + 1) + ", seed " + std::to_string(cfg.seed) + ", pairs [" +
                           indices + "]");
      }
      ++state.step;
      MetricsRow row;
      row.step = state.step;
      row.epoch = epoch + 1;
      row.lr = lr;
      row.total = m.total;
      row.idem = m.idem;
      row.sharp = m.sharp;
      rows.push_back(row);
    }
    state.epoch = epoch + 1;

    bool improved = false;
    const bool validate = cfg.validate_every > 0 && !val_set.empty() &&
                          (state.epoch % cfg.validate_every == 0 || state.epoch == cfg.epochs);
    if (validate) {
      rows.back().val_psnr = mean_psnr(state.params, val_set, cfg.iterations);
      if (rows.back().val_psnr > state.best_val_psnr) {
        state.best_val_psnr = rows.back().val_psnr;
        improved = true;
      }
    }
    for (const auto& r : rows) {
      state.history.push_back(r);
      if (write) csv << metrics_csv_line(r) << '\n';
      if (options.on_step) options.on_step(r);
    }
    if (write) {
      csv.flush();
      if (!csv) throw IoError("failed writing " + (options.out_dir / "metrics.csv").string());
      save_checkpoint(options.out_dir / "last.ckpt", state);
      if (improved) save_checkpoint(options.out_dir / "best.ckpt", state);
      if (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%05zu.ckpt", state.epoch);
        save_checkpoint(options.out_dir / name, state);
      }
    }
  }
  if (write && cfg.epochs <= state.epoch && !std::filesystem::exists(options.out_dir / "last.ckpt"))
    save_checkpoint(options.out_dir / "last.ckpt", state);
  return state;
}

template LossAndGrad<float> loss_and_gradients(const ModelParams<float>&, const Tensor<float>&, const Tensor<float>&,
                                               const TrainConfig&, const GradientOptions&);
template LossAndGrad<double> loss_and_gradients(const ModelParams<double>&, const Tensor<double>&,
                                                const Tensor<double>&, const TrainConfig&, const GradientOptions&);
template StepMetrics train_step(ModelParams<float>&, AdamState<float>&, const Tensor<float>&, const Tensor<float>&,
                                const TrainConfig&, double);
template StepMetrics train_step(ModelParams<double>&, AdamState<double>&, const Tensor<double>&, const Tensor<double>&,
                                const TrainConfig&, double);

}  // namespace idem
