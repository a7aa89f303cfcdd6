// Python bindings. Images cross the boundary as float32 arrays shaped
// (3, H, W) or (N, 3, H, W); network-facing calls take [0,1] images and
// handle normalization themselves.
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <json.hpp>

#include "idem/data.hpp"
#include "idem/evaluation.hpp"
#include "idem/losses.hpp"
#include "idem/network.hpp"
#include "idem/trainer.hpp"

namespace py = pybind11;
using namespace idem;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
Tensor<T> to_tensor(const Array<T>& a) {
  Shape s;
  if (a.ndim() == 3)
    s = {1, static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
         static_cast<std::size_t>(a.shape(2))};
  else if (a.ndim() == 4)
    s = {static_cast<std::size_t>(a.shape(0)), static_cast<std::size_t>(a.shape(1)),
         static_cast<std::size_t>(a.shape(2)), static_cast<std::size_t>(a.shape(3))};
  else
    throw ShapeError("expected an array shaped (C, H, W) or (N, C, H, W)");
  Tensor<T> t = Tensor<T>::uninitialized(s);
  std::copy_n(a.data(), t.size(), t.data());
  return t;
}

template <typename T>
Array<T> to_array(const Tensor<T>& t, bool squeeze) {
  const Shape& s = t.shape();
  std::vector<py::ssize_t> dims;
  if (!(squeeze && s.n == 1)) dims.push_back(static_cast<py::ssize_t>(s.n));
  for (std::size_t d : {s.c, s.h, s.w}) dims.push_back(static_cast<py::ssize_t>(d));
  Array<T> a(dims);
  std::copy_n(t.data(), t.size(), a.mutable_data());
  return a;
}

std::vector<BlurPair> to_pairs(const Array<float>& blurry, const Array<float>& sharp) {
  const auto b = to_tensor(blurry), s = to_tensor(sharp);
  expect_same(b.shape(), s.shape(), "pairs");
  std::vector<BlurPair> out;
  for (std::size_t i = 0; i < b.shape().n; ++i) out.push_back({b.sample(i), s.sample(i), 1});
  return out;
}

Widths widths_of(const std::tuple<std::size_t, std::size_t, std::size_t>& w) {
  return {std::get<0>(w), std::get<1>(w), std::get<2>(w)};
}

std::tuple<std::size_t, std::size_t, std::size_t> tuple_of(const Widths& w) { return {w.level0, w.level1, w.level2}; }

struct Model {
  ModelParams<float> params;
  std::size_t iterations = 6;
};

py::dict row_dict(const MetricsRow& r) {
  py::dict d;
  d["step"] = r.step;
  d["epoch"] = r.epoch;
  d["lr"] = r.lr;
  d["total"] = r.total;
  d["idem"] = r.idem;
  d["sharp"] = r.sharp;
  d["val_psnr"] = std::isnan(r.val_psnr) ? py::object(py::none()) : py::object(py::float_(r.val_psnr));
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Idempotent progressive deblurring: network, losses, toy data, metrics and training.";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  m.def("count_params", [](const std::tuple<std::size_t, std::size_t, std::size_t>& w) {
    return count_params(widths_of(w));
  });
  m.def("default_widths", [] { return tuple_of(default_widths()); });
  m.def("calibrate_widths", [](double target) { return tuple_of(calibrate_widths(target)); });

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::tuple<std::size_t, std::size_t, std::size_t>& w, std::uint64_t seed,
                       std::size_t iterations) { return Model{init_params<float>(widths_of(w), seed), iterations}; }),
           py::arg("widths"), py::arg("seed") = 0, py::arg("iterations") = 6)
      .def_static(
          "load",
          [](const std::string& path) {
            const auto c = load_checkpoint(path);
            const auto cfg = train_config_from_json(nlohmann::json::parse(c.config.dump()), "checkpoint.config");
            return Model{c.params, cfg.iterations};
          },
          py::arg("path"))
      .def_property_readonly("widths", [](const Model& mdl) { return tuple_of(mdl.params.widths); })
      .def_readwrite("iterations", &Model::iterations)
      .def("num_params", [](const Model& mdl) { return count_params(mdl.params); })
      .def("zero_head", [](Model& mdl) { zero_head(mdl.params); })
      .def(
          "deblur",
          [](const Model& mdl, const Array<float>& image) {
            const auto x = normalize(to_tensor(image));
            Tensor<float> out;
            {
              py::gil_scoped_release release;
              out = progressive_deblur(mdl.params, x, mdl.iterations).final_image;
            }
            return to_array(denormalize(out), image.ndim() == 3);
          },
          "Restore [0,1] images; the output is on the [0,1] scale but not clipped.", py::arg("image"))
      .def(
          "progressive",
          [](const Model& mdl, const Array<float>& image) {
            const auto r = progressive_deblur(mdl.params, normalize(to_tensor(image)), mdl.iterations);
            std::vector<Array<float>> out;
            for (const auto& t : r.per_iter) out.push_back(to_array(denormalize(t), image.ndim() == 3));
            return out;
          },
          "Every intermediate image of one pass.", py::arg("image"))
      .def(
          "re_deblur",
          [](const Model& mdl, const Array<float>& image, std::size_t times) {
            const auto outs = re_deblur(mdl.params, normalize(to_tensor(image)), times, mdl.iterations);
            std::vector<Array<float>> res;
            for (const auto& t : outs) res.push_back(to_array(denormalize(t), image.ndim() == 3));
            return res;
          },
          "Outputs of `times` repeated applications.", py::arg("image"), py::arg("times"))
      .def("stability_probe",
           [](const Model& mdl, const Array<float>& blurry, const Array<float>& sharp, std::size_t repeats) {
             return stability_probe(mdl.params, to_pairs(blurry, sharp), repeats, mdl.iterations);
           })
      .def("residual_stats",
           [](const Model& mdl, const Array<float>& blurry, const Array<float>& sharp, std::size_t deblur_times) {
             std::vector<py::dict> rows;
             for (const auto& r : residual_stats(mdl.params, to_pairs(blurry, sharp), deblur_times, mdl.iterations)) {
               py::dict d;
               d["pass"] = r.pass;
               d["iteration"] = r.iteration;
               d["psnr"] = r.psnr_db;
               d["every"] = r.every;
               d["sum"] = r.sum;
               rows.push_back(d);
             }
             return rows;
           });
  m.def("psnr", [](const Array<double>& a, const Array<double>& b) { return psnr(to_tensor(a), to_tensor(b)); });
  m.def(
      "ssim",
      [](const Array<double>& a, const Array<double>& b, std::size_t window, double sigma) {
        SsimOptions o;
        o.window = window;
        o.sigma = sigma;
        return ssim(to_tensor(a), to_tensor(b), o);
      },
      py::arg("a"), py::arg("b"), py::arg("window") = 11, py::arg("sigma") = 1.5);

  m.def(
      "idempotent_loss",
      [](const Array<double>& a, const Array<double>& b, const std::string& reduction) {
        return idempotent_loss(to_tensor(a), to_tensor(b), reduction == "sum" ? Reduction::Sum : Reduction::Mean);
      },
      py::arg("first"), py::arg("second"), py::arg("reduction") = "mean");
  m.def(
      "total_loss",
      [](const std::vector<Array<double>>& outputs, const Array<double>& target, std::vector<double> alpha,
         double lambda) {
        std::vector<Tensor<double>> outs;
        for (const auto& o : outputs) outs.push_back(to_tensor(o));
        LossWeights w;
        w.alpha = std::move(alpha);
        w.lambda_idem = lambda;
        const auto v = total_loss<double>(outs, to_tensor(target), w);
        return py::make_tuple(v.total, v.idem, v.sharp);
      },
      "Returns (total, idem, sharp).", py::arg("outputs"), py::arg("target"), py::arg("alpha") = std::vector{1.0, 1.0},
      py::arg("lambda_idem") = 0.1);

  m.def(
      "generate_toy_sequence",
      [](std::uint64_t seed, std::size_t length, std::size_t height, std::size_t width, double motion_scale) {
        ToySceneOptions opt;
        opt.motion_scale = motion_scale;
        std::vector<Array<float>> frames;
        for (const auto& f : generate_toy_sequence(seed, length, height, width, opt).frames)
          frames.push_back(to_array(f, true));
        return frames;
      },
      py::arg("seed"), py::arg("length"), py::arg("height"), py::arg("width"), py::arg("motion_scale") = 1.0);
  m.def(
      "toy_pair",
      [](std::uint64_t seed, int level, std::size_t size) {
        const auto p = synthesize_blur(generate_toy_sequence(seed, static_cast<std::size_t>(level), size, size), level);
        return py::make_tuple(to_array(p.blurry, true), to_array(p.sharp, true));
      },
      "(blurry, sharp) from a fresh toy sequence of `level` frames.", py::arg("seed"), py::arg("level"),
      py::arg("size"));
  m.def(
      "toy_dataset",
      [](std::size_t pairs, std::size_t size, std::uint64_t seed, double motion_scale) {
        ToySceneOptions opt;
        opt.motion_scale = motion_scale;
        const auto set = make_toy_dataset(pairs, size, default_blur_levels(), seed, opt);
        std::vector<Tensor<float>> b, s;
        for (const auto& p : set) {
          b.push_back(p.blurry);
          s.push_back(p.sharp);
        }
        return py::make_tuple(to_array(stack_batch<float>(b), false), to_array(stack_batch<float>(s), false));
      },
      "Arrays (N,3,S,S) of blurry and sharp images, blur levels cycling 5..15.", py::arg("pairs"), py::arg("size"),
      py::arg("seed"), py::arg("motion_scale") = 1.0);
  m.def("add_gaussian_noise", [](const Array<float>& img, double sigma, std::uint64_t seed) {
    return to_array(add_gaussian_noise(to_tensor(img), sigma, seed), true);
  });

  m.def(
      "lr_schedule",
      [](std::size_t epoch, const std::string& config_json) {
        return lr_schedule(epoch, train_config_from_json(nlohmann::json::parse(config_json)));
      },
      py::arg("epoch"), py::arg("config_json") = "{}");
  m.def(
      "train",
      [](const std::string& config_json, const Array<float>& blurry, const Array<float>& sharp, double val_fraction,
         const std::string& out_dir) {
        const auto cfg = train_config_from_json(nlohmann::json::parse(config_json));
        auto [tr, val] = split_dataset(to_pairs(blurry, sharp), val_fraction);
        TrainOptions opts;
        opts.out_dir = out_dir;
        Checkpoint c;
        {
          py::gil_scoped_release release;
          c = train(cfg, tr, val, opts);
        }
        std::vector<py::dict> history;
        for (const auto& r : c.history) history.push_back(row_dict(r));
        return py::make_tuple(Model{c.params, cfg.iterations}, history);
      },
      "Train from a JSON config on [0,1] pairs; returns (model, metrics rows).", py::arg("config_json"),
      py::arg("blurry"), py::arg("sharp"), py::arg("val_fraction") = 0.2, py::arg("out_dir") = "");
}
