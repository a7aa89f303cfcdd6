#include "idem/evaluation.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace idem {
namespace {

constexpr std::size_t kEvalChunk = 8;

// Runs fn(first, count, batched_normalized_blurry) over consecutive same-shape chunks.
template <typename F>
void for_each_chunk(const std::vector<BlurPair>& set, F&& fn) {
  std::size_t i = 0;
  while (i < set.size()) {
    std::size_t j = i + 1;
    while (j < set.size() && j - i < kEvalChunk && set[j].blurry.shape() == set[i].blurry.shape()) ++j;
    std::vector<Tensor<float>> inputs;
    for (std::size_t k = i; k < j; ++k) inputs.push_back(normalize(set[k].blurry));
    fn(i, j - i, stack_batch<float>(inputs));
    i = j;
  }
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> w(size);
  const double c = (static_cast<double>(size) - 1.0) / 2.0;
  double total = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    w[i] = std::exp(-d * d / (2 * sigma * sigma));
    total += w[i];
  }
  for (auto& v : w) v /= total;
  return w;
}

// Separable 'valid' filtering of one plane.
std::vector<double> filter_valid(const std::vector<double>& plane, std::size_t h, std::size_t w,
                                 const std::vector<double>& win) {
  const std::size_t k = win.size();
  const std::size_t oh = h - k + 1, ow = w - k + 1;
  std::vector<double> rows(h * ow);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < k; ++i) acc += win[i] * plane[y * w + x + i];
      rows[y * ow + x] = acc;
    }
  std::vector<double> out(oh * ow);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x) {
      double acc = 0;
      for (std::size_t i = 0; i < k; ++i) acc += win[i] * rows[(y + i) * ow + x];
      out[y * ow + x] = acc;
    }
  return out;
}

double mean_abs_255(const Tensor<float>& t) {
  double acc = 0;
  for (float v : t.vec()) acc += std::abs(static_cast<double>(v));
  return 255.0 * acc / static_cast<double>(t.size());
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b) {
  expect_same(a.shape(), b.shape(), "psnr");
  if (a.empty()) throw ShapeError("psnr: empty images");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  const double mse = acc / static_cast<double>(a.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimOptions& opt) {
  expect_same(a.shape(), b.shape(), "ssim");
  const Shape& s = a.shape();
  if (s.h < opt.window || s.w < opt.window)
    throw ShapeError("ssim: image " + s.str() + " is smaller than the " + std::to_string(opt.window) + "px window");
  const auto win = gaussian_window(opt.window, opt.sigma);
  const double c1 = std::pow(opt.k1 * opt.dynamic_range, 2), c2 = std::pow(opt.k2 * opt.dynamic_range, 2);
  const std::size_t plane = s.plane();
  double total = 0;
  std::size_t planes = 0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < s.c; ++c) {
      std::vector<double> x(plane), y(plane), xx(plane), yy(plane), xy(plane);
      const T* pa = &a.at(n, c, 0, 0);
      const T* pb = &b.at(n, c, 0, 0);
      for (std::size_t i = 0; i < plane; ++i) {
        x[i] = pa[i];
        y[i] = pb[i];
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
      }
      const auto mx = filter_valid(x, s.h, s.w, win), my = filter_valid(y, s.h, s.w, win);
      const auto sxx = filter_valid(xx, s.h, s.w, win), syy = filter_valid(yy, s.h, s.w, win);
      const auto sxy = filter_valid(xy, s.h, s.w, win);
      double acc = 0;
      for (std::size_t i = 0; i < mx.size(); ++i) {
        const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
        acc += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
      }
      total += acc / static_cast<double>(mx.size());
      ++planes;
    }
  }
  return total / static_cast<double>(planes);
}

Image to_display(const Tensor<float>& normalized) { return clip01(denormalize(normalized)); }

double mean_blurry_psnr(const std::vector<BlurPair>& testset) {
  if (testset.empty()) throw std::invalid_argument("empty test set");
  double acc = 0;
  for (const auto& p : testset) acc += psnr(p.blurry, p.sharp);
  return acc / static_cast<double>(testset.size());
}

double mean_psnr(const ModelParams<float>& params, const std::vector<BlurPair>& testset, std::size_t iterations) {
  return stability_probe(params, testset, 1, iterations).front();
}

std::vector<double> stability_probe(const ModelParams<float>& params, const std::vector<BlurPair>& testset,
                                    std::size_t repeats, std::size_t iterations) {
  if (testset.empty()) throw std::invalid_argument("stability probe: empty test set");
  if (repeats < 1) throw std::invalid_argument("stability probe: repeats must be >= 1");
  std::vector<double> curve(repeats, 0.0);
  for_each_chunk(testset, [&](std::size_t first, std::size_t count, const Tensor<float>& input) {
    const auto outputs = re_deblur(params, input, repeats, iterations);
    for (std::size_t k = 0; k < repeats; ++k)
      for (std::size_t i = 0; i < count; ++i)
        curve[k] += psnr(to_display(outputs[k].sample(i)), testset[first + i].sharp);
  });
  for (auto& v : curve) v /= static_cast<double>(testset.size());
  return curve;
}

std::vector<ResidualRow> residual_stats(const ModelParams<float>& params, const std::vector<BlurPair>& testset,
                                        std::size_t deblur_times, std::size_t iterations) {
  if (testset.empty()) throw std::invalid_argument("residual stats: empty test set");
  if (deblur_times < 1) throw std::invalid_argument("residual stats: deblur_times must be >= 1");
  std::vector<ResidualRow> rows;
  for (std::size_t p = 0; p < deblur_times; ++p)
    for (std::size_t i = 0; i < iterations; ++i) rows.push_back({p + 1, i + 1, 0, 0, 0, 0});

  for_each_chunk(testset, [&](std::size_t first, std::size_t count, const Tensor<float>& input) {
    const auto passes = re_deblur_detailed(params, input, deblur_times, iterations);
    Tensor<float> pass_input = input;
    for (std::size_t p = 0; p < deblur_times; ++p) {
      const auto& pass = passes[p];
      Tensor<float> running(input.shape());
      for (std::size_t i = 0; i < iterations; ++i) {
        running += pass.per_iter_residuals[i];
        for (std::size_t s = 0; s < count; ++s) {
          ResidualRow& row = rows[p * iterations + i];
          row.psnr_db += psnr(to_display(pass.per_iter[i].sample(s)), testset[first + s].sharp);
          row.every += mean_abs_255(pass.per_iter_residuals[i].sample(s));
          row.sum += mean_abs_255(running.sample(s));
          row.sum_direct += mean_abs_255(pass.per_iter[i].sample(s) - pass_input.sample(s));
        }
      }
      pass_input = pass.final_image;
    }
  });
  const double n = static_cast<double>(testset.size());
  for (auto& r : rows) {
    r.psnr_db /= n;
    r.every /= n;
    r.sum /= n;
    r.sum_direct /= n;
  }
  return rows;
}

EvalReport evaluate(const ModelParams<float>& params, const std::vector<BlurPair>& testset, std::size_t repeats,
                    std::size_t iterations, std::size_t deblur_times) {
  if (testset.empty()) throw std::invalid_argument("evaluate: empty test set");
  EvalReport report;
  for_each_chunk(testset, [&](std::size_t first, std::size_t count, const Tensor<float>& input) {
    const auto out = progressive_deblur(params, input, iterations).final_image;
    for (std::size_t i = 0; i < count; ++i) {
      const Image restored = to_display(out.sample(i));
      report.per_image.push_back({psnr(restored, testset[first + i].sharp), ssim(restored, testset[first + i].sharp)});
    }
  });
  for (const auto& s : report.per_image) {
    report.mean_psnr += s.psnr_db;
    report.mean_ssim += s.ssim;
  }
  report.mean_psnr /= static_cast<double>(report.per_image.size());
  report.mean_ssim /= static_cast<double>(report.per_image.size());
  report.blurry_psnr = mean_blurry_psnr(testset);
  report.stability_curve = stability_probe(params, testset, repeats, iterations);
  report.residual_table = residual_stats(params, testset, deblur_times, iterations);
  return report;
}

void write_report(const std::filesystem::path& dir, const EvalReport& report) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name);
    if (!out) throw IoError("cannot write " + (dir / name).string());
    return out;
  };
  {
    auto out = open("per_image.csv");
    out << "index,psnr,ssim\n";
    for (std::size_t i = 0; i < report.per_image.size(); ++i)
      out << i << ',' << fmt(report.per_image[i].psnr_db) << ',' << fmt(report.per_image[i].ssim) << '\n';
  }
  {
    auto out = open("residuals.csv");
    out << "pass,iteration,psnr,every,sum,sum_direct\n";
    for (const auto& r : report.residual_table)
      out << r.pass << ',' << r.iteration << ',' << fmt(r.psnr_db) << ',' << fmt(r.every) << ',' << fmt(r.sum) << ','
          << fmt(r.sum_direct) << '\n';
  }
  if (report.stability_curve.size() > 1) {
    auto out = open("stability.csv");
    out << "k,psnr\n";
    for (std::size_t k = 0; k < report.stability_curve.size(); ++k)
      out << k + 1 << ',' << fmt(report.stability_curve[k]) << '\n';
  }
  nlohmann::ordered_json j;
  j["images"] = report.per_image.size();
  j["mean_psnr"] = report.mean_psnr;
  j["mean_ssim"] = report.mean_ssim;
  j["blurry_psnr"] = report.blurry_psnr;
  j["stability_curve"] = report.stability_curve;
  auto out = open("summary.json");
  out << j.dump(2) << '\n';
}

template double psnr(const Tensor<float>&, const Tensor<float>&);
template double psnr(const Tensor<double>&, const Tensor<double>&);
template double ssim(const Tensor<float>&, const Tensor<float>&, const SsimOptions&);
template double ssim(const Tensor<double>&, const Tensor<double>&, const SsimOptions&);

}  // namespace idem
