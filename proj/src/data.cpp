#include "idem/data.hpp"

#include <png.h>

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

namespace idem {
namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

struct Grating {
  double fx, fy, phase;
  std::array<double, 3> color;
};

struct Shape2D {
  bool ellipse;
  double cx, cy, vx, vy;
  double half_a, half_b;
  double angle0, spin;
  std::array<double, 3> c1, c2;
  double period, stripe_phase;
};

struct Scene {
  std::array<double, 3> base;
  std::vector<Grating> gratings;
  double cell;
  std::array<double, 3> checker;
  double pan_x, pan_y;
  std::vector<Shape2D> shapes;

  std::array<double, 3> background(double x, double y) const {
    std::array<double, 3> c = base;
    const bool odd = (static_cast<long>(std::floor(x / cell)) + static_cast<long>(std::floor(y / cell))) & 1;
    for (int k = 0; k < 3; ++k) c[k] += odd ? checker[k] : -checker[k];
    for (const auto& g : gratings) {
      const double s = std::sin(kTwoPi * (g.fx * x + g.fy * y) + g.phase);
      for (int k = 0; k < 3; ++k) c[k] += g.color[k] * s;
    }
    return c;
  }

  std::array<double, 3> sample(double x, double y, double t) const {
    std::array<double, 3> c = background(x - pan_x * t, y - pan_y * t);
    for (const auto& s : shapes) {
      const double ang = s.angle0 + s.spin * t;
      const double dx = x - (s.cx + s.vx * t);
      const double dy = y - (s.cy + s.vy * t);
      const double u = std::cos(ang) * dx + std::sin(ang) * dy;
      const double v = -std::sin(ang) * dx + std::cos(ang) * dy;
      const bool inside = s.ellipse ? (u * u) / (s.half_a * s.half_a) + (v * v) / (s.half_b * s.half_b) <= 1.0
                                    : std::abs(u) <= s.half_a && std::abs(v) <= s.half_b;
      if (!inside) continue;
      const double m = std::sin(kTwoPi * u / s.period + s.stripe_phase) >= 0.0 ? 1.0 : 0.0;
      for (int k = 0; k < 3; ++k) c[k] = s.c1[k] + (s.c2[k] - s.c1[k]) * m;
    }
    return c;
  }
};

Scene make_scene(std::mt19937_64& rng, std::size_t height, std::size_t width, const ToySceneOptions& opt) {
  const double size = static_cast<double>(std::min(height, width));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto range = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto color = [&](double lo, double hi) { return std::array<double, 3>{range(lo, hi), range(lo, hi), range(lo, hi)}; };

  Scene s;
  s.base = color(0.3, 0.7);
  for (int i = 0; i < 3; ++i) {
    const double period = range(size / 8.0, size / 3.0);
    const double theta = range(0.0, kTwoPi);
    s.gratings.push_back({std::cos(theta) / period, std::sin(theta) / period, range(0.0, kTwoPi), color(-0.08, 0.08)});
  }
  s.cell = range(size / 8.0, size / 5.0);
  s.checker = color(-0.25, 0.25);
  const double pan_dir = range(0.0, kTwoPi);
  // Camera pan dominates, so every edge in the frame carries motion blur.
  const double pan_speed = range(0.5, 1.0) * opt.motion_scale;
  s.pan_x = pan_speed * std::cos(pan_dir);
  s.pan_y = pan_speed * std::sin(pan_dir);

  std::uniform_int_distribution<std::size_t> count(opt.min_shapes, std::max(opt.min_shapes, opt.max_shapes));
  const std::size_t n = count(rng);
  for (std::size_t i = 0; i < n; ++i) {
    Shape2D sh{};
    sh.ellipse = unit(rng) < 0.5;
    sh.cx = range(0.2, 0.8) * static_cast<double>(width);
    sh.cy = range(0.2, 0.8) * static_cast<double>(height);
    const double dir = range(0.0, kTwoPi);
    const double speed = range(0.5, 1.0) * opt.motion_scale;
    sh.vx = speed * std::cos(dir);
    sh.vy = speed * std::sin(dir);
    sh.half_a = range(size / 12.0, size / 5.0);
    sh.half_b = range(size / 12.0, size / 5.0);
    sh.angle0 = range(0.0, kTwoPi);
    sh.spin = range(-0.05, 0.05) * opt.motion_scale;
    sh.c1 = color(0.05, 0.95);
    sh.c2 = color(0.05, 0.95);
    sh.period = range(16.0, 24.0);
    sh.stripe_phase = range(0.0, kTwoPi);
    s.shapes.push_back(sh);
  }
  return s;
}

Image render(const Scene& scene, std::size_t height, std::size_t width, double t) {
  constexpr int kSuper = 2;
  Image img(Shape{1, 3, height, width});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      std::array<double, 3> acc{0, 0, 0};
      for (int sy = 0; sy < kSuper; ++sy)
        for (int sx = 0; sx < kSuper; ++sx) {
          const auto c = scene.sample(static_cast<double>(x) + (sx + 0.5) / kSuper,
                                      static_cast<double>(y) + (sy + 0.5) / kSuper, t);
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      for (std::size_t k = 0; k < 3; ++k)
        img.at(0, k, y, x) = static_cast<float>(std::clamp(acc[k] / (kSuper * kSuper), 0.0, 1.0));
    }
  }
  return img;
}

void check_single_image(const Image& img, const char* what) {
  const Shape& s = img.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError(std::string(what) + ": expected a (1,3,H,W) image, got " + s.str());
}

Image crop(const Image& img, std::size_t y0, std::size_t x0, std::size_t patch) {
  Image out(Shape{1, 3, patch, patch});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < patch; ++y)
      for (std::size_t x = 0; x < patch; ++x) out.at(0, c, y, x) = img.at(0, c, y0 + y, x0 + x);
  return out;
}

// Horizontal mirror followed by `quarter_turns` counter-clockwise rotations of a square image.
Image orient(const Image& img, bool flip, int quarter_turns) {
  const std::size_t p = img.shape().h;
  Image out(img.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < p; ++y)
      for (std::size_t x = 0; x < p; ++x) {
        // Invert the rotation: a CCW quarter turn maps (y, x) -> (p-1-x, y).
        std::size_t sy = y, sx = x;
        for (int k = 0; k < quarter_turns; ++k) {
          const std::size_t ny = sx, nx = p - 1 - sy;
          sy = ny;
          sx = nx;
        }
        if (flip) sx = p - 1 - sx;
        out.at(0, c, y, x) = img.at(0, c, sy, sx);
      }
  return out;
}

Image saturate(Image img, double factor) {
  if (factor == 1.0) return img;
  const std::size_t plane = img.shape().plane();
  for (std::size_t i = 0; i < plane; ++i) {
    const double r = img[i], g = img[plane + i], b = img[2 * plane + i];
    const double gray = (r + g + b) / 3.0;
    img[i] = static_cast<float>(std::clamp(gray + factor * (r - gray), 0.0, 1.0));
    img[plane + i] = static_cast<float>(std::clamp(gray + factor * (g - gray), 0.0, 1.0));
    img[2 * plane + i] = static_cast<float>(std::clamp(gray + factor * (b - gray), 0.0, 1.0));
  }
  return img;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

FrameSequence generate_toy_sequence(std::uint64_t seed, std::size_t length, std::size_t height, std::size_t width,
                                    const ToySceneOptions& options) {
  if (length < 1) throw std::invalid_argument("toy sequence: length must be >= 1");
  if (height == 0 || width == 0 || height % 4 != 0 || width % 4 != 0)
    throw std::invalid_argument("toy sequence: size must be positive and divisible by 4");
  std::mt19937_64 rng(seed);
  const Scene scene = make_scene(rng, height, width, options);
  FrameSequence seq;
  seq.seed = seed;
  const double centre = static_cast<double>(length - 1) / 2.0;
  for (std::size_t t = 0; t < length; ++t)
    seq.frames.push_back(render(scene, height, width, static_cast<double>(t) - centre));
  std::ostringstream motion;
  motion << "shapes=" << scene.shapes.size() << " pan=(" << scene.pan_x << "," << scene.pan_y << ")";
  for (const auto& s : scene.shapes) motion << " v=(" << s.vx << "," << s.vy << ") spin=" << s.spin;
  seq.motion = motion.str();
  return seq;
}

BlurPair synthesize_blur(const FrameSequence& seq, int n) {
  if (n < 1 || n % 2 == 0) throw std::invalid_argument("synthesize_blur: frame count must be odd and >= 1");
  const std::size_t len = seq.frames.size();
  const std::size_t centre = (len - 1) / 2;
  const std::size_t half = static_cast<std::size_t>(n / 2);
  if (len == 0 || half > centre || centre + half >= len)
    throw std::invalid_argument("synthesize_blur: a centred window of " + std::to_string(n) +
                                " frames does not fit a sequence of " + std::to_string(len));
  const Image& sharp = seq.frames[centre];
  std::vector<double> acc(sharp.size(), 0.0);
  for (std::size_t t = centre - half; t <= centre + half; ++t) {
    const Image& f = seq.frames[t];
    expect_same(f.shape(), sharp.shape(), "synthesize_blur frames");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
  }
  Image blurry(sharp.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) blurry[i] = static_cast<float>(acc[i] / n);
  return {std::move(blurry), sharp, n};
}

template <typename T>
Tensor<T> normalize(const Tensor<T>& img) {
  auto out = Tensor<T>::uninitialized(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = img[i] - T(0.5);
  return out;
}

template <typename T>
Tensor<T> denormalize(const Tensor<T>& img) {
  auto out = Tensor<T>::uninitialized(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) out[i] = img[i] + T(0.5);
  return out;
}

template <typename T>
Tensor<T> clip01(Tensor<T> img) {
  for (auto& v : img.vec()) v = std::clamp(v, T(0), T(1));
  return img;
}

AugmentDraw draw_augment(std::size_t height, std::size_t width, std::size_t patch, std::uint64_t seed,
                         const AugmentOptions& options) {
  if (patch == 0 || patch % 4 != 0) throw std::invalid_argument("augment: patch must be a positive multiple of 4");
  if (patch > height || patch > width)
    throw std::invalid_argument("augment: patch " + std::to_string(patch) + " exceeds image " +
                                std::to_string(height) + "x" + std::to_string(width));
  std::mt19937_64 rng(seed);
  AugmentDraw d;
  d.y0 = std::uniform_int_distribution<std::size_t>(0, height - patch)(rng);
  d.x0 = std::uniform_int_distribution<std::size_t>(0, width - patch)(rng);
  d.rotation = std::uniform_int_distribution<int>(0, 3)(rng);
  d.flip = std::uniform_int_distribution<int>(0, 1)(rng) == 1;
  d.saturation = std::uniform_real_distribution<double>(options.saturation_min, options.saturation_max)(rng);
  return d;
}

BlurPair apply_augment(const BlurPair& pair, std::size_t patch, const AugmentDraw& draw) {
  check_single_image(pair.blurry, "augment");
  expect_same(pair.blurry.shape(), pair.sharp.shape(), "augment pair");
  const Shape& s = pair.blurry.shape();
  if (draw.y0 + patch > s.h || draw.x0 + patch > s.w) throw std::invalid_argument("augment: crop window out of range");
  auto apply = [&](const Image& img) {
    return saturate(orient(crop(img, draw.y0, draw.x0, patch), draw.flip, draw.rotation), draw.saturation);
  };
  return {apply(pair.blurry), apply(pair.sharp), pair.blur_level};
}

BlurPair crop_and_augment(const BlurPair& pair, std::size_t patch, std::uint64_t seed, const AugmentOptions& options) {
  const Shape& s = pair.blurry.shape();
  return apply_augment(pair, patch, draw_augment(s.h, s.w, patch, seed, options));
}

Image add_gaussian_noise(const Image& img, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw std::invalid_argument("noise sigma must be >= 0");
  if (sigma == 0.0) return img;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> noise(0.0, sigma / 255.0);
  Image out(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    out[i] = static_cast<float>(std::clamp(static_cast<double>(img[i]) + noise(rng), 0.0, 1.0));
  return out;
}

Image reflect_pad(const Image& img, std::size_t multiple) {
  check_single_image(img, "reflect_pad");
  if (multiple == 0) throw std::invalid_argument("reflect_pad: multiple must be >= 1");
  const Shape& s = img.shape();
  const std::size_t ph = (s.h + multiple - 1) / multiple * multiple, pw = (s.w + multiple - 1) / multiple * multiple;
  if (ph - s.h >= s.h || pw - s.w >= s.w) throw ShapeError("reflect_pad: image " + s.str() + " is too small to mirror");
  auto mirror = [](std::size_t i, std::size_t n) { return i < n ? i : 2 * n - 2 - i; };
  Image out(Shape{1, 3, ph, pw});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x) out.at(0, c, y, x) = img.at(0, c, mirror(y, s.h), mirror(x, s.w));
  return out;
}

Image crop_to(const Image& img, std::size_t height, std::size_t width) {
  check_single_image(img, "crop_to");
  if (height > img.shape().h || width > img.shape().w) throw ShapeError("crop_to: target larger than image");
  Image out(Shape{1, 3, height, width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) out.at(0, c, y, x) = img.at(0, c, y, x);
  return out;
}

std::vector<int> default_blur_levels() { return {5, 7, 9, 11, 13, 15}; }

std::vector<BlurPair> make_toy_dataset(std::size_t pairs, std::size_t size, const std::vector<int>& levels,
                                       std::uint64_t base_seed, const ToySceneOptions& options) {
  if (levels.empty()) throw std::invalid_argument("toy dataset: no blur levels");
  const int longest = *std::max_element(levels.begin(), levels.end());
  std::vector<BlurPair> out;
  out.reserve(pairs);
  for (std::size_t i = 0; i < pairs; ++i) {
    const auto seq = generate_toy_sequence(base_seed + i, static_cast<std::size_t>(longest), size, size, options);
    out.push_back(synthesize_blur(seq, levels[i % levels.size()]));
  }
  return out;
}

// ---------------------------------------------------------------------------

Image read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const std::size_t h = image.height, w = image.width;
  Image out(Shape{1, 3, h, w});
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(0, c, y, x) = static_cast<float>(buffer[(y * w + x) * 3 + c]) / 255.0f;
  return out;
}

void write_png(const std::filesystem::path& path, const Image& img) {
  check_single_image(img, "write_png");
  const std::size_t h = img.shape().h, w = img.shape().w;
  std::vector<png_byte> buffer(h * w * 3);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(img.at(0, c, y, x), 0.0f, 1.0f);
        buffer[(y * w + x) * 3 + c] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buffer.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["blurry"] = r.blurry;
    j["sharp"] = r.sharp;
    j["blur_level"] = r.blur_level;
    j["seed"] = r.seed;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing manifest " + path.string());
}

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read manifest " + path.string());
  std::vector<ManifestRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("blurry").get<std::string>(), j.at("sharp").get<std::string>(), j.at("blur_level").get<int>(),
                     j.at("seed").get<std::uint64_t>()});
    } catch (const nlohmann::json::exception& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed manifest record: " + e.what());
    }
  }
  return out;
}

std::vector<BlurPair> load_manifest_pairs(const std::filesystem::path& path) {
  const auto base = path.parent_path();
  std::vector<BlurPair> out;
  for (const auto& r : read_manifest(path)) {
    BlurPair p{read_png(resolve(base, r.blurry)), read_png(resolve(base, r.sharp)), r.blur_level};
    expect_same(p.blurry.shape(), p.sharp.shape(), "manifest pair");
    out.push_back(std::move(p));
  }
  return out;
}

template Tensor<float> normalize(const Tensor<float>&);
template Tensor<double> normalize(const Tensor<double>&);
template Tensor<float> denormalize(const Tensor<float>&);
template Tensor<double> denormalize(const Tensor<double>&);
template Tensor<float> clip01(Tensor<float>);
template Tensor<double> clip01(Tensor<double>);

}  // namespace idem
