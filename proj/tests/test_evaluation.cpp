#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "idem/evaluation.hpp"
#include "support.hpp"

using namespace idem;
using idem::testing::random_tensor;

TEST_SUITE("evaluation") {
  TEST_CASE("psnr against constructed errors") {
    const Shape s{1, 3, 16, 16};
    const Tensor<double> a(s, 0.5);
    for (double d : {0.1, 0.01, 1.0 / 255.0, 0.3}) {
      Tensor<double> b = a, alt = a;
      for (std::size_t i = 0; i < b.size(); ++i) {
        b[i] += d;
        alt[i] += (i % 2 ? d : -d);
      }
      CHECK(std::abs(psnr(a, b) - (-20.0 * std::log10(d))) <= 1e-9);
      CHECK(std::abs(psnr(a, alt) - (-20.0 * std::log10(d))) <= 1e-9);
    }
    // Half the elements off by d: MSE = d^2 / 2.
    Tensor<double> half = a;
    for (std::size_t i = 0; i < half.size(); i += 2) half[i] += 0.2;
    CHECK(std::abs(psnr(a, half) - 10.0 * std::log10(2.0 / 0.04)) <= 1e-9);
    CHECK(psnr(a, a) == kPsnrCap);
    CHECK_THROWS_AS(psnr(a, Tensor<double>(Shape{1, 3, 16, 15})), ShapeError);
  }

  TEST_CASE("ssim") {
    const auto x = random_tensor<double>({2, 3, 24, 20}, 1, 0.0, 1.0);
    CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
    const auto y = random_tensor<double>({2, 3, 24, 20}, 2, 0.0, 1.0);
    const double v = ssim(x, y);
    CHECK(v < 0.2);
    CHECK(v == doctest::Approx(ssim(y, x)).epsilon(1e-12));
    // A constant offset keeps structure and contrast; only luminance drops.
    Tensor<double> shifted = x;
    for (auto& e : shifted.vec()) e += 0.05;
    const double s = ssim(x, shifted);
    CHECK(s < 1.0);
    CHECK(s > 0.95);
    // Two constant images: only the luminance term is left.
    const Tensor<double> c1(Shape{1, 1, 11, 11}, 0.2), c2(Shape{1, 1, 11, 11}, 0.6);
    const double k1 = 1e-4;
    CHECK(ssim(c1, c2) == doctest::Approx((2 * 0.2 * 0.6 + k1) / (0.04 + 0.36 + k1)).epsilon(1e-12));
    CHECK_THROWS_AS(ssim(Tensor<double>(Shape{1, 3, 8, 8}), Tensor<double>(Shape{1, 3, 8, 8})), ShapeError);
  }

  TEST_CASE("zero-residual model is a fixed point of every probe") {
    auto p = init_params<float>({4, 8, 16}, 3);
    zero_head(p);
    const auto set = make_toy_dataset(5, 32, default_blur_levels(), 77);
    const auto curve = stability_probe(p, set, 10, 6);
    REQUIRE(curve.size() == 10);
    for (double v : curve) CHECK(v == curve.front());
    CHECK(curve.front() == doctest::Approx(mean_blurry_psnr(set)).epsilon(1e-6));
    const auto rows = residual_stats(p, set, 2, 6);
    REQUIRE(rows.size() == 12);
    for (const auto& r : rows) {
      CHECK(r.every == 0.0);
      CHECK(r.sum == 0.0);
      CHECK(r.sum_direct == 0.0);
    }
  }

  TEST_CASE("residual sums telescope") {
    const auto p = init_params<float>({4, 8, 16}, 5);
    const auto set = make_toy_dataset(3, 32, default_blur_levels(), 90);
    for (const auto& r : residual_stats(p, set, 2, 3)) {
      CAPTURE(r.pass);
      CAPTURE(r.iteration);
      CHECK(r.sum == doctest::Approx(r.sum_direct).epsilon(1e-4));
    }
  }

  TEST_CASE("report files") {
    auto p = init_params<float>({2, 4, 8}, 1);
    zero_head(p);
    const auto set = make_toy_dataset(3, 32, default_blur_levels(), 5);
    const auto dir = std::filesystem::temp_directory_path() / "idem_test_report";
    std::filesystem::remove_all(dir);

    auto report = evaluate(p, set, 1, 2);
    CHECK(report.per_image.size() == 3);
    CHECK(report.mean_psnr == doctest::Approx(report.blurry_psnr).epsilon(1e-6));
    write_report(dir, report);
    CHECK(std::filesystem::exists(dir / "summary.json"));
    CHECK(std::filesystem::exists(dir / "per_image.csv"));
    CHECK_FALSE(std::filesystem::exists(dir / "stability.csv"));

    report = evaluate(p, set, 10, 2);
    write_report(dir, report);
    std::ifstream in(dir / "stability.csv");
    std::string line;
    std::size_t lines = 0;
    std::getline(in, line);
    CHECK(line == "k,psnr");
    while (std::getline(in, line)) ++lines;
    CHECK(lines == 10);
    std::filesystem::remove_all(dir);
  }
}
