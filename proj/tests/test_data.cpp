#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "idem/data.hpp"
#include "idem/evaluation.hpp"
#include "support.hpp"

using namespace idem;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("idem_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

bool within(const Image& v, const Image& lo, const Image& hi) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (v[i] < lo[i] - 1e-6f || v[i] > hi[i] + 1e-6f) return false;
  return true;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("toy sequences are deterministic and in range") {
    const auto a = generate_toy_sequence(3, 7, 32, 48);
    const auto b = generate_toy_sequence(3, 7, 32, 48);
    const auto c = generate_toy_sequence(4, 7, 32, 48);
    REQUIRE(a.frames.size() == 7);
    CHECK(a.frames == b.frames);
    CHECK(a.motion == b.motion);
    CHECK_FALSE(a.frames == c.frames);
    for (const auto& f : a.frames) {
      CHECK(f.shape() == Shape{1, 3, 32, 48});
      for (float v : f.vec()) CHECK((v >= 0.0f && v <= 1.0f));
    }
    // Moving content: consecutive frames differ.
    CHECK_FALSE(a.frames[2] == a.frames[3]);
    CHECK_THROWS_AS(generate_toy_sequence(0, 0, 32, 32), std::invalid_argument);
    CHECK_THROWS_AS(generate_toy_sequence(0, 3, 30, 32), std::invalid_argument);
  }

  TEST_CASE("static scenes give identical frames and no blur") {
    ToySceneOptions still;
    still.motion_scale = 0.0;
    const auto seq = generate_toy_sequence(5, 9, 32, 32, still);
    for (const auto& f : seq.frames) CHECK(f == seq.frames.front());
    for (int n : {1, 3, 9}) CHECK(synthesize_blur(seq, n).blurry == synthesize_blur(seq, n).sharp);
  }

  TEST_CASE("blur synthesis") {
    const auto seq = generate_toy_sequence(11, 15, 32, 32);
    const auto one = synthesize_blur(seq, 1);
    CHECK(one.blurry == one.sharp);
    CHECK(one.sharp == seq.frames[7]);
    const auto single = generate_toy_sequence(11, 1, 32, 32);
    CHECK(synthesize_blur(single, 1).blurry == single.frames[0]);

    const auto p = synthesize_blur(seq, 5);
    CHECK(p.blur_level == 5);
    CHECK(p.sharp == seq.frames[7]);
    Image lo = seq.frames[5], hi = seq.frames[5];
    for (std::size_t t = 5; t <= 9; ++t)
      for (std::size_t i = 0; i < lo.size(); ++i) {
        lo[i] = std::min(lo[i], seq.frames[t][i]);
        hi[i] = std::max(hi[i], seq.frames[t][i]);
      }
    CHECK(within(p.blurry, lo, hi));
    // Mean of frames 5..9, by hand at a few pixels.
    for (std::size_t i : {0ul, 100ul, 1000ul, 3071ul}) {
      double s = 0;
      for (std::size_t t = 5; t <= 9; ++t) s += seq.frames[t][i];
      CHECK(p.blurry[i] == static_cast<float>(s / 5));
    }
    CHECK_THROWS_AS(synthesize_blur(seq, 4), std::invalid_argument);
    CHECK_THROWS_AS(synthesize_blur(seq, 17), std::invalid_argument);
  }

  TEST_CASE("PSNR ladder is non-increasing in the blur level") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      CAPTURE(seed);
      const auto seq = generate_toy_sequence(seed, 15, 64, 64);
      double prev = kPsnrCap;
      for (int n = 1; n <= 15; n += 2) {
        const auto p = synthesize_blur(seq, n);
        const double v = psnr(p.blurry, p.sharp);
        CHECK(v <= prev);
        prev = v;
      }
    }
  }

  TEST_CASE("normalization") {
    Image img(Shape{1, 3, 2, 2});
    img[0] = 0.0f;
    img[1] = 1.0f;
    img[2] = 0.75f;
    const auto n = normalize(img);
    CHECK(n[0] == -0.5f);
    CHECK(n[1] == 0.5f);
    CHECK(n[2] == 0.25f);
    // Exact for every 8-bit level once requantized, and for any value on the 2^-24 grid.
    Image levels(Shape{1, 3, 16, 16});
    for (std::size_t i = 0; i < 256; ++i) levels[i] = static_cast<float>(i) / 255.0f;
    const auto back = denormalize(normalize(levels));
    for (std::size_t i = 0; i < 256; ++i) CHECK(std::lround(back[i] * 255.0f) == static_cast<long>(i));
    auto grid = idem::testing::random_tensor<float>({1, 3, 8, 8}, 3, 0.0, 1.0);
    for (auto& v : grid.vec()) v = std::ldexp(std::round(std::ldexp(v, 24)), -24);
    CHECK(denormalize(normalize(grid)) == grid);
    // Arbitrary floats lose at most half an ulp of 0.5.
    const auto any = idem::testing::random_tensor<float>({1, 3, 8, 8}, 4, 0.0, 1.0);
    const auto rt = denormalize(normalize(any));
    for (std::size_t i = 0; i < any.size(); ++i) CHECK(std::abs(rt[i] - any[i]) <= std::ldexp(1.0f, -26));
    // denormalize never clips; clip01 does.
    Image wide(Shape{1, 1, 1, 2}, std::vector<float>{-0.9f, 0.8f});
    CHECK(denormalize(wide)[0] < 0.0f);
    CHECK(clip01(denormalize(wide)) == Image(Shape{1, 1, 1, 2}, std::vector<float>{0.0f, 1.0f}));
  }

  TEST_CASE("augmentation") {
    const auto pair = synthesize_blur(generate_toy_sequence(21, 9, 32, 32), 7);
    const auto a = crop_and_augment(pair, 16, 5);
    const auto b = crop_and_augment(pair, 16, 5);
    CHECK(a.blurry == b.blurry);
    CHECK(a.sharp == b.sharp);
    CHECK(a.blurry.shape() == Shape{1, 3, 16, 16});

    // Identity draw: plain sub-window.
    AugmentDraw id;
    id.y0 = 4;
    id.x0 = 8;
    const auto w = apply_augment(pair, 16, id);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 16; ++y)
        for (std::size_t x = 0; x < 16; ++x) {
          CHECK(w.blurry.at(0, c, y, x) == pair.blurry.at(0, c, y + 4, x + 8));
          CHECK(w.sharp.at(0, c, y, x) == pair.sharp.at(0, c, y + 4, x + 8));
        }

    // Geometric transforms are isometries: identical error on the same window.
    const double base = psnr(w.blurry, w.sharp);
    for (int rot = 0; rot < 4; ++rot)
      for (bool flip : {false, true}) {
        AugmentDraw d = id;
        d.rotation = rot;
        d.flip = flip;
        const auto t = apply_augment(pair, 16, d);
        CHECK(psnr(t.blurry, t.sharp) == doctest::Approx(base).epsilon(1e-12));
      }
    // One CCW quarter turn moves the top-right corner to the top-left.
    AugmentDraw r1 = id;
    r1.rotation = 1;
    CHECK(apply_augment(pair, 16, r1).sharp.at(0, 0, 0, 0) == w.sharp.at(0, 0, 0, 15));
    AugmentDraw fl = id;
    fl.flip = true;
    CHECK(apply_augment(pair, 16, fl).sharp.at(0, 1, 3, 0) == w.sharp.at(0, 1, 3, 15));

    // Saturation: same factor on both images; gray pixels unchanged.
    AugmentDraw sat = id;
    sat.saturation = 1.2;
    BlurPair gray{Image(Shape{1, 3, 32, 32}, 0.4f), Image(Shape{1, 3, 32, 32}, 0.6f), 1};
    const auto g = apply_augment(gray, 16, sat);
    for (float v : g.blurry.vec()) CHECK(v == doctest::Approx(0.4f));
    const auto s = apply_augment(pair, 16, sat);
    CHECK_FALSE(s.blurry == w.blurry);

    // Draws cover every rotation and both flips over many seeds, factors in range.
    std::set<int> rotations;
    std::set<bool> flips;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
      const auto d = draw_augment(32, 32, 16, seed);
      rotations.insert(d.rotation);
      flips.insert(d.flip);
      CHECK(d.saturation >= 0.8);
      CHECK(d.saturation <= 1.2);
      CHECK(d.y0 <= 16);
      CHECK(d.x0 <= 16);
    }
    CHECK(rotations.size() == 4);
    CHECK(flips.size() == 2);

    CHECK_THROWS_AS(crop_and_augment(pair, 64, 0), std::invalid_argument);
    CHECK_THROWS_AS(crop_and_augment(pair, 10, 0), std::invalid_argument);
  }

  TEST_CASE("gaussian noise") {
    const Image gray(Shape{1, 3, 256, 256}, 0.5f);
    CHECK(add_gaussian_noise(gray, 0.0, 1) == gray);
    CHECK(add_gaussian_noise(gray, 20.0, 7) == add_gaussian_noise(gray, 20.0, 7));
    CHECK_FALSE(add_gaussian_noise(gray, 20.0, 7) == add_gaussian_noise(gray, 20.0, 8));
    const auto noisy = add_gaussian_noise(gray, 20.0, 7);
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < gray.size(); ++i) {
      const double d = static_cast<double>(noisy[i]) - 0.5;
      mean += d;
      sq += d * d;
    }
    mean /= static_cast<double>(gray.size());
    const double sd = std::sqrt(sq / static_cast<double>(gray.size()) - mean * mean);
    CHECK(std::abs(sd - 20.0 / 255.0) <= 0.05 * 20.0 / 255.0);
    CHECK_THROWS_AS(add_gaussian_noise(gray, -1.0, 0), std::invalid_argument);
  }

  TEST_CASE("reflect padding") {
    auto img = idem::testing::random_tensor<float>({1, 3, 5, 6}, 9, 0.0, 1.0);
    const auto padded = reflect_pad(img, 4);
    CHECK(padded.shape() == Shape{1, 3, 8, 8});
    CHECK(padded.at(0, 0, 5, 0) == img.at(0, 0, 3, 0));
    CHECK(padded.at(0, 2, 7, 6) == img.at(0, 2, 1, 4));
    CHECK(crop_to(padded, 5, 6) == img);
    CHECK(reflect_pad(crop_to(padded, 8, 8), 4) == padded);
  }

  TEST_CASE("toy dataset cycles blur levels") {
    const auto set = make_toy_dataset(8, 32, default_blur_levels(), 100);
    REQUIRE(set.size() == 8);
    for (std::size_t i = 0; i < set.size(); ++i) CHECK(set[i].blur_level == default_blur_levels()[i % 6]);
    CHECK(make_toy_dataset(8, 32, default_blur_levels(), 100)[3].blurry == set[3].blurry);
  }

  TEST_CASE("png and manifest round trip") {
    const auto dir = scratch_dir("png");
    Image img(Shape{1, 3, 4, 8});
    for (std::size_t i = 0; i < img.size(); ++i) img[i] = static_cast<float>(i % 256) / 255.0f;
    write_png(dir / "a.png", img);
    CHECK(read_png(dir / "a.png") == img);
    write_png(dir / "b.png", img);

    const std::vector<ManifestRecord> recs{{"a.png", "b.png", 5, 42}, {"b.png", "a.png", 7, 43}};
    write_manifest(dir / "m.jsonl", recs);
    CHECK(read_manifest(dir / "m.jsonl") == recs);
    const auto pairs = load_manifest_pairs(dir / "m.jsonl");
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[1].blur_level == 7);
    CHECK(pairs[0].blurry == img);

    {
      std::ofstream bad(dir / "bad.jsonl");
      bad << R"({"blurry":"a.png","sharp":"b.png","blur_level":5,"seed":1})" << "\n{oops}\n";
    }
    try {
      read_manifest(dir / "bad.jsonl");
      FAIL("expected an error");
    } catch (const IoError& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    CHECK_THROWS_AS(read_png(dir / "missing.png"), IoError);
    CHECK_THROWS_AS(read_manifest(dir / "missing.jsonl"), IoError);
    fs::remove_all(dir);
  }
}
