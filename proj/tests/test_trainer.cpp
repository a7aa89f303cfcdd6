#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "idem/evaluation.hpp"
#include "idem/trainer.hpp"
#include "support.hpp"

using namespace idem;
using idem::testing::random_tensor;
namespace fs = std::filesystem;

namespace {

TrainConfig tiny_config() {
  TrainConfig c;
  c.widths = {2, 3, 4};
  c.patch = 16;
  c.batch_size = 2;
  c.iterations = 2;
  c.epochs = 2;
  c.lr0 = 1e-3;
  c.seed = 5;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("idem_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    c.decay_every = 500;
    CHECK(lr_schedule(0, c) == 1e-4);
    CHECK(lr_schedule(499, c) == 1e-4);
    CHECK(lr_schedule(500, c) == 5e-5);
    CHECK(lr_schedule(1500, c) == doctest::Approx(1.25e-5).epsilon(1e-15));
  }

  TEST_CASE("config validation and parsing") {
    TrainConfig c;
    CHECK(c.iterations == 6);
    CHECK(c.deblur_times == 2);
    CHECK(c.batch_size == 4);
    CHECK(c.lr0 == 1e-4);
    CHECK(c.adam.beta1 == 0.9);
    CHECK(c.adam.beta2 == 0.999);
    CHECK(c.adam.epsilon == 1e-8);
    CHECK_NOTHROW(c.validate());

    c.deblur_times = 1;
    c.loss.alpha = {1.0};
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.loss.lambda_idem = 0.0;
    CHECK_NOTHROW(c.validate());
    c.iterations = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);

    auto error_of = [](const char* text) -> std::string {
      try {
        train_config_from_json(nlohmann::json::parse(text));
      } catch (const ConfigError& e) {
        return e.what();
      }
      return "";
    };
    CHECK(error_of(R"({"loss": {"lambda": "big"}})").find("config.loss.lambda") == 0);
    CHECK(error_of(R"({"adam": {"beta3": 1}})").find("config.adam.beta3") == 0);
    CHECK(error_of(R"({"widths": [1, 2]})").find("config.widths") == 0);
    CHECK(error_of(R"({"batch_size": -1})").find("config.batch_size") == 0);
    CHECK(error_of(R"({"deblur_times": 1})").find("config.deblur_times") == 0);
    CHECK(error_of(R"({"patch": 30})").find("config.patch") == 0);

    const auto three = train_config_from_json(nlohmann::json::parse(R"({"deblur_times": 3})"));
    CHECK(three.loss.alpha == std::vector<double>{1.0, 1.0, 1.0});
    const auto full = tiny_config();
    const auto back = train_config_from_json(nlohmann::json::parse(to_json(full).dump()));
    CHECK(to_json(back) == to_json(full));
  }

  TEST_CASE("config hash ignores bookkeeping only") {
    const auto a = tiny_config();
    auto b = a;
    b.epochs = 100;
    b.checkpoint_every = 3;
    b.validate_every = 7;
    CHECK(config_hash(a) == config_hash(b));
    b.lr0 *= 2;
    CHECK(config_hash(a) != config_hash(b));
    auto c = a;
    c.loss.lambda_idem = 0;
    CHECK(config_hash(a) != config_hash(c));
  }

  TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
    const auto cfg = tiny_config();
    auto p = init_params<float>(cfg.widths, 1);
    const auto before = p;
    AdamState<float> opt;
    const auto x = random_tensor<float>({2, 3, 8, 8}, 2, -0.5, 0.5);
    const auto y = random_tensor<float>({2, 3, 8, 8}, 3, -0.5, 0.5);
    const auto m = train_step(p, opt, x, y, cfg, 0.0);
    CHECK(p == before);
    CHECK(m.grad_norm > 0.0);
    CHECK(opt.step == 1);
  }

  TEST_CASE("single-pass reduction matches a hand-built transcript") {
    TrainConfig cfg = tiny_config();
    cfg.iterations = 1;
    cfg.loss.lambda_idem = 0.0;
    cfg.loss.alpha = {1.0, 0.0};
    const auto p = init_params<double>(cfg.widths, 4);
    const auto x = random_tensor<double>({2, 3, 8, 8}, 5, -0.5, 0.5);
    const auto y = random_tensor<double>({2, 3, 8, 8}, 6, -0.5, 0.5);
    const auto two = loss_and_gradients(p, x, y, cfg);

    // Transcript: one unit from a zero state, then mean |out - y|.
    const auto out = idem::testing::unit_oracle(p, x, RecurrentState<double>::zeros(2, 8, 8, cfg.widths)).image;
    double l1 = 0;
    for (std::size_t i = 0; i < out.size(); ++i) l1 += std::abs(out[i] - y[i]);
    l1 /= static_cast<double>(out.size());
    CHECK(two.loss.total == doctest::Approx(l1).epsilon(1e-12));
    CHECK(two.loss.idem == doctest::Approx(idempotent_loss(out, progressive_deblur(p, out, 1).final_image)));

    TrainConfig single = cfg;
    single.deblur_times = 1;
    single.loss.alpha = {1.0};
    const auto one = loss_and_gradients(p, x, y, single);
    const auto ga = flatten_values(two.grads), gb = flatten_values(one.grads);
    for (std::size_t i = 0; i < ga.size(); ++i) CHECK(ga[i] == doctest::Approx(gb[i]).epsilon(1e-12));
  }

  TEST_CASE("the second pass contributes to the gradient") {
    const TrainConfig cfg = tiny_config();
    const auto p = init_params<double>(cfg.widths, 8);
    const auto x = random_tensor<double>({2, 3, 8, 8}, 9, -0.5, 0.5);
    const auto y = random_tensor<double>({2, 3, 8, 8}, 10, -0.5, 0.5);
    const auto full = loss_and_gradients(p, x, y, cfg);
    GradientOptions detached;
    detached.detach_between_passes = true;
    const auto cut = loss_and_gradients(p, x, y, cfg, detached);
    CHECK(full.loss.total == cut.loss.total);
    const auto a = flatten_values(full.grads), b = flatten_values(cut.grads);
    double diff = 0;
    for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
    CHECK(diff > 1e-6);

    // And the resulting updates differ.
    auto pa = p, pb = p;
    AdamState<double> oa, ob;
    std::vector<double> va = flatten_values(pa), vb = flatten_values(pb);
    adam_update<double>(va, a, oa, 1e-3, cfg.adam);
    adam_update<double>(vb, b, ob, 1e-3, cfg.adam);
    CHECK(va != vb);
  }

  TEST_CASE("one step descends on its own batch") {
    TrainConfig cfg;
    cfg.widths = {4, 8, 16};
    const auto data = make_toy_dataset(40, 32, default_blur_levels(), 300);
    int decreased = 0;
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
      auto p = init_params<float>(cfg.widths, trial);
      AdamState<float> opt;
      std::vector<BlurPair> batch;
      for (std::size_t j = 0; j < 2; ++j)
        batch.push_back(crop_and_augment(data[(2 * trial + j) % data.size()], 16, trial * 7 + j));
      auto [x, y] = make_batch(batch);
      const auto m = train_step(p, opt, x, y, cfg, 1e-4);
      const auto after = loss_and_gradients(p, x, y, cfg).loss.total;
      if (after < m.total) ++decreased;
    }
    CHECK(decreased >= 95);
  }

  TEST_CASE("adam minimizes a quadratic bowl") {
    AdamConfig cfg;
    AdamState<double> st;
    std::vector<double> x{0.0};
    const double target = 3.0;
    std::size_t steps = 0;
    for (; steps < 2000; ++steps) {
      const std::vector<double> g{2.0 * (x[0] - target)};
      adam_update<double>(x, g, st, 0.05 * std::pow(0.5, static_cast<double>(steps / 250)), cfg);
      if (std::abs(x[0] - target) <= 1e-6 && steps > 300) break;
    }
    CHECK(std::abs(x[0] - target) <= 1e-6);
    CHECK(steps < 2000);
    // First step moves by exactly lr against the gradient sign.
    AdamState<double> fresh;
    std::vector<double> y{1.0};
    adam_update<double>(y, std::vector<double>{4.0}, fresh, 0.1, cfg);
    CHECK(y[0] == doctest::Approx(0.9).epsilon(1e-9));
  }

  TEST_CASE("non-finite loss aborts the step") {
    const auto cfg = tiny_config();
    auto p = init_params<float>(cfg.widths, 1);
    AdamState<float> opt;
    auto x = random_tensor<float>({1, 3, 8, 8}, 2);
    x[5] = std::numeric_limits<float>::quiet_NaN();
    const auto before = p;
    CHECK_THROWS_AS(train_step(p, opt, x, Tensor<float>(Shape{1, 3, 8, 8}), cfg, 1e-3), NumericError);
    CHECK(p == before);
  }

  TEST_CASE("checkpoint round trip is bit-exact") {
    const auto dir = scratch_dir("ckpt");
    Checkpoint c;
    c.params = init_params<float>({2, 3, 4}, 3);
    c.optimizer.m = {1.5f, -0.0f, 3e-30f};
    c.optimizer.v = {0.25f, 7.0f, 1e-38f};
    c.optimizer.step = 17;
    c.epoch = 4;
    c.step = 99;
    c.config = to_json(tiny_config());
    c.config_hash = config_hash(tiny_config());
    c.best_val_psnr = 23.456789012345678;
    MetricsRow r;
    r.step = 1;
    r.epoch = 1;
    r.lr = 1e-4;
    r.total = 0.1 + 0.2;
    r.idem = 1.0 / 3.0;
    r.sharp = 2.0 / 7.0;
    c.history = {r, r};
    c.history[1].val_psnr = 20.125;
    save_checkpoint(dir / "c.ckpt", c);
    const auto d = load_checkpoint(dir / "c.ckpt");
    CHECK(d.params == c.params);
    CHECK(d.optimizer == c.optimizer);
    CHECK(d.epoch == c.epoch);
    CHECK(d.step == c.step);
    CHECK(d.config == c.config);
    CHECK(d.config_hash == c.config_hash);
    CHECK(d.best_val_psnr == c.best_val_psnr);
    CHECK(d.history == c.history);
    save_checkpoint(dir / "d.ckpt", d);
    CHECK(slurp(dir / "c.ckpt") == slurp(dir / "d.ckpt"));

    {
      std::ofstream junk(dir / "junk.ckpt");
      junk << "not a checkpoint";
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "junk.ckpt"), IoError);
    CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
    const auto bytes = slurp(dir / "c.ckpt");
    {
      std::ofstream cut(dir / "cut.ckpt", std::ios::binary);
      cut << bytes.substr(0, bytes.size() - 10);
    }
    CHECK_THROWS_AS(load_checkpoint(dir / "cut.ckpt"), IoError);
    fs::remove_all(dir);
  }

  TEST_CASE("zero epochs, resume, and determinism") {
    const auto set = make_toy_dataset(10, 16, default_blur_levels(), 400);
    auto [train_set, val_set] = split_dataset(set, 0.2);
    CHECK(train_set.size() == 8);
    CHECK(val_set.size() == 2);
    CHECK(val_set[0].blurry == set[8].blurry);

    TrainConfig cfg = tiny_config();
    cfg.epochs = 0;
    const auto dir = scratch_dir("train");
    TrainOptions opts;
    opts.out_dir = dir / "zero";
    const auto zero = train(cfg, train_set, val_set, opts);
    CHECK(zero.params == init_params<float>(cfg.widths, cfg.seed));
    CHECK(zero.step == 0);
    CHECK(fs::exists(dir / "zero" / "last.ckpt"));

    cfg.epochs = 2;
    opts.out_dir = dir / "a";
    const auto a = train(cfg, train_set, val_set, opts);
    opts.out_dir = dir / "b";
    const auto b = train(cfg, train_set, val_set, opts);
    CHECK(a.step == 8);
    CHECK(a.params == b.params);
    CHECK(a.history == b.history);
    CHECK(slurp(dir / "a" / "metrics.csv") == slurp(dir / "b" / "metrics.csv"));
    CHECK(slurp(dir / "a" / "metrics.csv").rfind(std::string(kMetricsHeader) + "\n", 0) == 0);
    CHECK_FALSE(a.params == zero.params);
    CHECK(std::isfinite(a.history.back().val_psnr));

    // Resuming with no further epochs changes nothing.
    TrainOptions resume;
    resume.resume = load_checkpoint(dir / "a" / "last.ckpt");
    const auto again = train(cfg, train_set, val_set, resume);
    CHECK(again.params == a.params);
    CHECK(again.optimizer == a.optimizer);

    // One epoch then resume to two equals two straight epochs.
    cfg.epochs = 1;
    opts.out_dir = dir / "half";
    train(cfg, train_set, val_set, opts);
    cfg.epochs = 2;
    TrainOptions cont;
    cont.resume = load_checkpoint(dir / "half" / "last.ckpt");
    const auto resumed = train(cfg, train_set, val_set, cont);
    CHECK(resumed.params == a.params);
    CHECK(resumed.history == a.history);

    // A different optimisation config cannot resume this run.
    cfg.lr0 *= 2;
    CHECK_THROWS_AS(train(cfg, train_set, val_set, resume), ConfigError);
    CHECK_THROWS_AS(train(cfg, {}, val_set, {}), std::invalid_argument);
    fs::remove_all(dir);
  }
}
