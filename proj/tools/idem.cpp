// Command-line front end: synth, init, train, eval, deblur.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "idem/data.hpp"
#include "idem/evaluation.hpp"
#include "idem/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfigError = 2, kIoError = 3, kNumericError = 4 };

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw idem::IoError("cannot open config " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw idem::ConfigError(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw idem::IoError("cannot write " + path.string());
  out << text << '\n';
}

// ---------------------------------------------------------------------------
// synth

struct SynthArgs {
  std::uint64_t seed = 0;
  std::size_t pairs = 200, size = 64;
  std::vector<int> levels = idem::default_blur_levels();
  fs::path out;
};

int cmd_synth(const SynthArgs& a) {
  for (int n : a.levels)
    if (n < 1 || n % 2 == 0) throw idem::ConfigError("--levels: blur levels must be odd and >= 1, got " + std::to_string(n));
  if (a.size == 0 || a.size % 4 != 0) throw idem::ConfigError("--size: must be a positive multiple of 4");
  fs::create_directories(a.out);
  const int longest = a.levels.empty() ? 1 : *std::max_element(a.levels.begin(), a.levels.end());
  std::vector<idem::ManifestRecord> records;
  for (std::size_t i = 0; i < a.pairs; ++i) {
    const std::uint64_t seed = a.seed + i;
    const auto seq = idem::generate_toy_sequence(seed, static_cast<std::size_t>(longest), a.size, a.size);
    for (int n : a.levels) {
      const auto pair = idem::synthesize_blur(seq, n);
      char stem[64];
      std::snprintf(stem, sizeof stem, "%05zu_l%02d", i, n);
      const std::string blurry = std::string(stem) + "_blurry.png", sharp = std::string(stem) + "_sharp.png";
      idem::write_png(a.out / blurry, pair.blurry);
      idem::write_png(a.out / sharp, pair.sharp);
      records.push_back({blurry, sharp, n, seed});
    }
  }
  idem::write_manifest(a.out / "manifest.jsonl", records);
  std::cout << "wrote " << records.size() << " pairs to " << (a.out / "manifest.jsonl").string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// train

// {"data": {"manifest": path} | {"toy": {...}}, "val_fraction": f}, "train": {...}}
struct RunConfig {
  fs::path manifest;
  std::size_t toy_pairs = 200, toy_size = 64;
  std::vector<int> toy_levels = idem::default_blur_levels();
  std::uint64_t toy_seed = 1000;
  double val_fraction = 0.2;
  idem::TrainConfig train;
  json train_json = json::object();

  ordered_json to_json() const {
    ordered_json d;
    if (!manifest.empty())
      d["manifest"] = manifest.string();
    else
      d["toy"] = {{"pairs", toy_pairs}, {"size", toy_size}, {"levels", toy_levels}, {"seed", toy_seed}};
    d["val_fraction"] = val_fraction;
    return {{"data", d}, {"train", idem::to_json(train)}};
  }
};

RunConfig parse_run_config(const json& j, const fs::path& base) {
  RunConfig rc;
  if (!j.is_object()) throw idem::ConfigError("config: expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "data" && it.key() != "train") throw idem::ConfigError("config." + it.key() + ": unknown key");
  if (j.contains("data")) {
    const json& d = j["data"];
    if (!d.is_object()) throw idem::ConfigError("config.data: expected an object");
    for (auto it = d.begin(); it != d.end(); ++it) {
      const std::string& k = it.key();
      const std::string where = "config.data." + k;
      if (k == "manifest") {
        if (!it->is_string()) throw idem::ConfigError(where + ": expected a path string");
        const fs::path p = it->get<std::string>();
        rc.manifest = p.is_absolute() ? p : base / p;
      } else if (k == "val_fraction") {
        if (!it->is_number()) throw idem::ConfigError(where + ": expected a number");
        rc.val_fraction = it->get<double>();
        if (!(rc.val_fraction >= 0 && rc.val_fraction < 1)) throw idem::ConfigError(where + ": must be in [0, 1)");
      } else if (k == "toy") {
        if (!it->is_object()) throw idem::ConfigError(where + ": expected an object");
        for (auto t = it->begin(); t != it->end(); ++t) {
          const std::string tw = where + "." + t.key();
          if (t.key() == "levels") {
            if (!t->is_array()) throw idem::ConfigError(tw + ": expected an array of odd integers");
            rc.toy_levels.clear();
            for (const auto& v : *t) {
              if (!v.is_number_integer() || v.get<int>() < 1 || v.get<int>() % 2 == 0)
                throw idem::ConfigError(tw + ": expected odd integers >= 1");
              rc.toy_levels.push_back(v.get<int>());
            }
          } else if (t.key() == "pairs" || t.key() == "size" || t.key() == "seed") {
            if (!t->is_number_unsigned()) throw idem::ConfigError(tw + ": expected a non-negative integer");
            const auto v = t->get<std::uint64_t>();
            if (t.key() == "pairs") rc.toy_pairs = v;
            else if (t.key() == "size") rc.toy_size = v;
            else rc.toy_seed = v;
          } else {
            throw idem::ConfigError(tw + ": unknown key");
          }
        }
      } else {
        throw idem::ConfigError(where + ": unknown key");
      }
    }
  }
  if (j.contains("train")) rc.train_json = j["train"];
  rc.train = idem::train_config_from_json(rc.train_json, "config.train");
  return rc;
}

struct TrainArgs {
  fs::path config, out, resume, data;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
};

int cmd_train(const TrainArgs& a) {
  json j = a.config.empty() ? json::object() : read_json_file(a.config);
  // Flags override the file before validation so errors still name a field.
  if (a.epochs) j["train"]["epochs"] = *a.epochs;
  if (a.seed) j["train"]["seed"] = *a.seed;
  if (a.lambda) j["train"]["loss"]["lambda"] = *a.lambda;
  if (!a.data.empty()) j["data"]["manifest"] = fs::absolute(a.data).string();
  RunConfig rc = parse_run_config(j, a.config.empty() ? fs::current_path() : a.config.parent_path());

  const std::string resolved = rc.to_json().dump(2);
  std::cout << "resolved config:\n" << resolved << '\n';
  fs::create_directories(a.out);
  write_text(a.out / "run_config.json", resolved);

  std::vector<idem::BlurPair> pairs = rc.manifest.empty()
                                          ? idem::make_toy_dataset(rc.toy_pairs, rc.toy_size, rc.toy_levels, rc.toy_seed)
                                          : idem::load_manifest_pairs(rc.manifest);
  auto [train_set, val_set] = idem::split_dataset(std::move(pairs), rc.val_fraction);
  std::cout << "train pairs " << train_set.size() << ", validation pairs " << val_set.size() << ", params "
            << idem::count_params(rc.train.widths) << '\n';

  idem::TrainOptions opts;
  opts.out_dir = a.out;
  if (!a.resume.empty()) opts.resume = idem::load_checkpoint(a.resume);
  opts.on_step = [](const idem::MetricsRow& r) {
    if (!std::isnan(r.val_psnr))
      std::cout << "epoch " << r.epoch << " step " << r.step << " loss " << r.total << " val_psnr " << r.val_psnr
                << std::endl;
  };
  const auto ckpt = idem::train(rc.train, train_set, val_set, opts);
  std::cout << "finished at epoch " << ckpt.epoch << ", step " << ckpt.step << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// init: an untrained (optionally zero-head) checkpoint

struct InitArgs {
  fs::path config, out;
  bool zero_head = false;
};

int cmd_init(const InitArgs& a) {
  // Accepts a bare train config or a full run config.
  const json j = a.config.empty() ? json::object() : read_json_file(a.config);
  const bool run = j.is_object() && j.contains("train");
  const auto cfg = idem::train_config_from_json(run ? j["train"] : j, run ? "config.train" : "config");
  idem::Checkpoint c;
  c.params = idem::init_params<float>(cfg.widths, cfg.seed);
  if (a.zero_head) idem::zero_head(c.params);
  c.config = idem::to_json(cfg);
  c.config_hash = idem::config_hash(cfg);
  idem::save_checkpoint(a.out, c);
  std::cout << "wrote " << a.out.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// eval / deblur

idem::TrainConfig checkpoint_config(const idem::Checkpoint& c) {
  return idem::train_config_from_json(json::parse(c.config.dump()), "checkpoint.config");
}

struct EvalArgs {
  fs::path checkpoint, data, out;
  std::size_t repeats = 1, deblur_times = 2;
};

int cmd_eval(const EvalArgs& a) {
  if (a.repeats < 1) throw idem::ConfigError("--repeats: must be >= 1");
  const auto ckpt = idem::load_checkpoint(a.checkpoint);
  const auto cfg = checkpoint_config(ckpt);
  const auto pairs = idem::load_manifest_pairs(a.data);
  if (pairs.empty()) throw idem::ConfigError("--data: manifest has no pairs");
  const auto report = idem::evaluate(ckpt.params, pairs, a.repeats, cfg.iterations, a.deblur_times);
  idem::write_report(a.out, report);
  std::cout << "images " << report.per_image.size() << " psnr " << report.mean_psnr << " ssim " << report.mean_ssim
            << " (blurry input " << report.blurry_psnr << ")\n";
  return kOk;
}

struct DeblurArgs {
  fs::path checkpoint, input, output;
  double noise_sigma = 0;
  std::uint64_t seed = 0;
  bool pad = false;
};

int cmd_deblur(const DeblurArgs& a) {
  const auto ckpt = idem::load_checkpoint(a.checkpoint);
  const auto cfg = checkpoint_config(ckpt);
  idem::Image img = idem::read_png(a.input);
  const std::size_t h = img.shape().h, w = img.shape().w;
  img = idem::add_gaussian_noise(img, a.noise_sigma, a.seed);
  if (a.pad) img = idem::reflect_pad(img, 4);
  const auto out = idem::progressive_deblur(ckpt.params, idem::normalize(img), cfg.iterations).final_image;
  idem::Image result = idem::to_display(out);
  if (a.pad) result = idem::crop_to(result, h, w);
  idem::write_png(a.output, result);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Idempotent progressive deblurring"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Render toy sequences and write blurry/sharp PNG pairs plus a manifest");
  s->add_option("--seed", synth.seed, "Base scene seed");
  s->add_option("--pairs", synth.pairs, "Number of scenes");
  s->add_option("--size", synth.size, "Square image size (multiple of 4)");
  s->add_option("--levels", synth.levels, "Blur levels (odd frame counts)")->delimiter(',');
  s->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train from a JSON run config");
  t->add_option("--config", train.config, "Run config (JSON)")->check(CLI::ExistingFile);
  t->add_option("--out", train.out, "Output directory")->required();
  t->add_option("--resume", train.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  t->add_option("--data", train.data, "Manifest overriding config.data")->check(CLI::ExistingFile);
  t->add_option("--epochs", train.epochs, "Override train.epochs");
  t->add_option("--seed", train.seed, "Override train.seed");
  t->add_option("--lambda", train.lambda, "Override train.loss.lambda");

  InitArgs init;
  auto* in = app.add_subcommand("init", "Write an untrained checkpoint");
  in->add_option("--config", init.config, "Train or run config (JSON)")->check(CLI::ExistingFile);
  in->add_option("--out", init.out, "Checkpoint path")->required();
  in->add_flag("--zero-head", init.zero_head, "Zero the output head (identity model)");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Score a checkpoint on a manifest");
  e->add_option("--checkpoint", eval.checkpoint)->required();
  e->add_option("--data", eval.data, "Manifest")->required();
  e->add_option("--repeats", eval.repeats, "Re-deblur repeats for the stability curve");
  e->add_option("--deblur-times", eval.deblur_times, "Passes in the residual table");
  e->add_option("--out", eval.out, "Report directory")->required();

  DeblurArgs deblur;
  auto* d = app.add_subcommand("deblur", "Deblur one PNG");
  d->add_option("--checkpoint", deblur.checkpoint)->required();
  d->add_option("--input-image", deblur.input)->required();
  d->add_option("--output-image", deblur.output)->required();
  d->add_option("--noise-sigma", deblur.noise_sigma, "Gaussian noise std on the 8-bit scale, added before inference");
  d->add_option("--seed", deblur.seed, "Noise seed");
  d->add_flag("--pad", deblur.pad, "Reflect-pad to a multiple of 4 and crop back");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*t) return cmd_train(train);
    if (*in) return cmd_init(init);
    if (*e) return cmd_eval(eval);
    if (*d) return cmd_deblur(deblur);
  } catch (const idem::NumericError& err) {
    std::cerr << "numeric error: " << err.what() << '\n';
    return kNumericError;
  } catch (const idem::IoError& err) {
    std::cerr << "i/o error: " << err.what() << '\n';
    return kIoError;
  } catch (const fs::filesystem_error& err) {
    std::cerr << "i/o error: " << err.what() << '\n';
    return kIoError;
  } catch (const std::invalid_argument& err) {
    std::cerr << "config error: " << err.what() << '\n';
    return kConfigError;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
