#pragma once

#include <filesystem>
#include <vector>

#include "idem/data.hpp"
#include "idem/network.hpp"
#include "idem/tensor.hpp"

namespace idem {

/// Returned by psnr for identical inputs.
inline constexpr double kPsnrCap = 100.0;

/// Peak 1.0, one MSE over every element; capped at kPsnrCap.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b);

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Gaussian-windowed SSIM over every valid window position, averaged over
/// channels and batch.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b, const SsimOptions& options = {});

struct ImageScore {
  double psnr_db = 0, ssim = 0;
};

struct ResidualRow {
  std::size_t pass = 0, iteration = 0;  // 1-based
  double psnr_db = 0;
  double every = 0;       // mean |residual| x 255
  double sum = 0;         // mean |running sum of residuals| x 255
  double sum_direct = 0;  // mean |image - pass input| x 255
};

struct EvalReport {
  std::vector<ImageScore> per_image;
  double mean_psnr = 0, mean_ssim = 0;
  double blurry_psnr = 0;  // input baseline
  std::vector<double> stability_curve;
  std::vector<ResidualRow> residual_table;
};

/// Converts a network output back to [0,1] for metrics.
Image to_display(const Tensor<float>& normalized);

/// Mean PSNR of single-pass outputs against the sharp targets.
double mean_psnr(const ModelParams<float>& params, const std::vector<BlurPair>& testset, std::size_t iterations);
double mean_blurry_psnr(const std::vector<BlurPair>& testset);

/// curve[k-1] = mean PSNR after k repeated applications, k = 1..repeats.
std::vector<double> stability_probe(const ModelParams<float>& params, const std::vector<BlurPair>& testset,
                                    std::size_t repeats, std::size_t iterations);

/// Per (pass, iteration) PSNR plus mean absolute residual statistics.
std::vector<ResidualRow> residual_stats(const ModelParams<float>& params, const std::vector<BlurPair>& testset,
                                        std::size_t deblur_times, std::size_t iterations);

EvalReport evaluate(const ModelParams<float>& params, const std::vector<BlurPair>& testset, std::size_t repeats,
                    std::size_t iterations, std::size_t deblur_times = 2);

/// per_image.csv, residuals.csv, summary.json, and stability.csv (`k,psnr`) when repeats > 1.
void write_report(const std::filesystem::path& dir, const EvalReport& report);

}  // namespace idem
