#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "idem/tensor.hpp"

namespace idem {

/// A single RGB image, shape (1, 3, H, W), values nominally in [0, 1].
using Image = Tensor<float>;

struct FrameSequence {
  std::vector<Image> frames;
  std::uint64_t seed = 0;
  std::string motion;  // human-readable description of the rendered motion
};

struct BlurPair {
  Image blurry, sharp;
  int blur_level = 1;
};

struct ToySceneOptions {
  double motion_scale = 1.0;  // 0 renders a static scene
  std::size_t min_shapes = 2, max_shapes = 4;
};

/// Textured shapes moving with their own constant linear and angular
/// velocities over a slowly panning textured background.
FrameSequence generate_toy_sequence(std::uint64_t seed, std::size_t length, std::size_t height, std::size_t width,
                                    const ToySceneOptions& options = {});

/// Mean of the n frames centred on the middle frame; the middle frame is the target.
BlurPair synthesize_blur(const FrameSequence& seq, int n);

/// [0,1] -> [-0.5, 0.5] and back. denormalize does not clip.
template <typename T>
Tensor<T> normalize(const Tensor<T>& img);
template <typename T>
Tensor<T> denormalize(const Tensor<T>& img);
template <typename T>
Tensor<T> clip01(Tensor<T> img);

struct AugmentOptions {
  double saturation_min = 0.8, saturation_max = 1.2;
};

/// One draw of the crop window and geometric/photometric transform.
struct AugmentDraw {
  std::size_t y0 = 0, x0 = 0;
  int rotation = 0;    // quarter turns counter-clockwise
  bool flip = false;   // horizontal mirror, applied before rotation
  double saturation = 1.0;
};

AugmentDraw draw_augment(std::size_t height, std::size_t width, std::size_t patch, std::uint64_t seed,
                         const AugmentOptions& options = {});
BlurPair apply_augment(const BlurPair& pair, std::size_t patch, const AugmentDraw& draw);
BlurPair crop_and_augment(const BlurPair& pair, std::size_t patch, std::uint64_t seed,
                          const AugmentOptions& options = {});

/// Zero-mean Gaussian noise with std sigma/255 (sigma on the 8-bit scale), clipped to [0,1].
Image add_gaussian_noise(const Image& img, double sigma, std::uint64_t seed);

/// Mirror-pads the bottom and right edges (no edge repeat) so H and W become
/// multiples of `multiple`; crop_to undoes it.
Image reflect_pad(const Image& img, std::size_t multiple);
Image crop_to(const Image& img, std::size_t height, std::size_t width);

/// Desk-scale dataset: pair i renders sequence (base_seed + i) and blurs it
/// at levels[i % levels.size()].
std::vector<BlurPair> make_toy_dataset(std::size_t pairs, std::size_t size, const std::vector<int>& levels,
                                       std::uint64_t base_seed, const ToySceneOptions& options = {});

/// Odd blur levels 5, 7, ..., 15.
std::vector<int> default_blur_levels();

// ---------------------------------------------------------------------------
// Files

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// 8-bit PNG. Gray and alpha inputs are converted to RGB.
Image read_png(const std::filesystem::path& path);
/// Clips to [0,1] and rounds to 8 bits.
void write_png(const std::filesystem::path& path, const Image& img);

struct ManifestRecord {
  std::string blurry, sharp;  // relative to the manifest's directory unless absolute
  int blur_level = 1;
  std::uint64_t seed = 0;
  bool operator==(const ManifestRecord&) const = default;
};

/// One JSON object per line.
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);
std::vector<ManifestRecord> read_manifest(const std::filesystem::path& path);
/// Loads every pair of a manifest from disk.
std::vector<BlurPair> load_manifest_pairs(const std::filesystem::path& path);

}  // namespace idem
