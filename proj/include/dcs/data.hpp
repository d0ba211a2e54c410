#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dcs/rng.hpp"
#include "dcs/tensor.hpp"

namespace dcs {

// One image with pixels scaled to [0,1], channel-planar [3,S,S].
// coarse_label is -1 except for records that carry a second label byte.
struct LabeledImage {
  Tensor<float> pixels;
  int label = 0;
  int coarse_label = -1;
};

enum class CifarVariant { Cifar10, Cifar100 };
enum class Split { Train, Val };

// Parses one record-aligned binary file (3073- or 3074-byte records).
std::vector<LabeledImage> load_cifar_file(const std::string& file, CifarVariant variant);

// Resolves the conventional file set under `dir` (directly, or inside the
// standard cifar-10-batches-bin / cifar-100-binary subdirectory).
std::vector<LabeledImage> load_cifar(const std::string& dir, CifarVariant variant, Split split);

// Inverse of parsing: the exact record bytes for one image.
std::vector<std::uint8_t> record_bytes(const LabeledImage& img, CifarVariant variant);

void save_cifar_file(const std::string& file, const std::vector<LabeledImage>& images,
                     CifarVariant variant);

// Small class-separable dataset (distinct per-class patterns plus noise)
// for fast end-to-end runs.
std::vector<LabeledImage> make_synthetic(int num_classes, int per_class, int side,
                                         std::uint64_t seed);

// Stochastic view pipeline: resized crop, color jitter, grayscale,
// Gaussian blur, horizontal flip — applied in that order.
struct AugmentationConfig {
  double crop_scale_lo = 0.2, crop_scale_hi = 1.0;
  double brightness = 0.4, contrast = 0.4, saturation = 0.4, hue = 0.1;
  double jitter_p = 0.8;
  double grayscale_p = 0.2;
  double blur_p = 0.0;  // off at 32x32; 0.5 for larger inputs
  double blur_sigma_lo = 0.1, blur_sigma_hi = 2.0;
  double flip_p = 0.5;
  std::uint64_t seed = 0;  // base for per-(epoch,image) stream derivation

  void validate() const;
};

// One augmented view; draws from `rng` in a fixed documented order.
Tensor<float> augment(const LabeledImage& img, const AugmentationConfig& cfg, Rng& rng);

// Two independent views of the same anchor.
std::pair<Tensor<float>, Tensor<float>> two_views(const LabeledImage& img,
                                                  const AugmentationConfig& cfg, Rng& rng);

}  // namespace dcs
