#pragma once

/**
 * @file augment.hpp
 * @brief Multi-crop view generation and blockwise token masking.
 *
 * Every function is a deterministic function of its inputs and the state of
 * the supplied generator. Views are channel-first float tensors in [0, 1]:
 * (1, S, S) for images and (1, S, S, S) for volumes.
 */

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <torch/types.h>

#include "radvit/radprep.hpp"

namespace radvit {

using Rng = std::mt19937_64;
using Range = std::pair<double, double>;

struct AugmentConfig {
  int input_rank = 2;
  int64_t global_size = 224;
  int64_t n_global = 2;
  int64_t local_size = 98;
  int64_t n_local = 8;
  Range global_scale{0.32, 1.0};  // fraction of source area (or volume)
  Range local_scale{0.05, 0.32};
  Range aspect{3.0 / 4.0, 4.0 / 3.0};
  double flip_prob = 0.5;  // per view for 2D, per axis for 3D

  // 2D photometric jitter
  double jitter_prob = 0.8;
  double brightness = 0.4;
  double contrast = 0.4;

  // 3D contrast enhancement
  double contrast_prob = 0.8;
  Range gamma{0.7, 1.4};
  double window_shift = 0.1;  // max fraction cut from each end of [0, 1]

  // Masking of the student's global views
  int64_t patch_size = 14;
  Range mask_ratio{0.1, 0.5};
  int64_t min_mask_block = 4;

  static AugmentConfig defaults_2d();
  static AugmentConfig defaults_3d();
};

struct MaskBox {
  std::vector<int64_t> lo;
  std::vector<int64_t> extent;
};

struct MaskSpec {
  std::vector<int64_t> grid;
  torch::Tensor masked;  // bool, shape `grid`
  std::vector<MaskBox> boxes;
  double ratio = 0.0;

  int64_t count() const;
  int64_t tokens() const;
  /// Flattened (N,) bool in token order.
  torch::Tensor flat() const;
};

struct ViewSet {
  std::vector<torch::Tensor> globals;
  std::vector<torch::Tensor> locals;
  std::vector<MaskSpec> masks;  // one per global view, applied to the student only
  std::string source_id;
};

/// Random-resized crops of an image normalised to [0, 255]: globals and
/// locals with horizontal flip and brightness/contrast jitter.
ViewSet make_views_2d(const RadImage& img, const AugmentConfig& cfg, Rng& rng);

/// 3D counterpart for a volume normalised to [0, 1]: cuboid crops, flips drawn
/// independently per axis and gamma/window contrast enhancement.
ViewSet make_views_3d(const VolumeGrid& vol, const AugmentConfig& cfg, Rng& rng);

/// Box-wise mask over a token grid. The target ratio is drawn uniformly in
/// `ratio`, converted to a token count inside the range bounds, and reached
/// exactly by accumulating axis-aligned boxes of at least `min_block` tokens,
/// then growing existing components one token at a time if proposals stall.
MaskSpec blockwise_mask(const std::vector<int64_t>& grid, Range ratio, Rng& rng, int64_t min_block = 4);

/// out = clamp((x - lo) / (hi - lo), 0, 1) ^ gamma.
torch::Tensor apply_contrast(const torch::Tensor& x, double gamma, double lo, double hi);

/// Random gamma in cfg.gamma and a random intensity window inside [0, 1].
torch::Tensor contrast_enhance_3d(const torch::Tensor& crop, Rng& rng, const AugmentConfig& cfg);

/// Reverse the order of `axis` (0-based over spatial dims of a channel-first view).
torch::Tensor flip_spatial(const torch::Tensor& view, int64_t axis);

/// Random-resized crop of a channel-first (C, spatial...) tensor to `size`
/// along every spatial axis. Sources smaller than the crop are upsampled.
torch::Tensor random_resized_crop(const torch::Tensor& src, int64_t size, Range scale, Range aspect, Rng& rng);

double uniform(Rng& rng, double lo, double hi);

}  // namespace radvit
