#include "radvit/augment.hpp"

#include <algorithm>
#include <cmath>

#include <torch/torch.h>

#include "radvit/error.hpp"

namespace radvit {
namespace {

namespace F = torch::nn::functional;

int64_t randint(Rng& rng, int64_t lo, int64_t hi) {
  if (hi <= lo) return lo;
  return std::uniform_int_distribution<int64_t>(lo, hi)(rng);
}

bool coin(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return uniform(rng, 0.0, 1.0) < p;
}

/// Per-axis aspect multipliers whose product is 1.
std::vector<double> aspect_factors(Rng& rng, std::size_t rank, Range aspect) {
  std::vector<double> a(rank, 1.0);
  double log_sum = 0.0;
  for (auto& v : a) {
    v = std::exp(uniform(rng, std::log(aspect.first), std::log(aspect.second)));
    log_sum += std::log(v);
  }
  const double norm = std::exp(log_sum / static_cast<double>(rank));
  for (auto& v : a) v /= norm;
  return a;
}

torch::Tensor resize_to(const torch::Tensor& x, int64_t size) {
  const auto rank = x.dim() - 1;
  bool same = true;
  for (int64_t d = 1; d < x.dim(); ++d) same = same && x.size(d) == size;
  if (same) return x.contiguous();
  const std::vector<int64_t> target(static_cast<std::size_t>(rank), size);
  const auto mode = rank == 2 ? F::InterpolateFuncOptions::mode_t(torch::kBilinear)
                                       : F::InterpolateFuncOptions::mode_t(torch::kTrilinear);
  return F::interpolate(x.unsqueeze(0), F::InterpolateFuncOptions().size(target).mode(mode).align_corners(false))
      .squeeze(0);
}

std::vector<int64_t> mask_grid(const AugmentConfig& cfg) {
  if (cfg.global_size % cfg.patch_size != 0) {
    throw UsageError("global crop size " + std::to_string(cfg.global_size) + " is not a multiple of patch size " +
                     std::to_string(cfg.patch_size));
  }
  return std::vector<int64_t>(static_cast<std::size_t>(cfg.input_rank), cfg.global_size / cfg.patch_size);
}

torch::Tensor jitter_2d(const torch::Tensor& x, const AugmentConfig& cfg, Rng& rng) {
  const double b = uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
  const double c = uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
  auto y = (x * b).clamp(0.0, 1.0);
  const auto mean = y.mean();
  return ((y - mean) * c + mean).clamp(0.0, 1.0);
}

}  // namespace

double uniform(Rng& rng, double lo, double hi) {
  if (!(hi > lo)) return lo;
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

AugmentConfig AugmentConfig::defaults_2d() { return AugmentConfig{}; }

AugmentConfig AugmentConfig::defaults_3d() {
  AugmentConfig c;
  c.input_rank = 3;
  c.global_size = 96;
  c.local_size = 48;
  c.patch_size = 16;
  return c;
}

int64_t MaskSpec::count() const { return masked.defined() ? masked.sum().item<int64_t>() : 0; }

int64_t MaskSpec::tokens() const {
  int64_t n = 1;
  for (auto g : grid) n *= g;
  return n;
}

torch::Tensor MaskSpec::flat() const { return masked.reshape({-1}); }

torch::Tensor random_resized_crop(const torch::Tensor& src, int64_t size, Range scale, Range aspect, Rng& rng) {
  const auto rank = static_cast<std::size_t>(src.dim() - 1);
  std::vector<int64_t> dims(rank);
  double total = 1.0;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = src.size(static_cast<int64_t>(i) + 1);
    total *= static_cast<double>(dims[i]);
  }
  std::vector<int64_t> ext = dims, lo(rank, 0);
  bool found = false;
  for (int attempt = 0; attempt < 10 && !found; ++attempt) {
    const double target = total * uniform(rng, scale.first, scale.second);
    const double edge = std::pow(target, 1.0 / static_cast<double>(rank));
    const auto a = aspect_factors(rng, rank, aspect);
    found = true;
    for (std::size_t i = 0; i < rank; ++i) {
      ext[i] = std::llround(edge * a[i]);
      if (ext[i] < 1 || ext[i] > dims[i]) found = false;
    }
    if (found) {
      for (std::size_t i = 0; i < rank; ++i) lo[i] = randint(rng, 0, dims[i] - ext[i]);
    }
  }
  if (!found) {
    ext = dims;
    std::fill(lo.begin(), lo.end(), 0);
  }
  auto crop = src;
  for (std::size_t i = 0; i < rank; ++i) crop = crop.narrow(static_cast<int64_t>(i) + 1, lo[i], ext[i]);
  return resize_to(crop, size);
}

torch::Tensor flip_spatial(const torch::Tensor& view, int64_t axis) { return view.flip({axis + 1}); }

torch::Tensor apply_contrast(const torch::Tensor& x, double gamma, double lo, double hi) {
  if (!(hi > lo)) throw DataError("apply_contrast: empty intensity window");
  auto y = x;
  if (lo != 0.0 || hi != 1.0) y = (x - lo) / (hi - lo);
  y = y.clamp(0.0, 1.0);
  return gamma == 1.0 ? y : y.pow(gamma);
}

torch::Tensor contrast_enhance_3d(const torch::Tensor& crop, Rng& rng, const AugmentConfig& cfg) {
  const double gamma = uniform(rng, cfg.gamma.first, cfg.gamma.second);
  const double lo = uniform(rng, 0.0, cfg.window_shift);
  const double hi = 1.0 - uniform(rng, 0.0, cfg.window_shift);
  return apply_contrast(crop, gamma, lo, hi);
}

ViewSet make_views_2d(const RadImage& img, const AugmentConfig& cfg, Rng& rng) {
  if (!img.pixels.defined() || img.pixels.dim() != 2 || img.pixels.numel() == 0) {
    throw DataError("make_views_2d: expected a non-empty (H, W) image");
  }
  const auto src = (img.pixels.to(torch::kFloat32) / 255.0).unsqueeze(0);
  ViewSet vs;
  vs.source_id = img.source_id;
  auto view = [&](int64_t size, Range scale) {
    auto v = random_resized_crop(src, size, scale, cfg.aspect, rng);
    if (coin(rng, cfg.flip_prob)) v = flip_spatial(v, 1);
    if (coin(rng, cfg.jitter_prob)) v = jitter_2d(v, cfg, rng);
    return v.contiguous();
  };
  for (int64_t i = 0; i < cfg.n_global; ++i) vs.globals.push_back(view(cfg.global_size, cfg.global_scale));
  for (int64_t i = 0; i < cfg.n_local; ++i) vs.locals.push_back(view(cfg.local_size, cfg.local_scale));
  const auto grid = mask_grid(cfg);
  for (int64_t i = 0; i < cfg.n_global; ++i) {
    vs.masks.push_back(blockwise_mask(grid, cfg.mask_ratio, rng, cfg.min_mask_block));
  }
  return vs;
}

ViewSet make_views_3d(const VolumeGrid& vol, const AugmentConfig& cfg, Rng& rng) {
  if (!vol.voxels.defined() || vol.voxels.dim() != 3 || vol.voxels.numel() == 0) {
    throw DataError("make_views_3d: expected a non-empty (D, H, W) volume");
  }
  const auto src = vol.voxels.to(torch::kFloat32).unsqueeze(0);
  ViewSet vs;
  vs.source_id = vol.source_id;
  auto view = [&](int64_t size, Range scale) {
    auto v = random_resized_crop(src, size, scale, cfg.aspect, rng);
    for (int64_t axis = 0; axis < 3; ++axis) {
      if (coin(rng, cfg.flip_prob)) v = flip_spatial(v, axis);
    }
    if (coin(rng, cfg.contrast_prob)) v = contrast_enhance_3d(v, rng, cfg);
    return v.contiguous();
  };
  for (int64_t i = 0; i < cfg.n_global; ++i) vs.globals.push_back(view(cfg.global_size, cfg.global_scale));
  for (int64_t i = 0; i < cfg.n_local; ++i) vs.locals.push_back(view(cfg.local_size, cfg.local_scale));
  const auto grid = mask_grid(cfg);
  for (int64_t i = 0; i < cfg.n_global; ++i) {
    vs.masks.push_back(blockwise_mask(grid, cfg.mask_ratio, rng, cfg.min_mask_block));
  }
  return vs;
}

MaskSpec blockwise_mask(const std::vector<int64_t>& grid, Range ratio, Rng& rng, int64_t min_block) {
  if (grid.empty()) throw DataError("blockwise_mask: empty grid");
  int64_t n = 1;
  for (auto g : grid) {
    if (g <= 0) throw DataError("blockwise_mask: empty grid");
    n *= g;
  }
  const auto rank = grid.size();
  const double r = uniform(rng, ratio.first, ratio.second);
  const auto lo_count = static_cast<int64_t>(std::ceil(ratio.first * static_cast<double>(n) - 1e-9));
  const auto hi_count = static_cast<int64_t>(std::floor(ratio.second * static_cast<double>(n) + 1e-9));
  int64_t target = std::llround(r * static_cast<double>(n));
  if (lo_count <= hi_count) target = std::clamp(target, lo_count, hi_count);
  target = std::clamp<int64_t>(target, 0, n);

  std::vector<int64_t> strides(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) strides[i - 1] = strides[i] * grid[i];
  std::vector<char> masked(static_cast<std::size_t>(n), 0);
  MaskSpec spec;
  spec.grid = grid;
  int64_t count = 0;

  // Visit every cell of a box; `fn` receives the flat index.
  auto for_box = [&](const std::vector<int64_t>& lo, const std::vector<int64_t>& ext, auto&& fn) {
    std::vector<int64_t> idx(rank, 0);
    while (true) {
      int64_t flat = 0;
      for (std::size_t i = 0; i < rank; ++i) flat += (lo[i] + idx[i]) * strides[i];
      fn(flat);
      std::size_t a = rank;
      while (a > 0) {
        --a;
        if (++idx[a] < ext[a]) break;
        idx[a] = 0;
        if (a == 0) return;
      }
    }
  };

  const int64_t v_lo = std::min(min_block, target);
  for (int attempt = 0; attempt < 100 && count < target; ++attempt) {
    const int64_t remaining = target - count;
    const int64_t volume = randint(rng, std::max<int64_t>(1, v_lo), std::max(v_lo, remaining));
    const auto a = aspect_factors(rng, rank, {0.3, 1.0 / 0.3});
    const double edge = std::pow(static_cast<double>(volume), 1.0 / static_cast<double>(rank));
    std::vector<int64_t> ext(rank), lo(rank);
    for (std::size_t i = 0; i < rank; ++i) ext[i] = std::clamp<int64_t>(std::llround(edge * a[i]), 1, grid[i]);
    for (std::size_t i = 0; i < rank; ++i) lo[i] = randint(rng, 0, grid[i] - ext[i]);
    int64_t fresh = 0;
    for_box(lo, ext, [&](int64_t f) { fresh += masked[static_cast<std::size_t>(f)] ? 0 : 1; });
    if (fresh == 0 || fresh > remaining) continue;
    for_box(lo, ext, [&](int64_t f) { masked[static_cast<std::size_t>(f)] = 1; });
    spec.boxes.push_back({lo, ext});
    count += fresh;
  }

  // Grow existing components one cell at a time until the target is met.
  while (count < target) {
    std::vector<int64_t> frontier;
    for (int64_t f = 0; f < n; ++f) {
      if (masked[static_cast<std::size_t>(f)]) continue;
      bool adjacent = false;
      for (std::size_t i = 0; i < rank && !adjacent; ++i) {
        const int64_t coord = (f / strides[i]) % grid[i];
        if (coord > 0 && masked[static_cast<std::size_t>(f - strides[i])]) adjacent = true;
        if (coord + 1 < grid[i] && masked[static_cast<std::size_t>(f + strides[i])]) adjacent = true;
      }
      if (adjacent || count == 0) frontier.push_back(f);
    }
    const int64_t f = frontier[static_cast<std::size_t>(randint(rng, 0, static_cast<int64_t>(frontier.size()) - 1))];
    masked[static_cast<std::size_t>(f)] = 1;
    std::vector<int64_t> lo(rank);
    for (std::size_t i = 0; i < rank; ++i) lo[i] = (f / strides[i]) % grid[i];
    spec.boxes.push_back({lo, std::vector<int64_t>(rank, 1)});
    ++count;
  }

  auto flat = torch::empty({n}, torch::kBool);
  auto* p = flat.data_ptr<bool>();
  for (int64_t i = 0; i < n; ++i) p[i] = masked[static_cast<std::size_t>(i)] != 0;
  spec.masked = flat.reshape(grid);
  spec.ratio = static_cast<double>(count) / static_cast<double>(n);
  return spec;
}

}  // namespace radvit
