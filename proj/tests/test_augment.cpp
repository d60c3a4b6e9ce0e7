#include <gtest/gtest.h>

#include <deque>

#include "radvit/augment.hpp"
#include "radvit/error.hpp"
#include "test_util.hpp"

using namespace radvit;

namespace {

/// Rebuild the mask from its recorded boxes and check every box lies inside
/// the grid. Returns an empty string when the structure is consistent.
std::string verify_blocks(const MaskSpec& m) {
  const auto rank = m.grid.size();
  auto rebuilt = torch::zeros(m.grid, torch::kBool);
  for (const auto& b : m.boxes) {
    if (b.lo.size() != rank || b.extent.size() != rank) return "box rank mismatch";
    auto view = rebuilt;
    for (std::size_t i = 0; i < rank; ++i) {
      if (b.lo[i] < 0 || b.extent[i] < 1 || b.lo[i] + b.extent[i] > m.grid[i]) return "box outside grid";
      view = view.narrow(static_cast<int64_t>(i), b.lo[i], b.extent[i]);
    }
    view.fill_(true);
  }
  if (!torch::equal(rebuilt, m.masked)) return "boxes do not reproduce the mask";
  return {};
}

/// Number of 4/6-connected components of a boolean grid (BFS oracle).
int64_t components(const torch::Tensor& grid) {
  const auto flat = grid.flatten().contiguous();
  const auto dims = grid.sizes().vec();
  const int64_t n = flat.numel();
  std::vector<int64_t> strides(dims.size(), 1);
  for (std::size_t i = dims.size() - 1; i > 0; --i) strides[i - 1] = strides[i] * dims[i];
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  const bool* p = flat.data_ptr<bool>();
  int64_t count = 0;
  for (int64_t s = 0; s < n; ++s) {
    if (!p[s] || seen[static_cast<std::size_t>(s)]) continue;
    ++count;
    std::deque<int64_t> q{s};
    seen[static_cast<std::size_t>(s)] = 1;
    while (!q.empty()) {
      const auto f = q.front();
      q.pop_front();
      for (std::size_t i = 0; i < dims.size(); ++i) {
        const int64_t c = (f / strides[i]) % dims[i];
        for (int64_t d : {-1, 1}) {
          if (c + d < 0 || c + d >= dims[i]) continue;
          const auto g = f + d * strides[i];
          if (p[g] && !seen[static_cast<std::size_t>(g)]) {
            seen[static_cast<std::size_t>(g)] = 1;
            q.push_back(g);
          }
        }
      }
    }
  }
  return count;
}

AugmentConfig small_2d() {
  auto c = AugmentConfig::defaults_2d();
  c.global_size = 32;
  c.local_size = 16;
  c.patch_size = 4;
  return c;
}

RadImage ramp_image(int64_t h, int64_t w) {
  RadImage img;
  img.pixels = torch::linspace(0, 255, h * w).reshape({h, w});
  return img;
}

}  // namespace

TEST(Views, DefaultTableSizes) {
  const auto d2 = AugmentConfig::defaults_2d(), d3 = AugmentConfig::defaults_3d();
  EXPECT_EQ(std::make_tuple(d2.global_size, d2.n_global, d2.local_size, d2.n_local),
            std::make_tuple(int64_t{224}, int64_t{2}, int64_t{98}, int64_t{8}));
  EXPECT_EQ(std::make_tuple(d3.global_size, d3.n_global, d3.local_size, d3.n_local),
            std::make_tuple(int64_t{96}, int64_t{2}, int64_t{48}, int64_t{8}));
}

TEST(Views, Counts2DAtFullSize) {
  Rng rng(1);
  const auto vs = make_views_2d(ramp_image(150, 260), AugmentConfig::defaults_2d(), rng);
  ASSERT_EQ(vs.globals.size(), 2u);
  ASSERT_EQ(vs.locals.size(), 8u);
  ASSERT_EQ(vs.masks.size(), 2u);
  for (const auto& g : vs.globals) EXPECT_EQ(g.sizes(), (std::vector<int64_t>{1, 224, 224}));
  for (const auto& l : vs.locals) EXPECT_EQ(l.sizes(), (std::vector<int64_t>{1, 98, 98}));
  EXPECT_EQ(vs.masks[0].grid, (std::vector<int64_t>{16, 16}));
}

TEST(Views, Counts3DAndSmallSourceUpscaled) {
  Rng rng(2);
  VolumeGrid v;
  v.voxels = torch::rand({20, 30, 25});
  auto cfg = AugmentConfig::defaults_3d();
  const auto vs = make_views_3d(v, cfg, rng);
  ASSERT_EQ(vs.globals.size(), 2u);
  ASSERT_EQ(vs.locals.size(), 8u);
  for (const auto& g : vs.globals) EXPECT_EQ(g.sizes(), (std::vector<int64_t>{1, 96, 96, 96}));
  for (const auto& l : vs.locals) EXPECT_EQ(l.sizes(), (std::vector<int64_t>{1, 48, 48, 48}));
  for (const auto& g : vs.globals) {
    EXPECT_GE(g.min().item<float>(), 0.0f);
    EXPECT_LE(g.max().item<float>(), 1.0f);
  }
}

TEST(Views, DeterministicPerSeed) {
  const auto img = ramp_image(40, 50);
  Rng a(7), b(7);
  const auto x = make_views_2d(img, small_2d(), a), y = make_views_2d(img, small_2d(), b);
  for (std::size_t i = 0; i < x.globals.size(); ++i) {
    EXPECT_TRUE(torch::equal(x.globals[i], y.globals[i]));
    EXPECT_TRUE(torch::equal(x.masks[i].masked, y.masks[i].masked));
  }
  for (std::size_t i = 0; i < x.locals.size(); ++i) EXPECT_TRUE(torch::equal(x.locals[i], y.locals[i]));
}

TEST(Views, IdentityConfiguration) {
  auto cfg = small_2d();
  cfg.global_scale = {1.0, 1.0};
  cfg.aspect = {1.0, 1.0};
  cfg.flip_prob = 0.0;
  cfg.jitter_prob = 0.0;
  const auto img = ramp_image(32, 32);
  Rng rng(3);
  const auto vs = make_views_2d(img, cfg, rng);
  for (const auto& g : vs.globals) EXPECT_TRUE(torch::allclose(g[0], img.pixels / 255.0, 0, 1e-7));
}

TEST(Views, FlipIsInvolution) {
  const auto v = torch::rand({1, 5, 6, 7});
  for (int64_t axis = 0; axis < 3; ++axis) EXPECT_TRUE(torch::equal(flip_spatial(flip_spatial(v, axis), axis), v));
}

TEST(Contrast, IdentityPowerLawAndRange) {
  const auto x = torch::rand({4, 4, 4});
  EXPECT_TRUE(torch::equal(apply_contrast(x, 1.0, 0.0, 1.0), x));
  EXPECT_FLOAT_EQ(apply_contrast(torch::tensor({0.5f}), 2.0, 0.0, 1.0).item<float>(), 0.25f);
  Rng rng(5);
  const auto cfg = AugmentConfig::defaults_3d();
  for (int i = 0; i < 200; ++i) {
    const auto y = contrast_enhance_3d(x, rng, cfg);
    ASSERT_GE(y.min().item<float>(), 0.0f);
    ASSERT_LE(y.max().item<float>(), 1.0f);
  }
}

TEST(Mask, RatioBoundsOverManyDraws) {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    const auto m = blockwise_mask({16, 16}, {0.1, 0.5}, rng);
    ASSERT_GE(m.ratio, 0.1);
    ASSERT_LE(m.ratio, 0.5);
    ASSERT_EQ(m.count(), m.masked.sum().item<int64_t>());
  }
}

TEST(Mask, CollapsedRangeForcesCount) {
  Rng rng(2);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(blockwise_mask({4, 4}, {0.25, 0.25}, rng).count(), 4);
}

TEST(Mask, DecomposesIntoAxisAlignedBoxes3D) {
  Rng rng(4);
  for (int i = 0; i < 300; ++i) {
    const auto m = blockwise_mask({6, 6, 6}, {0.1, 0.5}, rng);
    ASSERT_EQ(verify_blocks(m), "");
    // Far fewer components than masked tokens: the mask is made of blocks.
    EXPECT_LE(components(m.masked), static_cast<int64_t>(m.boxes.size()));
  }
}

TEST(Mask, FlatOrderMatchesGrid) {
  Rng rng(9);
  const auto m = blockwise_mask({3, 5}, {0.3, 0.5}, rng);
  EXPECT_TRUE(torch::equal(m.flat(), m.masked.flatten()));
  EXPECT_EQ(m.tokens(), 15);
}

TEST(Mask, EmptyGridThrows) {
  Rng rng(0);
  EXPECT_THROW(blockwise_mask({}, {0.1, 0.5}, rng), DataError);
  EXPECT_THROW(blockwise_mask({0, 3}, {0.1, 0.5}, rng), DataError);
}
