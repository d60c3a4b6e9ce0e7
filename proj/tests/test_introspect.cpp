#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "radvit/error.hpp"
#include "radvit/introspect.hpp"
#include "radvit/synth.hpp"
#include "test_util.hpp"

using namespace radvit;

namespace {

BackboneConfig small_vit(int rank = 2, int64_t patch = 4, int64_t heads = 4) {
  BackboneConfig c;
  c.variant = "toy";
  c.embed_dim = 16;
  c.heads = heads;
  c.blocks = 2;
  c.patch_size = patch;
  c.input_rank = rank;
  c.base_grid = 4;
  return c;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

torch::Tensor two_blobs(int64_t per, double gap) {
  auto a = torch::randn({per, 3}, torch::kFloat64);
  auto b = torch::randn({per, 3}, torch::kFloat64) + gap;
  return torch::cat({a, b});
}

}  // namespace

TEST(Attention, MapsSumToOneAndMergedIsMean) {
  torch::manual_seed(1);
  for (int rank : {2, 3}) {
    VisionTransformer vit(small_vit(rank));
    const auto x = rank == 2 ? torch::rand({1, 16, 16}) : torch::rand({1, 8, 8, 8});
    const auto m = cls_attention(vit, x);
    const int64_t n = rank == 2 ? 16 : 8;
    EXPECT_EQ(m.heads.size(0), 4);
    EXPECT_EQ(m.heads[0].numel(), n);
    EXPECT_EQ(m.selected, (std::vector<int64_t>{0, 1, 2, 3}));
    EXPECT_EQ(m.layer, 1);
    for (int64_t h = 0; h < 4; ++h) EXPECT_NEAR(m.heads[h].sum().item<double>(), 1.0, 1e-6);
    EXPECT_NEAR(m.merged.sum().item<double>(), 1.0, 1e-6);
    EXPECT_TRUE(torch::allclose(m.merged, m.heads.mean(0), 0, 1e-9));
  }
}

TEST(Attention, MaxMergeAndHeadSelection) {
  torch::manual_seed(2);
  VisionTransformer vit(small_vit());
  AttentionOptions opts;
  opts.merge = MergeMode::max;
  opts.heads = {3, 1};
  opts.layer = 0;
  const auto m = cls_attention(vit, torch::rand({1, 1, 16, 16}), opts);
  EXPECT_EQ(m.selected, (std::vector<int64_t>{3, 1}));
  EXPECT_EQ(m.layer, 0);
  const auto mx = std::get<0>(m.heads.max(0));
  EXPECT_TRUE(torch::allclose(m.merged, mx / mx.sum(), 0, 1e-9));
  opts.heads = {7};
  EXPECT_THROW(cls_attention(vit, torch::rand({1, 16, 16}), opts), UsageError);
  EXPECT_EQ(parse_merge_mode("max"), MergeMode::max);
  EXPECT_THROW(parse_merge_mode("median"), UsageError);
}

TEST(Attention, ZeroQueryKeyWeightsGiveFlatMaps) {
  VisionTransformer vit(small_vit());
  {
    torch::NoGradGuard g;
    for (const auto& item : vit->named_parameters()) {
      if (item.key().find("qkv") != std::string::npos) item.value().zero_();
    }
  }
  const auto m = cls_attention(vit, torch::rand({1, 16, 16}));
  EXPECT_TRUE(torch::allclose(m.heads, torch::full_like(m.heads, 1.0 / 16), 0, 1e-7));
}

TEST(Attention, SnapshotSeriesSortedByIteration) {
  testutil::TempDir dir;
  torch::manual_seed(3);
  VisionTransformer vit(small_vit());
  save_backbone(dir.path / "late.rvck", vit, 200);
  save_backbone(dir.path / "early.rvck", vit, 100);
  const auto x = torch::rand({1, 16, 16});
  const auto s = snapshot_series({dir.path / "late.rvck", dir.path / "early.rvck"}, x);
  ASSERT_EQ(s.size(), 2u);
  EXPECT_EQ(s[0].iteration, 100);
  EXPECT_EQ(s[1].iteration, 200);
  EXPECT_TRUE(torch::equal(s[0].heads, s[1].heads));
  EXPECT_EQ(snapshot_series({dir.path / "late.rvck"}, x).size(), 1u);

  VisionTransformer other(small_vit(2, 4, 2));
  save_backbone(dir.path / "other.rvck", other, 300);
  EXPECT_THROW(snapshot_series({dir.path / "late.rvck", dir.path / "other.rvck"}, x), DataError);
}

TEST(Attention, OverlaysWritten) {
  testutil::TempDir dir;
  VisionTransformer vit(small_vit());
  const auto img = torch::rand({16, 16});
  const auto m = cls_attention(vit, img.unsqueeze(0));
  const auto files = render_overlays(m, img, dir.path, "a");
  EXPECT_EQ(files.size(), 5u);
  const auto bytes = slurp(dir.path / "a_merged.ppm");
  EXPECT_EQ(bytes.substr(0, 2), "P6");
  EXPECT_EQ(bytes.size(), std::string("P6\n16 16\n255\n").size() + 16 * 16 * 3);
}

TEST(PixelFeatures, ShapeAndKnots) {
  torch::manual_seed(4);
  VisionTransformer vit(small_vit(2, 5));
  vit->eval();
  const auto x = torch::rand({2, 1, 15, 20});
  const auto f = pixel_features(vit, x);
  EXPECT_EQ(f.sizes(), (std::vector<int64_t>{2, 16, 15, 20}));
  // With an odd patch size every patch centre lies on a pixel, where the
  // interpolated feature equals the token.
  const auto tokens = vit->forward(x).patches();
  for (int64_t i = 0; i < 3; ++i) {
    for (int64_t j = 0; j < 4; ++j) {
      EXPECT_TRUE(torch::allclose(f.index({0, torch::indexing::Slice(), i * 5 + 2, j * 5 + 2}), tokens[0][i * 4 + j],
                                  1e-5, 1e-6));
    }
  }
}

TEST(PixelFeatures, ConstantTokensGiveConstantField) {
  VisionTransformer vit(small_vit());
  {
    torch::NoGradGuard g;
    for (auto& p : vit->parameters()) p.zero_();
  }
  const auto f = pixel_features(vit, torch::rand({1, 1, 16, 16}));
  EXPECT_TRUE(torch::allclose(f, f.index({torch::indexing::Slice(), torch::indexing::Slice(), 0, 0})
                                     .unsqueeze(-1)
                                     .unsqueeze(-1)
                                     .expand_as(f)));
}

TEST(KMeans, SingleClusterIsMean) {
  torch::manual_seed(5);
  const auto p = torch::randn({30, 4}, torch::kFloat64);
  const auto r = kmeans(p, 1, 0);
  EXPECT_TRUE(torch::allclose(r.centroids[0], p.mean(0), 0, 1e-12));
  EXPECT_NEAR(r.inertia, (p - p.mean(0)).pow(2).sum().item<double>(), 1e-9);
}

TEST(KMeans, SeparatesTwoBlobs) {
  torch::manual_seed(6);
  const auto p = two_blobs(100, 12.0);
  const auto r = kmeans(p, 2, 7);
  int64_t agree = 0;
  for (int64_t i = 0; i < 200; ++i) agree += r.labels[static_cast<std::size_t>(i)] == (i < 100 ? r.labels[0] : 1 - r.labels[0]);
  EXPECT_GE(agree, 198);
}

TEST(KMeans, InertiaNonIncreasingAndDeterministic) {
  torch::manual_seed(7);
  const auto p = torch::randn({300, 5}, torch::kFloat64);
  const auto r = kmeans(p, 6, 11);
  for (std::size_t i = 1; i < r.inertia_history.size(); ++i) {
    EXPECT_LE(r.inertia_history[i], r.inertia_history[i - 1] + 1e-9);
  }
  const auto again = kmeans(p, 6, 11);
  EXPECT_EQ(r.labels, again.labels);
  EXPECT_TRUE(torch::equal(r.centroids, again.centroids));
}

TEST(KMeans, TranslationInvariant) {
  torch::manual_seed(8);
  const auto p = two_blobs(40, 5.0);
  const auto a = kmeans(p, 3, 2), b = kmeans(p + 3.0, 3, 2);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NEAR(a.inertia, b.inertia, 1e-9);
}

TEST(KMeans, Errors) {
  EXPECT_THROW(kmeans(torch::zeros({3, 2}), 4, 0), DataError);
  EXPECT_THROW(kmeans(torch::zeros({3, 2}), 0, 0), UsageError);
}

TEST(Export, RecordsAndReproducible) {
  testutil::TempDir dir;
  write_classification_task(dir.path / "task", 3, 16, 1);
  torch::manual_seed(9);
  VisionTransformer vit(small_vit());
  const auto manifest = dir.path / "task" / "manifest.txt";
  EXPECT_EQ(export_embeddings(vit, manifest, dir.path / "a.tsv", 16), 3);
  EXPECT_EQ(export_embeddings(vit, manifest, dir.path / "b.tsv", 16), 3);
  EXPECT_EQ(slurp(dir.path / "a.tsv"), slurp(dir.path / "b.tsv"));
  std::istringstream in(slurp(dir.path / "a.tsv"));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto t1 = line.find('\t'), t2 = line.find('\t', t1 + 1);
    ASSERT_NE(t2, std::string::npos);
    EXPECT_EQ(line.substr(t1 + 1, t2 - t1 - 1), std::to_string(n % 2));
    EXPECT_EQ(std::count(line.begin() + static_cast<std::ptrdiff_t>(t2), line.end(), ','), 15);
    ++n;
  }
  EXPECT_EQ(n, 3);
}
