#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "radvit/error.hpp"
#include "radvit/radprep.hpp"
#include "radvit/raw_tensor.hpp"
#include "test_util.hpp"

using namespace radvit;

namespace {

RadImage image_of(torch::Tensor t) {
  RadImage img;
  img.pixels = t.to(torch::kFloat32);
  return img;
}

VolumeGrid volume_of(torch::Tensor t) {
  VolumeGrid v;
  v.voxels = t.to(torch::kFloat32);
  return v;
}

// Sort every voxel, take nearest ranks ceil(5n/1000) and ceil(995n/1000),
// clip and rescale in single precision.
std::vector<float> percentile_oracle(const std::vector<float>& values) {
  std::vector<float> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const std::size_t r_lo = std::max<std::size_t>(1, (5 * n + 999) / 1000);
  const std::size_t r_hi = std::max<std::size_t>(1, (995 * n + 999) / 1000);
  const float lo = sorted[r_lo - 1];
  const float hi = sorted[r_hi - 1];
  std::vector<float> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(hi > lo)) {
      out[i] = 0.0f;
      continue;
    }
    const float c = values[i] < lo ? lo : (values[i] > hi ? hi : values[i]);
    out[i] = (c - lo) / (hi - lo);
  }
  return out;
}

}  // namespace

TEST(NormalizeImage, LinearEndpoints) {
  const auto out = normalize_image(image_of(torch::tensor({10.0f, 20.0f, 30.0f}).reshape({1, 3})));
  EXPECT_FLOAT_EQ(out.pixels[0][0].item<float>(), 0.0f);
  EXPECT_FLOAT_EQ(out.pixels[0][1].item<float>(), 127.5f);
  EXPECT_FLOAT_EQ(out.pixels[0][2].item<float>(), 255.0f);
}

TEST(NormalizeImage, ConstantMapsToZero) {
  const auto out = normalize_image(image_of(torch::full({4, 5}, 7.0)));
  EXPECT_EQ(out.pixels.abs().max().item<float>(), 0.0f);
}

TEST(NormalizeImage, RandomHitsRangeEnds) {
  torch::manual_seed(3);
  const auto out = normalize_image(image_of(torch::randn({17, 23}) * 40 + 3));
  EXPECT_EQ(out.pixels.min().item<float>(), 0.0f);
  EXPECT_EQ(out.pixels.max().item<float>(), 255.0f);
}

TEST(NormalizeImage, EmptyThrows) {
  EXPECT_THROW(normalize_image(image_of(torch::zeros({0, 3}))), DataError);
}

TEST(NormalizeVolume, MatchesSortOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t d = 1 + static_cast<int64_t>(rng() % 9), h = 1 + static_cast<int64_t>(rng() % 9),
                  w = 1 + static_cast<int64_t>(rng() % 9);
    const auto x = torch::randn({d, h, w}, torch::kFloat32) * 500;
    const auto values = testutil::floats(x);
    const auto expect = percentile_oracle(values);
    const auto got = testutil::floats(normalize_volume(volume_of(x)).voxels);
    ASSERT_EQ(got, expect) << "trial " << trial;
  }
}

TEST(NormalizeVolume, UniformRampClipsAtRanks) {
  const auto x = torch::arange(0, 1001, torch::kFloat32).reshape({7, 11, 13});
  const auto out = normalize_volume(volume_of(x)).voxels;
  // 1001 values: ranks 6 and 996 hold 5 and 995.
  EXPECT_EQ(out.min().item<float>(), 0.0f);
  EXPECT_EQ(out.max().item<float>(), 1.0f);
  EXPECT_EQ(out.flatten()[5].item<float>(), 0.0f);
  EXPECT_FLOAT_EQ(out.flatten()[6].item<float>(), 1.0f / 990.0f);
}

TEST(NormalizeVolume, DegenerateCases) {
  EXPECT_EQ(normalize_volume(volume_of(torch::full({3, 3, 3}, 7.0))).voxels.abs().max().item<float>(), 0.0f);
  const auto two = normalize_volume(volume_of(torch::tensor({0.0f, 1.0f}).reshape({1, 1, 2}))).voxels.flatten();
  EXPECT_EQ(two[0].item<float>(), 0.0f);
  EXPECT_EQ(two[1].item<float>(), 1.0f);
  EXPECT_THROW(normalize_volume(volume_of(torch::zeros({0, 2, 2}))), DataError);
}

TEST(NormalizeVolume, IdempotentAndMonotone) {
  torch::manual_seed(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = torch::randn({6, 7, 8}) * 100;
    const auto once = normalize_volume(volume_of(x)).voxels;
    const auto twice = normalize_volume(volume_of(once)).voxels;
    EXPECT_LE((once - twice).abs().max().item<float>(), 1e-6f);
    const auto order = x.flatten().argsort();
    const auto sorted_out = once.flatten().index_select(0, order);
    EXPECT_TRUE((sorted_out.slice(0, 1) >= sorted_out.slice(0, 0, -1)).all().item<bool>());
  }
}

TEST(CropForeground, BrightBlock) {
  auto x = torch::zeros({100, 100});
  x.slice(0, 40, 60).slice(1, 40, 60).fill_(200.0);
  const auto out = crop_foreground(x, CropConfig{0.05, 0});
  EXPECT_EQ(out.sizes(), (std::vector<int64_t>{20, 20}));
  EXPECT_EQ(crop_foreground(x, CropConfig{0.05, 2}).size(0), 24);
}

TEST(CropForeground, AllZeroUnchanged) {
  const auto x = torch::zeros({9, 9});
  EXPECT_TRUE(torch::equal(crop_foreground(x), x));
}

TEST(CropForeground, CubeBoxMatchesScan) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 10; ++trial) {
    auto v = torch::zeros({64, 64, 64});
    std::vector<int64_t> lo, hi;
    for (int a = 0; a < 3; ++a) {
      lo.push_back(static_cast<int64_t>(rng() % 40));
      hi.push_back(lo.back() + 1 + static_cast<int64_t>(rng() % 20));
    }
    v.slice(0, lo[0], hi[0]).slice(1, lo[1], hi[1]).slice(2, lo[2], hi[2]).fill_(1.0);
    const auto box = foreground_box(v, CropConfig{0.05, 0});
    ASSERT_TRUE(box);
    // Oracle: scan every voxel.
    std::vector<int64_t> mn(3, 64), mx(3, -1);
    const auto acc = v.accessor<float, 3>();
    for (int64_t i = 0; i < 64; ++i)
      for (int64_t j = 0; j < 64; ++j)
        for (int64_t k = 0; k < 64; ++k)
          if (acc[i][j][k] > 0.05f) {
            const int64_t p[3] = {i, j, k};
            for (int a = 0; a < 3; ++a) mn[a] = std::min(mn[a], p[a]), mx[a] = std::max(mx[a], p[a] + 1);
          }
    EXPECT_EQ(box->lo, mn);
    EXPECT_EQ(box->hi, mx);
  }
}

TEST(CropForeground, ContainsEveryForegroundElement) {
  torch::manual_seed(8);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = torch::rand({31, 29}).pow(6) * 255;
    const CropConfig cfg{0.3, 1};
    const auto box = foreground_box(x, cfg);
    ASSERT_TRUE(box);
    const double thr = x.min().item<double>() + 0.3 * (x.max().item<double>() - x.min().item<double>());
    const auto fg = torch::nonzero(x > thr);
    for (int a = 0; a < 2; ++a) {
      EXPECT_GE(box->lo[a], 0);
      EXPECT_LE(box->hi[a], x.size(a));
      EXPECT_LE(box->lo[a], fg.select(1, a).min().item<int64_t>());
      EXPECT_GT(box->hi[a], fg.select(1, a).max().item<int64_t>());
    }
  }
}

TEST(QualityFilter, ConstantImageFails) {
  const auto rep = quality_filter(image_of(torch::full({8, 8}, 100.0)));
  EXPECT_EQ(rep.entropy, 0.0);
  EXPECT_FALSE(rep.passed);
}

TEST(QualityFilter, UniformHistogramIsEightBits) {
  const auto rep = quality_filter(image_of(torch::arange(0, 256, torch::kFloat32).reshape({16, 16})));
  EXPECT_NEAR(rep.entropy, 8.0, 1e-12);
  int64_t total = 0;
  for (auto c : rep.histogram) total += c;
  EXPECT_EQ(total, 256);
}

TEST(QualityFilter, MatchesDirectOracle) {
  torch::manual_seed(4);
  const auto img = normalize_image(image_of(torch::randn({40, 60}).abs() * 30 + torch::rand({40, 60}) * 10));
  const auto rep = quality_filter(img);
  const auto v = testutil::floats(img.pixels);
  std::vector<double> hist(256, 0.0);
  for (float p : v) hist[std::min<std::size_t>(255, static_cast<std::size_t>(p))] += 1.0;
  double h = 0.0;
  for (double c : hist)
    if (c > 0) h -= c / v.size() * std::log2(c / v.size());
  EXPECT_NEAR(rep.entropy, h, 1e-12);
  EXPECT_GE(rep.entropy, 0.0);
  EXPECT_LE(rep.entropy, 8.0);
}

TEST(ExtractSlices, CountsShapesAndDeterminism) {
  const auto v = volume_of(torch::rand({64, 64, 64}));
  const auto s = extract_slices(v, 2, 9);
  ASSERT_EQ(s.size(), 6u);
  for (const auto& img : s) EXPECT_EQ(img.pixels.sizes(), (std::vector<int64_t>{64, 64}));
  EXPECT_TRUE(extract_slices(v, 0, 9).empty());
  const auto again = extract_slices(v, 2, 9);
  for (std::size_t i = 0; i < s.size(); ++i) {
    EXPECT_EQ(s[i].source_id, again[i].source_id);
    EXPECT_TRUE(torch::equal(s[i].pixels, again[i].pixels));
  }
  EXPECT_EQ(extract_slices(volume_of(torch::rand({3, 4, 5})), 10, 1).size(), 12u);
}

TEST(RawTensor, RoundTripAndHeader) {
  testutil::TempDir dir;
  for (auto dtype : {torch::kFloat32, torch::kFloat64, torch::kUInt8, torch::kInt32, torch::kInt64}) {
    const auto t = (torch::rand({3, 4, 5}) * 100).to(dtype);
    const auto p = dir.path / "t.rvt";
    save_raw(p, t);
    EXPECT_TRUE(torch::equal(load_raw(p), t));
    EXPECT_EQ(peek_raw(p).dims, (std::vector<int64_t>{3, 4, 5}));
    EXPECT_EQ(std::filesystem::file_size(p), kRawHeaderBytes + static_cast<std::size_t>(t.nbytes()));
  }
}

TEST(Manifest, EmptyAndValidLines) {
  testutil::TempDir dir;
  std::istringstream empty("");
  EXPECT_TRUE(parse_manifest(empty, dir.path).empty());
  save_raw(dir.path / "a.rvt", torch::zeros({4, 5}));
  save_raw(dir.path / "b.rvt", torch::zeros({2, 3, 4}));
  std::istringstream three(
      "# comment\na.rvt image2d PAN 4,5\nb.rvt volume3d CBCT 2,3,4 train\n\na.rvt image2d lat 4,5 7\n");
  const auto recs = parse_manifest(three, dir.path);
  ASSERT_EQ(recs.size(), 3u);
  EXPECT_EQ(recs[0].kind, RecordKind::image2d);
  EXPECT_EQ(recs[1].dims, (std::vector<int64_t>{2, 3, 4}));
  EXPECT_EQ(recs[1].split_tag.value_or(""), "train");
  EXPECT_EQ(recs[2].modality, "LAT");
  EXPECT_EQ(recs[2].line, 5);
}

TEST(Manifest, KindPayloadMismatchNamesLine) {
  testutil::TempDir dir;
  save_raw(dir.path / "a.rvt", torch::zeros({4, 5}));
  std::istringstream in("a.rvt image2d PAN 4,5\na.rvt volume3d CT 1,4,5\n");
  try {
    parse_manifest(in, dir.path);
    FAIL() << "expected a DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Manifest, MissingFileThrows) {
  EXPECT_THROW(ingest_manifest("/nonexistent/manifest.txt"), DataError);
}
