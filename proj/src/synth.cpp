#include "radvit/synth.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include <ATen/CPUGeneratorImpl.h>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "radvit/error.hpp"
#include "radvit/radprep.hpp"
#include "radvit/raw_tensor.hpp"

namespace radvit {
namespace {

at::Generator make_gen(uint64_t seed) { return at::make_generator<at::CPUGeneratorImpl>(seed); }

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

std::string numbered(const std::string& stem, int64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%04lld.rvt", stem.c_str(), static_cast<long long>(i));
  return buf;
}

ManifestRecord record(const std::filesystem::path& path, int rank, const torch::Tensor& x) {
  ManifestRecord r;
  r.path = path;
  r.kind = rank == 2 ? RecordKind::image2d : RecordKind::volume3d;
  r.modality = rank == 2 ? "PAN" : "CBCT";
  r.dims = x.sizes().vec();
  return r;
}

void check_rank(int rank) {
  if (rank != 2 && rank != 3) throw UsageError("rank must be 2 or 3, got " + std::to_string(rank));
}

}  // namespace

torch::Tensor synth_radiograph(int64_t height, int64_t width, uint64_t seed) {
  if (height < 8 || width < 8) throw UsageError("synthetic radiographs need at least 8x8 pixels");
  std::mt19937_64 rng(seed);
  auto gen = make_gen(seed ^ 0x5bd1e995ULL);
  const auto opt = torch::TensorOptions().dtype(torch::kFloat32);
  const auto y = torch::linspace(-1.0, 1.0, height, opt).unsqueeze(1).expand({height, width});
  const auto x = torch::linspace(-1.0, 1.0, width, opt).unsqueeze(0).expand({height, width});

  auto img = 30.0 + 20.0 * (1.0 - y.abs()) + torch::zeros({height, width}, opt);
  // Two arches, upper and lower jaw, each with a row of teeth.
  for (int jaw = 0; jaw < 2; ++jaw) {
    const double sign = jaw == 0 ? -1.0 : 1.0;
    const double base = sign * uniform(rng, 0.05, 0.2);
    const double curve = uniform(rng, 0.3, 0.6);
    const auto arch = base - sign * curve * x.pow(2);
    img = img + 70.0 * torch::exp(-(y - arch).pow(2) / 0.01);
    const int teeth = static_cast<int>(uniform(rng, 6, 12));
    for (int t = 0; t < teeth; ++t) {
      const double cx = -0.85 + 1.7 * (t + 0.5) / teeth + uniform(rng, -0.03, 0.03);
      const double half_w = uniform(rng, 0.03, 0.06);
      const double len = uniform(rng, 0.15, 0.3);
      const double top = base - sign * curve * cx * cx;
      const auto in_x = (x - cx).abs() < half_w;
      const auto in_y = sign < 0 ? (y > top - len) & (y < top) : (y > top) & (y < top + len);
      img = img + in_x.logical_and(in_y).to(torch::kFloat32) * uniform(rng, 80.0, 130.0);
    }
  }
  img = img + 6.0 * torch::randn({height, width}, gen, opt);
  return img.clamp(0.0, 255.0).contiguous();
}

torch::Tensor synth_volume(int64_t size, uint64_t seed) {
  if (size < 8) throw UsageError("synthetic volumes need at least 8 voxels per axis");
  std::mt19937_64 rng(seed);
  auto gen = make_gen(seed ^ 0x27d4eb2fULL);
  const auto opt = torch::TensorOptions().dtype(torch::kFloat32);
  const auto a = torch::linspace(-1.0, 1.0, size, opt);
  const auto z = a.view({size, 1, 1}), y = a.view({1, size, 1}), x = a.view({1, 1, size});
  const auto r = (z.pow(2) / uniform(rng, 0.5, 0.8) + y.pow(2) / uniform(rng, 0.5, 0.8) +
                  x.pow(2) / uniform(rng, 0.5, 0.8)).sqrt();
  auto vol = torch::full({size, size, size}, -1000.0, opt);
  vol = vol + 1000.0 * (r < 1.0).to(torch::kFloat32);                          // soft tissue
  vol = vol + 1200.0 * ((r > 0.75) & (r < 0.9)).to(torch::kFloat32);           // cortical shell
  const int inclusions = static_cast<int>(uniform(rng, 4, 9));
  for (int i = 0; i < inclusions; ++i) {
    const double cz = uniform(rng, -0.5, 0.5), cy = uniform(rng, -0.5, 0.5), cx = uniform(rng, -0.5, 0.5);
    const double h = uniform(rng, 0.06, 0.16);
    const auto box = ((z - cz).abs() < h) & ((y - cy).abs() < h) & ((x - cx).abs() < 1.5 * h);
    vol = vol + uniform(rng, 800.0, 1800.0) * box.to(torch::kFloat32);
  }
  vol = vol + 40.0 * torch::randn({size, size, size}, gen, opt);
  return vol.contiguous();
}

SegSample bright_box(int rank, int64_t size, uint64_t seed) {
  check_rank(rank);
  if (size < 8) throw UsageError("bright_box size must be >= 8");
  std::mt19937_64 rng(seed);
  auto gen = make_gen(seed ^ 0x9e3779b9ULL);
  const std::vector<int64_t> shape(static_cast<std::size_t>(rank), size);
  auto image = 40.0 + 12.0 * torch::randn(shape, gen, torch::kFloat32);
  auto mask = torch::zeros(shape, torch::kInt64);
  std::vector<at::indexing::TensorIndex> idx;
  for (int d = 0; d < rank; ++d) {
    const auto side = static_cast<int64_t>(uniform(rng, 0.25, 0.5) * static_cast<double>(size));
    const auto lo = static_cast<int64_t>(uniform(rng, 0.0, static_cast<double>(size - side)));
    idx.emplace_back(at::indexing::Slice(lo, lo + side));
  }
  mask.index_put_(idx, 1);
  image = image + mask.to(torch::kFloat32) * uniform(rng, 120.0, 160.0);
  return {image.contiguous(), mask};
}

torch::Tensor blob_image(int64_t size, int64_t label, uint64_t seed) {
  if (label != 0 && label != 1) throw UsageError("blob label must be 0 or 1");
  std::mt19937_64 rng(seed);
  auto gen = make_gen(seed ^ 0x85ebca6bULL);
  const auto opt = torch::TensorOptions().dtype(torch::kFloat32);
  const auto y = torch::linspace(-1.0, 1.0, size, opt).unsqueeze(1);
  const auto x = torch::linspace(-1.0, 1.0, size, opt).unsqueeze(0);
  const double cx = (label == 0 ? -0.5 : 0.5) + uniform(rng, -0.15, 0.15);
  const double cy = uniform(rng, -0.4, 0.4);
  const double s = uniform(rng, 0.12, 0.2);
  const auto blob = torch::exp(-((x - cx).pow(2) + (y - cy).pow(2)) / (2.0 * s * s));
  return (50.0 + 150.0 * blob + 8.0 * torch::randn({size, size}, gen, opt)).contiguous();
}

std::filesystem::path write_pretrain_corpus(const std::filesystem::path& dir, int rank, int64_t count,
                                            int64_t size, uint64_t seed) {
  check_rank(rank);
  std::filesystem::create_directories(dir);
  std::vector<ManifestRecord> records;
  for (int64_t i = 0; i < count; ++i) {
    const auto s = seed * 1000003ULL + static_cast<uint64_t>(i);
    const auto x = rank == 2 ? synth_radiograph(size, size + size / 2, s) : synth_volume(size, s);
    const auto path = dir / numbered(rank == 2 ? "pan" : "cbct", i);
    save_raw(path, x);
    records.push_back(record(path, rank, x));
  }
  const auto manifest = dir / "manifest.txt";
  auto out = open_out(manifest);
  write_manifest(out, records, dir);
  return manifest;
}

std::filesystem::path write_classification_task(const std::filesystem::path& dir, int64_t count, int64_t size,
                                                uint64_t seed) {
  std::filesystem::create_directories(dir);
  std::vector<ManifestRecord> records;
  for (int64_t i = 0; i < count; ++i) {
    const int64_t label = i % 2;
    const auto x = blob_image(size, label, seed * 1000003ULL + static_cast<uint64_t>(i));
    const auto path = dir / numbered("blob", i);
    save_raw(path, x);
    auto r = record(path, 2, x);
    r.split_tag = std::to_string(label);
    records.push_back(std::move(r));
  }
  auto out = open_out(dir / "manifest.txt");
  write_manifest(out, records, dir);
  const nlohmann::json task = {{"name", "blobs"}, {"type", "classification"}, {"manifest", "manifest.txt"},
                               {"classes", 2},     {"metrics", {"ACC"}}};
  const auto desc = dir / "task.json";
  open_out(desc) << task.dump(2) << '\n';
  return desc;
}

std::filesystem::path write_segmentation_task(const std::filesystem::path& dir, int rank, int64_t count,
                                              int64_t size, uint64_t seed) {
  check_rank(rank);
  std::filesystem::create_directories(dir / "masks");
  std::vector<ManifestRecord> records;
  for (int64_t i = 0; i < count; ++i) {
    const auto s = bright_box(rank, size, seed * 1000003ULL + static_cast<uint64_t>(i));
    const auto name = numbered(rank == 2 ? "square" : "cube", i);
    save_raw(dir / name, s.image);
    save_raw(dir / "masks" / name, s.mask);
    records.push_back(record(dir / name, rank, s.image));
  }
  auto out = open_out(dir / "manifest.txt");
  write_manifest(out, records, dir);
  const nlohmann::json task = {{"name", rank == 2 ? "bright-square" : "bright-cube"},
                               {"type", "segmentation"},
                               {"manifest", "manifest.txt"},
                               {"mask_dir", "masks"},
                               {"classes", 1},
                               {"metrics", {"Dice", "IoU"}}};
  const auto desc = dir / "task.json";
  open_out(desc) << task.dump(2) << '\n';
  return desc;
}

}  // namespace radvit
