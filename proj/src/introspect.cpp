#include "radvit/introspect.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>

#include "radvit/adapters.hpp"
#include "radvit/error.hpp"
#include "radvit/radprep.hpp"

namespace radvit {
namespace {

namespace F = torch::nn::functional;

F::InterpolateFuncOptions::mode_t linear_mode(std::size_t rank) {
  if (rank == 2) return torch::kBilinear;
  return torch::kTrilinear;
}

torch::Tensor upsample(const torch::Tensor& x, const std::vector<int64_t>& size) {
  return F::interpolate(x, F::InterpolateFuncOptions().size(size).mode(linear_mode(size.size())).align_corners(false));
}

/// Uniform double in [0, 1) from the top 53 bits, identical on every platform.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Per-head overlay tints; the merged map always uses the last entry.
constexpr std::array<std::array<double, 3>, 7> kTints{{{1.0, 0.2, 0.2},
                                                       {0.2, 1.0, 0.2},
                                                       {0.3, 0.5, 1.0},
                                                       {1.0, 0.9, 0.1},
                                                       {1.0, 0.3, 1.0},
                                                       {0.1, 1.0, 1.0},
                                                       {1.0, 0.6, 0.0}}};

}  // namespace

MergeMode parse_merge_mode(const std::string& s) {
  if (s == "mean") return MergeMode::mean;
  if (s == "max") return MergeMode::max;
  throw UsageError("merge mode must be mean or max, got '" + s + "'");
}

AttentionMapSet cls_attention(VisionTransformer& vit, const torch::Tensor& x, const AttentionOptions& opts) {
  const auto& cfg = vit->config();
  auto input = x;
  if (input.dim() == cfg.input_rank + 1) input = input.unsqueeze(0);
  if (input.dim() != cfg.input_rank + 2 || input.size(0) != 1) {
    throw DataError("cls_attention expects a single input of rank " + std::to_string(cfg.input_rank));
  }
  vit->eval();
  torch::NoGradGuard g;
  ForwardOptions fo;
  fo.attention_layer = opts.layer;
  fo.keep_attention = true;
  const auto f = vit->forward(input, fo);

  AttentionMapSet out;
  out.grid = f.grid;
  out.layer = f.attention_layer;
  auto row = f.attention[0].select(1, 0).slice(1, 1).to(torch::kFloat64);  // (heads, N)
  row = row / row.sum(1, true);
  std::vector<int64_t> shape{row.size(0)};
  shape.insert(shape.end(), f.grid.begin(), f.grid.end());
  out.heads = row.reshape(shape);

  torch::Tensor merged = opts.merge == MergeMode::mean ? row.mean(0) : std::get<0>(row.max(0));
  out.merged = (merged / merged.sum()).reshape(f.grid);

  if (opts.heads.empty()) {
    for (int64_t h = 0; h < std::min<int64_t>(4, cfg.heads); ++h) out.selected.push_back(h);
  } else {
    for (auto h : opts.heads) {
      if (h < 0 || h >= cfg.heads) throw UsageError("attention head " + std::to_string(h) + " out of range");
      out.selected.push_back(h);
    }
  }
  return out;
}

std::vector<AttentionMapSet> snapshot_series(const std::vector<std::filesystem::path>& checkpoints,
                                             const torch::Tensor& x, const AttentionOptions& opts) {
  if (checkpoints.empty()) throw UsageError("snapshot_series needs at least one checkpoint");
  std::vector<AttentionMapSet> out;
  BackboneConfig first;
  for (std::size_t i = 0; i < checkpoints.size(); ++i) {
    int64_t iteration = 0;
    auto vit = load_backbone(checkpoints[i], &iteration);
    auto cfg = vit->config();
    cfg.drop_path_rate = 0.0;
    if (i == 0) {
      first = cfg;
    } else if (!(cfg == first)) {
      throw DataError(checkpoints[i].string() + ": backbone variant differs from " + checkpoints[0].string());
    }
    auto maps = cls_attention(vit, x, opts);
    maps.iteration = iteration;
    out.push_back(std::move(maps));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const AttentionMapSet& a, const AttentionMapSet& b) { return a.iteration < b.iteration; });
  return out;
}

void write_ppm(const std::filesystem::path& path, const torch::Tensor& rgb) {
  if (rgb.dim() != 3 || rgb.size(2) != 3) throw DataError("write_ppm expects an (H, W, 3) tensor");
  const auto bytes = (rgb.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << rgb.size(1) << ' ' << rgb.size(0) << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data_ptr<uint8_t>()), bytes.numel());
  if (!out) throw DataError("write failed: " + path.string());
}

std::vector<std::filesystem::path> render_overlays(const AttentionMapSet& maps, const torch::Tensor& image,
                                                   const std::filesystem::path& dir, const std::string& stem) {
  const auto rank = maps.grid.size();
  if (static_cast<std::size_t>(image.dim()) != rank) throw DataError("overlay image rank differs from the map grid");
  std::filesystem::create_directories(dir);
  const auto full = image.sizes().vec();

  auto to_slice = [&](const torch::Tensor& map) {
    auto up = upsample(map.to(torch::kFloat32).unsqueeze(0).unsqueeze(0), full).squeeze(0).squeeze(0);
    if (rank == 3) up = up.select(0, up.size(0) / 2);
    return up;
  };
  auto base = image.to(torch::kFloat32);
  if (rank == 3) base = base.select(0, base.size(0) / 2);
  base = base.clamp(0.0, 1.0);

  auto blend = [&](const torch::Tensor& map, const std::array<double, 3>& tint, const std::filesystem::path& path) {
    auto m = to_slice(map);
    const double hi = m.max().item<double>();
    m = hi > 0 ? m / hi : m;
    std::vector<torch::Tensor> ch;
    for (double t : tint) ch.push_back(base * (1.0 - 0.6 * m) + 0.6 * m * t);
    write_ppm(path, torch::stack(ch, -1));
  };

  std::vector<std::filesystem::path> written;
  for (std::size_t i = 0; i < maps.selected.size(); ++i) {
    const auto h = maps.selected[i];
    auto path = dir / (stem + "_head" + std::to_string(h) + ".ppm");
    blend(maps.heads[h], kTints[i % (kTints.size() - 1)], path);
    written.push_back(std::move(path));
  }
  auto path = dir / (stem + "_merged.ppm");
  blend(maps.merged, kTints.back(), path);
  written.push_back(std::move(path));
  return written;
}

torch::Tensor pixel_features(VisionTransformer& vit, const torch::Tensor& x) {
  vit->eval();
  torch::NoGradGuard g;
  const auto f = vit->forward(x);
  const auto tokens = f.patches(-1);  // (B, N, K)
  std::vector<int64_t> shape{tokens.size(0), tokens.size(2)};
  shape.insert(shape.end(), f.grid.begin(), f.grid.end());
  return upsample(tokens.transpose(1, 2).reshape(shape), x.sizes().slice(2).vec());
}

ClusterAssignment kmeans(const torch::Tensor& points, int64_t k, uint64_t seed, int64_t iters) {
  if (points.dim() != 2) throw DataError("kmeans expects (N, D) points");
  const int64_t n = points.size(0);
  if (k < 1) throw UsageError("kmeans: k must be >= 1");
  if (k > n) throw DataError("kmeans: k = " + std::to_string(k) + " exceeds the " + std::to_string(n) + " points");
  const auto x = points.detach().to(torch::kFloat64).contiguous();

  auto sq_dist = [&](const torch::Tensor& c) { return (x - c).pow(2).sum(1); };

  // k-means++ seeding.
  std::mt19937_64 rng(seed);
  std::vector<int64_t> chosen{static_cast<int64_t>(rng() % static_cast<uint64_t>(n))};
  auto nearest = sq_dist(x[chosen[0]]);
  while (static_cast<int64_t>(chosen.size()) < k) {
    const auto cum = nearest.cumsum(0);
    const double total = cum[n - 1].item<double>();
    int64_t next = 0;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      next = std::min<int64_t>(n - 1, (cum <= target).sum().item<int64_t>());
    } else {
      next = static_cast<int64_t>(rng() % static_cast<uint64_t>(n));
    }
    chosen.push_back(next);
    nearest = torch::minimum(nearest, sq_dist(x[next]));
  }
  auto centroids = x.index_select(0, torch::tensor(chosen, torch::kInt64)).clone();

  ClusterAssignment out;
  out.k = k;
  out.seed = seed;
  torch::Tensor labels;
  for (int64_t it = 0; it < std::max<int64_t>(1, iters); ++it) {
    std::vector<torch::Tensor> d;
    for (int64_t j = 0; j < k; ++j) d.push_back(sq_dist(centroids[j]));
    const auto dist = torch::stack(d, 1);
    const auto [best, arg] = dist.min(1);
    out.inertia = best.sum().item<double>();
    out.inertia_history.push_back(out.inertia);
    out.iterations = it + 1;
    const bool stable = labels.defined() && torch::equal(arg, labels);
    labels = arg;
    if (stable) break;
    for (int64_t j = 0; j < k; ++j) {
      const auto members = labels.eq(j);
      const auto count = members.sum().item<int64_t>();
      if (count > 0) centroids[j] = x.index({members}).mean(0);
    }
  }
  out.centroids = centroids;
  const auto l = labels.contiguous();
  out.labels.assign(l.data_ptr<int64_t>(), l.data_ptr<int64_t>() + l.numel());
  return out;
}

void write_embeddings(const std::filesystem::path& path, const std::vector<std::string>& ids,
                      const std::vector<std::string>& labels, const torch::Tensor& embeddings) {
  if (embeddings.dim() != 2 || embeddings.size(0) != static_cast<int64_t>(ids.size()) ||
      ids.size() != labels.size()) {
    throw DataError("write_embeddings: ids, labels and rows disagree");
  }
  const auto e = embeddings.detach().to(torch::kFloat64).contiguous();
  const double* v = e.data_ptr<double>();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  char buf[32];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i] << '\t' << labels[i] << '\t';
    for (int64_t j = 0; j < e.size(1); ++j) {
      std::snprintf(buf, sizeof buf, "%.9g", v[static_cast<int64_t>(i) * e.size(1) + j]);
      if (j) out << ',';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

int64_t export_embeddings(VisionTransformer& vit, const std::filesystem::path& manifest,
                          const std::filesystem::path& out, int64_t input_size, int layers) {
  const auto records = ingest_manifest(manifest);
  const int rank = vit->config().input_rank;
  std::vector<std::string> ids, labels;
  std::vector<torch::Tensor> rows;
  for (const auto& rec : records) {
    const auto x = model_input(rec, rank, input_size);
    rows.push_back(image_embedding(vit, x.unsqueeze(0), layers)[0]);
    ids.push_back(rec.path.stem().string());
    labels.push_back(rec.split_tag.value_or("-"));
  }
  const auto e = rows.empty() ? torch::zeros({0, vit->config().embed_dim}) : torch::stack(rows);
  write_embeddings(out, ids, labels, e);
  return static_cast<int64_t>(ids.size());
}

}  // namespace radvit
