#pragma once

/**
 * @file introspect.hpp
 * @brief Attention maps, pixel-level clustering and embedding export.
 */

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "radvit/backbone.hpp"

namespace radvit {

enum class MergeMode { mean, max };
MergeMode parse_merge_mode(const std::string& s);

struct AttentionOptions {
  int64_t layer = -1;             // negative counts from the last block
  std::vector<int64_t> heads;     // heads to render; empty selects the first four
  MergeMode merge = MergeMode::mean;
};

struct AttentionMapSet {
  torch::Tensor heads;   // (heads, grid...) float64, each map sums to 1
  torch::Tensor merged;  // (grid...) float64, sums to 1
  std::vector<int64_t> selected;
  std::vector<int64_t> grid;
  int64_t layer = 0;      // zero-based block index
  int64_t iteration = 0;  // checkpoint iteration, when known
};

/// [CLS]-query attention over patch tokens for a single input (C, spatial...)
/// or (1, C, spatial...). The [CLS] column is dropped and each row
/// renormalised over patches.
AttentionMapSet cls_attention(VisionTransformer& vit, const torch::Tensor& x, const AttentionOptions& opts = {});

/// One map set per checkpoint, sorted by iteration (stable). All checkpoints
/// must hold the same backbone architecture.
std::vector<AttentionMapSet> snapshot_series(const std::vector<std::filesystem::path>& checkpoints,
                                             const torch::Tensor& x, const AttentionOptions& opts = {});

/// Write `<stem>_head<i>.ppm` for each selected head and `<stem>_merged.ppm`,
/// each an upsampled map blended over `image` (spatial..., values in [0, 1]).
/// Volumes render their middle slice along axis 0. Returns written paths.
std::vector<std::filesystem::path> render_overlays(const AttentionMapSet& maps, const torch::Tensor& image,
                                                   const std::filesystem::path& dir, const std::string& stem);

/// Binary PPM (P6) from an (H, W, 3) tensor with values in [0, 1].
void write_ppm(const std::filesystem::path& path, const torch::Tensor& rgb);

/// Final-layer patch tokens interpolated to the input resolution:
/// (B, C, spatial...) -> (B, K, spatial...).
torch::Tensor pixel_features(VisionTransformer& vit, const torch::Tensor& x);

struct ClusterAssignment {
  std::vector<int64_t> labels;
  torch::Tensor centroids;  // (k, D) float64
  int64_t k = 0;
  uint64_t seed = 0;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after every assignment step
  int64_t iterations = 0;
};

/// k-means++ seeding followed by Lloyd iterations on (N, D) points. Stops
/// when assignments no longer change or after `iters` rounds.
ClusterAssignment kmeans(const torch::Tensor& points, int64_t k, uint64_t seed, int64_t iters = 100);

/// Write one `id<TAB>label<TAB>v1,v2,...` record per row of `embeddings`.
void write_embeddings(const std::filesystem::path& path, const std::vector<std::string>& ids,
                      const std::vector<std::string>& labels, const torch::Tensor& embeddings);

/// Embed every manifest record with the backbone [CLS] token and write the
/// records. Labels come from the fifth manifest column ("-" when absent).
/// Returns the number of records written.
int64_t export_embeddings(VisionTransformer& vit, const std::filesystem::path& manifest,
                          const std::filesystem::path& out, int64_t input_size, int layers = 1);

}  // namespace radvit
