#pragma once

/**
 * @file backbone.hpp
 * @brief Plain vision transformer with 2D or 3D patch tokenizer.
 *
 * Pre-norm blocks with multi-head self-attention and a SwiGLU feed-forward,
 * a learned [CLS] token, a learned positional table defined on the global
 * crop grid (resampled for other grids), a shared learned mask token and
 * per-block stochastic depth.
 */

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "radvit/checkpoint.hpp"

namespace radvit {

struct BackboneConfig {
  std::string variant = "B";
  int64_t embed_dim = 768;
  int64_t heads = 12;
  int64_t blocks = 12;
  int64_t patch_size = 14;
  int input_rank = 2;
  int64_t in_channels = 1;
  double drop_path_rate = 0.0;
  int64_t ffn_hidden = 0;  // 0 selects swiglu_hidden(embed_dim, heads)
  int64_t base_grid = 16;  // tokens per axis of the stored positional table

  int64_t ffn_hidden_dim() const;
  int64_t base_tokens() const;
  void validate() const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
  bool operator==(const BackboneConfig&) const = default;
};

/// Hidden width of the SwiGLU branch: 4K * 2/3 rounded to the nearest multiple
/// of the head count.
int64_t swiglu_hidden(int64_t embed_dim, int64_t heads);

/// Table values for "B", "L" and "G". 2D variants use 14-pixel patches over a
/// 224 global crop, 3D variants 16-voxel patches over a 96 global crop.
BackboneConfig make_variant(const std::string& name, int input_rank = 2);

/// Closed-form parameter count of a backbone built from `cfg`.
int64_t parameter_count(const BackboneConfig& cfg);

/// Token counts per spatial axis. Throws DataError naming the first axis that
/// is not a multiple of the patch size.
std::vector<int64_t> token_grid(at::IntArrayRef spatial, const BackboneConfig& cfg);

/// Resize (B, C, spatial...) so every spatial dim becomes the nearest
/// positive multiple of `patch`. Returns the input untouched when already
/// divisible.
torch::Tensor resize_to_patch_multiple(const torch::Tensor& x, int64_t patch);

/// Resample a (N_base, K) patch positional table from `base_grid` to
/// `target_grid` with (bi|tri)linear interpolation, corners aligned.
torch::Tensor interpolate_pos_embed(const torch::Tensor& table, const std::vector<int64_t>& base_grid,
                                    const std::vector<int64_t>& target_grid);

/// Drop entire residual branches per sample with probability `rate` and
/// rescale survivors; identity in eval mode or when `rate` is 0.
torch::Tensor drop_path(const torch::Tensor& x, double rate, bool training);

class SelfAttentionImpl : public torch::nn::Module {
 public:
  SelfAttentionImpl(int64_t dim, int64_t heads);
  /// (B, T, K) -> (B, T, K). Writes the (B, heads, T, T) attention
  /// probabilities to `attention` when it is non-null.
  torch::Tensor forward(const torch::Tensor& x, torch::Tensor* attention = nullptr);

  torch::nn::Linear qkv{nullptr}, proj{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(SelfAttention);

class SwiGLUImpl : public torch::nn::Module {
 public:
  SwiGLUImpl(int64_t dim, int64_t hidden);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Linear w12{nullptr}, w3{nullptr};
};
TORCH_MODULE(SwiGLU);

class BlockImpl : public torch::nn::Module {
 public:
  BlockImpl(int64_t dim, int64_t heads, int64_t hidden, double drop_path);
  torch::Tensor forward(const torch::Tensor& x, torch::Tensor* attention = nullptr);

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  SelfAttention attn{nullptr};
  SwiGLU mlp{nullptr};

 private:
  double drop_path_;
};
TORCH_MODULE(Block);

/// Spec of a masked student view: one flag per patch token.
using TokenMask = torch::Tensor;  // (B, N) bool

struct ForwardOptions {
  std::optional<TokenMask> mask;
  /// Block whose attention probabilities are kept; negative counts from the end.
  int64_t attention_layer = -1;
  bool keep_attention = false;
};

/// Outputs of every block, passed through the final LayerNorm.
struct LayerFeatures {
  std::vector<torch::Tensor> layers;  // each (B, 1 + N, K)
  std::vector<int64_t> grid;
  torch::Tensor attention;  // (B, heads, 1 + N, 1 + N) when requested
  int64_t attention_layer = -1;

  torch::Tensor cls(int64_t layer = -1) const;
  torch::Tensor patches(int64_t layer = -1) const;
  int64_t size() const { return static_cast<int64_t>(layers.size()); }
};

class VisionTransformerImpl : public torch::nn::Module {
 public:
  explicit VisionTransformerImpl(BackboneConfig cfg);

  const BackboneConfig& config() const { return cfg_; }

  /// Patchify (B, C, spatial...) input, substitute the mask token where
  /// `mask` is set, add positional embeddings and prepend [CLS].
  /// Returns (B, 1 + N, K) and fills `grid`.
  torch::Tensor embed(const torch::Tensor& x, const std::optional<TokenMask>& mask,
                      std::vector<int64_t>& grid);

  /// Positional rows for a token grid, [CLS] row first: (1, 1 + N, K).
  torch::Tensor positional(const std::vector<int64_t>& grid);

  torch::Tensor run_block(int64_t index, const torch::Tensor& tokens, torch::Tensor* attention = nullptr);
  torch::Tensor final_norm(const torch::Tensor& tokens);

  LayerFeatures forward(const torch::Tensor& x, const ForwardOptions& opts = {});

  torch::nn::AnyModule patch_embed;
  torch::Tensor cls_token, pos_embed, mask_token;
  torch::nn::ModuleList blocks;
  torch::nn::LayerNorm norm{nullptr};

 private:
  BackboneConfig cfg_;
};
TORCH_MODULE(VisionTransformer);

/// Freeze every parameter (requires_grad = false) and switch to eval mode.
void freeze(torch::nn::Module& module);

/// Standalone backbone checkpoint: tensors under "backbone." and metadata
/// {variant, patch_size, input_rank, iteration, backbone}.
void save_backbone(const std::filesystem::path& path, VisionTransformer& vit, int64_t iteration);

/// Load a backbone from either a standalone backbone checkpoint or a
/// pre-training checkpoint (teacher weights).
VisionTransformer load_backbone(const std::filesystem::path& path, int64_t* iteration = nullptr);
VisionTransformer backbone_from_checkpoint(const Checkpoint& ckpt, int64_t* iteration = nullptr);

}  // namespace radvit
