#pragma once

/**
 * @file adapters.hpp
 * @brief Downstream heads and adapters over a frozen backbone.
 *
 * Linear probing, a linear segmentation head for 2D, a UNETR decoder for 3D,
 * a linear classification adapter with a learning-rate/layer grid search and
 * a ViT-Adapter (spatial prior module plus injector/extractor interactions).
 * No operation here changes backbone parameters.
 */

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "radvit/backbone.hpp"
#include "radvit/harness.hpp"
#include "radvit/logistic.hpp"
#include "radvit/radprep.hpp"

namespace radvit {

// ---------------------------------------------------------------------------
// Embeddings and linear probing

/// Last-layer [CLS] (layers = 1) or the mean of the last four [CLS] tokens.
torch::Tensor image_embedding(VisionTransformer& vit, const torch::Tensor& x, int layers);

/// Embeddings of (N, C, spatial...) inputs in eval mode, `batch` at a time.
torch::Tensor embed_all(VisionTransformer& vit, const torch::Tensor& x, int layers, int64_t batch = 32);

struct ProbeGrid {
  std::vector<double> Cs;
  int max_iter = 1000;
  double tol = 1e-12;

  /// 45 values log-spaced over [1e-6, 1e5].
  static ProbeGrid standard();
};

struct ProbeResult {
  LogisticModel model;  // refit on the whole training set at best_C
  double best_C = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;  // NaN without test data
  std::vector<double> val_curve;
};

/// Fit one classifier per C on a seeded 80/20 split of the training data,
/// keep the best validation accuracy (ties toward smaller C) and refit.
ProbeResult linear_probe(const Matrix& train_x, std::span<const int64_t> train_y, const Matrix& test_x,
                         std::span<const int64_t> test_y, int64_t classes, const ProbeGrid& grid = ProbeGrid::standard(),
                         double val_fraction = 0.2, uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Segmentation heads

/// Four token grids interpolated to the output size, concatenated, batch
/// normalised and mapped to class logits by a 1x1 convolution.
class LinearSegHeadImpl : public torch::nn::Module {
 public:
  LinearSegHeadImpl(int64_t embed_dim, int64_t classes);

  /// `layers`: four (B, N, K) token tensors on `grid`. Returns (B, classes, H, W).
  torch::Tensor forward(const std::vector<torch::Tensor>& layers, const std::vector<int64_t>& grid,
                        const std::vector<int64_t>& out_size);

  torch::nn::BatchNorm2d bn{nullptr};
  torch::nn::Conv2d classifier{nullptr};
};
TORCH_MODULE(LinearSegHead);

/// {L/4, L/2, 3L/4, L} (1-based block indices). Throws UsageError unless 4 | L.
std::vector<int64_t> unetr_layer_taps(int64_t blocks);

class UnetResBlockImpl : public torch::nn::Module {
 public:
  UnetResBlockImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::Conv3d conv1{nullptr}, conv2{nullptr}, conv3{nullptr};
  torch::nn::InstanceNorm3d norm1{nullptr}, norm2{nullptr}, norm3{nullptr};
};
TORCH_MODULE(UnetResBlock);

class UnetrPrUpBlockImpl : public torch::nn::Module {
 public:
  UnetrPrUpBlockImpl(int64_t in, int64_t out, int64_t layers);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::ConvTranspose3d init{nullptr};
  torch::nn::ModuleList stages;
};
TORCH_MODULE(UnetrPrUpBlock);

class UnetrUpBlockImpl : public torch::nn::Module {
 public:
  UnetrUpBlockImpl(int64_t in, int64_t out);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& skip);

  torch::nn::ConvTranspose3d up{nullptr};
  UnetResBlock block{nullptr};
};
TORCH_MODULE(UnetrUpBlock);

/// UNETR decoder for 16-voxel patches: the raw volume and four tapped token
/// grids are projected to 1, 1/2, 1/4 and 1/8 resolution and merged by an
/// upsampling path with skip connections.
class UNETRHeadImpl : public torch::nn::Module {
 public:
  UNETRHeadImpl(int64_t in_channels, int64_t embed_dim, int64_t classes, int64_t feature_size = 16,
                int64_t patch_size = 16);

  /// x: (B, C, D, H, W); taps: four (B, N, K) tensors on `grid`.
  torch::Tensor forward(const torch::Tensor& x, const std::vector<torch::Tensor>& taps,
                        const std::vector<int64_t>& grid);

  UnetResBlock encoder1{nullptr};
  UnetrPrUpBlock encoder2{nullptr}, encoder3{nullptr}, encoder4{nullptr};
  UnetrUpBlock decoder5{nullptr}, decoder4{nullptr}, decoder3{nullptr}, decoder2{nullptr};
  torch::nn::Conv3d out{nullptr};

 private:
  int64_t patch_size_;
};
TORCH_MODULE(UNETRHead);

// ---------------------------------------------------------------------------
// ViT-Adapter

struct FeaturePyramid {
  torch::Tensor tokens;                     // (B, N1 + N2 + N3, K)
  std::vector<std::vector<int64_t>> grids;  // 1/8, 1/16, 1/32
  std::vector<int64_t> counts;

  /// Level `i` as a (B, K, grid...) feature map.
  torch::Tensor level(std::size_t i) const;
  static FeaturePyramid from_tokens(const torch::Tensor& tokens, std::vector<std::vector<int64_t>> grids);
};

/// Closed form sum over s in {8, 16, 32} of prod(dims) / s^rank.
int64_t spm_token_count(const std::vector<int64_t>& dims);

/// Stride-2 3x3 (or 3x3x3) convolution stack producing 1/8, 1/16 and 1/32
/// maps, each projected to the embedding width by a 1x1 convolution with a
/// zero-initialised bias.
class SpatialPriorModuleImpl : public torch::nn::Module {
 public:
  SpatialPriorModuleImpl(int rank, int64_t in_channels, int64_t embed_dim, int64_t channels = 64);
  FeaturePyramid forward(const torch::Tensor& x);

  torch::nn::Sequential stem{nullptr}, down1{nullptr}, down2{nullptr}, down3{nullptr};
  torch::nn::AnyModule proj1, proj2, proj3;

 private:
  int rank_;
};
TORCH_MODULE(SpatialPriorModule);

/// Multi-head attention with separate query and key/value inputs.
class CrossAttentionImpl : public torch::nn::Module {
 public:
  CrossAttentionImpl(int64_t dim, int64_t heads);
  torch::Tensor forward(const torch::Tensor& query, const torch::Tensor& context);

  torch::nn::Linear q{nullptr}, k{nullptr}, v{nullptr}, o{nullptr};

 private:
  int64_t heads_;
};
TORCH_MODULE(CrossAttention);

/// vit + gamma * Attention(norm(vit), norm(sp)); gamma starts at 0.
class InjectorImpl : public torch::nn::Module {
 public:
  InjectorImpl(int64_t dim, int64_t heads);

  torch::Tensor delta(const torch::Tensor& vit, const torch::Tensor& sp);
  torch::Tensor residual(const torch::Tensor& vit, const torch::Tensor& sp);
  torch::Tensor forward(const torch::Tensor& vit, const torch::Tensor& sp);

  torch::nn::LayerNorm norm_query{nullptr}, norm_context{nullptr};
  CrossAttention attn{nullptr};
  torch::Tensor gamma;
};
TORCH_MODULE(Injector);

/// sp' = sp + Attention(norm(sp), norm(vit)); out = sp' + FFN(norm(sp')).
class ExtractorImpl : public torch::nn::Module {
 public:
  ExtractorImpl(int64_t dim, int64_t heads, double ffn_ratio = 0.25);
  torch::Tensor forward(const torch::Tensor& sp, const torch::Tensor& vit);

  torch::nn::LayerNorm norm_query{nullptr}, norm_context{nullptr}, norm_ffn{nullptr};
  CrossAttention attn{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};
};
TORCH_MODULE(Extractor);

struct AdapterOutput {
  FeaturePyramid pyramid;
  std::vector<torch::Tensor> taps;  // backbone tokens after each interaction, final-normed
  std::vector<int64_t> grid;
};

/// Four injector/extractor interactions, one per UNETR tap segment of the
/// frozen backbone. The backbone is held, not registered, so parameters()
/// lists adapter weights only.
class ViTAdapterImpl : public torch::nn::Module {
 public:
  ViTAdapterImpl(VisionTransformer vit, int64_t spm_channels = 64);
  AdapterOutput forward(const torch::Tensor& x);

  VisionTransformer& backbone() { return vit_; }

  SpatialPriorModule spm{nullptr};
  torch::nn::ModuleList injectors, extractors;

 private:
  VisionTransformer vit_;
  std::vector<int64_t> taps_;
};
TORCH_MODULE(ViTAdapter);

/// Pyramid levels upsampled to the finest level, concatenated, batch
/// normalised and classified per location, then resized to the input.
class PyramidSegHeadImpl : public torch::nn::Module {
 public:
  PyramidSegHeadImpl(int rank, int64_t embed_dim, int64_t classes);
  torch::Tensor forward(const FeaturePyramid& p, const std::vector<int64_t>& out_size);

  torch::nn::AnyModule bn, classifier;

 private:
  int rank_;
};
TORCH_MODULE(PyramidSegHead);

// ---------------------------------------------------------------------------
// Fine-tuning

struct ClassifierGridOptions {
  std::vector<double> lrs{1e-5, 2e-5, 5e-5, 1e-4, 2e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 2e-2, 5e-2, 0.1};
  std::vector<int> layers{1, 4};
  int64_t iterations = 12500;
  int64_t batch_size = 32;
  double val_fraction = 0.2;
  bool flip = true;
  uint64_t seed = 0;
};

struct ClassifierCell {
  double lr = 0.0;
  int layers = 1;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
};

struct ClassifierResult {
  std::vector<ClassifierCell> grid;
  ClassifierCell best;
  uint64_t backbone_hash_before = 0;
  uint64_t backbone_hash_after = 0;
};

/// Linear head on frozen embeddings trained with Adam for every (lr, layers)
/// pair; random flips of the last spatial axis serve as augmentation.
ClassifierResult finetune_adapter_classifier(VisionTransformer& vit, const torch::Tensor& train_x,
                                             std::span<const int64_t> train_y, const torch::Tensor& test_x,
                                             std::span<const int64_t> test_y, int64_t classes,
                                             const ClassifierGridOptions& opts = {});

struct SegTrainOptions {
  std::string head = "linear";  // linear | unetr | adapter
  double lr = 1e-4;
  int64_t epochs = 300;
  int64_t batch_size = 32;
  double val_fraction = 0.2;
  int64_t feature_size = 16;  // UNETR width
  int64_t spm_channels = 64;  // adapter SPM width
  uint64_t seed = 0;
};

struct SegTrainResult {
  double best_val_dice = 0.0;
  int64_t best_epoch = -1;
  std::vector<double> val_curve;
  uint64_t backbone_hash_before = 0;
  uint64_t backbone_hash_after = 0;
  /// (N, C, spatial...) images in [0, 1] -> (N, spatial...) label maps.
  std::function<torch::Tensor(const torch::Tensor&)> predict;
  std::shared_ptr<torch::nn::Module> head;
};

/// Train only the head (and adapter) with Adam on frozen features and keep
/// the parameters of the epoch with the best validation mean Dice. `masks`
/// hold labels 0..classes with 0 as background.
SegTrainResult finetune_segmentation(VisionTransformer& vit, const torch::Tensor& images, const torch::Tensor& masks,
                                     int64_t classes, const SegTrainOptions& opts = {});

// ---------------------------------------------------------------------------
// Benchmark tasks

struct TaskData {
  torch::Tensor images;  // (N, 1, spatial...) in [0, 1], resized to input_size
  std::vector<int64_t> labels;
  torch::Tensor masks;  // (N, spatial...) int64, segmentation only
};

/// A manifest record normalised to [0, 1] at native resolution, (spatial...).
torch::Tensor native_input(const ManifestRecord& rec, int input_rank);
/// native_input resized to `size` per axis, with a channel axis: (1, spatial...).
torch::Tensor model_input(const ManifestRecord& rec, int input_rank, int64_t size);

/// Load a task: labels come from the manifest's fifth column, masks from
/// `mask_dir/<image file name>`.
TaskData load_task(const TaskSpec& task, int input_rank, int64_t input_size);

/// Evaluates benchmark cells with a frozen backbone: linear probing for
/// classification, head fine-tuning for segmentation.
class BackboneEvaluator : public TaskEvaluator {
 public:
  BackboneEvaluator(VisionTransformer vit, nlohmann::json settings);

  int64_t size(const TaskSpec& task) override;
  std::map<std::string, double> evaluate(const TaskSpec& task, std::span<const int64_t> train,
                                         std::span<const int64_t> test, uint64_t seed) override;

 private:
  const TaskData& data(const TaskSpec& task);

  VisionTransformer vit_;
  nlohmann::json settings_;
  std::map<std::string, TaskData> cache_;
  std::map<std::string, Matrix> embeddings_;
};

}  // namespace radvit
