#include "radvit/adapters.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <set>

#include "radvit/checkpoint.hpp"
#include "radvit/error.hpp"
#include "radvit/log.hpp"
#include "radvit/radprep.hpp"
#include "radvit/raw_tensor.hpp"

namespace radvit {
namespace {

namespace F = torch::nn::functional;

F::InterpolateFuncOptions::mode_t linear_mode(std::size_t rank) {
  if (rank == 2) return torch::kBilinear;
  return torch::kTrilinear;
}

torch::Tensor resize(const torch::Tensor& x, const std::vector<int64_t>& size) {
  if (x.sizes().slice(2).vec() == size) return x;
  return F::interpolate(x, F::InterpolateFuncOptions().size(size).mode(linear_mode(size.size())).align_corners(false));
}

/// (B, N, K) tokens on `grid` -> (B, K, grid...).
torch::Tensor tokens_to_map(const torch::Tensor& t, const std::vector<int64_t>& grid) {
  std::vector<int64_t> shape{t.size(0), t.size(2)};
  shape.insert(shape.end(), grid.begin(), grid.end());
  return t.transpose(1, 2).reshape(shape);
}

std::vector<int64_t> spatial_of(const torch::Tensor& x) { return x.sizes().slice(2).vec(); }

/// Seeded fit/validation partition; both sides non-empty when n >= 2.
std::pair<std::vector<int64_t>, std::vector<int64_t>> holdout(int64_t n, double fraction, uint64_t seed) {
  std::vector<int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  if (n < 2) return {perm, perm};
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_val = std::clamp<int64_t>(std::llround(fraction * static_cast<double>(n)), 1, n - 1);
  std::vector<int64_t> val(perm.begin(), perm.begin() + n_val), fit(perm.begin() + n_val, perm.end());
  std::sort(fit.begin(), fit.end());
  std::sort(val.begin(), val.end());
  return {fit, val};
}

torch::Tensor index_tensor(std::span<const int64_t> idx) {
  return torch::tensor(std::vector<int64_t>(idx.begin(), idx.end()), torch::kInt64);
}

torch::nn::Sequential conv_bn_relu(int rank, int64_t in, int64_t out, torch::nn::Sequential seq = nullptr) {
  if (!seq) seq = torch::nn::Sequential();
  if (rank == 2) {
    seq->push_back(torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(2).padding(1).bias(false)));
    seq->push_back(torch::nn::BatchNorm2d(out));
  } else {
    seq->push_back(torch::nn::Conv3d(torch::nn::Conv3dOptions(in, out, 3).stride(2).padding(1).bias(false)));
    seq->push_back(torch::nn::BatchNorm3d(out));
  }
  seq->push_back(torch::nn::ReLU());
  return seq;
}

torch::nn::AnyModule pointwise(int rank, int64_t in, int64_t out) {
  if (rank == 2) {
    torch::nn::Conv2d c(torch::nn::Conv2dOptions(in, out, 1));
    torch::NoGradGuard g;
    c->bias.zero_();
    return torch::nn::AnyModule(c);
  }
  torch::nn::Conv3d c(torch::nn::Conv3dOptions(in, out, 1));
  torch::NoGradGuard g;
  c->bias.zero_();
  return torch::nn::AnyModule(c);
}

/// Snapshot and restore of every parameter and buffer of a module tree.
std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : m.buffers()) out.push_back(b.detach().clone());
  return out;
}

void restore(torch::nn::Module& m, const std::vector<torch::Tensor>& state) {
  torch::NoGradGuard g;
  std::size_t i = 0;
  for (auto& p : m.parameters()) p.copy_(state[i++]);
  for (auto& b : m.buffers()) b.copy_(state[i++]);
}

double mean_image_dice(const torch::Tensor& pred, const torch::Tensor& truth, int64_t classes) {
  double sum = 0.0;
  for (int64_t i = 0; i < pred.size(0); ++i) sum += dice_iou(pred[i], truth[i], classes).mdice;
  return pred.size(0) > 0 ? sum / static_cast<double>(pred.size(0)) : 0.0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Embeddings and probing

torch::Tensor image_embedding(VisionTransformer& vit, const torch::Tensor& x, int layers) {
  if (layers != 1 && layers != 4) throw UsageError("embedding layers must be 1 or 4, got " + std::to_string(layers));
  if (vit->config().blocks < layers) throw DataError("backbone has fewer blocks than requested layers");
  torch::NoGradGuard g;
  const auto f = vit->forward(x);
  if (layers == 1) return f.cls(-1);
  return torch::stack({f.cls(-4), f.cls(-3), f.cls(-2), f.cls(-1)}).mean(0);
}

torch::Tensor embed_all(VisionTransformer& vit, const torch::Tensor& x, int layers, int64_t batch) {
  std::vector<torch::Tensor> parts;
  for (int64_t i = 0; i < x.size(0); i += batch) {
    parts.push_back(image_embedding(vit, x.slice(0, i, std::min(x.size(0), i + batch)), layers));
  }
  if (parts.empty()) return torch::zeros({0, vit->config().embed_dim});
  return torch::cat(parts);
}

ProbeGrid ProbeGrid::standard() {
  ProbeGrid g;
  for (int i = 0; i < 45; ++i) g.Cs.push_back(std::pow(10.0, -6.0 + 11.0 * i / 44.0));
  return g;
}

ProbeResult linear_probe(const Matrix& train_x, std::span<const int64_t> train_y, const Matrix& test_x,
                         std::span<const int64_t> test_y, int64_t classes, const ProbeGrid& grid,
                         double val_fraction, uint64_t seed) {
  if (train_x.rows != static_cast<int64_t>(train_y.size()) || test_x.rows != static_cast<int64_t>(test_y.size())) {
    throw DataError("linear_probe: feature/label count mismatch");
  }
  if (std::set<int64_t>(train_y.begin(), train_y.end()).size() < 2) {
    throw DataError("linear_probe: training labels contain a single class");
  }
  if (grid.Cs.empty()) throw UsageError("linear_probe: empty C grid");
  std::vector<double> cs = grid.Cs;
  std::sort(cs.begin(), cs.end());

  const auto [fit, val] = holdout(train_x.rows, val_fraction, seed);
  const auto fit_x = train_x.select(fit), val_x = train_x.select(val);
  std::vector<int64_t> fit_y, val_y;
  for (auto i : fit) fit_y.push_back(train_y[static_cast<std::size_t>(i)]);
  for (auto i : val) val_y.push_back(train_y[static_cast<std::size_t>(i)]);

  ProbeResult r;
  r.val_accuracy = -1.0;
  for (double c : cs) {
    const auto model = fit_logistic(fit_x, fit_y, classes, c, grid.max_iter, grid.tol);
    const double acc = accuracy(model.predict(val_x), val_y);
    r.val_curve.push_back(acc);
    if (acc > r.val_accuracy) {
      r.val_accuracy = acc;
      r.best_C = c;
    }
  }
  r.model = fit_logistic(train_x, train_y, classes, r.best_C, grid.max_iter, grid.tol);
  r.train_accuracy = accuracy(r.model.predict(train_x), train_y);
  r.test_accuracy = test_x.rows > 0 ? accuracy(r.model.predict(test_x), test_y)
                                    : std::numeric_limits<double>::quiet_NaN();
  return r;
}

// ---------------------------------------------------------------------------
// Linear segmentation head

LinearSegHeadImpl::LinearSegHeadImpl(int64_t embed_dim, int64_t classes) {
  bn = register_module("bn", torch::nn::BatchNorm2d(4 * embed_dim));
  classifier = register_module("classifier", torch::nn::Conv2d(torch::nn::Conv2dOptions(4 * embed_dim, classes, 1)));
}

torch::Tensor LinearSegHeadImpl::forward(const std::vector<torch::Tensor>& layers, const std::vector<int64_t>& grid,
                                         const std::vector<int64_t>& out_size) {
  if (layers.size() != 4) throw DataError("linear seg head expects 4 layers, got " + std::to_string(layers.size()));
  if (grid.size() != 2 || out_size.size() != 2) throw DataError("linear seg head is 2D only");
  std::vector<torch::Tensor> maps;
  for (const auto& t : layers) maps.push_back(resize(tokens_to_map(t, grid), out_size));
  return classifier(bn(torch::cat(maps, 1)));
}

std::vector<int64_t> unetr_layer_taps(int64_t blocks) {
  if (blocks < 4 || blocks % 4 != 0) {
    throw UsageError("UNETR taps need a block count divisible by 4, got " + std::to_string(blocks));
  }
  const int64_t q = blocks / 4;
  return {q, 2 * q, 3 * q, 4 * q};
}

// ---------------------------------------------------------------------------
// UNETR

UnetResBlockImpl::UnetResBlockImpl(int64_t in, int64_t out) {
  auto conv = [](int64_t i, int64_t o, int64_t k) {
    return torch::nn::Conv3d(torch::nn::Conv3dOptions(i, o, k).padding(k / 2).bias(false));
  };
  auto norm = [](int64_t c) { return torch::nn::InstanceNorm3d(torch::nn::InstanceNorm3dOptions(c).affine(true)); };
  conv1 = register_module("conv1", conv(in, out, 3));
  norm1 = register_module("norm1", norm(out));
  conv2 = register_module("conv2", conv(out, out, 3));
  norm2 = register_module("norm2", norm(out));
  if (in != out) {
    conv3 = register_module("conv3", conv(in, out, 1));
    norm3 = register_module("norm3", norm(out));
  }
}

torch::Tensor UnetResBlockImpl::forward(const torch::Tensor& x) {
  auto y = F::leaky_relu(norm1(conv1(x)), F::LeakyReLUFuncOptions().negative_slope(0.01));
  y = norm2(conv2(y));
  auto r = conv3 ? norm3(conv3(x)) : x;
  return F::leaky_relu(y + r, F::LeakyReLUFuncOptions().negative_slope(0.01));
}

namespace {
torch::nn::ConvTranspose3d up2(int64_t in, int64_t out) {
  return torch::nn::ConvTranspose3d(torch::nn::ConvTranspose3dOptions(in, out, 2).stride(2).bias(false));
}
}  // namespace

UnetrPrUpBlockImpl::UnetrPrUpBlockImpl(int64_t in, int64_t out, int64_t layers) {
  init = register_module("init", up2(in, out));
  stages = register_module("stages", torch::nn::ModuleList());
  for (int64_t i = 0; i < layers; ++i) stages->push_back(torch::nn::Sequential(up2(out, out), UnetResBlock(out, out)));
}

torch::Tensor UnetrPrUpBlockImpl::forward(const torch::Tensor& x) {
  auto y = init(x);
  for (const auto& s : *stages) y = s->as<torch::nn::SequentialImpl>()->forward(y);
  return y;
}

UnetrUpBlockImpl::UnetrUpBlockImpl(int64_t in, int64_t out) {
  up = register_module("up", up2(in, out));
  block = register_module("block", UnetResBlock(2 * out, out));
}

torch::Tensor UnetrUpBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& skip) {
  return block(torch::cat({up(x), skip}, 1));
}

UNETRHeadImpl::UNETRHeadImpl(int64_t in_channels, int64_t embed_dim, int64_t classes, int64_t f, int64_t patch_size)
    : patch_size_(patch_size) {
  if (patch_size != 16) throw UsageError("UNETR head requires 16-voxel patches, got " + std::to_string(patch_size));
  encoder1 = register_module("encoder1", UnetResBlock(in_channels, f));
  encoder2 = register_module("encoder2", UnetrPrUpBlock(embed_dim, 2 * f, 2));
  encoder3 = register_module("encoder3", UnetrPrUpBlock(embed_dim, 4 * f, 1));
  encoder4 = register_module("encoder4", UnetrPrUpBlock(embed_dim, 8 * f, 0));
  decoder5 = register_module("decoder5", UnetrUpBlock(embed_dim, 8 * f));
  decoder4 = register_module("decoder4", UnetrUpBlock(8 * f, 4 * f));
  decoder3 = register_module("decoder3", UnetrUpBlock(4 * f, 2 * f));
  decoder2 = register_module("decoder2", UnetrUpBlock(2 * f, f));
  out = register_module("out", torch::nn::Conv3d(torch::nn::Conv3dOptions(f, classes, 1)));
}

torch::Tensor UNETRHeadImpl::forward(const torch::Tensor& x, const std::vector<torch::Tensor>& taps,
                                     const std::vector<int64_t>& grid) {
  if (taps.size() != 4) throw DataError("UNETR head expects 4 tapped layers");
  if (x.dim() != 5 || grid.size() != 3) throw DataError("UNETR head expects (B, C, D, H, W) input");
  for (std::size_t i = 0; i < 3; ++i) {
    if (grid[i] * patch_size_ != x.size(static_cast<int64_t>(i) + 2)) {
      throw DataError("UNETR head: volume dims are not token grid x patch size");
    }
  }
  const auto enc1 = encoder1(x);
  const auto enc2 = encoder2(tokens_to_map(taps[0], grid));
  const auto enc3 = encoder3(tokens_to_map(taps[1], grid));
  const auto enc4 = encoder4(tokens_to_map(taps[2], grid));
  auto d = decoder5(tokens_to_map(taps[3], grid), enc4);
  d = decoder4(d, enc3);
  d = decoder3(d, enc2);
  d = decoder2(d, enc1);
  return out(d);
}

// ---------------------------------------------------------------------------
// Spatial prior module and interactions

torch::Tensor FeaturePyramid::level(std::size_t i) const {
  int64_t off = 0;
  for (std::size_t j = 0; j < i; ++j) off += counts[j];
  return tokens_to_map(tokens.slice(1, off, off + counts[i]), grids[i]);
}

FeaturePyramid FeaturePyramid::from_tokens(const torch::Tensor& tokens, std::vector<std::vector<int64_t>> grids) {
  FeaturePyramid p;
  p.tokens = tokens;
  for (const auto& g : grids) {
    p.counts.push_back(std::accumulate(g.begin(), g.end(), int64_t{1}, std::multiplies<>()));
  }
  p.grids = std::move(grids);
  return p;
}

int64_t spm_token_count(const std::vector<int64_t>& dims) {
  int64_t total = 0;
  for (int64_t s : {8, 16, 32}) {
    int64_t n = 1;
    for (auto d : dims) {
      if (d % 32 != 0) throw DataError("SPM input dims must be multiples of 32, got " + std::to_string(d));
      n *= d / s;
    }
    total += n;
  }
  return total;
}

SpatialPriorModuleImpl::SpatialPriorModuleImpl(int rank, int64_t in_channels, int64_t embed_dim, int64_t c)
    : rank_(rank) {
  if (rank != 2 && rank != 3) throw UsageError("SPM rank must be 2 or 3");
  stem = register_module("stem", conv_bn_relu(rank, c, c, conv_bn_relu(rank, in_channels, c)));
  down1 = register_module("down1", conv_bn_relu(rank, c, 2 * c));
  down2 = register_module("down2", conv_bn_relu(rank, 2 * c, 4 * c));
  down3 = register_module("down3", conv_bn_relu(rank, 4 * c, 4 * c));
  proj1 = pointwise(rank, 2 * c, embed_dim);
  proj2 = pointwise(rank, 4 * c, embed_dim);
  proj3 = pointwise(rank, 4 * c, embed_dim);
  register_module("proj1", proj1.ptr());
  register_module("proj2", proj2.ptr());
  register_module("proj3", proj3.ptr());
}

FeaturePyramid SpatialPriorModuleImpl::forward(const torch::Tensor& x) {
  if (x.dim() != rank_ + 2) throw DataError("SPM: input rank mismatch");
  for (int64_t d = 2; d < x.dim(); ++d) {
    if (x.size(d) % 32 != 0) {
      throw DataError("SPM: spatial axis " + std::to_string(d - 2) + " of size " + std::to_string(x.size(d)) +
                      " is not a multiple of 32");
    }
  }
  const auto c1 = down1->forward(stem->forward(x));
  const auto c2 = down2->forward(c1);
  const auto c3 = down3->forward(c2);
  std::vector<torch::Tensor> levels{proj1.forward(c1), proj2.forward(c2), proj3.forward(c3)};
  std::vector<std::vector<int64_t>> grids;
  std::vector<torch::Tensor> flat;
  for (const auto& l : levels) {
    grids.push_back(spatial_of(l));
    flat.push_back(l.flatten(2).transpose(1, 2));
  }
  return FeaturePyramid::from_tokens(torch::cat(flat, 1), std::move(grids));
}

CrossAttentionImpl::CrossAttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
  if (dim % heads != 0) throw UsageError("cross attention: dim not divisible by heads");
  q = register_module("q", torch::nn::Linear(dim, dim));
  k = register_module("k", torch::nn::Linear(dim, dim));
  v = register_module("v", torch::nn::Linear(dim, dim));
  o = register_module("o", torch::nn::Linear(dim, dim));
}

torch::Tensor CrossAttentionImpl::forward(const torch::Tensor& query, const torch::Tensor& context) {
  if (query.dim() != 3 || context.dim() != 3 || query.size(2) != context.size(2) || query.size(0) != context.size(0)) {
    throw DataError("cross attention: query/context dims disagree");
  }
  const auto b = query.size(0), nq = query.size(1), nc = context.size(1), dim = query.size(2);
  const auto hd = dim / heads_;
  auto split = [&](const torch::Tensor& t, int64_t n) { return t.reshape({b, n, heads_, hd}).transpose(1, 2); };
  const auto qh = split(q(query), nq), kh = split(k(context), nc), vh = split(v(context), nc);
  const auto attn = torch::softmax(torch::matmul(qh, kh.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
  return o(torch::matmul(attn, vh).transpose(1, 2).reshape({b, nq, dim}));
}

InjectorImpl::InjectorImpl(int64_t dim, int64_t heads) {
  norm_query = register_module("norm_query", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  norm_context = register_module("norm_context", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  attn = register_module("attn", CrossAttention(dim, heads));
  gamma = register_parameter("gamma", torch::zeros({1}));
}

torch::Tensor InjectorImpl::delta(const torch::Tensor& vit, const torch::Tensor& sp) {
  return attn(norm_query(vit), norm_context(sp));
}

torch::Tensor InjectorImpl::residual(const torch::Tensor& vit, const torch::Tensor& sp) {
  return gamma * delta(vit, sp);
}

torch::Tensor InjectorImpl::forward(const torch::Tensor& vit, const torch::Tensor& sp) {
  return vit + residual(vit, sp);
}

ExtractorImpl::ExtractorImpl(int64_t dim, int64_t heads, double ffn_ratio) {
  const auto hidden = std::max<int64_t>(1, std::llround(static_cast<double>(dim) * ffn_ratio));
  norm_query = register_module("norm_query", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  norm_context = register_module("norm_context", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  norm_ffn = register_module("norm_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  attn = register_module("attn", CrossAttention(dim, heads));
  fc1 = register_module("fc1", torch::nn::Linear(dim, hidden));
  fc2 = register_module("fc2", torch::nn::Linear(hidden, dim));
}

torch::Tensor ExtractorImpl::forward(const torch::Tensor& sp, const torch::Tensor& vit) {
  const auto hat = sp + attn(norm_query(sp), norm_context(vit));
  return hat + fc2(torch::gelu(fc1(norm_ffn(hat))));
}

ViTAdapterImpl::ViTAdapterImpl(VisionTransformer vit, int64_t spm_channels) : vit_(std::move(vit)) {
  const auto& c = vit_->config();
  taps_ = unetr_layer_taps(c.blocks);
  freeze(*vit_);
  spm = register_module("spm", SpatialPriorModule(c.input_rank, c.in_channels, c.embed_dim, spm_channels));
  injectors = register_module("injectors", torch::nn::ModuleList());
  extractors = register_module("extractors", torch::nn::ModuleList());
  for (int i = 0; i < 4; ++i) {
    injectors->push_back(Injector(c.embed_dim, c.heads));
    extractors->push_back(Extractor(c.embed_dim, c.heads));
  }
}

AdapterOutput ViTAdapterImpl::forward(const torch::Tensor& x) {
  AdapterOutput out;
  auto tokens = vit_->embed(x, std::nullopt, out.grid);
  auto pyramid = spm->forward(x);
  auto c = pyramid.tokens;
  int64_t start = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    auto patches = injectors[i]->as<InjectorImpl>()->forward(tokens.slice(1, 1), c);
    tokens = torch::cat({tokens.slice(1, 0, 1), patches}, 1);
    for (int64_t b = start; b < taps_[i]; ++b) tokens = vit_->run_block(b, tokens);
    out.taps.push_back(vit_->final_norm(tokens).slice(1, 1));
    c = extractors[i]->as<ExtractorImpl>()->forward(c, tokens.slice(1, 1));
    start = taps_[i];
  }
  out.pyramid = FeaturePyramid::from_tokens(c, pyramid.grids);
  return out;
}

PyramidSegHeadImpl::PyramidSegHeadImpl(int rank, int64_t embed_dim, int64_t classes) : rank_(rank) {
  if (rank == 2) {
    bn = torch::nn::AnyModule(torch::nn::BatchNorm2d(3 * embed_dim));
    classifier = torch::nn::AnyModule(torch::nn::Conv2d(torch::nn::Conv2dOptions(3 * embed_dim, classes, 1)));
  } else {
    bn = torch::nn::AnyModule(torch::nn::BatchNorm3d(3 * embed_dim));
    classifier = torch::nn::AnyModule(torch::nn::Conv3d(torch::nn::Conv3dOptions(3 * embed_dim, classes, 1)));
  }
  register_module("bn", bn.ptr());
  register_module("classifier", classifier.ptr());
}

torch::Tensor PyramidSegHeadImpl::forward(const FeaturePyramid& p, const std::vector<int64_t>& out_size) {
  std::vector<torch::Tensor> maps;
  for (std::size_t i = 0; i < p.grids.size(); ++i) maps.push_back(resize(p.level(i), p.grids[0]));
  auto logits = classifier.forward(bn.forward(torch::cat(maps, 1)));
  return resize(logits, out_size);
}

// ---------------------------------------------------------------------------
// Fine-tuning

ClassifierResult finetune_adapter_classifier(VisionTransformer& vit, const torch::Tensor& train_x,
                                             std::span<const int64_t> train_y, const torch::Tensor& test_x,
                                             std::span<const int64_t> test_y, int64_t classes,
                                             const ClassifierGridOptions& opts) {
  if (train_x.size(0) != static_cast<int64_t>(train_y.size()) || test_x.size(0) != static_cast<int64_t>(test_y.size())) {
    throw DataError("classifier: image/label count mismatch");
  }
  if (train_x.size(0) < 2) throw DataError("classifier: need at least 2 training images");
  ClassifierResult result;
  result.backbone_hash_before = parameter_hash(*vit);
  vit->eval();
  const int64_t last_axis = train_x.dim() - 1;

  std::map<int, torch::Tensor> emb, emb_flip, emb_test;
  for (int l : opts.layers) {
    emb[l] = embed_all(vit, train_x, l);
    emb_flip[l] = opts.flip ? embed_all(vit, train_x.flip({last_axis}), l) : emb[l];
    emb_test[l] = test_x.size(0) > 0 ? embed_all(vit, test_x, l) : torch::Tensor();
  }
  const auto [fit, val] = holdout(train_x.size(0), opts.val_fraction, opts.seed);
  const auto labels = index_tensor(train_y);
  const auto test_labels = index_tensor(test_y);
  const auto val_idx = index_tensor(val);

  result.best.val_accuracy = -1.0;
  for (double lr : opts.lrs) {
    for (int l : opts.layers) {
      torch::manual_seed(opts.seed);
      torch::nn::Linear head(vit->config().embed_dim, classes);
      torch::optim::Adam adam(head->parameters(), torch::optim::AdamOptions(lr));
      std::mt19937_64 rng(opts.seed);
      std::uniform_int_distribution<std::size_t> pick(0, fit.size() - 1);
      std::bernoulli_distribution coin(0.5);
      for (int64_t it = 0; it < opts.iterations; ++it) {
        std::vector<int64_t> plain, flipped;
        for (int64_t b = 0; b < opts.batch_size; ++b) {
          const auto i = fit[pick(rng)];
          (opts.flip && coin(rng) ? flipped : plain).push_back(i);
        }
        std::vector<torch::Tensor> xs, ys;
        if (!plain.empty()) {
          xs.push_back(emb[l].index_select(0, index_tensor(plain)));
          ys.push_back(labels.index_select(0, index_tensor(plain)));
        }
        if (!flipped.empty()) {
          xs.push_back(emb_flip[l].index_select(0, index_tensor(flipped)));
          ys.push_back(labels.index_select(0, index_tensor(flipped)));
        }
        adam.zero_grad();
        const auto loss = F::cross_entropy(head(torch::cat(xs)), torch::cat(ys));
        loss.backward();
        adam.step();
      }
      torch::NoGradGuard g;
      ClassifierCell cell{lr, l, 0.0, std::numeric_limits<double>::quiet_NaN()};
      const auto val_pred = head(emb[l].index_select(0, val_idx)).argmax(1);
      cell.val_accuracy = val_pred.eq(labels.index_select(0, val_idx)).to(torch::kFloat64).mean().item<double>();
      if (test_x.size(0) > 0) {
        cell.test_accuracy = head(emb_test[l]).argmax(1).eq(test_labels).to(torch::kFloat64).mean().item<double>();
      }
      result.grid.push_back(cell);
      if (cell.val_accuracy > result.best.val_accuracy) result.best = cell;
    }
  }
  result.backbone_hash_after = parameter_hash(*vit);
  return result;
}

namespace {

/// Frozen features for the cached heads, computed once per image.
struct SegFeatures {
  std::vector<torch::Tensor> layers;  // each (N, T, K)
  std::vector<int64_t> grid;
};

SegFeatures cache_features(VisionTransformer& vit, const torch::Tensor& images, const std::vector<int64_t>& picks) {
  torch::NoGradGuard g;
  SegFeatures out;
  std::vector<std::vector<torch::Tensor>> parts(picks.size());
  for (int64_t i = 0; i < images.size(0); i += 16) {
    const auto f = vit->forward(images.slice(0, i, std::min(images.size(0), i + 16)));
    out.grid = f.grid;
    for (std::size_t j = 0; j < picks.size(); ++j) parts[j].push_back(f.patches(picks[j]));
  }
  for (auto& p : parts) out.layers.push_back(torch::cat(p));
  return out;
}

std::vector<torch::Tensor> select_rows(const std::vector<torch::Tensor>& ts, const torch::Tensor& idx) {
  std::vector<torch::Tensor> out;
  for (const auto& t : ts) out.push_back(t.index_select(0, idx));
  return out;
}

}  // namespace

SegTrainResult finetune_segmentation(VisionTransformer& vit, const torch::Tensor& images, const torch::Tensor& masks,
                                     int64_t classes, const SegTrainOptions& opts) {
  const int rank = vit->config().input_rank;
  if (images.dim() != rank + 2 || masks.dim() != rank + 1 || images.size(0) != masks.size(0) ||
      spatial_of(images) != masks.sizes().slice(1).vec()) {
    throw DataError("segmentation: images (N, C, spatial) and masks (N, spatial) do not align");
  }
  if (images.size(0) < 1) throw DataError("segmentation: no training images");
  if (classes < 1) throw UsageError("segmentation: classes must be >= 1");
  SegTrainResult result;
  result.backbone_hash_before = parameter_hash(*vit);
  freeze(*vit);
  const auto out_size = spatial_of(images);
  const int64_t n_out = classes + 1;
  const auto target = masks.to(torch::kInt64);

  torch::manual_seed(opts.seed);
  auto holder = std::make_shared<torch::nn::Module>();
  std::function<torch::Tensor(const torch::Tensor& idx)> run;
  std::function<torch::Tensor(const torch::Tensor& x)> infer;

  const int64_t blocks = vit->config().blocks;
  if (opts.head == "linear") {
    if (rank != 2) throw UsageError("the linear segmentation head is 2D only");
    if (blocks < 4) throw UsageError("the linear segmentation head needs at least 4 blocks");
    auto head = holder->register_module("head", LinearSegHead(vit->config().embed_dim, n_out));
    const std::vector<int64_t> picks{blocks - 4, blocks - 3, blocks - 2, blocks - 1};
    auto feats = std::make_shared<SegFeatures>(cache_features(vit, images, picks));
    run = [head, feats, out_size](const torch::Tensor& idx) mutable {
      return head->forward(select_rows(feats->layers, idx), feats->grid, out_size);
    };
    infer = [head, vit, picks](const torch::Tensor& x) mutable {
      const auto f = cache_features(vit, x, picks);
      return head->forward(f.layers, f.grid, spatial_of(x));
    };
  } else if (opts.head == "unetr") {
    if (rank != 3) throw UsageError("the UNETR head is 3D only");
    auto head = holder->register_module(
        "head", UNETRHead(vit->config().in_channels, vit->config().embed_dim, n_out, opts.feature_size,
                          vit->config().patch_size));
    std::vector<int64_t> picks;
    for (auto t : unetr_layer_taps(blocks)) picks.push_back(t - 1);
    auto feats = std::make_shared<SegFeatures>(cache_features(vit, images, picks));
    const auto imgs = images;
    run = [head, feats, imgs](const torch::Tensor& idx) mutable {
      return head->forward(imgs.index_select(0, idx), select_rows(feats->layers, idx), feats->grid);
    };
    infer = [head, vit, picks](const torch::Tensor& x) mutable {
      const auto f = cache_features(vit, x, picks);
      return head->forward(x, f.layers, f.grid);
    };
  } else if (opts.head == "adapter") {
    auto adapter = holder->register_module("adapter", ViTAdapter(vit, opts.spm_channels));
    auto head = holder->register_module("head", PyramidSegHead(rank, vit->config().embed_dim, n_out));
    const auto imgs = images;
    run = [adapter, head, imgs, out_size](const torch::Tensor& idx) mutable {
      return head->forward(adapter->forward(imgs.index_select(0, idx)).pyramid, out_size);
    };
    infer = [adapter, head](const torch::Tensor& x) mutable {
      return head->forward(adapter->forward(x).pyramid, spatial_of(x));
    };
  } else {
    throw UsageError("unknown segmentation head '" + opts.head + "'");
  }

  const auto [fit, val] = holdout(images.size(0), opts.val_fraction, opts.seed);
  std::vector<torch::Tensor> params;
  for (auto& p : holder->parameters()) {
    if (p.requires_grad()) params.push_back(p);
  }
  torch::optim::Adam adam(params, torch::optim::AdamOptions(opts.lr));
  std::mt19937_64 rng(opts.seed);
  const auto val_idx = index_tensor(val);
  auto best = snapshot(*holder);
  result.best_val_dice = -1.0;

  for (int64_t epoch = 0; epoch < opts.epochs; ++epoch) {
    holder->train();
    auto order = fit;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i = 0, end = 0; i < order.size(); i = end) {
      end = std::min(order.size(), i + static_cast<std::size_t>(opts.batch_size));
      // A lone trailing sample joins this batch: batch norm over a 1x1 map
      // cannot train on a single sample.
      if (order.size() - end == 1) end = order.size();
      const auto idx = index_tensor(std::span<const int64_t>(order.data() + i, end - i));
      adam.zero_grad();
      const auto loss = F::cross_entropy(run(idx), target.index_select(0, idx));
      if (!std::isfinite(loss.item<double>())) {
        throw NumericError("segmentation: non-finite loss at epoch " + std::to_string(epoch));
      }
      loss.backward();
      adam.step();
    }
    holder->eval();
    double dice = 0.0;
    {
      torch::NoGradGuard g;
      const auto pred = run(val_idx).argmax(1);
      dice = mean_image_dice(pred, target.index_select(0, val_idx), classes);
    }
    result.val_curve.push_back(dice);
    if (dice > result.best_val_dice) {
      result.best_val_dice = dice;
      result.best_epoch = epoch;
      best = snapshot(*holder);
    }
  }
  restore(*holder, best);
  holder->eval();
  result.head = holder;
  result.predict = [infer, holder](const torch::Tensor& x) mutable {
    torch::NoGradGuard g;
    holder->eval();
    return infer(x).argmax(1);
  };
  result.backbone_hash_after = parameter_hash(*vit);
  return result;
}

// ---------------------------------------------------------------------------
// Benchmark tasks

torch::Tensor native_input(const ManifestRecord& rec, int input_rank) {
  const auto where = rec.path.string() + " (line " + std::to_string(rec.line) + ")";
  if (input_rank == 2) {
    if (rec.kind != RecordKind::image2d) throw DataError(where + ": expected an image2d record");
    return normalize_image(load_image(rec)).pixels / 255.0;
  }
  if (input_rank == 3) {
    if (rec.kind != RecordKind::volume3d) throw DataError(where + ": expected a volume3d record");
    return normalize_volume(load_volume(rec)).voxels;
  }
  throw UsageError("input rank must be 2 or 3");
}

torch::Tensor model_input(const ManifestRecord& rec, int input_rank, int64_t size) {
  const std::vector<int64_t> dims(static_cast<std::size_t>(input_rank), size);
  return resize(native_input(rec, input_rank).unsqueeze(0).unsqueeze(0), dims).squeeze(0);
}

TaskData load_task(const TaskSpec& task, int input_rank, int64_t input_size) {
  const auto records = ingest_manifest(task.manifest);
  if (records.empty()) throw DataError(task.manifest.string() + ": no records");
  const bool seg = task.type == "segmentation";
  if (seg && task.mask_dir.empty()) throw DataError("task '" + task.name + "': mask_dir is required");
  const std::vector<int64_t> size(static_cast<std::size_t>(input_rank), input_size);
  std::vector<torch::Tensor> images, masks;
  TaskData data;
  for (const auto& rec : records) {
    const auto x = native_input(rec, input_rank);
    const auto native = x.sizes().vec();
    images.push_back(resize(x.unsqueeze(0).unsqueeze(0), size).squeeze(0));
    if (seg) {
      const auto path = task.mask_dir / rec.path.filename();
      auto m = load_raw(path).to(torch::kFloat32);
      if (m.sizes().vec() != native) throw DataError(path.string() + ": mask dims differ from the image");
      m = F::interpolate(m.unsqueeze(0).unsqueeze(0), F::InterpolateFuncOptions().size(size).mode(torch::kNearest));
      masks.push_back(m.squeeze(0).squeeze(0).round().to(torch::kInt64));
    } else {
      if (!rec.split_tag) throw DataError(task.manifest.string() + " line " + std::to_string(rec.line) + ": missing label column");
      int64_t label = 0;
      try {
        std::size_t used = 0;
        label = std::stoll(*rec.split_tag, &used);
        if (used != rec.split_tag->size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw DataError(task.manifest.string() + " line " + std::to_string(rec.line) + ": label '" + *rec.split_tag +
                        "' is not an integer");
      }
      if (label < 0 || label >= task.classes) {
        throw DataError(task.manifest.string() + " line " + std::to_string(rec.line) + ": label out of range");
      }
      data.labels.push_back(label);
    }
  }
  data.images = torch::stack(images);
  if (seg) data.masks = torch::stack(masks);
  return data;
}

BackboneEvaluator::BackboneEvaluator(VisionTransformer vit, nlohmann::json settings)
    : vit_(std::move(vit)), settings_(std::move(settings)) {
  freeze(*vit_);
}

const TaskData& BackboneEvaluator::data(const TaskSpec& task) {
  auto it = cache_.find(task.name);
  if (it != cache_.end()) return it->second;
  const auto& c = vit_->config();
  const int64_t size = settings_.value("input_size", c.base_grid * c.patch_size);
  return cache_.emplace(task.name, load_task(task, c.input_rank, size)).first->second;
}

int64_t BackboneEvaluator::size(const TaskSpec& task) { return data(task).images.size(0); }

std::map<std::string, double> BackboneEvaluator::evaluate(const TaskSpec& task, std::span<const int64_t> train,
                                                          std::span<const int64_t> test, uint64_t seed) {
  const auto& d = data(task);
  std::map<std::string, double> out;
  if (task.type == "classification") {
    auto it = embeddings_.find(task.name);
    if (it == embeddings_.end()) {
      const int layers = task.options.value("layers", settings_.value("layers", 1));
      it = embeddings_.emplace(task.name, Matrix::from_tensor(embed_all(vit_, d.images, layers))).first;
    }
    std::vector<int64_t> ytr, yte;
    for (auto i : train) ytr.push_back(d.labels[static_cast<std::size_t>(i)]);
    for (auto i : test) yte.push_back(d.labels[static_cast<std::size_t>(i)]);
    auto grid = ProbeGrid::standard();
    grid.max_iter = settings_.value("probe_max_iter", grid.max_iter);
    const auto r = linear_probe(it->second.select(train), ytr, it->second.select(test), yte, task.classes, grid, 0.2, seed);
    out["ACC"] = r.test_accuracy;
  } else {
    SegTrainOptions o;
    const auto& s = task.options.empty() ? settings_ : task.options;
    o.head = s.value("head", vit_->config().input_rank == 2 ? std::string("linear") : std::string("unetr"));
    o.lr = s.value("lr", o.lr);
    o.epochs = s.value("epochs", o.epochs);
    o.batch_size = s.value("batch_size", o.batch_size);
    o.feature_size = s.value("feature_size", o.feature_size);
    o.seed = seed;
    const auto tr = index_tensor(train), te = index_tensor(test);
    auto r = finetune_segmentation(vit_, d.images.index_select(0, tr), d.masks.index_select(0, tr), task.classes, o);
    const auto pred = r.predict(d.images.index_select(0, te));
    const auto truth = d.masks.index_select(0, te);
    double dice = 0.0, iou = 0.0, mdice = 0.0, miou = 0.0;
    for (int64_t i = 0; i < pred.size(0); ++i) {
      const auto m = dice_iou(pred[i], truth[i], task.classes);
      dice += m.dice[0];
      iou += m.iou[0];
      mdice += m.mdice;
      miou += m.miou;
    }
    const double n = static_cast<double>(std::max<int64_t>(1, pred.size(0)));
    out = {{"Dice", dice / n}, {"IoU", iou / n}, {"mDice", mdice / n}, {"mIoU", miou / n}};
  }
  if (!task.metrics.empty()) {
    std::map<std::string, double> kept;
    for (const auto& m : task.metrics) {
      if (auto it = out.find(m); it != out.end()) kept.insert(*it);
    }
    return kept;
  }
  return out;
}

}  // namespace radvit
