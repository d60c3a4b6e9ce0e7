#include "radvit/backbone.hpp"

#include <cmath>

#include "radvit/error.hpp"

namespace radvit {
namespace {

namespace F = torch::nn::functional;

void init_linear(torch::nn::Linear& lin) {
  torch::NoGradGuard g;
  lin->weight.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
  if (lin->bias.defined()) lin->bias.zero_();
}

const char* axis_name(int rank, int64_t axis) {
  static const char* k2[] = {"height", "width"};
  static const char* k3[] = {"depth", "height", "width"};
  return rank == 2 ? k2[axis] : k3[axis];
}

}  // namespace

int64_t swiglu_hidden(int64_t embed_dim, int64_t heads) {
  const double target = 4.0 * static_cast<double>(embed_dim) * 2.0 / 3.0;
  const auto units = static_cast<int64_t>(std::llround(target / static_cast<double>(heads)));
  return std::max<int64_t>(1, units) * heads;
}

int64_t BackboneConfig::ffn_hidden_dim() const { return ffn_hidden > 0 ? ffn_hidden : swiglu_hidden(embed_dim, heads); }

int64_t BackboneConfig::base_tokens() const {
  int64_t n = 1;
  for (int i = 0; i < input_rank; ++i) n *= base_grid;
  return n;
}

void BackboneConfig::validate() const {
  if (input_rank != 2 && input_rank != 3) throw UsageError("backbone: input_rank must be 2 or 3");
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    throw UsageError("backbone: embed_dim " + std::to_string(embed_dim) + " not divisible by heads " +
                     std::to_string(heads));
  }
  if (blocks <= 0) throw UsageError("backbone: blocks must be positive");
  if (patch_size <= 0) throw UsageError("backbone: patch_size must be positive");
  if (base_grid <= 0) throw UsageError("backbone: base_grid must be positive");
  if (in_channels <= 0) throw UsageError("backbone: in_channels must be positive");
  if (drop_path_rate < 0.0 || drop_path_rate >= 1.0) throw UsageError("backbone: drop_path_rate must be in [0, 1)");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"variant", variant},       {"embed_dim", embed_dim},     {"heads", heads},
          {"blocks", blocks},         {"patch_size", patch_size},   {"input_rank", input_rank},
          {"in_channels", in_channels}, {"drop_path_rate", drop_path_rate}, {"ffn_hidden", ffn_hidden},
          {"base_grid", base_grid}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.variant = j.at("variant").get<std::string>();
  c.embed_dim = j.at("embed_dim").get<int64_t>();
  c.heads = j.at("heads").get<int64_t>();
  c.blocks = j.at("blocks").get<int64_t>();
  c.patch_size = j.at("patch_size").get<int64_t>();
  c.input_rank = j.at("input_rank").get<int>();
  c.in_channels = j.value("in_channels", int64_t{1});
  c.drop_path_rate = j.value("drop_path_rate", 0.0);
  c.ffn_hidden = j.value("ffn_hidden", int64_t{0});
  c.base_grid = j.at("base_grid").get<int64_t>();
  c.validate();
  return c;
}

BackboneConfig make_variant(const std::string& name, int input_rank) {
  BackboneConfig c;
  if (name == "B") {
    c.embed_dim = 768, c.heads = 12, c.blocks = 12;
  } else if (name == "L") {
    c.embed_dim = 1024, c.heads = 16, c.blocks = 24;
  } else if (name == "G") {
    c.embed_dim = 1536, c.heads = 24, c.blocks = 40;
  } else {
    throw UsageError("unknown backbone variant '" + name + "' (expected B, L or G)");
  }
  c.variant = name;
  c.input_rank = input_rank;
  if (input_rank == 2) {
    c.patch_size = 14, c.base_grid = 224 / 14;
  } else if (input_rank == 3) {
    c.patch_size = 16, c.base_grid = 96 / 16;
  } else {
    throw UsageError("input_rank must be 2 or 3");
  }
  return c;
}

int64_t parameter_count(const BackboneConfig& cfg) {
  const int64_t k = cfg.embed_dim;
  const int64_t h = cfg.ffn_hidden_dim();
  int64_t patch_volume = 1;
  for (int i = 0; i < cfg.input_rank; ++i) patch_volume *= cfg.patch_size;
  const int64_t embed = k * cfg.in_channels * patch_volume + k;
  const int64_t tokens = k /*cls*/ + k /*mask*/ + (1 + cfg.base_tokens()) * k;
  const int64_t block = 2 * (2 * k)            // two LayerNorms
                        + k * 3 * k + 3 * k    // qkv
                        + k * k + k            // proj
                        + k * 2 * h + 2 * h    // w12
                        + h * k + k;           // w3
  return embed + tokens + cfg.blocks * block + 2 * k;
}

std::vector<int64_t> token_grid(at::IntArrayRef spatial, const BackboneConfig& cfg) {
  if (static_cast<int>(spatial.size()) != cfg.input_rank) {
    throw DataError("expected " + std::to_string(cfg.input_rank) + " spatial dims, got " +
                    std::to_string(spatial.size()));
  }
  std::vector<int64_t> grid;
  for (std::size_t i = 0; i < spatial.size(); ++i) {
    if (spatial[i] <= 0 || spatial[i] % cfg.patch_size != 0) {
      throw DataError(std::string("input ") + axis_name(cfg.input_rank, static_cast<int64_t>(i)) + " " +
                      std::to_string(spatial[i]) + " is not a multiple of patch size " +
                      std::to_string(cfg.patch_size));
    }
    grid.push_back(spatial[i] / cfg.patch_size);
  }
  return grid;
}

torch::Tensor resize_to_patch_multiple(const torch::Tensor& x, int64_t patch) {
  std::vector<int64_t> target;
  bool same = true;
  for (int64_t d = 2; d < x.dim(); ++d) {
    const auto n = std::max<int64_t>(1, std::llround(static_cast<double>(x.size(d)) / patch)) * patch;
    same = same && n == x.size(d);
    target.push_back(n);
  }
  if (same) return x;
  const auto mode = target.size() == 2 ? F::InterpolateFuncOptions::mode_t(torch::kBilinear)
                                       : F::InterpolateFuncOptions::mode_t(torch::kTrilinear);
  return F::interpolate(x, F::InterpolateFuncOptions().size(target).mode(mode).align_corners(false));
}

torch::Tensor interpolate_pos_embed(const torch::Tensor& table, const std::vector<int64_t>& base_grid,
                                    const std::vector<int64_t>& target_grid) {
  if (base_grid.size() != target_grid.size()) throw DataError("interpolate_pos_embed: rank mismatch");
  if (base_grid.size() != 2 && base_grid.size() != 3) throw DataError("interpolate_pos_embed: rank must be 2 or 3");
  if (base_grid == target_grid) return table;
  const int64_t k = table.size(-1);
  std::vector<int64_t> shape{1};
  shape.insert(shape.end(), base_grid.begin(), base_grid.end());
  shape.push_back(k);
  auto grid = table.reshape(shape);
  // (1, g..., K) -> (1, K, g...)
  std::vector<int64_t> to_channels{0, static_cast<int64_t>(shape.size()) - 1};
  for (std::size_t i = 1; i + 1 < shape.size(); ++i) to_channels.push_back(static_cast<int64_t>(i));
  grid = grid.permute(to_channels);
  const auto mode = base_grid.size() == 2 ? F::InterpolateFuncOptions::mode_t(torch::kBilinear)
                                       : F::InterpolateFuncOptions::mode_t(torch::kTrilinear);
  grid = F::interpolate(grid, F::InterpolateFuncOptions().size(target_grid).mode(mode).align_corners(true));
  std::vector<int64_t> to_last{0};
  for (std::size_t i = 2; i < shape.size(); ++i) to_last.push_back(static_cast<int64_t>(i));
  to_last.push_back(1);
  return grid.permute(to_last).reshape({-1, k});
}

torch::Tensor drop_path(const torch::Tensor& x, double rate, bool training) {
  if (!training || rate <= 0.0) return x;
  const double keep = 1.0 - rate;
  std::vector<int64_t> shape(static_cast<std::size_t>(x.dim()), 1);
  shape[0] = x.size(0);
  auto mask = torch::empty(shape, x.options()).bernoulli_(keep);
  return x * mask / keep;
}

SelfAttentionImpl::SelfAttentionImpl(int64_t dim, int64_t heads) : heads_(heads) {
  qkv = register_module("qkv", torch::nn::Linear(dim, 3 * dim));
  proj = register_module("proj", torch::nn::Linear(dim, dim));
  init_linear(qkv);
  init_linear(proj);
}

torch::Tensor SelfAttentionImpl::forward(const torch::Tensor& x, torch::Tensor* attention) {
  const auto b = x.size(0), t = x.size(1), k = x.size(2);
  const auto hd = k / heads_;
  auto qkv_out = qkv(x).reshape({b, t, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
  auto q = qkv_out[0], key = qkv_out[1], v = qkv_out[2];
  auto attn = torch::softmax(torch::matmul(q, key.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
  if (attention) *attention = attn;
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({b, t, k});
  return proj(out);
}

SwiGLUImpl::SwiGLUImpl(int64_t dim, int64_t hidden) {
  w12 = register_module("w12", torch::nn::Linear(dim, 2 * hidden));
  w3 = register_module("w3", torch::nn::Linear(hidden, dim));
  init_linear(w12);
  init_linear(w3);
}

torch::Tensor SwiGLUImpl::forward(const torch::Tensor& x) {
  auto parts = w12(x).chunk(2, -1);
  return w3(torch::silu(parts[0]) * parts[1]);
}

BlockImpl::BlockImpl(int64_t dim, int64_t heads, int64_t hidden, double drop_path_rate)
    : drop_path_(drop_path_rate) {
  norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  attn = register_module("attn", SelfAttention(dim, heads));
  norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({dim}).eps(1e-6)));
  mlp = register_module("mlp", SwiGLU(dim, hidden));
}

torch::Tensor BlockImpl::forward(const torch::Tensor& x, torch::Tensor* attention) {
  auto y = x + drop_path(attn(norm1(x), attention), drop_path_, is_training());
  return y + drop_path(mlp(norm2(y)), drop_path_, is_training());
}

torch::Tensor LayerFeatures::cls(int64_t layer) const {
  const auto i = layer < 0 ? size() + layer : layer;
  return layers.at(static_cast<std::size_t>(i)).select(1, 0);
}

torch::Tensor LayerFeatures::patches(int64_t layer) const {
  const auto i = layer < 0 ? size() + layer : layer;
  return layers.at(static_cast<std::size_t>(i)).slice(1, 1);
}

VisionTransformerImpl::VisionTransformerImpl(BackboneConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const int64_t k = cfg_.embed_dim;
  if (cfg_.input_rank == 2) {
    patch_embed = torch::nn::AnyModule(torch::nn::Conv2d(
        torch::nn::Conv2dOptions(cfg_.in_channels, k, cfg_.patch_size).stride(cfg_.patch_size)));
  } else {
    patch_embed = torch::nn::AnyModule(torch::nn::Conv3d(
        torch::nn::Conv3dOptions(cfg_.in_channels, k, cfg_.patch_size).stride(cfg_.patch_size)));
  }
  register_module("patch_embed", patch_embed.ptr());
  cls_token = register_parameter("cls_token", torch::randn({1, 1, k}) * 1e-6);
  pos_embed = register_parameter("pos_embed",
                                 torch::randn({1, 1 + cfg_.base_tokens(), k}).mul_(0.02).clamp_(-0.04, 0.04));
  mask_token = register_parameter("mask_token", torch::zeros({1, k}));
  blocks = register_module("blocks", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg_.blocks; ++i) {
    blocks->push_back(Block(k, cfg_.heads, cfg_.ffn_hidden_dim(), cfg_.drop_path_rate));
  }
  norm = register_module("norm", torch::nn::LayerNorm(torch::nn::LayerNormOptions({k}).eps(1e-6)));
}

torch::Tensor VisionTransformerImpl::positional(const std::vector<int64_t>& grid) {
  const std::vector<int64_t> base(static_cast<std::size_t>(cfg_.input_rank), cfg_.base_grid);
  if (grid == base) return pos_embed;
  auto cls_pos = pos_embed.slice(1, 0, 1);
  auto patch_pos = interpolate_pos_embed(pos_embed.slice(1, 1).squeeze(0), base, grid).unsqueeze(0);
  return torch::cat({cls_pos, patch_pos}, 1);
}

torch::Tensor VisionTransformerImpl::embed(const torch::Tensor& x, const std::optional<TokenMask>& mask,
                                          std::vector<int64_t>& grid) {
  if (x.dim() != 2 + cfg_.input_rank) {
    throw DataError("backbone expects input of rank " + std::to_string(2 + cfg_.input_rank) + ", got " +
                    std::to_string(x.dim()));
  }
  if (x.size(1) != cfg_.in_channels) throw DataError("backbone: channel count mismatch");
  if (!torch::isfinite(x).all().item<bool>()) throw NumericError("backbone: non-finite input");
  grid = token_grid(x.sizes().slice(2), cfg_);
  auto tokens = patch_embed.forward(x).flatten(2).transpose(1, 2);  // (B, N, K)
  if (mask) {
    if (mask->dim() != 2 || mask->size(0) != tokens.size(0) || mask->size(1) != tokens.size(1)) {
      throw DataError("backbone: mask shape does not match the token grid");
    }
    tokens = torch::where(mask->unsqueeze(-1), mask_token.to(tokens.dtype()), tokens);
  }
  tokens = torch::cat({cls_token.expand({tokens.size(0), 1, cfg_.embed_dim}), tokens}, 1);
  return tokens + positional(grid);
}

torch::Tensor VisionTransformerImpl::run_block(int64_t index, const torch::Tensor& tokens, torch::Tensor* attention) {
  return blocks[static_cast<std::size_t>(index)]->as<BlockImpl>()->forward(tokens, attention);
}

torch::Tensor VisionTransformerImpl::final_norm(const torch::Tensor& tokens) { return norm(tokens); }

LayerFeatures VisionTransformerImpl::forward(const torch::Tensor& x, const ForwardOptions& opts) {
  LayerFeatures out;
  auto h = embed(x, opts.mask, out.grid);
  const int64_t n = cfg_.blocks;
  const int64_t keep = opts.attention_layer < 0 ? n + opts.attention_layer : opts.attention_layer;
  if (opts.keep_attention && (keep < 0 || keep >= n)) {
    throw DataError("attention layer " + std::to_string(opts.attention_layer) + " out of range");
  }
  out.layers.reserve(static_cast<std::size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    torch::Tensor* attn = (opts.keep_attention && i == keep) ? &out.attention : nullptr;
    h = run_block(i, h, attn);
    out.layers.push_back(norm(h));
  }
  out.attention_layer = opts.keep_attention ? keep : -1;
  return out;
}

void freeze(torch::nn::Module& module) {
  for (auto& p : module.parameters()) p.set_requires_grad(false);
  module.eval();
}

void save_backbone(const std::filesystem::path& path, VisionTransformer& vit, int64_t iteration) {
  Checkpoint ckpt;
  const auto& c = vit->config();
  ckpt.metadata = {{"kind", "backbone"},        {"variant", c.variant},      {"patch_size", c.patch_size},
                   {"input_rank", c.input_rank}, {"iteration", iteration}, {"backbone", c.to_json()}};
  add_module(ckpt, "backbone.", *vit);
  save_checkpoint(path, ckpt);
}

VisionTransformer backbone_from_checkpoint(const Checkpoint& ckpt, int64_t* iteration) {
  if (!ckpt.metadata.contains("backbone")) throw DataError("checkpoint has no backbone metadata");
  const auto cfg = BackboneConfig::from_json(ckpt.metadata.at("backbone"));
  VisionTransformer vit(cfg);
  std::string prefix;
  if (ckpt.has_prefix("backbone.")) {
    prefix = "backbone.";
  } else if (ckpt.has_prefix("teacher.backbone.")) {
    prefix = "teacher.backbone.";
  } else {
    throw DataError("checkpoint holds no backbone tensors");
  }
  load_module(ckpt, prefix, *vit);
  if (iteration) *iteration = ckpt.metadata.value("iteration", int64_t{0});
  vit->eval();
  return vit;
}

VisionTransformer load_backbone(const std::filesystem::path& path, int64_t* iteration) {
  return backbone_from_checkpoint(load_checkpoint(path), iteration);
}

}  // namespace radvit
