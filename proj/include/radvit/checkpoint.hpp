#pragma once

// Checkpoint container: a metadata block plus a table of named tensors.
//
//   "RVCK" | u32 version | u64 metadata length | metadata (compact JSON)
//   u64 tensor count | per tensor: u32 name length | name | raw tensor record
//
// Integers are little-endian and each raw tensor record uses the layout from
// raw_tensor.hpp. Names are canonical module paths such as
// "teacher.backbone.blocks.3.attn.qkv.weight". Round trips are bit-exact.

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace radvit {

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  bool contains(const std::string& name) const;
  const torch::Tensor& at(const std::string& name) const;
  bool has_prefix(const std::string& prefix) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Append every parameter and buffer of `module` under `prefix`.
void add_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module);

/// Copy tensors named `prefix + name` into `module`. Every parameter and
/// buffer must be present with a matching shape.
void load_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module);

/// FNV-1a over the names and raw bytes of all parameters of `module`.
uint64_t parameter_hash(const torch::nn::Module& module);

/// FNV-1a 64-bit over arbitrary bytes.
uint64_t fnv1a(const void* data, std::size_t size, uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace radvit
