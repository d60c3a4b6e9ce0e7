#pragma once

/**
 * @file config.hpp
 * @brief Pre-training configuration: presets, JSON round trip and override
 * resolution.
 *
 * The JSON form is flat. The first block of keys follows the published
 * hyper-parameter table; the rest are engine settings with documented
 * defaults. Resolution order is preset defaults, then the config file, then
 * key=value overrides. Unknown keys and type mismatches are usage errors.
 */

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "radvit/augment.hpp"
#include "radvit/backbone.hpp"
#include "radvit/ssl.hpp"

namespace radvit {

struct TrainConfig {
  std::string preset = "2d-b";

  double stochastic_drop_path_rate = 0.3;
  int64_t global_crop_size = 224;
  int64_t global_crop_number = 2;
  int64_t local_crop_size = 98;
  int64_t local_crop_number = 8;
  int64_t dino_head_prototypes = 65536;
  int64_t dino_head_dim = 256;
  int64_t ibot_head_prototypes = 65536;
  int64_t ibot_head_dim = 256;
  std::array<double, 2> masking_ratio{0.1, 0.5};
  bool shared_head = false;
  int64_t batch_size = 2048;
  int64_t total_iterations = 125000;
  int64_t warmup_iterations = 12500;
  std::array<double, 3> learning_rate{0.0, 1e-3, 1e-6};  // start, peak, final
  double weight_decay = 0.04;

  std::string variant = "B";
  int input_rank = 2;
  int64_t patch_size = 14;
  int64_t embed_dim = 0;  // 0: taken from the variant
  int64_t heads = 0;
  int64_t blocks = 0;
  int64_t ffn_hidden = 0;
  int64_t head_hidden_dim = 2048;
  int64_t head_layers = 3;
  double student_temperature = 0.1;
  double teacher_temperature = 0.07;
  int64_t sinkhorn_iterations = 3;
  bool centering = true;
  std::array<double, 2> momentum{0.994, 1.0};
  double clip_grad = 3.0;
  double image_loss_weight = 1.0;
  double patch_loss_weight = 1.0;
  std::array<double, 2> global_crop_scale{0.32, 1.0};
  std::array<double, 2> local_crop_scale{0.05, 0.32};
  int64_t min_mask_block = 4;
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;  // 0: final checkpoint only
  int64_t log_every = 10;
  int64_t threads = 1;

  BackboneConfig backbone() const;
  AugmentConfig augment() const;
  EngineConfig engine() const;

  void validate() const;
  nlohmann::json to_json() const;
  /// Strict: every key must be known and correctly typed; missing keys keep
  /// the current values.
  void apply(const nlohmann::json& j);
  /// FNV-1a of the canonical JSON dump.
  uint64_t hash() const;
};

/// Names accepted by preset(): 2d-b, 2d-l, 2d-g, 3d-b, 3d-l, 3d-g, toy-2d, toy-3d.
std::vector<std::string> preset_names();
TrainConfig preset(const std::string& name);

/// Parse "key=value". The value is read as JSON and falls back to a plain
/// string when it is not valid JSON.
std::pair<std::string, nlohmann::json> parse_override(const std::string& text);

/// preset defaults <- file <- overrides. The preset is taken from the
/// overrides, then the file, then `default_preset`.
TrainConfig resolve_config(const std::optional<std::filesystem::path>& file,
                           const std::vector<std::string>& overrides, const std::string& default_preset = "2d-b");

nlohmann::json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const nlohmann::json& j);

}  // namespace radvit
