#include "radvit/config.hpp"

#include <cctype>
#include <fstream>
#include <limits>

#include "radvit/checkpoint.hpp"
#include "radvit/error.hpp"

namespace radvit {
namespace {

using nlohmann::json;

[[noreturn]] void type_error(const std::string& key, const char* expected, const json& v) {
  throw UsageError("config key '" + key + "': expected " + expected + ", got " + v.type_name());
}

void read_value(const std::string& key, const json& v, double& out) {
  if (!v.is_number()) type_error(key, "number", v);
  out = v.get<double>();
}

void read_value(const std::string& key, const json& v, int64_t& out) {
  if (!v.is_number_integer()) type_error(key, "integer", v);
  if (v.is_number_unsigned() && v.get<uint64_t>() > static_cast<uint64_t>(std::numeric_limits<int64_t>::max())) {
    throw UsageError("config key '" + key + "': value out of range");
  }
  out = v.get<int64_t>();
}

void read_value(const std::string& key, const json& v, uint64_t& out) {
  if (!v.is_number_integer() || (!v.is_number_unsigned() && v.get<int64_t>() < 0)) {
    type_error(key, "non-negative integer", v);
  }
  out = v.get<uint64_t>();
}

void read_value(const std::string& key, const json& v, int& out) {
  int64_t wide = 0;
  read_value(key, v, wide);
  if (wide < std::numeric_limits<int>::min() || wide > std::numeric_limits<int>::max()) {
    throw UsageError("config key '" + key + "': value out of range");
  }
  out = static_cast<int>(wide);
}

void read_value(const std::string& key, const json& v, bool& out) {
  if (!v.is_boolean()) type_error(key, "boolean", v);
  out = v.get<bool>();
}

void read_value(const std::string& key, const json& v, std::string& out) {
  if (!v.is_string()) type_error(key, "string", v);
  out = v.get<std::string>();
}

template <std::size_t N>
void read_value(const std::string& key, const json& v, std::array<double, N>& out) {
  const std::string expected = "array of " + std::to_string(N) + " numbers";
  if (!v.is_array() || v.size() != N) type_error(key, expected.c_str(), v);
  for (std::size_t i = 0; i < N; ++i) {
    if (!v[i].is_number()) type_error(key, expected.c_str(), v);
    out[i] = v[i].get<double>();
  }
}

/// Calls fn(name, member) for every serialised field, in output order.
template <typename Config, typename Fn>
void for_each_field(Config& c, Fn&& fn) {
  fn("preset", c.preset);
  fn("stochastic_drop_path_rate", c.stochastic_drop_path_rate);
  fn("global_crop_size", c.global_crop_size);
  fn("global_crop_number", c.global_crop_number);
  fn("local_crop_size", c.local_crop_size);
  fn("local_crop_number", c.local_crop_number);
  fn("dino_head_prototypes", c.dino_head_prototypes);
  fn("dino_head_dim", c.dino_head_dim);
  fn("ibot_head_prototypes", c.ibot_head_prototypes);
  fn("ibot_head_dim", c.ibot_head_dim);
  fn("masking_ratio", c.masking_ratio);
  fn("shared_head", c.shared_head);
  fn("batch_size", c.batch_size);
  fn("total_iterations", c.total_iterations);
  fn("warmup_iterations", c.warmup_iterations);
  fn("learning_rate", c.learning_rate);
  fn("weight_decay", c.weight_decay);
  fn("variant", c.variant);
  fn("input_rank", c.input_rank);
  fn("patch_size", c.patch_size);
  fn("embed_dim", c.embed_dim);
  fn("heads", c.heads);
  fn("blocks", c.blocks);
  fn("ffn_hidden", c.ffn_hidden);
  fn("head_hidden_dim", c.head_hidden_dim);
  fn("head_layers", c.head_layers);
  fn("student_temperature", c.student_temperature);
  fn("teacher_temperature", c.teacher_temperature);
  fn("sinkhorn_iterations", c.sinkhorn_iterations);
  fn("centering", c.centering);
  fn("momentum", c.momentum);
  fn("clip_grad", c.clip_grad);
  fn("image_loss_weight", c.image_loss_weight);
  fn("patch_loss_weight", c.patch_loss_weight);
  fn("global_crop_scale", c.global_crop_scale);
  fn("local_crop_scale", c.local_crop_scale);
  fn("min_mask_block", c.min_mask_block);
  fn("seed", c.seed);
  fn("checkpoint_every", c.checkpoint_every);
  fn("log_every", c.log_every);
  fn("threads", c.threads);
}

bool is_table_variant(const std::string& v) { return v == "B" || v == "L" || v == "G"; }

}  // namespace

BackboneConfig TrainConfig::backbone() const {
  BackboneConfig c;
  if (is_table_variant(variant)) {
    c = make_variant(variant, input_rank);
  } else {
    c.variant = variant;
    if (embed_dim <= 0 || heads <= 0 || blocks <= 0) {
      throw UsageError("variant '" + variant + "' needs explicit embed_dim, heads and blocks");
    }
  }
  c.input_rank = input_rank;
  if (embed_dim > 0) c.embed_dim = embed_dim;
  if (heads > 0) c.heads = heads;
  if (blocks > 0) c.blocks = blocks;
  if (ffn_hidden > 0) c.ffn_hidden = ffn_hidden;
  c.patch_size = patch_size;
  c.drop_path_rate = stochastic_drop_path_rate;
  if (patch_size <= 0 || global_crop_size % patch_size != 0) {
    throw UsageError("global_crop_size " + std::to_string(global_crop_size) + " is not a multiple of patch_size " +
                     std::to_string(patch_size));
  }
  c.base_grid = global_crop_size / patch_size;
  c.validate();
  return c;
}

AugmentConfig TrainConfig::augment() const {
  auto a = input_rank == 3 ? AugmentConfig::defaults_3d() : AugmentConfig::defaults_2d();
  a.input_rank = input_rank;
  a.global_size = global_crop_size;
  a.n_global = global_crop_number;
  a.local_size = local_crop_size;
  a.n_local = local_crop_number;
  a.global_scale = {global_crop_scale[0], global_crop_scale[1]};
  a.local_scale = {local_crop_scale[0], local_crop_scale[1]};
  a.patch_size = patch_size;
  a.mask_ratio = {masking_ratio[0], masking_ratio[1]};
  a.min_mask_block = min_mask_block;
  return a;
}

EngineConfig TrainConfig::engine() const {
  EngineConfig e;
  e.backbone = backbone();
  e.dino_head = {dino_head_prototypes, dino_head_dim, head_hidden_dim, head_layers};
  e.ibot_head = {ibot_head_prototypes, ibot_head_dim, head_hidden_dim, head_layers};
  e.shared_head = shared_head;
  auto& s = e.schedule;
  s.lr_start = learning_rate[0];
  s.lr_peak = learning_rate[1];
  s.lr_final = learning_rate[2];
  s.warmup_iters = warmup_iterations;
  s.total_iters = total_iterations;
  s.weight_decay = weight_decay;
  s.batch_size = batch_size;
  s.tau_student = student_temperature;
  s.tau_teacher = teacher_temperature;
  s.momentum_start = momentum[0];
  s.momentum_final = momentum[1];
  e.sinkhorn_iters = sinkhorn_iterations;
  e.centering = centering;
  e.clip_grad = clip_grad;
  e.image_weight = image_loss_weight;
  e.patch_weight = patch_loss_weight;
  return e;
}

void TrainConfig::validate() const {
  if (input_rank != 2 && input_rank != 3) throw UsageError("input_rank must be 2 or 3");
  const auto e = engine();
  e.schedule.validate();
  if (global_crop_number < 1 || local_crop_number < 0 || global_crop_number + local_crop_number < 2) {
    throw UsageError("need at least one global crop and two views in total");
  }
  if (local_crop_number > 0 && (local_crop_size <= 0 || local_crop_size % patch_size != 0)) {
    throw UsageError("local_crop_size " + std::to_string(local_crop_size) + " is not a multiple of patch_size " +
                     std::to_string(patch_size));
  }
  if (!(0.0 <= masking_ratio[0] && masking_ratio[0] <= masking_ratio[1] && masking_ratio[1] <= 1.0)) {
    throw UsageError("masking_ratio must satisfy 0 <= low <= high <= 1");
  }
  for (const auto* r : {&global_crop_scale, &local_crop_scale}) {
    if (!((*r)[0] > 0.0 && (*r)[0] <= (*r)[1] && (*r)[1] <= 1.0)) throw UsageError("crop scales must lie in (0, 1]");
  }
  if (dino_head_prototypes < 1 || ibot_head_prototypes < 1 || dino_head_dim < 1 || ibot_head_dim < 1 ||
      head_hidden_dim < 1 || head_layers < 1) {
    throw UsageError("head sizes must be positive");
  }
  if (sinkhorn_iterations < 1) throw UsageError("sinkhorn_iterations must be >= 1");
  if (min_mask_block < 1) throw UsageError("min_mask_block must be >= 1");
  if (checkpoint_every < 0) throw UsageError("checkpoint_every must be >= 0");
  if (log_every < 1) throw UsageError("log_every must be >= 1");
  if (threads < 1) throw UsageError("threads must be >= 1");
}

json TrainConfig::to_json() const {
  json j = json::object();
  for_each_field(*this, [&j](const char* name, const auto& member) { j[name] = member; });
  return j;
}

void TrainConfig::apply(const json& j) {
  if (!j.is_object()) throw UsageError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for_each_field(*this, [&](const char* name, auto& member) {
      if (key != name) return;
      known = true;
      read_value(key, value, member);
    });
    if (!known) throw UsageError("unknown config key '" + key + "'");
  }
}

uint64_t TrainConfig::hash() const {
  const auto text = to_json().dump();
  return fnv1a(text.data(), text.size());
}

std::vector<std::string> preset_names() {
  return {"2d-b", "2d-l", "2d-g", "3d-b", "3d-l", "3d-g", "toy-2d", "toy-3d"};
}

TrainConfig preset(const std::string& name) {
  TrainConfig c;
  c.preset = name;
  if (name == "2d-b") return c;
  if (name == "2d-l" || name == "2d-g") {
    c.variant = name == "2d-l" ? "L" : "G";
    c.stochastic_drop_path_rate = 0.4;
    c.dino_head_prototypes = 131072;
    c.dino_head_dim = 384;
    c.ibot_head_prototypes = 131072;
    c.ibot_head_dim = 256;
    c.batch_size = 1024;
    c.total_iterations = 625000;
    c.warmup_iterations = 100000;
    c.learning_rate = {0.0, 2e-4, 1e-6};
    return c;
  }
  if (name == "3d-b" || name == "3d-l" || name == "3d-g") {
    c.variant = std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(name.back()))));
    c.input_rank = 3;
    c.patch_size = 16;
    c.global_crop_size = 96;
    c.local_crop_size = 48;
    c.batch_size = 1024;
    c.total_iterations = 90000;
    c.warmup_iterations = 3000;
    c.learning_rate = {0.0, 2e-4, 1e-6};
    return c;
  }
  if (name == "toy-2d" || name == "toy-3d") {
    const bool volumetric = name == "toy-3d";
    c.variant = "toy";
    c.input_rank = volumetric ? 3 : 2;
    c.patch_size = volumetric ? 8 : 4;
    c.embed_dim = 32;
    c.heads = 2;
    c.blocks = 4;
    c.stochastic_drop_path_rate = 0.0;
    c.global_crop_size = 32;
    c.local_crop_size = 16;
    c.local_crop_number = 4;
    c.dino_head_prototypes = 64;
    c.dino_head_dim = 16;
    c.ibot_head_prototypes = 64;
    c.ibot_head_dim = 16;
    c.head_hidden_dim = 64;
    c.batch_size = 8;
    c.total_iterations = 200;
    c.warmup_iterations = 20;
    c.learning_rate = {0.0, 1e-3, 1e-6};
    return c;
  }
  throw UsageError("unknown preset '" + name + "'");
}

std::pair<std::string, json> parse_override(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("override '" + text + "' is not of the form key=value");
  const auto key = text.substr(0, eq);
  const auto raw = text.substr(eq + 1);
  auto value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  return {key, value};
}

TrainConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides,
                           const std::string& default_preset) {
  json from_file = json::object();
  if (file) {
    from_file = read_json_file(*file);
    if (!from_file.is_object()) throw UsageError(file->string() + ": config must be a JSON object");
  }
  std::vector<std::pair<std::string, json>> parsed;
  for (const auto& o : overrides) parsed.push_back(parse_override(o));

  std::string name = default_preset;
  if (from_file.contains("preset")) {
    if (!from_file["preset"].is_string()) type_error("preset", "string", from_file["preset"]);
    name = from_file["preset"].get<std::string>();
  }
  for (const auto& [k, v] : parsed) {
    if (k != "preset") continue;
    if (!v.is_string()) type_error("preset", "string", v);
    name = v.get<std::string>();
  }

  auto cfg = preset(name);
  cfg.apply(from_file);
  for (const auto& [k, v] : parsed) cfg.apply(json{{k, v}});
  cfg.preset = name;
  cfg.validate();
  return cfg;
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  auto j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw UsageError(path.string() + ": invalid JSON");
  return j;
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw DataError("failed writing " + path.string());
}

}  // namespace radvit
