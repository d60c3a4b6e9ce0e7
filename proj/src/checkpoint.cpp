#include "radvit/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include "radvit/error.hpp"
#include "radvit/raw_tensor.hpp"

namespace radvit {
namespace {

constexpr std::array<char, 4> kMagic{'R', 'V', 'C', 'K'};
constexpr uint32_t kVersion = 1;

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char buf[sizeof(T)];
  for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = static_cast<unsigned char>(static_cast<uint64_t>(v) >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) throw DataError("checkpoint: truncated");
  uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
  return static_cast<T>(v);
}

}  // namespace

bool Checkpoint::contains(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return true;
  }
  return false;
}

const torch::Tensor& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw DataError("checkpoint: missing tensor " + name);
}

bool Checkpoint::has_prefix(const std::string& prefix) const {
  for (const auto& [n, t] : tensors) {
    if (n.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open for writing: " + tmp.string());
    out.write(kMagic.data(), 4);
    put_le<uint32_t>(out, kVersion);
    const std::string meta = ckpt.metadata.dump();
    put_le<uint64_t>(out, meta.size());
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put_le<uint64_t>(out, ckpt.tensors.size());
    for (const auto& [name, tensor] : ckpt.tensors) {
      put_le<uint32_t>(out, static_cast<uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      write_raw(out, tensor);
    }
    if (!out) throw DataError("checkpoint: write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint not found: " + path.string());
  try {
    std::array<char, 4> magic{};
    in.read(magic.data(), 4);
    if (in.gcount() != 4 || magic != kMagic) throw DataError("bad magic");
    if (get_le<uint32_t>(in) != kVersion) throw DataError("unsupported version");
    const auto meta_len = get_le<uint64_t>(in);
    std::string meta(meta_len, '\0');
    in.read(meta.data(), static_cast<std::streamsize>(meta_len));
    if (in.gcount() != static_cast<std::streamsize>(meta_len)) throw DataError("truncated metadata");
    Checkpoint ckpt;
    ckpt.metadata = nlohmann::json::parse(meta);
    const auto count = get_le<uint64_t>(in);
    ckpt.tensors.reserve(count);
    for (uint64_t i = 0; i < count; ++i) {
      const auto len = get_le<uint32_t>(in);
      std::string name(len, '\0');
      in.read(name.data(), len);
      if (in.gcount() != static_cast<std::streamsize>(len)) throw DataError("truncated tensor name");
      ckpt.tensors.emplace_back(std::move(name), read_raw(in));
    }
    return ckpt;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": metadata: " + e.what());
  } catch (const DataError& e) {
    throw DataError("checkpoint " + path.string() + ": " + e.what());
  }
}

void add_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& p : module.named_parameters(true)) {
    ckpt.tensors.emplace_back(prefix + p.key(), p.value().detach().clone());
  }
  for (const auto& b : module.named_buffers(true)) {
    ckpt.tensors.emplace_back(prefix + b.key(), b.value().detach().clone());
  }
}

void load_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& dst) {
    const auto& src = ckpt.at(prefix + name);
    if (src.sizes() != dst.sizes()) {
      throw DataError("checkpoint: shape mismatch for " + prefix + name);
    }
    dst.copy_(src);
  };
  for (auto& p : module.named_parameters(true)) assign(p.key(), p.value());
  for (auto& b : module.named_buffers(true)) assign(b.key(), b.value());
}

uint64_t fnv1a(const void* data, std::size_t size, uint64_t seed) {
  uint64_t h = seed;
  const auto* bytes = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t parameter_hash(const torch::nn::Module& module) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : module.named_parameters(true)) {
    h = fnv1a(p.key().data(), p.key().size(), h);
    const auto t = p.value().detach().contiguous();
    h = fnv1a(t.data_ptr(), t.numel() * t.element_size(), h);
  }
  for (const auto& b : module.named_buffers(true)) {
    h = fnv1a(b.key().data(), b.key().size(), h);
    const auto t = b.value().detach().contiguous();
    h = fnv1a(t.data_ptr(), t.numel() * t.element_size(), h);
  }
  return h;
}

}  // namespace radvit
