#include "radvit/raw_tensor.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include <torch/torch.h>

#include "radvit/error.hpp"

namespace radvit {
namespace {

constexpr std::array<char, 4> kMagic{'R', 'V', 'T', 'N'};
constexpr uint8_t kVersion = 1;

uint8_t dtype_code(torch::ScalarType t) {
  switch (t) {
    case torch::kFloat32: return 1;
    case torch::kFloat64: return 2;
    case torch::kUInt8: return 3;
    case torch::kInt32: return 4;
    case torch::kInt64: return 5;
    default:
      throw DataError(std::string("raw tensor: unsupported dtype ") + c10::toString(t));
  }
}

torch::ScalarType dtype_from_code(uint8_t code) {
  switch (code) {
    case 1: return torch::kFloat32;
    case 2: return torch::kFloat64;
    case 3: return torch::kUInt8;
    case 4: return torch::kInt32;
    case 5: return torch::kInt64;
    default: throw DataError("raw tensor: unknown dtype code " + std::to_string(code));
  }
}

void put_u64(unsigned char* dst, uint64_t v) {
  for (int i = 0; i < 8; ++i) dst[i] = static_cast<unsigned char>(v >> (8 * i));
}

uint64_t get_u64(const unsigned char* src) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(src[i]) << (8 * i);
  return v;
}

void byteswap_inplace(unsigned char* data, std::size_t count, std::size_t width) {
  for (std::size_t i = 0; i < count; ++i) {
    std::reverse(data + i * width, data + (i + 1) * width);
  }
}

}  // namespace

void write_raw(std::ostream& out, const torch::Tensor& tensor) {
  const auto t = tensor.detach().to(torch::kCPU).contiguous();
  if (t.dim() > kRawMaxRank) throw DataError("raw tensor: rank exceeds 7");
  std::array<unsigned char, kRawHeaderBytes> header{};
  std::memcpy(header.data(), kMagic.data(), 4);
  header[4] = kVersion;
  header[5] = dtype_code(t.scalar_type());
  header[6] = static_cast<unsigned char>(t.dim());
  for (int64_t i = 0; i < t.dim(); ++i) put_u64(header.data() + 8 + 8 * i, static_cast<uint64_t>(t.size(i)));
  out.write(reinterpret_cast<const char*>(header.data()), header.size());

  const std::size_t bytes = t.numel() * t.element_size();
  if constexpr (std::endian::native == std::endian::little) {
    out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(bytes));
  } else {
    std::vector<unsigned char> buf(bytes);
    std::memcpy(buf.data(), t.data_ptr(), bytes);
    byteswap_inplace(buf.data(), t.numel(), t.element_size());
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(bytes));
  }
  if (!out) throw DataError("raw tensor: write failed");
}

RawHeader read_raw_header(std::istream& in) {
  std::array<unsigned char, kRawHeaderBytes> header{};
  in.read(reinterpret_cast<char*>(header.data()), header.size());
  if (in.gcount() != static_cast<std::streamsize>(header.size())) {
    throw DataError("raw tensor: truncated header");
  }
  if (std::memcmp(header.data(), kMagic.data(), 4) != 0) throw DataError("raw tensor: bad magic");
  if (header[4] != kVersion) throw DataError("raw tensor: unsupported version");
  RawHeader h;
  h.dtype = dtype_from_code(header[5]);
  const int rank = header[6];
  if (rank > kRawMaxRank) throw DataError("raw tensor: rank exceeds 7");
  for (int i = 0; i < rank; ++i) h.dims.push_back(static_cast<int64_t>(get_u64(header.data() + 8 + 8 * i)));
  return h;
}

torch::Tensor read_raw(std::istream& in) {
  const RawHeader h = read_raw_header(in);
  auto t = torch::empty(h.dims, torch::TensorOptions().dtype(h.dtype));
  const std::size_t bytes = t.numel() * t.element_size();
  in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(bytes));
  if (in.gcount() != static_cast<std::streamsize>(bytes)) throw DataError("raw tensor: truncated payload");
  if constexpr (std::endian::native != std::endian::little) {
    byteswap_inplace(static_cast<unsigned char*>(t.data_ptr()), t.numel(), t.element_size());
  }
  return t;
}

void save_raw(const std::filesystem::path& path, const torch::Tensor& tensor) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  write_raw(out, tensor);
}

torch::Tensor load_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  try {
    return read_raw(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

RawHeader peek_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  try {
    return read_raw_header(in);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace radvit
