#pragma once

// Raw tensor container.
//
// A file holds exactly one dense row-major array:
//
//   offset  size  field
//   0       4     magic "RVTN"
//   4       1     format version (1)
//   5       1     dtype code (1=f32, 2=f64, 3=u8, 4=i32, 5=i64)
//   6       1     rank (0..7)
//   7       1     reserved, zero
//   8       56    dims, 7 x uint64 little-endian; unused trailing dims are 0
//   64      ...   payload, little-endian, prod(dims) elements
//
// Images are stored as (H, W) and volumes as (D, H, W).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include <torch/types.h>

namespace radvit {

inline constexpr std::size_t kRawHeaderBytes = 64;
inline constexpr int kRawMaxRank = 7;

struct RawHeader {
  torch::ScalarType dtype = torch::kFloat32;
  std::vector<int64_t> dims;
};

void write_raw(std::ostream& out, const torch::Tensor& tensor);
torch::Tensor read_raw(std::istream& in);
RawHeader read_raw_header(std::istream& in);

void save_raw(const std::filesystem::path& path, const torch::Tensor& tensor);
torch::Tensor load_raw(const std::filesystem::path& path);
RawHeader peek_raw(const std::filesystem::path& path);

}  // namespace radvit
