#pragma once

/**
 * @file radprep.hpp
 * @brief Standardisation of 2D radiographs and 3D volumes.
 *
 * Normalisation, foreground cropping, statistical quality screening, tri-plane
 * slice extraction and manifest ingestion. All operations are pure functions
 * over their inputs.
 *
 * Tensor layout: images are (H, W) float32, volumes are (D, H, W) float32.
 * Axis 2 of a volume is the left-right (sagittal) axis, axis 1 the
 * anterior-posterior (coronal) axis and axis 0 the superior-inferior (axial)
 * axis.
 */

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/types.h>

namespace radvit {

enum class Modality2D { PAN, LAT, AP, INTRAORAL, BITEWING, SLICE };
enum class Modality3D { CT, CBCT, MRI };

std::string to_string(Modality2D m);
std::string to_string(Modality3D m);
std::optional<Modality2D> parse_modality_2d(std::string_view s);
std::optional<Modality3D> parse_modality_3d(std::string_view s);

struct RadImage {
  torch::Tensor pixels;  // (H, W) float32
  Modality2D modality = Modality2D::PAN;
  std::string source_id;

  int64_t height() const { return pixels.size(0); }
  int64_t width() const { return pixels.size(1); }
};

struct VolumeGrid {
  torch::Tensor voxels;  // (D, H, W) float32
  Modality3D modality = Modality3D::CBCT;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel along (D, H, W)
  std::string source_id;
};

/// Nearest-rank percentile of an ascending array; `q` in [0, 1].
/// Rank is ceil(q * n) clamped to [1, n].
float nearest_rank_percentile(std::span<const float> sorted, double q);

/// Clip to the 0.5th/99.5th nearest-rank percentiles and map to [0, 1].
/// A volume whose two percentiles coincide maps to all zeros.
VolumeGrid normalize_volume(const VolumeGrid& v);

/// Affine min/max map to [0, 255]. Constant images map to all zeros.
RadImage normalize_image(const RadImage& img);

struct CropConfig {
  /// Foreground is every element strictly above min + q * (max - min).
  double threshold_quantile = 0.05;
  int64_t margin = 2;
};

/// Half-open box, one [lo, hi) pair per axis.
struct BoundingBox {
  std::vector<int64_t> lo;
  std::vector<int64_t> hi;
};

/// Tight box around the foreground, padded by the margin and clamped to the
/// array bounds. Empty when the input has no foreground.
std::optional<BoundingBox> foreground_box(const torch::Tensor& x, const CropConfig& cfg = {});
torch::Tensor crop_foreground(const torch::Tensor& x, const CropConfig& cfg = {});
RadImage crop_foreground(const RadImage& img, const CropConfig& cfg = {});
VolumeGrid crop_foreground(const VolumeGrid& v, const CropConfig& cfg = {});

struct QualityConfig {
  double snr_min = 1.0;
  double entropy_min = 2.0;  // bits
  double foreground_quantile = 0.05;
};

struct QualityReport {
  double snr = 0.0;
  double entropy = 0.0;  // bits, over the 256-bin histogram
  std::array<int64_t, 256> histogram{};
  bool passed = false;
};

/// Expects an image already normalised to [0, 255]. SNR is mean/stddev over
/// foreground pixels (0 without foreground, +inf for a flat foreground).
QualityReport quality_filter(const RadImage& img, const QualityConfig& cfg = {});

/// Up to `n_per_plane` distinct slices from each of the sagittal, coronal and
/// axial planes, in that order. Deterministic for a given seed.
std::vector<RadImage> extract_slices(const VolumeGrid& v, int64_t n_per_plane, uint64_t seed);

enum class RecordKind { image2d, volume3d };

struct ManifestRecord {
  std::filesystem::path path;  // resolved against the manifest directory
  RecordKind kind = RecordKind::image2d;
  std::string modality;
  std::vector<int64_t> dims;
  std::optional<std::string> split_tag;
  int line = 0;
};

/// Manifest format: one record per line, whitespace separated
///   <path> <image2d|volume3d> <modality> <dims> [split_tag]
/// where dims is comma separated in storage order (H,W or D,H,W). Blank lines
/// and lines starting with '#' are ignored. Relative paths resolve against
/// `base_dir`. With `verify_payload`, each path must exist and its raw tensor
/// header must match the declared dims.
std::vector<ManifestRecord> parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                                           bool verify_payload = true);
std::vector<ManifestRecord> ingest_manifest(const std::filesystem::path& path, bool verify_payload = true);
void write_manifest(std::ostream& out, const std::vector<ManifestRecord>& records,
                    const std::filesystem::path& base_dir = {});

RadImage load_image(const ManifestRecord& rec);
VolumeGrid load_volume(const ManifestRecord& rec);

}  // namespace radvit
