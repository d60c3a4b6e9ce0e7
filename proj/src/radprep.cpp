#include "radvit/radprep.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <torch/torch.h>

#include "radvit/error.hpp"
#include "radvit/log.hpp"
#include "radvit/raw_tensor.hpp"

namespace radvit {
namespace {

std::vector<float> to_floats(const torch::Tensor& t) {
  const auto c = t.detach().to(torch::kCPU, torch::kFloat32).contiguous();
  const float* p = c.data_ptr<float>();
  return std::vector<float>(p, p + c.numel());
}

torch::Tensor from_values(const std::vector<float>& values, at::IntArrayRef shape) {
  return torch::from_blob(const_cast<float*>(values.data()), shape, torch::kFloat32).clone();
}

std::string upper(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::toupper(c); });
  return out;
}

}  // namespace

std::string to_string(Modality2D m) {
  switch (m) {
    case Modality2D::PAN: return "PAN";
    case Modality2D::LAT: return "LAT";
    case Modality2D::AP: return "AP";
    case Modality2D::INTRAORAL: return "INTRAORAL";
    case Modality2D::BITEWING: return "BITEWING";
    case Modality2D::SLICE: return "SLICE";
  }
  return "PAN";
}

std::string to_string(Modality3D m) {
  switch (m) {
    case Modality3D::CT: return "CT";
    case Modality3D::CBCT: return "CBCT";
    case Modality3D::MRI: return "MRI";
  }
  return "CBCT";
}

std::optional<Modality2D> parse_modality_2d(std::string_view s) {
  const auto u = upper(s);
  for (auto m : {Modality2D::PAN, Modality2D::LAT, Modality2D::AP, Modality2D::INTRAORAL, Modality2D::BITEWING,
                 Modality2D::SLICE}) {
    if (to_string(m) == u) return m;
  }
  return std::nullopt;
}

std::optional<Modality3D> parse_modality_3d(std::string_view s) {
  const auto u = upper(s);
  for (auto m : {Modality3D::CT, Modality3D::CBCT, Modality3D::MRI}) {
    if (to_string(m) == u) return m;
  }
  return std::nullopt;
}

float nearest_rank_percentile(std::span<const float> sorted, double q) {
  if (sorted.empty()) throw DataError("percentile of an empty array");
  const auto n = static_cast<double>(sorted.size());
  // The small slack keeps q * n that should be integral from rounding up.
  auto rank = static_cast<int64_t>(std::ceil(q * n - 1e-9));
  rank = std::clamp<int64_t>(rank, 1, static_cast<int64_t>(sorted.size()));
  return sorted[static_cast<std::size_t>(rank - 1)];
}

VolumeGrid normalize_volume(const VolumeGrid& v) {
  if (!v.voxels.defined() || v.voxels.numel() == 0) throw DataError("normalize_volume: empty volume");
  std::vector<float> values = to_floats(v.voxels);
  std::vector<float> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const float lo = nearest_rank_percentile(sorted, 0.005);
  const float hi = nearest_rank_percentile(sorted, 0.995);

  VolumeGrid out = v;
  if (!(hi > lo)) {
    log::warning("normalize_volume: constant volume " + v.source_id + " mapped to zeros");
    out.voxels = torch::zeros_like(v.voxels, torch::kFloat32);
    return out;
  }
  const float range = hi - lo;
  for (float& x : values) x = (std::clamp(x, lo, hi) - lo) / range;
  out.voxels = from_values(values, v.voxels.sizes());
  return out;
}

RadImage normalize_image(const RadImage& img) {
  if (!img.pixels.defined() || img.pixels.numel() == 0) throw DataError("normalize_image: empty image");
  std::vector<float> values = to_floats(img.pixels);
  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const float lo = *mn;
  const float hi = *mx;
  RadImage out = img;
  if (!(hi > lo)) {
    log::warning("normalize_image: constant image " + img.source_id + " mapped to zeros");
    out.pixels = torch::zeros_like(img.pixels, torch::kFloat32);
    return out;
  }
  const double scale = 255.0 / (static_cast<double>(hi) - lo);
  for (float& x : values) x = static_cast<float>((static_cast<double>(x) - lo) * scale);
  out.pixels = from_values(values, img.pixels.sizes());
  return out;
}

std::optional<BoundingBox> foreground_box(const torch::Tensor& x, const CropConfig& cfg) {
  if (!x.defined() || x.numel() == 0) return std::nullopt;
  const auto t = x.detach().to(torch::kFloat32);
  const double mn = t.min().item<double>();
  const double mx = t.max().item<double>();
  if (!(mx > mn)) return std::nullopt;
  const double threshold = mn + cfg.threshold_quantile * (mx - mn);
  const auto fg = t > threshold;
  if (!fg.any().item<bool>()) return std::nullopt;

  BoundingBox box;
  for (int64_t axis = 0; axis < t.dim(); ++axis) {
    auto along = fg;
    for (int64_t other = t.dim() - 1; other >= 0; --other) {
      if (other != axis) along = along.any(other);
    }
    const auto idx = torch::nonzero(along).flatten();
    const int64_t first = idx.min().item<int64_t>();
    const int64_t last = idx.max().item<int64_t>();
    box.lo.push_back(std::max<int64_t>(0, first - cfg.margin));
    box.hi.push_back(std::min<int64_t>(t.size(axis), last + 1 + cfg.margin));
  }
  return box;
}

torch::Tensor crop_foreground(const torch::Tensor& x, const CropConfig& cfg) {
  const auto box = foreground_box(x, cfg);
  if (!box) return x;
  auto out = x;
  for (int64_t axis = 0; axis < x.dim(); ++axis) {
    out = out.slice(axis, box->lo[axis], box->hi[axis]);
  }
  return out.contiguous();
}

RadImage crop_foreground(const RadImage& img, const CropConfig& cfg) {
  RadImage out = img;
  out.pixels = crop_foreground(img.pixels, cfg);
  return out;
}

VolumeGrid crop_foreground(const VolumeGrid& v, const CropConfig& cfg) {
  VolumeGrid out = v;
  out.voxels = crop_foreground(v.voxels, cfg);
  return out;
}

QualityReport quality_filter(const RadImage& img, const QualityConfig& cfg) {
  QualityReport rep;
  const std::vector<float> values = to_floats(img.pixels);
  if (values.empty()) return rep;
  for (float v : values) {
    const auto bin = std::clamp<int64_t>(static_cast<int64_t>(std::floor(v)), 0, 255);
    ++rep.histogram[static_cast<std::size_t>(bin)];
  }
  const double n = static_cast<double>(values.size());
  double entropy = 0.0;
  for (int64_t c : rep.histogram) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    entropy -= p * std::log2(p);
  }
  rep.entropy = std::max(0.0, entropy);

  const auto [mn, mx] = std::minmax_element(values.begin(), values.end());
  const double threshold = *mn + cfg.foreground_quantile * (static_cast<double>(*mx) - *mn);
  double sum = 0.0;
  int64_t count = 0;
  for (float v : values) {
    if (v > threshold) {
      sum += v;
      ++count;
    }
  }
  if (count > 0) {
    const double mean = sum / static_cast<double>(count);
    double ss = 0.0;
    for (float v : values) {
      if (v > threshold) ss += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(ss / static_cast<double>(count));
    rep.snr = sd > 0.0 ? mean / sd : std::numeric_limits<double>::infinity();
  }
  rep.passed = rep.snr >= cfg.snr_min && rep.entropy >= cfg.entropy_min;
  return rep;
}

std::vector<RadImage> extract_slices(const VolumeGrid& v, int64_t n_per_plane, uint64_t seed) {
  std::vector<RadImage> out;
  if (n_per_plane <= 0) return out;
  if (!v.voxels.defined() || v.voxels.dim() != 3) throw DataError("extract_slices: expected a (D, H, W) volume");
  std::mt19937_64 rng(seed);
  // (axis fixed by the slice, plane name)
  const std::array<std::pair<int64_t, const char*>, 3> planes{{{2, "sagittal"}, {1, "coronal"}, {0, "axial"}}};
  for (const auto& [axis, name] : planes) {
    const int64_t extent = v.voxels.size(axis);
    std::vector<int64_t> idx(static_cast<std::size_t>(extent));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(static_cast<std::size_t>(std::min(n_per_plane, extent)));
    std::sort(idx.begin(), idx.end());
    for (int64_t i : idx) {
      RadImage s;
      s.pixels = v.voxels.select(axis, i).to(torch::kFloat32).contiguous().clone();
      s.modality = Modality2D::SLICE;
      s.source_id = v.source_id + ":" + name + ":" + std::to_string(i);
      out.push_back(std::move(s));
    }
  }
  return out;
}

std::vector<ManifestRecord> parse_manifest(std::istream& in, const std::filesystem::path& base_dir,
                                           bool verify_payload) {
  std::vector<ManifestRecord> records;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& why) {
    throw DataError("manifest line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;

    std::istringstream fields(line);
    std::vector<std::string> tok;
    for (std::string f; fields >> f;) tok.push_back(f);
    if (tok.size() < 4 || tok.size() > 5) fail("expected 4 or 5 fields, got " + std::to_string(tok.size()));

    ManifestRecord rec;
    rec.line = lineno;
    rec.path = std::filesystem::path(tok[0]);
    if (rec.path.is_relative() && !base_dir.empty()) rec.path = base_dir / rec.path;
    if (tok[1] == "image2d") {
      rec.kind = RecordKind::image2d;
      if (!parse_modality_2d(tok[2])) fail("unknown 2D modality '" + tok[2] + "'");
    } else if (tok[1] == "volume3d") {
      rec.kind = RecordKind::volume3d;
      if (!parse_modality_3d(tok[2])) fail("unknown 3D modality '" + tok[2] + "'");
    } else {
      fail("unknown kind '" + tok[1] + "'");
    }
    rec.modality = upper(tok[2]);

    std::istringstream dims(tok[3]);
    for (std::string d; std::getline(dims, d, ',');) {
      try {
        std::size_t used = 0;
        const long long value = std::stoll(d, &used);
        if (used != d.size() || value < 1) fail("bad dimension '" + d + "'");
        rec.dims.push_back(value);
      } catch (const std::logic_error&) {
        fail("bad dimension '" + d + "'");
      }
    }
    const std::size_t want_rank = rec.kind == RecordKind::image2d ? 2 : 3;
    if (rec.dims.size() != want_rank) {
      fail(tok[1] + " expects " + std::to_string(want_rank) + " dims, got " + std::to_string(rec.dims.size()));
    }
    if (tok.size() == 5) rec.split_tag = tok[4];

    if (verify_payload) {
      if (!std::filesystem::exists(rec.path)) fail("file not found: " + rec.path.string());
      RawHeader h;
      try {
        h = peek_raw(rec.path);
      } catch (const DataError& e) {
        fail(e.what());
      }
      if (h.dims != rec.dims) {
        std::string got;
        for (std::size_t i = 0; i < h.dims.size(); ++i) got += (i ? "," : "") + std::to_string(h.dims[i]);
        fail("payload " + rec.path.string() + " has dims " + (got.empty() ? "<scalar>" : got) +
             " but the record declares " + tok[3] + " (" + tok[1] + ")");
      }
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<ManifestRecord> ingest_manifest(const std::filesystem::path& path, bool verify_payload) {
  std::ifstream in(path);
  if (!in) throw DataError("manifest not found: " + path.string());
  return parse_manifest(in, path.parent_path(), verify_payload);
}

void write_manifest(std::ostream& out, const std::vector<ManifestRecord>& records,
                    const std::filesystem::path& base_dir) {
  for (const auto& r : records) {
    auto p = r.path;
    if (!base_dir.empty()) {
      const auto rel = std::filesystem::relative(p, base_dir);
      if (!rel.empty()) p = rel;
    }
    out << p.generic_string() << ' ' << (r.kind == RecordKind::image2d ? "image2d" : "volume3d") << ' '
        << r.modality << ' ';
    for (std::size_t i = 0; i < r.dims.size(); ++i) out << (i ? "," : "") << r.dims[i];
    if (r.split_tag) out << ' ' << *r.split_tag;
    out << '\n';
  }
}

RadImage load_image(const ManifestRecord& rec) {
  if (rec.kind != RecordKind::image2d) throw DataError(rec.path.string() + " is not a 2D record");
  RadImage img;
  img.pixels = load_raw(rec.path).to(torch::kFloat32);
  if (img.pixels.dim() != 2) throw DataError(rec.path.string() + ": expected a rank-2 payload");
  img.modality = parse_modality_2d(rec.modality).value_or(Modality2D::PAN);
  img.source_id = rec.path.stem().string();
  return img;
}

VolumeGrid load_volume(const ManifestRecord& rec) {
  if (rec.kind != RecordKind::volume3d) throw DataError(rec.path.string() + " is not a 3D record");
  VolumeGrid v;
  v.voxels = load_raw(rec.path).to(torch::kFloat32);
  if (v.voxels.dim() != 3) throw DataError(rec.path.string() + ": expected a rank-3 payload");
  v.modality = parse_modality_3d(rec.modality).value_or(Modality3D::CBCT);
  v.source_id = rec.path.stem().string();
  return v;
}

}  // namespace radvit
