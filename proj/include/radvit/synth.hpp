#pragma once

/**
 * @file synth.hpp
 * @brief Synthetic radiographs, volumes and toy downstream tasks.
 *
 * Used by the tests and by `radvit synth` to produce small corpora with the
 * same on-disk layout as real data (raw tensors plus a manifest).
 */

#include <cstdint>
#include <filesystem>

#include <torch/types.h>

namespace radvit {

/// Panoramic-like image: dental arch, tooth-like bright bars and noise.
/// (H, W) float32, values roughly in [0, 255].
torch::Tensor synth_radiograph(int64_t height, int64_t width, uint64_t seed);

/// CBCT-like volume: bone shell, dense inclusions and noise, in HU-like units.
/// (D, H, W) float32.
torch::Tensor synth_volume(int64_t size, uint64_t seed);

struct SegSample {
  torch::Tensor image;  // (spatial...) float32
  torch::Tensor mask;   // (spatial...) int64, 1 inside the bright region
};

/// Bright axis-aligned square (rank 2) or cube (rank 3) on a noisy background.
SegSample bright_box(int rank, int64_t size, uint64_t seed);

/// Two-class image: a Gaussian blob on the left (label 0) or right (label 1)
/// half of a noisy field.
torch::Tensor blob_image(int64_t size, int64_t label, uint64_t seed);

/// `count` synthetic radiographs (rank 2) or volumes (rank 3) plus
/// `<dir>/manifest.txt`. Returns the manifest path.
std::filesystem::path write_pretrain_corpus(const std::filesystem::path& dir, int rank, int64_t count,
                                            int64_t size, uint64_t seed);

/// Balanced two-class blob images with labels in the manifest's fifth
/// column, plus `<dir>/task.json`. Returns the task descriptor path.
std::filesystem::path write_classification_task(const std::filesystem::path& dir, int64_t count, int64_t size,
                                                uint64_t seed);

/// Bright-box images or volumes, masks under `<dir>/masks`, plus
/// `<dir>/task.json`. Returns the task descriptor path.
std::filesystem::path write_segmentation_task(const std::filesystem::path& dir, int rank, int64_t count,
                                              int64_t size, uint64_t seed);

}  // namespace radvit
