#pragma once

/**
 * @file pretrain.hpp
 * @brief Pre-training loop over an in-memory corpus with periodic
 * checkpoints and exact resume.
 *
 * Sample selection and augmentation at iteration t draw from generators
 * seeded by (seed, t, batch slot), so a run resumed from a checkpoint at
 * iteration n reproduces the uninterrupted run bit for bit.
 */

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "radvit/config.hpp"
#include "radvit/radprep.hpp"
#include "radvit/ssl.hpp"

namespace radvit {

struct Corpus {
  int input_rank = 2;
  std::vector<RadImage> images;     // normalised to [0, 255]
  std::vector<VolumeGrid> volumes;  // normalised to [0, 1]

  std::size_t size() const { return input_rank == 2 ? images.size() : volumes.size(); }
};

/// Load every record of the matching kind and normalise it.
Corpus load_corpus(const std::filesystem::path& manifest, int input_rank);

/// splitmix64 finaliser over the combined words.
uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0);

/// Sample and augment the batch for `iteration`.
ViewBatch make_batch(const Corpus& corpus, const TrainConfig& cfg, int64_t iteration);

struct PretrainOptions {
  std::filesystem::path out_dir;
  std::optional<std::filesystem::path> resume;
  /// Stop once this iteration is reached (schedules still span total_iterations).
  std::optional<int64_t> stop_at;
  bool write_files = true;
  std::function<void(const StepReport&)> on_step;
};

struct PretrainResult {
  std::vector<StepReport> history;
  std::filesystem::path final_checkpoint;
  int64_t iteration = 0;
};

Checkpoint make_pretrain_checkpoint(const TeacherStudentState& state, const TrainConfig& cfg);

PretrainResult pretrain(const Corpus& corpus, const TrainConfig& cfg, const PretrainOptions& opts,
                        TeacherStudentState* state_out = nullptr);

}  // namespace radvit
