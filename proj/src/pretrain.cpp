#include "radvit/pretrain.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>

#include "radvit/error.hpp"
#include "radvit/log.hpp"

namespace radvit {
namespace {

uint64_t splitmix(uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::filesystem::path numbered_checkpoint(const std::filesystem::path& dir, int64_t iteration) {
  char name[64];
  std::snprintf(name, sizeof(name), "checkpoint_%08lld.rvck", static_cast<long long>(iteration));
  return dir / name;
}

std::string hex(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return splitmix(splitmix(splitmix(a) ^ b) ^ c); }

Corpus load_corpus(const std::filesystem::path& manifest, int input_rank) {
  Corpus corpus;
  corpus.input_rank = input_rank;
  for (const auto& rec : ingest_manifest(manifest)) {
    if (input_rank == 2 && rec.kind == RecordKind::image2d) {
      corpus.images.push_back(normalize_image(load_image(rec)));
    } else if (input_rank == 3 && rec.kind == RecordKind::volume3d) {
      corpus.volumes.push_back(normalize_volume(load_volume(rec)));
    }
  }
  if (corpus.size() == 0) {
    throw DataError(manifest.string() + ": no " + (input_rank == 2 ? "image2d" : "volume3d") + " records");
  }
  return corpus;
}

ViewBatch make_batch(const Corpus& corpus, const TrainConfig& cfg, int64_t iteration) {
  const auto n = static_cast<int64_t>(corpus.size());
  if (n == 0) throw DataError("empty pre-training corpus");
  const int64_t b = cfg.batch_size;
  Rng pick(mix_seed(cfg.seed, static_cast<uint64_t>(iteration), 0xb));
  std::vector<int64_t> chosen;
  if (b <= n) {
    std::vector<int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    for (int64_t i = 0; i < b; ++i) {
      const auto j = std::uniform_int_distribution<int64_t>(i, n - 1)(pick);
      std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    chosen.assign(idx.begin(), idx.begin() + b);
  } else {
    for (int64_t i = 0; i < b; ++i) chosen.push_back(std::uniform_int_distribution<int64_t>(0, n - 1)(pick));
  }
  const auto aug = cfg.augment();
  std::vector<ViewSet> views;
  views.reserve(chosen.size());
  for (std::size_t slot = 0; slot < chosen.size(); ++slot) {
    Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(iteration), slot + 1));
    const auto i = static_cast<std::size_t>(chosen[slot]);
    views.push_back(cfg.input_rank == 2 ? make_views_2d(corpus.images[i], aug, rng)
                                        : make_views_3d(corpus.volumes[i], aug, rng));
  }
  return collate(views);
}

Checkpoint make_pretrain_checkpoint(const TeacherStudentState& state, const TrainConfig& cfg) {
  Checkpoint ckpt;
  state.save(ckpt);
  ckpt.metadata["kind"] = "pretrain";
  ckpt.metadata["variant"] = cfg.variant;
  ckpt.metadata["config_hash"] = hex(cfg.hash());
  ckpt.metadata["config"] = cfg.to_json();
  ckpt.metadata["backbone"] = state.cfg.backbone.to_json();
  return ckpt;
}

PretrainResult pretrain(const Corpus& corpus, const TrainConfig& cfg, const PretrainOptions& opts,
                        TeacherStudentState* state_out) {
  cfg.validate();
  if (corpus.input_rank != cfg.input_rank) throw UsageError("corpus rank does not match input_rank");
  torch::set_num_threads(static_cast<int>(cfg.threads));
  auto state = TeacherStudentState::create(cfg.engine(), cfg.seed);
  if (opts.resume) {
    const auto ckpt = load_checkpoint(*opts.resume);
    if (ckpt.metadata.value("kind", "") != "pretrain") {
      throw DataError(opts.resume->string() + ": not a pre-training checkpoint");
    }
    if (ckpt.metadata.value("config_hash", "") != hex(cfg.hash())) {
      log::warning("resuming " + opts.resume->string() + " with a different configuration");
    }
    state.load(ckpt);
    log::info("resumed from " + opts.resume->string() + " at iteration " + std::to_string(state.iteration));
  }

  std::ofstream metrics;
  if (opts.write_files) {
    std::filesystem::create_directories(opts.out_dir);
    const auto path = opts.out_dir / "metrics.jsonl";
    metrics.open(path, opts.resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw DataError("cannot write " + path.string());
  }

  PretrainResult result;
  const int64_t end = opts.stop_at ? std::min(*opts.stop_at, cfg.total_iterations) : cfg.total_iterations;
  while (state.iteration < end) {
    const auto batch = make_batch(corpus, cfg, state.iteration);
    torch::manual_seed(mix_seed(cfg.seed, static_cast<uint64_t>(state.iteration), 0xd));
    const auto report = train_step(state, batch);
    result.history.push_back(report);
    if (metrics.is_open()) metrics << report.to_json().dump() << '\n';
    if (opts.on_step) opts.on_step(report);
    if (state.iteration % cfg.log_every == 0 || state.iteration == end) {
      char line[160];
      std::snprintf(line, sizeof(line), "iter %lld/%lld loss %.5f (image %.5f, patch %.5f) lr %.3g entropy %.4f",
                    static_cast<long long>(state.iteration), static_cast<long long>(cfg.total_iterations),
                    report.total, report.image, report.patch, report.lr, report.teacher_entropy);
      log::info(line);
    }
    if (opts.write_files && cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 &&
        state.iteration < end) {
      save_checkpoint(numbered_checkpoint(opts.out_dir, state.iteration), make_pretrain_checkpoint(state, cfg));
    }
  }

  result.iteration = state.iteration;
  if (opts.write_files) {
    result.final_checkpoint = state.iteration >= cfg.total_iterations ? opts.out_dir / "final.rvck"
                                                                      : numbered_checkpoint(opts.out_dir, state.iteration);
    save_checkpoint(result.final_checkpoint, make_pretrain_checkpoint(state, cfg));
    log::info("wrote " + result.final_checkpoint.string());
  }
  if (state_out) *state_out = std::move(state);
  return result;
}

}  // namespace radvit
