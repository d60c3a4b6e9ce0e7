#include "radvit/cli.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "radvit/adapters.hpp"
#include "radvit/config.hpp"
#include "radvit/error.hpp"
#include "radvit/harness.hpp"
#include "radvit/introspect.hpp"
#include "radvit/log.hpp"
#include "radvit/pretrain.hpp"
#include "radvit/radprep.hpp"
#include "radvit/raw_tensor.hpp"
#include "radvit/synth.hpp"

namespace radvit {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Creates the output directory, opens run.log and writes the resolved
/// configuration snapshot next to the outputs.
void begin_run(const fs::path& dir, const std::string& command, json resolved) {
  fs::create_directories(dir);
  log::open_run_log(dir / "run.log");
  resolved["command"] = command;
  write_json_file(dir / "resolved_config.json", resolved);
  log::info(command + " started, outputs in " + dir.string());
}

std::string hex64(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json to_json_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

TaskSpec read_task(const fs::path& path) { return TaskSpec::from_json(read_json_file(path), path.parent_path()); }

int64_t default_input_size(VisionTransformer& vit) {
  return vit->config().base_grid * vit->config().patch_size;
}

struct Split {
  std::vector<int64_t> train, test;
};

Split task_split(int64_t n, uint64_t seed, double ratio) {
  if (n < 2) throw DataError("task needs at least 2 samples, found " + std::to_string(n));
  auto plan = make_split(n, seed, ratio);
  return {plan.train, plan.test};
}

std::vector<int64_t> pick(std::span<const int64_t> values, std::span<const int64_t> idx) {
  std::vector<int64_t> out;
  for (auto i : idx) out.push_back(values[static_cast<std::size_t>(i)]);
  return out;
}

json seg_scores(const torch::Tensor& pred, const torch::Tensor& truth, int64_t classes) {
  double dice = 0.0, iou = 0.0, mdice = 0.0, miou = 0.0;
  for (int64_t i = 0; i < pred.size(0); ++i) {
    const auto m = dice_iou(pred[i], truth[i], classes);
    dice += m.dice[0];
    iou += m.iou[0];
    mdice += m.mdice;
    miou += m.miou;
  }
  const double n = static_cast<double>(std::max<int64_t>(1, pred.size(0)));
  return {{"Dice", dice / n}, {"IoU", iou / n}, {"mDice", mdice / n}, {"mIoU", miou / n}};
}

torch::Tensor slice_for_display(const torch::Tensor& x) {
  return x.dim() == 3 ? x.select(0, x.size(0) / 2) : x;
}

// ---------------------------------------------------------------------------

struct PrepArgs {
  std::string manifest, out;
  int64_t slices_per_plane = 0;
  uint64_t seed = 0;
  double threshold_quantile = 0.05;
  int64_t margin = 2;
  double snr_min = 1.0;
  double entropy_min = 2.0;
};

int cmd_prep(const PrepArgs& a) {
  const fs::path out(a.out);
  begin_run(out, "prep",
            {{"manifest", a.manifest},
             {"out", a.out},
             {"slices_per_plane", a.slices_per_plane},
             {"seed", a.seed},
             {"threshold_quantile", a.threshold_quantile},
             {"margin", a.margin},
             {"snr_min", a.snr_min},
             {"entropy_min", a.entropy_min}});
  const auto records = ingest_manifest(a.manifest);
  const CropConfig crop{a.threshold_quantile, a.margin};
  const QualityConfig quality{a.snr_min, a.entropy_min, a.threshold_quantile};
  fs::create_directories(out / "data");
  std::vector<ManifestRecord> kept;
  std::ofstream qlog(out / "quality.jsonl");
  int64_t rejected = 0;

  auto keep_image = [&](const RadImage& img, const std::string& name, const std::string& modality) {
    const auto report = quality_filter(img, quality);
    qlog << json{{"id", name}, {"snr", to_json_or_null(report.snr)}, {"entropy", report.entropy},
                 {"passed", report.passed}}.dump()
         << '\n';
    if (!report.passed) {
      ++rejected;
      return;
    }
    ManifestRecord r;
    r.path = out / "data" / (name + ".rvt");
    r.kind = RecordKind::image2d;
    r.modality = modality;
    r.dims = img.pixels.sizes().vec();
    save_raw(r.path, img.pixels);
    kept.push_back(std::move(r));
  };

  for (const auto& rec : records) {
    const auto stem = rec.path.stem().string();
    if (rec.kind == RecordKind::image2d) {
      keep_image(crop_foreground(normalize_image(load_image(rec)), crop), stem, rec.modality);
      continue;
    }
    const auto vol = crop_foreground(normalize_volume(load_volume(rec)), crop);
    ManifestRecord r;
    r.path = out / "data" / (stem + ".rvt");
    r.kind = RecordKind::volume3d;
    r.modality = rec.modality;
    r.dims = vol.voxels.sizes().vec();
    save_raw(r.path, vol.voxels);
    kept.push_back(std::move(r));
    const auto slices = extract_slices(vol, a.slices_per_plane, a.seed ^ fnv1a(stem.data(), stem.size()));
    for (std::size_t i = 0; i < slices.size(); ++i) {
      keep_image(normalize_image(slices[i]), stem + "_s" + std::to_string(i), "SLICE");
    }
  }
  std::ofstream mf(out / "manifest.txt");
  write_manifest(mf, kept, out);
  log::info("prep kept " + std::to_string(kept.size()) + " records, rejected " + std::to_string(rejected));
  return 0;
}

// ---------------------------------------------------------------------------

struct PretrainArgs {
  std::string config, manifest, out, resume;
  std::optional<int64_t> stop_at;
  std::vector<std::string> overrides;
};

int cmd_pretrain(const PretrainArgs& a) {
  std::optional<fs::path> file;
  if (!a.config.empty()) file = a.config;
  const auto cfg = resolve_config(file, a.overrides);
  begin_run(a.out, "pretrain",
            {{"config", cfg.to_json()}, {"manifest", a.manifest}, {"resume", a.resume}, {"config_file", a.config}});
  const auto corpus = load_corpus(a.manifest, cfg.input_rank);
  PretrainOptions opts;
  opts.out_dir = a.out;
  if (!a.resume.empty()) opts.resume = a.resume;
  opts.stop_at = a.stop_at;
  const auto result = pretrain(corpus, cfg, opts);
  log::info("pretrain finished at iteration " + std::to_string(result.iteration) + ", checkpoint " +
            result.final_checkpoint.string());
  return 0;
}

// ---------------------------------------------------------------------------

struct DownstreamArgs {
  std::string ckpt, task, out;
  uint64_t seed = 0;
  uint64_t split_seed = 0;
  double ratio = 0.7;
  int64_t input_size = 0;
  int layers = 1;
  int max_iter = 1000;
  std::string head = "linear";
  std::string mode = "classify";
  double lr = 1e-4;
  int64_t epochs = 300;
  int64_t batch = 32;
  int64_t iterations = 12500;
  int64_t feature_size = 16;
  int64_t spm_channels = 64;

  json to_json() const {
    return {{"ckpt", ckpt},       {"task", task},         {"out", out},           {"seed", seed},
            {"split_seed", split_seed}, {"ratio", ratio}, {"input_size", input_size}, {"layers", layers},
            {"max_iter", max_iter}, {"head", head},        {"mode", mode},         {"lr", lr},
            {"epochs", epochs},   {"batch", batch},       {"iterations", iterations},
            {"feature_size", feature_size}, {"spm_channels", spm_channels}};
  }
};

struct LoadedTask {
  VisionTransformer vit{nullptr};
  TaskSpec spec;
  TaskData data;
  Split split;
};

LoadedTask load_downstream(const DownstreamArgs& a) {
  LoadedTask t;
  t.vit = load_backbone(a.ckpt);
  t.spec = read_task(a.task);
  const auto size = a.input_size > 0 ? a.input_size : default_input_size(t.vit);
  t.data = load_task(t.spec, t.vit->config().input_rank, size);
  t.split = task_split(t.data.images.size(0), a.split_seed, a.ratio);
  torch::manual_seed(a.seed);
  return t;
}

int cmd_probe(const DownstreamArgs& a) {
  begin_run(a.out, "probe", a.to_json());
  auto t = load_downstream(a);
  if (t.spec.type != "classification") throw UsageError("probe needs a classification task");
  const auto emb = Matrix::from_tensor(embed_all(t.vit, t.data.images, a.layers));
  auto grid = ProbeGrid::standard();
  grid.max_iter = a.max_iter;
  const auto r = linear_probe(emb.select(t.split.train), pick(t.data.labels, t.split.train), emb.select(t.split.test),
                              pick(t.data.labels, t.split.test), t.spec.classes, grid, 0.2, a.seed);
  const json result = {{"task", t.spec.name},
                       {"best_C", r.best_C},
                       {"train_accuracy", r.train_accuracy},
                       {"val_accuracy", r.val_accuracy},
                       {"test_accuracy", to_json_or_null(r.test_accuracy)},
                       {"val_curve", r.val_curve},
                       {"n_train", t.split.train.size()},
                       {"n_test", t.split.test.size()}};
  write_json_file(fs::path(a.out) / "probe.json", result);
  log::info("probe test accuracy " + std::to_string(r.test_accuracy));
  return 0;
}

int run_segmentation(const DownstreamArgs& a, const std::string& head, const std::string& command) {
  auto t = load_downstream(a);
  if (t.spec.type != "segmentation") throw UsageError(command + " needs a segmentation task");
  SegTrainOptions o;
  o.head = head;
  o.lr = a.lr;
  o.epochs = a.epochs;
  o.batch_size = a.batch;
  o.feature_size = a.feature_size;
  o.spm_channels = a.spm_channels;
  o.seed = a.seed;
  const auto tr = torch::tensor(t.split.train, torch::kInt64);
  const auto te = torch::tensor(t.split.test, torch::kInt64);
  auto r = finetune_segmentation(t.vit, t.data.images.index_select(0, tr), t.data.masks.index_select(0, tr),
                                 t.spec.classes, o);
  const auto pred = r.predict(t.data.images.index_select(0, te));
  auto result = seg_scores(pred, t.data.masks.index_select(0, te), t.spec.classes);
  result["task"] = t.spec.name;
  result["head"] = head;
  result["best_val_dice"] = r.best_val_dice;
  result["best_epoch"] = r.best_epoch;
  result["val_curve"] = r.val_curve;
  result["backbone_hash_before"] = hex64(r.backbone_hash_before);
  result["backbone_hash_after"] = hex64(r.backbone_hash_after);
  write_json_file(fs::path(a.out) / (command + ".json"), result);
  Checkpoint ckpt;
  ckpt.metadata = {{"kind", "head"}, {"head", head}, {"classes", t.spec.classes}};
  add_module(ckpt, "", *r.head);
  save_checkpoint(fs::path(a.out) / "head.rvck", ckpt);
  log::info(command + " test Dice " + std::to_string(result["Dice"].get<double>()));
  return 0;
}

int cmd_segment(const DownstreamArgs& a) {
  if (a.head != "linear" && a.head != "unetr") throw UsageError("--head must be linear or unetr");
  begin_run(a.out, "segment", a.to_json());
  return run_segmentation(a, a.head, "segment");
}

int cmd_adapt(const DownstreamArgs& a) {
  if (a.mode != "classify" && a.mode != "segment") throw UsageError("--mode must be classify or segment");
  begin_run(a.out, "adapt", a.to_json());
  if (a.mode == "segment") return run_segmentation(a, "adapter", "adapt");
  auto t = load_downstream(a);
  if (t.spec.type != "classification") throw UsageError("adapt --mode classify needs a classification task");
  ClassifierGridOptions o;
  o.iterations = a.iterations;
  o.batch_size = a.batch;
  o.seed = a.seed;
  const auto tr = torch::tensor(t.split.train, torch::kInt64);
  const auto te = torch::tensor(t.split.test, torch::kInt64);
  const auto r = finetune_adapter_classifier(t.vit, t.data.images.index_select(0, tr), pick(t.data.labels, t.split.train),
                                             t.data.images.index_select(0, te), pick(t.data.labels, t.split.test),
                                             t.spec.classes, o);
  json grid = json::array();
  for (const auto& c : r.grid) {
    grid.push_back({{"lr", c.lr}, {"layers", c.layers}, {"val_accuracy", c.val_accuracy},
                    {"test_accuracy", to_json_or_null(c.test_accuracy)}});
  }
  write_json_file(fs::path(a.out) / "adapt.json",
                  {{"task", t.spec.name},
                   {"grid", grid},
                   {"best", {{"lr", r.best.lr}, {"layers", r.best.layers}, {"val_accuracy", r.best.val_accuracy},
                             {"test_accuracy", to_json_or_null(r.best.test_accuracy)}}},
                   {"backbone_hash_before", hex64(r.backbone_hash_before)},
                   {"backbone_hash_after", hex64(r.backbone_hash_after)}});
  log::info("adapt best test accuracy " + std::to_string(r.best.test_accuracy));
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string config, ckpt, out;
};

int cmd_eval(const EvalArgs& a) {
  const fs::path cfg_path(a.config);
  const auto cfg = BenchmarkConfig::from_json(read_json_file(cfg_path), cfg_path.parent_path());
  begin_run(a.out, "eval", {{"benchmark", cfg.to_json()}, {"ckpt", a.ckpt}});
  if (cfg.tasks.empty()) {
    struct Empty : TaskEvaluator {
      int64_t size(const TaskSpec&) override { return 0; }
      std::map<std::string, double> evaluate(const TaskSpec&, std::span<const int64_t>, std::span<const int64_t>,
                                             uint64_t) override {
        return {};
      }
    } none;
    run_benchmark(cfg, none, a.out);
    log::info("eval: no tasks configured, empty report written");
    return 0;
  }
  if (a.ckpt.empty()) throw UsageError("eval needs --ckpt when tasks are configured");
  BackboneEvaluator evaluator(load_backbone(a.ckpt), cfg.evaluator);
  const auto rows = run_benchmark(cfg, evaluator, a.out);
  log::info("eval wrote " + std::to_string(rows.size()) + " report rows");
  return 0;
}

// ---------------------------------------------------------------------------

struct InspectArgs {
  std::vector<std::string> ckpts;
  std::string manifest, out;
  int64_t index = 0;
  int64_t input_size = 0;
  int64_t layer = -1;
  std::vector<int64_t> heads;
  std::string merge = "mean";
  int64_t k = 4;
  uint64_t seed = 0;
  int64_t iters = 100;
  int layers = 1;

  json to_json() const {
    return {{"ckpt", ckpts},    {"manifest", manifest}, {"out", out},   {"index", index}, {"input_size", input_size},
            {"layer", layer},   {"heads", heads},       {"merge", merge}, {"k", k},       {"seed", seed},
            {"iters", iters},   {"layers", layers}};
  }
};

torch::Tensor inspect_input(const InspectArgs& a, VisionTransformer& vit) {
  const auto records = ingest_manifest(a.manifest);
  if (a.index < 0 || a.index >= static_cast<int64_t>(records.size())) {
    throw DataError("--index " + std::to_string(a.index) + " outside the " + std::to_string(records.size()) +
                    " manifest records");
  }
  const auto size = a.input_size > 0 ? a.input_size : default_input_size(vit);
  return model_input(records[static_cast<std::size_t>(a.index)], vit->config().input_rank, size);
}

int cmd_inspect_attn(const InspectArgs& a) {
  begin_run(a.out, "inspect attn", a.to_json());
  if (a.ckpts.empty()) throw UsageError("inspect attn needs at least one --ckpt");
  auto first = load_backbone(a.ckpts.front());
  const auto x = inspect_input(a, first);
  AttentionOptions o;
  o.layer = a.layer;
  o.heads = a.heads;
  o.merge = parse_merge_mode(a.merge);
  std::vector<fs::path> paths(a.ckpts.begin(), a.ckpts.end());
  const auto series = snapshot_series(paths, x, o);
  json summary = json::array();
  for (const auto& maps : series) {
    char stem[48];
    std::snprintf(stem, sizeof stem, "attn_iter%08lld", static_cast<long long>(maps.iteration));
    const auto files = render_overlays(maps, x[0], a.out, stem);
    save_raw(fs::path(a.out) / (std::string(stem) + "_heads.rvt"), maps.heads);
    save_raw(fs::path(a.out) / (std::string(stem) + "_merged.rvt"), maps.merged);
    json names = json::array();
    for (const auto& f : files) names.push_back(f.filename().string());
    summary.push_back({{"iteration", maps.iteration}, {"layer", maps.layer}, {"grid", maps.grid},
                       {"selected_heads", maps.selected}, {"overlays", names}});
  }
  write_json_file(fs::path(a.out) / "attention.json", summary);
  return 0;
}

int cmd_inspect_kmeans(const InspectArgs& a) {
  begin_run(a.out, "inspect kmeans", a.to_json());
  if (a.ckpts.size() != 1) throw UsageError("inspect kmeans takes exactly one --ckpt");
  auto vit = load_backbone(a.ckpts.front());
  const auto x = inspect_input(a, vit);
  const auto feats = pixel_features(vit, x.unsqueeze(0))[0];  // (K, spatial...)
  const auto spatial = feats.sizes().slice(1).vec();
  const auto points = feats.reshape({feats.size(0), -1}).transpose(0, 1);
  const auto c = kmeans(points, a.k, a.seed, a.iters);
  const auto labels = torch::tensor(c.labels, torch::kInt64).reshape(spatial);
  save_raw(fs::path(a.out) / "kmeans_labels.rvt", labels);

  const auto hue = torch::linspace(0.0, 1.0, a.k, torch::kFloat64);
  const auto palette = torch::stack({hue, 1.0 - hue, (hue * 6.283185307179586).sin() * 0.5 + 0.5}, 1);
  const auto shown = slice_for_display(labels);
  const auto rgb = palette.index_select(0, shown.flatten()).reshape({shown.size(0), shown.size(1), 3});
  write_ppm(fs::path(a.out) / "kmeans_labels.ppm", 0.5 * rgb + 0.5 * slice_for_display(x[0]).unsqueeze(-1).to(torch::kFloat64));
  write_json_file(fs::path(a.out) / "kmeans.json", {{"k", c.k},
                                                    {"seed", c.seed},
                                                    {"inertia", c.inertia},
                                                    {"inertia_history", c.inertia_history},
                                                    {"iterations", c.iterations},
                                                    {"dims", spatial}});
  return 0;
}

int cmd_inspect_export(const InspectArgs& a) {
  const fs::path out(a.out);
  const auto dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
  begin_run(dir, "inspect export", a.to_json());
  if (a.ckpts.size() != 1) throw UsageError("inspect export takes exactly one --ckpt");
  auto vit = load_backbone(a.ckpts.front());
  const auto size = a.input_size > 0 ? a.input_size : default_input_size(vit);
  const auto n = export_embeddings(vit, a.manifest, out, size, a.layers);
  log::info("exported " + std::to_string(n) + " embeddings to " + out.string());
  return 0;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out, kind = "pretrain";
  int rank = 2;
  int64_t count = 64;
  int64_t size = 64;
  uint64_t seed = 0;
};

int cmd_synth(const SynthArgs& a) {
  begin_run(a.out, "synth",
            {{"out", a.out}, {"kind", a.kind}, {"rank", a.rank}, {"count", a.count}, {"size", a.size}, {"seed", a.seed}});
  fs::path written;
  if (a.kind == "pretrain") {
    written = write_pretrain_corpus(a.out, a.rank, a.count, a.size, a.seed);
  } else if (a.kind == "classification") {
    written = write_classification_task(a.out, a.count, a.size, a.seed);
  } else if (a.kind == "segmentation") {
    written = write_segmentation_task(a.out, a.rank, a.count, a.size, a.seed);
  } else {
    throw UsageError("--kind must be pretrain, classification or segmentation");
  }
  log::info("synth wrote " + written.string());
  return 0;
}

void add_downstream_common(CLI::App* sub, DownstreamArgs& a) {
  sub->add_option("--ckpt", a.ckpt, "backbone or pre-training checkpoint")->required();
  sub->add_option("--task", a.task, "task descriptor (JSON)")->required();
  sub->add_option("--out", a.out, "output directory")->required();
  sub->add_option("--seed", a.seed, "training seed");
  sub->add_option("--split-seed", a.split_seed, "train/test split seed");
  sub->add_option("--ratio", a.ratio, "train fraction of the split");
  sub->add_option("--input-size", a.input_size, "resize inputs to this many pixels per axis");
}

void add_seg_options(CLI::App* sub, DownstreamArgs& a) {
  sub->add_option("--lr", a.lr, "Adam learning rate");
  sub->add_option("--epochs", a.epochs, "training epochs");
  sub->add_option("--batch", a.batch, "batch size");
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"radvit: radiograph vision transformer pre-training and evaluation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("--quiet", quiet, "suppress log output on stderr");

  PrepArgs prep;
  auto* s_prep = app.add_subcommand("prep", "normalise, crop, screen and slice a manifest");
  s_prep->add_option("--manifest", prep.manifest, "input manifest")->required();
  s_prep->add_option("--out", prep.out, "output directory")->required();
  s_prep->add_option("--slices-per-plane", prep.slices_per_plane, "2D slices taken per plane of each volume");
  s_prep->add_option("--seed", prep.seed, "slice sampling seed");
  s_prep->add_option("--threshold-quantile", prep.threshold_quantile, "foreground threshold");
  s_prep->add_option("--margin", prep.margin, "crop margin");
  s_prep->add_option("--snr-min", prep.snr_min, "minimum foreground SNR");
  s_prep->add_option("--entropy-min", prep.entropy_min, "minimum histogram entropy (bits)");

  PretrainArgs pre;
  auto* s_pre = app.add_subcommand("pretrain", "self-distillation pre-training");
  s_pre->add_option("--config", pre.config, "training config (JSON)");
  s_pre->add_option("--manifest", pre.manifest, "corpus manifest")->required();
  s_pre->add_option("--out", pre.out, "output directory")->required();
  s_pre->add_option("--resume", pre.resume, "checkpoint to resume from");
  s_pre->add_option("--stop-at", pre.stop_at, "stop once this iteration is reached");
  s_pre->add_option("overrides", pre.overrides, "key=value config overrides");

  DownstreamArgs probe;
  auto* s_probe = app.add_subcommand("probe", "linear probe on frozen features");
  add_downstream_common(s_probe, probe);
  s_probe->add_option("--layers", probe.layers, "average [CLS] over the last 1 or 4 blocks");
  s_probe->add_option("--max-iter", probe.max_iter, "solver iteration budget");

  DownstreamArgs seg;
  auto* s_seg = app.add_subcommand("segment", "segmentation head on a frozen backbone");
  add_downstream_common(s_seg, seg);
  s_seg->add_option("--head", seg.head, "linear or unetr")->check(CLI::IsMember({"linear", "unetr"}));
  s_seg->add_option("--feature-size", seg.feature_size, "UNETR base width");
  add_seg_options(s_seg, seg);

  DownstreamArgs adapt;
  auto* s_adapt = app.add_subcommand("adapt", "adapter fine-tuning on a frozen backbone");
  add_downstream_common(s_adapt, adapt);
  s_adapt->add_option("--mode", adapt.mode, "classify or segment")->check(CLI::IsMember({"classify", "segment"}));
  s_adapt->add_option("--iterations", adapt.iterations, "classifier iterations per grid cell");
  s_adapt->add_option("--spm-channels", adapt.spm_channels, "spatial prior base width");
  add_seg_options(s_adapt, adapt);

  EvalArgs ev;
  auto* s_eval = app.add_subcommand("eval", "benchmark over splits and few-shot subsets");
  s_eval->add_option("--config", ev.config, "benchmark config (JSON)")->required();
  s_eval->add_option("--ckpt", ev.ckpt, "backbone checkpoint");
  s_eval->add_option("--out", ev.out, "output directory")->required();

  InspectArgs ins;
  auto* s_ins = app.add_subcommand("inspect", "attention maps, feature clustering, embedding export");
  s_ins->require_subcommand(1);
  auto add_inspect_common = [&](CLI::App* sub, bool many) {
    auto* o = sub->add_option("--ckpt", ins.ckpts, many ? "checkpoints (repeatable)" : "checkpoint")->required();
    if (!many) o->expected(1);
    sub->add_option("--manifest", ins.manifest, "input manifest")->required();
    sub->add_option("--out", ins.out, "output path")->required();
    sub->add_option("--input-size", ins.input_size, "resize inputs to this many pixels per axis");
  };
  auto* s_attn = s_ins->add_subcommand("attn", "[CLS] attention maps and overlays");
  add_inspect_common(s_attn, true);
  s_attn->add_option("--index", ins.index, "manifest record to visualise");
  s_attn->add_option("--layer", ins.layer, "block index, negative counts from the end");
  s_attn->add_option("--heads", ins.heads, "heads to render (default: first four)");
  s_attn->add_option("--merge", ins.merge, "mean or max")->check(CLI::IsMember({"mean", "max"}));
  auto* s_km = s_ins->add_subcommand("kmeans", "k-means over pixel-level features");
  add_inspect_common(s_km, false);
  s_km->add_option("--index", ins.index, "manifest record to cluster");
  s_km->add_option("--k", ins.k, "clusters");
  s_km->add_option("--seed", ins.seed, "seeding RNG");
  s_km->add_option("--iters", ins.iters, "Lloyd iterations");
  auto* s_exp = s_ins->add_subcommand("export", "write image-level embeddings");
  add_inspect_common(s_exp, false);
  s_exp->add_option("--layers", ins.layers, "average [CLS] over the last 1 or 4 blocks");

  SynthArgs syn;
  auto* s_syn = app.add_subcommand("synth", "write a synthetic corpus or toy task");
  s_syn->add_option("--out", syn.out, "output directory")->required();
  s_syn->add_option("--kind", syn.kind, "pretrain, classification or segmentation");
  s_syn->add_option("--rank", syn.rank, "2 or 3");
  s_syn->add_option("--count", syn.count, "number of samples");
  s_syn->add_option("--size", syn.size, "pixels per axis");
  s_syn->add_option("--seed", syn.seed, "generator seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  log::set_quiet(quiet);

  int status = 0;
  try {
    torch::set_num_threads(1);
    if (*s_prep) status = cmd_prep(prep);
    else if (*s_pre) status = cmd_pretrain(pre);
    else if (*s_probe) status = cmd_probe(probe);
    else if (*s_seg) status = cmd_segment(seg);
    else if (*s_adapt) status = cmd_adapt(adapt);
    else if (*s_eval) status = cmd_eval(ev);
    else if (*s_attn) status = cmd_inspect_attn(ins);
    else if (*s_km) status = cmd_inspect_kmeans(ins);
    else if (*s_exp) status = cmd_inspect_export(ins);
    else if (*s_syn) status = cmd_synth(syn);
  } catch (const UsageError& e) {
    log::error(std::string("usage: ") + e.what());
    status = 1;
  } catch (const NumericError& e) {
    log::error(std::string("numeric failure: ") + e.what());
    status = 3;
  } catch (const DataError& e) {
    log::error(std::string("data error: ") + e.what());
    status = 2;
  } catch (const nlohmann::json::exception& e) {
    log::error(std::string("config error: ") + e.what());
    status = 1;
  } catch (const c10::Error& e) {
    log::error(std::string("tensor error: ") + e.what_without_backtrace());
    status = 2;
  } catch (const std::exception& e) {
    log::error(std::string("error: ") + e.what());
    status = 2;
  }
  log::close_run_log();
  return status;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<std::string> storage{"radvit"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& s : storage) argv.push_back(s.data());
  argv.push_back(nullptr);
  return run_cli(static_cast<int>(storage.size()), argv.data());
}

}  // namespace radvit
