// Runs the end-to-end acceptance checks and prints one PASS/FAIL line each.
// Exit status is the number of failed checks.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "radvit/adapters.hpp"
#include "radvit/augment.hpp"
#include "radvit/backbone.hpp"
#include "radvit/checkpoint.hpp"
#include "radvit/config.hpp"
#include "radvit/harness.hpp"
#include "radvit/introspect.hpp"
#include "radvit/log.hpp"
#include "radvit/pretrain.hpp"
#include "radvit/radprep.hpp"
#include "radvit/ssl.hpp"
#include "radvit/synth.hpp"

using namespace radvit;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* spec, auto... v) {
  char buf[512];
  std::snprintf(buf, sizeof buf, spec, v...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct ScratchDir {
  fs::path path;
  ScratchDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("radvit_accept_" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

BackboneConfig toy_backbone(int rank, int64_t patch, int64_t embed, int64_t heads, int64_t blocks, int64_t grid) {
  BackboneConfig c;
  c.variant = "toy";
  c.embed_dim = embed;
  c.heads = heads;
  c.blocks = blocks;
  c.patch_size = patch;
  c.input_rank = rank;
  c.base_grid = grid;
  return c;
}

// ---------------------------------------------------------------------------
// 1. Gradient fidelity

Outcome gradient_fidelity() {
  const auto t0 = std::chrono::steady_clock::now();
  EngineConfig cfg;
  cfg.backbone = toy_backbone(2, 4, 8, 2, 2, 4);
  cfg.dino_head = {16, 8, 16, 3};
  cfg.ibot_head = {16, 8, 16, 3};
  cfg.schedule.total_iters = 10;
  cfg.schedule.warmup_iters = 1;
  auto state = TeacherStudentState::create(cfg, 17);
  state.student->to(torch::kFloat64);
  state.teacher->to(torch::kFloat64);

  torch::manual_seed(18);
  ViewBatch batch;
  for (int g = 0; g < 2; ++g) {
    batch.globals.push_back(torch::rand({2, 1, 16, 16}, torch::kFloat64));
    batch.masks.push_back(torch::rand({2, 16}) < 0.4);
    batch.masks.back()[0][g] = true;
  }
  batch.locals.push_back(torch::rand({2, 1, 8, 8}, torch::kFloat64));

  auto loss = [&] { return compute_losses(state.student, state.teacher, batch, cfg).total; };
  for (auto& p : state.student->parameters()) p.mutable_grad() = torch::Tensor();
  loss().backward();

  std::mt19937_64 rng(5);
  const double h = 1e-6;
  double worst = 0.0, worst_a = 0.0, worst_n = 0.0, worst_3pt = 0.0;
  std::string worst_name;
  int64_t checked = 0;
  torch::NoGradGuard g;
  for (const auto& item : state.student->named_parameters()) {
    auto p = item.value();
    const auto grad = p.grad().defined() ? p.grad().flatten() : torch::zeros({p.numel()}, torch::kFloat64);
    auto flat = p.view({-1});
    for (int s = 0; s < 4 && s < flat.numel(); ++s) {
      const auto i = static_cast<int64_t>(rng() % static_cast<uint64_t>(flat.numel()));
      const double orig = flat[i].item<double>();
      auto at = [&](double offset) {
        flat[i] = orig + offset;
        return loss().item<double>();
      };
      const double up = at(h), down = at(-h), up2 = at(2 * h), down2 = at(-2 * h);
      flat[i] = orig;
      // Five-point stencil. The three-point one is kept for the report: the
      // head's normalisation makes the loss sharply curved at initialisation
      // and its O(h^2) term alone reaches ~1e-3 here.
      const double numeric = (8 * (up - down) - (up2 - down2)) / (12 * h);
      const double three_point = (up - down) / (2 * h);
      const double analytic = grad[i].item<double>();
      auto rel_err = [&](double n) { return std::abs(n - analytic) / std::max({std::abs(n), std::abs(analytic), 1e-8}); };
      worst_3pt = std::max(worst_3pt, rel_err(three_point));
      const double rel = rel_err(numeric);
      if (rel > worst) {
        worst = rel;
        worst_a = analytic;
        worst_n = numeric;
        worst_name = item.key();
      }
      ++checked;
    }
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst <= 1e-3 && secs < 120.0,
          fmt("max relative error %.3g over %lld coordinates (%s: analytic %.6g, numeric %.6g; three-point "
              "stencil %.3g)",
              worst, static_cast<long long>(checked), worst_name.c_str(), worst_a, worst_n, worst_3pt)};
}

// ---------------------------------------------------------------------------
// 2 and 3. Toy pre-training

Corpus toy_corpus_2d() {
  Corpus c;
  c.input_rank = 2;
  for (int64_t i = 0; i < 64; ++i) {
    RadImage img;
    img.pixels = synth_radiograph(48, 72, static_cast<uint64_t>(i));
    c.images.push_back(normalize_image(img));
  }
  return c;
}

Corpus toy_corpus_3d() {
  Corpus c;
  c.input_rank = 3;
  for (int64_t i = 0; i < 64; ++i) {
    VolumeGrid v;
    v.voxels = synth_volume(40, static_cast<uint64_t>(i));
    c.volumes.push_back(normalize_volume(v));
  }
  return c;
}

PretrainResult toy_pretrain(const Corpus& corpus, const TrainConfig& cfg) {
  PretrainOptions opts;
  opts.write_files = false;
  return pretrain(corpus, cfg, opts);
}

double tail_entropy(const PretrainResult& r) {
  double s = 0.0;
  const std::size_t n = std::min<std::size_t>(10, r.history.size());
  for (std::size_t i = r.history.size() - n; i < r.history.size(); ++i) s += r.history[i].teacher_entropy;
  return s / static_cast<double>(n);
}

/// Trailing mean over the 10 steps ending at 1-based iteration `it`.
double smoothed_loss(const PretrainResult& r, int64_t it) {
  double s = 0.0;
  for (int64_t i = it - 10; i < it; ++i) s += r.history[static_cast<std::size_t>(i)].total;
  return s / 10.0;
}

struct ToyRuns {
  PretrainResult centered, plain, volumetric;
  int64_t prototypes = 0;
  double pair_minutes = 0.0;  // centered plus ablated 2D runs
};

ToyRuns& toy_runs() {
  static ToyRuns runs = [] {
    ToyRuns r;
    const auto corpus = toy_corpus_2d();
    auto cfg = preset("toy-2d");
    r.prototypes = cfg.dino_head_prototypes;
    const auto t0 = std::chrono::steady_clock::now();
    r.centered = toy_pretrain(corpus, cfg);
    cfg.centering = false;
    r.plain = toy_pretrain(corpus, cfg);
    r.pair_minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    r.volumetric = toy_pretrain(toy_corpus_3d(), preset("toy-3d"));
    return r;
  }();
  return runs;
}

Outcome anti_collapse() {
  auto& r = toy_runs();
  const double with = tail_entropy(r.centered), without = tail_entropy(r.plain);
  const double floor = 0.5 * std::log(static_cast<double>(r.prototypes));
  return {with >= floor && with > without && r.pair_minutes < 10.0,
          fmt("teacher entropy %.4f with centering vs %.4f without (floor %.4f, 200 iterations, %.1f min)", with,
              without, floor, r.pair_minutes)};
}

Outcome learning_signal() {
  auto& r = toy_runs();
  const double a10 = smoothed_loss(r.centered, 10), a200 = smoothed_loss(r.centered, 200);
  const double b10 = smoothed_loss(r.volumetric, 10), b200 = smoothed_loss(r.volumetric, 200);
  return {a200 < a10 && b200 < b10,
          fmt("2D loss %.4f -> %.4f, 3D loss %.4f -> %.4f (iteration 10 -> 200)", a10, a200, b10, b200)};
}

// ---------------------------------------------------------------------------
// 4. Oracle equivalence

double image_oracle(const std::vector<torch::Tensor>& t, const std::vector<torch::Tensor>& s) {
  double sum = 0.0;
  int terms = 0;
  for (std::size_t x = 0; x < t.size(); ++x) {
    for (std::size_t xp = 0; xp < s.size(); ++xp) {
      if (x == xp) continue;
      const auto a = t[x].contiguous(), b = s[xp].contiguous();
      const double* pa = a.data_ptr<double>();
      const double* pb = b.data_ptr<double>();
      double h = 0.0;
      for (int64_t r = 0; r < a.size(0); ++r)
        for (int64_t c = 0; c < a.size(1); ++c) h -= pa[r * a.size(1) + c] * pb[r * a.size(1) + c];
      sum += h / static_cast<double>(a.size(0));
      ++terms;
    }
  }
  return sum / terms;
}

double patch_oracle(const torch::Tensor& t, const torch::Tensor& s, const torch::Tensor& m) {
  double sum = 0.0;
  int count = 0;
  const auto a = t.contiguous(), b = s.contiguous(), mk = m.contiguous();
  const int64_t bsz = a.size(0), n = a.size(1), k = a.size(2);
  for (int64_t i = 0; i < bsz; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      if (!mk[i][j].item<bool>()) continue;
      for (int64_t c = 0; c < k; ++c) {
        sum -= a.data_ptr<double>()[(i * n + j) * k + c] * b.data_ptr<double>()[(i * n + j) * k + c];
      }
      ++count;
    }
  }
  return sum / count;
}

std::vector<float> percentile_oracle(const std::vector<float>& values) {
  std::vector<float> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const float lo = sorted[std::max<std::size_t>(1, (5 * n + 999) / 1000) - 1];
  const float hi = sorted[std::max<std::size_t>(1, (995 * n + 999) / 1000) - 1];
  std::vector<float> out(n, 0.0f);
  if (!(hi > lo)) return out;
  for (std::size_t i = 0; i < n; ++i) out[i] = (std::clamp(values[i], lo, hi) - lo) / (hi - lo);
  return out;
}

std::vector<float> floats_of(const torch::Tensor& t) {
  const auto c = t.contiguous().to(torch::kFloat32);
  return {c.data_ptr<float>(), c.data_ptr<float>() + c.numel()};
}

Outcome oracle_equivalence() {
  std::mt19937_64 rng(4);
  auto pick = [&](int64_t lo, int64_t hi) { return std::uniform_int_distribution<int64_t>(lo, hi)(rng); };
  torch::manual_seed(4);
  double loss_err = 0.0;
  int instances = 0;
  for (int trial = 0; trial < 120; ++trial) {
    const int64_t k = pick(2, 16), b = pick(1, 3), nl = pick(0, 4);
    std::vector<torch::Tensor> t, s;
    for (int g = 0; g < 2; ++g) t.push_back(torch::softmax(torch::randn({b, k}, torch::kFloat64) * 2, -1));
    for (int64_t v = 0; v < 2 + nl; ++v) s.push_back(torch::log_softmax(torch::randn({b, k}, torch::kFloat64) * 2, -1));
    loss_err = std::max(loss_err, std::abs(image_level_loss(t, s).item<double>() - image_oracle(t, s)));

    const int64_t n = pick(4, 12);
    const auto tp = torch::softmax(torch::randn({b, n, k}, torch::kFloat64) * 2, -1);
    const auto sl = torch::log_softmax(torch::randn({b, n, k}, torch::kFloat64) * 2, -1);
    auto m = torch::rand({b, n}) < 0.4;
    m[0][pick(0, n - 1)] = true;
    loss_err = std::max(loss_err, std::abs(patch_level_loss(tp, sl, m).item<double>() - patch_oracle(tp, sl, m)));
    ++instances;
  }

  int metric_mismatch = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int64_t classes = pick(1, 4);
    const auto pred = torch::randint(0, classes + 1, {pick(1, 9), pick(1, 9)});
    const auto truth = torch::randint(0, classes + 1, pred.sizes());
    const auto m = dice_iou(pred, truth, classes);
    const auto p = pred.flatten(), y = truth.flatten();
    for (int64_t c = 1; c <= classes; ++c) {
      int64_t tp = 0, fp = 0, fn = 0;
      for (int64_t i = 0; i < p.numel(); ++i) {
        const bool a = p[i].item<int64_t>() == c, r = y[i].item<int64_t>() == c;
        tp += a && r;
        fp += a && !r;
        fn += !a && r;
      }
      const double dice = tp + fp + fn == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
      const double iou = tp + fp + fn == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      metric_mismatch += m.dice[static_cast<std::size_t>(c - 1)] != dice;
      metric_mismatch += m.iou[static_cast<std::size_t>(c - 1)] != iou;
    }

    std::vector<int64_t> pl, yl;
    int64_t hits = 0;
    for (int64_t i = 0; i < p.numel(); ++i) {
      pl.push_back(p[i].item<int64_t>());
      yl.push_back(y[i].item<int64_t>());
      hits += pl.back() == yl.back();
    }
    metric_mismatch += accuracy(pl, yl) != static_cast<double>(hits) / static_cast<double>(pl.size());

    const int64_t pts = pick(1, 12), dim = pick(2, 3);
    const auto a = torch::randn({pts, dim}, torch::kFloat64) * 3, r = torch::randn({pts, dim}, torch::kFloat64) * 3;
    const auto radii = default_sdr_radii();
    const auto lm = mre_sdr(a, r, radii);
    std::vector<double> dist;
    double total = 0.0;
    for (int64_t i = 0; i < pts; ++i) {
      double sq = 0.0;
      for (int64_t d = 0; d < dim; ++d) {
        const double e = a[i][d].item<double>() - r[i][d].item<double>();
        sq += e * e;
      }
      dist.push_back(std::sqrt(sq));
      total += dist.back();
    }
    metric_mismatch += lm.mre != total / static_cast<double>(pts);
    for (std::size_t j = 0; j < radii.size(); ++j) {
      int64_t within = 0;
      for (double d : dist) within += d <= radii[j];
      metric_mismatch += lm.sdr[j] != static_cast<double>(within) / static_cast<double>(pts);
    }
  }

  int volume_mismatch = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    VolumeGrid v;
    v.voxels = torch::randn({pick(1, 12), pick(1, 12), pick(1, 12)}) * 300 + static_cast<double>(pick(-500, 500));
    volume_mismatch += floats_of(normalize_volume(v).voxels) != percentile_oracle(floats_of(v.voxels));
  }
  return {loss_err <= 1e-6 && metric_mismatch == 0 && volume_mismatch == 0,
          fmt("loss max error %.3g over %d instances; %d metric and %d volume mismatches", loss_err, instances,
              metric_mismatch, volume_mismatch)};
}

// ---------------------------------------------------------------------------
// 5. Config fidelity

Outcome config_fidelity() {
  std::vector<std::string> bad;
  auto expect = [&](bool ok, const char* what) {
    if (!ok) bad.emplace_back(what);
  };
  const auto b = preset("2d-b");
  expect(b.global_crop_size == 224 && b.local_crop_size == 98, "2D crop sizes");
  expect(b.global_crop_number == 2 && b.local_crop_number == 8, "2D crop numbers");
  const auto v = preset("3d-b");
  expect(v.global_crop_size == 96 && v.local_crop_size == 48, "3D crop sizes");
  expect(b.masking_ratio == std::array<double, 2>{0.1, 0.5}, "mask ratio");
  expect(b.dino_head_prototypes == 65536 && b.dino_head_dim == 256, "image head");
  expect(b.ibot_head_prototypes == 65536 && b.ibot_head_dim == 256, "patch head");
  expect(b.batch_size == 2048, "batch size");
  expect(b.total_iterations == 125000 && b.warmup_iterations == 12500, "iterations");
  expect(b.learning_rate == std::array<double, 3>{0.0, 0.001, 1e-6}, "learning rate");
  expect(b.weight_decay == 0.04 && !b.shared_head, "decay / shared head");
  const auto vb = make_variant("B"), vl = make_variant("L"), vg = make_variant("G");
  expect(vb.embed_dim == 768 && vb.heads == 12 && vb.blocks == 12, "variant B");
  expect(vl.embed_dim == 1024 && vl.heads == 16 && vl.blocks == 24, "variant L");
  expect(vg.embed_dim == 1536 && vg.heads == 24 && vg.blocks == 40, "variant G");
  const double params = static_cast<double>(parameter_count(vb));
  const double rel = std::abs(params - 86e6) / 86e6;
  expect(rel <= 0.05, "ViT-B parameter count");
  std::string failed;
  for (const auto& s : bad) failed += " " + s + ";";
  return {bad.empty(), fmt("ViT-B %.2fM parameters (%.2f%% from 86M)%s%s", params / 1e6, 100 * rel,
                           bad.empty() ? "" : ", wrong:", failed.c_str())};
}

// ---------------------------------------------------------------------------
// 6. Structural identities

Outcome structural_identities() {
  std::vector<std::string> bad;
  torch::manual_seed(6);
  Injector inj(32, 4);
  const auto tokens = torch::randn({2, 49, 32}), sp = torch::randn({2, 80, 32});
  if (!torch::equal(inj->forward(tokens, sp), tokens)) bad.emplace_back("injector");

  EngineConfig cfg;
  cfg.backbone = toy_backbone(2, 4, 16, 2, 2, 4);
  cfg.dino_head = {32, 8, 16, 3};
  cfg.ibot_head = {32, 8, 16, 3};
  SSLNetwork teacher(cfg.backbone, cfg.dino_head, cfg.ibot_head, false);
  SSLNetwork student(cfg.backbone, cfg.dino_head, cfg.ibot_head, false);
  const auto th = parameter_hash(*teacher), sh = parameter_hash(*student);
  ema_update(*teacher, *student, 1.0);
  if (parameter_hash(*teacher) != th) bad.emplace_back("ema 1");
  ema_update(*teacher, *student, 0.0);
  if (parameter_hash(*teacher) != sh) bad.emplace_back("ema 0");

  if (unetr_layer_taps(12) != std::vector<int64_t>{3, 6, 9, 12}) bad.emplace_back("taps");
  const auto c2 = spm_token_count({224, 224}), c3 = spm_token_count({96, 96, 96});
  SpatialPriorModule spm2(2, 1, 16, 8), spm3(3, 1, 16, 4);
  torch::NoGradGuard g;
  const auto m2 = spm2->forward(torch::rand({1, 1, 224, 224})).tokens.size(1);
  const auto m3 = spm3->forward(torch::rand({1, 1, 96, 96, 96})).tokens.size(1);
  if (c2 != 1029 || m2 != 1029) bad.emplace_back("spm 2D");
  if (c3 != 1971 || m3 != 1971) bad.emplace_back("spm 3D");
  std::string failed;
  for (const auto& s : bad) failed += " " + s;
  return {bad.empty(), fmt("spm tokens %lld/%lld (module %lld/%lld)%s%s", static_cast<long long>(c2),
                           static_cast<long long>(c3), static_cast<long long>(m2), static_cast<long long>(m3),
                           bad.empty() ? ", injector/ema/taps exact" : ", broken:", failed.c_str())};
}

// ---------------------------------------------------------------------------
// 7. Toy downstream

torch::Tensor rows(const torch::Tensor& x, const std::vector<int64_t>& idx) {
  return x.index_select(0, torch::tensor(idx, torch::kInt64));
}

double segmentation_dice(VisionTransformer& vit, int rank, int64_t count, const SegTrainOptions& opts) {
  std::vector<torch::Tensor> xs, ms;
  for (int64_t i = 0; i < count; ++i) {
    const auto s = bright_box(rank, 32, static_cast<uint64_t>(1000 + i));
    xs.push_back((s.image / 255.0).clamp(0.0, 1.0).unsqueeze(0));
    ms.push_back(s.mask);
  }
  const auto images = torch::stack(xs), masks = torch::stack(ms);
  const auto split = make_split(count, 0, 0.7);
  auto r = finetune_segmentation(vit, rows(images, split.train), rows(masks, split.train), 1, opts);
  if (r.backbone_hash_before != r.backbone_hash_after) return -1.0;
  return dice_iou(r.predict(rows(images, split.test)), rows(masks, split.test), 1).mdice;
}

Outcome toy_downstream() {
  using clock = std::chrono::steady_clock;
  auto minutes = [](clock::time_point t0) {
    return std::chrono::duration<double>(clock::now() - t0).count() / 60.0;
  };

  auto t0 = clock::now();
  torch::manual_seed(7);
  VisionTransformer probe_vit(toy_backbone(2, 4, 32, 2, 4, 8));
  freeze(*probe_vit);
  std::vector<torch::Tensor> xs;
  std::vector<int64_t> labels;
  for (int64_t i = 0; i < 40; ++i) {
    xs.push_back((blob_image(32, i % 2, static_cast<uint64_t>(i)) / 255.0).clamp(0.0, 1.0).unsqueeze(0));
    labels.push_back(i % 2);
  }
  const auto emb = Matrix::from_tensor(embed_all(probe_vit, torch::stack(xs), 1));
  const auto wide = fit_logistic(emb, labels, 2, ProbeGrid::standard().Cs.back());
  const double probe_acc = accuracy(wide.predict(emb), labels);
  const double probe_min = minutes(t0);

  t0 = clock::now();
  SegTrainOptions lin;
  lin.head = "linear";
  lin.lr = 1e-4;
  lin.epochs = 300;
  lin.batch_size = 8;
  torch::manual_seed(8);
  VisionTransformer vit2(toy_backbone(2, 4, 32, 2, 4, 8));
  const double dice2 = segmentation_dice(vit2, 2, 48, lin);
  const double lin_min = minutes(t0);

  t0 = clock::now();
  SegTrainOptions unetr;
  unetr.head = "unetr";
  unetr.lr = 1e-4;
  unetr.epochs = 40;
  unetr.batch_size = 4;
  unetr.feature_size = 16;
  torch::manual_seed(9);
  VisionTransformer vit3(toy_backbone(3, 16, 32, 2, 4, 2));
  const double dice3 = segmentation_dice(vit3, 3, 32, unetr);
  const double unetr_min = minutes(t0);

  const bool pass = probe_acc == 1.0 && dice2 >= 0.7 && dice3 >= 0.7 && probe_min < 15 && lin_min < 15 &&
                    unetr_min < 15;
  return {pass, fmt("probe train acc %.3f (%.1f min); linear head Dice %.3f (%.1f min); UNETR Dice %.3f (%.1f min)",
                    probe_acc, probe_min, dice2, lin_min, dice3, unetr_min)};
}

// ---------------------------------------------------------------------------
// 8. Protocol determinism

class RecordingEvaluator : public TaskEvaluator {
 public:
  explicit RecordingEvaluator(TaskEvaluator& inner) : inner_(inner) {}
  std::map<std::size_t, std::set<std::vector<int64_t>>> tests_by_train_size;

  int64_t size(const TaskSpec& task) override { return inner_.size(task); }
  std::map<std::string, double> evaluate(const TaskSpec& task, std::span<const int64_t> train,
                                         std::span<const int64_t> test, uint64_t seed) override {
    tests_by_train_size[train.size()].insert({test.begin(), test.end()});
    return inner_.evaluate(task, train, test, seed);
  }

 private:
  TaskEvaluator& inner_;
};

Outcome protocol_determinism() {
  ScratchDir dir;
  const auto task_json = write_classification_task(dir.path / "task", 24, 32, 3);
  BenchmarkConfig cfg;
  cfg.tasks = {TaskSpec::from_json(read_json_file(task_json), task_json.parent_path())};
  cfg.split_seeds = {0, 1, 2, 3, 4};
  cfg.k_percents = {25, 50, 75, 100};
  cfg.resamples = 2;
  cfg.evaluator = {{"input_size", 32}, {"probe_max_iter", 200}};

  std::vector<std::map<std::size_t, std::set<std::vector<int64_t>>>> seen;
  for (const char* run : {"a", "b"}) {
    torch::manual_seed(10);
    VisionTransformer vit(toy_backbone(2, 4, 32, 2, 4, 8));
    BackboneEvaluator inner(vit, cfg.evaluator);
    RecordingEvaluator rec(inner);
    run_benchmark(cfg, rec, dir.path / run);
    seen.push_back(rec.tests_by_train_size);
  }
  int differing = 0;
  for (const char* f : {"report.jsonl", "summary.csv", "summary.txt", "report_meta.json"}) {
    differing += slurp(dir.path / "a" / f) != slurp(dir.path / "b" / f);
  }
  std::set<std::vector<int64_t>> all;
  bool constant = seen[0].size() == cfg.k_percents.size();
  for (const auto& [n, tests] : seen[0]) {
    constant = constant && tests == seen[0].begin()->second;
    all.insert(tests.begin(), tests.end());
  }
  constant = constant && all.size() == cfg.split_seeds.size();
  return {differing == 0 && constant,
          fmt("%d differing report files; %zu distinct test sets across %zu k values", differing, all.size(),
              seen[0].size())};
}

// ---------------------------------------------------------------------------
// 9. Masking bounds

std::string verify_blocks(const MaskSpec& m, double lo, double hi) {
  if (m.ratio < lo || m.ratio > hi) return "ratio out of range";
  if (m.count() != m.masked.sum().item<int64_t>()) return "count mismatch";
  auto rebuilt = torch::zeros(m.grid, torch::kBool);
  for (const auto& b : m.boxes) {
    auto view = rebuilt;
    for (std::size_t i = 0; i < m.grid.size(); ++i) {
      if (b.lo[i] < 0 || b.extent[i] < 1 || b.lo[i] + b.extent[i] > m.grid[i]) return "box outside grid";
      view = view.narrow(static_cast<int64_t>(i), b.lo[i], b.extent[i]);
    }
    view.fill_(true);
  }
  if (!torch::equal(rebuilt, m.masked)) return "boxes do not reproduce the mask";
  return {};
}

Outcome masking_bounds() {
  Rng rng(9);
  int failures = 0;
  double lo_seen = 1.0, hi_seen = 0.0;
  std::string first;
  for (int i = 0; i < 10000; ++i) {
    const auto grid = i % 2 == 0 ? std::vector<int64_t>{16, 16} : std::vector<int64_t>{6, 6, 6};
    const auto m = blockwise_mask(grid, {0.1, 0.5}, rng);
    const auto err = verify_blocks(m, 0.1, 0.5);
    lo_seen = std::min(lo_seen, m.ratio);
    hi_seen = std::max(hi_seen, m.ratio);
    if (!err.empty()) {
      if (failures++ == 0) first = err;
    }
  }
  return {failures == 0, fmt("10000 draws, ratio range [%.4f, %.4f], %d failures%s%s", lo_seen, hi_seen, failures,
                             first.empty() ? "" : ": ", first.c_str())};
}

// ---------------------------------------------------------------------------
// 10. Attention validity

Outcome attention_validity() {
  double sum_err = 0.0, merge_err = 0.0;
  int maps = 0;
  torch::manual_seed(10);
  for (int rank : {2, 3}) {
    VisionTransformer vit(rank == 2 ? toy_backbone(2, 4, 32, 4, 4, 8) : toy_backbone(3, 8, 32, 4, 4, 4));
    for (int trial = 0; trial < 5; ++trial) {
      const auto x = rank == 2 ? torch::rand({1, 32, 48}) : torch::rand({1, 32, 32, 24});
      for (int64_t layer = 0; layer < 4; ++layer) {
        AttentionOptions opts;
        opts.layer = layer;
        const auto m = cls_attention(vit, x, opts);
        for (int64_t h = 0; h < m.heads.size(0); ++h) {
          sum_err = std::max(sum_err, std::abs(m.heads[h].sum().item<double>() - 1.0));
          ++maps;
        }
        merge_err = std::max(merge_err, (m.merged - m.heads.mean(0)).abs().max().item<double>());
      }
    }
  }
  return {sum_err <= 1e-5 && merge_err <= 1e-6,
          fmt("%d maps, max |sum - 1| %.3g, max |merged - mean| %.3g", maps, sum_err, merge_err)};
}

}  // namespace

// Optional arguments select checks by number; no arguments runs all ten.
int main(int argc, char** argv) {
  log::set_quiet(true);
  torch::set_num_threads(1);
  const std::vector<std::pair<const char*, std::function<Outcome()>>> checks{
      {"1 gradient fidelity", gradient_fidelity},
      {"2 anti-collapse", anti_collapse},
      {"3 learning signal", learning_signal},
      {"4 oracle equivalence", oracle_equivalence},
      {"5 config fidelity", config_fidelity},
      {"6 structural identities", structural_identities},
      {"7 toy downstream", toy_downstream},
      {"8 protocol determinism", protocol_determinism},
      {"9 masking bounds", masking_bounds},
      {"10 attention validity", attention_validity},
  };
  std::vector<std::string> wanted(argv + 1, argv + argc);
  int failed = 0, ran = 0;
  for (const auto& [name, fn] : checks) {
    const std::string id(name, std::strchr(name, ' '));
    if (!wanted.empty() && std::find(wanted.begin(), wanted.end(), id) == wanted.end()) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    log::set_quiet(true);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("[%s] %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str(), secs);
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  std::printf("%d of %d checks passed\n", ran - failed, ran);
  return failed;
}
