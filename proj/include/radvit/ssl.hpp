#pragma once

/**
 * @file ssl.hpp
 * @brief Self-distillation objectives and the teacher/student training step.
 *
 * The student sees every view (global views with masked tokens); the EMA
 * teacher sees the unmasked global views. Image-level targets come from the
 * [CLS] token, patch-level targets from the teacher's tokens at the positions
 * masked in the student's input.
 */

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "radvit/augment.hpp"
#include "radvit/backbone.hpp"
#include "radvit/checkpoint.hpp"

namespace radvit {

struct HeadConfig {
  int64_t prototypes = 65536;
  int64_t bottleneck_dim = 256;
  int64_t hidden_dim = 2048;
  int64_t layers = 3;

  bool operator==(const HeadConfig&) const = default;
};

/// Three-layer MLP to a bottleneck, L2 normalisation, then cosine similarity
/// against L2-normalised prototype vectors. The prototype layer has no bias.
class PrototypeHeadImpl : public torch::nn::Module {
 public:
  PrototypeHeadImpl(int64_t in_dim, HeadConfig cfg);

  /// (..., in_dim) -> (..., prototypes). Throws NumericError on non-finite input.
  torch::Tensor forward(const torch::Tensor& x);
  /// MLP output before normalisation.
  torch::Tensor bottleneck(const torch::Tensor& x);
  /// Prototype stage alone: normalise `z` and score it against every prototype.
  torch::Tensor prototype_logits(const torch::Tensor& z);

  const HeadConfig& config() const { return cfg_; }

  torch::nn::Sequential mlp{nullptr};
  torch::Tensor prototypes;  // (prototypes, bottleneck_dim)

 private:
  HeadConfig cfg_;
};
TORCH_MODULE(PrototypeHead);

/// softmax(logits / tau) over the last axis. Throws UsageError for tau <= 0.
torch::Tensor student_distribution(const torch::Tensor& logits, double tau);
torch::Tensor student_log_distribution(const torch::Tensor& logits, double tau);

/// Teacher targets for a (B, K) batch of logits: exp(logits / tau) followed by
/// `iters` rounds of prototype-then-sample normalisation. Rows sum to 1. A
/// single row reduces to the plain softmax.
torch::Tensor sinkhorn_center(const torch::Tensor& logits, double tau, int64_t iters);

/// sum_k -p_k log q_k over the last axis, with 0 log 0 taken as 0.
torch::Tensor cross_entropy_rows(const torch::Tensor& p, const torch::Tensor& log_q);

/// Mean of H(teacher[x], student[x']) over every global x and every view
/// x' != x, and over the batch. Student views list the globals first, in the
/// teacher's order. Each tensor is (B, K).
torch::Tensor image_level_loss(const std::vector<torch::Tensor>& teacher_probs,
                               const std::vector<torch::Tensor>& student_log_probs);

/// Mean over masked tokens of H(teacher_j, student_j). Tensors are (B, N, K),
/// `mask` is (B, N) bool. An empty mask yields 0 and a logged warning.
torch::Tensor patch_level_loss(const torch::Tensor& teacher_probs, const torch::Tensor& student_log_probs,
                               const torch::Tensor& mask);

/// lambda * teacher + (1 - lambda) * student.
torch::Tensor ema(double lambda, const torch::Tensor& teacher, const torch::Tensor& student);

/// In-place EMA of every parameter of `teacher` toward `student`. Parameters
/// are matched by name and must agree in shape.
void ema_update(torch::nn::Module& teacher, const torch::nn::Module& student, double lambda);

struct ScheduleConfig {
  double lr_start = 0.0;
  double lr_peak = 1e-3;
  double lr_final = 1e-6;
  int64_t warmup_iters = 12500;
  int64_t total_iters = 125000;
  double weight_decay = 0.04;
  int64_t batch_size = 2048;
  double tau_student = 0.1;
  double tau_teacher = 0.07;
  double momentum_start = 0.994;
  double momentum_final = 1.0;

  void validate() const;
};

/// Linear warmup from start to peak, cosine decay from peak to final.
double lr_at(int64_t iter, const ScheduleConfig& s);
/// Cosine ramp from momentum_start to momentum_final over total_iters.
double momentum_at(int64_t iter, const ScheduleConfig& s);

/// Adam with decoupled weight decay. Decay applies to matrices and kernels
/// only; tokens, positional tables, biases and norm gains are exempt.
class AdamW {
 public:
  AdamW(std::vector<std::pair<std::string, torch::Tensor>> params, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);

  void zero_grad();
  void step(double lr, double weight_decay);
  int64_t steps() const { return steps_; }

  void save(Checkpoint& ckpt, const std::string& prefix) const;
  void load(const Checkpoint& ckpt, const std::string& prefix);

  static bool decays(const std::string& name, const torch::Tensor& p);

 private:
  struct Slot {
    std::string name;
    torch::Tensor param, m, v;
    bool decay;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_;
  int64_t steps_ = 0;
};

struct EngineConfig {
  BackboneConfig backbone;
  HeadConfig dino_head;
  HeadConfig ibot_head;
  bool shared_head = false;
  ScheduleConfig schedule;
  int64_t sinkhorn_iters = 3;
  bool centering = true;  // false: plain teacher softmax
  double clip_grad = 3.0;  // <= 0 disables clipping
  double image_weight = 1.0;
  double patch_weight = 1.0;
};

/// Backbone plus the image-level head and the patch-level head.
class SSLNetworkImpl : public torch::nn::Module {
 public:
  SSLNetworkImpl(const BackboneConfig& backbone, const HeadConfig& dino, const HeadConfig& ibot, bool shared);

  PrototypeHead& patch_head() { return shared_ ? dino_head : ibot_head; }

  VisionTransformer backbone{nullptr};
  PrototypeHead dino_head{nullptr};
  PrototypeHead ibot_head{nullptr};  // null when the heads are shared

 private:
  bool shared_;
};
TORCH_MODULE(SSLNetwork);

/// Views of a batch stacked per view slot.
struct ViewBatch {
  std::vector<torch::Tensor> globals;  // each (B, 1, S...)
  std::vector<torch::Tensor> locals;
  std::vector<torch::Tensor> masks;  // each (B, N) bool, one per global view

  int64_t batch_size() const;
  ViewBatch to(torch::ScalarType dtype) const;
};

ViewBatch collate(const std::vector<ViewSet>& views);

struct LossParts {
  torch::Tensor total, image, patch;
  torch::Tensor teacher_cls_probs;  // (n_global * B, K_p)
  int64_t masked_tokens = 0;
};

/// Forward both networks and evaluate the combined objective. Gradients flow
/// into the student only.
LossParts compute_losses(SSLNetwork& student, SSLNetwork& teacher, const ViewBatch& batch, const EngineConfig& cfg);

/// Entropy (nats) of the batch-mean distribution and mean per-row entropy.
std::pair<double, double> distribution_entropy(const torch::Tensor& probs);

struct StepReport {
  int64_t iteration = 0;
  double total = 0.0, image = 0.0, patch = 0.0;
  double lr = 0.0, weight_decay = 0.0, momentum = 0.0;
  double teacher_entropy = 0.0;      // entropy of the mean teacher distribution
  double teacher_row_entropy = 0.0;  // mean entropy of individual rows
  double grad_norm = 0.0;

  nlohmann::json to_json() const;
};

struct TeacherStudentState {
  EngineConfig cfg;
  SSLNetwork student{nullptr};
  SSLNetwork teacher{nullptr};
  std::unique_ptr<AdamW> optimizer;
  int64_t iteration = 0;

  /// Seeds torch, builds the student and copies it into the teacher.
  static TeacherStudentState create(const EngineConfig& cfg, uint64_t seed);

  double momentum() const { return momentum_at(iteration, cfg.schedule); }

  void save(Checkpoint& ckpt) const;
  void load(const Checkpoint& ckpt);
};

/// One optimisation step: losses, backward, clipping, AdamW on the student,
/// EMA on the teacher, iteration + 1. Throws NumericError on a non-finite loss.
StepReport train_step(TeacherStudentState& state, const ViewBatch& batch);

}  // namespace radvit
