#include "radvit/ssl.hpp"

#include <cmath>
#include <map>
#include <numbers>
#include <sstream>

#include "radvit/error.hpp"
#include "radvit/log.hpp"

namespace radvit {
namespace {

namespace F = torch::nn::functional;

void check_finite(const torch::Tensor& x, const char* what) {
  if (!torch::isfinite(x).all().item<bool>()) throw NumericError(std::string(what) + ": non-finite values");
}

void check_tau(double tau) {
  if (!(tau > 0.0)) throw UsageError("temperature must be positive, got " + std::to_string(tau));
}

torch::Tensor teacher_targets(const torch::Tensor& logits, const EngineConfig& cfg) {
  const double tau = cfg.schedule.tau_teacher;
  if (cfg.centering) return sinkhorn_center(logits, tau, cfg.sinkhorn_iters);
  return torch::softmax(logits / tau, -1);
}

}  // namespace

PrototypeHeadImpl::PrototypeHeadImpl(int64_t in_dim, HeadConfig cfg) : cfg_(cfg) {
  if (cfg_.layers < 1 || cfg_.prototypes < 1 || cfg_.bottleneck_dim < 1 || cfg_.hidden_dim < 1) {
    throw UsageError("head: layers, prototypes and widths must be positive");
  }
  mlp = register_module("mlp", torch::nn::Sequential());
  int64_t width = in_dim;
  for (int64_t i = 0; i < cfg_.layers; ++i) {
    const bool last = i + 1 == cfg_.layers;
    const int64_t out = last ? cfg_.bottleneck_dim : cfg_.hidden_dim;
    torch::nn::Linear lin(width, out);
    {
      torch::NoGradGuard g;
      lin->weight.normal_(0.0, 0.02).clamp_(-0.04, 0.04);
      lin->bias.zero_();
    }
    mlp->push_back(lin);
    if (!last) mlp->push_back(torch::nn::GELU());
    width = out;
  }
  prototypes = register_parameter("prototypes",
                                  torch::randn({cfg_.prototypes, cfg_.bottleneck_dim}).mul_(0.02));
}

torch::Tensor PrototypeHeadImpl::bottleneck(const torch::Tensor& x) {
  check_finite(x, "head input");
  return mlp->forward(x);
}

torch::Tensor PrototypeHeadImpl::prototype_logits(const torch::Tensor& z) {
  auto zn = F::normalize(z, F::NormalizeFuncOptions().p(2).dim(-1).eps(1e-12));
  auto pn = F::normalize(prototypes.to(z.dtype()), F::NormalizeFuncOptions().p(2).dim(-1).eps(1e-12));
  return torch::matmul(zn, pn.t());
}

torch::Tensor PrototypeHeadImpl::forward(const torch::Tensor& x) { return prototype_logits(bottleneck(x)); }

torch::Tensor student_distribution(const torch::Tensor& logits, double tau) {
  check_tau(tau);
  return torch::softmax(logits / tau, -1);
}

torch::Tensor student_log_distribution(const torch::Tensor& logits, double tau) {
  check_tau(tau);
  return torch::log_softmax(logits / tau, -1);
}

torch::Tensor sinkhorn_center(const torch::Tensor& logits, double tau, int64_t iters) {
  check_tau(tau);
  if (logits.dim() != 2 || logits.size(0) < 1) throw DataError("sinkhorn: expected a non-empty (B, K) matrix");
  if (iters < 1) throw UsageError("sinkhorn: iterations must be >= 1");
  check_finite(logits, "sinkhorn logits");
  torch::NoGradGuard g;
  const auto b = logits.size(0);
  const auto k = logits.size(1);
  if (b == 1) return torch::softmax(logits / tau, -1);
  auto q = ((logits - logits.max()) / tau).exp();
  q = q / q.sum();
  for (int64_t i = 0; i < iters; ++i) {
    q = q / q.sum(0, true) / static_cast<double>(k);
    q = q / q.sum(1, true) / static_cast<double>(b);
  }
  return q * static_cast<double>(b);
}

torch::Tensor cross_entropy_rows(const torch::Tensor& p, const torch::Tensor& log_q) {
  auto terms = torch::where(p > 0, p * log_q, torch::zeros({}, log_q.options()));
  return -terms.sum(-1);
}

torch::Tensor image_level_loss(const std::vector<torch::Tensor>& teacher_probs,
                               const std::vector<torch::Tensor>& student_log_probs) {
  if (teacher_probs.empty() || student_log_probs.size() < teacher_probs.size()) {
    throw DataError("image-level loss: " + std::to_string(teacher_probs.size()) + " teacher views vs " +
                    std::to_string(student_log_probs.size()) + " student views");
  }
  torch::Tensor sum;
  int64_t terms = 0;
  for (std::size_t i = 0; i < teacher_probs.size(); ++i) {
    for (std::size_t j = 0; j < student_log_probs.size(); ++j) {
      if (i == j) continue;
      if (!teacher_probs[i].sizes().equals(student_log_probs[j].sizes())) {
        throw DataError("image-level loss: view shape mismatch");
      }
      auto term = cross_entropy_rows(teacher_probs[i], student_log_probs[j]).mean();
      sum = sum.defined() ? sum + term : term;
      ++terms;
    }
  }
  if (terms == 0) throw DataError("image-level loss: no cross-view pairs");
  return sum / static_cast<double>(terms);
}

torch::Tensor patch_level_loss(const torch::Tensor& teacher_probs, const torch::Tensor& student_log_probs,
                               const torch::Tensor& mask) {
  if (!teacher_probs.sizes().equals(student_log_probs.sizes()) || teacher_probs.dim() != 3 || mask.dim() != 2 ||
      mask.size(0) != teacher_probs.size(0) || mask.size(1) != teacher_probs.size(1)) {
    throw DataError("patch-level loss: token grids are not aligned");
  }
  const auto m = mask.to(torch::kBool);
  if (m.sum().item<int64_t>() == 0) {
    log::warning("patch-level loss: empty mask, loss defined as 0");
    return torch::zeros({}, student_log_probs.options());
  }
  return cross_entropy_rows(teacher_probs.index({m}), student_log_probs.index({m})).mean();
}

torch::Tensor ema(double lambda, const torch::Tensor& teacher, const torch::Tensor& student) {
  return teacher * lambda + student * (1.0 - lambda);
}

void ema_update(torch::nn::Module& teacher, const torch::nn::Module& student, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw UsageError("ema momentum must be in [0, 1]");
  auto t = teacher.named_parameters();
  const auto s = student.named_parameters();
  if (t.size() != s.size()) throw DataError("ema: teacher and student differ in parameter count");
  torch::NoGradGuard g;
  for (auto& item : t) {
    const auto* src = s.find(item.key());
    if (!src) throw DataError("ema: student has no parameter " + item.key());
    auto& dst = item.value();
    if (!dst.sizes().equals(src->sizes())) throw DataError("ema: shape mismatch for " + item.key());
    if (lambda == 1.0) continue;
    if (lambda == 0.0) {
      dst.copy_(*src);
    } else {
      dst.mul_(lambda).add_(*src, 1.0 - lambda);
    }
  }
}

void ScheduleConfig::validate() const {
  if (lr_start > lr_peak) throw UsageError("schedule: lr start exceeds peak");
  if (warmup_iters < 0 || total_iters < 0 || warmup_iters > total_iters) {
    throw UsageError("schedule: need 0 <= warmup_iterations <= total_iterations");
  }
  if (batch_size < 1) throw UsageError("schedule: batch_size must be positive");
  check_tau(tau_student);
  check_tau(tau_teacher);
  if (momentum_start < 0.0 || momentum_final > 1.0 || momentum_start > momentum_final) {
    throw UsageError("schedule: momentum must satisfy 0 <= start <= final <= 1");
  }
}

double lr_at(int64_t iter, const ScheduleConfig& s) {
  if (iter < 0 || iter > s.total_iters) {
    throw UsageError("lr_at: iteration " + std::to_string(iter) + " outside [0, " + std::to_string(s.total_iters) +
                     "]");
  }
  if (iter < s.warmup_iters) {
    return s.lr_start + (s.lr_peak - s.lr_start) * static_cast<double>(iter) / static_cast<double>(s.warmup_iters);
  }
  if (s.total_iters == s.warmup_iters) return s.lr_peak;
  const double progress =
      static_cast<double>(iter - s.warmup_iters) / static_cast<double>(s.total_iters - s.warmup_iters);
  return s.lr_final + 0.5 * (s.lr_peak - s.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

double momentum_at(int64_t iter, const ScheduleConfig& s) {
  if (s.total_iters <= 0) return s.momentum_final;
  const double t = std::clamp(static_cast<double>(iter) / static_cast<double>(s.total_iters), 0.0, 1.0);
  return s.momentum_final - (s.momentum_final - s.momentum_start) * (std::cos(std::numbers::pi * t) + 1.0) / 2.0;
}

AdamW::AdamW(std::vector<std::pair<std::string, torch::Tensor>> params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (auto& [name, p] : params) {
    if (!p.requires_grad()) continue;
    slots_.push_back({name, p, {}, {}, decays(name, p)});
  }
}

bool AdamW::decays(const std::string& name, const torch::Tensor& p) {
  if (p.dim() < 2) return false;
  for (const char* exempt : {"cls_token", "pos_embed", "mask_token", "prototypes"}) {
    if (name.find(exempt) != std::string::npos) return false;
  }
  return true;
}

void AdamW::zero_grad() {
  for (auto& s : slots_) {
    if (s.param.grad().defined()) s.param.mutable_grad().zero_();
  }
}

void AdamW::step(double lr, double weight_decay) {
  torch::NoGradGuard g;
  ++steps_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (auto& s : slots_) {
    const auto& grad = s.param.grad();
    if (!grad.defined()) continue;
    if (!s.m.defined() || s.m.scalar_type() != s.param.scalar_type()) {
      s.m = torch::zeros_like(s.param);
      s.v = torch::zeros_like(s.param);
    }
    if (s.decay && weight_decay > 0.0) s.param.mul_(1.0 - lr * weight_decay);
    s.m.mul_(beta1_).add_(grad, 1.0 - beta1_);
    s.v.mul_(beta2_).addcmul_(grad, grad, 1.0 - beta2_);
    auto denom = (s.v / bc2).sqrt_().add_(eps_);
    s.param.addcdiv_(s.m, denom, -lr / bc1);
  }
}

void AdamW::save(Checkpoint& ckpt, const std::string& prefix) const {
  for (const auto& s : slots_) {
    ckpt.tensors.emplace_back(prefix + s.name + ".m", s.m.defined() ? s.m : torch::zeros_like(s.param));
    ckpt.tensors.emplace_back(prefix + s.name + ".v", s.v.defined() ? s.v : torch::zeros_like(s.param));
  }
  ckpt.tensors.emplace_back(prefix + "steps", torch::tensor({steps_}, torch::kInt64));
}

void AdamW::load(const Checkpoint& ckpt, const std::string& prefix) {
  for (auto& s : slots_) {
    const auto& m = ckpt.at(prefix + s.name + ".m");
    const auto& v = ckpt.at(prefix + s.name + ".v");
    if (!m.sizes().equals(s.param.sizes()) || !v.sizes().equals(s.param.sizes())) {
      throw DataError("optimizer state shape mismatch for " + s.name);
    }
    s.m = m.to(s.param.scalar_type()).clone();
    s.v = v.to(s.param.scalar_type()).clone();
  }
  steps_ = ckpt.at(prefix + "steps").item<int64_t>();
}

SSLNetworkImpl::SSLNetworkImpl(const BackboneConfig& backbone_cfg, const HeadConfig& dino, const HeadConfig& ibot,
                               bool shared)
    : shared_(shared) {
  backbone = register_module("backbone", VisionTransformer(backbone_cfg));
  dino_head = register_module("dino_head", PrototypeHead(backbone_cfg.embed_dim, dino));
  if (!shared_) ibot_head = register_module("ibot_head", PrototypeHead(backbone_cfg.embed_dim, ibot));
}

int64_t ViewBatch::batch_size() const { return globals.empty() ? 0 : globals.front().size(0); }

ViewBatch ViewBatch::to(torch::ScalarType dtype) const {
  ViewBatch out;
  for (const auto& g : globals) out.globals.push_back(g.to(dtype));
  for (const auto& l : locals) out.locals.push_back(l.to(dtype));
  out.masks = masks;
  return out;
}

ViewBatch collate(const std::vector<ViewSet>& views) {
  if (views.empty()) throw DataError("collate: empty batch");
  const auto ng = views.front().globals.size();
  const auto nl = views.front().locals.size();
  for (const auto& v : views) {
    if (v.globals.size() != ng || v.locals.size() != nl || v.masks.size() != ng) {
      throw DataError("collate: view sets differ in view counts");
    }
  }
  ViewBatch b;
  auto stack_slot = [&](auto select) {
    std::vector<torch::Tensor> items;
    items.reserve(views.size());
    for (const auto& v : views) items.push_back(select(v));
    return torch::stack(items);
  };
  for (std::size_t g = 0; g < ng; ++g) {
    b.globals.push_back(stack_slot([g](const ViewSet& v) { return v.globals[g]; }));
    b.masks.push_back(stack_slot([g](const ViewSet& v) { return v.masks[g].flat(); }));
  }
  for (std::size_t l = 0; l < nl; ++l) b.locals.push_back(stack_slot([l](const ViewSet& v) { return v.locals[l]; }));
  return b;
}

LossParts compute_losses(SSLNetwork& student, SSLNetwork& teacher, const ViewBatch& batch, const EngineConfig& cfg) {
  const auto ng = batch.globals.size();
  if (ng == 0 || batch.masks.size() != ng) throw DataError("compute_losses: need one mask per global view");
  const double tau_s = cfg.schedule.tau_student;
  LossParts out;

  std::vector<torch::Tensor> teacher_cls;
  torch::Tensor teacher_patch;
  {
    torch::NoGradGuard g;
    std::vector<torch::Tensor> cls_logits, patch_logits;
    for (std::size_t i = 0; i < ng; ++i) {
      const auto f = teacher->backbone->forward(batch.globals[i]);
      cls_logits.push_back(teacher->dino_head->forward(f.cls()));
      patch_logits.push_back(teacher->patch_head()->forward(f.patches().index({batch.masks[i]})));
    }
    out.teacher_cls_probs = teacher_targets(torch::cat(cls_logits), cfg);
    teacher_cls = out.teacher_cls_probs.chunk(static_cast<int64_t>(ng));
    auto all_patch = torch::cat(patch_logits);
    out.masked_tokens = all_patch.size(0);
    if (out.masked_tokens > 0) teacher_patch = teacher_targets(all_patch, cfg);
  }

  std::vector<torch::Tensor> student_cls;
  std::vector<torch::Tensor> student_patch;
  for (std::size_t i = 0; i < ng; ++i) {
    ForwardOptions opts;
    opts.mask = batch.masks[i];
    const auto f = student->backbone->forward(batch.globals[i], opts);
    student_cls.push_back(student_log_distribution(student->dino_head->forward(f.cls()), tau_s));
    student_patch.push_back(student->patch_head()->forward(f.patches().index({batch.masks[i]})));
  }
  for (const auto& local : batch.locals) {
    const auto f = student->backbone->forward(local);
    student_cls.push_back(student_log_distribution(student->dino_head->forward(f.cls()), tau_s));
  }

  out.image = image_level_loss(teacher_cls, student_cls);
  if (out.masked_tokens > 0) {
    auto logp = student_log_distribution(torch::cat(student_patch), tau_s);
    out.patch = cross_entropy_rows(teacher_patch, logp).mean();
  } else {
    log::warning("patch-level loss: empty mask, loss defined as 0");
    out.patch = torch::zeros({}, out.image.options());
  }
  out.total = out.image * cfg.image_weight + out.patch * cfg.patch_weight;
  return out;
}

std::pair<double, double> distribution_entropy(const torch::Tensor& probs) {
  const auto p = probs.detach().to(torch::kFloat64).reshape({-1, probs.size(-1)});
  auto plogp = [](const torch::Tensor& x) { return torch::where(x > 0, x * x.log(), torch::zeros({}, x.options())); };
  const double mean_entropy = -plogp(p.mean(0)).sum().item<double>();
  const double row_entropy = -plogp(p).sum(-1).mean().item<double>();
  return {mean_entropy, row_entropy};
}

nlohmann::json StepReport::to_json() const {
  return {{"iteration", iteration},
          {"total", total},
          {"image", image},
          {"patch", patch},
          {"lr", lr},
          {"weight_decay", weight_decay},
          {"momentum", momentum},
          {"teacher_entropy", teacher_entropy},
          {"teacher_row_entropy", teacher_row_entropy},
          {"grad_norm", grad_norm}};
}

TeacherStudentState TeacherStudentState::create(const EngineConfig& cfg, uint64_t seed) {
  cfg.schedule.validate();
  if (cfg.sinkhorn_iters < 1) throw UsageError("sinkhorn_iterations must be >= 1");
  torch::manual_seed(seed);
  TeacherStudentState s;
  s.cfg = cfg;
  s.student = SSLNetwork(cfg.backbone, cfg.dino_head, cfg.ibot_head, cfg.shared_head);
  s.teacher = SSLNetwork(cfg.backbone, cfg.dino_head, cfg.ibot_head, cfg.shared_head);
  ema_update(*s.teacher, *s.student, 0.0);
  for (auto& p : s.teacher->parameters()) p.set_requires_grad(false);
  s.teacher->eval();
  s.student->train();
  std::vector<std::pair<std::string, torch::Tensor>> params;
  for (const auto& item : s.student->named_parameters()) params.emplace_back(item.key(), item.value());
  s.optimizer = std::make_unique<AdamW>(std::move(params));
  return s;
}

void TeacherStudentState::save(Checkpoint& ckpt) const {
  add_module(ckpt, "student.", *student);
  add_module(ckpt, "teacher.", *teacher);
  optimizer->save(ckpt, "optimizer.");
  ckpt.metadata["iteration"] = iteration;
}

void TeacherStudentState::load(const Checkpoint& ckpt) {
  load_module(ckpt, "student.", *student);
  load_module(ckpt, "teacher.", *teacher);
  optimizer->load(ckpt, "optimizer.");
  iteration = ckpt.metadata.at("iteration").get<int64_t>();
}

StepReport train_step(TeacherStudentState& state, const ViewBatch& batch) {
  const auto& sched = state.cfg.schedule;
  StepReport r;
  r.iteration = state.iteration;
  const int64_t it = std::min(state.iteration, sched.total_iters);
  r.lr = lr_at(it, sched);
  r.weight_decay = sched.weight_decay;
  r.momentum = momentum_at(it, sched);

  state.student->train();
  auto parts = compute_losses(state.student, state.teacher, batch, state.cfg);
  r.total = parts.total.item<double>();
  r.image = parts.image.item<double>();
  r.patch = parts.patch.item<double>();
  if (!std::isfinite(r.total)) {
    std::ostringstream msg;
    msg << "non-finite loss at iteration " << state.iteration << " (image " << r.image << ", patch " << r.patch
        << ", lr " << r.lr << ")";
    throw NumericError(msg.str());
  }
  std::tie(r.teacher_entropy, r.teacher_row_entropy) = distribution_entropy(parts.teacher_cls_probs);

  state.optimizer->zero_grad();
  parts.total.backward();
  const auto params = state.student->parameters();
  if (state.cfg.clip_grad > 0.0) {
    r.grad_norm = torch::nn::utils::clip_grad_norm_(params, state.cfg.clip_grad);
  } else {
    double sq = 0.0;
    for (const auto& p : params) {
      if (p.grad().defined()) sq += p.grad().pow(2).sum().item<double>();
    }
    r.grad_norm = std::sqrt(sq);
  }
  if (!std::isfinite(r.grad_norm)) {
    throw NumericError("non-finite gradient norm at iteration " + std::to_string(state.iteration));
  }
  state.optimizer->step(r.lr, r.weight_decay);
  ema_update(*state.teacher, *state.student, r.momentum);
  ++state.iteration;
  return r;
}

}  // namespace radvit
