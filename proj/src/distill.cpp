#include "fedsp/distill.hpp"

#include <stdexcept>

#include "fedsp/ops.hpp"

namespace fedsp {

KdProjector KdProjector::identity(std::size_t d_model) {
  auto w = Tensor::zeros({d_model, d_model}, true);
  auto v = w.mutable_data();
  for (std::size_t i = 0; i < d_model; ++i) v[i * d_model + i] = 1.0;
  w.set_name("kd.proj");
  return {w};
}

Tensor kd_loss(const Tensor& teacher_hidden, const Tensor& student_hidden, const KdProjector& proj) {
  const auto& ts = teacher_hidden.shape();
  const auto& ss = student_hidden.shape();
  if (ts != ss) throw ShapeError("kd_loss", "teacher " + shape_str(ts) + " vs student " + shape_str(ss));
  if (ss.empty() || proj.weight.rank() != 2 || proj.weight.dim(0) != ss.back() || proj.weight.dim(1) != ss.back()) {
    throw ShapeError("kd_loss", "projector " + shape_str(proj.weight.shape()) + " does not match hidden width of " +
                                    shape_str(ss));
  }
  auto projected = ops::matmul(student_hidden, ops::transpose(proj.weight));
  return ops::mse(teacher_hidden.detach(), projected);
}

KdResult run_kd(const GlobalModel& global, const AuxModel& aux, const KdConfig& cfg, const Corpus& corpus,
                std::span<const std::size_t> docs) {
  if (cfg.steps < 1) throw std::invalid_argument("run_kd: steps must be >= 1");
  if (!(cfg.lr > 0)) throw std::invalid_argument("run_kd: lr must be positive");
  if (docs.size() < cfg.batch_size) {
    throw std::invalid_argument("run_kd: corpus of " + std::to_string(docs.size()) +
                                " documents is shorter than one batch of " + std::to_string(cfg.batch_size));
  }

  KdResult out{aux.clone(), {}};
  out.aux.set_requires_grad(true);
  auto proj = KdProjector::identity(global.config().d_model);
  auto params = out.aux.parameters();
  params.push_back(proj.weight);
  AdamW opt(params, cfg.adamw);
  LinearWarmupDecay sched(cfg.lr, cfg.steps, cfg.warmup_fraction);
  BatchStream stream(std::vector<std::size_t>(docs.begin(), docs.end()), cfg.batch_size, cfg.seed);

  auto loss_on = [&](const LmBatch& batch) {
    Tensor teacher;
    {
      NoGradGuard no_grad;
      teacher = global.forward(batch.inputs).hidden;
    }
    return kd_loss(teacher, out.aux.forward(batch.inputs).hidden, proj);
  };

  out.curve.reserve(cfg.steps + 1);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    auto loss = loss_on(make_lm_batch(corpus, stream.next()));
    out.curve.push_back(loss.item());
    backward(loss);
    opt.step(sched.lr(s));
  }
  {
    const auto batch = make_lm_batch(corpus, stream.next());
    NoGradGuard no_grad;
    out.curve.push_back(loss_on(batch).item());
  }
  out.aux.set_requires_grad(false);
  return out;
}

}  // namespace fedsp
