#include "fedsp/pretrain.hpp"

#include <stdexcept>

#include "fedsp/ops.hpp"
#include "fedsp/optim.hpp"

namespace fedsp {

PretrainResult pretrain(const ModelConfig& config, const Corpus& corpus, const PretrainConfig& cfg) {
  if (cfg.steps < 1) throw std::invalid_argument("pretrain: steps must be >= 1");
  auto docs = corpus.indices(Split::pretrain);
  if (docs.empty()) throw std::invalid_argument("pretrain: corpus has no pretrain split");
  PretrainResult out{GlobalModel::init_global(config, cfg.seed), {}};
  out.model.set_requires_grad(true);
  AdamW opt(out.model.parameters());
  LinearWarmupDecay sched(cfg.lr, cfg.steps, cfg.warmup_fraction);
  BatchStream stream(std::move(docs), cfg.batch_size, cfg.seed + 1);
  out.losses.reserve(cfg.steps);
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto batch = make_lm_batch(corpus, stream.next());
    auto loss = ops::cross_entropy(out.model.forward(batch.inputs).logits, batch.targets);
    out.losses.push_back(loss.item());
    backward(loss);
    opt.step(sched.lr(s));
  }
  out.model.set_requires_grad(false);
  return out;
}

}  // namespace fedsp
