#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "fedsp/data.hpp"
#include "fedsp/model.hpp"

namespace fedsp {

struct PretrainConfig {
  std::size_t steps = 4000;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct PretrainResult {
  GlobalModel model;
  std::vector<double> losses;
};

/// Trains a fresh global model on the pretrain split with next-token loss.
PretrainResult pretrain(const ModelConfig& config, const Corpus& corpus, const PretrainConfig& cfg);

}  // namespace fedsp
