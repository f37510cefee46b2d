#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedsp/data.hpp"
#include "fedsp/model.hpp"
#include "fedsp/optim.hpp"

namespace fedsp {

struct KdConfig {
  std::size_t steps = 5000;
  double lr = 5e-4;
  std::size_t batch_size = 16;
  double warmup_fraction = 0.1;
  std::uint64_t seed = 0;
  AdamWOptions adamw{};
};

/// Learnable square map aligning student hidden states with the teacher's.
struct KdProjector {
  Tensor weight;  // [d, d]

  static KdProjector identity(std::size_t d_model);
};

/// mean((H_T - H_S W^T)^2) over every element. The teacher is detached.
Tensor kd_loss(const Tensor& teacher_hidden, const Tensor& student_hidden, const KdProjector& proj);

struct KdResult {
  AuxModel aux;
  /// Loss before each update, plus one final entry after the last update:
  /// `steps + 1` values.
  std::vector<double> curve;
};

/// Distills `global` into a copy of `aux` on the given documents. Neither
/// model carries prompts during distillation; the teacher is never written.
/// Throws std::invalid_argument when fewer documents than one batch exist.
KdResult run_kd(const GlobalModel& global, const AuxModel& aux, const KdConfig& cfg, const Corpus& corpus,
                std::span<const std::size_t> docs);

}  // namespace fedsp
