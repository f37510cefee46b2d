#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsp/checkpoint.hpp"
#include "fedsp/tensor.hpp"

namespace fedsp {

struct ModelConfig {
  std::size_t n_layers = 8;  // depth L of the global model
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 32;
  std::size_t prefix_len = 8;       // prompt slots per layer
  std::size_t reparam_hidden = 0;   // 0: prompts stored directly
  std::size_t mlp_ratio = 4;

  bool reparametrized() const noexcept { return reparam_hidden > 0; }
  std::size_t head_dim() const noexcept { return d_model / n_heads; }
  /// Throws std::invalid_argument on the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Pre-norm transformer block: LN -> causal MHA -> residual -> LN -> GELU MLP -> residual.
struct Block {
  Tensor ln1_gain, ln1_bias;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;

  std::vector<NamedTensor> named(const std::string& prefix) const;
  Block clone() const;
};

/// Per-layer key/value prefixes, either stored directly or generated by a
/// two-layer MLP from a seed matrix.
class PromptSet {
 public:
  struct Layer {
    Tensor key;    // [P, d_model]
    Tensor value;  // [P, d_model]
  };

  /// Direct form with entries drawn from N(0, stddev^2).
  static PromptSet init_direct(std::size_t depth, std::size_t prefix_len, std::size_t d_model, std::uint64_t seed,
                               double stddev = 0.02);
  /// Direct form initialised from given per-layer values (copied).
  static PromptSet from_layers(const std::vector<Layer>& layers);
  static PromptSet init_reparam(std::size_t depth, std::size_t prefix_len, std::size_t d_model, std::size_t hidden,
                                std::uint64_t seed, double stddev = 0.02);
  /// Sized per `config`: reparametrised when `config.reparam_hidden > 0`.
  static PromptSet init_for(const ModelConfig& config, std::uint64_t seed, double stddev = 0.02);
  /// Rebuilds a prompt set from its canonical tensors (as produced by
  /// `named_parameters`). Throws FormatError on missing or misshaped entries.
  static PromptSet from_named(std::span<const NamedTensor> tensors);

  bool reparametrized() const noexcept { return reparam_; }
  std::size_t depth() const noexcept { return depth_; }
  std::size_t prefix_len() const noexcept { return prefix_len_; }
  std::size_t d_model() const noexcept { return d_model_; }
  std::size_t hidden() const noexcept { return hidden_; }

  /// The trainable tensors under their canonical names; exactly what goes on
  /// the wire.
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::size_t parameter_count() const;

  /// Per-layer K/V, recorded on the tape so gradients reach the stored form.
  std::vector<Layer> materialize() const;

  void set_requires_grad(bool flag) const;
  PromptSet clone() const;
  bool same_shape(const PromptSet& other) const;

 private:
  bool reparam_ = false;
  std::size_t depth_ = 0;
  std::size_t prefix_len_ = 0;
  std::size_t d_model_ = 0;
  std::size_t hidden_ = 0;
  std::vector<Layer> layers_;           // direct form
  Tensor seed_, w1_, b1_, w2_, b2_;     // reparam form
};

enum class LayerSelection { bottom, middle, top };

std::string to_string(LayerSelection s);
LayerSelection parse_selection(const std::string& s);

/// A batch of equal-length token sequences, row-major [batch, seq].
struct TokenBatch {
  std::vector<std::int32_t> ids;
  std::size_t batch = 0;
  std::size_t seq = 0;
};

struct ForwardResult {
  Tensor hidden;  // [B, T, d] after the final layer norm
  Tensor logits;  // [B, T, vocab]
};

/// Decoder-only language model. The same type backs the full-depth global
/// model and the shallow auxiliary model; they differ in how many blocks they
/// own and in the order those blocks run.
///
/// The auxiliary model owns N blocks and, with cross-layer sharing, runs them
/// R = L / N times in the order (0..N-1) x R. Prompt slot d is consumed at
/// unrolled depth d in every case.
class TransformerLM {
 public:
  struct AuxInfo {
    LayerSelection selection = LayerSelection::bottom;
    std::size_t first_block = 0;   // index in the global model
    bool cross_layer_sharing = true;
  };

  static TransformerLM init_global(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  std::size_t n_blocks() const noexcept { return blocks_.size(); }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  std::vector<Block>& blocks() noexcept { return blocks_; }
  bool is_auxiliary() const noexcept { return aux_.has_value(); }
  const std::optional<AuxInfo>& aux_info() const noexcept { return aux_; }

  /// Block index executed at each unrolled depth.
  std::vector<std::size_t> execution_order() const;
  std::size_t effective_depth() const { return execution_order().size(); }
  /// L / N for an auxiliary model with sharing, otherwise 1.
  std::size_t sharing_factor() const;

  ForwardResult forward(const TokenBatch& tokens, const PromptSet* prompts = nullptr) const;

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const;
  std::vector<Tensor> block_parameters() const;
  std::size_t parameter_count() const;
  void set_requires_grad(bool flag) const;
  TransformerLM clone() const;
  /// Prompt geometry is not part of the weights; runs may choose their own.
  void set_prompt_config(std::size_t prefix_len, std::size_t reparam_hidden);

  /// Canonical checkpoint tensors, including a `config.model` (and for
  /// auxiliary models `config.aux`) descriptor tensor.
  std::vector<NamedTensor> checkpoint_tensors() const;
  static TransformerLM from_checkpoint(std::span<const NamedTensor> tensors);

  Tensor tok_emb, pos_emb, lnf_gain, lnf_bias, head_w, head_b;

 private:
  friend TransformerLM build_auxiliary(const TransformerLM&, LayerSelection, std::size_t, bool);

  ModelConfig config_;
  std::vector<Block> blocks_;
  std::optional<AuxInfo> aux_;
};

using GlobalModel = TransformerLM;
using AuxModel = TransformerLM;

/// 0-based index of the first copied block for a selection strategy:
/// bottom 0, middle floor((L - N) / 2), top L - N.
std::size_t selected_first_block(std::size_t n_layers, std::size_t n_aux, LayerSelection selection);

/// Deep-copies embeddings, final norm, head and N contiguous blocks of
/// `global`. Throws std::invalid_argument unless N divides L.
AuxModel build_auxiliary(const GlobalModel& global, LayerSelection selection, std::size_t n_layers,
                         bool cross_layer_sharing = true);

enum class ParamKind { global_model, aux_model, prompt_payload };

/// Exact trainable-parameter counts. `aux_layers` is only read for aux_model.
std::size_t count_params(ParamKind kind, const ModelConfig& config, std::size_t aux_layers = 1);

/// Element-wise FNV-1a digest over the named tensors (names, shapes, bits).
std::uint64_t checksum(std::span<const NamedTensor> tensors);

}  // namespace fedsp
