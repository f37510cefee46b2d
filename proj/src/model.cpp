#include "fedsp/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "fedsp/ops.hpp"

namespace fedsp {

namespace {

Tensor randn(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor param_zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }
Tensor param_ones(Shape shape) { return Tensor::filled(std::move(shape), 1.0, true); }

Tensor clone_named(const Tensor& t) { return t.clone(); }

void name_all(std::vector<NamedTensor>& named) {
  for (auto& nt : named) nt.tensor.set_name(nt.name);
}

Block init_block(const ModelConfig& c, std::mt19937_64& rng) {
  const std::size_t d = c.d_model;
  const std::size_t h = c.mlp_ratio * d;
  const double std_in = 0.02;
  const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(c.n_layers));
  Block b;
  b.ln1_gain = param_ones({d});
  b.ln1_bias = param_zeros({d});
  b.wq = randn({d, d}, rng, std_in);
  b.bq = param_zeros({d});
  b.wk = randn({d, d}, rng, std_in);
  b.bk = param_zeros({d});
  b.wv = randn({d, d}, rng, std_in);
  b.bv = param_zeros({d});
  b.wo = randn({d, d}, rng, std_out);
  b.bo = param_zeros({d});
  b.ln2_gain = param_ones({d});
  b.ln2_bias = param_zeros({d});
  b.w1 = randn({d, h}, rng, std_in);
  b.b1 = param_zeros({h});
  b.w2 = randn({h, d}, rng, std_out);
  b.b2 = param_zeros({d});
  return b;
}

Tensor split_heads(const Tensor& x, std::size_t batch, std::size_t seq, std::size_t heads, std::size_t head_dim) {
  return ops::permute(ops::reshape(x, {batch, seq, heads, head_dim}), {0, 2, 1, 3});
}

// [P, d] prefix -> [B, H, P, dh]
Tensor prefix_heads(const Tensor& p, std::size_t batch, std::size_t heads, std::size_t head_dim) {
  const std::size_t plen = p.dim(0);
  auto ph = ops::permute(ops::reshape(p, {plen, heads, head_dim}), {1, 0, 2});
  return ops::expand(ph, {batch});
}

Tensor block_forward(const Block& b, const ModelConfig& c, const Tensor& x, const PromptSet::Layer* prefix) {
  const std::size_t batch = x.dim(0);
  const std::size_t seq = x.dim(1);
  const std::size_t heads = c.n_heads;
  const std::size_t dh = c.head_dim();

  auto a = ops::layer_norm(x, b.ln1_gain, b.ln1_bias);
  auto q = split_heads(ops::add(ops::matmul(a, b.wq), b.bq), batch, seq, heads, dh);
  auto k = split_heads(ops::add(ops::matmul(a, b.wk), b.bk), batch, seq, heads, dh);
  auto v = split_heads(ops::add(ops::matmul(a, b.wv), b.bv), batch, seq, heads, dh);
  std::size_t plen = 0;
  if (prefix != nullptr) {
    plen = prefix->key.dim(0);
    k = ops::concat({prefix_heads(prefix->key, batch, heads, dh), k}, 2);
    v = ops::concat({prefix_heads(prefix->value, batch, heads, dh), v}, 2);
  }
  auto scores = ops::scale(ops::matmul(q, ops::transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  auto att = ops::softmax(ops::causal_mask(scores, plen));
  auto ctx = ops::reshape(ops::permute(ops::matmul(att, v), {0, 2, 1, 3}), {batch, seq, c.d_model});
  auto h = ops::add(x, ops::add(ops::matmul(ctx, b.wo), b.bo));

  auto m = ops::layer_norm(h, b.ln2_gain, b.ln2_bias);
  m = ops::gelu(ops::add(ops::matmul(m, b.w1), b.b1));
  m = ops::add(ops::matmul(m, b.w2), b.b2);
  return ops::add(h, m);
}

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& nt : named) out.push_back(nt.tensor);
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("model: n_layers must be >= 1");
  if (d_model < 1 || n_heads < 1) throw std::invalid_argument("model: d_model and n_heads must be >= 1");
  if (d_model % n_heads != 0) {
    throw std::invalid_argument("model: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                                std::to_string(n_heads));
  }
  if (prefix_len < 1) throw std::invalid_argument("model: prefix_len must be >= 1");
  if (vocab_size < 1) throw std::invalid_argument("model: vocab_size must be >= 1");
  if (max_seq_len < 1) throw std::invalid_argument("model: max_seq_len must be >= 1");
  if (mlp_ratio < 1) throw std::invalid_argument("model: mlp_ratio must be >= 1");
}

std::vector<NamedTensor> Block::named(const std::string& p) const {
  std::vector<NamedTensor> out = {
      {p + "ln1.gain", ln1_gain}, {p + "ln1.bias", ln1_bias}, {p + "attn.wq", wq},       {p + "attn.bq", bq},
      {p + "attn.wk", wk},        {p + "attn.bk", bk},        {p + "attn.wv", wv},       {p + "attn.bv", bv},
      {p + "attn.wo", wo},        {p + "attn.bo", bo},        {p + "ln2.gain", ln2_gain}, {p + "ln2.bias", ln2_bias},
      {p + "mlp.w1", w1},         {p + "mlp.b1", b1},         {p + "mlp.w2", w2},        {p + "mlp.b2", b2},
  };
  return out;
}

Block Block::clone() const {
  Block b;
  b.ln1_gain = clone_named(ln1_gain);
  b.ln1_bias = clone_named(ln1_bias);
  b.wq = clone_named(wq);
  b.bq = clone_named(bq);
  b.wk = clone_named(wk);
  b.bk = clone_named(bk);
  b.wv = clone_named(wv);
  b.bv = clone_named(bv);
  b.wo = clone_named(wo);
  b.bo = clone_named(bo);
  b.ln2_gain = clone_named(ln2_gain);
  b.ln2_bias = clone_named(ln2_bias);
  b.w1 = clone_named(w1);
  b.b1 = clone_named(b1);
  b.w2 = clone_named(w2);
  b.b2 = clone_named(b2);
  return b;
}

// ---------------------------------------------------------------------------
// PromptSet

PromptSet PromptSet::init_direct(std::size_t depth, std::size_t prefix_len, std::size_t d_model, std::uint64_t seed,
                                 double stddev) {
  std::mt19937_64 rng(seed);
  PromptSet p;
  p.depth_ = depth;
  p.prefix_len_ = prefix_len;
  p.d_model_ = d_model;
  for (std::size_t l = 0; l < depth; ++l) {
    auto key = randn({prefix_len, d_model}, rng, stddev);
    auto value = randn({prefix_len, d_model}, rng, stddev);
    p.layers_.push_back({key, value});
  }
  auto named = p.named_parameters();
  name_all(named);
  return p;
}

PromptSet PromptSet::from_layers(const std::vector<Layer>& layers) {
  if (layers.empty()) throw std::invalid_argument("prompts: no layers");
  PromptSet p;
  p.depth_ = layers.size();
  p.prefix_len_ = layers[0].key.dim(0);
  p.d_model_ = layers[0].key.dim(1);
  for (const auto& l : layers) {
    const Shape want{p.prefix_len_, p.d_model_};
    if (l.key.shape() != want || l.value.shape() != want) {
      throw ShapeError("prompts", "layer shapes " + shape_str(l.key.shape()) + "/" + shape_str(l.value.shape()) +
                                      " differ from " + shape_str(want));
    }
    auto key = l.key.detach();
    auto value = l.value.detach();
    key.set_requires_grad(true);
    value.set_requires_grad(true);
    p.layers_.push_back({key, value});
  }
  auto named = p.named_parameters();
  name_all(named);
  return p;
}

PromptSet PromptSet::init_reparam(std::size_t depth, std::size_t prefix_len, std::size_t d_model, std::size_t hidden,
                                  std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  PromptSet p;
  p.reparam_ = true;
  p.depth_ = depth;
  p.prefix_len_ = prefix_len;
  p.d_model_ = d_model;
  p.hidden_ = hidden;
  p.seed_ = randn({prefix_len, d_model}, rng, 1.0);
  p.w1_ = randn({d_model, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(d_model)));
  p.b1_ = param_zeros({hidden});
  p.w2_ = randn({hidden, depth * 2 * d_model}, rng, stddev);
  p.b2_ = param_zeros({depth * 2 * d_model});
  auto named = p.named_parameters();
  name_all(named);
  return p;
}

PromptSet PromptSet::init_for(const ModelConfig& config, std::uint64_t seed, double stddev) {
  if (config.reparametrized()) {
    return init_reparam(config.n_layers, config.prefix_len, config.d_model, config.reparam_hidden, seed, stddev);
  }
  return init_direct(config.n_layers, config.prefix_len, config.d_model, seed, stddev);
}

std::vector<NamedTensor> PromptSet::named_parameters() const {
  std::vector<NamedTensor> out;
  if (reparam_) {
    out = {{"prompt_mlp.embedding", seed_},
           {"prompt_mlp.w1", w1_},
           {"prompt_mlp.b1", b1_},
           {"prompt_mlp.w2", w2_},
           {"prompt_mlp.b2", b2_}};
    return out;
  }
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    out.push_back({"prompts." + std::to_string(l) + ".key", layers_[l].key});
    out.push_back({"prompts." + std::to_string(l) + ".value", layers_[l].value});
  }
  return out;
}

PromptSet PromptSet::from_named(std::span<const NamedTensor> tensors) {
  std::map<std::string, Tensor> by_name;
  for (const auto& nt : tensors) {
    if (!by_name.emplace(nt.name, nt.tensor).second) throw FormatError("prompts: duplicate tensor '" + nt.name + "'");
  }
  auto take = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("prompts: missing tensor '" + name + "'");
    auto t = it->second.detach();
    t.set_requires_grad(true);
    t.set_name(name);
    by_name.erase(it);
    return t;
  };
  PromptSet p;
  if (by_name.count("prompt_mlp.embedding")) {
    p.reparam_ = true;
    p.seed_ = take("prompt_mlp.embedding");
    p.w1_ = take("prompt_mlp.w1");
    p.b1_ = take("prompt_mlp.b1");
    p.w2_ = take("prompt_mlp.w2");
    p.b2_ = take("prompt_mlp.b2");
    if (p.seed_.rank() != 2 || p.w1_.rank() != 2 || p.w2_.rank() != 2) throw FormatError("prompts: bad MLP ranks");
    p.prefix_len_ = p.seed_.dim(0);
    p.d_model_ = p.seed_.dim(1);
    p.hidden_ = p.w1_.dim(1);
    const std::size_t out = p.w2_.dim(1);
    if (p.w1_.dim(0) != p.d_model_ || p.b1_.shape() != Shape{p.hidden_} || p.w2_.dim(0) != p.hidden_ ||
        out % (2 * p.d_model_) != 0 || p.b2_.shape() != Shape{out}) {
      throw FormatError("prompts: inconsistent reparametrisation shapes");
    }
    p.depth_ = out / (2 * p.d_model_);
  } else {
    std::size_t depth = 0;
    while (by_name.count("prompts." + std::to_string(depth) + ".key")) ++depth;
    if (depth == 0) throw FormatError("prompts: no prompt tensors found");
    for (std::size_t l = 0; l < depth; ++l) {
      auto key = take("prompts." + std::to_string(l) + ".key");
      auto value = take("prompts." + std::to_string(l) + ".value");
      if (key.rank() != 2 || key.shape() != value.shape() || (l > 0 && key.shape() != p.layers_[0].key.shape())) {
        throw FormatError("prompts: layer " + std::to_string(l) + " has inconsistent shapes");
      }
      p.layers_.push_back({key, value});
    }
    p.depth_ = depth;
    p.prefix_len_ = p.layers_[0].key.dim(0);
    p.d_model_ = p.layers_[0].key.dim(1);
  }
  if (!by_name.empty()) throw FormatError("prompts: unexpected tensor '" + by_name.begin()->first + "'");
  return p;
}

std::vector<Tensor> PromptSet::parameters() const { return tensors_of(named_parameters()); }

std::size_t PromptSet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

std::vector<PromptSet::Layer> PromptSet::materialize() const {
  if (!reparam_) return layers_;
  auto h = ops::tanh(ops::add(ops::matmul(seed_, w1_), b1_));
  auto out = ops::add(ops::matmul(h, w2_), b2_);  // [P, L * 2 * d]
  std::vector<Layer> layers;
  layers.reserve(depth_);
  for (std::size_t l = 0; l < depth_; ++l) {
    layers.push_back({ops::slice(out, 1, (2 * l) * d_model_, d_model_), ops::slice(out, 1, (2 * l + 1) * d_model_, d_model_)});
  }
  return layers;
}

void PromptSet::set_requires_grad(bool flag) const {
  for (const auto& t : parameters()) t.set_requires_grad(flag);
}

PromptSet PromptSet::clone() const {
  PromptSet p = *this;
  for (auto& l : p.layers_) {
    l.key = l.key.clone();
    l.value = l.value.clone();
  }
  if (reparam_) {
    p.seed_ = seed_.clone();
    p.w1_ = w1_.clone();
    p.b1_ = b1_.clone();
    p.w2_ = w2_.clone();
    p.b2_ = b2_.clone();
  }
  return p;
}

bool PromptSet::same_shape(const PromptSet& other) const {
  auto a = named_parameters();
  auto b = other.named_parameters();
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.shape() != b[i].tensor.shape()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Layer selection

std::string to_string(LayerSelection s) {
  switch (s) {
    case LayerSelection::bottom:
      return "BOT";
    case LayerSelection::middle:
      return "MID";
    case LayerSelection::top:
      return "TOP";
  }
  return "?";
}

LayerSelection parse_selection(const std::string& s) {
  std::string u = s;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (u == "BOT" || u == "BOTTOM") return LayerSelection::bottom;
  if (u == "MID" || u == "MIDDLE") return LayerSelection::middle;
  if (u == "TOP") return LayerSelection::top;
  throw std::invalid_argument("unknown layer selection '" + s + "' (expected BOT, MID or TOP)");
}

std::size_t selected_first_block(std::size_t n_layers, std::size_t n_aux, LayerSelection selection) {
  if (n_aux < 1 || n_aux > n_layers) {
    throw std::invalid_argument("auxiliary depth " + std::to_string(n_aux) + " must lie in [1, " +
                                std::to_string(n_layers) + "]");
  }
  switch (selection) {
    case LayerSelection::bottom:
      return 0;
    case LayerSelection::middle:
      return (n_layers - n_aux) / 2;
    case LayerSelection::top:
      return n_layers - n_aux;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// TransformerLM

TransformerLM TransformerLM::init_global(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  TransformerLM m;
  m.config_ = config;
  const std::size_t d = config.d_model;
  m.tok_emb = randn({config.vocab_size, d}, rng, 0.02);
  m.pos_emb = randn({config.max_seq_len, d}, rng, 0.01);
  for (std::size_t l = 0; l < config.n_layers; ++l) m.blocks_.push_back(init_block(config, rng));
  m.lnf_gain = param_ones({d});
  m.lnf_bias = param_zeros({d});
  m.head_w = randn({d, config.vocab_size}, rng, 0.02);
  m.head_b = param_zeros({config.vocab_size});
  auto named = m.named_parameters();
  name_all(named);
  return m;
}

std::vector<std::size_t> TransformerLM::execution_order() const {
  std::vector<std::size_t> order;
  const std::size_t n = blocks_.size();
  const std::size_t reps = sharing_factor();
  order.reserve(n * reps);
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < n; ++j) order.push_back(j);
  return order;
}

std::size_t TransformerLM::sharing_factor() const {
  if (!aux_ || !aux_->cross_layer_sharing) return 1;
  return config_.n_layers / blocks_.size();
}

ForwardResult TransformerLM::forward(const TokenBatch& tokens, const PromptSet* prompts) const {
  if (tokens.batch * tokens.seq != tokens.ids.size()) {
    throw ShapeError("forward", std::to_string(tokens.ids.size()) + " ids do not form a " + std::to_string(tokens.batch) +
                                    "x" + std::to_string(tokens.seq) + " batch");
  }
  if (tokens.seq == 0 || tokens.seq > config_.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.seq) + " outside [1, " +
                                std::to_string(config_.max_seq_len) + "]");
  }
  const auto order = execution_order();
  std::vector<PromptSet::Layer> layers;
  if (prompts != nullptr) {
    if (prompts->depth() != config_.n_layers) {
      throw std::invalid_argument("forward: prompt depth " + std::to_string(prompts->depth()) +
                                  " does not match model depth " + std::to_string(config_.n_layers));
    }
    if (prompts->d_model() != config_.d_model) {
      throw std::invalid_argument("forward: prompt width " + std::to_string(prompts->d_model()) +
                                  " does not match d_model " + std::to_string(config_.d_model));
    }
    layers = prompts->materialize();
  }

  auto x = ops::embedding(tok_emb, tokens.ids, {tokens.batch, tokens.seq});
  x = ops::add(x, ops::slice(pos_emb, 0, 0, tokens.seq));
  for (std::size_t depth = 0; depth < order.size(); ++depth) {
    const PromptSet::Layer* prefix = layers.empty() ? nullptr : &layers[depth];
    x = block_forward(blocks_[order[depth]], config_, x, prefix);
  }
  auto hidden = ops::layer_norm(x, lnf_gain, lnf_bias);
  auto logits = ops::add(ops::matmul(hidden, head_w), head_b);
  return {hidden, logits};
}

std::vector<NamedTensor> TransformerLM::named_parameters() const {
  std::vector<NamedTensor> out = {{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    auto b = blocks_[i].named("blocks." + std::to_string(i) + ".");
    out.insert(out.end(), b.begin(), b.end());
  }
  out.push_back({"ln_f.gain", lnf_gain});
  out.push_back({"ln_f.bias", lnf_bias});
  out.push_back({"lm_head.w", head_w});
  out.push_back({"lm_head.b", head_b});
  return out;
}

std::vector<Tensor> TransformerLM::parameters() const { return tensors_of(named_parameters()); }

std::vector<Tensor> TransformerLM::block_parameters() const {
  std::vector<Tensor> out;
  for (const auto& b : blocks_) {
    auto t = tensors_of(b.named(""));
    out.insert(out.end(), t.begin(), t.end());
  }
  return out;
}

std::size_t TransformerLM::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void TransformerLM::set_requires_grad(bool flag) const {
  for (const auto& t : parameters()) t.set_requires_grad(flag);
}

TransformerLM TransformerLM::clone() const {
  TransformerLM m;
  m.config_ = config_;
  m.aux_ = aux_;
  m.tok_emb = tok_emb.clone();
  m.pos_emb = pos_emb.clone();
  for (const auto& b : blocks_) m.blocks_.push_back(b.clone());
  m.lnf_gain = lnf_gain.clone();
  m.lnf_bias = lnf_bias.clone();
  m.head_w = head_w.clone();
  m.head_b = head_b.clone();
  return m;
}

void TransformerLM::set_prompt_config(std::size_t prefix_len, std::size_t reparam_hidden) {
  auto c = config_;
  c.prefix_len = prefix_len;
  c.reparam_hidden = reparam_hidden;
  c.validate();
  config_ = c;
}

std::vector<NamedTensor> TransformerLM::checkpoint_tensors() const {
  const auto& c = config_;
  std::vector<NamedTensor> out;
  out.push_back({"config.model", Tensor::from({8}, {double(c.n_layers), double(c.d_model), double(c.n_heads),
                                                    double(c.vocab_size), double(c.max_seq_len), double(c.prefix_len),
                                                    double(c.reparam_hidden), double(c.mlp_ratio)})});
  if (aux_) {
    out.push_back({"config.aux", Tensor::from({3}, {double(static_cast<int>(aux_->selection)), double(aux_->first_block),
                                                    aux_->cross_layer_sharing ? 1.0 : 0.0})});
  }
  auto params = named_parameters();
  out.insert(out.end(), params.begin(), params.end());
  return out;
}

TransformerLM TransformerLM::from_checkpoint(std::span<const NamedTensor> tensors) {
  std::map<std::string, Tensor> by_name;
  for (const auto& nt : tensors) by_name[nt.name] = nt.tensor;
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw FormatError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second.shape()) + ", expected " +
                        shape_str(shape));
    }
    auto t = it->second.detach();
    t.set_requires_grad(true);
    t.set_name(name);
    by_name.erase(it);
    return t;
  };
  auto meta = take("config.model", {8});
  auto md = meta.data();
  auto as_size = [](double v) { return static_cast<std::size_t>(v); };
  ModelConfig c;
  c.n_layers = as_size(md[0]);
  c.d_model = as_size(md[1]);
  c.n_heads = as_size(md[2]);
  c.vocab_size = as_size(md[3]);
  c.max_seq_len = as_size(md[4]);
  c.prefix_len = as_size(md[5]);
  c.reparam_hidden = as_size(md[6]);
  c.mlp_ratio = as_size(md[7]);
  c.validate();

  TransformerLM m;
  m.config_ = c;
  std::size_t n_blocks = c.n_layers;
  if (by_name.count("config.aux")) {
    auto aux = take("config.aux", {3});
    auto ad = aux.data();
    AuxInfo info;
    info.selection = static_cast<LayerSelection>(static_cast<int>(ad[0]));
    info.first_block = as_size(ad[1]);
    info.cross_layer_sharing = ad[2] != 0.0;
    m.aux_ = info;
    n_blocks = 0;
    while (by_name.count("blocks." + std::to_string(n_blocks) + ".attn.wq")) ++n_blocks;
    if (n_blocks == 0 || c.n_layers % n_blocks != 0) throw FormatError("checkpoint: auxiliary block count invalid");
  }
  const std::size_t d = c.d_model;
  const std::size_t h = c.mlp_ratio * d;
  m.tok_emb = take("tok_emb", {c.vocab_size, d});
  m.pos_emb = take("pos_emb", {c.max_seq_len, d});
  for (std::size_t i = 0; i < n_blocks; ++i) {
    const std::string p = "blocks." + std::to_string(i) + ".";
    Block b;
    b.ln1_gain = take(p + "ln1.gain", {d});
    b.ln1_bias = take(p + "ln1.bias", {d});
    b.wq = take(p + "attn.wq", {d, d});
    b.bq = take(p + "attn.bq", {d});
    b.wk = take(p + "attn.wk", {d, d});
    b.bk = take(p + "attn.bk", {d});
    b.wv = take(p + "attn.wv", {d, d});
    b.bv = take(p + "attn.bv", {d});
    b.wo = take(p + "attn.wo", {d, d});
    b.bo = take(p + "attn.bo", {d});
    b.ln2_gain = take(p + "ln2.gain", {d});
    b.ln2_bias = take(p + "ln2.bias", {d});
    b.w1 = take(p + "mlp.w1", {d, h});
    b.b1 = take(p + "mlp.b1", {h});
    b.w2 = take(p + "mlp.w2", {h, d});
    b.b2 = take(p + "mlp.b2", {d});
    m.blocks_.push_back(std::move(b));
  }
  m.lnf_gain = take("ln_f.gain", {d});
  m.lnf_bias = take("ln_f.bias", {d});
  m.head_w = take("lm_head.w", {d, c.vocab_size});
  m.head_b = take("lm_head.b", {c.vocab_size});
  if (!by_name.empty()) throw FormatError("checkpoint: unexpected tensor '" + by_name.begin()->first + "'");
  return m;
}

AuxModel build_auxiliary(const GlobalModel& global, LayerSelection selection, std::size_t n_layers,
                         bool cross_layer_sharing) {
  if (global.is_auxiliary()) throw std::invalid_argument("build_auxiliary: source must be a global model");
  const std::size_t total = global.config().n_layers;
  if (n_layers < 1 || n_layers > total || total % n_layers != 0) {
    throw std::invalid_argument("build_auxiliary: auxiliary depth " + std::to_string(n_layers) +
                                " must divide global depth " + std::to_string(total));
  }
  const std::size_t first = selected_first_block(total, n_layers, selection);
  TransformerLM aux;
  aux.config_ = global.config();
  aux.aux_ = TransformerLM::AuxInfo{selection, first, cross_layer_sharing};
  aux.tok_emb = global.tok_emb.clone();
  aux.pos_emb = global.pos_emb.clone();
  for (std::size_t i = 0; i < n_layers; ++i) aux.blocks_.push_back(global.blocks()[first + i].clone());
  aux.lnf_gain = global.lnf_gain.clone();
  aux.lnf_bias = global.lnf_bias.clone();
  aux.head_w = global.head_w.clone();
  aux.head_b = global.head_b.clone();
  auto named = aux.named_parameters();
  name_all(named);
  return aux;
}

std::size_t count_params(ParamKind kind, const ModelConfig& c, std::size_t aux_layers) {
  const std::size_t d = c.d_model;
  const std::size_t h = c.mlp_ratio * d;
  const std::size_t block = 2 * d        // ln1
                            + 4 * (d * d + d)  // q, k, v, o
                            + 2 * d            // ln2
                            + d * h + h + h * d + d;
  const std::size_t shell = c.vocab_size * d + c.max_seq_len * d + 2 * d + d * c.vocab_size + c.vocab_size;
  switch (kind) {
    case ParamKind::global_model:
      return shell + c.n_layers * block;
    case ParamKind::aux_model:
      return shell + aux_layers * block;
    case ParamKind::prompt_payload:
      if (c.reparametrized()) {
        const std::size_t hr = c.reparam_hidden;
        const std::size_t out = c.n_layers * 2 * d;
        return c.prefix_len * d + d * hr + hr + hr * out + out;
      }
      return c.n_layers * 2 * c.prefix_len * d;
  }
  return 0;
}

std::uint64_t checksum(std::span<const NamedTensor> tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffU;
      h *= 1099511628211ULL;
    }
  };
  for (const auto& nt : tensors) {
    for (unsigned char ch : nt.name) mix(ch);
    for (auto dim : nt.tensor.shape()) mix(dim);
    for (double v : nt.tensor.data()) mix(std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

}  // namespace fedsp
