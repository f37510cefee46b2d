#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsp/model.hpp"

namespace fedsp {

/// Character-level tokenizer. Id 0 is padding, id 1 marks the beginning of a
/// sequence, and the remaining ids follow the alphabet sorted by codepoint.
class Tokenizer {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kBos = 1;

  Tokenizer() = default;
  static Tokenizer from_texts(std::span<const std::string> texts);
  static Tokenizer from_alphabet(std::u32string alphabet);

  std::vector<std::int32_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::int32_t> ids) const;
  std::size_t vocab_size() const noexcept { return alphabet_.size() + 2; }
  const std::u32string& alphabet() const noexcept { return alphabet_; }

 private:
  std::u32string alphabet_;
};

std::u32string utf8_decode(std::string_view text);
std::string utf8_encode(std::u32string_view text);

enum class Split { pretrain, train, eval };
std::string to_string(Split s);
Split parse_split(const std::string& s);

struct Document {
  std::string text;
  Split split = Split::train;
  int category = 0;
};

struct Corpus {
  std::vector<Document> documents;
  Tokenizer tokenizer;

  std::vector<std::size_t> indices(Split split) const;
};

struct McExample {
  std::string context;
  std::vector<std::string> options;
  std::size_t gold = 0;
  int category = 0;
};

/// Rules of the toy world. Every document reads "<tag>:xyz=a" where x, y, z
/// are digits and the answer copies the digit the rule points at.
enum class ToyRule { first, second, third };
std::string to_string(ToyRule r);
ToyRule parse_rule(const std::string& s);
char rule_tag(ToyRule r);
int apply_rule(ToyRule r, const std::array<int, 3>& digits);

struct ToyTaskOptions {
  ToyRule task = ToyRule::third;   // rule behind the untagged downstream task
  double heldout_fraction = 0.25;  // share of digit triples reserved for probes
  std::size_t pretrain_docs = 20000;
  double tagged_fraction = 0.5;    // pretraining documents that name their rule
  std::size_t n_options = 4;
};

struct ToyTasks {
  Corpus corpus;
  std::vector<McExample> probes;
};

/// Deterministic toy world. Pretraining mixes tagged documents ("F:", "S:",
/// "T:") with untagged "?:" documents whose rule is drawn at random. The
/// train split holds one untagged document per training triple, answered by
/// `options.task`; probes ask the same question on held-out triples.
ToyTasks make_toy_tasks(std::uint64_t seed, const ToyTaskOptions& options = {});

struct Partition {
  std::vector<std::vector<std::size_t>> clients;
  std::vector<std::size_t> proxy;

  std::size_t shard_size(std::size_t k) const { return clients.at(k).size(); }
};

enum class PartitionScheme { iid, label_skew };
std::string to_string(PartitionScheme s);
PartitionScheme parse_scheme(const std::string& s);

/// Splits the train documents into a server proxy shard (carved first, the
/// size of one client shard) and K client shards. iid deals the shuffled
/// remainder round-robin; label_skew draws per-category client proportions
/// from Dirichlet(alpha).
Partition partition(const Corpus& corpus, std::size_t n_clients, PartitionScheme scheme, std::uint64_t seed,
                    double alpha = 1.0);

/// Next-token batch: inputs are BOS + text minus the last token, targets are
/// the text shifted by one. Shorter rows are padded; padded targets are -1.
struct LmBatch {
  TokenBatch inputs;
  std::vector<std::int32_t> targets;
};

LmBatch make_lm_batch(const Corpus& corpus, std::span<const std::size_t> doc_indices);

/// Endless seeded stream of batches over a fixed set of documents: reshuffles
/// each epoch and yields min(batch_size, |docs|) indices per call.
class BatchStream {
 public:
  BatchStream(std::vector<std::size_t> docs, std::size_t batch_size, std::uint64_t seed);
  std::vector<std::size_t> next();
  std::size_t size() const noexcept { return docs_.size(); }

 private:
  std::vector<std::size_t> docs_;
  std::vector<std::size_t> order_;
  std::size_t batch_size_;
  std::size_t cursor_ = 0;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;

  void reshuffle();
};

/// Summed log-likelihood of each option's tokens given BOS + context.
std::vector<std::vector<double>> mc_scores(const TransformerLM& model, const PromptSet* prompts,
                                           const Tokenizer& tokenizer, std::span<const McExample> examples);

/// Argmax per row with ties going to the lowest index; mean correctness.
double accuracy_from_scores(const std::vector<std::vector<double>>& scores, std::span<const McExample> examples);

double mc_accuracy(const TransformerLM& model, const PromptSet* prompts, const Tokenizer& tokenizer,
                   std::span<const McExample> examples);

void save_corpus_jsonl(const std::filesystem::path& path, const Corpus& corpus);
Corpus load_corpus_jsonl(const std::filesystem::path& path);
void save_examples_jsonl(const std::filesystem::path& path, std::span<const McExample> examples);
std::vector<McExample> load_examples_jsonl(const std::filesystem::path& path);
void save_partition_json(const std::filesystem::path& path, const Partition& partition);
Partition load_partition_json(const std::filesystem::path& path);

}  // namespace fedsp
