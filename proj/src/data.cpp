#include "fedsp/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "fedsp/ops.hpp"

namespace fedsp {

using json = nlohmann::json;

std::u32string utf8_decode(std::string_view text) {
  std::u32string out;
  for (std::size_t i = 0; i < text.size();) {
    const auto c = static_cast<unsigned char>(text[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > text.size()) throw std::invalid_argument("invalid UTF-8 at byte " + std::to_string(i));
    char32_t cp = len == 1 ? c : c & (0x7F >> len);
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(text[i + k]);
      if ((cc >> 6) != 0x2) throw std::invalid_argument("invalid UTF-8 at byte " + std::to_string(i + k));
      cp = (cp << 6) | (cc & 0x3F);
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string utf8_encode(std::u32string_view text) {
  std::string out;
  for (char32_t cp : text) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

Tokenizer Tokenizer::from_texts(std::span<const std::string> texts) {
  std::set<char32_t> chars;
  for (const auto& t : texts) {
    for (char32_t c : utf8_decode(t)) chars.insert(c);
  }
  return from_alphabet(std::u32string(chars.begin(), chars.end()));
}

Tokenizer Tokenizer::from_alphabet(std::u32string alphabet) {
  std::sort(alphabet.begin(), alphabet.end());
  alphabet.erase(std::unique(alphabet.begin(), alphabet.end()), alphabet.end());
  Tokenizer t;
  t.alphabet_ = std::move(alphabet);
  return t;
}

std::vector<std::int32_t> Tokenizer::encode(std::string_view text) const {
  std::vector<std::int32_t> ids;
  for (char32_t c : utf8_decode(text)) {
    auto it = std::lower_bound(alphabet_.begin(), alphabet_.end(), c);
    if (it == alphabet_.end() || *it != c) {
      throw std::invalid_argument("character U+" + std::to_string(static_cast<std::uint32_t>(c)) +
                                  " is not in the tokenizer alphabet");
    }
    ids.push_back(static_cast<std::int32_t>(it - alphabet_.begin()) + 2);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const std::int32_t> ids) const {
  std::u32string out;
  for (auto id : ids) {
    if (id == kPad || id == kBos) continue;
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_size()) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    }
    out.push_back(alphabet_[static_cast<std::size_t>(id - 2)]);
  }
  return utf8_encode(out);
}

std::string to_string(Split s) {
  switch (s) {
    case Split::pretrain: return "pretrain";
    case Split::train: return "train";
    case Split::eval: return "eval";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "pretrain") return Split::pretrain;
  if (s == "train") return Split::train;
  if (s == "eval") return Split::eval;
  throw std::invalid_argument("unknown split '" + s + "'");
}

std::vector<std::size_t> Corpus::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < documents.size(); ++i) {
    if (documents[i].split == split) out.push_back(i);
  }
  return out;
}

std::string to_string(ToyRule r) {
  switch (r) {
    case ToyRule::first: return "first";
    case ToyRule::second: return "second";
    case ToyRule::third: return "third";
  }
  return "?";
}

ToyRule parse_rule(const std::string& s) {
  if (s == "first") return ToyRule::first;
  if (s == "second") return ToyRule::second;
  if (s == "third") return ToyRule::third;
  throw std::invalid_argument("unknown task '" + s + "' (expected first, second or third)");
}

char rule_tag(ToyRule r) {
  switch (r) {
    case ToyRule::first: return 'F';
    case ToyRule::second: return 'S';
    case ToyRule::third: return 'T';
  }
  return '?';
}

int apply_rule(ToyRule r, const std::array<int, 3>& digits) { return digits[static_cast<std::size_t>(r)]; }

namespace {

constexpr ToyRule kRules[] = {ToyRule::first, ToyRule::second, ToyRule::third};

std::string question(char tag, const std::array<int, 3>& d) {
  std::string s{tag, ':'};
  for (int v : d) s.push_back(static_cast<char>('0' + v));
  return s + "=";
}

std::string answer(int v) { return std::string(1, static_cast<char>('0' + v)); }

}  // namespace

ToyTasks make_toy_tasks(std::uint64_t seed, const ToyTaskOptions& options) {
  if (options.n_options < 2 || options.n_options > 10) throw std::invalid_argument("n_options must be in 2..10");
  if (!(options.heldout_fraction > 0) || !(options.heldout_fraction < 1)) {
    throw std::invalid_argument("heldout_fraction must be in (0, 1)");
  }
  std::mt19937_64 rng(seed);

  std::vector<std::array<int, 3>> triples;
  for (int a = 0; a < 10; ++a) {
    for (int b = 0; b < 10; ++b) {
      for (int c = 0; c < 10; ++c) triples.push_back({a, b, c});
    }
  }
  std::shuffle(triples.begin(), triples.end(), rng);
  const auto n_heldout = static_cast<std::ptrdiff_t>(std::llround(options.heldout_fraction * triples.size()));
  std::vector<std::array<int, 3>> heldout(triples.begin(), triples.begin() + n_heldout);
  std::vector<std::array<int, 3>> seen(triples.begin() + n_heldout, triples.end());

  ToyTasks out;
  auto& docs = out.corpus.documents;
  std::uniform_int_distribution<std::size_t> pick(0, seen.size() - 1);
  std::uniform_int_distribution<int> pick_rule(0, 2);
  std::bernoulli_distribution tagged(options.tagged_fraction);
  for (std::size_t i = 0; i < options.pretrain_docs; ++i) {
    const auto& d = seen[pick(rng)];
    const auto rule = kRules[pick_rule(rng)];
    const char tag = tagged(rng) ? rule_tag(rule) : '?';
    docs.push_back({question(tag, d) + answer(apply_rule(rule, d)), Split::pretrain, d[0]});
  }
  for (const auto& d : seen) {
    docs.push_back({question('?', d) + answer(apply_rule(options.task, d)), Split::train, d[0]});
  }
  for (const auto& d : heldout) {
    docs.push_back({question('?', d) + answer(apply_rule(options.task, d)), Split::eval, d[0]});
  }

  std::uniform_int_distribution<int> digit(0, 9);
  for (const auto& d : heldout) {
    McExample ex;
    ex.context = question('?', d);
    ex.category = d[0];
    std::vector<int> answers{apply_rule(options.task, d)};
    for (auto r : kRules) {
      const int v = apply_rule(r, d);
      if (answers.size() < options.n_options && std::find(answers.begin(), answers.end(), v) == answers.end()) {
        answers.push_back(v);
      }
    }
    while (answers.size() < options.n_options) {
      const int v = digit(rng);
      if (std::find(answers.begin(), answers.end(), v) == answers.end()) answers.push_back(v);
    }
    std::vector<std::size_t> order(answers.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t slot = 0; slot < order.size(); ++slot) {
      ex.options.push_back(answer(answers[order[slot]]));
      if (order[slot] == 0) ex.gold = slot;
    }
    out.probes.push_back(std::move(ex));
  }

  std::vector<std::string> texts;
  texts.reserve(docs.size());
  for (const auto& d : docs) texts.push_back(d.text);
  out.corpus.tokenizer = Tokenizer::from_texts(texts);
  return out;
}

std::string to_string(PartitionScheme s) { return s == PartitionScheme::iid ? "iid" : "label_skew"; }

PartitionScheme parse_scheme(const std::string& s) {
  if (s == "iid") return PartitionScheme::iid;
  if (s == "label_skew") return PartitionScheme::label_skew;
  throw std::invalid_argument("unknown partition scheme '" + s + "'");
}

Partition partition(const Corpus& corpus, std::size_t n_clients, PartitionScheme scheme, std::uint64_t seed,
                    double alpha) {
  if (n_clients == 0) throw std::invalid_argument("partition: need at least one client");
  auto train = corpus.indices(Split::train);
  if (train.size() < n_clients + 1) {
    throw std::invalid_argument("partition: " + std::to_string(train.size()) + " train examples cannot fill " +
                                std::to_string(n_clients) + " client shards plus a proxy shard");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(train.begin(), train.end(), rng);

  Partition p;
  const std::size_t proxy_size = (train.size() + n_clients) / (n_clients + 1);
  p.proxy.assign(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(proxy_size));
  std::vector<std::size_t> rest(train.begin() + static_cast<std::ptrdiff_t>(proxy_size), train.end());
  p.clients.assign(n_clients, {});

  if (scheme == PartitionScheme::iid) {
    for (std::size_t i = 0; i < rest.size(); ++i) p.clients[i % n_clients].push_back(rest[i]);
  } else {
    if (!(alpha > 0)) throw std::invalid_argument("partition: label_skew needs alpha > 0");
    std::map<int, std::vector<std::size_t>> by_category;
    for (auto i : rest) by_category[corpus.documents[i].category].push_back(i);
    std::gamma_distribution<double> gamma(alpha, 1.0);
    for (int attempt = 0;; ++attempt) {
      for (auto& c : p.clients) c.clear();
      for (const auto& [cat, members] : by_category) {
        std::vector<double> w(n_clients);
        double total = 0;
        for (auto& x : w) total += (x = gamma(rng));
        std::size_t start = 0;
        double cum = 0;
        for (std::size_t k = 0; k < n_clients; ++k) {
          cum += w[k] / total;
          const std::size_t end =
              k + 1 == n_clients ? members.size()
                                 : std::min(members.size(), static_cast<std::size_t>(std::llround(cum * members.size())));
          for (std::size_t j = start; j < end; ++j) p.clients[k].push_back(members[j]);
          start = std::max(start, end);
        }
      }
      const bool all_filled = std::none_of(p.clients.begin(), p.clients.end(), [](const auto& c) { return c.empty(); });
      if (all_filled) break;
      if (attempt == 99) throw std::runtime_error("partition: label_skew left a client shard empty after 100 draws");
    }
    for (auto& c : p.clients) std::sort(c.begin(), c.end());
  }
  return p;
}

LmBatch make_lm_batch(const Corpus& corpus, std::span<const std::size_t> doc_indices) {
  if (doc_indices.empty()) throw std::invalid_argument("make_lm_batch: empty batch");
  std::vector<std::vector<std::int32_t>> seqs;
  std::size_t longest = 0;
  for (auto i : doc_indices) {
    auto ids = corpus.tokenizer.encode(corpus.documents.at(i).text);
    ids.insert(ids.begin(), Tokenizer::kBos);
    longest = std::max(longest, ids.size());
    seqs.push_back(std::move(ids));
  }
  if (longest < 2) throw std::invalid_argument("make_lm_batch: documents are empty");
  LmBatch b;
  b.inputs.batch = seqs.size();
  b.inputs.seq = longest - 1;
  b.inputs.ids.assign(b.inputs.batch * b.inputs.seq, Tokenizer::kPad);
  b.targets.assign(b.inputs.batch * b.inputs.seq, -1);
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    for (std::size_t t = 0; t + 1 < seqs[r].size(); ++t) {
      b.inputs.ids[r * b.inputs.seq + t] = seqs[r][t];
      b.targets[r * b.inputs.seq + t] = seqs[r][t + 1];
    }
  }
  return b;
}

BatchStream::BatchStream(std::vector<std::size_t> docs, std::size_t batch_size, std::uint64_t seed)
    : docs_(std::move(docs)), batch_size_(batch_size), seed_(seed) {
  if (docs_.empty()) throw std::invalid_argument("BatchStream: no documents");
  if (batch_size_ == 0) throw std::invalid_argument("BatchStream: batch size must be positive");
  reshuffle();
}

void BatchStream::reshuffle() {
  order_ = docs_;
  std::mt19937_64 rng(seed_ ^ (0x9E3779B97F4A7C15ULL * (epoch_ + 1)));
  std::shuffle(order_.begin(), order_.end(), rng);
  ++epoch_;
  cursor_ = 0;
}

std::vector<std::size_t> BatchStream::next() {
  const std::size_t n = std::min(batch_size_, docs_.size());
  std::vector<std::size_t> out;
  out.reserve(n);
  while (out.size() < n) {
    if (cursor_ == order_.size()) reshuffle();
    out.push_back(order_[cursor_++]);
  }
  return out;
}

std::vector<std::vector<double>> mc_scores(const TransformerLM& model, const PromptSet* prompts,
                                           const Tokenizer& tokenizer, std::span<const McExample> examples) {
  NoGradGuard no_grad;
  struct Item {
    std::size_t example, option, context_len;
    std::vector<std::int32_t> seq;
  };
  // Options that share their input prefix (e.g. one-token options after the
  // same context) share a single forward row.
  std::vector<Item> items;
  std::map<std::vector<std::int32_t>, std::size_t> row_of;
  std::vector<std::vector<std::int32_t>> rows;
  std::vector<std::vector<double>> scores(examples.size());
  for (std::size_t e = 0; e < examples.size(); ++e) {
    const auto& ex = examples[e];
    if (ex.options.size() < 2) throw std::invalid_argument("mc_scores: example needs at least two options");
    if (ex.gold >= ex.options.size()) throw std::invalid_argument("mc_scores: gold index out of range");
    auto ctx = tokenizer.encode(ex.context);
    ctx.insert(ctx.begin(), Tokenizer::kBos);
    scores[e].assign(ex.options.size(), 0.0);
    for (std::size_t o = 0; o < ex.options.size(); ++o) {
      auto opt = tokenizer.encode(ex.options[o]);
      if (opt.empty()) throw std::invalid_argument("mc_scores: empty option");
      Item it{e, o, ctx.size(), ctx};
      it.seq.insert(it.seq.end(), opt.begin(), opt.end());
      if (it.seq.size() - 1 > model.config().max_seq_len) {
        throw std::invalid_argument("mc_scores: context plus option exceeds max_seq_len");
      }
      std::vector<std::int32_t> input(it.seq.begin(), it.seq.end() - 1);
      if (row_of.emplace(input, rows.size()).second) rows.push_back(std::move(input));
      items.push_back(std::move(it));
    }
  }

  std::map<std::size_t, std::vector<std::size_t>> rows_by_len;
  for (std::size_t r = 0; r < rows.size(); ++r) rows_by_len[rows[r].size()].push_back(r);

  // Log-softmax of every position of every unique input row.
  const std::size_t vocab = model.config().vocab_size;
  std::vector<std::vector<double>> logp(rows.size());
  constexpr std::size_t kChunk = 64;
  for (const auto& [len, members] : rows_by_len) {
    for (std::size_t start = 0; start < members.size(); start += kChunk) {
      const std::size_t n = std::min(kChunk, members.size() - start);
      TokenBatch tb;
      tb.batch = n;
      tb.seq = len;
      for (std::size_t r = 0; r < n; ++r) {
        const auto& s = rows[members[start + r]];
        tb.ids.insert(tb.ids.end(), s.begin(), s.end());
      }
      const auto logits = model.forward(tb, prompts).logits.data();
      for (std::size_t r = 0; r < n; ++r) {
        auto& out = logp[members[start + r]];
        out.assign(logits.begin() + static_cast<std::ptrdiff_t>(r * len * vocab),
                   logits.begin() + static_cast<std::ptrdiff_t>((r + 1) * len * vocab));
        for (std::size_t pos = 0; pos < len; ++pos) {
          double* row = out.data() + pos * vocab;
          const double mx = *std::max_element(row, row + vocab);
          double z = 0;
          for (std::size_t v = 0; v < vocab; ++v) z += std::exp(row[v] - mx);
          const double lz = mx + std::log(z);
          for (std::size_t v = 0; v < vocab; ++v) row[v] -= lz;
        }
      }
    }
  }

  for (const auto& it : items) {
    const auto& lp = logp[row_of.at(std::vector<std::int32_t>(it.seq.begin(), it.seq.end() - 1))];
    double total = 0;
    for (std::size_t pos = it.context_len; pos < it.seq.size(); ++pos) {
      total += lp[(pos - 1) * vocab + static_cast<std::size_t>(it.seq[pos])];
    }
    scores[it.example][it.option] = total;
  }
  return scores;
}

double accuracy_from_scores(const std::vector<std::vector<double>>& scores, std::span<const McExample> examples) {
  if (examples.empty()) throw std::invalid_argument("mc_accuracy: no examples");
  if (scores.size() != examples.size()) throw std::invalid_argument("mc_accuracy: one score row per example needed");
  std::size_t correct = 0;
  for (std::size_t e = 0; e < examples.size(); ++e) {
    std::size_t best = 0;
    for (std::size_t o = 1; o < scores[e].size(); ++o) {
      if (scores[e][o] > scores[e][best]) best = o;
    }
    if (best == examples[e].gold) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

double mc_accuracy(const TransformerLM& model, const PromptSet* prompts, const Tokenizer& tokenizer,
                   std::span<const McExample> examples) {
  if (examples.empty()) throw std::invalid_argument("mc_accuracy: no examples");
  return accuracy_from_scores(mc_scores(model, prompts, tokenizer, examples), examples);
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return f;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  return f;
}

}  // namespace

void save_corpus_jsonl(const std::filesystem::path& path, const Corpus& corpus) {
  auto f = open_out(path);
  f << json{{"alphabet", utf8_encode(corpus.tokenizer.alphabet())}}.dump() << '\n';
  for (const auto& d : corpus.documents) {
    f << json{{"text", d.text}, {"split", to_string(d.split)}, {"category", d.category}}.dump() << '\n';
  }
}

Corpus load_corpus_jsonl(const std::filesystem::path& path) {
  auto f = open_in(path);
  Corpus c;
  std::string line;
  bool header = true;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    if (header) {
      c.tokenizer = Tokenizer::from_alphabet(utf8_decode(j.at("alphabet").get<std::string>()));
      header = false;
      continue;
    }
    c.documents.push_back({j.at("text").get<std::string>(), parse_split(j.at("split").get<std::string>()),
                           j.value("category", 0)});
  }
  if (header) throw std::runtime_error(path.string() + ": empty corpus file");
  return c;
}

void save_examples_jsonl(const std::filesystem::path& path, std::span<const McExample> examples) {
  auto f = open_out(path);
  for (const auto& e : examples) {
    f << json{{"context", e.context}, {"options", e.options}, {"gold", e.gold}, {"category", e.category}}.dump()
      << '\n';
  }
}

std::vector<McExample> load_examples_jsonl(const std::filesystem::path& path) {
  auto f = open_in(path);
  std::vector<McExample> out;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    auto j = json::parse(line);
    McExample e;
    e.context = j.at("context").get<std::string>();
    e.options = j.at("options").get<std::vector<std::string>>();
    e.gold = j.at("gold").get<std::size_t>();
    e.category = j.value("category", 0);
    if (e.gold >= e.options.size()) throw std::runtime_error(path.string() + ": gold index out of range");
    out.push_back(std::move(e));
  }
  return out;
}

void save_partition_json(const std::filesystem::path& path, const Partition& partition) {
  auto f = open_out(path);
  f << json{{"proxy", partition.proxy}, {"clients", partition.clients}}.dump(1) << '\n';
}

Partition load_partition_json(const std::filesystem::path& path) {
  auto f = open_in(path);
  auto j = json::parse(f);
  Partition p;
  p.proxy = j.at("proxy").get<std::vector<std::size_t>>();
  p.clients = j.at("clients").get<std::vector<std::vector<std::size_t>>>();
  return p;
}

}  // namespace fedsp
