#include "csrr/corpus.hpp"

#include "csrr/error.hpp"
#include "csrr/seed.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace csrr::corpus {

namespace {

constexpr std::string_view kSpecialSurface[kNumSpecials] = {"<pad>", "<unk>", "<sos>", "<eos>"};

bool is_special_surface(std::string_view token) {
  return std::find(std::begin(kSpecialSurface), std::end(kSpecialSurface), token) !=
         std::end(kSpecialSurface);
}

}  // namespace

std::string_view special_surface(int id) {
  if (id < 0 || static_cast<std::size_t>(id) >= kNumSpecials)
    throw Error("vocab.range", "not a special id: " + std::to_string(id));
  return kSpecialSurface[id];
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(std::move(current));
    current.clear();
  };
  for (char raw : text) {
    const auto c = static_cast<unsigned char>(raw);
    if (std::isspace(c)) {
      flush();
    } else if (c < 0x80 && std::ispunct(c)) {
      flush();
      out.emplace_back(1, raw);
    } else {
      current.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : raw);
    }
  }
  flush();
  return out;
}

std::vector<Conversation> parse_corpus(std::istream& in, std::size_t max_conversation_length) {
  if (max_conversation_length <= kMinUtterancesExclusive)
    throw Error("corpus.config", "max_conversation_length must exceed " +
                                     std::to_string(kMinUtterancesExclusive));
  std::vector<Conversation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); }))
      continue;
    nlohmann::json record;
    try {
      record = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw Error("corpus.malformed", "line " + std::to_string(line_no) + ": invalid JSON: " + e.what());
    }
    if (!record.is_object() || !record.contains("dialog") || !record["dialog"].is_array() ||
        record["dialog"].empty())
      throw Error("corpus.malformed",
                  "line " + std::to_string(line_no) + ": expected an object with a non-empty \"dialog\" list");
    const auto& dialog = record["dialog"];
    for (const auto& u : dialog)
      if (!u.is_string())
        throw Error("corpus.malformed", "line " + std::to_string(line_no) + ": dialog entries must be strings");
    if (dialog.size() <= kMinUtterancesExclusive) continue;

    Conversation conv;
    const std::size_t start =
        dialog.size() > max_conversation_length ? dialog.size() - max_conversation_length : 0;
    for (std::size_t i = start; i < dialog.size(); ++i)
      conv.utterances.push_back(Utterance{dialog[i].get<std::string>(), {}, 0});
    out.push_back(std::move(conv));
  }
  if (out.empty()) throw Error("corpus.empty", "no conversation with more than 3 utterances");
  return out;
}

std::vector<Conversation> load_corpus(const std::filesystem::path& path, std::size_t max_conversation_length) {
  std::ifstream in(path);
  if (!in) throw Error("corpus.io", "cannot open corpus file " + path.string());
  return parse_corpus(in, max_conversation_length);
}

void save_corpus(const std::filesystem::path& path, std::span<const Conversation> conversations) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("corpus.io", "cannot write " + path.string());
  for (const auto& conv : conversations) {
    nlohmann::json dialog = nlohmann::json::array();
    for (const auto& u : conv.utterances) dialog.push_back(u.raw_text);
    out << nlohmann::json{{"dialog", dialog}}.dump() << '\n';
  }
}

CorpusSplit split_corpus(std::span<const Conversation> conversations, const SplitRatios& ratios,
                         std::uint64_t seed) {
  if (!(ratios.train > 0 && ratios.valid > 0 && ratios.test > 0))
    throw Error("split.ratios", "split ratios must be positive");
  if (std::abs(ratios.train + ratios.valid + ratios.test - 1.0) > 1e-9)
    throw Error("split.ratios", "split ratios must sum to 1");
  const std::size_t n = conversations.size();
  if (n < 3) throw Error("split.size", "need at least 3 conversations to split, got " + std::to_string(n));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  // The small epsilon keeps exact products such as 10 * 0.1 from flooring down.
  auto take = [n](double r) { return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9)); };
  const std::size_t n_valid = take(ratios.valid);
  const std::size_t n_test = take(ratios.test);
  const std::size_t n_train = n - n_valid - n_test;

  CorpusSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    const Conversation& c = conversations[order[i]];
    if (i < n_train)
      split.train.push_back(c);
    else if (i < n_train + n_valid)
      split.valid.push_back(c);
    else
      split.test.push_back(c);
  }
  return split;
}

Vocabulary Vocabulary::build(std::span<const Conversation> train, std::size_t max_size, std::size_t min_count) {
  if (max_size < kNumSpecials + 1) throw Error("vocab.size", "vocabulary max_size must be at least 5");
  if (train.empty()) throw Error("vocab.empty", "cannot build a vocabulary from an empty train set");
  std::map<std::string, std::size_t> counts;
  for (const auto& conv : train)
    for (const auto& u : conv.utterances)
      for (auto& tok : tokenize(u.raw_text))
        if (!is_special_surface(tok)) ++counts[tok];

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> kept;
  for (auto& [tok, count] : ranked) {
    if (kept.size() >= max_size - kNumSpecials) break;
    if (count < min_count) break;
    kept.push_back(tok);
  }
  return from_tokens(std::move(kept));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  for (std::size_t i = 0; i < kNumSpecials; ++i) v.id_to_token_.emplace_back(kSpecialSurface[i]);
  for (auto& t : tokens) v.id_to_token_.push_back(std::move(t));
  for (std::size_t i = 0; i < v.id_to_token_.size(); ++i) {
    const auto& tok = v.id_to_token_[i];
    if (tok.empty() || tok.find_first_of(" \t\r\n") != std::string::npos)
      throw Error("vocab.token", "invalid vocabulary token at id " + std::to_string(i));
    if (!v.token_to_id_.emplace(tok, static_cast<int>(i)).second)
      throw Error("vocab.duplicate", "duplicate vocabulary token: " + tok);
  }
  return v;
}

Vocabulary Vocabulary::read(std::istream& in) {
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < kNumSpecials) throw Error("vocab.format", "vocabulary file lacks the special tokens");
  for (std::size_t i = 0; i < kNumSpecials; ++i)
    if (lines[i] != kSpecialSurface[i])
      throw Error("vocab.format", "vocabulary line " + std::to_string(i + 1) + " must be " +
                                      std::string(kSpecialSurface[i]));
  return from_tokens(std::vector<std::string>(lines.begin() + kNumSpecials, lines.end()));
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("vocab.io", "cannot open vocabulary " + path.string());
  return read(in);
}

void Vocabulary::write(std::ostream& out) const {
  for (const auto& t : id_to_token_) out << t << '\n';
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("vocab.io", "cannot write vocabulary " + path.string());
  write(out);
}

int Vocabulary::id(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size())
    throw Error("vocab.range", "token id out of range: " + std::to_string(id));
  return id_to_token_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& tok : tokenize(text)) ids.push_back(id(tok));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kEos) break;
    if (id == kPad || id == kSos) continue;
    if (!out.empty()) out.push_back(' ');
    out += token(id);
  }
  return out;
}

std::uint64_t Vocabulary::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto feed = [&h](unsigned char c) {
    h ^= c;
    h *= 0x100000001b3ULL;
  };
  for (const auto& t : id_to_token_) {
    for (char c : t) feed(static_cast<unsigned char>(c));
    feed('\n');
  }
  return h;
}

Utterance encode_utterance(std::string_view text, const Vocabulary& vocab, std::size_t pad_length) {
  if (pad_length < 2) throw Error("corpus.config", "pad_length must be at least 2");
  Utterance u;
  u.raw_text = std::string(text);
  u.token_ids = vocab.encode(text);
  if (u.token_ids.size() > pad_length - 1) u.token_ids.resize(pad_length - 1);
  u.token_ids.push_back(kEos);
  u.length = u.token_ids.size();
  return u;
}

Utterance utterance_from_ids(std::span<const int> ids, const Vocabulary& vocab, std::size_t pad_length) {
  if (pad_length < 2) throw Error("corpus.config", "pad_length must be at least 2");
  Utterance u;
  u.token_ids.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(std::min(ids.size(), pad_length - 1)));
  for (int id : u.token_ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) throw Error("corpus.id", "token id out of range");
  u.raw_text = vocab.decode(u.token_ids);
  u.token_ids.push_back(kEos);
  u.length = u.token_ids.size();
  return u;
}

Conversation encode_conversation(const Conversation& conversation, const Vocabulary& vocab,
                                 std::size_t pad_length) {
  Conversation out;
  out.utterances.reserve(conversation.size());
  for (const auto& u : conversation.utterances)
    out.utterances.push_back(encode_utterance(u.raw_text, vocab, pad_length));
  return out;
}

std::vector<Conversation> encode_all(std::span<const Conversation> conversations, const Vocabulary& vocab,
                                     std::size_t pad_length) {
  std::vector<Conversation> out;
  out.reserve(conversations.size());
  for (const auto& c : conversations) out.push_back(encode_conversation(c, vocab, pad_length));
  return out;
}

Conversation Batch::conversation(std::size_t b) const {
  Conversation c;
  for (std::size_t t = 0; t < conversation_lengths[b]; ++t) {
    Utterance u;
    u.length = length(b, t);
    u.token_ids.resize(pad_length);
    for (std::size_t k = 0; k < pad_length; ++k) u.token_ids[k] = token(b, t, k);
    c.utterances.push_back(std::move(u));
  }
  return c;
}

std::vector<Batch> make_batches(std::span<const Conversation> conversations, std::size_t batch_size,
                                std::uint64_t shuffle_seed, std::size_t pad_length) {
  if (batch_size < 1) throw Error("batch.size", "batch_size must be at least 1");
  std::vector<std::size_t> order(conversations.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(shuffle_seed, 0));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, order.size() - start);
    Batch batch;
    batch.batch_size = count;
    batch.pad_length = pad_length;
    for (std::size_t i = 0; i < count; ++i)
      batch.max_utterances = std::max(batch.max_utterances, conversations[order[start + i]].size());
    const std::size_t cells = count * batch.max_utterances;
    batch.tokens.assign(cells * pad_length, kPad);
    batch.mask.assign(cells * pad_length, 0);
    batch.lengths.assign(cells, 0);
    for (std::size_t b = 0; b < count; ++b) {
      const Conversation& conv = conversations[order[start + b]];
      batch.source_index.push_back(order[start + b]);
      batch.conversation_lengths.push_back(conv.size());
      for (std::size_t t = 0; t < conv.size(); ++t) {
        const Utterance& u = conv.utterances[t];
        if (u.length == 0 || u.length > pad_length || u.token_ids.size() < u.length)
          throw Error("batch.encoding", "conversation " + std::to_string(order[start + b]) +
                                            " is not encoded for pad_length " + std::to_string(pad_length));
        const std::size_t cell = b * batch.max_utterances + t;
        batch.lengths[cell] = u.length;
        for (std::size_t k = 0; k < u.length; ++k) {
          batch.tokens[cell * pad_length + k] = u.token_ids[k];
          batch.mask[cell * pad_length + k] = 1;
        }
      }
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

}  // namespace csrr::corpus
