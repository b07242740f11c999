#pragma once

// Conversation corpora: JSON-lines ingestion, filtering, splitting,
// vocabulary, token encoding and padded batches.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace csrr::corpus {

inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kSos = 2;
inline constexpr int kEos = 3;
inline constexpr std::size_t kNumSpecials = 4;

inline constexpr std::size_t kDefaultPadLength = 15;
inline constexpr std::size_t kDefaultMaxConversationLength = 10;
// Conversations need strictly more than this many utterances.
inline constexpr std::size_t kMinUtterancesExclusive = 3;

struct Utterance {
  std::string raw_text;
  // Empty until encode_conversation; afterwards ends in EOS and may carry
  // trailing PAD beyond `length`.
  std::vector<int> token_ids;
  std::size_t length = 0;
};

struct Conversation {
  std::vector<Utterance> utterances;

  std::size_t size() const { return utterances.size(); }
};

// Lowercased, whitespace separated, ASCII punctuation split into single
// character tokens.
std::vector<std::string> tokenize(std::string_view text);

// Reads {"dialog": [...]} records, keeps those with more than three
// utterances and truncates each to its most recent max_conversation_length.
std::vector<Conversation> parse_corpus(std::istream& in,
                                       std::size_t max_conversation_length = kDefaultMaxConversationLength);
std::vector<Conversation> load_corpus(const std::filesystem::path& path,
                                      std::size_t max_conversation_length = kDefaultMaxConversationLength);
void save_corpus(const std::filesystem::path& path, std::span<const Conversation> conversations);

struct SplitRatios {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

struct CorpusSplit {
  std::vector<Conversation> train;
  std::vector<Conversation> valid;
  std::vector<Conversation> test;
};

// Seeded shuffle, then floor(N * ratio) for valid and test; the remainder
// goes to train.
CorpusSplit split_corpus(std::span<const Conversation> conversations, const SplitRatios& ratios,
                         std::uint64_t seed);

class Vocabulary {
 public:
  static constexpr std::size_t kDefaultMaxSize = 20000;

  // Frequency descending, ties broken lexicographically; at most
  // max_size - 4 tokens with count >= min_count are kept.
  static Vocabulary build(std::span<const Conversation> train, std::size_t max_size = kDefaultMaxSize,
                          std::size_t min_count = 1);
  // tokens excludes the four specials.
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load(const std::filesystem::path& path);
  static Vocabulary read(std::istream& in);
  void save(const std::filesystem::path& path) const;
  void write(std::ostream& out) const;

  std::size_t size() const { return id_to_token_.size(); }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  const std::vector<std::string>& tokens() const { return id_to_token_; }

  std::vector<int> encode(std::string_view text) const;
  // Joins surface forms, stopping at EOS and skipping PAD/SOS.
  std::string decode(std::span<const int> ids) const;

  // FNV-1a over the serialized file contents.
  std::uint64_t fingerprint() const;

 private:
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
};

std::string_view special_surface(int id);

Utterance encode_utterance(std::string_view text, const Vocabulary& vocab,
                           std::size_t pad_length = kDefaultPadLength);
// Utterance built from already-generated ids (no EOS); raw_text is their
// decoded surface form.
Utterance utterance_from_ids(std::span<const int> ids, const Vocabulary& vocab,
                             std::size_t pad_length = kDefaultPadLength);

Conversation encode_conversation(const Conversation& conversation, const Vocabulary& vocab,
                                 std::size_t pad_length = kDefaultPadLength);
std::vector<Conversation> encode_all(std::span<const Conversation> conversations,
                                     const Vocabulary& vocab, std::size_t pad_length = kDefaultPadLength);

// Dense padded view over several encoded conversations.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t max_utterances = 0;
  std::size_t pad_length = 0;
  std::vector<int> tokens;             // [batch][utterance][position], PAD filled
  std::vector<std::size_t> lengths;    // [batch][utterance], 0 beyond conversation end
  std::vector<std::size_t> conversation_lengths;
  std::vector<unsigned char> mask;     // same layout as tokens
  std::vector<std::size_t> source_index;  // position in the input list

  int token(std::size_t b, std::size_t t, std::size_t k) const {
    return tokens[(b * max_utterances + t) * pad_length + k];
  }
  std::size_t length(std::size_t b, std::size_t t) const { return lengths[b * max_utterances + t]; }
  unsigned char mask_at(std::size_t b, std::size_t t, std::size_t k) const {
    return mask[(b * max_utterances + t) * pad_length + k];
  }
  // Rebuilds conversation b with every utterance padded to pad_length.
  Conversation conversation(std::size_t b) const;
};

// One epoch: every conversation exactly once, seeded order, final partial
// batch kept.
std::vector<Batch> make_batches(std::span<const Conversation> conversations, std::size_t batch_size,
                                std::uint64_t shuffle_seed, std::size_t pad_length = kDefaultPadLength);

}  // namespace csrr::corpus
