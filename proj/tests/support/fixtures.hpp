#pragma once

#include "csrr/corpus.hpp"
#include "csrr/model.hpp"

#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace csrr::testing {

// Eight content words plus four specials: vocab 12.
inline corpus::Vocabulary toy_vocab() {
  return corpus::Vocabulary::from_tokens({"a", "b", "c", "d", "e", "f", "g", "h"});
}

inline model::ModelConfig toy_config(model::Mode mode = model::Mode::csrr) {
  model::ModelConfig c;
  c.hidden_dim = 8;
  c.embed_dim = 6;
  c.latent_dim = 4;
  c.pad_length = 6;
  c.max_conv_length = 10;
  c.vocab_size = 12;
  c.mode = mode;
  return c;
}

inline std::string random_sentence(std::mt19937_64& rng, std::size_t min_len, std::size_t max_len) {
  static const char* words[] = {"a", "b", "c", "d", "e", "f", "g", "h"};
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  std::uniform_int_distribution<int> w(0, 7);
  std::string s;
  const std::size_t n = len(rng);
  for (std::size_t i = 0; i < n; ++i) {
    if (!s.empty()) s += ' ';
    s += words[w(rng)];
  }
  return s;
}

inline corpus::Conversation random_conversation(std::mt19937_64& rng, std::size_t utterances,
                                                const corpus::Vocabulary& vocab, std::size_t pad_length) {
  corpus::Conversation c;
  for (std::size_t i = 0; i < utterances; ++i)
    c.utterances.push_back(corpus::encode_utterance(random_sentence(rng, 1, pad_length - 1), vocab, pad_length));
  return c;
}

inline corpus::Conversation text_conversation(const std::vector<std::string>& texts, const corpus::Vocabulary& vocab,
                                              std::size_t pad_length) {
  corpus::Conversation c;
  for (const auto& t : texts) c.utterances.push_back(corpus::encode_utterance(t, vocab, pad_length));
  return c;
}

// Ten four-utterance conversations. The last two share a context and differ
// only in the response.
inline std::vector<std::vector<std::string>> overfit_texts() {
  return {
      {"a b", "c d", "e f", "g h"},     {"b c", "d e", "f g", "h a"},     {"c d e", "f g", "h a", "b c d"},
      {"d e", "f g h", "a b", "c"},     {"e f", "g", "h a b", "c d e"},   {"f g", "h a", "b c", "d e f"},
      {"g h", "a b c", "d", "e f g"},   {"h a", "b", "c d e", "f g h"},   {"a c", "e g", "b d", "f h"},
      {"a c", "e g", "b d", "e g a"},
  };
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path = std::filesystem::temp_directory_path() / ("csrr-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

}  // namespace csrr::testing
