#pragma once

// Embedding-based response similarity (Average, Extrema, Greedy) and
// distinct-n diversity.

#include <Eigen/Dense>

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace csrr::metrics {

using Vec = Eigen::VectorXd;

// Word vectors of one fixed dimension. Unknown words are skipped by every
// metric, and so are words whose vector is all zeros.
class EmbeddingTable {
 public:
  explicit EmbeddingTable(std::size_t dim);

  // Plain-text word2vec format: optional "count dim" header, then
  // "word v1 ... vd" per line. Duplicate words keep their first vector.
  static EmbeddingTable read(std::istream& in);
  static EmbeddingTable load(const std::filesystem::path& path);

  // Returns false (and keeps the old vector) for a duplicate word.
  bool add(std::string word, Vec vector);
  const Vec* find(std::string_view word) const;

  std::size_t size() const { return vectors_.size(); }
  std::size_t dim() const { return dim_; }

 private:
  std::size_t dim_;
  std::unordered_map<std::string, Vec> vectors_;
};

using Tokens = std::span<const std::string>;

// Cosine of the mean in-vocabulary vectors; empty when either side has no
// usable token or a zero mean.
std::optional<double> embedding_average(Tokens response, Tokens reference, const EmbeddingTable& table);

// Per dimension keep max if |max| >= |min| else min, then cosine of the two
// extrema vectors.
std::optional<double> embedding_extrema(Tokens response, Tokens reference, const EmbeddingTable& table);
Vec extrema_vector(std::span<const Vec> vectors);

// Symmetrised greedy matching: (G(resp, ref) + G(ref, resp)) / 2 where
// G(a, b) averages, over tokens of a, the best cosine against tokens of b.
std::optional<double> embedding_greedy(Tokens response, Tokens reference, const EmbeddingTable& table);

// Unique n-grams over total n-grams pooled across all responses; 0 when
// there are no n-grams.
double distinct_n(std::span<const std::vector<std::string>> responses, std::size_t n);

struct EvalReport {
  std::optional<double> average;
  std::optional<double> extrema;
  std::optional<double> greedy;
  double dist1 = 0.0;
  double dist2 = 0.0;
  std::size_t response_count = 0;
  std::size_t average_excluded = 0;
  std::size_t extrema_excluded = 0;
  std::size_t greedy_excluded = 0;

  std::string to_json() const;
  std::string to_table() const;
};

std::vector<std::string> split_tokens(std::string_view line);

// Line-aligned responses/references, already tokenized (whitespace split).
EvalReport evaluate(std::span<const std::string> responses, std::span<const std::string> references,
                    const EmbeddingTable& table);
EvalReport evaluate_files(const std::filesystem::path& responses, const std::filesystem::path& references,
                          const EmbeddingTable& table);

}  // namespace csrr::metrics
