#include "csrr/metrics.hpp"

#include "csrr/error.hpp"
#include "csrr/inference.hpp"

#include <fmt/format.h>
#include <json.hpp>

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace csrr::metrics {

namespace {

std::vector<Vec> lookup_all(Tokens tokens, const EmbeddingTable& table) {
  std::vector<Vec> out;
  for (const auto& t : tokens)
    if (const Vec* v = table.find(t)) out.push_back(*v);
  return out;
}

std::optional<double> cosine(const Vec& a, const Vec& b) {
  const double na = a.norm();
  const double nb = b.norm();
  if (na == 0.0 || nb == 0.0) return std::nullopt;
  return a.dot(b) / (na * nb);
}

double greedy_direction(const std::vector<Vec>& from, const std::vector<Vec>& to) {
  double total = 0.0;
  for (const auto& w : from) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& u : to) best = std::max(best, *cosine(w, u));
    total += best;
  }
  return total / static_cast<double>(from.size());
}

nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::string opt_text(const std::optional<double>& v) { return v ? fmt::format("{:.4f}", *v) : std::string("n/a"); }

}  // namespace

EmbeddingTable::EmbeddingTable(std::size_t dim) : dim_(dim) {
  if (dim_ == 0) throw Error("embeddings.dim", "embedding dimension must be positive");
}

bool EmbeddingTable::add(std::string word, Vec vector) {
  if (static_cast<std::size_t>(vector.size()) != dim_)
    throw Error("embeddings.dim", "vector for '" + word + "' has dimension " + std::to_string(vector.size()) +
                                      ", expected " + std::to_string(dim_));
  return vectors_.emplace(std::move(word), std::move(vector)).second;
}

const Vec* EmbeddingTable::find(std::string_view word) const {
  auto it = vectors_.find(std::string(word));
  if (it == vectors_.end() || it->second.isZero(0.0)) return nullptr;
  return &it->second;
}

EmbeddingTable EmbeddingTable::read(std::istream& in) {
  std::optional<EmbeddingTable> table;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream fields(line);
    std::vector<std::string> parts;
    for (std::string f; fields >> f;) parts.push_back(std::move(f));
    if (parts.empty()) continue;
    if (line_no == 1 && parts.size() == 2 && parts[0].find_first_not_of("0123456789") == std::string::npos &&
        parts[1].find_first_not_of("0123456789") == std::string::npos) {
      table.emplace(std::stoul(parts[1]));
      continue;
    }
    if (parts.size() < 2) throw Error("embeddings.format", "line " + std::to_string(line_no) + ": no vector values");
    if (!table) table.emplace(parts.size() - 1);
    if (parts.size() - 1 != table->dim())
      throw Error("embeddings.format", "line " + std::to_string(line_no) + ": expected " +
                                           std::to_string(table->dim()) + " values, found " +
                                           std::to_string(parts.size() - 1));
    Vec v(static_cast<Eigen::Index>(table->dim()));
    for (std::size_t i = 1; i < parts.size(); ++i) {
      try {
        std::size_t used = 0;
        v(static_cast<Eigen::Index>(i - 1)) = std::stod(parts[i], &used);
        if (used != parts[i].size()) throw std::invalid_argument(parts[i]);
      } catch (const std::exception&) {
        throw Error("embeddings.format", "line " + std::to_string(line_no) + ": bad number '" + parts[i] + "'");
      }
    }
    table->add(parts[0], std::move(v));
  }
  if (!table) throw Error("embeddings.empty", "embedding file has no vectors");
  return std::move(*table);
}

EmbeddingTable EmbeddingTable::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("embeddings.io", "cannot open embeddings " + path.string());
  return read(in);
}

std::optional<double> embedding_average(Tokens response, Tokens reference, const EmbeddingTable& table) {
  const auto a = lookup_all(response, table);
  const auto b = lookup_all(reference, table);
  if (a.empty() || b.empty()) return std::nullopt;
  Vec ma = Vec::Zero(static_cast<Eigen::Index>(table.dim()));
  Vec mb = ma;
  for (const auto& v : a) ma += v;
  for (const auto& v : b) mb += v;
  ma /= static_cast<double>(a.size());
  mb /= static_cast<double>(b.size());
  return cosine(ma, mb);
}

Vec extrema_vector(std::span<const Vec> vectors) {
  if (vectors.empty()) throw Error("metrics.empty", "extrema of an empty set");
  Vec hi = vectors.front();
  Vec lo = vectors.front();
  for (const auto& v : vectors) {
    hi = hi.cwiseMax(v);
    lo = lo.cwiseMin(v);
  }
  Vec out(hi.size());
  for (Eigen::Index j = 0; j < hi.size(); ++j) out(j) = std::abs(hi(j)) >= std::abs(lo(j)) ? hi(j) : lo(j);
  return out;
}

std::optional<double> embedding_extrema(Tokens response, Tokens reference, const EmbeddingTable& table) {
  const auto a = lookup_all(response, table);
  const auto b = lookup_all(reference, table);
  if (a.empty() || b.empty()) return std::nullopt;
  return cosine(extrema_vector(a), extrema_vector(b));
}

std::optional<double> embedding_greedy(Tokens response, Tokens reference, const EmbeddingTable& table) {
  const auto a = lookup_all(response, table);
  const auto b = lookup_all(reference, table);
  if (a.empty() || b.empty()) return std::nullopt;
  return 0.5 * (greedy_direction(a, b) + greedy_direction(b, a));
}

double distinct_n(std::span<const std::vector<std::string>> responses, std::size_t n) {
  if (n == 0) throw Error("metrics.n", "distinct_n needs n >= 1");
  std::set<std::vector<std::string>> unique;
  std::size_t total = 0;
  for (const auto& r : responses) {
    if (r.size() < n) continue;
    for (std::size_t i = 0; i + n <= r.size(); ++i) {
      unique.emplace(r.begin() + static_cast<std::ptrdiff_t>(i), r.begin() + static_cast<std::ptrdiff_t>(i + n));
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(unique.size()) / static_cast<double>(total);
}

std::vector<std::string> split_tokens(std::string_view line) {
  std::istringstream in{std::string(line)};
  std::vector<std::string> out;
  for (std::string t; in >> t;) out.push_back(std::move(t));
  return out;
}

EvalReport evaluate(std::span<const std::string> responses, std::span<const std::string> references,
                    const EmbeddingTable& table) {
  if (responses.size() != references.size())
    throw Error("metrics.mismatch", "responses have " + std::to_string(responses.size()) + " lines, references " +
                                        std::to_string(references.size()));
  if (responses.empty()) throw Error("metrics.empty", "no responses to evaluate");

  EvalReport report;
  report.response_count = responses.size();
  std::vector<std::vector<std::string>> pool;
  double sum_avg = 0.0, sum_ext = 0.0, sum_gre = 0.0;
  std::size_t n_avg = 0, n_ext = 0, n_gre = 0;
  for (std::size_t i = 0; i < responses.size(); ++i) {
    auto resp = split_tokens(responses[i]);
    const auto ref = split_tokens(references[i]);
    if (auto s = embedding_average(resp, ref, table)) sum_avg += *s, ++n_avg;
    else ++report.average_excluded;
    if (auto s = embedding_extrema(resp, ref, table)) sum_ext += *s, ++n_ext;
    else ++report.extrema_excluded;
    if (auto s = embedding_greedy(resp, ref, table)) sum_gre += *s, ++n_gre;
    else ++report.greedy_excluded;
    pool.push_back(std::move(resp));
  }
  if (n_avg) report.average = sum_avg / static_cast<double>(n_avg);
  if (n_ext) report.extrema = sum_ext / static_cast<double>(n_ext);
  if (n_gre) report.greedy = sum_gre / static_cast<double>(n_gre);
  report.dist1 = distinct_n(pool, 1);
  report.dist2 = distinct_n(pool, 2);
  return report;
}

EvalReport evaluate_files(const std::filesystem::path& responses, const std::filesystem::path& references,
                          const EmbeddingTable& table) {
  const auto r = inference::read_lines(responses);
  const auto g = inference::read_lines(references);
  return evaluate(r, g, table);
}

std::string EvalReport::to_json() const {
  nlohmann::json j{{"average", opt_json(average)},
                   {"extrema", opt_json(extrema)},
                   {"greedy", opt_json(greedy)},
                   {"dist1", dist1},
                   {"dist2", dist2},
                   {"response_count", response_count},
                   {"excluded", {{"average", average_excluded}, {"extrema", extrema_excluded}, {"greedy", greedy_excluded}}}};
  return j.dump(2);
}

std::string EvalReport::to_table() const {
  std::string out = fmt::format("{:<9} {:<9} {:<9} {:<9} {:<9}\n", "Average", "Extrema", "Greedy", "Dist-1", "Dist-2");
  out += fmt::format("{:<9} {:<9} {:<9} {:<9.4f} {:<9.4f}\n", opt_text(average), opt_text(extrema), opt_text(greedy),
                     dist1, dist2);
  out += fmt::format("responses: {}  excluded (average/extrema/greedy): {}/{}/{}\n", response_count,
                     average_excluded, extrema_excluded, greedy_excluded);
  return out;
}

}  // namespace csrr::metrics
