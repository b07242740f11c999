#include "csrr/checkpoint.hpp"

#include "csrr/error.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace csrr::training {

namespace {

constexpr std::array<char, 8> kMagic = {'C', 'S', 'R', 'R', 'C', 'K', 'P', 'T'};
constexpr std::array<char, 8> kEndMarker = {'C', 'S', 'R', 'R', '-', 'E', 'N', 'D'};

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T value{};
  if (!in.read(reinterpret_cast<char*>(&value), sizeof(T)))
    throw Error("checkpoint.truncated", std::string("checkpoint truncated while reading ") + what);
  return value;
}

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Row-major so the on-disk order does not depend on Eigen's storage order.
void write_matrix(std::ostream& out, const nn::Mat& m) {
  const RowMajor rm = m;
  out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double)));
}

void read_matrix(std::istream& in, nn::Mat& m, const std::string& name) {
  RowMajor rm(m.rows(), m.cols());
  if (!in.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(rm.size() * sizeof(double))))
    throw Error("checkpoint.truncated", "checkpoint truncated while reading " + name);
  m = rm;
}

nlohmann::json config_to_json(const model::ModelConfig& c) {
  return {{"hidden_dim", c.hidden_dim},     {"embed_dim", c.embed_dim},
          {"latent_dim", c.latent_dim},     {"pad_length", c.pad_length},
          {"max_conv_length", c.max_conv_length}, {"vocab_size", c.vocab_size},
          {"mode", std::string(model::to_string(c.mode))}};
}

model::ModelConfig config_from_json(const nlohmann::json& j) {
  model::ModelConfig c;
  c.hidden_dim = j.at("hidden_dim").get<std::size_t>();
  c.embed_dim = j.at("embed_dim").get<std::size_t>();
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.pad_length = j.at("pad_length").get<std::size_t>();
  c.max_conv_length = j.at("max_conv_length").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.mode = model::parse_mode(j.at("mode").get<std::string>());
  return c;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const model::Model& model, const TrainState& state,
                     const corpus::Vocabulary& vocab) {
  if (vocab.size() != model.config().vocab_size)
    throw Error("checkpoint.vocab", "vocabulary size does not match the model");
  const auto params = model.params().all();
  const bool has_adam = !state.adam.m.empty();
  if (has_adam && (state.adam.m.size() != params.size() || state.adam.v.size() != params.size()))
    throw Error("checkpoint.adam", "optimizer state does not match the parameter set");

  nlohmann::json header;
  header["model"] = config_to_json(model.config());
  header["vocab_fingerprint"] = vocab.fingerprint();
  header["vocab"] = vocab.tokens();
  header["global_step"] = state.global_step;
  header["best_valid_loss"] =
      std::isfinite(state.best_valid_loss) ? nlohmann::json(state.best_valid_loss) : nlohmann::json(nullptr);
  header["adam_t"] = state.adam.t;
  header["has_adam"] = has_adam;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& p : params) table.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
  header["params"] = table;
  const std::string header_text = header.dump();

  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("checkpoint.io", "cannot write " + tmp.string());
    out.write(kMagic.data(), kMagic.size());
    write_pod<std::uint32_t>(out, kCheckpointVersion);
    write_pod<std::uint64_t>(out, header_text.size());
    out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      write_matrix(out, params[i]->value);
      if (has_adam) {
        write_matrix(out, state.adam.m[i]);
        write_matrix(out, state.adam.v[i]);
      }
    }
    out.write(kEndMarker.data(), kEndMarker.size());
    if (!out) throw Error("checkpoint.io", "failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint.io", "cannot open checkpoint " + path.string());
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size())) throw Error("checkpoint.truncated", "checkpoint truncated in magic");
  if (magic != kMagic) throw Error("checkpoint.format", path.string() + " is not a checkpoint file");
  const auto version = read_pod<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw Error("checkpoint.version", "checkpoint format version " + std::to_string(version) +
                                          " is not supported (expected " + std::to_string(kCheckpointVersion) + ")");
  const auto header_size = read_pod<std::uint64_t>(in, "header size");
  if (header_size > (1ULL << 32)) throw Error("checkpoint.format", "implausible checkpoint header size");
  std::string header_text(header_size, '\0');
  if (!in.read(header_text.data(), static_cast<std::streamsize>(header_size)))
    throw Error("checkpoint.truncated", "checkpoint truncated in header");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint.format", std::string("bad checkpoint header: ") + e.what());
  }

  try {
    if (!header.at("vocab").is_array() || header.at("vocab").size() < corpus::kNumSpecials)
      throw Error("checkpoint.format", "checkpoint vocabulary lacks the special tokens");
    auto vocab = corpus::Vocabulary::from_tokens(
        std::vector<std::string>(header.at("vocab").begin() + corpus::kNumSpecials, header.at("vocab").end()));
    if (vocab.fingerprint() != header.at("vocab_fingerprint").get<std::uint64_t>())
      throw Error("checkpoint.vocab", "vocabulary fingerprint mismatch");

    model::Model model(config_from_json(header.at("model")));
    if (model.config().vocab_size != vocab.size())
      throw Error("checkpoint.vocab", "vocabulary size does not match the model config");
    TrainState state;
    state.global_step = header.at("global_step").get<std::size_t>();
    state.best_valid_loss = header.at("best_valid_loss").is_null() ? std::numeric_limits<double>::infinity()
                                                                   : header.at("best_valid_loss").get<double>();
    state.adam.t = header.at("adam_t").get<std::size_t>();
    const bool has_adam = header.at("has_adam").get<bool>();

    const auto params = model.params().all();
    const auto& table = header.at("params");
    if (table.size() != params.size()) throw Error("checkpoint.format", "parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      nn::Param& p = *params[i];
      if (table[i].at("name").get<std::string>() != p.name || table[i].at("rows").get<Eigen::Index>() != p.value.rows() ||
          table[i].at("cols").get<Eigen::Index>() != p.value.cols())
        throw Error("checkpoint.format", "parameter table mismatch at " + p.name);
      read_matrix(in, p.value, p.name);
      if (has_adam) {
        state.adam.m.emplace_back(p.value.rows(), p.value.cols());
        state.adam.v.emplace_back(p.value.rows(), p.value.cols());
        read_matrix(in, state.adam.m.back(), p.name);
        read_matrix(in, state.adam.v.back(), p.name);
      }
    }
    std::array<char, 8> end{};
    if (!in.read(end.data(), end.size()) || end != kEndMarker)
      throw Error("checkpoint.truncated", "checkpoint truncated: end marker missing");
    return {std::move(model), std::move(state), std::move(vocab)};
  } catch (const nlohmann::json::exception& e) {
    throw Error("checkpoint.format", std::string("bad checkpoint header: ") + e.what());
  }
}

std::string file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("checkpoint.io", "cannot open " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

}  // namespace csrr::training
