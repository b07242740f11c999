#include "csrr/checkpoint.hpp"
#include "csrr/error.hpp"
#include "support/fixtures.hpp"

#include <doctest.h>

#include <fstream>
#include <iterator>

using namespace csrr;
using namespace csrr::training;

namespace {

std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

std::string error_code(const std::filesystem::path& p) {
  try {
    load_checkpoint(p);
  } catch (const Error& e) {
    return e.code();
  }
  return "";
}

std::vector<corpus::Conversation> toy_corpus(const corpus::Vocabulary& v) {
  std::vector<corpus::Conversation> out;
  for (const auto& texts : testing::overfit_texts()) out.push_back(testing::text_conversation(texts, v, 6));
  return out;
}

}  // namespace

TEST_CASE("round trip is bit exact") {
  testing::TempDir dir("ckpt");
  const auto v = testing::toy_vocab();
  const auto data = toy_corpus(v);
  model::Model m(testing::toy_config(), 3);
  TrainConfig cfg;
  cfg.batch_size = 4;
  Trainer t(m, cfg);
  for (int i = 0; i < 3; ++i) t.step(data);
  t.state().best_valid_loss = 1.25;
  save_checkpoint(dir.path / "a.ckpt", m, t.state(), v);

  const auto back = load_checkpoint(dir.path / "a.ckpt");
  CHECK(back.state.global_step == 3);
  CHECK(back.state.best_valid_loss == 1.25);
  CHECK(back.state.adam.t == 3);
  CHECK(back.vocab.tokens() == v.tokens());
  CHECK(back.model.config().hidden_dim == 8);
  const auto pa = m.params().all();
  const auto pb = back.model.params().all();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value == pb[i]->value);
    CHECK(t.state().adam.m[i] == back.state.adam.m[i]);
    CHECK(t.state().adam.v[i] == back.state.adam.v[i]);
  }
  save_checkpoint(dir.path / "b.ckpt", back.model, back.state, back.vocab);
  CHECK(read_bytes(dir.path / "a.ckpt") == read_bytes(dir.path / "b.ckpt"));
  CHECK(file_fingerprint(dir.path / "a.ckpt") == file_fingerprint(dir.path / "b.ckpt"));
}

TEST_CASE("fresh model without optimizer state round trips") {
  testing::TempDir dir("ckpt");
  model::Model m(testing::toy_config(model::Mode::hred), 1);
  save_checkpoint(dir.path / "h.ckpt", m, {}, testing::toy_vocab());
  const auto back = load_checkpoint(dir.path / "h.ckpt");
  CHECK(back.model.config().mode == model::Mode::hred);
  CHECK(back.state.global_step == 0);
  CHECK(back.state.adam.m.empty());
}

TEST_CASE("corrupt checkpoints are refused") {
  testing::TempDir dir("ckpt");
  model::Model m(testing::toy_config(), 1);
  const auto good = dir.path / "good.ckpt";
  save_checkpoint(good, m, {}, testing::toy_vocab());
  const std::string bytes = read_bytes(good);

  auto bad = dir.path / "bad.ckpt";
  std::string version = bytes;
  version[8] = 9;
  write_bytes(bad, version);
  CHECK(error_code(bad) == "checkpoint.version");

  write_bytes(bad, bytes.substr(0, bytes.size() - 100));
  CHECK(error_code(bad) == "checkpoint.truncated");

  write_bytes(bad, bytes.substr(0, 20));
  CHECK(error_code(bad) == "checkpoint.truncated");

  write_bytes(bad, "NOTACKPT" + bytes.substr(8));
  CHECK(error_code(bad) == "checkpoint.format");

  CHECK(error_code(dir.path / "missing.ckpt") == "checkpoint.io");
}

TEST_CASE("vocabulary must match the model") {
  testing::TempDir dir("ckpt");
  model::Model m(testing::toy_config(), 1);
  const auto small = corpus::Vocabulary::from_tokens({"a"});
  CHECK_THROWS_AS(save_checkpoint(dir.path / "x.ckpt", m, {}, small), Error);
  CHECK_FALSE(std::filesystem::exists(dir.path / "x.ckpt"));
}

TEST_CASE("a failed save leaves the previous checkpoint intact") {
  testing::TempDir dir("ckpt");
  model::Model m(testing::toy_config(), 1);
  const auto path = dir.path / "keep.ckpt";
  save_checkpoint(path, m, {}, testing::toy_vocab());
  const std::string before = read_bytes(path);
  CHECK_THROWS_AS(save_checkpoint(path, m, {}, corpus::Vocabulary::from_tokens({"a"})), Error);
  CHECK(read_bytes(path) == before);
}

TEST_CASE("resume continues the loss curve") {
  testing::TempDir dir("ckpt");
  const auto v = testing::toy_vocab();
  const auto data = toy_corpus(v);
  TrainConfig cfg;
  cfg.learning_rate = 0.005;
  cfg.batch_size = 4;
  cfg.seed = 12;

  model::Model straight(testing::toy_config(), 2);
  Trainer a(straight, cfg);
  std::vector<double> expect;
  for (int i = 0; i < 10; ++i) expect.push_back(a.step(data).loss);

  model::Model half(testing::toy_config(), 2);
  Trainer b(half, cfg);
  for (int i = 0; i < 5; ++i) b.step(data);
  save_checkpoint(dir.path / "r.ckpt", half, b.state(), v);
  auto loaded = load_checkpoint(dir.path / "r.ckpt");
  Trainer c(loaded.model, cfg, loaded.state);
  for (int i = 5; i < 10; ++i) CHECK(std::abs(c.step(data).loss - expect[i]) < 1e-6);
}
