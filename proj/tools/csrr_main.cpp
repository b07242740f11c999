// csrr: prepare | train | generate | evaluate | chat | serve

#include "csrr/checkpoint.hpp"
#include "csrr/corpus.hpp"
#include "csrr/error.hpp"
#include "csrr/inference.hpp"
#include "csrr/metrics.hpp"
#include "csrr/model.hpp"
#include "csrr/seed.hpp"
#include "csrr/service.hpp"
#include "csrr/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using namespace csrr;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("csrr");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("CSRR_LOG_LEVEL")) {
    const std::string level = env;
    if (level == "debug") spdlog::set_level(spdlog::level::debug);
    else if (level == "info") spdlog::set_level(spdlog::level::info);
    else if (level == "warn") spdlog::set_level(spdlog::level::warn);
    else if (level == "error") spdlog::set_level(spdlog::level::err);
    else throw Error("cli.log_level", "CSRR_LOG_LEVEL must be one of debug, info, warn, error");
  }
}

void print_error(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << std::endl;
}

corpus::SplitRatios parse_ratios(const std::string& text) {
  std::vector<double> parts;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    try {
      parts.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw Error("split.ratios", "bad ratio '" + item + "'");
    }
  }
  if (parts.size() != 3) throw Error("split.ratios", "--ratios needs three comma-separated values");
  return {parts[0], parts[1], parts[2]};
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("io.read", "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error("io.format", path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io.write", "cannot write " + path.string());
  out << text;
}

// --- prepare ---------------------------------------------------------------

struct PrepareArgs {
  fs::path input, output_dir;
  std::string ratios = "0.8,0.1,0.1";
  std::uint64_t seed = 0;
  std::size_t vocab_size = corpus::Vocabulary::kDefaultMaxSize;
  std::size_t pad_length = corpus::kDefaultPadLength;
  std::size_t max_conv_length = corpus::kDefaultMaxConversationLength;
  bool force = false;
};

void cmd_prepare(const PrepareArgs& a) {
  const auto ratios = parse_ratios(a.ratios);
  const std::vector<std::string> outputs = {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.txt", "manifest.json"};
  if (!a.force)
    for (const auto& name : outputs)
      if (fs::exists(a.output_dir / name))
        throw Error("prepare.exists", (a.output_dir / name).string() + " exists; pass --force to overwrite");

  const auto conversations = corpus::load_corpus(a.input, a.max_conv_length);
  const auto split = corpus::split_corpus(conversations, ratios, a.seed);
  const auto vocab = corpus::Vocabulary::build(split.train, a.vocab_size);

  fs::create_directories(a.output_dir);
  corpus::save_corpus(a.output_dir / "train.jsonl", split.train);
  corpus::save_corpus(a.output_dir / "valid.jsonl", split.valid);
  corpus::save_corpus(a.output_dir / "test.jsonl", split.test);
  vocab.save(a.output_dir / "vocab.txt");

  json manifest{{"input", a.input.string()},
                {"seed", a.seed},
                {"ratios", {ratios.train, ratios.valid, ratios.test}},
                {"counts", {{"train", split.train.size()}, {"valid", split.valid.size()}, {"test", split.test.size()}}},
                {"conversations", conversations.size()},
                {"vocab_size", vocab.size()},
                {"vocab_fingerprint", vocab.fingerprint()},
                {"pad_length", a.pad_length},
                {"max_conv_length", a.max_conv_length}};
  write_text(a.output_dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << manifest["counts"].dump() << std::endl;
}

struct Prepared {
  json manifest;
  corpus::Vocabulary vocab;
  std::size_t pad_length;
  std::size_t max_conv_length;
};

Prepared load_prepared(const fs::path& dir) {
  const auto vocab_path = dir / "vocab.txt";
  if (!fs::exists(vocab_path)) throw Error("data.vocab", "missing vocabulary " + vocab_path.string());
  Prepared p{read_json(dir / "manifest.json"), corpus::Vocabulary::load(vocab_path), 0, 0};
  p.pad_length = p.manifest.value("pad_length", corpus::kDefaultPadLength);
  p.max_conv_length = p.manifest.value("max_conv_length", corpus::kDefaultMaxConversationLength);
  return p;
}

std::vector<corpus::Conversation> load_split(const fs::path& dir, const std::string& name, const Prepared& p) {
  const auto path = dir / (name + ".jsonl");
  if (!fs::exists(path)) throw Error("data.split", "missing split " + path.string());
  const auto raw = corpus::load_corpus(path, p.max_conv_length);
  return corpus::encode_all(raw, p.vocab, p.pad_length);
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  fs::path data_dir, config, output_dir;
  std::string mode = "csrr";
  bool resume = false;
};

void cmd_train(const TrainArgs& a) {
  const auto mode = model::parse_mode(a.mode);
  const auto prepared = load_prepared(a.data_dir);
  training::ConfigFile cfg;
  if (!a.config.empty()) cfg = training::load_config(a.config);
  cfg.train.validate();
  const fs::path out_dir = a.output_dir.empty() ? a.data_dir / "run" : a.output_dir;

  const auto train = load_split(a.data_dir, "train", prepared);
  const auto valid = load_split(a.data_dir, "valid", prepared);

  training::RunOptions opts;
  opts.output_dir = out_dir;
  opts.vocab = &prepared.vocab;

  std::optional<training::LoadedCheckpoint> resumed;
  if (a.resume) {
    const auto path = out_dir / "last.ckpt";
    if (!fs::exists(path)) throw Error("train.resume", "nothing to resume: " + path.string() + " not found");
    resumed.emplace(training::load_checkpoint(path));
    if (resumed->vocab.fingerprint() != prepared.vocab.fingerprint())
      throw Error("checkpoint.vocab", "checkpoint vocabulary differs from " + (a.data_dir / "vocab.txt").string());
    if (resumed->model.config().mode != mode)
      throw Error("train.mode", "checkpoint was trained in mode " + std::string(model::to_string(resumed->model.config().mode)));
    spdlog::info("resuming from step {}", resumed->state.global_step);
    const auto result = training::run_training(resumed->model, train, valid, cfg.train, opts, resumed->state);
    spdlog::info("finished at step {}", result.state.global_step);
    return;
  }

  model::ModelConfig mc;
  mc.mode = mode;
  mc.vocab_size = prepared.vocab.size();
  mc.pad_length = prepared.pad_length;
  mc.max_conv_length = prepared.max_conv_length;
  for (const auto& [key, value] : cfg.model_dims) {
    if (key == "hidden_dim") mc.hidden_dim = value;
    else if (key == "embed_dim") mc.embed_dim = value;
    else if (key == "latent_dim") mc.latent_dim = value;
  }
  model::Model net(mc, cfg.train.seed);
  spdlog::info("model {} with {} parameters", model::to_string(mode), net.params().total_size());
  const auto result = training::run_training(net, train, valid, cfg.train, opts);
  spdlog::info("finished at step {}", result.state.global_step);
}

// --- generate --------------------------------------------------------------

struct GenerateArgs {
  fs::path checkpoint, data_dir, out, references;
  std::string split = "test";
  std::string strategy = "greedy";
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::string latent_mode = "sample";
};

void cmd_generate(const GenerateArgs& a) {
  auto ckpt = training::load_checkpoint(a.checkpoint);
  auto prepared = load_prepared(a.data_dir);
  if (prepared.vocab.fingerprint() != ckpt.vocab.fingerprint())
    throw Error("checkpoint.vocab", "checkpoint vocabulary differs from the prepared data");
  const auto convs = load_split(a.data_dir, a.split, prepared);

  inference::GenerationOptions opts;
  opts.strategy = inference::parse_strategy(a.strategy);
  opts.temperature = a.temperature;
  opts.latent_mode = inference::parse_latent_mode(a.latent_mode);
  opts.seed = a.seed;
  opts.max_tokens = ckpt.model.config().pad_length;
  opts.validate(ckpt.model.config());

  const auto generated = inference::batch_generate(ckpt.model, ckpt.vocab, convs, opts);
  fs::path refs = a.references;
  if (refs.empty()) refs = fs::path(a.out.string() + ".ref");
  if (!a.out.parent_path().empty()) fs::create_directories(a.out.parent_path());
  inference::write_lines(a.out, generated.responses);
  inference::write_lines(refs, generated.references);
  std::cout << json{{"responses", a.out.string()}, {"references", refs.string()}, {"count", generated.responses.size()}}.dump()
            << std::endl;
}

// --- evaluate --------------------------------------------------------------

struct EvaluateArgs {
  fs::path responses, references, embeddings, out;
};

void cmd_evaluate(const EvaluateArgs& a) {
  const auto table = metrics::EmbeddingTable::load(a.embeddings);
  const auto report = metrics::evaluate_files(a.responses, a.references, table);
  if (!a.out.empty()) write_text(a.out, report.to_json() + "\n");
  std::cout << report.to_table();
}

// --- chat ------------------------------------------------------------------

struct ChatArgs {
  fs::path checkpoint;
  double temperature = 1.0;
  std::string latent_mode = "sample";
  std::string strategy = "sample";
  std::uint64_t seed = 0;
};

void cmd_chat(const ChatArgs& a) {
  auto ckpt = training::load_checkpoint(a.checkpoint);
  const auto& cfg = ckpt.model.config();
  inference::GenerationOptions opts;
  opts.strategy = inference::parse_strategy(a.strategy);
  opts.temperature = a.temperature;
  opts.latent_mode = inference::parse_latent_mode(a.latent_mode);
  opts.max_tokens = cfg.pad_length - 1;
  opts.validate(cfg);

  inference::Session session("chat", ckpt.vocab, cfg.max_conv_length, cfg.pad_length);
  std::uint64_t turn = 0;
  std::string line;
  while (std::getline(std::cin, line)) {
    if (line == "/quit") break;
    if (line == "/reset") {
      session.clear();
      std::cout << "(history cleared)" << std::endl;
      continue;
    }
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    session.append(inference::Speaker::user, line);
    opts.seed = mix_seed(a.seed, turn++);
    const auto candidates = inference::generate_response(ckpt.model, session.utterances(), opts);
    auto reply = corpus::utterance_from_ids(candidates.front().tokens, ckpt.vocab, cfg.pad_length);
    std::cout << "> " << reply.raw_text << std::endl;
    session.append(inference::Speaker::model, std::move(reply));
  }
}

// --- serve -----------------------------------------------------------------

struct ServeArgs {
  fs::path checkpoint;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t threads = 8;
  std::size_t max_sessions = 1000;
};

void cmd_serve(const ServeArgs& a) {
  if (!fs::exists(a.checkpoint)) throw Error("checkpoint.io", "cannot open checkpoint " + a.checkpoint.string());
  service::ServiceConfig sc;
  sc.worker_threads = a.threads;
  sc.max_sessions = a.max_sessions;
  service::ChatService svc(sc);

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  const int port = svc.bind(a.host, a.port);
  std::cout << json{{"listening", a.host + ":" + std::to_string(port)}}.dump() << std::endl;

  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    spdlog::info("signal {}: shutting down", sig);
    svc.stop();
  });
  std::thread loader([&] {
    try {
      svc.load(training::load_checkpoint(a.checkpoint), training::file_fingerprint(a.checkpoint));
      spdlog::info("model loaded from {}", a.checkpoint.string());
    } catch (const Error& e) {
      print_error(e.code(), e.what());
      svc.stop();
    }
  });
  svc.run();
  loader.join();
  if (waiter.joinable()) {
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
  }
  if (!svc.ready()) throw Error("serve.load", "model failed to load");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CSRR hierarchical latent dialogue model"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "filter, split and index a raw corpus");
  p->add_option("--input", prep.input, "raw corpus (JSONL)")->required();
  p->add_option("--output-dir", prep.output_dir, "destination directory")->required();
  p->add_option("--ratios", prep.ratios, "train,valid,test fractions");
  p->add_option("--seed", prep.seed);
  p->add_option("--vocab-size", prep.vocab_size);
  p->add_option("--pad-length", prep.pad_length);
  p->add_option("--max-conv-length", prep.max_conv_length);
  p->add_flag("--force", prep.force, "overwrite existing outputs");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model on prepared data");
  t->add_option("--data-dir", tr.data_dir)->required();
  t->add_option("--config", tr.config, "key=value config file");
  t->add_option("--mode", tr.mode, "csrr or hred");
  t->add_flag("--resume", tr.resume, "continue from <output-dir>/last.ckpt");
  t->add_option("--output-dir", tr.output_dir, "checkpoints and metrics (default <data-dir>/run)");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "generate responses for a split");
  g->add_option("--checkpoint", gen.checkpoint)->required();
  g->add_option("--data-dir", gen.data_dir)->required();
  g->add_option("--split", gen.split);
  g->add_option("--out", gen.out)->required();
  g->add_option("--references", gen.references, "reference output (default <out>.ref)");
  g->add_option("--strategy", gen.strategy, "greedy or sample");
  g->add_option("--temperature", gen.temperature);
  g->add_option("--seed", gen.seed);
  g->add_option("--latent-mode", gen.latent_mode, "sample or mean");

  EvaluateArgs ev;
  auto* e = app.add_subcommand("evaluate", "embedding and distinct-n metrics");
  e->add_option("--responses", ev.responses)->required();
  e->add_option("--references", ev.references)->required();
  e->add_option("--embeddings", ev.embeddings)->required();
  e->add_option("--out", ev.out, "JSON report path");

  ChatArgs ch;
  auto* c = app.add_subcommand("chat", "interactive terminal chat (/reset, /quit)");
  c->add_option("--checkpoint", ch.checkpoint)->required();
  c->add_option("--temperature", ch.temperature);
  c->add_option("--latent-mode", ch.latent_mode);
  c->add_option("--strategy", ch.strategy);
  c->add_option("--seed", ch.seed);

  ServeArgs sv;
  auto* s = app.add_subcommand("serve", "run the HTTP chat API");
  s->add_option("--checkpoint", sv.checkpoint)->required();
  s->add_option("--host", sv.host);
  s->add_option("--port", sv.port);
  s->add_option("--threads", sv.threads);
  s->add_option("--max-sessions", sv.max_sessions);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    print_error("cli.usage", ex.what());
    return 2;
  }

  try {
    setup_logging();
    if (*p) cmd_prepare(prep);
    else if (*t) cmd_train(tr);
    else if (*g) cmd_generate(gen);
    else if (*e) cmd_evaluate(ev);
    else if (*c) cmd_chat(ch);
    else if (*s) cmd_serve(sv);
  } catch (const Error& ex) {
    print_error(ex.code(), ex.what());
    return 1;
  } catch (const std::exception& ex) {
    print_error("internal", ex.what());
    return 1;
  }
  return 0;
}
