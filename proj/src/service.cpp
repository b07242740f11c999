#include "csrr/service.hpp"

#include "csrr/error.hpp"
#include "csrr/seed.hpp"

#include <httplib.h>
#include <spdlog/spdlog.h>

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <thread>

namespace csrr::service {

namespace {

using nlohmann::json;

int status_for(const std::string& code) {
  if (code == "session.not_found") return 404;
  if (code == "session.no_model_turn") return 409;
  if (code == "request.json") return 400;
  if (code == "service.unavailable") return 503;
  if (code.rfind("request.", 0) == 0 || code.rfind("options.", 0) == 0) return 422;
  return 500;
}

HttpResponse error_response(const Error& e) { return {status_for(e.code()), error_body(e.code(), e.what())}; }

json parse_body(const std::string& body) {
  if (body.find_first_not_of(" \t\r\n") == std::string::npos) return json::object();
  try {
    json j = json::parse(body);
    if (!j.is_object()) throw Error("request.json", "request body must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw Error("request.json", std::string("malformed JSON: ") + e.what());
  }
}

template <typename T>
T field(const json& body, const char* name, T fallback) {
  auto it = body.find(name);
  if (it == body.end() || it->is_null()) return fallback;
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw Error("request.invalid", fmt::format("field '{}' has the wrong type", name));
  }
}

std::uint64_t fresh_seed() {
  static std::mutex m;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(m);
  return rng();
}

json turns_json(const inference::Session& s) {
  json turns = json::array();
  for (const auto& t : s.turns())
    turns.push_back({{"speaker", std::string(inference::to_string(t.speaker))}, {"text", t.utterance.raw_text}});
  return turns;
}

json request_json(const GenerateRequest& r) {
  json j{{"temperature", r.temperature},
         {"num_candidates", r.num_candidates},
         {"latent_mode", std::string(inference::to_string(r.latent_mode))},
         {"strategy", std::string(inference::to_string(r.strategy))}};
  j["seed"] = r.seed ? json(*r.seed) : json(nullptr);
  return j;
}

}  // namespace

json error_body(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

GenerateRequest parse_generate_request(const json& body, const GenerateRequest& base, bool require_text) {
  GenerateRequest r = base;
  if (require_text) {
    r.text = field<std::string>(body, "text", "");
    if (r.text.find_first_not_of(" \t\r\n") == std::string::npos)
      throw Error("request.invalid", "text must be nonempty");
  }
  r.temperature = field<double>(body, "temperature", base.temperature);
  if (!(r.temperature > 0.0) || !std::isfinite(r.temperature))
    throw Error("request.invalid", "temperature must be positive");
  const auto n = field<std::int64_t>(body, "num_candidates", static_cast<std::int64_t>(base.num_candidates));
  if (n < 1 || n > static_cast<std::int64_t>(kMaxCandidates))
    throw Error("request.invalid", fmt::format("num_candidates must be in [1, {}]", kMaxCandidates));
  r.num_candidates = static_cast<std::size_t>(n);
  try {
    if (body.contains("latent_mode"))
      r.latent_mode = inference::parse_latent_mode(field<std::string>(body, "latent_mode", ""));
    if (body.contains("strategy")) r.strategy = inference::parse_strategy(field<std::string>(body, "strategy", ""));
  } catch (const Error& e) {
    throw Error("request.invalid", e.what());
  }
  if (body.contains("seed")) {
    if (body["seed"].is_null()) r.seed.reset();
    else r.seed = field<std::uint64_t>(body, "seed", 0);
  }
  return r;
}

// FIFO turn on one session: tickets are served in the order they were taken.
class ChatService::Turn {
 public:
  explicit Turn(Entry& e) : e_(e) {
    std::unique_lock lock(e_.turn_mutex);
    const std::uint64_t ticket = e_.next_ticket++;
    e_.turn_cv.wait(lock, [&] { return e_.serving == ticket; });
  }
  ~Turn() {
    {
      std::lock_guard lock(e_.turn_mutex);
      ++e_.serving;
    }
    e_.turn_cv.notify_all();
  }
  Turn(const Turn&) = delete;
  Turn& operator=(const Turn&) = delete;

 private:
  Entry& e_;
};

ChatService::ChatService(ServiceConfig config) : config_(config), id_state_(std::random_device{}()) {
  if (config_.max_sessions < 1) throw Error("service.config", "max_sessions must be at least 1");
  if (config_.worker_threads < 1) throw Error("service.config", "worker_threads must be at least 1");
}

ChatService::~ChatService() { stop(); }

void ChatService::load(training::LoadedCheckpoint checkpoint, std::string checkpoint_hash) {
  auto loaded = std::make_shared<Loaded>(Loaded{std::move(checkpoint), std::move(checkpoint_hash)});
  std::lock_guard lock(model_mutex_);
  loaded_ = std::move(loaded);
}

bool ChatService::ready() const { return model() != nullptr; }

std::shared_ptr<ChatService::Loaded> ChatService::model() const {
  std::lock_guard lock(model_mutex_);
  return loaded_;
}

std::size_t ChatService::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

HttpResponse ChatService::create_session() {
  auto loaded = model();
  if (!loaded) return error_response(Error("service.unavailable", "model not loaded"));
  const auto& cfg = loaded->checkpoint.model.config();

  std::lock_guard lock(sessions_mutex_);
  std::string id;
  do {
    id = fmt::format("{:016x}", mix_seed(id_state_++, 0x73657373696f6eULL));
  } while (sessions_.count(id));
  auto entry = std::make_shared<Entry>(inference::Session(id, loaded->checkpoint.vocab, cfg.max_conv_length, cfg.pad_length));
  entry->owner = loaded;
  lru_.push_front(id);
  sessions_.emplace(id, std::make_pair(std::move(entry), lru_.begin()));
  while (sessions_.size() > config_.max_sessions) {
    sessions_.erase(lru_.back());
    lru_.pop_back();
  }
  return {201, {{"id", id}}};
}

std::shared_ptr<ChatService::Entry> ChatService::find(const std::string& id) {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw Error("session.not_found", "no session " + id);
  lru_.splice(lru_.begin(), lru_, it->second.second);
  return it->second.first;
}

HttpResponse ChatService::generate(Entry& entry, Loaded& loaded, const GenerateRequest& request, bool resampling) {
  auto& model = loaded.checkpoint.model;
  const auto& vocab = loaded.checkpoint.vocab;
  if (config_.handler_delay.count() > 0) std::this_thread::sleep_for(config_.handler_delay);

  inference::GenerationOptions opts;
  opts.strategy = request.strategy;
  opts.temperature = request.temperature;
  // Leaves room for EOS so the stored turn matches the returned text.
  opts.max_tokens = model.config().pad_length - 1;
  opts.latent_mode = request.latent_mode;
  opts.num_candidates = request.num_candidates;
  opts.seed = request.seed.value_or(0);

  std::vector<corpus::Utterance> history;
  if (resampling) {
    if (!entry.session.last_is_model()) throw Error("session.no_model_turn", "no model turn to resample");
    history = entry.session.utterances();
    history.pop_back();
    opts.latent_draw = ++entry.draws;
  } else {
    entry.session.append(inference::Speaker::user, request.text);
    history = entry.session.utterances();
    entry.draws = 0;
  }
  const auto candidates = inference::generate_response(model, history, opts);

  auto chosen = corpus::utterance_from_ids(candidates.front().tokens, vocab, model.config().pad_length);
  if (resampling) entry.session.replace_last_model_turn(std::move(chosen));
  else entry.session.append(inference::Speaker::model, std::move(chosen));

  json out;
  out["candidates"] = json::array();
  for (const auto& c : candidates) {
    json tokens = json::array();
    for (int id : c.tokens) tokens.push_back(vocab.token(id));
    out["candidates"].push_back({{"text", vocab.decode(c.tokens)}, {"tokens", tokens}, {"token_logprobs", c.token_logprobs}});
  }
  out["chosen_index"] = 0;
  const auto& lat = candidates.front().latents;
  out["latent_sources"] = {{"z_c", std::string(model::to_string(lat.z_c_source))},
                           {"z_p", std::string(model::to_string(lat.z_p_source))},
                           {"z_r", std::string(model::to_string(lat.z_r_source))}};
  return {200, out};
}

HttpResponse ChatService::post_message(const std::string& id, const std::string& body) {
  try {
    auto loaded = model();
    if (!loaded) throw Error("service.unavailable", "model not loaded");
    auto entry = find(id);
    auto request = parse_generate_request(parse_body(body), GenerateRequest{}, true);
    if (!request.seed) request.seed = fresh_seed();
    Turn turn(*entry);
    auto response = generate(*entry, *loaded, request, false);
    entry->last_request = request;
    return response;
  } catch (const Error& e) {
    return error_response(e);
  }
}

HttpResponse ChatService::resample(const std::string& id, const std::string& body) {
  try {
    auto loaded = model();
    if (!loaded) throw Error("service.unavailable", "model not loaded");
    auto entry = find(id);
    const json parsed = parse_body(body);
    Turn turn(*entry);
    if (!entry->session.last_is_model() || !entry->last_request)
      throw Error("session.no_model_turn", "no model turn to resample");
    auto request = parse_generate_request(parsed, *entry->last_request, false);
    if (!request.seed) request.seed = fresh_seed();
    auto response = generate(*entry, *loaded, request, true);
    entry->last_request = request;
    return response;
  } catch (const Error& e) {
    return error_response(e);
  }
}

HttpResponse ChatService::get_session(const std::string& id) {
  try {
    auto entry = find(id);
    Turn turn(*entry);
    json out{{"id", id}, {"turns", turns_json(entry->session)}};
    out["options"] = entry->last_request ? request_json(*entry->last_request) : json(nullptr);
    return {200, out};
  } catch (const Error& e) {
    return error_response(e);
  }
}

HttpResponse ChatService::health() const {
  auto loaded = model();
  if (!loaded) return {503, {{"status", "loading"}, {"checkpoint_hash", nullptr}}};
  return {200, {{"status", "ok"}, {"checkpoint_hash", loaded->hash}}};
}

void ChatService::setup_routes() {
  auto& svr = *server_;
  const auto threads = config_.worker_threads;
  svr.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };
  auto reply = [](httplib::Response& res, const HttpResponse& r) {
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  svr.Post("/sessions", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, create_session()); });
  svr.Post(R"(/sessions/([^/]+)/messages)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, post_message(req.matches[1], req.body));
  });
  svr.Post(R"(/sessions/([^/]+)/resample)", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, resample(req.matches[1], req.body));
  });
  svr.Get(R"(/sessions/([^/]+))", [this, reply](const httplib::Request& req, httplib::Response& res) {
    reply(res, get_session(req.matches[1]));
  });
  svr.Get("/healthz", [this, reply](const httplib::Request&, httplib::Response& res) { reply(res, health()); });
  svr.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
    if (res.body.empty())
      res.set_content(error_body("route.not_found", req.method + " " + req.path).dump(), "application/json");
  });
  svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string message = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      message = e.what();
    } catch (...) {
    }
    spdlog::error("request failed: {}", message);
    res.status = 500;
    res.set_content(error_body("internal", message).dump(), "application/json");
  });
}

int ChatService::bind(const std::string& host, int port) {
  server_ = std::make_unique<httplib::Server>();
  // The library default adds SO_REUSEPORT, which lets a second server share a busy port.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  setup_routes();
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) {
    server_.reset();
    throw Error("serve.bind", fmt::format("cannot bind {}:{}", host, port));
  }
  return bound;
}

void ChatService::run() {
  if (!server_) throw Error("serve.state", "bind() must be called before run()");
  running_ = true;
  if (!stop_requested_) server_->listen_after_bind();
  running_ = false;
}

void ChatService::stop() {
  stop_requested_ = true;
  if (!server_) return;
  while (running_ && !server_->is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  server_->stop();
}

void ChatService::wait_until_listening() const {
  while (!server_ || !server_->is_running()) std::this_thread::sleep_for(std::chrono::milliseconds(1));
}

}  // namespace csrr::service
