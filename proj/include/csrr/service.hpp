#pragma once

// HTTP/JSON chat API over in-memory sessions.
//
//   POST /sessions                  -> 201 {id}
//   POST /sessions/{id}/messages    -> 200 GenerateResponse
//   POST /sessions/{id}/resample    -> 200 GenerateResponse
//   GET  /sessions/{id}             -> 200 {id, turns, options}
//   GET  /healthz                   -> 200 {status, checkpoint_hash} or 503
//
// Errors are {"error": {"code", "message"}}.

#include "csrr/checkpoint.hpp"
#include "csrr/inference.hpp"

#include <json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>

namespace httplib {
class Server;
}

namespace csrr::service {

inline constexpr std::size_t kMaxCandidates = 10;

struct ServiceConfig {
  std::size_t max_sessions = 1000;
  std::size_t worker_threads = 8;
  // Test hook: sleep inside every generation request while holding the
  // session's turn.
  std::chrono::milliseconds handler_delay{0};
};

struct GenerateRequest {
  std::string text;
  double temperature = 1.0;
  std::size_t num_candidates = 1;
  inference::LatentMode latent_mode = inference::LatentMode::sample;
  inference::Strategy strategy = inference::Strategy::sample;
  std::optional<std::uint64_t> seed;
};

struct HttpResponse {
  int status = 200;
  nlohmann::json body;
};

class ChatService {
 public:
  explicit ChatService(ServiceConfig config = {});
  ~ChatService();
  ChatService(const ChatService&) = delete;
  ChatService& operator=(const ChatService&) = delete;

  void load(training::LoadedCheckpoint checkpoint, std::string checkpoint_hash);
  bool ready() const;

  HttpResponse create_session();
  HttpResponse post_message(const std::string& id, const std::string& body);
  HttpResponse resample(const std::string& id, const std::string& body);
  HttpResponse get_session(const std::string& id);
  HttpResponse health() const;

  std::size_t session_count() const;

  // Binds (port 0 picks a free one) and returns the bound port; throws
  // Error "serve.bind" when the address is unavailable.
  int bind(const std::string& host, int port);
  // Serves until stop(); in-flight requests complete before it returns.
  // A stop() issued before run() makes run() return immediately.
  void run();
  void stop();
  // Blocks until run() accepts connections.
  void wait_until_listening() const;

 private:
  struct Entry {
    explicit Entry(inference::Session s) : session(std::move(s)) {}
    inference::Session session;
    std::shared_ptr<const void> owner;  // keeps the vocabulary alive
    std::optional<GenerateRequest> last_request;
    std::uint64_t draws = 0;
    std::mutex turn_mutex;
    std::condition_variable turn_cv;
    std::uint64_t next_ticket = 0;
    std::uint64_t serving = 0;
  };
  class Turn;
  struct Loaded {
    training::LoadedCheckpoint checkpoint;
    std::string hash;
  };

  std::shared_ptr<Entry> find(const std::string& id);
  std::shared_ptr<Loaded> model() const;
  HttpResponse generate(Entry& entry, Loaded& loaded, const GenerateRequest& request, bool resampling);
  void setup_routes();

  ServiceConfig config_;
  mutable std::mutex model_mutex_;
  std::shared_ptr<Loaded> loaded_;

  mutable std::mutex sessions_mutex_;
  std::list<std::string> lru_;  // most recent first
  std::unordered_map<std::string, std::pair<std::shared_ptr<Entry>, std::list<std::string>::iterator>> sessions_;
  std::uint64_t id_state_;

  std::unique_ptr<httplib::Server> server_;
  std::atomic<bool> stop_requested_{false};
  std::atomic<bool> running_{false};
};

// Fields absent from `body` keep their value from `base`. Throws Error
// "request.invalid" for out-of-range values.
GenerateRequest parse_generate_request(const nlohmann::json& body, const GenerateRequest& base, bool require_text);
nlohmann::json error_body(const std::string& code, const std::string& message);

}  // namespace csrr::service
