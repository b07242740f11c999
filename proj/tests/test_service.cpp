#include "csrr/error.hpp"
#include "csrr/service.hpp"
#include "support/fixtures.hpp"

#include <doctest.h>
#include <httplib.h>

#include <atomic>
#include <thread>

using namespace csrr;
using namespace csrr::service;
using nlohmann::json;

namespace {

training::LoadedCheckpoint toy_checkpoint(std::uint64_t seed = 3) {
  return {model::Model(testing::toy_config(), seed), {}, testing::toy_vocab()};
}

std::unique_ptr<ChatService> loaded_service(ServiceConfig cfg = {}) {
  auto svc = std::make_unique<ChatService>(cfg);
  svc->load(toy_checkpoint(), "abc123");
  return svc;
}

std::string new_session(ChatService& svc) {
  const auto r = svc.create_session();
  REQUIRE(r.status == 201);
  return r.body["id"];
}

std::string code(const HttpResponse& r) { return r.body["error"]["code"]; }

// Runs the service on a free port for the lifetime of the object.
struct Running {
  ChatService& svc;
  int port;
  std::thread thread;
  explicit Running(ChatService& s) : svc(s), port(s.bind("127.0.0.1", 0)), thread([this] { svc.run(); }) {
    svc.wait_until_listening();
  }
  ~Running() {
    svc.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(30, 0);
    return c;
  }
};

}  // namespace

TEST_CASE("health and availability before the model loads") {
  ChatService svc;
  CHECK_FALSE(svc.ready());
  CHECK(svc.health().status == 503);
  CHECK(svc.health().body["status"] == "loading");
  const auto r = svc.create_session();
  CHECK(r.status == 503);
  CHECK(code(r) == "service.unavailable");
  svc.load(toy_checkpoint(), "abc123");
  CHECK(svc.health().status == 200);
  CHECK(svc.health().body["checkpoint_hash"] == "abc123");
  CHECK_THROWS_AS(ChatService(ServiceConfig{0, 8, {}}), Error);
}

TEST_CASE("message round trip") {
  auto svc = loaded_service();
  const auto id = new_session(*svc);
  const auto empty = svc->get_session(id);
  CHECK(empty.status == 200);
  CHECK(empty.body["turns"].empty());
  CHECK(empty.body["options"].is_null());

  const auto r = svc->post_message(id, R"({"text": "a b c", "num_candidates": 3, "seed": 7})");
  REQUIRE(r.status == 200);
  CHECK(r.body["candidates"].size() == 3);
  CHECK(r.body["chosen_index"] == 0);
  CHECK(r.body["latent_sources"]["z_c"] == "posterior_sample");
  CHECK(r.body["latent_sources"]["z_p"] == "prior_sample");
  CHECK(r.body["latent_sources"]["z_r"] == "prior_sample");
  const auto& c0 = r.body["candidates"][0];
  CHECK(c0["tokens"].size() == c0["token_logprobs"].size());

  const auto s = svc->get_session(id);
  REQUIRE(s.body["turns"].size() == 2);
  CHECK(s.body["turns"][0]["speaker"] == "user");
  CHECK(s.body["turns"][0]["text"] == "a b c");
  CHECK(s.body["turns"][1]["speaker"] == "model");
  CHECK(s.body["turns"][1]["text"] == c0["text"]);
  CHECK(s.body["options"]["seed"] == 7);
  CHECK(s.body["options"]["num_candidates"] == 3);
}

TEST_CASE("a fixed seed reproduces the response") {
  auto svc = loaded_service();
  const auto a = new_session(*svc);
  const auto b = new_session(*svc);
  CHECK(a != b);
  const std::string body = R"({"text": "d e", "seed": 11, "temperature": 0.7})";
  CHECK(svc->post_message(a, body).body == svc->post_message(b, body).body);
}

TEST_CASE("resample replaces the last model turn") {
  auto svc = loaded_service();
  const auto id = new_session(*svc);
  CHECK(code(svc->resample(id, "")) == "session.no_model_turn");
  CHECK(svc->resample(id, "").status == 409);

  svc->post_message(id, R"({"text": "a", "seed": 1})");
  std::set<std::string> seen;
  for (int i = 0; i < 6; ++i) {
    const auto r = svc->resample(id, "");
    REQUIRE(r.status == 200);
    const auto s = svc->get_session(id);
    REQUIRE(s.body["turns"].size() == 2);
    CHECK(s.body["turns"][1]["text"] == r.body["candidates"][0]["text"]);
    seen.insert(r.body["candidates"][0]["text"]);
  }
  CHECK(seen.size() >= 2);

  const auto mean = svc->resample(id, R"({"latent_mode": "mean"})");
  CHECK(mean.body["latent_sources"]["z_c"] == "posterior_mean");
  CHECK(mean.body["latent_sources"]["z_r"] == "prior_mean");
  CHECK(svc->get_session(id).body["options"]["latent_mode"] == "mean");
}

TEST_CASE("request validation") {
  auto svc = loaded_service();
  const auto id = new_session(*svc);
  CHECK(svc->post_message("nope", R"({"text": "a"})").status == 404);
  CHECK(svc->get_session("nope").status == 404);
  CHECK(svc->post_message(id, "{not json").status == 400);
  CHECK(svc->post_message(id, "[1, 2]").status == 400);
  CHECK(svc->post_message(id, R"({"text": "   "})").status == 422);
  CHECK(svc->post_message(id, R"({})").status == 422);
  CHECK(svc->post_message(id, R"({"text": "a", "temperature": 0})").status == 422);
  CHECK(svc->post_message(id, R"({"text": "a", "temperature": -1})").status == 422);
  CHECK(svc->post_message(id, R"({"text": "a", "num_candidates": 0})").status == 422);
  CHECK(svc->post_message(id, R"({"text": "a", "num_candidates": 11})").status == 422);
  CHECK(svc->post_message(id, R"({"text": "a", "latent_mode": "max"})").status == 422);
  CHECK(svc->post_message(id, R"({"text": "a", "strategy": "beam"})").status == 422);
  const auto wrong = svc->post_message(id, R"({"text": "a", "seed": "x"})");
  CHECK(wrong.status == 422);
  CHECK(code(wrong) == "request.invalid");
  CHECK(svc->get_session(id).body["turns"].empty());
}

TEST_CASE("parse_generate_request keeps base values") {
  GenerateRequest base;
  base.temperature = 0.5;
  base.seed = 4;
  const auto r = parse_generate_request(json{{"num_candidates", 2}}, base, false);
  CHECK(r.temperature == 0.5);
  CHECK(r.num_candidates == 2);
  CHECK(r.seed == 4u);
  CHECK_FALSE(parse_generate_request(json{{"seed", nullptr}}, base, false).seed.has_value());
}

TEST_CASE("least recently used sessions are evicted") {
  ServiceConfig cfg;
  cfg.max_sessions = 3;
  auto svc = loaded_service(cfg);
  const auto a = new_session(*svc);
  const auto b = new_session(*svc);
  const auto c = new_session(*svc);
  CHECK(svc->get_session(a).status == 200);
  new_session(*svc);
  CHECK(svc->session_count() == 3);
  CHECK(svc->get_session(b).status == 404);
  CHECK(svc->get_session(a).status == 200);
  CHECK(svc->get_session(c).status == 200);
}

TEST_CASE("http endpoints") {
  auto svc = loaded_service();
  Running server(*svc);
  auto cli = server.client();

  auto health = cli.Get("/healthz");
  REQUIRE(health);
  CHECK(health->status == 200);
  CHECK(json::parse(health->body)["status"] == "ok");

  auto created = cli.Post("/sessions", "", "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const std::string id = json::parse(created->body)["id"];

  auto msg = cli.Post("/sessions/" + id + "/messages", R"({"text": "a b"})", "application/json");
  REQUIRE(msg);
  CHECK(msg->status == 200);
  CHECK(msg->get_header_value("Content-Type") == "application/json");

  auto again = cli.Post("/sessions/" + id + "/resample", "", "application/json");
  REQUIRE(again);
  CHECK(again->status == 200);

  auto got = cli.Get("/sessions/" + id);
  REQUIRE(got);
  CHECK(json::parse(got->body)["turns"].size() == 2);

  auto missing = cli.Get("/sessions/none");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(json::parse(missing->body)["error"]["code"] == "session.not_found");

  auto bad = cli.Post("/sessions/" + id + "/messages", R"({"text": "a", "temperature": 0})", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 422);

  auto route = cli.Get("/nowhere");
  REQUIRE(route);
  CHECK(route->status == 404);
  CHECK(json::parse(route->body)["error"]["code"] == "route.not_found");
}

TEST_CASE("fifty concurrent sessions") {
  auto svc = loaded_service();
  Running server(*svc);
  std::atomic<int> ok{0};
  std::vector<std::thread> clients;
  for (int i = 0; i < 50; ++i)
    clients.emplace_back([&, i] {
      auto cli = server.client();
      auto created = cli.Post("/sessions", "", "application/json");
      if (!created || created->status != 201) return;
      const std::string id = json::parse(created->body)["id"];
      const std::string body = json{{"text", "a b c"}, {"seed", i}}.dump();
      auto r = cli.Post("/sessions/" + id + "/messages", body, "application/json");
      if (!r || r->status != 200) return;
      auto s = cli.Get("/sessions/" + id);
      if (s && json::parse(s->body)["turns"].size() == 2) ++ok;
    });
  for (auto& t : clients) t.join();
  CHECK(ok == 50);
  CHECK(svc->session_count() == 50);
}

TEST_CASE("requests on one session are served in arrival order") {
  ServiceConfig cfg;
  cfg.handler_delay = std::chrono::milliseconds(60);
  auto svc = loaded_service(cfg);
  const auto id = new_session(*svc);
  std::vector<std::thread> senders;
  const std::vector<std::string> words = {"a", "b", "c", "d", "e"};
  for (const auto& w : words) {
    senders.emplace_back([&, w] { svc->post_message(id, json{{"text", w}}.dump()); });
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  for (auto& t : senders) t.join();
  const auto turns = svc->get_session(id).body["turns"];
  REQUIRE(turns.size() == 10);
  for (std::size_t i = 0; i < words.size(); ++i) {
    CHECK(turns[2 * i]["speaker"] == "user");
    CHECK(turns[2 * i]["text"] == words[i]);
    CHECK(turns[2 * i + 1]["speaker"] == "model");
  }
}

TEST_CASE("shutdown lets in-flight requests finish") {
  ServiceConfig cfg;
  cfg.handler_delay = std::chrono::milliseconds(400);
  auto svc = loaded_service(cfg);
  const auto id = new_session(*svc);
  const int port = svc->bind("127.0.0.1", 0);
  std::thread runner([&] { svc->run(); });
  svc->wait_until_listening();
  int status = 0;
  std::thread client([&] {
    httplib::Client cli("127.0.0.1", port);
    auto r = cli.Post("/sessions/" + id + "/messages", R"({"text": "a"})", "application/json");
    if (r) status = r->status;
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(150));
  svc->stop();
  runner.join();
  client.join();
  CHECK(status == 200);
  CHECK(svc->get_session(id).body["turns"].size() == 2);
}

TEST_CASE("stop before run returns immediately") {
  ChatService svc;
  svc.bind("127.0.0.1", 0);
  svc.stop();
  svc.run();
  CHECK(true);
}

TEST_CASE("a busy port is reported") {
  ChatService first;
  Running listening(first);
  const int port = listening.port;
  ChatService second;
  try {
    second.bind("127.0.0.1", port);
    FAIL("expected bind to fail");
  } catch (const Error& e) {
    CHECK(e.code() == "serve.bind");
  }
}
