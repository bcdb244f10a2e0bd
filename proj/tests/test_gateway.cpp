#include <catch2/catch_amalgamated.hpp>

#include <thread>

#include "vqforge/gateway.hpp"
#include "vqforge/stub_server.hpp"

#include "support.hpp"

using namespace vqforge;

namespace {

ModelRole fast_role(const std::string& name, const std::string& url) {
  ModelRole r = default_role(name, url);
  r.retry = {3, 2};
  r.timeout_ms = 5000;
  return r;
}

ChatMessages simple_messages(const std::string& text) {
  ChatMessages m;
  m.messages.push_back({"user", text, ""});
  return m;
}

}  // namespace

TEST_CASE("chat completions from the stub are deterministic") {
  stub::StubServer server;
  server.start();
  ModelGateway gw({fast_role("generator", server.url())});

  const auto m = simple_messages("hello determinism");
  const Completion a = gw.chat_complete("generator", m, 11);
  const Completion b = gw.chat_complete("generator", m, 11);
  CHECK(a.text == b.text);
  CHECK(a.attempt_count == 1);
  CHECK(a.prompt_tokens > 0);

  // A different seed is a different request, hence fresh text.
  const Completion c = gw.chat_complete("generator", m, 12);
  CHECK(c.text != a.text);
}

TEST_CASE("throttle-once fault is retried transparently") {
  stub::StubConfig cfg;
  cfg.rules.push_back({"retry me", "", "", std::nullopt, {}, "throttle_once", 0, 429});
  stub::StubServer server(cfg);
  server.start();
  ModelGateway gw({fast_role("generator", server.url())});

  const Completion c = gw.chat_complete("generator", simple_messages("retry me please"), 1);
  CHECK(c.attempt_count == 2);
}

TEST_CASE("persistent faults exhaust retries and surface a permanent error") {
  stub::StubConfig cfg;
  cfg.rules.push_back({"always down", "", "", std::nullopt, {}, "fail_n", 1000, 503});
  stub::StubServer server(cfg);
  server.start();
  ModelGateway gw({fast_role("generator", server.url())});

  const long before = server.stats().requests;
  CHECK_THROWS_AS(gw.chat_complete("generator", simple_messages("always down"), 1),
                  GatewayError);
  // Attempts are bounded by the retry policy.
  CHECK(server.stats().requests - before == 3);
}

TEST_CASE("unreachable endpoints fail permanently after retries") {
  ModelRole role = fast_role("generator", "http://127.0.0.1:1");  // nothing listens here
  ModelGateway gw({role});
  CHECK_THROWS_AS(gw.chat_complete("generator", simple_messages("x"), 1), GatewayError);
}

TEST_CASE("non-transient HTTP statuses are not retried") {
  stub::StubConfig cfg;
  cfg.rules.push_back({"bad request", "", "", std::nullopt, {}, "fail_n", 1000, 404});
  stub::StubServer server(cfg);
  server.start();
  ModelGateway gw({fast_role("generator", server.url())});
  const long before = server.stats().requests;
  CHECK_THROWS_AS(gw.chat_complete("generator", simple_messages("bad request"), 1),
                  GatewayError);
  CHECK(server.stats().requests - before == 1);
}

TEST_CASE("scripted responses can be keyed on the exact request hash") {
  const ModelRole role = fast_role("generator", "http://127.0.0.1:0");
  const auto msgs = simple_messages("hash keyed request");
  // The fingerprint depends on the full encoded body, which includes the
  // endpoint-independent fields only, so it can be computed up front.
  const std::uint64_t h = request_fingerprint(role, msgs, 99);

  stub::StubConfig cfg;
  cfg.rules.push_back({"", "", to_hex(h), std::string("canned by hash"), {}, "", 0, 0});
  stub::StubServer server(cfg);
  server.start();
  ModelGateway gw({fast_role("generator", server.url())});

  CHECK(gw.chat_complete("generator", msgs, 99).text == "canned by hash");
  CHECK(gw.chat_complete("generator", msgs, 100).text != "canned by hash");
}

TEST_CASE("the gateway transmits message content verbatim") {
  stub::StubServer server;
  server.start();
  ModelGateway gw({fast_role("vlm", server.url())});

  ChatMessages m;
  m.messages.push_back({"system", "be terse", ""});
  m.messages.push_back({"user", "content with \"quotes\" and\nnewlines é", "img://007"});
  gw.chat_complete("vlm", m, 3);

  httplib::Client probe(server.url());
  const auto res = probe.Get("/last_request");
  REQUIRE(res);
  const auto body = nlohmann::json::parse(res->body);
  CHECK(body["messages"][0]["content"] == "be terse");
  CHECK(body["messages"][1]["content"][0]["text"] == "content with \"quotes\" and\nnewlines é");
  CHECK(body["messages"][1]["content"][1]["image_url"]["url"] == "img://007");
  CHECK(body["seed"] == 3);
}

TEST_CASE("embeddings are unit-norm and deterministic per text") {
  stub::StubServer server;
  server.start();
  ModelGateway gw({fast_role("embedder", server.url())});

  const auto vecs = gw.embed("embedder", {"what color", "what color", "another stem"});
  REQUIRE(vecs.size() == 3);
  for (const auto& v : vecs) {
    double norm = 0;
    for (double x : v) norm += x * x;
    CHECK(std::abs(std::sqrt(norm) - 1.0) < 1e-6);
  }
  CHECK(vecs[0] == vecs[1]);
  CHECK(vecs[0] != vecs[2]);
}

TEST_CASE("scripted embeddings land orthogonal texts at cosine zero") {
  stub::StubConfig cfg;
  cfg.embedding_overrides["alpha"] = {1, 0, 0, 0};
  cfg.embedding_overrides["bravo"] = {0, 1, 0, 0};
  stub::StubServer server(cfg);
  server.start();
  ModelGateway gw({fast_role("embedder", server.url())});

  const auto vecs = gw.embed("embedder", {"alpha", "bravo"});
  double dot = 0;
  for (std::size_t i = 0; i < vecs[0].size(); ++i) dot += vecs[0][i] * vecs[1][i];
  CHECK(dot == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("constrained sampling accepts clean completions on the first attempt") {
  stub::StubConfig cfg;
  cfg.rules.push_back({"clean please", "", "", std::string("a tidy completion"), {}, "", 0, 0});
  stub::StubServer server(cfg);
  server.start();
  ModelRole role = fast_role("reasoner", server.url());
  ModelGateway gw({role});

  const auto res = gw.constrained_sample("reasoner", simple_messages("clean please"), 5, 3);
  CHECK(res.accepted);
  CHECK(res.regen_count == 0);
  CHECK(res.completion.text == "a tidy completion");
}

TEST_CASE("banned phrases trigger regeneration and eventually rejection") {
  stub::StubConfig cfg;
  cfg.rules.push_back({"expansion request", "", "",
                       std::string("well, the image description says it is blue"), {}, "", 0, 0});
  stub::StubServer server(cfg);
  server.start();
  ModelRole role = fast_role("reasoner", server.url());
  ModelGateway gw({role});

  const long before = server.stats().requests;
  const auto res = gw.constrained_sample("reasoner", simple_messages("expansion request"), 5, 3);
  CHECK_FALSE(res.accepted);
  CHECK(res.regen_count == 3);
  CHECK(res.matched_pattern == "image description");
  // initial sample + exactly max_regens fresh samples
  CHECK(server.stats().requests - before == 4);
}

TEST_CASE("accepted constrained samples match no banned pattern") {
  stub::StubConfig cfg;
  cfg.behavior.banned_phrase_rate = 0.5;
  stub::StubServer server(cfg);
  server.start();
  ModelRole role = fast_role("reasoner", server.url());
  ModelGateway gw({role});

  std::vector<std::regex> banned;
  for (const auto& p : role.banned_patterns) banned.emplace_back(p, std::regex::icase);

  ChatMessages m;
  m.messages.push_back({"user", "A scene.\n\nWhich side is lit?\n(A) left (B) right", ""});
  m.assistant_prefix = "<think>Initial thought.";
  int accepted = 0;
  for (int i = 0; i < 20; ++i) {
    const auto res = gw.constrained_sample("reasoner", m, 1000 + static_cast<std::uint64_t>(i), 4);
    if (!res.accepted) continue;
    ++accepted;
    for (const auto& pat : banned) CHECK_FALSE(std::regex_search(res.completion.text, pat));
  }
  CHECK(accepted > 0);
}

TEST_CASE("per-role concurrency stays within max_in_flight") {
  stub::StubConfig cfg;
  cfg.latency_ms = 25;
  stub::StubServer server(cfg);
  server.start();
  ModelRole role = fast_role("generator", server.url());
  role.max_in_flight = 3;
  ModelGateway gw({role});

  std::vector<std::thread> threads;
  for (int i = 0; i < 10; ++i) {
    threads.emplace_back([&gw, i] {
      gw.chat_complete("generator", simple_messages("load " + std::to_string(i)),
                       static_cast<std::uint64_t>(i));
    });
  }
  for (auto& t : threads) t.join();
  CHECK(server.stats().max_concurrent <= 3);
  CHECK(server.stats().requests == 10);
}

TEST_CASE("assistant-prefix requests require endpoint support") {
  stub::StubServer server;
  server.start();
  ModelRole role = fast_role("reasoner", server.url());
  role.supports_prefix_continuation = false;
  ModelGateway gw({role});

  ChatMessages m = simple_messages("continue this");
  m.assistant_prefix = "<think>so far";
  CHECK_THROWS_AS(gw.chat_complete("reasoner", m, 1), GatewayError);

  ModelRole ok = fast_role("vlm", server.url());
  ModelGateway gw2({ok});
  CHECK(gw2.probe_prefix_continuation("vlm"));
}

TEST_CASE("budgets accumulate per role") {
  stub::StubServer server;
  server.start();
  ModelGateway gw({fast_role("generator", server.url())});
  gw.chat_complete("generator", simple_messages("first"), 1);
  gw.chat_complete("generator", simple_messages("second"), 2);
  const auto budgets = gw.budgets();
  CHECK(budgets.at("generator").requests == 2);
  CHECK(budgets.at("generator").attempts == 2);
  CHECK(budgets.at("generator").prompt_tokens > 0);
}

TEST_CASE("invalid banned patterns are rejected at role registration") {
  stub::StubServer server;
  server.start();
  ModelRole role = fast_role("reasoner", server.url());
  role.banned_patterns = {"([unclosed"};
  CHECK_THROWS(ModelGateway({role}));
}
