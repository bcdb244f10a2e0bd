#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "vqforge/prompts.hpp"
#include "vqforge/util.hpp"

namespace vqforge {

struct SamplingParams {
  double temperature = 0.7;
  double top_p = 0.95;
  int max_tokens = 1024;
  std::vector<std::string> stop;
};

struct RetryPolicy {
  int max_attempts = 3;
  int base_backoff_ms = 200;
};

// All regex patterns are compiled case-insensitive.
struct ModelRole {
  std::string role_name;  // generator | vlm | reasoner | verifier | judge | embedder
  std::string endpoint_url;
  std::string model_name;
  SamplingParams sampling;
  std::vector<std::string> banned_patterns;
  bool supports_server_constraints = false;
  bool supports_prefix_continuation = true;
  int max_in_flight = 4;
  RetryPolicy retry;
  int timeout_ms = 30000;
  std::string api_key_env;  // name of the env var holding the credential
};

struct Completion {
  std::string text;
  std::string finish_reason;
  long prompt_tokens = 0;
  long completion_tokens = 0;
  int attempt_count = 1;
  long latency_ms = 0;
};

struct RoleBudget {
  long requests = 0;  // logical calls
  long attempts = 0;  // HTTP posts, including retries
  long prompt_tokens = 0;
  long completion_tokens = 0;
};

class GatewayError : public std::runtime_error {
 public:
  GatewayError(std::string role, std::string what, bool permanent)
      : std::runtime_error("[" + role + "] " + what), role_(std::move(role)),
        permanent_(permanent) {}
  bool permanent() const { return permanent_; }
  const std::string& role() const { return role_; }

 private:
  std::string role_;
  bool permanent_;
};

struct SampleResult {
  bool accepted = false;
  Completion completion;      // last completion either way
  std::string matched_pattern;  // set on rejection
  int regen_count = 0;          // regenerations performed (initial sample excluded)
};

namespace detail {

inline nlohmann::json encode_messages(const ChatMessages& messages) {
  nlohmann::json msgs = nlohmann::json::array();
  for (const auto& m : messages.messages) {
    if (m.image_uri.empty()) {
      msgs.push_back({{"role", m.role}, {"content", m.content}});
    } else {
      msgs.push_back(
          {{"role", m.role},
           {"content",
            {{{"type", "text"}, {"text", m.content}},
             {{"type", "image_url"}, {"image_url", {{"url", m.image_uri}}}}}}});
    }
  }
  if (messages.assistant_prefix) {
    msgs.push_back({{"role", "assistant"}, {"content", *messages.assistant_prefix}});
  }
  return msgs;
}

inline bool transient_status(int status) {
  return status == 429 || status == 500 || status == 502 || status == 503 || status == 504;
}

}  // namespace detail

inline nlohmann::json encode_chat_request(const ModelRole& role, const ChatMessages& messages,
                                          std::uint64_t seed) {
  nlohmann::json req{{"model", role.model_name},
                     {"messages", detail::encode_messages(messages)},
                     {"temperature", role.sampling.temperature},
                     {"top_p", role.sampling.top_p},
                     {"max_tokens", role.sampling.max_tokens},
                     {"seed", seed}};
  if (!role.sampling.stop.empty()) req["stop"] = role.sampling.stop;
  if (messages.assistant_prefix) req["continue_final_message"] = true;
  return req;
}

/// Stable fingerprint of the request exactly as it goes on the wire; the stub
/// server keys scripted responses on the same value.
inline std::uint64_t request_fingerprint(const ModelRole& role, const ChatMessages& messages,
                                         std::uint64_t seed) {
  return fnv1a64(encode_chat_request(role, messages, seed).dump());
}

/// One client for every model role behind a chat-completions wire protocol:
/// bounded in-flight requests per role, exponential-backoff retries on
/// transient failures, and client-side enforcement of banned output patterns.
class ModelGateway {
 public:
  explicit ModelGateway(const std::vector<ModelRole>& roles) {
    for (const auto& r : roles) add_role(r);
  }

  void add_role(const ModelRole& role) {
    if (role.max_in_flight < 1) throw std::invalid_argument("max_in_flight must be >= 1");
    if (role.sampling.temperature < 0) throw std::invalid_argument("temperature must be >= 0");
    auto rt = std::make_unique<RoleRuntime>(role);
    for (const auto& p : role.banned_patterns) {
      rt->compiled_banned.emplace_back(p, std::regex::icase);  // throws on bad pattern
    }
    std::lock_guard<std::mutex> lk(mu_);
    roles_[role.role_name] = std::move(rt);
  }

  const ModelRole& role(const std::string& role_name) const { return runtime(role_name).role; }

  bool has_role(const std::string& role_name) const {
    std::lock_guard<std::mutex> lk(mu_);
    return roles_.count(role_name) > 0;
  }

  Completion chat_complete(const std::string& role_name, const ChatMessages& messages,
                           std::uint64_t seed) {
    RoleRuntime& rt = runtime(role_name);
    if (messages.assistant_prefix && !rt.role.supports_prefix_continuation)
      throw GatewayError(role_name, "endpoint does not support prefix continuation", true);
    const nlohmann::json req = encode_chat_request(rt.role, messages, seed);
    const nlohmann::json resp = post_with_retry(rt, "/v1/chat/completions", req);

    Completion c;
    try {
      const auto& choice = resp.at("choices").at(0);
      c.text = choice.at("message").at("content").get<std::string>();
      c.finish_reason = choice.value("finish_reason", "");
      if (resp.contains("usage")) {
        c.prompt_tokens = resp["usage"].value("prompt_tokens", 0L);
        c.completion_tokens = resp["usage"].value("completion_tokens", 0L);
      }
    } catch (const nlohmann::json::exception& e) {
      throw GatewayError(role_name, std::string("malformed completion response: ") + e.what(),
                         true);
    }
    c.attempt_count = last_attempts_;
    c.latency_ms = last_latency_ms_;
    rt.budget_prompt_tokens += c.prompt_tokens;
    rt.budget_completion_tokens += c.completion_tokens;
    return c;
  }

  /// Batch embedding; every returned vector is L2-normalized.
  std::vector<std::vector<double>> embed(const std::string& role_name,
                                         const std::vector<std::string>& texts) {
    if (texts.empty()) throw std::invalid_argument("embed requires at least one text");
    RoleRuntime& rt = runtime(role_name);
    const nlohmann::json req{{"model", rt.role.model_name}, {"input", texts}};
    const nlohmann::json resp = post_with_retry(rt, "/v1/embeddings", req);

    std::vector<std::vector<double>> out;
    try {
      for (const auto& row : resp.at("data")) {
        out.push_back(row.at("embedding").get<std::vector<double>>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw GatewayError(role_name, std::string("malformed embedding response: ") + e.what(),
                         true);
    }
    if (out.size() != texts.size())
      throw GatewayError(role_name, "embedding count differs from input count", true);
    const std::size_t dim = out.front().size();
    for (auto& v : out) {
      if (v.size() != dim)
        throw GatewayError(role_name, "embedding dimension mismatch within batch", true);
      double norm = 0;
      for (double x : v) norm += x * x;
      norm = std::sqrt(norm);
      if (norm <= 0)
        throw GatewayError(role_name, "embedding has zero norm", true);
      for (double& x : v) x /= norm;
    }
    return out;
  }

  /// Guided decoding against the role's banned patterns. When the endpoint
  /// supports server-side constraints the pattern list rides along on the
  /// request; the output is checked client-side either way. Fresh samples
  /// (new seeds) are drawn up to max_regens times before rejecting.
  SampleResult constrained_sample(const std::string& role_name, const ChatMessages& messages,
                                  std::uint64_t seed, int max_regens) {
    RoleRuntime& rt = runtime(role_name);
    SampleResult result;
    for (int regen = 0; regen <= max_regens; ++regen) {
      const std::uint64_t attempt_seed = regen == 0 ? seed : mix_hash(seed, static_cast<std::uint64_t>(regen));
      Completion c;
      if (rt.role.supports_server_constraints) {
        nlohmann::json req = encode_chat_request(rt.role, messages, attempt_seed);
        req["banned_patterns"] = rt.role.banned_patterns;
        const nlohmann::json resp = post_with_retry(rt, "/v1/chat/completions", req);
        c.text = resp.at("choices").at(0).at("message").at("content").get<std::string>();
        c.attempt_count = last_attempts_;
      } else {
        c = chat_complete(role_name, messages, attempt_seed);
      }
      result.completion = c;
      result.regen_count = regen;
      std::string matched;
      if (!matches_banned(rt, c.text, matched)) {
        result.accepted = true;
        return result;
      }
      result.matched_pattern = matched;
    }
    result.accepted = false;
    return result;
  }

  /// Checks whether the endpoint honors assistant-prefix continuation.
  bool probe_prefix_continuation(const std::string& role_name) {
    RoleRuntime& rt = runtime(role_name);
    ChatMessages probe;
    probe.messages.push_back({"user", "Continue the assistant message.", ""});
    probe.assistant_prefix = "probe:";
    try {
      const nlohmann::json req = encode_chat_request(rt.role, probe, 0);
      const nlohmann::json resp = post_with_retry(rt, "/v1/chat/completions", req);
      return resp.contains("choices") && !resp["choices"].empty();
    } catch (const GatewayError&) {
      return false;
    }
  }

  std::map<std::string, RoleBudget> budgets() const {
    std::lock_guard<std::mutex> lk(mu_);
    std::map<std::string, RoleBudget> out;
    for (const auto& [name, rt] : roles_) {
      out[name] = RoleBudget{rt->budget_requests.load(), rt->budget_attempts.load(),
                             rt->budget_prompt_tokens.load(),
                             rt->budget_completion_tokens.load()};
    }
    return out;
  }

  void reset_budgets() {
    std::lock_guard<std::mutex> lk(mu_);
    for (auto& [name, rt] : roles_) {
      rt->budget_requests = 0;
      rt->budget_attempts = 0;
      rt->budget_prompt_tokens = 0;
      rt->budget_completion_tokens = 0;
    }
  }

 private:
  struct RoleRuntime {
    explicit RoleRuntime(ModelRole r) : role(std::move(r)), in_flight(role.max_in_flight) {}
    ModelRole role;
    Semaphore in_flight;
    std::vector<std::regex> compiled_banned;
    std::atomic<long> budget_requests{0};
    std::atomic<long> budget_attempts{0};
    std::atomic<long> budget_prompt_tokens{0};
    std::atomic<long> budget_completion_tokens{0};
  };

  RoleRuntime& runtime(const std::string& role_name) const {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = roles_.find(role_name);
    if (it == roles_.end()) throw std::invalid_argument("unknown model role: " + role_name);
    return *it->second;
  }

  bool matches_banned(const RoleRuntime& rt, const std::string& text, std::string& matched) {
    for (std::size_t i = 0; i < rt.compiled_banned.size(); ++i) {
      if (std::regex_search(text, rt.compiled_banned[i])) {
        matched = rt.role.banned_patterns[i];
        return true;
      }
    }
    return false;
  }

  nlohmann::json post_with_retry(RoleRuntime& rt, const std::string& path,
                                 const nlohmann::json& body) {
    SemaphoreGuard guard(rt.in_flight);
    rt.budget_requests += 1;
    const std::string payload = body.dump();
    const auto t0 = std::chrono::steady_clock::now();
    std::string last_error;
    for (int attempt = 1; attempt <= rt.role.retry.max_attempts; ++attempt) {
      rt.budget_attempts += 1;
      httplib::Client client(rt.role.endpoint_url);
      client.set_connection_timeout(0, rt.role.timeout_ms * 1000);
      client.set_read_timeout(rt.role.timeout_ms / 1000, (rt.role.timeout_ms % 1000) * 1000);
      httplib::Headers headers;
      if (!rt.role.api_key_env.empty()) {
        if (const char* key = std::getenv(rt.role.api_key_env.c_str()); key && *key)
          headers.emplace("Authorization", std::string("Bearer ") + key);
      }
      auto res = client.Post(path, headers, payload, "application/json");
      if (res && res->status >= 200 && res->status < 300) {
        last_attempts_ = attempt;
        last_latency_ms_ = std::chrono::duration_cast<std::chrono::milliseconds>(
                               std::chrono::steady_clock::now() - t0)
                               .count();
        try {
          return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception& e) {
          throw GatewayError(rt.role.role_name,
                             std::string("response is not valid JSON: ") + e.what(), true);
        }
      }
      if (res && !detail::transient_status(res->status)) {
        throw GatewayError(rt.role.role_name,
                           "HTTP " + std::to_string(res->status) + " from " + path, true);
      }
      last_error = res ? "HTTP " + std::to_string(res->status)
                       : "transport error " + httplib::to_string(res.error());
      if (attempt < rt.role.retry.max_attempts) {
        const auto delay = std::chrono::milliseconds(
            static_cast<long>(rt.role.retry.base_backoff_ms) * (1L << (attempt - 1)));
        std::this_thread::sleep_for(delay);
      }
    }
    throw GatewayError(rt.role.role_name,
                       "permanent failure after " + std::to_string(rt.role.retry.max_attempts) +
                           " attempts (" + last_error + ")",
                       true);
  }

  mutable std::mutex mu_;
  std::map<std::string, std::unique_ptr<RoleRuntime>> roles_;
  static inline thread_local int last_attempts_ = 1;
  static inline thread_local long last_latency_ms_ = 0;
};

}  // namespace vqforge
