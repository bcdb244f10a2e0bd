#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "vqforge/util.hpp"

namespace vqforge::stub {

// Scripted behaviors for specific requests. Rules are evaluated in order;
// the first match wins. `contains` matches against the raw request body.
struct StubRule {
  std::string contains;        // substring of the raw body
  std::string model_contains;  // substring of the model field
  std::string request_hash;    // hex fingerprint of the exact body
  std::optional<std::string> response_text;
  std::vector<std::string> response_sequence;  // served in arrival order, clamped at the end
  std::string fault_kind;                      // "" | throttle_once | fail_n
  int fault_n = 0;
  int fault_status = 503;
};

struct StubBehavior {
  double wrong_answer_rate = 0.0;     // solve / distill answers deviating from the keyed letter
  double expand_wrong_rate = 0.0;     // expansion answers deviating from the keyed letter
  double banned_phrase_rate = 0.0;    // expansions referencing the provided description
  double verifier_no_rate = 0.0;      // verifier returning \boxed{No}
  double garbled_verdict_rate = 0.0;  // verifier output without a boxed verdict
  double malformed_think_rate = 0.0;  // expansions missing the closing think tag
  double dup_question_rate = 0.0;     // generator re-emitting a stock question
  double count_mismatch_rate = 0.0;   // generator emitting one block short
};

struct StubConfig {
  std::uint64_t seed = 1;
  int latency_ms = 0;
  std::size_t embedding_dim = 64;
  StubBehavior behavior;
  std::map<std::string, std::vector<double>> embedding_overrides;
  std::vector<StubRule> rules;

  static StubConfig from_json(const nlohmann::json& j) {
    StubConfig cfg;
    cfg.seed = j.value("seed", 1ull);
    cfg.latency_ms = j.value("latency_ms", 0);
    cfg.embedding_dim = j.value("embedding_dim", std::size_t{64});
    if (j.contains("behavior")) {
      const auto& b = j["behavior"];
      auto& out = cfg.behavior;
      out.wrong_answer_rate = b.value("wrong_answer_rate", 0.0);
      out.expand_wrong_rate = b.value("expand_wrong_rate", 0.0);
      out.banned_phrase_rate = b.value("banned_phrase_rate", 0.0);
      out.verifier_no_rate = b.value("verifier_no_rate", 0.0);
      out.garbled_verdict_rate = b.value("garbled_verdict_rate", 0.0);
      out.malformed_think_rate = b.value("malformed_think_rate", 0.0);
      out.dup_question_rate = b.value("dup_question_rate", 0.0);
      out.count_mismatch_rate = b.value("count_mismatch_rate", 0.0);
    }
    if (j.contains("embeddings")) {
      for (auto it = j["embeddings"].begin(); it != j["embeddings"].end(); ++it)
        cfg.embedding_overrides[it.key()] = it.value().get<std::vector<double>>();
    }
    if (j.contains("rules")) {
      for (const auto& rj : j["rules"]) {
        StubRule r;
        if (rj.contains("match")) {
          r.contains = rj["match"].value("contains", "");
          r.model_contains = rj["match"].value("model_contains", "");
          r.request_hash = rj["match"].value("request_hash", "");
        }
        if (rj.contains("response")) {
          if (rj["response"].contains("text"))
            r.response_text = rj["response"]["text"].get<std::string>();
          if (rj["response"].contains("sequence"))
            r.response_sequence = rj["response"]["sequence"].get<std::vector<std::string>>();
        }
        if (rj.contains("fault")) {
          r.fault_kind = rj["fault"].value("kind", "");
          r.fault_n = rj["fault"].value("n", 0);
          r.fault_status = rj["fault"].value("status", 503);
        }
        cfg.rules.push_back(std::move(r));
      }
    }
    return cfg;
  }

  static StubConfig from_script_file(const std::string& path) {
    std::ifstream in(path);
    if (!in.good()) throw std::runtime_error("stub script not found: " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
  }
};

struct StubStats {
  long requests = 0;
  long max_concurrent = 0;
};

namespace pools {

inline const std::vector<std::string>& colors() {
  static const std::vector<std::string> v{"red", "blue", "green", "brown",
                                          "white", "black", "yellow", "gray"};
  return v;
}
inline const std::vector<std::string>& materials() {
  static const std::vector<std::string> v{"wood",   "metal", "leather", "plastic",
                                          "fabric", "stone", "glass",   "ceramic"};
  return v;
}
inline const std::vector<std::string>& anchors() {
  static const std::vector<std::string> v{"fence", "window", "path", "doorway",
                                          "wall",  "bench",  "table", "curb"};
  return v;
}
inline const std::vector<std::string>& relations() {
  static const std::vector<std::string> v{
      "near the fence",        "below the window", "beside the path",
      "close to the doorway",  "against the wall", "behind the bench",
      "on the table",          "along the curb"};
  return v;
}
inline const std::vector<std::string>& conditions() {
  static const std::vector<std::string> v{"brand new", "slightly worn", "visibly damaged",
                                          "pristine",  "dusty",         "freshly painted",
                                          "faded",     "wet"};
  return v;
}
inline const std::vector<std::string>& sizes() {
  static const std::vector<std::string> v{"much larger", "slightly larger",
                                          "about the same size", "noticeably smaller"};
  return v;
}
inline const std::vector<std::string>& functions() {
  static const std::vector<std::string> v{"decoration", "storage",   "seating", "support",
                                          "lighting",   "transport", "signage", "shelter"};
  return v;
}
inline const std::vector<std::string>& stock_questions() {
  static const std::vector<std::string> v{
      "What is the most prominent color of the object of interest?",
      "Which material best describes the highlighted item?",
      "What condition is the featured element in?",
      "Which part of the scene holds the item being asked about?",
      "What role does the highlighted item play in the scene?"};
  return v;
}
inline const std::vector<std::string>& rationale_sentences() {
  static const std::vector<std::string> v{
      "Let me locate the region the question points to.",
      "The surrounding context gives useful hints about the target.",
      "First, I identify which element the question is about.",
      "Its surface detail stands out against the background.",
      "Next, I compare it with the nearby elements.",
      "The lighting over that area makes the attribute readable."};
  return v;
}
inline const std::vector<std::string>& expansion_sentences() {
  static const std::vector<std::string> v{
      "Wait, I should double-check the relative positions before settling.",
      "Let me verify the attribute by re-reading the visible details.",
      "Actually, the earlier assumption about the placement may be off.",
      "First, I break this down into what the region shows and what the options claim.",
      "On second thought, the texture is more consistent with a different option.",
      "I confirm the remaining candidates one by one against the scene.",
      "Next, I eliminate the options that contradict the spatial layout.",
      "Let me double-check whether the color holds at the region's edge."};
  return v;
}
inline const std::vector<std::string>& aspects() {
  static const std::vector<std::string> v{"color scheme",       "relative placement",
                                          "material mix",       "lighting balance",
                                          "count of items",     "texture contrast"};
  return v;
}

}  // namespace pools

/// Deterministic chat-completions + embeddings server. Output is a pure
/// function of (script, request bytes): every request body is hashed and the
/// hash seeds the per-response RNG, so identical requests always produce
/// identical responses and re-sampling with a fresh seed produces fresh text.
class StubServer {
 public:
  explicit StubServer(StubConfig cfg = {}) : cfg_(std::move(cfg)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req,
                                                httplib::Response& res) {
      handle_tracked(req, res, [this](const httplib::Request& r, httplib::Response& s) {
        handle_chat(r, s);
      });
    });
    server_.Post("/v1/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
      handle_tracked(req, res, [this](const httplib::Request& r, httplib::Response& s) {
        handle_embeddings(r, s);
      });
    });
    server_.Get("/stats", [this](const httplib::Request&, httplib::Response& res) {
      nlohmann::json j{{"requests", requests_.load()}, {"max_concurrent", max_concurrent_.load()}};
      res.set_content(j.dump(), "application/json");
    });
    server_.Get("/last_request", [this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard<std::mutex> lk(mu_);
      res.set_content(last_body_, "application/json");
    });
  }

  ~StubServer() { stop(); }

  /// Binds 127.0.0.1 on a free port and serves in a background thread.
  int start() {
    port_ = server_.bind_to_any_port("127.0.0.1");
    if (port_ <= 0) throw std::runtime_error("stub server failed to bind");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  /// Serves on a fixed port; blocks until stop().
  void run_blocking(int port) {
    if (!server_.bind_to_port("127.0.0.1", port))
      throw std::runtime_error("stub server failed to bind port " + std::to_string(port));
    port_ = port;
    server_.listen_after_bind();
  }

  void stop() {
    if (server_.is_running()) server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }

  StubStats stats() const { return {requests_.load(), max_concurrent_.load()}; }

 private:
  template <typename Handler>
  void handle_tracked(const httplib::Request& req, httplib::Response& res, Handler&& h) {
    const long cur = ++concurrent_;
    long seen = max_concurrent_.load();
    while (cur > seen && !max_concurrent_.compare_exchange_weak(seen, cur)) {
    }
    ++requests_;
    {
      std::lock_guard<std::mutex> lk(mu_);
      last_body_ = req.body;
    }
    if (cfg_.latency_ms > 0)
      std::this_thread::sleep_for(std::chrono::milliseconds(cfg_.latency_ms));
    h(req, res);
    --concurrent_;
  }

  // --- rule machinery ------------------------------------------------------

  const StubRule* match_rule(const std::string& body, const std::string& model,
                             std::uint64_t hash, std::size_t& rule_idx) {
    for (std::size_t i = 0; i < cfg_.rules.size(); ++i) {
      const auto& r = cfg_.rules[i];
      if (!r.contains.empty() && body.find(r.contains) == std::string::npos) continue;
      if (!r.model_contains.empty() && model.find(r.model_contains) == std::string::npos)
        continue;
      if (!r.request_hash.empty() && r.request_hash != to_hex(hash)) continue;
      if (r.contains.empty() && r.model_contains.empty() && r.request_hash.empty()) continue;
      rule_idx = i;
      return &r;
    }
    return nullptr;
  }

  // Returns a fault status to serve, or 0 to proceed.
  int apply_fault(const StubRule& rule, std::size_t rule_idx, std::uint64_t hash) {
    std::lock_guard<std::mutex> lk(mu_);
    if (rule.fault_kind == "throttle_once") {
      if (throttled_.insert(hash).second) return 429;
      return 0;
    }
    if (rule.fault_kind == "fail_n") {
      int& count = fail_counts_[rule_idx];
      if (count < rule.fault_n) {
        ++count;
        return rule.fault_status;
      }
      return 0;
    }
    return 0;
  }

  std::string take_sequence(std::size_t rule_idx, const std::vector<std::string>& seq) {
    std::lock_guard<std::mutex> lk(mu_);
    std::size_t& i = sequence_pos_[rule_idx];
    const std::string out = seq[std::min(i, seq.size() - 1)];
    ++i;
    return out;
  }

  // --- request digestion ---------------------------------------------------

  struct ChatView {
    std::string model;
    std::string user_text;       // all user/system text parts joined
    std::string prefix;          // assistant prefix content, if continuing
    bool continue_prefix = false;
  };

  static ChatView digest(const nlohmann::json& req) {
    ChatView v;
    v.model = req.value("model", "");
    v.continue_prefix = req.value("continue_final_message", false);
    if (!req.contains("messages")) return v;
    for (const auto& m : req["messages"]) {
      const std::string role = m.value("role", "");
      std::string content;
      if (m.contains("content")) {
        if (m["content"].is_string()) {
          content = m["content"].get<std::string>();
        } else if (m["content"].is_array()) {
          for (const auto& part : m["content"])
            if (part.value("type", "") == "text") content += part.value("text", "");
        }
      }
      if (role == "assistant")
        v.prefix = content;
      else {
        if (!v.user_text.empty()) v.user_text += '\n';
        v.user_text += content;
      }
    }
    return v;
  }

  static std::string last_question_line(const std::string& text) {
    std::string found;
    for (const auto& raw : split_lines(text)) {
      const std::string line = trim(raw);
      if (!line.empty() && line.back() == '?') found = line;
    }
    return found;
  }

  static char gold_letter_for(const std::string& question) {
    return static_cast<char>('A' + fnv1a64(trim(question)) % 4);
  }

  static char flip_letter(char gold, Rng& rng) {
    return static_cast<char>('A' + (gold - 'A' + 1 + rng.below(3)) % 4);
  }

  char answered_letter(const std::string& question, Rng& rng, double wrong_rate) {
    const char gold = gold_letter_for(question);
    return rng.chance(wrong_rate) ? flip_letter(gold, rng) : gold;
  }

  // --- synthetic responses -------------------------------------------------

  std::string synth_stage1(const ChatView& v, Rng& rng) {
    int n = 4;
    {
      static const std::regex pat(R"(Generate exactly (\d+) multiple-choice)");
      std::smatch m;
      if (std::regex_search(v.user_text, m, pat)) n = std::stoi(m[1].str());
    }
    std::string label = "object";
    {
      static const std::regex pat(R"(- Object: (.*))");
      std::smatch m;
      if (std::regex_search(v.user_text, m, pat)) label = trim(m[1].str());
    }
    std::array<long, 4> box{0, 0, 1, 1};
    {
      static const std::regex pat(R"(\[(\d+), (\d+), (\d+), (\d+)\])");
      std::smatch m;
      if (std::regex_search(v.user_text, m, pat))
        for (int i = 0; i < 4; ++i) box[static_cast<std::size_t>(i)] = std::stol(m[i + 1].str());
    }
    if (rng.chance(cfg_.behavior.count_mismatch_rate) && n > 1) n -= 1;

    static const std::vector<std::string> types{
        "Specific Region Analysis", "Object-Environment Interactions",
        "Comparative & Relational Questions", "Functional & Semantic Analysis"};
    std::string out;
    for (int i = 0; i < n; ++i) {
      std::string question;
      std::string type = types[static_cast<std::size_t>(i % 4)];
      std::vector<std::string> pool;
      bool stock = false;
      if (rng.chance(cfg_.behavior.dup_question_rate)) {
        // Stock questions come out byte-identical across calls, choices
        // included, so the duplicate screen has real collisions to catch.
        question = rng.pick(pools::stock_questions());
        pool = pools::colors();
        type = types[0];
        stock = true;
      } else {
        switch (i % 4) {
          case 0:
            question = "What is the dominant color of the object " + rng.pick(pools::relations()) + "?";
            pool = pools::colors();
            break;
          case 1:
            question = "What material does the item " + rng.pick(pools::relations()) +
                       " appear to be made of?";
            pool = pools::materials();
            break;
          case 2:
            question = "How does the element " + rng.pick(pools::relations()) +
                       " compare in size to the " + rng.pick(pools::anchors()) + "?";
            pool = pools::sizes();
            break;
          default:
            question = "What function does the item " + rng.pick(pools::relations()) +
                       " most likely serve?";
            pool = pools::functions();
            break;
        }
      }
      std::vector<std::string> opts = pool;
      if (!stock) rng.shuffle(opts);
      opts.resize(4);
      const int gold = gold_letter_for(question) - 'A';
      out += std::to_string(i + 1) + ". <question> " + question + " </question>\n";
      out += "   <choices> (A) " + opts[0] + " (B) " + opts[1] + " (C) " + opts[2] + " (D) " +
             opts[3] + " </choices>\n";
      out += "   <answer> " + label + ", [" + std::to_string(box[0]) + ", " +
             std::to_string(box[1]) + ", " + std::to_string(box[2]) + ", " +
             std::to_string(box[3]) + "], " + opts[static_cast<std::size_t>(gold)] +
             " </answer>\n";
      out += "   <type> " + type + " </type>\n";
    }
    return out;
  }

  std::string synth_stage2(const ChatView& v, Rng& rng) {
    const std::size_t n_problems = count_occurrences(v.user_text, "Problem ");
    const std::string aspect = rng.pick(pools::aspects());
    const std::string question = "Taking all " + std::to_string(n_problems) +
                                 " observations together, which statement about the " + aspect +
                                 " is fully supported by the image?";
    std::vector<std::string> opts;
    std::vector<std::string> colors = pools::colors();
    std::vector<std::string> anchors = pools::anchors();
    rng.shuffle(colors);
    rng.shuffle(anchors);
    for (int i = 0; i < 4; ++i)
      opts.push_back("The " + colors[static_cast<std::size_t>(i)] + " element sits closest to the " +
                     anchors[static_cast<std::size_t>(i)] + ".");
    const char gold = gold_letter_for(question);
    std::string answer_line;
    const std::uint64_t style = rng.below(100);
    if (style < 70) {
      answer_line = std::string("(") + gold + ")";
    } else if (style < 85) {
      answer_line = std::string(1, gold);
    } else {
      answer_line = opts[static_cast<std::size_t>(gold - 'A')];
    }
    std::string out = "Hard problem\n" + question + "\n";
    for (int i = 0; i < 4; ++i) {
      out += std::string("(") + static_cast<char>('A' + i) + ") " +
             opts[static_cast<std::size_t>(i)] + "\n";
    }
    out += "Correct answer: " + answer_line + "\n";
    return out;
  }

  std::string synth_solve(const ChatView& v, Rng& rng) {
    const std::string question = last_question_line(v.user_text);
    const char letter = answered_letter(question, rng, cfg_.behavior.wrong_answer_rate);
    const bool rich = v.model.find("vlm") != std::string::npos;
    const std::size_t n_sent = (rich ? 2 : 1) + rng.below(2);
    std::string out;
    for (std::size_t i = 0; i < n_sent; ++i) {
      out += rng.pick(pools::rationale_sentences());
      out += ' ';
    }
    out += "\nAnswer: (";
    out += letter;
    out += ")";
    return out;
  }

  std::string synth_expansion(const ChatView& v, Rng& rng) {
    const std::string question = last_question_line(v.user_text);
    const char letter = answered_letter(question, rng, cfg_.behavior.expand_wrong_rate);
    const std::size_t n_sent = 3 + rng.below(3);
    std::string out = " ";
    for (std::size_t i = 0; i < n_sent; ++i) {
      out += rng.pick(pools::expansion_sentences());
      out += ' ';
    }
    if (rng.chance(cfg_.behavior.banned_phrase_rate))
      out += "As the image description says, the rest of the area is uncluttered. ";
    if (!rng.chance(cfg_.behavior.malformed_think_rate)) out += "</think>\n";
    out += "\nThe answer is (";
    out += letter;
    out += ").";
    return out;
  }

  std::string synth_verifier(Rng& rng) {
    if (rng.chance(cfg_.behavior.garbled_verdict_rate)) return "I cannot decide on this one.";
    if (rng.chance(cfg_.behavior.verifier_no_rate))
      return "Deriving the conclusion from the reflection alone, it points to a different "
             "option than the keyed answer. \\boxed{No}";
    return "Step by step, the reflection's conclusion matches the keyed answer. \\boxed{Yes}";
  }

  std::string synth_behavior_counts(const ChatView& v) {
    const std::size_t pos = v.user_text.find("Trace:\n");
    const std::string trace =
        pos == std::string::npos ? v.user_text : v.user_text.substr(pos + 7);
    nlohmann::json j{
        {"subgoal", count_occurrences(trace, "First,") + count_occurrences(trace, "Next,") +
                        count_occurrences(trace, "break this down")},
        {"backtrack", count_occurrences(trace, "Wait") + count_occurrences(trace, "Actually") +
                          count_occurrences(trace, "On second thought")},
        {"verify", count_occurrences(trace, "verify") + count_occurrences(trace, "double-check") +
                       count_occurrences(trace, "confirm")}};
    return j.dump();
  }

  // --- handlers ------------------------------------------------------------

  void handle_chat(const httplib::Request& req, httplib::Response& res) {
    const std::uint64_t hash = fnv1a64(req.body);
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      res.status = 400;
      res.set_content(R"({"error":"bad json"})", "application/json");
      return;
    }
    const ChatView view = digest(body);

    std::string text;
    std::size_t rule_idx = 0;
    if (const StubRule* rule = match_rule(req.body, view.model, hash, rule_idx)) {
      if (const int status = apply_fault(*rule, rule_idx, hash)) {
        res.status = status;
        res.set_content(R"({"error":"scripted fault"})", "application/json");
        return;
      }
      if (rule->response_text) {
        text = *rule->response_text;
      } else if (!rule->response_sequence.empty()) {
        text = take_sequence(rule_idx, rule->response_sequence);
      }
    }
    if (text.empty()) {
      Rng rng(mix_hash(cfg_.seed, hash));
      if (view.continue_prefix || !view.prefix.empty()) {
        text = synth_expansion(view, rng);
      } else if (contains(view.user_text, "Structured Output Example")) {
        text = synth_stage1(view, rng);
      } else if (contains(view.user_text, "create a single, creative and hard question")) {
        text = synth_stage2(view, rng);
      } else if (contains(view.user_text, "\\boxed{Yes}")) {
        text = synth_verifier(rng);
      } else if (contains(view.user_text, "single JSON object")) {
        text = synth_behavior_counts(view);
      } else if (contains(view.user_text, "multiple-choice question")) {
        text = synth_solve(view, rng);
      } else {
        text = "ok " + to_hex(hash);
      }
    }

    nlohmann::json out{
        {"choices",
         {{{"message", {{"role", "assistant"}, {"content", text}}}, {"finish_reason", "stop"}}}},
        {"usage",
         {{"prompt_tokens", static_cast<long>(view.user_text.size() / 4)},
          {"completion_tokens", static_cast<long>(text.size() / 4)},
          {"total_tokens", static_cast<long>((view.user_text.size() + text.size()) / 4)}}},
        {"model", view.model}};
    res.set_content(out.dump(), "application/json");
  }

  void handle_embeddings(const httplib::Request& req, httplib::Response& res) {
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(req.body);
    } catch (const nlohmann::json::exception&) {
      res.status = 400;
      res.set_content(R"({"error":"bad json"})", "application/json");
      return;
    }
    nlohmann::json data = nlohmann::json::array();
    std::size_t index = 0;
    for (const auto& t : body.value("input", std::vector<std::string>{})) {
      std::vector<double> vec;
      if (auto it = cfg_.embedding_overrides.find(t); it != cfg_.embedding_overrides.end()) {
        vec = it->second;
      } else {
        Rng rng(fnv1a64(t));  // text-keyed: identical strings embed identically
        vec.resize(cfg_.embedding_dim);
        double norm = 0;
        for (auto& x : vec) {
          x = rng.unit() * 2.0 - 1.0;
          norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : vec) x /= norm;
      }
      data.push_back({{"embedding", vec}, {"index", index++}});
    }
    nlohmann::json out{{"data", data}, {"model", body.value("model", "")}};
    res.set_content(out.dump(), "application/json");
  }

  StubConfig cfg_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<long> requests_{0};
  std::atomic<long> concurrent_{0};
  std::atomic<long> max_concurrent_{0};
  std::mutex mu_;
  std::string last_body_;
  std::set<std::uint64_t> throttled_;
  std::map<std::size_t, int> fail_counts_;
  std::map<std::size_t, std::size_t> sequence_pos_;
};

}  // namespace vqforge::stub
