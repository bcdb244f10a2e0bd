#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqforge/gateway.hpp"
#include "vqforge/mcq.hpp"
#include "vqforge/prompts.hpp"

namespace vqforge {

enum class ComplexityBand { easy, medium, hard };

inline const char* to_string(ComplexityBand b) {
  switch (b) {
    case ComplexityBand::easy: return "easy";
    case ComplexityBand::medium: return "medium";
    default: return "hard";
  }
}

/// hard < 0.25 <= medium < 0.75 <= easy
inline ComplexityBand band_for(double pass_rate) {
  if (pass_rate < 0.25) return ComplexityBand::hard;
  if (pass_rate < 0.75) return ComplexityBand::medium;
  return ComplexityBand::easy;
}

struct ComplexityEstimate {
  std::string item_id;
  int rollouts = 0;
  int passes = 0;
  double pass_rate = 0.0;
  ComplexityBand band = ComplexityBand::hard;
};

inline void to_json(nlohmann::json& j, const ComplexityEstimate& c) {
  j = {{"item_id", c.item_id},
       {"rollouts", c.rollouts},
       {"passes", c.passes},
       {"pass_rate", c.pass_rate},
       {"band", to_string(c.band)}};
}

/// Difficulty by rollout agreement: the policy role answers N times; the
/// pass rate is the fraction matching the keyed letter.
inline ComplexityEstimate estimate_complexity(ModelGateway& gw, const TemplateStore& store,
                                              const McqItem& item, const std::string& image_uri,
                                              const std::string& policy_role, int n_rollouts,
                                              std::uint64_t seed) {
  ComplexityEstimate est;
  est.item_id = item.item_id;
  est.rollouts = n_rollouts;
  const PromptText prompt = render_solve_prompt(store, item.question, item.choices, "");
  for (int r = 0; r < n_rollouts; ++r) {
    Completion c = gw.chat_complete(policy_role, to_chat(prompt, image_uri),
                                    mix_hash(seed, static_cast<std::uint64_t>(r)));
    const auto letter = extract_answer_letter(c.text);
    if (letter && *letter == item.answer.letter) ++est.passes;
  }
  est.pass_rate = static_cast<double>(est.passes) / static_cast<double>(n_rollouts);
  est.band = band_for(est.pass_rate);
  return est;
}

struct BehaviorCounts {
  long subgoal = 0;
  long backtrack = 0;
  long verify = 0;
};

inline void to_json(nlohmann::json& j, const BehaviorCounts& b) {
  j = {{"subgoal", b.subgoal}, {"backtrack", b.backtrack}, {"verify", b.verify}};
}

inline void from_json(const nlohmann::json& j, BehaviorCounts& b) {
  j.at("subgoal").get_to(b.subgoal);
  j.at("backtrack").get_to(b.backtrack);
  j.at("verify").get_to(b.verify);
}

// Cue phrases for the offline estimator. Heuristic defaults; configurable.
struct BehaviorCues {
  std::vector<std::string> subgoal{"first,", "next,", "step by step", "break this down",
                                   "subgoal"};
  std::vector<std::string> backtrack{"wait", "actually", "on second thought",
                                     "let me reconsider", "i was wrong"};
  std::vector<std::string> verify{"verify", "double-check", "confirm", "check again",
                                  "let me check"};
};

inline long count_cues(const std::string& lowered, const std::vector<std::string>& cues) {
  long n = 0;
  for (const auto& cue : cues) n += static_cast<long>(count_occurrences(lowered, to_lower(cue)));
  return n;
}

inline BehaviorCounts lexical_behavior_counts(const std::string& trace_text,
                                              const BehaviorCues& cues) {
  const std::string lowered = to_lower(trace_text);
  return {count_cues(lowered, cues.subgoal), count_cues(lowered, cues.backtrack),
          count_cues(lowered, cues.verify)};
}

// First balanced JSON object embedded in free text.
inline std::optional<nlohmann::json> extract_json_object(const std::string& text) {
  const std::size_t begin = text.find('{');
  if (begin == std::string::npos) return std::nullopt;
  int depth = 0;
  for (std::size_t i = begin; i < text.size(); ++i) {
    if (text[i] == '{') ++depth;
    if (text[i] == '}') {
      --depth;
      if (depth == 0) {
        try {
          return nlohmann::json::parse(text.substr(begin, i - begin + 1));
        } catch (const nlohmann::json::exception&) {
          return std::nullopt;
        }
      }
    }
  }
  return std::nullopt;
}

struct BehaviorResult {
  BehaviorCounts counts;
  std::string estimator;  // "judge" | "lexical"
};

/// Judge-based behavior counting with a lexical fallback. One retry on an
/// unparseable judge reply, then the fallback kicks in, labeled as such.
inline BehaviorResult count_cognitive_behaviors(ModelGateway& gw, const TemplateStore& store,
                                                const std::string& trace_text,
                                                const BehaviorCues& cues, std::uint64_t seed) {
  if (trace_text.empty()) return {{0, 0, 0}, "judge"};
  const PromptText prompt = render_behavior_prompt(store, trace_text);
  for (int attempt = 0; attempt < 2; ++attempt) {
    try {
      Completion c = gw.chat_complete("judge", to_chat(prompt),
                                      mix_hash(seed, static_cast<std::uint64_t>(attempt)));
      if (auto obj = extract_json_object(c.text)) {
        BehaviorCounts counts = obj->get<BehaviorCounts>();
        if (counts.subgoal >= 0 && counts.backtrack >= 0 && counts.verify >= 0)
          return {counts, "judge"};
      }
    } catch (const GatewayError&) {
      break;  // judge unreachable: fall back immediately
    } catch (const nlohmann::json::exception&) {
      // malformed counts: retry, then fall back
    }
  }
  return {lexical_behavior_counts(trace_text, cues), "lexical"};
}

struct BehaviorPresence {
  double mean_subgoal = 0.0;
  double mean_backtrack = 0.0;
  double mean_verify = 0.0;
  bool subgoal_present = false;
  bool backtrack_present = false;
  bool verify_present = false;
};

/// A behavior counts as present when its mean count over the sample reaches
/// 0.10. Sample size is capped at 1000 by the caller.
inline BehaviorPresence dataset_behavior_presence(const std::vector<BehaviorCounts>& samples) {
  if (samples.empty()) throw std::invalid_argument("behavior presence needs a non-empty sample");
  BehaviorPresence p;
  for (const auto& s : samples) {
    p.mean_subgoal += static_cast<double>(s.subgoal);
    p.mean_backtrack += static_cast<double>(s.backtrack);
    p.mean_verify += static_cast<double>(s.verify);
  }
  const double n = static_cast<double>(samples.size());
  p.mean_subgoal /= n;
  p.mean_backtrack /= n;
  p.mean_verify /= n;
  constexpr double threshold = 0.10;
  p.subgoal_present = p.mean_subgoal >= threshold;
  p.backtrack_present = p.mean_backtrack >= threshold;
  p.verify_present = p.mean_verify >= threshold;
  return p;
}

inline void to_json(nlohmann::json& j, const BehaviorPresence& p) {
  j = {{"subgoal", {{"mean", p.mean_subgoal}, {"present", p.subgoal_present}}},
       {"backtrack", {{"mean", p.mean_backtrack}, {"present", p.backtrack_present}}},
       {"verify", {{"mean", p.mean_verify}, {"present", p.verify_present}}}};
}

}  // namespace vqforge
