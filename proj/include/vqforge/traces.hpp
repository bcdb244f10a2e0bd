#pragma once

#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqforge/gateway.hpp"
#include "vqforge/mcq.hpp"
#include "vqforge/prompts.hpp"
#include "vqforge/synth.hpp"

namespace vqforge {

enum class TraceOutcome { sft_ready, negative_pool, filtered };

inline const char* to_string(TraceOutcome o) {
  switch (o) {
    case TraceOutcome::sft_ready: return "sft_ready";
    case TraceOutcome::negative_pool: return "negative_pool";
    default: return "filtered";
  }
}

// One VLM rollout and its optional expansion. z1/z2 are stored as exact byte
// content; think-tag framing is added at export time, never inside the trace.
struct ReasoningTrace {
  std::string item_id;
  std::string trace_id;
  int rollout = 0;

  std::string z1;  // simple CoT rationale
  char a1 = 'A';
  bool z1_correct = false;

  std::optional<std::string> z2;  // expansion continuation, z1 is its literal prefix context
  std::optional<char> a2;
  std::optional<bool> a2_correct;
  std::optional<bool> expansion_verified;
  bool expansion_format_incomplete = false;
  std::string expansion_filter_reason;  // banned_pattern:* | no_answer | empty_continuation | ...

  TraceOutcome outcome = TraceOutcome::filtered;
  std::string filter_reason;

  long prompt_tokens = 0;
  long completion_tokens = 0;
};

inline void to_json(nlohmann::json& j, const ReasoningTrace& t) {
  j = {{"item_id", t.item_id},
       {"trace_id", t.trace_id},
       {"rollout", t.rollout},
       {"z1", t.z1},
       {"a1", std::string(1, t.a1)},
       {"z1_correct", t.z1_correct},
       {"expansion_format_incomplete", t.expansion_format_incomplete},
       {"expansion_filter_reason", t.expansion_filter_reason},
       {"outcome", to_string(t.outcome)},
       {"filter_reason", t.filter_reason},
       {"prompt_tokens", t.prompt_tokens},
       {"completion_tokens", t.completion_tokens}};
  if (t.z2) j["z2"] = *t.z2;
  if (t.a2) j["a2"] = std::string(1, *t.a2);
  if (t.a2_correct) j["a2_correct"] = *t.a2_correct;
  if (t.expansion_verified) j["expansion_verified"] = *t.expansion_verified;
}

inline void from_json(const nlohmann::json& j, ReasoningTrace& t) {
  j.at("item_id").get_to(t.item_id);
  j.at("trace_id").get_to(t.trace_id);
  j.at("rollout").get_to(t.rollout);
  j.at("z1").get_to(t.z1);
  t.a1 = j.at("a1").get<std::string>().at(0);
  j.at("z1_correct").get_to(t.z1_correct);
  if (j.contains("z2")) t.z2 = j.at("z2").get<std::string>();
  if (j.contains("a2")) t.a2 = j.at("a2").get<std::string>().at(0);
  if (j.contains("a2_correct")) t.a2_correct = j.at("a2_correct").get<bool>();
  if (j.contains("expansion_verified"))
    t.expansion_verified = j.at("expansion_verified").get<bool>();
  t.expansion_format_incomplete = j.value("expansion_format_incomplete", false);
  t.expansion_filter_reason = j.value("expansion_filter_reason", "");
  const std::string o = j.value("outcome", "filtered");
  t.outcome = o == "sft_ready" ? TraceOutcome::sft_ready
              : o == "negative_pool" ? TraceOutcome::negative_pool
                                     : TraceOutcome::filtered;
  t.filter_reason = j.value("filter_reason", "");
  t.prompt_tokens = j.value("prompt_tokens", 0L);
  t.completion_tokens = j.value("completion_tokens", 0L);
}

/// Expansion usable for SFT export and compactness pairing: parsed cleanly,
/// answered correctly, and passed trace verification.
inline bool expansion_usable(const ReasoningTrace& t) {
  return t.z2 && t.a2_correct && *t.a2_correct && !t.expansion_format_incomplete &&
         t.expansion_verified && *t.expansion_verified;
}

/// The thought content a trace would export: z1 extended by a usable z2.
inline std::string sft_thought(const ReasoningTrace& t) {
  return expansion_usable(t) ? t.z1 + *t.z2 : t.z1;
}

struct DistillResult {
  bool ok = false;
  ReasoningTrace trace;
  std::string drop_reason;  // no_answer | empty_rationale
  std::string raw_text;
};

/// Simple-CoT distillation: the VLM sees the image plus the MCQ and produces
/// a rationale and a final letter. Correctness is inferred from the letter.
inline DistillResult distill_simple_cot(ModelGateway& gw, const TemplateStore& store,
                                        const McqItem& item, const std::string& image_uri,
                                        int rollout, std::uint64_t seed) {
  DistillResult result;
  const PromptText prompt = render_solve_prompt(store, item.question, item.choices, "");
  Completion c = gw.chat_complete("vlm", to_chat(prompt, image_uri), seed);
  result.raw_text = c.text;

  const auto match = extract_answer_detailed(c.text);
  if (!match) {
    result.drop_reason = "no_answer";
    return result;
  }
  const std::string z1 = trim(c.text.substr(0, match->begin));
  if (z1.empty()) {
    result.drop_reason = "empty_rationale";
    return result;
  }
  result.ok = true;
  result.trace.item_id = item.item_id;
  result.trace.trace_id = item.item_id + "/t" + std::to_string(rollout);
  result.trace.rollout = rollout;
  result.trace.z1 = z1;
  result.trace.a1 = match->letter;
  result.trace.z1_correct = match->letter == item.answer.letter;
  result.trace.prompt_tokens = c.prompt_tokens;
  result.trace.completion_tokens = c.completion_tokens;
  return result;
}

/// Thought expansion under guided decoding. The reasoner continues
/// "<think>" + z1; the continuation up to the closing tag becomes z2 and the
/// tail yields a2. A missing closing tag keeps the text but flags the trace.
inline void expand_thought(ModelGateway& gw, const McqItem& item, const std::string& caption,
                           ReasoningTrace& trace, const SynthConfig& cfg, std::uint64_t seed) {
  const std::string question_block = item.question + "\n" + format_choices(item.choices);
  const ChatMessages msgs = render_expansion_prompt(caption, question_block, trace.z1);
  const SampleResult res = gw.constrained_sample("reasoner", msgs, seed, cfg.max_regens);
  trace.prompt_tokens += res.completion.prompt_tokens;
  trace.completion_tokens += res.completion.completion_tokens;
  if (!res.accepted) {
    trace.expansion_filter_reason = "banned_pattern:" + res.matched_pattern;
    return;
  }
  const std::string& cont = res.completion.text;
  const std::size_t close = cont.find("</think>");
  std::string z2;
  std::optional<char> a2;
  bool incomplete = false;
  if (close != std::string::npos) {
    z2 = cont.substr(0, close);
    a2 = extract_answer_letter(cont.substr(close + 8));
    if (!a2) {
      trace.expansion_filter_reason = "no_answer";
      return;
    }
  } else {
    incomplete = true;
    a2 = extract_answer_letter(cont);
    if (!a2) {
      trace.expansion_filter_reason = "format_incomplete";
      return;
    }
    z2 = cont;
  }
  if (trim(z2).empty()) {
    trace.expansion_filter_reason = "empty_continuation";
    return;
  }
  trace.z2 = z2;
  trace.a2 = a2;
  trace.a2_correct = *a2 == item.answer.letter;
  trace.expansion_format_incomplete = incomplete;
}

/// Post-hoc verification of a correct expansion against the gold answer.
inline void verify_trace(ModelGateway& gw, const TemplateStore& store, const McqItem& item,
                         ReasoningTrace& trace, std::uint64_t seed) {
  if (!trace.z2 || !trace.a2_correct || !*trace.a2_correct) return;
  const std::string answer = std::string("(") + item.answer.letter + ") " +
                             item.answer_choice_text();
  const PromptText prompt = render_verification_prompt(store, item.question, answer, *trace.z2);
  for (int attempt = 0; attempt < 2; ++attempt) {
    Completion c = gw.chat_complete("verifier", to_chat(prompt),
                                    mix_hash(seed, static_cast<std::uint64_t>(attempt)));
    trace.prompt_tokens += c.prompt_tokens;
    trace.completion_tokens += c.completion_tokens;
    if (auto verdict = parse_verdict(c.text)) {
      trace.expansion_verified = *verdict == Verdict::consistent;
      return;
    }
  }
  trace.expansion_verified = false;
  if (trace.expansion_filter_reason.empty())
    trace.expansion_filter_reason = "verdict_unparseable";
}

/// Total classification: every trace lands in exactly one bucket.
///   sft_ready      correct z1, or an incorrect z1 recovered by a usable
///                  expansion (verified correct continuation)
///   negative_pool  incorrect z1 with no usable recovery
///   filtered       thought leaks a banned pattern
inline void classify_trace(ReasoningTrace& trace, const std::vector<std::regex>& banned) {
  const std::string thought = sft_thought(trace);
  for (const auto& pat : banned) {
    if (std::regex_search(thought, pat)) {
      trace.outcome = TraceOutcome::filtered;
      trace.filter_reason = "banned_leak";
      return;
    }
  }
  if (trace.z1_correct) {
    trace.outcome = TraceOutcome::sft_ready;
    return;
  }
  if (expansion_usable(trace)) {
    trace.outcome = TraceOutcome::sft_ready;  // recovery trace
    return;
  }
  trace.outcome = TraceOutcome::negative_pool;
}

}  // namespace vqforge
