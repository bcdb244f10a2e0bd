#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqforge/mcq.hpp"
#include "vqforge/traces.hpp"
#include "vqforge/util.hpp"

namespace vqforge {

struct PairSide {
  std::string thought;
  char letter = 'A';
  std::string answer_text;
};

// Pair kinds mirror the three preference orderings:
//   correctness_simple    (z1+, a1+) > (z1-, a1-)
//   correctness_expanded  (z1- + z2+, a2+) > (z1-, a1-)
//   compactness           (z1+, a1+) > (z1+ + z2+, a2+)
struct PreferencePair {
  std::string pair_id;
  std::string item_id;
  McqStage stage = McqStage::stage1;
  std::string prompt;
  std::string image_uri;
  PairSide chosen;
  PairSide rejected;
  std::string pair_kind;
};

struct ExportConfig {
  int pair_cap_per_kind = 2;
};

/// Builds every §-ordering pair the item's traces support, capped per kind.
/// Traces must already be classified; filtered traces never pair.
inline std::vector<PreferencePair> build_preference_pairs(
    const McqItem& item, const std::vector<ReasoningTrace>& traces,
    const std::string& prompt_text, const std::string& image_uri, int cap_per_kind) {
  std::vector<const ReasoningTrace*> pos, neg;
  for (const auto& t : traces) {
    if (t.outcome == TraceOutcome::filtered) continue;
    (t.z1_correct ? pos : neg).push_back(&t);
  }
  auto choice_text = [&](char letter) {
    return item.choices[static_cast<std::size_t>(letter - 'A')];
  };
  std::vector<PreferencePair> pairs;
  int n_kind = 0;
  auto emit = [&](const char* kind, PairSide chosen, PairSide rejected) {
    PreferencePair p;
    p.item_id = item.item_id;
    p.pair_id = item.item_id + "/p" + std::to_string(pairs.size());
    p.stage = item.stage;
    p.prompt = prompt_text;
    p.image_uri = image_uri;
    p.chosen = std::move(chosen);
    p.rejected = std::move(rejected);
    p.pair_kind = kind;
    pairs.push_back(std::move(p));
    ++n_kind;
  };

  n_kind = 0;
  for (const auto* p : pos) {
    for (const auto* n : neg) {
      if (n_kind >= cap_per_kind) break;
      emit("correctness_simple", {p->z1, p->a1, choice_text(p->a1)},
           {n->z1, n->a1, choice_text(n->a1)});
    }
    if (n_kind >= cap_per_kind) break;
  }

  n_kind = 0;
  for (const auto* n : neg) {
    if (n_kind >= cap_per_kind) break;
    if (!n->z2 || !n->a2_correct || !*n->a2_correct || n->expansion_format_incomplete) continue;
    emit("correctness_expanded", {n->z1 + *n->z2, *n->a2, choice_text(*n->a2)},
         {n->z1, n->a1, choice_text(n->a1)});
  }

  n_kind = 0;
  for (const auto* p : pos) {
    if (n_kind >= cap_per_kind) break;
    if (!expansion_usable(*p)) continue;
    emit("compactness", {p->z1, p->a1, choice_text(p->a1)},
         {p->z1 + *p->z2, *p->a2, choice_text(*p->a2)});
  }
  return pairs;
}

/// Think-tag framing happens here, from structured fields only.
inline std::string render_response(const std::string& thought, char letter,
                                   const std::string& answer_text) {
  std::string out = "<think>" + thought + "</think>\nThe answer is (";
  out += letter;
  out += ") " + answer_text + ".";
  return out;
}

struct SftExample {
  std::string item_id;
  McqStage stage = McqStage::stage1;
  std::string image_uri;
  std::string prompt;
  std::string response;
  char gold_letter = 'A';
};

inline SftExample make_sft_example(const McqItem& item, const ReasoningTrace& trace,
                                   const std::string& prompt_text,
                                   const std::string& image_uri) {
  const char letter = expansion_usable(trace) ? *trace.a2 : trace.a1;
  SftExample e;
  e.item_id = trace.trace_id;
  e.stage = item.stage;
  e.image_uri = image_uri;
  e.prompt = prompt_text;
  e.response = render_response(sft_thought(trace), letter,
                               item.choices[static_cast<std::size_t>(letter - 'A')]);
  e.gold_letter = item.answer.letter;
  return e;
}

enum class RlVariant { bare, parenthesized, parenthesized_text };

inline const char* to_string(RlVariant v) {
  switch (v) {
    case RlVariant::bare: return "A";
    case RlVariant::parenthesized: return "(A)";
    default: return "(A) text";
  }
}

/// Deterministic per-item variant assignment over the three label formats.
inline RlVariant rl_variant_for(const std::string& item_id) {
  return static_cast<RlVariant>(fnv1a64(item_id) % 3);
}

inline std::string gold_answer_string(RlVariant v, char letter, const std::string& text) {
  switch (v) {
    case RlVariant::bare: return std::string(1, letter);
    case RlVariant::parenthesized: return std::string("(") + letter + ")";
    default: return std::string("(") + letter + ") " + text;
  }
}

struct RlPrompt {
  std::string item_id;
  McqStage stage = McqStage::stage1;
  std::string image_uri;
  std::string prompt;
  char gold_letter = 'A';
  std::string gold_text;
  RlVariant variant = RlVariant::bare;
};

inline RlPrompt make_rl_prompt(const McqItem& item, const std::string& prompt_text,
                               const std::string& image_uri) {
  if (item.answer_choice_text().empty())
    throw std::invalid_argument("item has no gold answer text: " + item.item_id);
  RlPrompt r;
  r.item_id = item.item_id;
  r.stage = item.stage;
  r.image_uri = image_uri;
  r.prompt = prompt_text;
  r.gold_letter = item.answer.letter;
  r.gold_text = item.answer_choice_text();
  r.variant = rl_variant_for(item.item_id);
  return r;
}

/// GRPO reward: 1 for a judge-confirmed answer, plus 0.1 when the response
/// carries well-formed think tags. Range is exactly {0, 0.1, 1.0, 1.1}.
inline double compute_reward(const std::string& response, char gold_letter, bool judge_correct) {
  (void)gold_letter;  // correctness is the judge's call; kept for call-site symmetry
  double reward = judge_correct ? 1.0 : 0.0;
  if (check_think_format(response)) reward += 0.1;
  return reward;
}

// ---------------------------------------------------------------------------
// Serialization + schema validation
// ---------------------------------------------------------------------------

inline nlohmann::json sft_record(const SftExample& e) {
  return {{"schema", "vqforge.sft.v1"},
          {"item_id", e.item_id},
          {"stage", to_string(e.stage)},
          {"images", {e.image_uri}},
          {"gold_letter", std::string(1, e.gold_letter)},
          {"conversations",
           {{{"from", "user"}, {"value", e.prompt}},
            {{"from", "assistant"}, {"value", e.response}}}}};
}

inline nlohmann::json dpo_record(const PreferencePair& p) {
  return {{"schema", "vqforge.dpo.v1"},
          {"item_id", p.item_id},
          {"pair_id", p.pair_id},
          {"pair_kind", p.pair_kind},
          {"stage", to_string(p.stage)},
          {"images", {p.image_uri}},
          {"prompt", p.prompt},
          {"chosen", render_response(p.chosen.thought, p.chosen.letter, p.chosen.answer_text)},
          {"rejected",
           render_response(p.rejected.thought, p.rejected.letter, p.rejected.answer_text)}};
}

inline nlohmann::json rl_record(const RlPrompt& r) {
  return {{"schema", "vqforge.rl.v1"},
          {"item_id", r.item_id},
          {"stage", to_string(r.stage)},
          {"images", {r.image_uri}},
          {"prompt", r.prompt},
          {"gold_letter", std::string(1, r.gold_letter)},
          {"gold_text", r.gold_text},
          {"gold_answer", gold_answer_string(r.variant, r.gold_letter, r.gold_text)},
          {"answer_format_variant", to_string(r.variant)}};
}

inline std::vector<std::string> validate_sft_record(const nlohmann::json& j) {
  std::vector<std::string> problems;
  if (j.value("schema", "") != "vqforge.sft.v1") problems.push_back("bad schema id");
  for (const char* k : {"item_id", "stage", "images", "conversations", "gold_letter"})
    if (!j.contains(k)) problems.push_back(std::string("missing field ") + k);
  if (!problems.empty()) return problems;
  const auto& conv = j["conversations"];
  if (!conv.is_array() || conv.size() != 2) {
    problems.push_back("conversations must hold user+assistant turns");
    return problems;
  }
  const std::string response = conv[1].value("value", "");
  if (!check_think_format(response)) problems.push_back("response lacks think framing");
  const auto letter = extract_answer_letter(response);
  if (!letter)
    problems.push_back("no extractable final answer");
  else if (std::string(1, *letter) != j["gold_letter"].get<std::string>())
    problems.push_back("final answer differs from gold");
  return problems;
}

inline std::vector<std::string> validate_dpo_record(const nlohmann::json& j) {
  std::vector<std::string> problems;
  if (j.value("schema", "") != "vqforge.dpo.v1") problems.push_back("bad schema id");
  for (const char* k : {"item_id", "pair_kind", "stage", "prompt", "chosen", "rejected"})
    if (!j.contains(k)) problems.push_back(std::string("missing field ") + k);
  if (!problems.empty()) return problems;
  for (const char* side : {"chosen", "rejected"}) {
    const std::string text = j[side].get<std::string>();
    if (!check_think_format(text))
      problems.push_back(std::string(side) + " lacks think framing");
  }
  if (j["chosen"] == j["rejected"]) problems.push_back("chosen equals rejected");
  return problems;
}

inline std::vector<std::string> validate_rl_record(const nlohmann::json& j) {
  std::vector<std::string> problems;
  if (j.value("schema", "") != "vqforge.rl.v1") problems.push_back("bad schema id");
  for (const char* k :
       {"item_id", "stage", "prompt", "gold_letter", "gold_text", "answer_format_variant"})
    if (!j.contains(k)) problems.push_back(std::string("missing field ") + k);
  if (problems.empty() && j["gold_text"].get<std::string>().empty())
    problems.push_back("gold_text empty");
  return problems;
}

/// Writes one JSON record per line, atomically (temp file + rename).
inline std::size_t write_jsonl(const std::filesystem::path& path,
                               const std::vector<nlohmann::json>& records) {
  std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out.good()) throw std::runtime_error("cannot write " + tmp.string());
    for (const auto& r : records) out << r.dump() << '\n';
  }
  std::filesystem::rename(tmp, path);
  return records.size();
}

inline std::uint64_t file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.good()) return 0;
  std::ostringstream body;
  body << in.rdbuf();
  return fnv1a64(body.str());
}

}  // namespace vqforge
