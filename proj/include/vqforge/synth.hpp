#pragma once

#include <optional>
#include <string>
#include <vector>

#include "vqforge/corpus.hpp"
#include "vqforge/gateway.hpp"
#include "vqforge/mcq.hpp"
#include "vqforge/prompts.hpp"
#include "vqforge/util.hpp"

namespace vqforge {

struct SynthConfig {
  int num_questions_per_object = 4;
  int compose_k_min = 2;
  int compose_k_max = 5;
  int compositions_per_image = 1;
  int consistency_rollouts = 5;
  double consistency_tau = 0.8;
  bool verifier_enabled = true;
  int vlm_rollouts = 2;
  int max_regens = 3;
  ValidationLimits limits;

  void validate() const {
    if (num_questions_per_object < 1)
      throw std::invalid_argument("num_questions_per_object must be >= 1");
    if (compose_k_min < 2 || compose_k_max > 5 || compose_k_min > compose_k_max)
      throw std::invalid_argument("compose K bounds must satisfy 2 <= min <= max <= 5");
    if (consistency_rollouts < 2) throw std::invalid_argument("consistency rollouts must be >= 2");
    if (consistency_tau <= 0.0 || consistency_tau > 1.0)
      throw std::invalid_argument("consistency_tau outside (0,1]");
    if (vlm_rollouts < 1) throw std::invalid_argument("vlm_rollouts must be >= 1");
    if (max_regens < 0) throw std::invalid_argument("max_regens must be >= 0");
  }
};

struct DroppedCandidate {
  McqItem item;
  std::vector<Violation> violations;
};

struct Stage1UnitResult {
  std::vector<McqItem> candidates;  // validated, status = candidate
  std::vector<DroppedCandidate> dropped;
  std::optional<ParseError> batch_error;  // set when both parse attempts failed
  int generation_calls = 0;
  long prompt_tokens = 0;
  long completion_tokens = 0;
};

/// Stage-1 grounded MCQ generation for one (image, annotation) unit. A batch
/// that fails to parse, or an item that fails validation, earns exactly one
/// regeneration before being dropped with its reason.
inline Stage1UnitResult generate_stage1(ModelGateway& gw, const TemplateStore& store,
                                        const ImageRecord& record, const ObjectAnnotation& ann,
                                        const SynthConfig& cfg, const std::string& unit_id,
                                        std::uint64_t seed) {
  Stage1UnitResult result;
  const int n = cfg.num_questions_per_object;
  const PromptText prompt = render_stage1_prompt(store, record, ann, n);

  auto generate = [&](int attempt) {
    Completion c = gw.chat_complete("generator", to_chat(prompt), mix_hash(seed, static_cast<std::uint64_t>(attempt)));
    ++result.generation_calls;
    result.prompt_tokens += c.prompt_tokens;
    result.completion_tokens += c.completion_tokens;
    return parse_stage1_output(c.text, n);
  };

  bool regen_available = true;
  Stage1ParseResult parsed = generate(0);
  if (!parsed.ok) {
    regen_available = false;
    parsed = generate(1);
    if (!parsed.ok) {
      result.batch_error = parsed.error;
      return result;
    }
  }

  auto adopt = [&](std::vector<McqItem>& items, const char* id_prefix) {
    for (std::size_t i = 0; i < items.size(); ++i) {
      items[i].item_id = unit_id + "/" + id_prefix + std::to_string(i);
      items[i].image_id = record.image_id;
      items[i].source_annotation = ann;
      items[i].status = McqStatus::candidate;
    }
  };
  adopt(parsed.items, "q");

  std::vector<DroppedCandidate> failed;
  for (auto& item : parsed.items) {
    ValidationReport report = validate_mcq(item, &ann, cfg.limits);
    if (report.ok) {
      result.candidates.push_back(item);
    } else {
      failed.push_back({item, report.violations});
    }
  }

  if (!failed.empty() && regen_available) {
    Stage1ParseResult retry = generate(1);
    if (retry.ok) {
      adopt(retry.items, "r");
      std::size_t replaced = 0;
      for (auto& item : retry.items) {
        if (replaced >= failed.size()) break;
        ValidationReport report = validate_mcq(item, &ann, cfg.limits);
        if (report.ok) {
          result.candidates.push_back(item);
          ++replaced;
        }
      }
      failed.erase(failed.begin(), failed.begin() + static_cast<std::ptrdiff_t>(replaced));
    }
  }
  for (auto& f : failed) {
    f.item.status = McqStatus::rejected;
    f.item.status_reason = f.violations.empty() ? "validation" : f.violations.front().rule_id;
    result.dropped.push_back(std::move(f));
  }
  return result;
}

struct VerifyOutcome {
  bool pass = false;
  std::string reason;  // verifier_no | verdict_unparseable, empty on pass
  long prompt_tokens = 0;
  long completion_tokens = 0;
};

/// LLM verification that the caption supports the keyed answer.
inline VerifyOutcome verify_mcq_llm(ModelGateway& gw, const TemplateStore& store,
                                    const McqItem& item, const std::string& caption,
                                    std::uint64_t seed) {
  VerifyOutcome out;
  const PromptText prompt = render_mcq_verifier_prompt(
      store, caption, item.question, item.choices, item.answer.letter, item.answer_choice_text());
  for (int attempt = 0; attempt < 2; ++attempt) {
    Completion c = gw.chat_complete("verifier", to_chat(prompt),
                                    mix_hash(seed, static_cast<std::uint64_t>(attempt)));
    out.prompt_tokens += c.prompt_tokens;
    out.completion_tokens += c.completion_tokens;
    if (auto verdict = parse_verdict(c.text)) {
      out.pass = *verdict == Verdict::consistent;
      if (!out.pass) out.reason = "verifier_no";
      return out;
    }
  }
  out.pass = false;
  out.reason = "verdict_unparseable";
  return out;
}

struct ComposeResult {
  bool skipped = false;
  std::string skip_reason;
  McqItem item;
  int k = 0;
  int generation_calls = 0;
  long prompt_tokens = 0;
  long completion_tokens = 0;
};

/// Composition hardening: sample K accepted stage-1 items of one image and
/// ask the generator to merge them into a single harder problem.
inline ComposeResult compose_stage2(ModelGateway& gw, const TemplateStore& store,
                                    const ImageRecord& record, const std::vector<McqItem>& pool,
                                    const SynthConfig& cfg, int comp_idx, std::uint64_t seed) {
  ComposeResult result;
  if (pool.size() < static_cast<std::size_t>(cfg.compose_k_min)) {
    result.skipped = true;
    result.skip_reason = "pool_too_small";
    return result;
  }
  Rng rng(seed);
  const int span = cfg.compose_k_max - cfg.compose_k_min + 1;
  int k = cfg.compose_k_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
  k = std::min<int>(k, static_cast<int>(pool.size()));
  result.k = k;

  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);

  std::vector<SubProblem> subs;
  std::vector<std::string> provenance;
  for (int i = 0; i < k; ++i) {
    const McqItem& src = pool[order[static_cast<std::size_t>(i)]];
    subs.push_back({src.question, src.choices, src.answer.letter, src.answer_choice_text()});
    provenance.push_back(src.item_id);
  }
  const PromptText prompt = render_stage2_prompt(store, record.caption, subs);

  for (int attempt = 0; attempt < 2; ++attempt) {
    Completion c = gw.chat_complete("generator", to_chat(prompt),
                                    mix_hash(seed, 1000 + static_cast<std::uint64_t>(attempt)));
    ++result.generation_calls;
    result.prompt_tokens += c.prompt_tokens;
    result.completion_tokens += c.completion_tokens;
    Stage2ParseResult parsed = parse_stage2_output(c.text);
    if (!parsed.ok) {
      result.skip_reason = parsed.error.code;
      continue;
    }
    ValidationReport report = validate_mcq(parsed.item, nullptr, cfg.limits);
    if (!report.ok) {
      result.skip_reason = report.violations.front().rule_id;
      continue;
    }
    result.item = std::move(parsed.item);
    result.item.item_id = record.image_id + "/c" + std::to_string(comp_idx);
    result.item.image_id = record.image_id;
    result.item.source_item_ids = provenance;
    result.item.status = McqStatus::candidate;
    result.skipped = false;
    result.skip_reason.clear();
    return result;
  }
  result.skipped = true;
  return result;
}

struct ConsistencyResult {
  std::vector<std::optional<char>> letters;
  int matches = 0;
  double consistency = 0.0;
  bool retained = false;
  long prompt_tokens = 0;
  long completion_tokens = 0;
};

/// Self-consistency filter: the generator solves its own composed question N
/// times; the item survives when the agreement with the keyed answer reaches
/// tau. Rollouts with no extractable letter count as non-matches.
inline ConsistencyResult consistency_filter(ModelGateway& gw, const TemplateStore& store,
                                            const McqItem& item, const std::string& caption,
                                            const SynthConfig& cfg, std::uint64_t seed) {
  ConsistencyResult result;
  const PromptText prompt = render_solve_prompt(store, item.question, item.choices, caption);
  const int n = cfg.consistency_rollouts;
  for (int r = 0; r < n; ++r) {
    Completion c = gw.chat_complete("generator", to_chat(prompt),
                                    mix_hash(seed, 2000 + static_cast<std::uint64_t>(r)));
    result.prompt_tokens += c.prompt_tokens;
    result.completion_tokens += c.completion_tokens;
    auto letter = extract_answer_letter(c.text);
    result.letters.push_back(letter);
    if (letter && *letter == item.answer.letter) ++result.matches;
  }
  result.consistency = static_cast<double>(result.matches) / static_cast<double>(n);
  result.retained = result.consistency >= cfg.consistency_tau;
  return result;
}

}  // namespace vqforge
