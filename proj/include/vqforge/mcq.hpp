#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <json.hpp>

#include "vqforge/corpus.hpp"
#include "vqforge/util.hpp"

namespace vqforge {

enum class McqStage { stage1, stage2 };

inline const char* to_string(McqStage s) { return s == McqStage::stage1 ? "stage1" : "stage2"; }

enum class McqStatus { candidate, verified, accepted, rejected };

struct AnswerRecord {
  char letter = 'A';
  std::string object_label;          // stage1 only
  std::array<long, 4> bbox_px{};     // stage1 only, integer pixels
  std::string answer_text;
};

struct McqItem {
  std::string item_id;
  std::string image_id;
  std::string question;
  std::array<std::string, 4> choices;
  AnswerRecord answer;
  std::string question_type;
  McqStage stage = McqStage::stage1;
  // stage1: the source annotation; stage2: the composed-from item ids.
  std::optional<ObjectAnnotation> source_annotation;
  std::vector<std::string> source_item_ids;
  McqStatus status = McqStatus::candidate;
  std::string status_reason;

  const std::string& answer_choice_text() const {
    return choices[static_cast<std::size_t>(answer.letter - 'A')];
  }
};

struct Violation {
  std::string rule_id;
  std::string message;
};

struct ValidationReport {
  bool ok = true;
  std::vector<Violation> violations;

  void add(std::string rule, std::string message) {
    ok = false;
    violations.push_back({std::move(rule), std::move(message)});
  }
};

struct ValidationLimits {
  std::size_t question_min_chars = 8;
  std::size_t question_max_chars = 600;
};

// ---------------------------------------------------------------------------
// JSON bindings
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const AnswerRecord& a) {
  j = {{"letter", std::string(1, a.letter)}, {"answer_text", a.answer_text}};
  if (!a.object_label.empty()) {
    j["object_label"] = a.object_label;
    j["bbox_px"] = a.bbox_px;
  }
}

inline void from_json(const nlohmann::json& j, AnswerRecord& a) {
  a.letter = j.at("letter").get<std::string>().at(0);
  j.at("answer_text").get_to(a.answer_text);
  a.object_label = j.value("object_label", "");
  if (j.contains("bbox_px")) j.at("bbox_px").get_to(a.bbox_px);
}

inline void to_json(nlohmann::json& j, const McqItem& m) {
  j = {{"item_id", m.item_id},
       {"image_id", m.image_id},
       {"question", m.question},
       {"choices", m.choices},
       {"answer", m.answer},
       {"question_type", m.question_type},
       {"stage", to_string(m.stage)},
       {"status", static_cast<int>(m.status)},
       {"status_reason", m.status_reason}};
  if (m.source_annotation) j["source_annotation"] = *m.source_annotation;
  if (!m.source_item_ids.empty()) j["source_item_ids"] = m.source_item_ids;
}

inline void from_json(const nlohmann::json& j, McqItem& m) {
  j.at("item_id").get_to(m.item_id);
  j.at("image_id").get_to(m.image_id);
  j.at("question").get_to(m.question);
  j.at("choices").get_to(m.choices);
  j.at("answer").get_to(m.answer);
  j.at("question_type").get_to(m.question_type);
  m.stage = j.at("stage").get<std::string>() == "stage2" ? McqStage::stage2 : McqStage::stage1;
  m.status = static_cast<McqStatus>(j.value("status", 0));
  m.status_reason = j.value("status_reason", "");
  if (j.contains("source_annotation"))
    m.source_annotation = j.at("source_annotation").get<ObjectAnnotation>();
  if (j.contains("source_item_ids")) j.at("source_item_ids").get_to(m.source_item_ids);
}

// ---------------------------------------------------------------------------
// Text normalization for option matching
// ---------------------------------------------------------------------------

/// Lowercase, trim, collapse whitespace, and strip one surrounding "(X)"
/// option marker if present. Used when matching free-form answer text
/// against the lettered choices.
inline std::string normalize_for_match(std::string_view s) {
  std::string t = trim(s);
  if (t.size() >= 3 && t[0] == '(' && t[2] == ')' &&
      std::isalpha(static_cast<unsigned char>(t[1]))) {
    t = trim(std::string_view(t).substr(3));
  }
  return collapse_whitespace(to_lower(t));
}

/// Resolves answer text to a choice letter by exact match after
/// normalization. Empty optional when no option or several options match.
inline std::optional<char> resolve_letter_by_text(const std::array<std::string, 4>& choices,
                                                  const std::string& text) {
  const std::string needle = normalize_for_match(text);
  if (needle.empty()) return std::nullopt;
  std::optional<char> found;
  for (int i = 0; i < 4; ++i) {
    if (normalize_for_match(choices[static_cast<std::size_t>(i)]) == needle) {
      if (found) return std::nullopt;  // ambiguous
      found = static_cast<char>('A' + i);
    }
  }
  return found;
}

// ---------------------------------------------------------------------------
// Stage 1 output parsing
// ---------------------------------------------------------------------------

struct ParseError {
  std::string code;     // count_mismatch | tag_unbalanced | choices_malformed | ...
  int block_index = -1; // 0-based block the error was found in, -1 if global
  std::string message;
};

struct Stage1ParseResult {
  bool ok = false;
  std::vector<McqItem> items;
  ParseError error;
};

namespace detail {

// Locates <tag>...</tag> within [from, bound). A close tag at or past the
// bound counts as unbalanced, so a dropped close tag cannot bleed one block
// into the next.
inline bool find_tag_span(const std::string& text, const std::string& tag, std::size_t from,
                          std::size_t bound, std::size_t& body_begin, std::size_t& body_end,
                          std::size_t& after_close) {
  const std::string open = "<" + tag + ">";
  const std::string close = "</" + tag + ">";
  const std::size_t o = text.find(open, from);
  if (o == std::string::npos || o >= bound) return false;
  body_begin = o + open.size();
  const std::size_t c = text.find(close, body_begin);
  if (c == std::string::npos || c >= bound) {
    body_end = std::string::npos;  // caller reports unbalanced
    return true;
  }
  body_end = c;
  after_close = c + close.size();
  return true;
}

inline bool split_choices(const std::string& body, std::array<std::string, 4>& out) {
  static const char* markers[4] = {"(A)", "(B)", "(C)", "(D)"};
  std::size_t pos[4];
  std::size_t from = 0;
  for (int i = 0; i < 4; ++i) {
    pos[i] = body.find(markers[i], from);
    if (pos[i] == std::string::npos) return false;
    from = pos[i] + 3;
  }
  for (int i = 0; i < 4; ++i) {
    const std::size_t begin = pos[i] + 3;
    const std::size_t end = i < 3 ? pos[i + 1] : body.size();
    out[static_cast<std::size_t>(i)] = trim(body.substr(begin, end - begin));
    if (out[static_cast<std::size_t>(i)].empty()) return false;
  }
  return true;
}

// Answer field shape: `label, [x1, y1, x2, y2], answer text`.
inline bool parse_answer_field(const std::string& body, AnswerRecord& out) {
  const std::size_t open = body.find(", [");
  if (open == std::string::npos) return false;
  const std::size_t close = body.find(']', open + 3);
  if (close == std::string::npos) return false;
  out.object_label = trim(body.substr(0, open));
  if (out.object_label.empty()) return false;

  std::string coords = body.substr(open + 3, close - open - 3);
  std::vector<long> values;
  std::size_t start = 0;
  while (start <= coords.size()) {
    std::size_t comma = coords.find(',', start);
    std::string piece = trim(comma == std::string::npos ? coords.substr(start)
                                                        : coords.substr(start, comma - start));
    if (piece.empty()) return false;
    try {
      std::size_t consumed = 0;
      long v = std::stol(piece, &consumed);
      if (consumed != piece.size()) return false;
      values.push_back(v);
    } catch (const std::exception&) {
      return false;
    }
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (values.size() != 4) return false;
  for (int i = 0; i < 4; ++i) out.bbox_px[static_cast<std::size_t>(i)] = values[static_cast<std::size_t>(i)];

  std::string rest = trim(body.substr(close + 1));
  if (!rest.empty() && rest.front() == ',') rest = trim(rest.substr(1));
  if (rest.empty()) return false;
  out.answer_text = rest;
  return true;
}

}  // namespace detail

/// Parses the numbered `<question>/<choices>/<answer>/<type>` block format.
/// Strict: any structural defect rejects the whole batch so the caller can
/// regenerate. The answer letter is resolved by matching the answer text
/// against the choices.
inline Stage1ParseResult parse_stage1_output(const std::string& text, int expected_n) {
  Stage1ParseResult result;
  if (expected_n < 1) {
    result.error = {"bad_expectation", -1, "expected_n must be >= 1"};
    return result;
  }
  std::size_t cursor = 0;
  int block = 0;
  while (true) {
    const std::size_t block_start = text.find("<question>", cursor);
    if (block_start == std::string::npos) break;
    std::size_t bound = text.find("<question>", block_start + 10);
    if (bound == std::string::npos) bound = text.size();

    std::size_t qb, qe, after;
    detail::find_tag_span(text, "question", block_start, bound, qb, qe, after);
    if (qe == std::string::npos) {
      result.error = {"tag_unbalanced", block, "block " + std::to_string(block) +
                                                   ": <question> never closed"};
      return result;
    }
    McqItem item;
    item.question = trim(text.substr(qb, qe - qb));
    cursor = after;

    std::size_t cb, ce;
    if (!detail::find_tag_span(text, "choices", cursor, bound, cb, ce, after) ||
        ce == std::string::npos) {
      result.error = {"tag_unbalanced", block,
                      "block " + std::to_string(block) + ": bad <choices> tags"};
      return result;
    }
    if (!detail::split_choices(text.substr(cb, ce - cb), item.choices)) {
      result.error = {"choices_malformed", block,
                      "block " + std::to_string(block) + ": expected (A)..(D) markers"};
      return result;
    }
    cursor = after;

    std::size_t ab, ae;
    if (!detail::find_tag_span(text, "answer", cursor, bound, ab, ae, after) ||
        ae == std::string::npos) {
      result.error = {"tag_unbalanced", block,
                      "block " + std::to_string(block) + ": bad <answer> tags"};
      return result;
    }
    if (!detail::parse_answer_field(trim(text.substr(ab, ae - ab)), item.answer)) {
      result.error = {"answer_malformed", block,
                      "block " + std::to_string(block) +
                          ": answer must be `label, [x1, y1, x2, y2], text`"};
      return result;
    }
    cursor = after;

    std::size_t tb, te;
    if (!detail::find_tag_span(text, "type", cursor, bound, tb, te, after) ||
        te == std::string::npos) {
      result.error = {"tag_unbalanced", block,
                      "block " + std::to_string(block) + ": bad <type> tags"};
      return result;
    }
    item.question_type = trim(text.substr(tb, te - tb));
    cursor = bound;

    auto letter = resolve_letter_by_text(item.choices, item.answer.answer_text);
    if (!letter) {
      result.error = {"answer_unmatched", block,
                      "block " + std::to_string(block) +
                          ": answer text matches no unique choice"};
      return result;
    }
    item.answer.letter = *letter;
    item.stage = McqStage::stage1;
    result.items.push_back(std::move(item));
    ++block;
  }
  if (block != expected_n) {
    result.error = {"count_mismatch", -1,
                    "expected " + std::to_string(expected_n) + " questions, found " +
                        std::to_string(block)};
    result.items.clear();
    return result;
  }
  result.ok = true;
  return result;
}

/// Canonical serialization of the stage-1 block format, inverse of
/// parse_stage1_output for well-formed items.
inline std::string serialize_stage1(const std::vector<McqItem>& items) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& m = items[i];
    out += std::to_string(i + 1) + ". <question> " + m.question + " </question>\n";
    out += "   <choices> ";
    static const char* letters = "ABCD";
    for (int c = 0; c < 4; ++c) {
      if (c) out += ' ';
      out += '(';
      out += letters[c];
      out += ") " + m.choices[static_cast<std::size_t>(c)];
    }
    out += " </choices>\n";
    out += "   <answer> " + m.answer.object_label + ", [" +
           std::to_string(m.answer.bbox_px[0]) + ", " + std::to_string(m.answer.bbox_px[1]) +
           ", " + std::to_string(m.answer.bbox_px[2]) + ", " +
           std::to_string(m.answer.bbox_px[3]) + "], " + m.answer.answer_text + " </answer>\n";
    out += "   <type> " + m.question_type + " </type>\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stage 2 output parsing
// ---------------------------------------------------------------------------

struct Stage2ParseResult {
  bool ok = false;
  McqItem item;
  ParseError error;
};

/// Parses the `Hard problem / question / (A)../(D).. / Correct answer:`
/// skeleton. Answer resolution prefers an explicit letter; otherwise the
/// answer text is matched against the options.
inline Stage2ParseResult parse_stage2_output(const std::string& text) {
  Stage2ParseResult result;
  const auto lines = split_lines(text);
  std::size_t i = 0;
  while (i < lines.size() && to_lower(trim(lines[i])) != "hard problem") ++i;
  if (i == lines.size()) {
    result.error = {"missing_header", -1, "no `Hard problem` line"};
    return result;
  }
  ++i;

  std::string question;
  for (; i < lines.size(); ++i) {
    const std::string t = trim(lines[i]);
    if (t.rfind("(A)", 0) == 0) break;
    if (t.empty()) continue;
    if (!question.empty()) question += ' ';
    question += t;
  }
  if (question.empty()) {
    result.error = {"missing_question", -1, "no question text before options"};
    return result;
  }

  std::array<std::string, 4> choices;
  int n_opts = 0;
  static const char* markers[4] = {"(A)", "(B)", "(C)", "(D)"};
  for (; i < lines.size() && n_opts < 4; ++i) {
    const std::string t = trim(lines[i]);
    if (t.empty()) continue;
    if (t.rfind(markers[n_opts], 0) != 0) break;
    choices[static_cast<std::size_t>(n_opts)] = trim(t.substr(3));
    if (choices[static_cast<std::size_t>(n_opts)].empty()) break;
    ++n_opts;
  }
  if (n_opts != 4) {
    result.error = {"options_malformed", -1,
                    "expected 4 options (A)..(D), found " + std::to_string(n_opts)};
    return result;
  }

  std::string answer_raw;
  bool found_answer = false;
  for (; i < lines.size(); ++i) {
    const std::string t = trim(lines[i]);
    const std::string lower = to_lower(t);
    if (lower.rfind("correct answer:", 0) == 0) {
      answer_raw = trim(t.substr(std::string("correct answer:").size()));
      found_answer = true;
      break;
    }
  }
  if (!found_answer) {
    result.error = {"missing_answer", -1, "no `Correct answer:` line"};
    return result;
  }
  if (answer_raw.empty()) {
    result.error = {"missing_answer", -1, "`Correct answer:` line is empty"};
    return result;
  }

  // Explicit letter wins over text matching.
  std::optional<char> letter;
  {
    static const std::regex bare(R"(^\(?([A-Da-d])\)?[.!]?$)");
    static const std::regex prefixed(R"(^\(([A-Da-d])\)\s+\S)");
    std::smatch m;
    if (std::regex_match(answer_raw, m, bare) || std::regex_search(answer_raw, m, prefixed)) {
      letter = static_cast<char>(std::toupper(static_cast<unsigned char>(m[1].str()[0])));
    }
  }
  if (!letter) letter = resolve_letter_by_text(choices, answer_raw);
  if (!letter) {
    result.error = {"answer_unmatched", -1, "answer resolves to no unique option"};
    return result;
  }

  result.item.question = question;
  result.item.choices = choices;
  result.item.answer.letter = *letter;
  result.item.answer.answer_text = result.item.answer_choice_text();
  result.item.question_type = "composition";
  result.item.stage = McqStage::stage2;
  result.ok = true;
  return result;
}

inline std::string serialize_stage2(const McqItem& item) {
  std::string out = "Hard problem\n" + item.question + "\n";
  static const char* letters = "ABCD";
  for (int i = 0; i < 4; ++i) {
    out += '(';
    out += letters[i];
    out += ") " + item.choices[static_cast<std::size_t>(i)] + "\n";
  }
  out += "Correct answer: (";
  out += item.answer.letter;
  out += ")\n";
  return out;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Bracketed or parenthesized run of four numbers, the shape of a leaked
/// bounding box.
inline bool has_coordinate_pattern(const std::string& text) {
  static const std::regex pat(
      R"([\[\(]\s*-?\d+(?:\.\d+)?\s*,\s*-?\d+(?:\.\d+)?\s*,\s*-?\d+(?:\.\d+)?\s*,\s*-?\d+(?:\.\d+)?\s*[\]\)])");
  return std::regex_search(text, pat);
}

/// Whole-word, case-insensitive label occurrence; multiword labels match as
/// phrases.
inline bool contains_label_phrase(const std::string& text, const std::string& label) {
  std::string escaped;
  for (char c : label) {
    if (std::isalnum(static_cast<unsigned char>(c)) || c == ' ')
      escaped += c;
    else {
      escaped += '\\';
      escaped += c;
    }
  }
  if (trim(escaped).empty()) return false;
  try {
    const std::regex pat("\\b" + escaped + "\\b", std::regex::icase);
    return std::regex_search(text, pat);
  } catch (const std::regex_error&) {
    return contains(to_lower(text), to_lower(label));
  }
}

inline ValidationReport validate_mcq(const McqItem& item,
                                     const ObjectAnnotation* ann = nullptr,
                                     const ValidationLimits& limits = {}) {
  ValidationReport report;
  for (int i = 0; i < 4; ++i) {
    if (trim(item.choices[static_cast<std::size_t>(i)]).empty())
      report.add("choice_empty", std::string("choice ") + static_cast<char>('A' + i) + " is empty");
  }
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      if (normalize_for_match(item.choices[static_cast<std::size_t>(i)]) ==
          normalize_for_match(item.choices[static_cast<std::size_t>(j)]))
        report.add("choice_duplicate", std::string("choices ") + static_cast<char>('A' + i) +
                                           " and " + static_cast<char>('A' + j) + " coincide");
    }
  }
  if (item.answer.letter < 'A' || item.answer.letter > 'D')
    report.add("answer_letter_invalid", "letter outside A-D");
  else if (normalize_for_match(item.answer.answer_text) !=
           normalize_for_match(item.answer_choice_text()))
    report.add("answer_text_mismatch", "answer text does not match the keyed choice");

  if (has_coordinate_pattern(item.question))
    report.add("coordinate_leak", "question text contains a 4-number coordinate sequence");

  const std::size_t qlen = item.question.size();
  if (qlen < limits.question_min_chars)
    report.add("question_too_short", "question below " +
                                         std::to_string(limits.question_min_chars) + " chars");
  if (qlen > limits.question_max_chars)
    report.add("question_too_long", "question above " +
                                        std::to_string(limits.question_max_chars) + " chars");

  if (item.stage == McqStage::stage1 && ann != nullptr) {
    if (contains_label_phrase(item.question, ann->label))
      report.add("label_leak", "question text contains the literal object label");
    if (to_lower(trim(item.answer.object_label)) != to_lower(trim(ann->label)))
      report.add("answer_label_mismatch", "answer label differs from annotation label");
    for (int i = 0; i < 4; ++i) {
      if (item.answer.bbox_px[static_cast<std::size_t>(i)] !=
          std::llround(ann->bbox_px[static_cast<std::size_t>(i)])) {
        report.add("answer_bbox_mismatch", "answer box differs from annotation box");
        break;
      }
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Answer letter extraction, verdicts, think format
// ---------------------------------------------------------------------------

struct AnswerMatch {
  char letter = 'A';
  std::size_t begin = 0;  // offset in the input text where the answer region starts
};

/// Recognizes a final-answer letter in the forms `A`, `(A)`, `(A) text`,
/// `\boxed{A}` and `Answer: A`, scanning the tail after `</think>` when the
/// tag is present. Ambiguity yields no result.
inline std::optional<AnswerMatch> extract_answer_detailed(const std::string& text) {
  std::size_t seg_begin = 0;
  const std::size_t think_end = text.rfind("</think>");
  if (think_end != std::string::npos) seg_begin = think_end + std::string("</think>").size();
  const std::string segment = text.substr(seg_begin);

  auto upper = [](char c) { return static_cast<char>(std::toupper(static_cast<unsigned char>(c))); };

  // 1. \boxed{X} — last occurrence wins.
  {
    static const std::regex boxed(R"(\\boxed\{\s*\(?([A-Da-d])\)?\s*\})");
    std::optional<AnswerMatch> last;
    for (auto it = std::sregex_iterator(segment.begin(), segment.end(), boxed);
         it != std::sregex_iterator(); ++it) {
      last = AnswerMatch{upper((*it)[1].str()[0]),
                         seg_begin + static_cast<std::size_t>(it->position())};
    }
    if (last) return last;
  }
  // 2. Answer cue — last occurrence wins.
  {
    static const std::regex cue(
        R"((?:final answer|correct answer|answer)\s*(?:is|:)\s*\**\s*\(?([A-Da-d])\)?(?![A-Za-z0-9]))",
        std::regex::icase);
    std::optional<AnswerMatch> last;
    for (auto it = std::sregex_iterator(segment.begin(), segment.end(), cue);
         it != std::sregex_iterator(); ++it) {
      last = AnswerMatch{upper((*it)[1].str()[0]),
                         seg_begin + static_cast<std::size_t>(it->position())};
    }
    if (last) return last;
  }
  // 3. Parenthesized option markers: unique letter or nothing.
  {
    static const std::regex paren(R"(\(([A-Da-d])\))");
    std::optional<AnswerMatch> first;
    char seen = 0;
    for (auto it = std::sregex_iterator(segment.begin(), segment.end(), paren);
         it != std::sregex_iterator(); ++it) {
      const char l = upper((*it)[1].str()[0]);
      if (!seen) {
        seen = l;
        first = AnswerMatch{l, seg_begin + static_cast<std::size_t>(it->position())};
      } else if (seen != l) {
        return std::nullopt;  // several distinct markers: ambiguous
      }
    }
    if (first) return first;
  }
  // 4. The whole tail is just a letter.
  {
    static const std::regex bare(R"(^\(?([A-Da-d])\)?[.!]?$)");
    std::smatch m;
    const std::string t = trim(segment);
    if (std::regex_match(t, m, bare))
      return AnswerMatch{upper(m[1].str()[0]), seg_begin};
  }
  return std::nullopt;
}

inline std::optional<char> extract_answer_letter(const std::string& text) {
  auto m = extract_answer_detailed(text);
  if (!m) return std::nullopt;
  return m->letter;
}

enum class Verdict { consistent, inconsistent };

/// Last \boxed{Yes}/\boxed{No} decides; payload case-insensitive. Empty
/// optional when no boxed verdict exists.
inline std::optional<Verdict> parse_verdict(const std::string& text) {
  static const std::regex boxed(R"(\\boxed\{\s*(yes|no)\s*\})", std::regex::icase);
  std::optional<Verdict> last;
  for (auto it = std::sregex_iterator(text.begin(), text.end(), boxed);
       it != std::sregex_iterator(); ++it) {
    last = to_lower((*it)[1].str()) == "yes" ? Verdict::consistent : Verdict::inconsistent;
  }
  return last;
}

inline bool check_think_format(const std::string& text) {
  const std::size_t open = text.find("<think>");
  if (open == std::string::npos) return false;
  const std::size_t close = text.find("</think>");
  return close != std::string::npos && open < close;
}

}  // namespace vqforge
