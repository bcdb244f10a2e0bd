#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "vqforge/corpus.hpp"
#include "vqforge/util.hpp"

namespace vqforge {

struct PromptText {
  std::string system;  // may be empty
  std::string user;
};

struct ChatMessage {
  std::string role;  // system | user | assistant
  std::string content;
  std::string image_uri;  // empty unless the message carries an image
};

// Ordered chat turn list. assistant_prefix, when set, is the final element of
// the conversation: the model is asked to continue it rather than start fresh.
struct ChatMessages {
  std::vector<ChatMessage> messages;
  std::optional<std::string> assistant_prefix;
};

inline ChatMessages to_chat(const PromptText& p, const std::string& image_uri = "") {
  ChatMessages m;
  if (!p.system.empty()) m.messages.push_back({"system", p.system, ""});
  m.messages.push_back({"user", p.user, image_uri});
  return m;
}

class TemplateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loads `*.tmpl` assets from a directory and renders them with exact
/// `{{name}}` substitution. Rendering fails if any placeholder is left
/// unresolved.
class TemplateStore {
 public:
  explicit TemplateStore(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir))
      throw TemplateError("template directory not found: " + dir.string());
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (entry.path().extension() != ".tmpl") continue;
      std::ifstream in(entry.path(), std::ios::binary);
      std::ostringstream body;
      body << in.rdbuf();
      templates_[entry.path().stem().string()] = body.str();
    }
    for (const char* name : {"stage1_mcq", "stage2_compose", "cot_verify", "mcq_verify",
                             "solve_mcq", "behavior_count"}) {
      if (!templates_.count(name))
        throw TemplateError(std::string("missing template asset: ") + name + ".tmpl");
    }
  }

  std::string render(const std::string& name,
                     const std::map<std::string, std::string>& vars) const {
    auto it = templates_.find(name);
    if (it == templates_.end()) throw TemplateError("unknown template: " + name);
    std::string out = it->second;
    for (const auto& [key, value] : vars) {
      const std::string slot = "{{" + key + "}}";
      std::size_t pos = 0;
      while ((pos = out.find(slot, pos)) != std::string::npos) {
        out.replace(pos, slot.size(), value);
        pos += value.size();
      }
    }
    if (auto pos = out.find("{{"); pos != std::string::npos) {
      auto end = out.find("}}", pos);
      std::string slot = end == std::string::npos ? out.substr(pos, 24)
                                                  : out.substr(pos, end - pos + 2);
      throw TemplateError("unresolved placeholder " + slot + " in template " + name);
    }
    return out;
  }

 private:
  std::map<std::string, std::string> templates_;
};

/// Per-category question quota: round-half-up of num_questions * 0.25 for
/// each of the four categories. The quota is prompt guidance only; the
/// enforced total stays num_questions.
inline std::array<int, 4> category_quota(int num_questions) {
  if (num_questions < 1) throw std::invalid_argument("num_questions must be >= 1");
  const int q = static_cast<int>(std::floor(num_questions * 0.25 + 0.5));
  return {q, q, q, q};
}

inline std::string format_choices(const std::array<std::string, 4>& choices) {
  static const char* letters = "ABCD";
  std::string out;
  for (int i = 0; i < 4; ++i) {
    if (i) out += '\n';
    out += '(';
    out += letters[i];
    out += ") ";
    out += choices[static_cast<std::size_t>(i)];
  }
  return out;
}

inline PromptText render_stage1_prompt(const TemplateStore& store, const ImageRecord& record,
                                       const ObjectAnnotation& ann, int num_questions) {
  if (record.caption.empty()) throw TemplateError("record has no caption");
  const auto quota = category_quota(num_questions);
  std::map<std::string, std::string> vars{
      {"num_questions", std::to_string(num_questions)},
      {"category_quota", std::to_string(quota[0])},
      {"category_quota_plural", quota[0] != 1 ? "s" : ""},
      {"image_description", record.caption},
      {"bbox_label", ann.label},
      {"image_width", std::to_string(record.width_px)},
      {"image_height", std::to_string(record.height_px)},
      {"bbox_x1", std::to_string(std::llround(ann.bbox_px[0]))},
      {"bbox_y1", std::to_string(std::llround(ann.bbox_px[1]))},
      {"bbox_x2", std::to_string(std::llround(ann.bbox_px[2]))},
      {"bbox_y2", std::to_string(std::llround(ann.bbox_px[3]))},
  };
  return {"", store.render("stage1_mcq", vars)};
}

struct SubProblem {
  std::string question;
  std::array<std::string, 4> choices;
  char answer_letter = 'A';
  std::string answer_text;
};

inline PromptText render_stage2_prompt(const TemplateStore& store, const std::string& caption,
                                       const std::vector<SubProblem>& qa_pairs) {
  if (qa_pairs.size() < 2)
    throw TemplateError("composition needs at least 2 sub-problems, got " +
                        std::to_string(qa_pairs.size()));
  if (qa_pairs.size() > 5)
    throw TemplateError("composition takes at most 5 sub-problems, got " +
                        std::to_string(qa_pairs.size()));
  std::string block;
  for (std::size_t i = 0; i < qa_pairs.size(); ++i) {
    const auto& p = qa_pairs[i];
    if (i) block += "\n\n";
    block += "Problem " + std::to_string(i + 1) + ": " + p.question + "\n";
    block += format_choices(p.choices);
    block += "\nAnswer: (";
    block += p.answer_letter;
    block += ") " + p.answer_text;
  }
  return {"", store.render("stage2_compose", {{"caption", caption}, {"subproblems", block}})};
}

/// Continuation-priming structure for thought expansion: the user turn holds
/// the caption and question, the assistant prefix holds "<think>" + z1 so the
/// model extends the existing rationale instead of rewriting it.
inline ChatMessages render_expansion_prompt(const std::string& caption,
                                            const std::string& question_block,
                                            const std::string& z1) {
  if (z1.empty()) throw TemplateError("expansion requires a non-empty initial rationale");
  ChatMessages m;
  m.messages.push_back({"user", caption + "\n\n" + question_block, ""});
  m.assistant_prefix = "<think>" + z1;
  return m;
}

/// Last-N-words elision used by the trace verification prompt. Texts longer
/// than the window keep only their tail, marked with a leading ellipsis.
inline std::string elide_to_last_words(const std::string& text, std::size_t n_words) {
  const auto words = split_words(text);
  if (words.size() <= n_words) return trim(text);
  std::vector<std::string> tail(words.end() - static_cast<std::ptrdiff_t>(n_words), words.end());
  return "... " + join(tail, " ");
}

inline PromptText render_verification_prompt(const TemplateStore& store,
                                             const std::string& question,
                                             const std::string& answer,
                                             const std::string& reflection) {
  if (question.empty() || answer.empty() || reflection.empty())
    throw TemplateError("verification prompt requires question, answer and reflection");
  return {"", store.render("cot_verify", {{"question", question},
                                          {"answer", answer},
                                          {"reflection", elide_to_last_words(reflection, 30)}})};
}

inline PromptText render_mcq_verifier_prompt(const TemplateStore& store,
                                             const std::string& caption,
                                             const std::string& question,
                                             const std::array<std::string, 4>& choices,
                                             char answer_letter,
                                             const std::string& answer_text) {
  return {"", store.render("mcq_verify", {{"caption", caption},
                                          {"question", question},
                                          {"choices", format_choices(choices)},
                                          {"answer_letter", std::string(1, answer_letter)},
                                          {"answer_text", answer_text}})};
}

/// Solve prompt used for distillation, self-consistency and complexity
/// rollouts. `caption` empty means the image itself is the context.
inline PromptText render_solve_prompt(const TemplateStore& store, const std::string& question,
                                      const std::array<std::string, 4>& choices,
                                      const std::string& caption = "") {
  std::string context = caption.empty() ? "" : "Image description: " + caption + "\n\n";
  return {"", store.render("solve_mcq", {{"context", context},
                                         {"question", question},
                                         {"choices", format_choices(choices)}})};
}

inline PromptText render_behavior_prompt(const TemplateStore& store,
                                         const std::string& trace_text) {
  return {"", store.render("behavior_count", {{"trace", trace_text}})};
}

}  // namespace vqforge
